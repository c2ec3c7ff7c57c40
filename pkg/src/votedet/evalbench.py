"""mAP evaluation, greedy NMS baselines, and a latency benchmark harness.

NMS exists here only as the baseline the end-to-end pipeline removes: the
benchmark contrasts a model-only path (NMS phase pinned to zero) against a
model+NMS path and measures how greedy suppression scales with the number
of detections.
"""

from __future__ import annotations

import csv
import json
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, box_corners, iou_aa, iou_oriented
from .tinynet import make_rng


def _iou(a: Box3D, b: Box3D) -> float:
    if a.heading == 0.0 and b.heading == 0.0:
        return iou_aa(a, b)
    return iou_oriented(a, b)


def nms(dets: list[Box3D], iou_threshold: float, class_aware: bool = False) -> list[Box3D]:
    """Greedy descending-score suppression.

    A surviving box suppresses any remaining box whose IoU with it is
    >= iou_threshold; with ``class_aware`` only boxes of the same class
    suppress each other. Returns the kept boxes in descending score order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    n = len(dets)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    # Axis-aligned bounds prefilter: only exact-IoU candidates overlap here.
    corners = np.stack([box_corners(dets[i]) for i in range(n)])
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    labels = np.array([d.label if d.label is not None else -1 for d in dets])
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        alive[i] = False
        kept.append(i)
        cand = alive & np.all(lo <= hi[i], axis=1) & np.all(hi >= lo[i], axis=1)
        if class_aware:
            cand &= labels == labels[i]
        for j in np.flatnonzero(cand):
            if _iou(dets[i], dets[int(j)]) >= iou_threshold:
                alive[j] = False
    return [dets[i] for i in kept]


@dataclass
class EvalReport:
    """Per-class AP at each IoU threshold plus TP/FP/FN counts.

    ``per_class[threshold][class]`` holds {"ap", "tp", "fp", "fn", "num_gt"};
    ``map_at[threshold]`` is the unweighted mean AP over classes present in
    the ground truth.
    """

    thresholds: tuple[float, ...]
    per_class: dict[float, dict[int, dict[str, float]]]
    map_at: dict[float, float]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "per_class": {
                str(t): {str(c): v for c, v in by_class.items()}
                for t, by_class in self.per_class.items()
            },
            "map": {str(t): v for t, v in self.map_at.items()},
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "threshold", "AP", "TP", "FP", "FN"])
            for t in self.thresholds:
                for c in sorted(self.per_class[t]):
                    e = self.per_class[t][c]
                    writer.writerow([c, t, e["ap"], int(e["tp"]), int(e["fp"]), int(e["fn"])])


def _average_precision(tp_flags: list[int], num_gt: int) -> float:
    """All-points interpolated AP from score-ordered TP/FP flags."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum([1 - f for f in tp_flags])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_eval(
    dets_by_scene: dict[str, list[Box3D]],
    gts_by_scene: dict[str, list[Box3D]],
    thresholds: tuple[float, ...] = (0.25, 0.5),
) -> EvalReport:
    """Greedy-matched PR evaluation pooled across scenes.

    Detections are ranked by score (ties broken by scene id, then by the
    detection's index within its scene, so results do not depend on input
    file order). Each ground truth is matchable once per threshold; a true
    positive needs IoU >= threshold with an unmatched same-class gt.
    """
    gt_classes = sorted({int(b.label) for gts in gts_by_scene.values() for b in gts})
    per_class: dict[float, dict[int, dict[str, float]]] = {t: {} for t in thresholds}
    map_at: dict[float, float] = {}
    for t in thresholds:
        aps = []
        for cls in gt_classes:
            ranked = []
            for scene_id, dets in dets_by_scene.items():
                for idx, det in enumerate(dets):
                    if int(det.label) == cls:
                        ranked.append((-float(det.score), str(scene_id), idx, det))
            ranked.sort(key=lambda r: r[:3])
            gt_pool = {
                scene_id: [b for b in gts if int(b.label) == cls]
                for scene_id, gts in gts_by_scene.items()
            }
            num_gt = sum(len(v) for v in gt_pool.values())
            matched = {scene_id: [False] * len(v) for scene_id, v in gt_pool.items()}
            flags = []
            for _, scene_id, _, det in ranked:
                best_iou, best_j = 0.0, -1
                for j, gt in enumerate(gt_pool.get(scene_id, [])):
                    if matched[scene_id][j]:
                        continue
                    iou = _iou(det, gt)
                    if iou > best_iou:
                        best_iou, best_j = iou, j
                if best_j >= 0 and best_iou >= t:
                    matched[scene_id][best_j] = True
                    flags.append(1)
                else:
                    flags.append(0)
            tp = sum(flags)
            ap = _average_precision(flags, num_gt)
            per_class[t][cls] = {
                "ap": ap,
                "tp": float(tp),
                "fp": float(len(flags) - tp),
                "fn": float(num_gt - tp),
                "num_gt": float(num_gt),
            }
            aps.append(ap)
        map_at[t] = float(np.mean(aps)) if aps else 0.0
    return EvalReport(tuple(thresholds), per_class, map_at)


@dataclass
class BenchRecord:
    """Wall-clock phase timings (milliseconds) for one benchmarked setting."""

    label: str
    num_dets: int
    trials: int
    model_ms_median: float
    model_ms_mean: float
    nms_ms_median: float
    nms_ms_mean: float
    environment: str = ""
    nms_run: bool = True

    @property
    def total_ms_median(self) -> float:
        return self.model_ms_median + self.nms_ms_median

    @property
    def total_ms_mean(self) -> float:
        return self.model_ms_mean + self.nms_ms_mean

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "num_dets": self.num_dets,
            "trials": self.trials,
            "model_ms": {"median": self.model_ms_median, "mean": self.model_ms_mean},
            "nms_ms": {"median": self.nms_ms_median, "mean": self.nms_ms_mean},
            "total_ms": {"median": self.total_ms_median, "mean": self.total_ms_mean},
            "nms_run": self.nms_run,
            "environment": self.environment,
        }


def _environment_note() -> str:
    return (
        f"python {platform.python_version()}, numpy {np.__version__}, "
        f"{platform.system()} {platform.machine()}"
    )


def bench(
    model_fn,
    nms_fn=None,
    trials: int = 5,
    warmup: int = 3,
    label: str = "pipeline",
) -> BenchRecord:
    """Time a model-forward callable and an optional NMS pass on its output.

    ``model_fn()`` must return the detections handed to ``nms_fn``. With no
    ``nms_fn`` the NMS phase is reported as exactly 0 ms (end-to-end mode).
    Runs single-threaded on a monotonic clock; ``warmup`` runs are discarded.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    for _ in range(warmup):
        dets = model_fn()
        if nms_fn is not None:
            nms_fn(dets)
    model_ms, nms_ms, n_dets = [], [], 0
    for _ in range(trials):
        t0 = time.perf_counter()
        dets = model_fn()
        model_ms.append((time.perf_counter() - t0) * 1e3)
        n_dets = len(dets)
        if nms_fn is not None:
            t0 = time.perf_counter()
            nms_fn(dets)
            nms_ms.append((time.perf_counter() - t0) * 1e3)
        else:
            nms_ms.append(0.0)
    return BenchRecord(
        label=label,
        num_dets=n_dets,
        trials=trials,
        model_ms_median=statistics.median(model_ms),
        model_ms_mean=statistics.fmean(model_ms),
        nms_ms_median=statistics.median(nms_ms),
        nms_ms_mean=statistics.fmean(nms_ms),
        environment=_environment_note(),
        nms_run=nms_fn is not None,
    )


def synthetic_detections(count: int, seed: int = 0, num_classes: int = 18) -> list[Box3D]:
    """Jittered-grid detections with constant local density.

    The grid pitch stays fixed while the covered area grows with ``count``,
    so greedy NMS always has overlap work to do and its cost scales
    superlinearly with the number of detections.
    """
    rng = make_rng(seed, 97)
    side = int(np.ceil(np.sqrt(count)))
    boxes = []
    for i in range(count):
        gx, gy = divmod(i, side)
        center = np.array(
            [gx * 1.0 + rng.uniform(-0.3, 0.3), gy * 1.0 + rng.uniform(-0.3, 0.3), 1.0]
        )
        size = rng.uniform(0.9, 1.4, size=3)
        boxes.append(
            Box3D(
                center,
                size,
                0.0,
                label=int(rng.integers(num_classes)),
                score=float(rng.uniform(0.05, 1.0)),
            )
        )
    return boxes


def nms_scaling(
    sizes: tuple[int, ...] = (128, 512, 2048),
    trials: int = 3,
    warmup: int = 1,
    iou_threshold: float = 0.25,
    class_aware: bool = False,
    seed: int = 0,
) -> list[BenchRecord]:
    """Time greedy NMS alone on synthetic detection sets of growing size."""
    records = []
    for k in sizes:
        dets = synthetic_detections(k, seed=seed)
        for _ in range(warmup):
            nms(dets, iou_threshold, class_aware)
        samples = []
        for _ in range(trials):
            t0 = time.perf_counter()
            nms(dets, iou_threshold, class_aware)
            samples.append((time.perf_counter() - t0) * 1e3)
        records.append(
            BenchRecord(
                label=f"nms-scaling-{k}",
                num_dets=k,
                trials=trials,
                model_ms_median=0.0,
                model_ms_mean=0.0,
                nms_ms_median=statistics.median(samples),
                nms_ms_mean=statistics.fmean(samples),
                environment=_environment_note(),
            )
        )
    return records


def save_bench_records(records: list[BenchRecord], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in records], fh, indent=2, sort_keys=True)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["label", "num_dets", "trials", "model_ms_median", "nms_ms_median", "total_ms_median"]
            )
            for r in records:
                writer.writerow(
                    [r.label, r.num_dets, r.trials, r.model_ms_median, r.nms_ms_median, r.total_ms_median]
                )
