"""Operator-facing batch commands: scene generation, pipeline runs, mAP
evaluation, latency benchmarks, config sweeps, and a self-test suite.

Exit codes: 0 success, 1 failed checks, 2 unknown command / bad usage,
3 bad config, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, evalbench, pipeline, roi, suppression, synth
from .geometry import Box3D, fps, iou_oriented
from .matching import hungarian
from .pipeline import ParamBundle, PipelineConfig, StageParams, init_bundle, plant_oracle_bundle, run_pipeline
from .roi import FeaturePointSet, roi_pool_multi
from .tinynet import load_params, make_rng


class ConfigError(Exception):
    pass


# Loss-weight sweep grid: (w_cls, w_l1, w_iou, w_cor).
WEIGHT_GRID = [
    (1.0, 0.45, 2.0, 0.25),
    (2.0, 0.45, 2.0, 0.25),
    (1.5, 0.3, 2.0, 0.25),
    (1.5, 0.6, 2.0, 0.25),
    (1.5, 0.45, 1.0, 0.25),
    (1.5, 0.45, 3.0, 0.25),
    (1.5, 0.45, 2.0, 0.1),
    (1.5, 0.45, 2.0, 0.4),
    (1.5, 0.45, 2.0, 0.25),
]

# Proposal-count sweep grid: (initial proposals, kept proposals).
PROPOSAL_GRID = [
    (256, 128),
    (256, 160),
    (256, 192),
    (256, 256),
    (160, 160),
    (160, 128),
]


def _resolve_out(out: str | None) -> Path:
    """--out flag, else the VOTEDET_OUT environment variable."""
    if out is None:
        out = os.environ.get("VOTEDET_OUT")
    if out is None:
        raise ConfigError("no output directory: pass --out or set VOTEDET_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir: Path, command: str, seed: int | None, config_path=None, scenes=()) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": str(config_path) if config_path else None,
        "scenes": [str(s) for s in scenes],
        "out_dir": str(out_dir),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        return PipelineConfig.from_json(path)
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc


def _scene_paths(scenes_arg: str) -> list[Path]:
    p = Path(scenes_arg)
    if p.is_dir():
        paths = sorted(q for q in p.glob("*.json") if not q.name.endswith(".dets.json"))
        paths = [q for q in paths if q.name != "manifest.json"]
    else:
        paths = [p]
    if not paths:
        raise ConfigError(f"no scene files under {scenes_arg}")
    return paths


# --- gen ---------------------------------------------------------------


def cmd_gen(args) -> int:
    out_dir = _resolve_out(args.out)
    if args.spec:
        try:
            spec = synth.GeneratorSpec.from_json(args.spec)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad generator spec: {exc}") from exc
    elif args.oracle_preset:
        spec = synth.GeneratorSpec.oracle_preset(num_objects=args.objects)
    else:
        spec = synth.GeneratorSpec(num_objects=args.objects)
    for i in range(args.count):
        scene = synth.gen_scene(spec, seed=args.seed + i)
        synth.save_scene(scene, out_dir / f"scene_{i:04d}.json")
    _write_manifest(out_dir, "gen", args.seed, args.spec)
    print(f"wrote {args.count} scenes to {out_dir}")
    return 0


# --- run ---------------------------------------------------------------


def _run_one(scene_path: str, cfg_dict: dict, out_dir: str, plant: bool, params_path: str | None) -> str:
    cfg = PipelineConfig.from_dict(cfg_dict)
    scene = synth.load_scene(scene_path)
    bundle = _build_bundle(cfg, plant, params_path)
    result = run_pipeline(scene, cfg, bundle)
    stem = Path(scene_path).stem
    pipeline.save_detections(result, Path(out_dir) / f"{stem}.dets.json")
    pipeline.save_run_report(result, Path(out_dir) / f"{stem}.report.json")
    return stem


def _build_bundle(cfg: PipelineConfig, plant: bool, params_path: str | None) -> ParamBundle:
    if plant and params_path:
        raise ConfigError("--plant-oracle and --params are mutually exclusive")
    if plant:
        return plant_oracle_bundle(cfg)
    if params_path:
        bundle = load_params(params_path, extra_classes=(ParamBundle, StageParams, roi.GateParams))
        if not isinstance(bundle, ParamBundle):
            raise ConfigError(f"{params_path} does not contain a parameter bundle")
        return bundle
    return init_bundle(cfg)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    out_dir = _resolve_out(args.out)
    scene_paths = _scene_paths(args.scenes)
    _build_bundle(cfg, args.plant_oracle, args.params)  # fail fast on bad params
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_run_one, str(p), cfg.to_dict(), str(out_dir), args.plant_oracle, args.params)
                for p in scene_paths
            ]
            for f in futures:
                f.result()
    else:
        for p in scene_paths:
            _run_one(str(p), cfg.to_dict(), str(out_dir), args.plant_oracle, args.params)
    _write_manifest(out_dir, "run", cfg.seed, args.config, scene_paths)
    print(f"ran {len(scene_paths)} scenes -> {out_dir}")
    return 0


# --- eval --------------------------------------------------------------


def _collect_eval_inputs(dets_dir: str, gt_dir: str):
    dets_by_scene, gts_by_scene = {}, {}
    det_paths = sorted(Path(dets_dir).glob("*.dets.json"))
    if not det_paths:
        raise ConfigError(f"no *.dets.json files under {dets_dir}")
    for det_path in det_paths:
        stem = det_path.name[: -len(".dets.json")]
        gt_path = Path(gt_dir) / f"{stem}.json"
        if not gt_path.exists():
            raise ConfigError(f"no ground-truth scene for {det_path.name}")
        scene = synth.load_scene(gt_path)
        dets = pipeline.load_detections(det_path)
        dets_by_scene[stem] = [d.box for d in dets]
        gts_by_scene[stem] = scene.boxes
    return dets_by_scene, gts_by_scene


def cmd_eval(args) -> int:
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    dets_by_scene, gts_by_scene = _collect_eval_inputs(args.dets, args.gt)
    report = evalbench.ap_eval(dets_by_scene, gts_by_scene, thresholds)
    out_dir = _resolve_out(args.out)
    report.save_json(out_dir / "eval_report.json")
    report.save_csv(out_dir / "eval_report.csv")
    _write_manifest(out_dir, "eval", None, None, sorted(dets_by_scene))
    for t in thresholds:
        print(f"mAP@{t:g} = {report.map_at[t]:.4f}")
    return 0


# --- bench -------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    if args.refinements is not None:
        cfg = replace(cfg, refinements=args.refinements)
    if args.scene:
        scene = synth.load_scene(args.scene)
    else:
        spec = synth.GeneratorSpec.oracle_preset(
            num_objects=5,
            num_classes=cfg.num_classes,
            feature_dim=cfg.seed_feature_dim,
            num_seeds=max(384, 2 * cfg.num_proposals),
        )
        scene = synth.gen_scene(spec, seed=cfg.seed)
    bundle = _build_bundle(cfg, args.plant_oracle, args.params)

    def model_fn():
        result = run_pipeline(scene, cfg, bundle, with_loss=False)
        return [d.box for d in result.detections]

    records = [
        evalbench.bench(
            model_fn, None, trials=args.trials, warmup=args.warmup,
            label=f"end-to-end-refine-{cfg.refinements}",
        )
    ]
    if args.nms_baseline:
        records.append(
            evalbench.bench(
                model_fn,
                lambda dets: evalbench.nms(dets, args.nms_threshold, class_aware=True),
                trials=args.trials,
                warmup=args.warmup,
                label=f"baseline-with-nms-refine-{cfg.refinements}",
            )
        )
    sizes = tuple(int(s) for s in args.scaling_sizes.split(",")) if args.scaling_sizes else ()
    if sizes:
        records.extend(
            evalbench.nms_scaling(sizes, trials=args.trials, iou_threshold=args.nms_threshold)
        )
    out_dir = _resolve_out(args.out)
    evalbench.save_bench_records(records, out_dir / "bench.json", out_dir / "bench.csv")
    _write_manifest(out_dir, "bench", cfg.seed, args.config)
    for r in records:
        print(
            f"{r.label}: model {r.model_ms_median:.2f} ms, "
            f"nms {r.nms_ms_median:.2f} ms, total {r.total_ms_median:.2f} ms"
        )
    return 0


# --- sweep -------------------------------------------------------------


def _eval_cell(cfg: PipelineConfig, scenes: list[synth.SceneSample], plant: bool) -> evalbench.EvalReport:
    bundle = plant_oracle_bundle(cfg) if plant else init_bundle(cfg)
    dets_by_scene, gts_by_scene = {}, {}
    for i, scene in enumerate(scenes):
        result = run_pipeline(scene, cfg, bundle, with_loss=False)
        key = f"scene_{i:04d}"
        dets_by_scene[key] = [d.box for d in result.detections]
        gts_by_scene[key] = scene.boxes
    return evalbench.ap_eval(dets_by_scene, gts_by_scene)


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out_dir = _resolve_out(args.out)
    scene_paths = _scene_paths(args.scenes)
    scenes = [synth.load_scene(p) for p in scene_paths]
    rows = []
    if args.grid in ("weights", "both"):
        for w_cls, w_l1, w_iou, w_cor in WEIGHT_GRID:
            cell_cfg = replace(
                cfg,
                cost_weights=replace(cfg.cost_weights, w_cls=w_cls, w_l1=w_l1, w_iou=w_iou, w_cor=w_cor),
            )
            name = f"weights_cls{w_cls}_l1{w_l1}_iou{w_iou}_cor{w_cor}"
            report = _eval_cell(cell_cfg, scenes, args.plant_oracle)
            report.save_json(out_dir / f"{name}.json")
            rows.append((name, report))
    if args.grid in ("proposals", "both"):
        for num_proposals, top_k in PROPOSAL_GRID:
            cell_cfg = replace(cfg, num_proposals=num_proposals, top_k=top_k)
            name = f"proposals_k{num_proposals}_K{top_k}"
            report = _eval_cell(cell_cfg, scenes, args.plant_oracle)
            report.save_json(out_dir / f"{name}.json")
            rows.append((name, report))
    with open(out_dir / "sweep_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "mAP@0.25", "mAP@0.5"])
        for name, report in rows:
            writer.writerow([name, report.map_at.get(0.25, 0.0), report.map_at.get(0.5, 0.0)])
    _write_manifest(out_dir, "sweep", cfg.seed, args.config, scene_paths)
    print(f"swept {len(rows)} cells -> {out_dir}")
    return 0


# --- selftest ----------------------------------------------------------


def _check(name: str, ok: bool, detail: str = "") -> bool:
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] {name}"
    if detail:
        line += f" ({detail})"
    print(line)
    return ok


def _selftest_fps() -> bool:
    rng = make_rng(7, 11)
    ok = True
    for _ in range(20):
        pts = rng.uniform(-5, 5, size=(50, 3))
        idx = fps(pts, 10, start=0)
        # Brute-force greedy reference.
        ref = [0]
        for _ in range(9):
            dists = [min(np.sum((pts[i] - pts[j]) ** 2) for j in ref) for i in range(50)]
            for j in ref:
                dists[j] = -1.0
            ref.append(int(np.argmax(dists)))
        ok &= list(idx) == ref
    return ok


def _selftest_iou(trials: int = 50, samples: int = 20000) -> bool:
    rng = make_rng(7, 12)
    worst = 0.0
    for _ in range(trials):
        a = Box3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 2.0, 3), rng.uniform(-np.pi, np.pi))
        b = Box3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 2.0, 3), rng.uniform(-np.pi, np.pi))
        exact = iou_oriented(a, b)
        mc = _mc_iou(a, b, samples, rng)
        worst = max(worst, abs(exact - mc))
    return worst <= 0.02


def _mc_iou(a: Box3D, b: Box3D, samples: int, rng) -> float:
    from .geometry import box_corners, points_in_box

    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    union = np.count_nonzero(in_a | in_b)
    return float(np.count_nonzero(in_a & in_b) / union) if union else 0.0


def _selftest_hungarian() -> bool:
    rng = make_rng(7, 13)
    perms = list(itertools.permutations(range(5)))
    ok = True
    for _ in range(100):
        cost = rng.uniform(0, 1, size=(5, 5))
        best = min(sum(cost[p, j] for j, p in enumerate(perm)) for perm in perms)
        ok &= abs(hungarian(cost).total_cost - best) < 1e-12
    return ok


def _selftest_roi() -> bool:
    rng = make_rng(7, 14)
    ok = True
    for _ in range(10):
        pts = FeaturePointSet(rng.uniform(-1, 1, size=(60, 3)), rng.normal(size=(60, 8)))
        box = Box3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.5, 1.5, 3), rng.uniform(-np.pi, np.pi))
        pooled = roi_pool_multi(pts, box, (1, 3))
        ok &= pooled.flattened_dim == (1 + 27) * 8
    return ok


def _selftest_suppression(out_dir: Path | None) -> bool:
    scene = synth.gen_scene(synth.GeneratorSpec.oracle_preset(num_objects=5), seed=3)
    labels = suppression.seed_labels(scene.seeds(), scene.boxes)
    pred = scene.oracle
    bg = ~labels.foreground
    raw = np.abs(pred.offsets[bg]).mean()
    gated = np.abs(pred.offsets[bg] * pred.gates()[bg, None]).mean()
    ok = gated <= 0.2 * raw
    if out_dir is not None:
        for gated_flag, name in ((True, "offset_histogram_gated.csv"), (False, "offset_histogram_raw.csv")):
            hist = suppression.offset_magnitude_histogram(pred, labels, gated=gated_flag)
            with open(out_dir / name, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_lo", "bin_hi", "foreground", "background"])
                writer.writerows(hist.csv_rows())
    return ok


def cmd_selftest(args) -> int:
    out_dir = _resolve_out(args.out) if (args.out or os.environ.get("VOTEDET_OUT")) else None
    ok = True
    ok &= _check("fps matches brute-force greedy oracle", _selftest_fps())
    ok &= _check("rotated IoU matches Monte-Carlo oracle", _selftest_iou())
    ok &= _check("hungarian matches permutation brute force", _selftest_hungarian())
    ok &= _check("roi pooling dimensions", _selftest_roi())
    ok &= _check("background offsets suppressed by gating", _selftest_suppression(out_dir))
    if out_dir is not None:
        _write_manifest(out_dir, "selftest", None)
    if not ok:
        print(json.dumps({"error": "selftest", "detail": "one or more checks failed"}), file=sys.stderr)
    return 0 if ok else 1


# --- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="votedet", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    p.add_argument("--spec", help="generator spec JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--objects", type=int, default=5)
    p.add_argument("--oracle-preset", action="store_true", help="use the oracle scene preset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run the pipeline over scenes")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--scenes", required=True, help="scene file or directory")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--params", help="saved parameter bundle JSON")
    p.add_argument("--plant-oracle", action="store_true", help="use planted oracle parameters")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate detections against ground truth")
    p.add_argument("--dets", required=True, help="directory of *.dets.json files")
    p.add_argument("--gt", required=True, help="directory of scene files")
    p.add_argument("--thresholds", default="0.25,0.5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency benchmark")
    p.add_argument("--config")
    p.add_argument("--scene", help="scene file (default: generated)")
    p.add_argument("--refinements", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--nms-baseline", action="store_true", help="also time a with-NMS baseline")
    p.add_argument("--nms-threshold", type=float, default=0.25)
    p.add_argument("--scaling-sizes", default="", help="e.g. 128,512,2048")
    p.add_argument("--params")
    p.add_argument("--plant-oracle", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="loss-weight and proposal-count grids")
    p.add_argument("--config")
    p.add_argument("--scenes", required=True)
    p.add_argument("--grid", choices=("weights", "proposals", "both"), default="both")
    p.add_argument("--plant-oracle", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--out", help="where to write histogram CSVs")
    p.set_defaults(func=cmd_selftest)

    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}), file=sys.stderr)
        return 3
    except OSError as exc:
        print(json.dumps({"error": "io", "detail": str(exc)}), file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
