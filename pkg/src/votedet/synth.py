"""Synthetic scene and feature generation.

Stands in for a learned point-cloud backbone and real datasets: scenes are
ground-truth boxes plus surface and clutter points, with per-seed feature
vectors and an "oracle" vote prediction that is near-perfect on foreground
seeds and adversarially large on background seeds.

Seed features follow a documented channel layout (:class:`FeatureLayout`)
that embeds each object's class, size, heading, and centroid offset, so the
pipeline can be driven by planted selector weights and verified end to end
without any training. Everything is deterministic given (spec, seed).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .geometry import Box3D, fps, points_in_box
from .roi import FeaturePointSet
from .suppression import SeedSet, VotePrediction, suppress_votes
from .tinynet import make_rng

# Gains used by the feature layout and by planted readout weights.
CLASS_GAIN = 4.0  # one-hot spike on the object's class channel
BG_FLOOR = -1.0  # background value on pooled encoding channels
OFFSET_SCALE = 10.0  # offsets are stored divided by this
OBJECTNESS_LOGIT_GAIN = 10.0  # objectness logits = +/- gain * channel value
CLASS_READOUT_GAIN = 8.0  # logit scale of planted classification readouts
SMOOTH_AMP = 0.3
SALT_AMP = 0.05

# Keeps surface points strictly containable under rotated reconstruction.
_SURFACE_INSET = 1e-9


@dataclass(frozen=True)
class FeatureLayout:
    """Channel map of generated seed features.

    [0, num_classes)        class one-hot * CLASS_GAIN (background: BG_FLOOR)
    [cls, cls+3)            log(object size / base size)   (background: BG_FLOOR)
    cls+3                   heading / pi                   (background: BG_FLOOR)
    cls+4                   objectness code: fg in [0.4, 0.8], bg in [-0.8, -0.4]
    [cls+5, cls+8)          centroid offset / OFFSET_SCALE (bg: adversarial)
    [cls+8, dim)            smooth position features + class-salted noise

    Background values on the pooled blocks (class/size/heading) sit at
    BG_FLOOR, strictly below every foreground value, so grid max-pooling
    never lets clutter overwrite object encodings.
    """

    num_classes: int = 18
    dim: int = 256

    @property
    def size_block(self) -> slice:
        return slice(self.num_classes, self.num_classes + 3)

    @property
    def heading_channel(self) -> int:
        return self.num_classes + 3

    @property
    def objectness_channel(self) -> int:
        return self.num_classes + 4

    @property
    def offset_block(self) -> slice:
        return slice(self.num_classes + 5, self.num_classes + 8)

    @property
    def smooth_block(self) -> slice:
        return slice(self.num_classes + 8, self.dim)


@dataclass
class GeneratorSpec:
    """Counts, extents, and knobs of the scene generator."""

    num_objects: int = 5
    extent: tuple[float, float, float] = (8.0, 8.0, 3.0)
    num_classes: int = 18
    num_clutter: int = 300
    num_seeds: int = 384
    points_per_object: int = 40
    min_points: int = 5
    size_range: tuple[float, float] = (0.4, 1.2)
    min_center_gap: float = 1.5
    oriented: bool = False
    oracle: bool = True
    object_z_band: tuple[float, float] | None = None
    clutter_z_band: tuple[float, float] | None = None
    base_box_size: float = 0.5
    feature_dim: int = 256

    def __post_init__(self):
        if self.num_objects < 0 or self.num_clutter < 0:
            raise ValueError("counts must be nonnegative")
        if any(e <= 0 for e in self.extent):
            raise ValueError("extent components must be positive")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError("invalid size range")
        if self.points_per_object < self.min_points:
            raise ValueError("points_per_object must cover min_points")
        # Pooled encodings must stay above the background floor.
        if math.log(self.size_range[0] / self.base_box_size) <= BG_FLOOR:
            raise ValueError(
                "smallest object size too small relative to base_box_size "
                "(its size encoding would collide with the background floor)"
            )

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown generator spec keys: {sorted(unknown)}")
        for key in ("extent", "size_range", "object_z_band", "clutter_z_band"):
            if key in raw and raw[key] is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def oracle_preset(cls, num_objects: int = 5, **overrides) -> "GeneratorSpec":
        """A spec tuned for oracle round trips: objects float in a band well
        above the clutter, so every object's vote cluster is isolated."""
        base = dict(
            num_objects=num_objects,
            object_z_band=(1.4, 2.2),
            clutter_z_band=(0.0, 0.3),
            num_clutter=300,
            num_seeds=384,
            oracle=True,
            oriented=False,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class SceneSample:
    """One generated scene: ground truth, points, seeds, oracle votes."""

    boxes: list[Box3D]
    points: np.ndarray
    seed_positions: np.ndarray
    seed_features: np.ndarray
    seed_object_index: np.ndarray
    oracle: VotePrediction | None = None

    def seeds(self) -> SeedSet:
        return SeedSet(self.seed_positions, self.seed_features)

    def gt_labels(self) -> list[int]:
        return [int(b.label) for b in self.boxes]

    def scene_scale(self) -> np.ndarray:
        """Half-extent of the scene bounding box (points plus GT corners)."""
        from .geometry import box_corners

        pts = [self.points] if len(self.points) else []
        pts += [box_corners(b) for b in self.boxes]
        allp = np.concatenate(pts) if pts else np.zeros((1, 3))
        half = (allp.max(axis=0) - allp.min(axis=0)) / 2.0
        return np.maximum(half, 1e-6)


def _f32(a: np.ndarray) -> np.ndarray:
    """Quantize to float32 precision (files store 32-bit floats)."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _sample_face_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area samples on the box surface, pulled inward a hair."""
    half = box.size / 2.0 * (1.0 - _SURFACE_INSET)
    areas = np.array(
        [
            box.size[1] * box.size[2],  # +/- x faces
            box.size[1] * box.size[2],
            box.size[0] * box.size[2],  # +/- y faces
            box.size[0] * box.size[2],
            box.size[0] * box.size[1],  # +/- z faces
            box.size[0] * box.size[1],
        ]
    )
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    local[np.arange(count), axis] = sign * half[axis]
    from .geometry import rot_z

    return local @ rot_z(box.heading).T + box.center


def _place_boxes(spec: GeneratorSpec, rng: np.random.Generator) -> list[Box3D]:
    ext = np.asarray(spec.extent)
    boxes: list[Box3D] = []
    attempts = 0
    max_attempts = 1000 * max(spec.num_objects, 1)
    while len(boxes) < spec.num_objects:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"could not place {spec.num_objects} objects with gap "
                f"{spec.min_center_gap} inside extent {spec.extent}"
            )
        size = rng.uniform(spec.size_range[0], spec.size_range[1], size=3)
        lo, hi = size / 2.0, ext - size / 2.0
        if (lo >= hi).any():
            continue
        center = rng.uniform(lo, hi)
        if spec.object_z_band is not None:
            z_lo = max(lo[2], spec.object_z_band[0])
            z_hi = min(hi[2], spec.object_z_band[1])
            if z_lo >= z_hi:
                continue
            center[2] = rng.uniform(z_lo, z_hi)
        if any(np.linalg.norm(center - b.center) < spec.min_center_gap for b in boxes):
            continue
        heading = float(rng.uniform(-math.pi, math.pi)) if spec.oriented else 0.0
        label = int(rng.integers(spec.num_classes))
        boxes.append(Box3D(center, size, heading, label=label))
    return boxes


def _sample_clutter(spec: GeneratorSpec, boxes: list[Box3D], rng: np.random.Generator) -> np.ndarray:
    """Uniform clutter over the extent, rejecting points inside any GT box."""
    if spec.num_clutter == 0:
        return np.zeros((0, 3))
    ext = np.asarray(spec.extent)
    lo = np.zeros(3)
    hi = ext.copy()
    if spec.clutter_z_band is not None:
        lo[2], hi[2] = spec.clutter_z_band
    accepted: list[np.ndarray] = []
    guard = 0
    while sum(len(a) for a in accepted) < spec.num_clutter:
        guard += 1
        if guard > 1000:
            raise ValueError("clutter sampling cannot escape the GT boxes; check the spec")
        batch = rng.uniform(lo, hi, size=(max(spec.num_clutter, 64), 3))
        keep = np.ones(len(batch), dtype=bool)
        for box in boxes:
            keep &= ~points_in_box(batch, box)
        accepted.append(batch[keep])
    return np.concatenate(accepted)[: spec.num_clutter]


def _smooth_features(positions: np.ndarray, layout: FeatureLayout, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel functions of position: sin of random projections."""
    n_smooth = layout.smooth_block.stop - layout.smooth_block.start
    freqs = rng.uniform(0.3, 2.0, size=(n_smooth, 3))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_smooth)
    return SMOOTH_AMP * np.sin(positions @ freqs.T + phases)


def gen_scene(spec: GeneratorSpec, seed: int) -> SceneSample:
    """Generate one deterministic scene.

    Foreground seed features carry the object's class/size/heading/offset
    encoding; background seeds carry the BG floor on those blocks, an
    adversarially large raw offset, and objectness favoring the negative
    class by a wide logit margin.
    """
    layout = FeatureLayout(spec.num_classes, spec.feature_dim)
    boxes = _place_boxes(spec, make_rng(seed, 0))
    surf_rng = make_rng(seed, 1)
    surface = [_sample_face_points(b, spec.points_per_object, surf_rng) for b in boxes]
    clutter = _sample_clutter(spec, boxes, make_rng(seed, 2))
    parts = [p for p in surface + [clutter] if len(p)]
    points = np.concatenate(parts) if parts else np.zeros((0, 3))
    provenance = np.concatenate(
        [np.full(len(s), i, dtype=np.int64) for i, s in enumerate(surface)]
        + [np.full(len(clutter), -1, dtype=np.int64)]
    )
    if len(points) == 0:
        raise ValueError("empty scene: no surface or clutter points")

    n_seeds = min(spec.num_seeds, len(points))
    seed_idx = fps(points, n_seeds, start=0)
    seed_pos = points[seed_idx]
    seed_obj = provenance[seed_idx]

    feat_rng = make_rng(seed, 3)
    feats = np.zeros((n_seeds, layout.dim))
    feats[:, layout.smooth_block] = _smooth_features(seed_pos, layout, feat_rng)

    fg = seed_obj >= 0
    bg = ~fg
    # Background: floor on pooled blocks, adversarial offsets, negative objectness.
    feats[np.ix_(bg, np.arange(layout.num_classes))] = BG_FLOOR
    feats[bg, layout.size_block] = BG_FLOOR
    feats[bg, layout.heading_channel] = BG_FLOOR
    obj_rng = make_rng(seed, 4)
    feats[bg, layout.objectness_channel] = obj_rng.uniform(-0.8, -0.4, size=int(bg.sum()))
    adv_rng = make_rng(seed, 5)
    adv = adv_rng.uniform(0.3, 1.0, size=(int(bg.sum()), 3))
    adv *= adv_rng.choice([-1.0, 1.0], size=adv.shape)
    feats[bg, layout.offset_block] = adv

    salt_rng = make_rng(seed, 6)
    class_salt = salt_rng.normal(
        0.0, SALT_AMP, size=(spec.num_classes, layout.smooth_block.stop - layout.smooth_block.start)
    )
    for i, box in enumerate(boxes):
        rows = np.flatnonzero(seed_obj == i)
        if rows.size == 0:
            continue
        feats[rows, int(box.label)] = CLASS_GAIN
        feats[np.ix_(rows, np.arange(*layout.size_block.indices(layout.dim)))] = np.log(
            box.size / spec.base_box_size
        )
        feats[rows, layout.heading_channel] = box.heading / math.pi
        feats[rows, layout.objectness_channel] = obj_rng.uniform(0.4, 0.8, size=rows.size)
        feats[np.ix_(rows, np.arange(*layout.offset_block.indices(layout.dim)))] = (
            box.center - seed_pos[rows]
        ) / OFFSET_SCALE
        feats[np.ix_(rows, np.arange(*layout.smooth_block.indices(layout.dim)))] += class_salt[
            int(box.label)
        ]

    feats = _f32(feats)

    oracle = None
    if spec.oracle:
        logit = OBJECTNESS_LOGIT_GAIN * feats[:, layout.objectness_channel]
        oracle = VotePrediction(
            offsets=_f32(OFFSET_SCALE * feats[:, layout.offset_block]),
            feature_offsets=np.zeros_like(feats),
            objectness_logits=_f32(np.stack([-logit, logit], axis=1)),
        )

    return SceneSample(
        boxes=boxes,
        points=points,
        seed_positions=seed_pos,
        seed_features=feats,
        seed_object_index=seed_obj,
        oracle=oracle,
    )


def derive_feature_points(
    scene: SceneSample, pred: VotePrediction, gate_features: bool = True
) -> FeaturePointSet:
    """Concatenate the m seeds with their m suppressed votes: 2m feature points.

    Entries [0, m) are the seeds, [m, 2m) the gated votes, in seed order.
    """
    seeds = scene.seeds()
    if pred.count != seeds.count:
        raise ValueError(f"prediction covers {pred.count} seeds, scene has {seeds.count}")
    votes = suppress_votes(seeds, pred, gate_features=gate_features)
    return FeaturePointSet(
        positions=np.concatenate([seeds.positions, votes.positions]),
        features=np.concatenate([seeds.features, votes.features]),
    )


# ---------------------------------------------------------------------------
# Scene file format: a single JSON document
#   {
#     "boxes":  [{"center": [x,y,z], "size": [sx,sy,sz], "heading": h,
#                 "class": c}, ...],
#     "points": [[x, y, z], ...],
#     "seeds":  {"positions": [[x, y, z], ...],
#                "features": <array>, "object_index": [i, ...]},
#     "oracle": {"offsets": <array>, "feature_offsets": <array>,
#                "objectness_logits": <array>} | null
#   }
# where <array> = {"shape": [...], "dtype": "<f4",
#                  "data": base64 little-endian float32}.
# ---------------------------------------------------------------------------


def _encode_f32(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f4")
    return {
        "shape": list(data.shape),
        "dtype": "<f4",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_f32(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(d["shape"]).astype(np.float64)


def scene_to_dict(scene: SceneSample) -> dict:
    doc = {
        "boxes": [
            {
                "center": [float(v) for v in b.center],
                "size": [float(v) for v in b.size],
                "heading": float(b.heading),
                "class": int(b.label),
            }
            for b in scene.boxes
        ],
        "points": [[float(v) for v in p] for p in scene.points],
        "seeds": {
            "positions": [[float(v) for v in p] for p in scene.seed_positions],
            "features": _encode_f32(scene.seed_features),
            "object_index": [int(i) for i in scene.seed_object_index],
        },
        "oracle": None,
    }
    if scene.oracle is not None:
        doc["oracle"] = {
            "offsets": _encode_f32(scene.oracle.offsets),
            "feature_offsets": _encode_f32(scene.oracle.feature_offsets),
            "objectness_logits": _encode_f32(scene.oracle.objectness_logits),
        }
    return doc


def scene_from_dict(doc: dict) -> SceneSample:
    boxes = [
        Box3D(b["center"], b["size"], b["heading"], label=int(b["class"]))
        for b in doc["boxes"]
    ]
    oracle = None
    if doc.get("oracle") is not None:
        o = doc["oracle"]
        oracle = VotePrediction(
            offsets=_decode_f32(o["offsets"]),
            feature_offsets=_decode_f32(o["feature_offsets"]),
            objectness_logits=_decode_f32(o["objectness_logits"]),
        )
    return SceneSample(
        boxes=boxes,
        points=np.asarray(doc["points"], dtype=np.float64).reshape(-1, 3),
        seed_positions=np.asarray(doc["seeds"]["positions"], dtype=np.float64).reshape(-1, 3),
        seed_features=_decode_f32(doc["seeds"]["features"]),
        seed_object_index=np.asarray(doc["seeds"]["object_index"], dtype=np.int64),
        oracle=oracle,
    )


def save_scene(scene: SceneSample, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, sort_keys=True, separators=(",", ":"))


def load_scene(path) -> SceneSample:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
