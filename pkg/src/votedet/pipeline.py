"""End-to-end forward pass: seeds -> gated votes -> initial proposals ->
top-K selection -> iterated RoI refinement. No NMS anywhere in the path.

The initial proposal stage is a desk-scale stand-in for a learned voting
detector: farthest point sampling over the gated votes picks cluster
centers, vote features are max-pooled within a fixed grouping radius, and a
small head decodes a box around each center.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import matching, synth
from .geometry import Box3D, fps
from .matching import CostWeights, MatchResult
from .roi import FeaturePointSet, GateParams, feature_gate, init_gate, roi_pool_multi
from .suppression import VotePrediction, nsm_loss, seed_labels, suppress_votes
from .tinynet import AttentionParams, DenseParams, head_forward, init_attention, init_dense, make_rng, mha_forward, mlp_forward


@dataclass
class PipelineConfig:
    """Every pipeline hyperparameter and design-decision default."""

    num_proposals: int = 160  # initial proposals from the voting stage
    top_k: int = 128  # proposals kept for refinement
    resolutions: tuple[int, ...] = (1, 3, 5)
    roi_channels: int = 128
    seed_feature_dim: int = 256
    embed_dim: int = 1024
    num_heads: int = 8
    ffn_dim: int = 2048
    refinements: int = 3
    share_params: bool = True
    lambda_obj: float = 1.0
    lambda_reg: float = 10.0
    cost_weights: CostWeights = field(default_factory=CostWeights)
    num_classes: int = 18
    seed: int = 0
    gate_reduction: str = "sum"  # "sum" | "mean" over occupied cells
    loss_normalization: str = "gt"  # "gt" | "preds" | "none"
    gate_feature_offset: bool = True
    vote_source: str = "nsm_head"  # "nsm_head" | "oracle"
    dropout: float = 0.1  # recorded only; forward passes are deterministic
    base_box_size: float = 0.5
    grouping_radius: float = 0.3

    def __post_init__(self):
        if isinstance(self.cost_weights, dict):
            self.cost_weights = CostWeights(**self.cost_weights)
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.validate()

    def validate(self) -> None:
        if self.top_k > self.num_proposals:
            raise ValueError(f"top_k {self.top_k} exceeds num_proposals {self.num_proposals}")
        if self.refinements < 1:
            raise ValueError("need at least one refinement")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not self.resolutions or any(r < 1 for r in self.resolutions):
            raise ValueError(f"bad resolutions {self.resolutions}")
        if self.gate_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown gate_reduction {self.gate_reduction!r}")
        if self.loss_normalization not in ("gt", "preds", "none"):
            raise ValueError(f"unknown loss_normalization {self.loss_normalization!r}")
        if self.vote_source not in ("nsm_head", "oracle"):
            raise ValueError(f"unknown vote_source {self.vote_source!r}")

    @property
    def roi_dim(self) -> int:
        return sum(r**3 for r in self.resolutions) * self.roi_channels

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        return d

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


@dataclass(frozen=True)
class Proposal:
    """A candidate box with its feature vector and per-class logits."""

    box: Box3D
    feature: np.ndarray  # (C,)
    logits: np.ndarray  # (num_classes,)

    @property
    def score(self) -> float:
        return float(np.max(expit(self.logits)))

    @property
    def label(self) -> int:
        return int(np.argmax(self.logits))


@dataclass
class StageParams:
    """Parameters of one refinement stage."""

    gate: GateParams
    proj_in: DenseParams  # C -> embed_dim
    attention: AttentionParams
    head: DenseParams  # embed_dim -> num_classes + 7
    proj_out: DenseParams  # embed_dim -> C


@dataclass
class ParamBundle:
    """All pipeline parameters.

    ``stages`` has one entry per refinement; with shared parameters every
    entry is the same object.
    """

    point_proj: DenseParams  # seed feature dim -> C
    nsm_head: DenseParams  # seed feature dim -> 2 + 3 + seed feature dim
    init_head: DenseParams  # seed feature dim -> num_classes + 7
    stages: list[StageParams]


def init_stage(cfg: PipelineConfig, rng_seed: int, stream: int) -> StageParams:
    c = cfg.roi_channels
    return StageParams(
        gate=init_gate(c, cfg.resolutions, make_rng(rng_seed, stream, 0)),
        proj_in=init_dense([c, cfg.embed_dim], make_rng(rng_seed, stream, 1)),
        attention=init_attention(cfg.embed_dim, cfg.num_heads, cfg.ffn_dim, make_rng(rng_seed, stream, 2)),
        head=init_dense([cfg.embed_dim, cfg.num_classes + 7], make_rng(rng_seed, stream, 3)),
        proj_out=init_dense([cfg.embed_dim, c], make_rng(rng_seed, stream, 4)),
    )


def init_bundle(cfg: PipelineConfig) -> ParamBundle:
    """Deterministic parameter bundle from the config seed."""
    d = cfg.seed_feature_dim
    if cfg.share_params:
        shared = init_stage(cfg, cfg.seed, 3)
        stages = [shared] * cfg.refinements
    else:
        stages = [init_stage(cfg, cfg.seed, 3 + i) for i in range(cfg.refinements)]
    return ParamBundle(
        point_proj=init_dense([d, cfg.roi_channels], make_rng(cfg.seed, 0)),
        nsm_head=init_dense([d, d, d, 2 + 3 + d], make_rng(cfg.seed, 1)),
        init_head=init_dense([d, d, cfg.num_classes + 7], make_rng(cfg.seed, 2)),
        stages=stages,
    )


# ---------------------------------------------------------------------------
# Planted parameters: exact selector readouts of the generator's feature
# layout. ReLU hidden layers are made transparent by shifting inputs far into
# the positive range and absorbing the shift into the final bias, so every
# planted head is an exact linear map of its input features.
# ---------------------------------------------------------------------------

_RELU_SHIFT = 50.0


def _planted_mlp(selector: np.ndarray, bias: np.ndarray, hidden: int) -> DenseParams:
    """[d -> d (relu, shifted) -> out]: computes selector.T @ x + bias exactly."""
    d = selector.shape[0]
    layers = [np.eye(d)] * hidden
    weights = layers + [selector]
    biases = [np.full(d, _RELU_SHIFT)] + [np.zeros(d)] * (hidden - 1) + [
        bias - _RELU_SHIFT * selector.sum(axis=0)
    ]
    activations = ["relu"] * hidden + ["linear"]
    return DenseParams([w.copy() for w in weights], biases, activations)


def plant_oracle_bundle(cfg: PipelineConfig) -> ParamBundle:
    """Build parameters that decode the generator's feature layout exactly.

    The NSM head reproduces the scene's oracle votes, the initial head
    decodes each cluster's class/size/heading encoding, gate MLPs emit a
    uniform 0.5 gate, attention reduces to two layer norms, and the stage
    head re-reads the class block while leaving boxes unchanged.
    """
    layout = synth.FeatureLayout(cfg.num_classes, cfg.seed_feature_dim)
    d = cfg.seed_feature_dim
    c = cfg.roi_channels
    if layout.smooth_block.start > c:
        raise ValueError("feature layout encoding block must fit in the RoI channels")

    # point_proj: copy the first C channels (contains the whole encoding block).
    proj_w = np.zeros((d, c))
    proj_w[:c, :] = np.eye(c)
    point_proj = DenseParams([proj_w], [np.zeros(c)], ["linear"])

    # NSM head: [neg, pos] objectness from the objectness channel, offsets
    # from the offset block, zero feature offsets.
    sel = np.zeros((d, 2 + 3 + d))
    sel[layout.objectness_channel, 0] = -synth.OBJECTNESS_LOGIT_GAIN
    sel[layout.objectness_channel, 1] = +synth.OBJECTNESS_LOGIT_GAIN
    for axis in range(3):
        sel[layout.offset_block.start + axis, 2 + axis] = synth.OFFSET_SCALE
    nsm_head = _planted_mlp(sel, np.zeros(2 + 3 + d), hidden=2)

    # Initial head: class logits from the class block; size/heading deltas
    # from their encodings; centers stay on the vote cluster.
    sel = np.zeros((d, cfg.num_classes + 7))
    for cls in range(cfg.num_classes):
        sel[cls, cls] = synth.CLASS_READOUT_GAIN
    for axis in range(3):
        sel[layout.size_block.start + axis, cfg.num_classes + 3 + axis] = 1.0
    sel[layout.heading_channel, cfg.num_classes + 6] = math.pi
    init_head = _planted_mlp(sel, np.zeros(cfg.num_classes + 7), hidden=1)

    # Stage: zero gate MLPs (sigmoid(0) = 0.5 everywhere), block-copy
    # projections, attention that collapses to LN(LN(x)), and a head that
    # reads the class block and emits zero box deltas.
    gate = GateParams(
        cfg.resolutions,
        [
            DenseParams(
                [np.zeros((c, c)), np.zeros((c, r**3 * c))],
                [np.zeros(c), np.zeros(r**3 * c)],
                ["relu", "sigmoid"],
            )
            for r in cfg.resolutions
        ],
    )
    e = cfg.embed_dim
    proj_in_w = np.zeros((c, e))
    proj_in_w[:, :c] = np.eye(c)
    proj_in = DenseParams([proj_in_w], [np.zeros(e)], ["linear"])
    attention = AttentionParams(
        num_heads=cfg.num_heads,
        wq=np.eye(e),
        bq=np.zeros(e),
        wk=np.eye(e),
        bk=np.zeros(e),
        wv=np.eye(e),
        bv=np.zeros(e),
        wo=np.zeros((e, e)),
        bo=np.zeros(e),
        ffn_w1=np.zeros((e, cfg.ffn_dim)),
        ffn_b1=np.zeros(cfg.ffn_dim),
        ffn_w2=np.zeros((cfg.ffn_dim, e)),
        ffn_b2=np.zeros(e),
        ln1_scale=np.ones(e),
        ln1_shift=np.zeros(e),
        ln2_scale=np.ones(e),
        ln2_shift=np.zeros(e),
    )
    head_w = np.zeros((e, cfg.num_classes + 7))
    for cls in range(cfg.num_classes):
        head_w[cls, cls] = synth.CLASS_READOUT_GAIN
    head = DenseParams([head_w], [np.zeros(cfg.num_classes + 7)], ["linear"])
    proj_out_w = np.zeros((e, c))
    proj_out_w[:c, :] = np.eye(c)
    proj_out = DenseParams([proj_out_w], [np.zeros(c)], ["linear"])

    stage = StageParams(gate, proj_in, attention, head, proj_out)
    return ParamBundle(point_proj, nsm_head, init_head, [stage] * cfg.refinements)


@dataclass
class StageOutput:
    """One refinement stage's proposals plus optional loss and timing."""

    proposals: list[Proposal]
    l_prm: float | None = None
    match: MatchResult | None = None
    elapsed_ms: float = 0.0


@dataclass
class Detection:
    label: int
    score: float
    box: Box3D

    def to_dict(self) -> dict:
        return {
            "class": int(self.label),
            "score": float(self.score),
            "center": [float(v) for v in self.box.center],
            "size": [float(v) for v in self.box.size],
            "heading": float(self.box.heading),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        box = Box3D(d["center"], d["size"], d["heading"], label=int(d["class"]), score=float(d["score"]))
        return cls(label=int(d["class"]), score=float(d["score"]), box=box)


@dataclass
class PipelineResult:
    stages: list[StageOutput]
    detections: list[Detection]
    initial: list[Proposal] = field(default_factory=list)
    l_nsm: float | None = None
    l_initial: float | None = None
    l_total: float | None = None
    model_ms: float = 0.0

    @property
    def l_prm_per_stage(self) -> list[float]:
        return [s.l_prm for s in self.stages]


def select_topk(proposals: list[Proposal], k: int) -> list[Proposal]:
    """Keep the k proposals with the highest max-class sigmoid score,
    stably ordered by score then original index."""
    if k > len(proposals):
        raise ValueError(f"cannot select {k} of {len(proposals)} proposals")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    return [proposals[i] for i in order[:k]]


def refine_once(
    proposals: list[Proposal],
    feature_points: FeaturePointSet,
    stage: StageParams,
    cfg: PipelineConfig,
    gt_boxes: list[Box3D] | None = None,
    gt_labels: list[int] | None = None,
    scene_scale: np.ndarray | None = None,
) -> StageOutput:
    """RoI pool -> gate -> self-attention across proposals -> decode head.

    The output carries exactly as many proposals as the input; supplying
    ground truth adds the stage's set-prediction loss.
    """
    t0 = time.perf_counter()
    gated = np.stack(
        [
            feature_gate(
                roi_pool_multi(feature_points, p.box, cfg.resolutions),
                p.feature,
                stage.gate,
                reduction=cfg.gate_reduction,
            )
            for p in proposals
        ]
    )
    embedded = mlp_forward(gated, stage.proj_in)
    attended = mha_forward(embedded, stage.attention)
    logits, boxes = head_forward(attended, [p.box for p in proposals], stage.head, cfg.num_classes)
    features = mlp_forward(attended, stage.proj_out)
    refined = [Proposal(b, f, l) for b, f, l in zip(boxes, features, logits)]
    out = StageOutput(proposals=refined, elapsed_ms=(time.perf_counter() - t0) * 1e3)
    if gt_boxes is not None:
        out.match = matching.match_predictions(
            logits, boxes, gt_boxes, gt_labels, cfg.cost_weights, scene_scale
        )
        out.l_prm = matching.set_loss(
            logits,
            boxes,
            gt_boxes,
            gt_labels,
            out.match,
            cfg.cost_weights,
            scene_scale,
            normalization=cfg.loss_normalization,
        )
    return out


def run_pipeline(
    scene: synth.SceneSample,
    cfg: PipelineConfig,
    bundle: ParamBundle | None = None,
    with_loss: bool | None = None,
) -> PipelineResult:
    """Full forward pass over one scene.

    ``with_loss`` defaults to True when the scene has ground truth. Losses:
    the suppression loss on seed predictions, the initial-head set loss over
    all initial proposals, and one set-prediction loss per refinement; the
    total is their plain sum.
    """
    if scene.seed_positions.shape[0] == 0:
        raise ValueError("scene has no seeds")
    if bundle is None:
        bundle = init_bundle(cfg)
    if with_loss is None:
        with_loss = bool(scene.boxes)
    t0 = time.perf_counter()

    seeds = scene.seeds()
    if cfg.vote_source == "oracle":
        if scene.oracle is None:
            raise ValueError("config requests oracle votes but the scene has none")
        pred = scene.oracle
    else:
        raw = mlp_forward(seeds.features, bundle.nsm_head)
        pred = VotePrediction(
            offsets=raw[:, 2:5],
            feature_offsets=raw[:, 5:],
            objectness_logits=raw[:, 0:2],
        )
    votes = suppress_votes(seeds, pred, gate_features=cfg.gate_feature_offset)
    feature_points = FeaturePointSet(
        positions=np.concatenate([seeds.positions, votes.positions]),
        features=mlp_forward(
            np.concatenate([seeds.features, votes.features]), bundle.point_proj
        ),
    )

    initial = _make_initial(votes.positions, votes.features, bundle, cfg)
    selected = select_topk(initial, cfg.top_k)

    gt_boxes = scene.boxes if with_loss else None
    gt_labels = scene.gt_labels() if with_loss else None
    scene_scale = scene.scene_scale() if with_loss else None

    stages: list[StageOutput] = []
    current = selected
    for i in range(cfg.refinements):
        stage = bundle.stages[i if i < len(bundle.stages) else -1]
        out = refine_once(
            current, feature_points, stage, cfg, gt_boxes, gt_labels, scene_scale
        )
        stages.append(out)
        current = out.proposals

    detections = [Detection(p.label, p.score, replace(p.box, label=p.label, score=p.score)) for p in current]
    result = PipelineResult(stages=stages, detections=detections, initial=initial)
    result.model_ms = (time.perf_counter() - t0) * 1e3

    if with_loss:
        labels = seed_labels(seeds, scene.boxes)
        _, _, l_nsm = nsm_loss(pred, labels, cfg.lambda_obj, cfg.lambda_reg)
        init_logits = np.stack([p.logits for p in initial])
        init_boxes = [p.box for p in initial]
        match = matching.match_predictions(
            init_logits, init_boxes, gt_boxes, gt_labels, cfg.cost_weights, scene_scale
        )
        l_initial = matching.set_loss(
            init_logits,
            init_boxes,
            gt_boxes,
            gt_labels,
            match,
            cfg.cost_weights,
            scene_scale,
            normalization=cfg.loss_normalization,
        )
        result.l_nsm = l_nsm
        result.l_initial = l_initial
        result.l_total = matching.total_loss(l_initial, l_nsm, [s.l_prm for s in stages])
    return result


def _make_initial(
    votes_pos: np.ndarray,
    votes_feat: np.ndarray,
    bundle: ParamBundle,
    cfg: PipelineConfig,
) -> list[Proposal]:
    """FPS cluster centers over votes, radius max-pooled features, decode."""
    m = votes_pos.shape[0]
    if cfg.num_proposals > m:
        raise ValueError(f"{cfg.num_proposals} initial proposals requested from {m} votes")
    centers_idx = fps(votes_pos, cfg.num_proposals, start=0)
    base_size = np.full(3, cfg.base_box_size)
    pooled = np.empty((cfg.num_proposals, votes_feat.shape[1]))
    for row, idx in enumerate(centers_idx):
        near = np.sum((votes_pos - votes_pos[idx]) ** 2, axis=1) <= cfg.grouping_radius**2
        pooled[row] = votes_feat[near].max(axis=0)
    base_boxes = [Box3D(votes_pos[idx], base_size, 0.0) for idx in centers_idx]
    logits, boxes = head_forward(pooled, base_boxes, bundle.init_head, cfg.num_classes)
    features = mlp_forward(pooled, bundle.point_proj)
    return [Proposal(b, f, l) for b, f, l in zip(boxes, features, logits)]


def save_detections(result: PipelineResult, path) -> None:
    """Write final detections as JSON: [{class, score, center, size, heading}]."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([d.to_dict() for d in result.detections], fh, indent=2, sort_keys=True)


def load_detections(path) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as fh:
        return [Detection.from_dict(d) for d in json.load(fh)]


def save_run_report(result: PipelineResult, path) -> None:
    """Per-stage loss/timing record."""
    doc = {
        "model_ms": result.model_ms,
        "l_nsm": result.l_nsm,
        "l_initial": result.l_initial,
        "l_prm_per_stage": [s.l_prm for s in result.stages],
        "l_total": result.l_total,
        "stage_ms": [s.elapsed_ms for s in result.stages],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
