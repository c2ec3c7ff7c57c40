"""votedet: a training-free suppress-and-refine 3D detection pipeline.

Voting-based 3D detection post-processing at desk scale: objectness-gated
Hough votes, multi-resolution RoI refinement with feature gating and
self-attention, Hungarian set prediction, plus NMS baselines, an mAP
evaluator, synthetic scene generation, and a latency benchmark harness.
"""

__version__ = "0.1.0"

from .geometry import (
    Box3D,
    PointSet,
    box_corners,
    corner_distance,
    fps,
    iou_aa,
    iou_oriented,
    point_in_box,
)
from .matching import CostWeights, MatchResult, focal_loss, hungarian, iou_loss, l1_box_loss, set_loss, total_loss
from .pipeline import Detection, ParamBundle, PipelineConfig, PipelineResult, Proposal, init_bundle, plant_oracle_bundle, run_pipeline, select_topk
from .roi import FeaturePointSet, GateParams, RoIFeature, feature_gate, roi_pool_multi
from .suppression import SeedLabels, SeedSet, VotePrediction, VoteSet, nsm_loss, offset_magnitude_histogram, seed_labels, suppress_votes
from .synth import GeneratorSpec, SceneSample, derive_feature_points, gen_scene, load_scene, save_scene
from .evalbench import BenchRecord, EvalReport, ap_eval, bench, nms, nms_scaling

__all__ = [
    "__version__",
    "Box3D",
    "PointSet",
    "box_corners",
    "corner_distance",
    "fps",
    "iou_aa",
    "iou_oriented",
    "point_in_box",
    "CostWeights",
    "MatchResult",
    "focal_loss",
    "hungarian",
    "iou_loss",
    "l1_box_loss",
    "set_loss",
    "total_loss",
    "Detection",
    "ParamBundle",
    "PipelineConfig",
    "PipelineResult",
    "Proposal",
    "init_bundle",
    "plant_oracle_bundle",
    "run_pipeline",
    "select_topk",
    "FeaturePointSet",
    "GateParams",
    "RoIFeature",
    "feature_gate",
    "roi_pool_multi",
    "SeedLabels",
    "SeedSet",
    "VotePrediction",
    "VoteSet",
    "nsm_loss",
    "offset_magnitude_histogram",
    "seed_labels",
    "suppress_votes",
    "GeneratorSpec",
    "SceneSample",
    "derive_feature_points",
    "gen_scene",
    "load_scene",
    "save_scene",
    "BenchRecord",
    "EvalReport",
    "ap_eval",
    "bench",
    "nms",
    "nms_scaling",
]
