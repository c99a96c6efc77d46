"""Weakly supervised detection refinement toolkit."""

from .data import (
    GroundTruth,
    GtObject,
    ProposalBag,
    SyntheticSceneConfig,
    generate_dataset,
    generate_scene,
    load_bags,
    load_gt,
    load_scores,
    save_bags,
    save_gt,
    save_scores,
)
from .detector import MiningRefinementDetector, check_bags
from .encoder import EncoderConfig, encode, init_encoder_params
from .evaluation import EvalReport, average_precision, corloc, evaluate, format_report
from .fusion import FusionConfig, fuse_history, recency_weights
from .geometry import Box, ScoredBox, intersects, iou, nms, weighted_average_box
from .mil_head import (
    PseudoLabelSet,
    assign_pseudo_labels,
    bag_loss,
    refinement_loss,
    regression_targets,
    score_proposals,
    smooth_l1,
)
from .mining import Cluster, MiningConfig, MiningTrace, cluster_proposals, fuse_clusters, mine_box
from .pipeline import (
    LossBreakdown,
    PipelineConfig,
    TrainState,
    TrainingDivergedError,
    class_top_boxes,
    forward_image,
    infer,
    init_train_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Cluster",
    "EncoderConfig",
    "EvalReport",
    "FusionConfig",
    "GroundTruth",
    "GtObject",
    "LossBreakdown",
    "MiningConfig",
    "MiningRefinementDetector",
    "MiningTrace",
    "PipelineConfig",
    "ProposalBag",
    "PseudoLabelSet",
    "ScoredBox",
    "SyntheticSceneConfig",
    "TrainState",
    "TrainingDivergedError",
    "assign_pseudo_labels",
    "average_precision",
    "bag_loss",
    "check_bags",
    "class_top_boxes",
    "cluster_proposals",
    "corloc",
    "encode",
    "evaluate",
    "format_report",
    "forward_image",
    "fuse_clusters",
    "fuse_history",
    "generate_dataset",
    "generate_scene",
    "infer",
    "init_encoder_params",
    "init_train_state",
    "intersects",
    "iou",
    "load_bags",
    "load_checkpoint",
    "load_gt",
    "load_scores",
    "mine_box",
    "nms",
    "recency_weights",
    "refinement_loss",
    "regression_targets",
    "save_bags",
    "save_checkpoint",
    "save_gt",
    "save_scores",
    "score_proposals",
    "smooth_l1",
    "train",
    "weighted_average_box",
]
