"""Scikit-learn style estimator facade over the refinement pipeline.

`MiningRefinementDetector` follows the sklearn estimator contract:
constructor arguments are stored verbatim (so `get_params` / `set_params` /
`clone` work), `fit` consumes a list of proposal bags (image-level labels
travel inside the bags), and `predict` returns per-image detection lists.
`score` reports mean CorLoc against a ground-truth annotation set so the
estimator slots into generic model-selection loops.
"""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import GroundTruth, ProposalBag, validate_bag
from .evaluation import corloc
from .geometry import ScoredBox
from .pipeline import (
    PipelineConfig,
    TrainState,
    class_top_boxes,
    infer,
    train,
)


def check_bags(
    X: Sequence[ProposalBag],
    feature_dim: int | None = None,
    num_classes: int | None = None,
    require_features: bool = True,
) -> list[ProposalBag]:
    """Validate a list of bags; returns it unchanged on success."""
    if len(X) == 0:
        raise ValueError("expected at least one proposal bag")
    bags = list(X)
    for i, bag in enumerate(bags):
        if not isinstance(bag, ProposalBag):
            raise TypeError(f"X[{i}] is {type(bag).__name__}, expected ProposalBag")
        validate_bag(bag, where=f"X[{i}]")
        if require_features and bag.features is None:
            raise ValueError(f"X[{i}] ({bag.image_id!r}) has no feature matrix")
        if feature_dim is not None and bag.features is not None:
            if bag.features.shape[1] != feature_dim:
                raise ValueError(
                    f"X[{i}] has feature dim {bag.features.shape[1]}, expected {feature_dim}"
                )
        if num_classes is not None and bag.num_classes != num_classes:
            raise ValueError(
                f"X[{i}] carries {bag.num_classes} classes, expected {num_classes}"
            )
    return bags


class MiningRefinementDetector(BaseEstimator):
    """Weakly supervised detector trained from image-level labels only.

    Parameters mirror PipelineConfig; see that class for semantics. The
    fitted attributes are `state_` (parameters and optimizer state),
    `config_` (the resolved pipeline config), and `loss_history_`.
    """

    def __init__(
        self,
        num_classes: int = 2,
        feature_dim: int = 32,
        heads: int = 4,
        layers: int = 2,
        n_max: int = 64,
        ffn_ratio: float = 2.0,
        memory_stages: int = 3,
        mining_stages: int = 3,
        gamma1: float = 0.3,
        gamma2: float = 0.5,
        delta: float = 0.1,
        q: int = 3,
        size_weight_mode: str = "area",
        iou_ign: float | None = None,
        nms_threshold: float = 0.3,
        learning_rate: float = 0.01,
        lr_decay_factor: float = 0.1,
        lr_decay_fraction: float = 2.0 / 3.0,
        momentum: float = 0.9,
        iterations: int = 200,
        batch_size: int = 2,
        seed: int = 0,
        use_mining: bool = True,
        use_memory: bool = True,
        use_confidence_weights: bool = False,
    ):
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.heads = heads
        self.layers = layers
        self.n_max = n_max
        self.ffn_ratio = ffn_ratio
        self.memory_stages = memory_stages
        self.mining_stages = mining_stages
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.delta = delta
        self.q = q
        self.size_weight_mode = size_weight_mode
        self.iou_ign = iou_ign
        self.nms_threshold = nms_threshold
        self.learning_rate = learning_rate
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_fraction = lr_decay_fraction
        self.momentum = momentum
        self.iterations = iterations
        self.batch_size = batch_size
        self.seed = seed
        self.use_mining = use_mining
        self.use_memory = use_memory
        self.use_confidence_weights = use_confidence_weights

    def _make_config(self) -> PipelineConfig:
        return PipelineConfig(**self.get_params())

    def fit(self, X: Sequence[ProposalBag], y=None) -> "MiningRefinementDetector":
        """Train on proposal bags; y is ignored (labels live in the bags)."""
        cfg = self._make_config()
        bags = check_bags(X, feature_dim=cfg.feature_dim, num_classes=cfg.num_classes)
        n_biggest = max(bag.num_proposals for bag in bags)
        if n_biggest > cfg.n_max:
            raise ValueError(
                f"largest bag has {n_biggest} proposals but n_max={cfg.n_max}"
            )
        state: TrainState = train(bags, cfg)
        self.config_ = cfg
        self.state_ = state
        self.loss_history_ = list(state.history)
        return self

    def predict(self, X: Sequence[ProposalBag]) -> list[list[ScoredBox]]:
        """Per-image detections after per-class NMS."""
        check_is_fitted(self, "state_")
        bags = check_bags(X, feature_dim=self.config_.feature_dim,
                          num_classes=self.config_.num_classes)
        return [infer(bag, self.state_.params, self.config_) for bag in bags]

    def predict_top_boxes(self, X: Sequence[ProposalBag]) -> list[dict[int, ScoredBox]]:
        """Per-image, per-class best box (localization-style output)."""
        check_is_fitted(self, "state_")
        bags = check_bags(X, feature_dim=self.config_.feature_dim,
                          num_classes=self.config_.num_classes)
        return [class_top_boxes(bag, self.state_.params, self.config_) for bag in bags]

    def score(self, X: Sequence[ProposalBag], y: GroundTruth) -> float:
        """Mean CorLoc of the per-class top boxes against ground truth `y`."""
        check_is_fitted(self, "state_")
        tops = self.predict_top_boxes(X)
        top_map = {bag.image_id: t for bag, t in zip(X, tops)}
        values = [
            corloc(top_map, y, c) for c in range(self.config_.num_classes)
        ]
        defined = [v for v in values if v is not None]
        if not defined:
            raise ValueError("ground truth contains none of the detector's classes")
        return float(sum(defined) / len(defined))
