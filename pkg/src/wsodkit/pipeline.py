"""End-to-end refinement pipeline: bag scoring, staged refinement, training.

Per image the flow is:

  1. encode proposal features, score them with the attention-MIL bag head
     (class-by-proposal score matrix, image-level aggregate, binary
     cross-entropy bag loss);
  2. a block of memory-supervised refinement stages: stage 1 takes its
     supervision scores from the bag-head matrix, stage k >= 2 from the
     recency-weighted fusion of stages 1..k-1; each positive class's
     top-scoring proposal becomes the supervision box and proposals are
     pseudo-labeled against it;
  3. a block of mining-supervised stages: stage 1 mines supervision boxes
     from the last memory stage's scores, stage k >= 2 from stage k-1; each
     positive class supervises with BOTH the mined box and the prior top
     proposal (union of positive assignments);
  4. a class-specific box-regression branch beside the last mining stage,
     trained with Smooth L1 toward its class's primary supervision box (the
     mined box when mining is active, else the top proposal). Its loss is
     accounted inside the mining-block component so the total stays a clean
     three-term sum: bag + memory block + mining block.

Supervision (fused scores, top boxes, mined boxes, pseudo-labels) is always
treated as constant: no gradient flows from a stage's loss into the stages
that produced its supervision.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ProposalBag, dump_json
from .encoder import EncoderConfig, encoder_backward, encoder_forward, init_encoder_params
from .fusion import FusionConfig, fuse_history
from .geometry import Box, ScoredBox, nms
from .mil_head import (
    PseudoLabelSet,
    assign_pseudo_labels,
    bag_backward,
    bag_head_forward,
    bag_loss,
    decode_regression,
    init_mil_params,
    init_regression_params,
    refinement_loss,
    regression_targets,
    smooth_l1,
    smooth_l1_grad,
    stage_logit_grad,
)
from .mining import MiningConfig, MiningTrace, mine_box


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss or parameter appears during training."""


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline hyperparameters; defaults follow the reference protocol
    (gamma1=0.3, gamma2=0.5, NMS at 0.3 IoU, momentum 0.9, 2 encoder layers,
    step learning-rate schedule)."""

    num_classes: int = 2
    feature_dim: int = 32
    heads: int = 4
    layers: int = 2
    n_max: int = 64
    ffn_ratio: float = 2.0
    memory_stages: int = 3
    mining_stages: int = 3
    gamma1: float = 0.3
    gamma2: float = 0.5
    delta: float = 0.1
    q: int = 3
    size_weight_mode: str = "area"
    iou_ign: float | None = None
    nms_threshold: float = 0.3
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_fraction: float = 2.0 / 3.0  # schedule step, as fraction of iterations
    momentum: float = 0.9
    iterations: int = 200
    batch_size: int = 2
    seed: int = 0
    use_mining: bool = True  # mined supervision boxes; False = top-1 only
    use_memory: bool = True  # fused-history supervision; False = previous stage only
    use_confidence_weights: bool = False

    def __post_init__(self):
        if self.memory_stages < 1 or self.mining_stages < 1:
            raise ValueError("each refinement block needs at least one stage")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 <= self.gamma2 <= 1.0:
            raise ValueError(f"gamma2 must be in [0, 1], got {self.gamma2!r}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        # Construction of the sub-configs validates their own fields.
        self.encoder_config()
        self.mining_config()
        self.fusion_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            feature_dim=self.feature_dim,
            heads=self.heads,
            layers=self.layers,
            n_max=self.n_max,
            ffn_ratio=self.ffn_ratio,
        )

    def mining_config(self) -> MiningConfig:
        return MiningConfig(
            gamma1=self.gamma1, q=self.q, size_weight_mode=self.size_weight_mode
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(delta=self.delta, k_max=max(self.memory_stages, 2))


@dataclass
class TrainState:
    """Trainable tensors plus optimizer and bookkeeping state."""

    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    iteration: int
    history: list[dict]
    config: PipelineConfig


@dataclass(frozen=True)
class LossBreakdown:
    bag: float
    memory_stages: tuple[float, ...]
    mining_stages: tuple[float, ...]
    regression: float

    @property
    def memory(self) -> float:
        return float(sum(self.memory_stages))

    @property
    def mining(self) -> float:
        return float(sum(self.mining_stages) + self.regression)

    @property
    def total(self) -> float:
        return self.bag + self.memory + self.mining


@dataclass(frozen=True)
class StageSupervision:
    """What supervised one refinement stage, for audit and tests."""

    sup_boxes: dict[int, tuple[Box, ...]]
    labels: PseudoLabelSet
    traces: dict[int, MiningTrace]  # mining stages only; empty otherwise


@dataclass(frozen=True)
class ImageForward:
    """Everything one image's forward pass produced."""

    encoded: np.ndarray  # (N, D)
    bag_scores: np.ndarray  # X, (C, N)
    bag_aggregate: np.ndarray  # p, (C,)
    memory_probs: tuple[np.ndarray, ...]  # each (C+1, N)
    mining_probs: tuple[np.ndarray, ...]
    regression_pred: np.ndarray  # (N, 4C)
    memory_supervision: tuple[StageSupervision, ...]
    mining_supervision: tuple[StageSupervision, ...]
    losses: LossBreakdown
    _enc_cache: dict = field(repr=False)
    _bag_cache: dict = field(repr=False)


def init_train_state(cfg: PipelineConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    params = init_encoder_params(cfg.encoder_config(), rng)
    params.update(init_mil_params(cfg.feature_dim, cfg.num_classes, rng))
    c1 = cfg.num_classes + 1
    for block, stages in (("mem", cfg.memory_stages), ("mine", cfg.mining_stages)):
        for k in range(stages):
            params[f"{block}.{k}.w"] = rng.normal(0.0, 0.05, size=(cfg.feature_dim, c1))
            params[f"{block}.{k}.b"] = np.zeros(c1)
    params.update(init_regression_params(cfg.feature_dim, cfg.num_classes, rng))
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    return TrainState(params=params, velocity=velocity, iteration=0, history=[], config=cfg)


def _stage_probs(
    venc: np.ndarray, params: Mapping[str, np.ndarray], key: str
) -> np.ndarray:
    """Per-proposal softmax over C+1 classes, returned as (C+1, N)."""
    z = venc @ params[key + ".w"] + params[key + ".b"]  # (N, C+1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).T


def derive_top_supervision(
    sup_scores: np.ndarray, boxes: Sequence[Box], positive: Sequence[int]
) -> tuple[dict[int, tuple[Box, ...]], dict[int, tuple[float, ...]]]:
    """Top-1 supervision: each positive class's highest-scoring proposal box."""
    sup_boxes: dict[int, tuple[Box, ...]] = {}
    confs: dict[int, tuple[float, ...]] = {}
    for c in positive:
        j = int(np.argmax(sup_scores[c]))
        sup_boxes[int(c)] = (boxes[j],)
        confs[int(c)] = (float(sup_scores[c, j]),)
    return sup_boxes, confs


def derive_mining_supervision(
    sup_scores: np.ndarray,
    boxes: Sequence[Box],
    positive: Sequence[int],
    mining_cfg: MiningConfig,
) -> tuple[dict[int, tuple[Box, ...]], dict[int, tuple[float, ...]], dict[int, MiningTrace]]:
    """Mined box plus top-1 box per positive class (union supervision).

    Both boxes inherit the top proposal's score as their confidence; the
    mined box's seed IS that proposal.
    """
    sup_boxes: dict[int, tuple[Box, ...]] = {}
    confs: dict[int, tuple[float, ...]] = {}
    traces: dict[int, MiningTrace] = {}
    for c in positive:
        row = sup_scores[c]
        j = int(np.argmax(row))
        trace = mine_box(row, boxes, mining_cfg)
        traces[int(c)] = trace
        sup_boxes[int(c)] = (trace.final_box, boxes[j])
        confs[int(c)] = (float(row[j]), float(row[j]))
    return sup_boxes, confs, traces


def forward_image(
    bag: ProposalBag, params: Mapping[str, np.ndarray], cfg: PipelineConfig
) -> ImageForward:
    """Full forward pass; supervision is derived stage by stage on the fly."""
    if bag.features is None:
        raise ValueError(f"bag {bag.image_id!r} has no features")
    if bag.num_classes != cfg.num_classes:
        raise ValueError(
            f"bag {bag.image_id!r} has {bag.num_classes} classes, "
            f"config expects {cfg.num_classes}"
        )
    enc_cfg = cfg.encoder_config()
    mining_cfg = cfg.mining_config()
    boxes = bag.box_list()
    positive = [int(c) for c in bag.positive_classes]

    venc, enc_cache = encoder_forward(bag.features, params, enc_cfg)
    x_bag, bag_cache = bag_head_forward(venc, params)
    p = x_bag.sum(axis=1)
    loss_bag = bag_loss(p, bag.labels.astype(np.float64))

    memory_probs: list[np.ndarray] = []
    memory_sup: list[StageSupervision] = []
    memory_losses: list[float] = []
    for k in range(cfg.memory_stages):
        probs = _stage_probs(venc, params, f"mem.{k}")
        if k == 0:
            sup_scores = x_bag
        elif cfg.use_memory:
            sup_scores = fuse_history(memory_probs, cfg.delta)
        else:
            sup_scores = memory_probs[-1]
        sup_boxes, confs = derive_top_supervision(sup_scores, boxes, positive)
        labels = assign_pseudo_labels(
            boxes,
            sup_boxes,
            cfg.gamma2,
            cfg.num_classes,
            iou_ign_threshold=cfg.iou_ign,
            confidences=confs if cfg.use_confidence_weights else None,
        )
        memory_losses.append(refinement_loss(probs, labels))
        memory_probs.append(probs)
        memory_sup.append(StageSupervision(sup_boxes=sup_boxes, labels=labels, traces={}))

    mining_probs: list[np.ndarray] = []
    mining_sup: list[StageSupervision] = []
    mining_losses: list[float] = []
    for k in range(cfg.mining_stages):
        probs = _stage_probs(venc, params, f"mine.{k}")
        source = memory_probs[-1] if k == 0 else mining_probs[-1]
        if cfg.use_mining:
            sup_boxes, confs, traces = derive_mining_supervision(
                source, boxes, positive, mining_cfg
            )
        else:
            sup_boxes, confs = derive_top_supervision(source, boxes, positive)
            traces = {}
        labels = assign_pseudo_labels(
            boxes,
            sup_boxes,
            cfg.gamma2,
            cfg.num_classes,
            iou_ign_threshold=cfg.iou_ign,
            confidences=confs if cfg.use_confidence_weights else None,
        )
        mining_losses.append(refinement_loss(probs, labels))
        mining_probs.append(probs)
        mining_sup.append(StageSupervision(sup_boxes=sup_boxes, labels=labels, traces=traces))

    reg_pred = venc @ params["reg.w"] + params["reg.b"]  # (N, 4C)
    loss_reg = _regression_loss(reg_pred, boxes, mining_sup[-1])

    losses = LossBreakdown(
        bag=loss_bag,
        memory_stages=tuple(memory_losses),
        mining_stages=tuple(mining_losses),
        regression=loss_reg,
    )
    return ImageForward(
        encoded=venc,
        bag_scores=x_bag,
        bag_aggregate=p,
        memory_probs=tuple(memory_probs),
        mining_probs=tuple(mining_probs),
        regression_pred=reg_pred,
        memory_supervision=tuple(memory_sup),
        mining_supervision=tuple(mining_sup),
        losses=losses,
        _enc_cache=enc_cache,
        _bag_cache=bag_cache,
    )


def regression_target_boxes(sup: StageSupervision) -> dict[int, Box]:
    """Per-class box the regression branch trains toward.

    The first supervision box of each class is the canonical pseudo
    ground truth: the mined box when mining is active, the top proposal
    otherwise. (The top proposal enters the classification union but is
    not the regression target; it is itself just a proposal.)
    """
    return {c: boxes[0] for c, boxes in sup.sup_boxes.items()}


def _regression_loss(
    reg_pred: np.ndarray, boxes: Sequence[Box], sup: StageSupervision
) -> float:
    labels = sup.labels
    targets = regression_target_boxes(sup)
    fg = np.nonzero(labels.foreground)[0]
    if fg.size == 0:
        return 0.0
    total = 0.0
    for n in fg:
        c = int(labels.labels[n])
        target = regression_targets(boxes[n], targets[c])
        total += smooth_l1(reg_pred[n, 4 * c : 4 * c + 4], target)
    return total / fg.size


def _regression_grad(
    reg_pred: np.ndarray, boxes: Sequence[Box], sup: StageSupervision
) -> np.ndarray:
    labels = sup.labels
    targets = regression_target_boxes(sup)
    dpred = np.zeros_like(reg_pred)
    fg = np.nonzero(labels.foreground)[0]
    if fg.size == 0:
        return dpred
    for n in fg:
        c = int(labels.labels[n])
        target = regression_targets(boxes[n], targets[c])
        dpred[n, 4 * c : 4 * c + 4] = smooth_l1_grad(reg_pred[n, 4 * c : 4 * c + 4], target) / fg.size
    return dpred


def backward_image(
    fw: ImageForward,
    bag: ProposalBag,
    params: Mapping[str, np.ndarray],
    cfg: PipelineConfig,
) -> dict[str, np.ndarray]:
    """Gradients of the image's total loss w.r.t. every parameter.

    Supervision is constant here by construction: each stage's gradient flows
    only through its own head and the shared encoder.
    """
    boxes = bag.box_list()
    grads: dict[str, np.ndarray] = {}
    _loss, _p, dvenc, bag_grads = bag_backward(
        fw._bag_cache, params, bag.labels.astype(np.float64)
    )
    grads.update(bag_grads)

    for block, probs_list, sup_list in (
        ("mem", fw.memory_probs, fw.memory_supervision),
        ("mine", fw.mining_probs, fw.mining_supervision),
    ):
        for k, (probs, sup) in enumerate(zip(probs_list, sup_list)):
            dz = stage_logit_grad(probs, sup.labels).T  # (N, C+1)
            grads[f"{block}.{k}.w"] = fw.encoded.T @ dz
            grads[f"{block}.{k}.b"] = dz.sum(axis=0)
            dvenc = dvenc + dz @ params[f"{block}.{k}.w"].T

    dpred = _regression_grad(fw.regression_pred, boxes, fw.mining_supervision[-1])
    grads["reg.w"] = fw.encoded.T @ dpred
    grads["reg.b"] = dpred.sum(axis=0)
    dvenc = dvenc + dpred @ params["reg.w"].T

    _dfeat, enc_grads = encoder_backward(dvenc, fw._enc_cache, params, cfg.encoder_config())
    grads.update(enc_grads)
    return grads


def frozen_losses(
    bag: ProposalBag,
    params: Mapping[str, np.ndarray],
    cfg: PipelineConfig,
    fw: ImageForward,
) -> LossBreakdown:
    """Recompute all loss components with supervision frozen from `fw`.

    This is the function the finite-difference gradient oracle perturbs: the
    analytic gradients treat pseudo-labels and supervision boxes as
    constants, so the differenced function must hold them fixed too.
    """
    enc_cfg = cfg.encoder_config()
    boxes = bag.box_list()
    venc, _ = encoder_forward(bag.features, params, enc_cfg)
    x_bag, _ = bag_head_forward(venc, params)
    loss_bag = bag_loss(x_bag.sum(axis=1), bag.labels.astype(np.float64))
    memory_losses = [
        refinement_loss(_stage_probs(venc, params, f"mem.{k}"), fw.memory_supervision[k].labels)
        for k in range(cfg.memory_stages)
    ]
    mining_losses = [
        refinement_loss(_stage_probs(venc, params, f"mine.{k}"), fw.mining_supervision[k].labels)
        for k in range(cfg.mining_stages)
    ]
    reg_pred = venc @ params["reg.w"] + params["reg.b"]
    loss_reg = _regression_loss(reg_pred, boxes, fw.mining_supervision[-1])
    return LossBreakdown(
        bag=loss_bag,
        memory_stages=tuple(memory_losses),
        mining_stages=tuple(mining_losses),
        regression=loss_reg,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _loss_record(iteration: int, breakdowns: Sequence[LossBreakdown]) -> dict:
    n = len(breakdowns)
    return {
        "iteration": iteration,
        "loss_bag": sum(b.bag for b in breakdowns) / n,
        "loss_memory": sum(b.memory for b in breakdowns) / n,
        "loss_mining": sum(b.mining for b in breakdowns) / n,
        "loss_total": sum(b.total for b in breakdowns) / n,
    }


def train(
    dataset: Sequence[ProposalBag],
    cfg: PipelineConfig,
    state: TrainState | None = None,
) -> TrainState:
    """SGD with momentum on the total loss; deterministic given cfg.seed."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if state is None:
        state = init_train_state(cfg)
    order_rng = np.random.default_rng([cfg.seed, 15485863])
    queue: deque[int] = deque()
    decay_point = math.ceil(cfg.lr_decay_fraction * cfg.iterations)

    for _ in range(cfg.iterations):
        state.iteration += 1
        while len(queue) < cfg.batch_size:
            queue.extend(int(i) for i in order_rng.permutation(len(dataset)))
        batch = [dataset[queue.popleft()] for _ in range(cfg.batch_size)]

        mean_grads: dict[str, np.ndarray] = {
            name: np.zeros_like(p) for name, p in state.params.items()
        }
        breakdowns = []
        for bag in batch:
            try:
                fw = forward_image(bag, state.params, cfg)
                grads = backward_image(fw, bag, state.params, cfg)
            except FloatingPointError as exc:
                raise TrainingDivergedError(
                    f"numeric blow-up at iteration {state.iteration} "
                    f"on image {bag.image_id!r}: {exc}"
                ) from exc
            breakdowns.append(fw.losses)
            for name, g in grads.items():
                mean_grads[name] += g / len(batch)

        record = _loss_record(state.iteration, breakdowns)
        if not math.isfinite(record["loss_total"]):
            raise TrainingDivergedError(
                f"non-finite loss {record['loss_total']!r} at iteration {state.iteration}"
            )
        state.history.append(record)

        lr = cfg.learning_rate * (
            cfg.lr_decay_factor if state.iteration > decay_point else 1.0
        )
        for name in sorted(state.params):
            v = state.velocity[name]
            v *= cfg.momentum
            v += mean_grads[name]
            state.params[name] -= lr * v
    return state


def dataset_losses(
    dataset: Sequence[ProposalBag], params: Mapping[str, np.ndarray], cfg: PipelineConfig
) -> dict:
    """Mean loss components over a dataset with the given parameters."""
    breakdowns = [forward_image(bag, params, cfg).losses for bag in dataset]
    return _loss_record(0, breakdowns)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _mean_foreground_scores(
    bag: ProposalBag, params: Mapping[str, np.ndarray], cfg: PipelineConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(C, N) mean scores of the final refinement block (background dropped)
    and (N, 4C) regression offsets.

    Detections come from the mining-supervised block, the block that produces
    the final results; its stage scores are averaged uniformly.
    """
    venc = encoder_forward(bag.features, params, cfg.encoder_config())[0]
    acc = np.zeros((cfg.num_classes + 1, bag.num_proposals))
    for k in range(cfg.mining_stages):
        acc += _stage_probs(venc, params, f"mine.{k}")
    reg_pred = venc @ params["reg.w"] + params["reg.b"]
    return acc[: cfg.num_classes] / cfg.mining_stages, reg_pred


def infer(
    bag: ProposalBag, params: Mapping[str, np.ndarray], cfg: PipelineConfig
) -> list[ScoredBox]:
    """Detections for one image.

    Each proposal contributes one candidate at its argmax foreground class
    (so the output never exceeds the proposal count), with the class-specific
    regression offsets applied, then per-class NMS prunes overlaps.
    """
    fg, reg_pred = _mean_foreground_scores(bag, params, cfg)
    boxes = bag.box_list()
    dets = []
    for n in range(bag.num_proposals):
        c = int(np.argmax(fg[:, n]))
        box = decode_regression(
            boxes[n], reg_pred[n, 4 * c : 4 * c + 4], bag.width, bag.height
        )
        dets.append(ScoredBox(box=box, score=float(fg[c, n]), class_id=c))
    return nms(dets, cfg.nms_threshold)


def class_top_boxes(
    bag: ProposalBag, params: Mapping[str, np.ndarray], cfg: PipelineConfig
) -> dict[int, ScoredBox]:
    """Per-class best box (argmax over proposals of the mean stage scores).

    Used for localization scoring, where every class's best candidate is
    needed even if another class outscores it on the same proposal.
    """
    fg, reg_pred = _mean_foreground_scores(bag, params, cfg)
    boxes = bag.box_list()
    out = {}
    for c in range(cfg.num_classes):
        n = int(np.argmax(fg[c]))
        box = decode_regression(
            boxes[n], reg_pred[n, 4 * c : 4 * c + 4], bag.width, bag.height
        )
        out[c] = ScoredBox(box=box, score=float(fg[c, n]), class_id=c)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "wsodkit-checkpoint-v1"


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    """JSON tensor dump with named entries and shape headers."""
    cfg = asdict(state.config)
    tensors = {
        name: {"shape": list(p.shape), "data": [float(v) for v in np.asarray(p).ravel()]}
        for name, p in state.params.items()
    }
    dump_json(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "config": cfg,
            "iteration": state.iteration,
            "tensors": tensors,
        },
    )


def load_checkpoint(path: str | Path) -> TrainState:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    cfg = PipelineConfig(**doc["config"])
    params = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    return TrainState(
        params=params,
        velocity=velocity,
        iteration=int(doc.get("iteration", 0)),
        history=[],
        config=cfg,
    )
