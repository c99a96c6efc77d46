"""Dataset ingestion and the synthetic scene generator.

File formats are single JSON documents. A bag file is

    {"images": [{"id": str, "width": num, "height": num,
                 "labels": [class ids present],
                 "proposals": [[x1, y1, x2, y2], ...],
                 "features": [[...], ...]          # optional
                }, ...]}

and a ground-truth file is analogous with
``"objects": [{"class": int, "box": [x1, y1, x2, y2], "difficult": bool}]``.

The synthetic generator builds scenes that reproduce the two failure modes
this toolchain targets at desk scale: each object carries a small salient
corner patch whose overlap dominates feature activation (so top-1 supervision
locks onto the part), and images may contain two objects of one class (so
single-box supervision misses the second). Proposals are jittered crops of
the salient patch, part-unions growing toward the full box, whole-object
crops, object-plus-context crops, and random background boxes. Each class
owns two orthonormal feature directions, one driven by salient-patch overlap
and one by object overlap:

    feature(p) = sum_c [ u_c * salience_boost * max_o IoU(p, salient_o)
                         + w_c * max_o IoU(p, object_o) ] + Gaussian noise

with the max over that class's objects. With salience_boost > 1 the part
crops carry the largest activation (the trap), but whole-object evidence
lives in its own subspace, so a classifier can separate box extents once its
supervision reaches beyond the parts. Everything is deterministic given the
config seed.
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, box_from_row, pairwise_iou


class SchemaError(ValueError):
    """A data file violates the expected schema; message carries the field path."""


# ---------------------------------------------------------------------------
# core records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalBag:
    """One image's proposals, optional features, and image-level labels."""

    image_id: str
    width: float
    height: float
    boxes: np.ndarray  # (N, 4) float64, x1 y1 x2 y2
    labels: np.ndarray  # (C,) 0/1 int64 presence vector
    features: np.ndarray | None = None  # (N, D) float64

    def __post_init__(self):
        object.__setattr__(self, "boxes", np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))
        if self.features is not None:
            object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))

    @property
    def num_proposals(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]

    @property
    def positive_classes(self) -> np.ndarray:
        return np.nonzero(self.labels)[0]

    def box_list(self) -> list[Box]:
        return [box_from_row(r) for r in self.boxes]


@dataclass(frozen=True)
class GtObject:
    class_id: int
    box: Box
    difficult: bool = False


@dataclass(frozen=True)
class GroundTruth:
    """Per-image annotated objects."""

    images: dict[str, tuple[GtObject, ...]]

    def class_ids(self) -> list[int]:
        seen = {obj.class_id for objs in self.images.values() for obj in objs}
        return sorted(seen)

    def positive_images(self, class_id: int) -> list[str]:
        return sorted(
            img for img, objs in self.images.items()
            if any(o.class_id == class_id for o in objs)
        )


def validate_bag(bag: ProposalBag, where: str = "bag") -> None:
    """Raise SchemaError on any violated bag invariant."""
    if bag.width <= 0 or bag.height <= 0:
        raise SchemaError(f"{where}: image size must be positive")
    b = bag.boxes
    if b.size and not np.all(np.isfinite(b)):
        raise SchemaError(f"{where}.proposals: non-finite coordinate")
    bad = np.nonzero((b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1]))[0]
    if bad.size:
        raise SchemaError(
            f"{where}.proposals[{int(bad[0])}]: degenerate box (x2 <= x1 or y2 <= y1)"
        )
    out = np.nonzero(
        (b[:, 0] < 0) | (b[:, 1] < 0) | (b[:, 2] > bag.width) | (b[:, 3] > bag.height)
    )[0]
    if out.size:
        raise SchemaError(
            f"{where}.proposals[{int(out[0])}]: box outside image bounds "
            f"{bag.width} x {bag.height}"
        )
    if not np.all((bag.labels == 0) | (bag.labels == 1)):
        raise SchemaError(f"{where}.labels: entries must be 0/1")
    if bag.features is not None:
        f = bag.features
        if f.ndim != 2 or f.shape[0] != bag.num_proposals:
            raise SchemaError(
                f"{where}.features: expected ({bag.num_proposals}, D), got {f.shape}"
            )
        if not np.all(np.isfinite(f)):
            raise SchemaError(f"{where}.features: non-finite value")


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def dump_json(path: str | Path, payload) -> None:
    """Canonical JSON dump: sorted keys, newline-terminated (byte-stable)."""
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return mapping[key]


def _class_count(labels_lists: Iterable[Sequence[int]], num_classes: int | None) -> int:
    largest = -1
    for labels in labels_lists:
        for c in labels:
            largest = max(largest, int(c))
    if num_classes is None:
        return largest + 1
    if largest >= num_classes:
        raise SchemaError(
            f"label {largest} out of range for num_classes={num_classes}"
        )
    return num_classes


def load_bags(path: str | Path, num_classes: int | None = None) -> list[ProposalBag]:
    """Load and validate a bag file; class count inferred unless given."""
    doc = json.loads(Path(path).read_text())
    images = _require(doc, "images", "$")
    if not isinstance(images, list):
        raise SchemaError("$.images: expected a list")
    c = _class_count(
        (img.get("labels", []) for img in images), num_classes
    )
    bags = []
    for i, img in enumerate(images):
        where = f"$.images[{i}]"
        labels_present = _require(img, "labels", where)
        vec = np.zeros(c, dtype=np.int64)
        for lab in labels_present:
            if not 0 <= int(lab) < c:
                raise SchemaError(f"{where}.labels: class {lab} out of range")
            vec[int(lab)] = 1
        features = img.get("features")
        bag = ProposalBag(
            image_id=str(_require(img, "id", where)),
            width=float(_require(img, "width", where)),
            height=float(_require(img, "height", where)),
            boxes=np.asarray(_require(img, "proposals", where), dtype=np.float64).reshape(-1, 4),
            labels=vec,
            features=None if features is None else np.asarray(features, dtype=np.float64),
        )
        validate_bag(bag, where)
        bags.append(bag)
    return bags


def save_bags(path: str | Path, bags: Sequence[ProposalBag]) -> None:
    images = []
    for bag in bags:
        entry = {
            "id": bag.image_id,
            "width": bag.width,
            "height": bag.height,
            "labels": [int(c) for c in bag.positive_classes],
            "proposals": [[float(v) for v in row] for row in bag.boxes],
        }
        if bag.features is not None:
            entry["features"] = [[float(v) for v in row] for row in bag.features]
        images.append(entry)
    dump_json(path, {"images": images})


def load_gt(path: str | Path) -> GroundTruth:
    doc = json.loads(Path(path).read_text())
    images = _require(doc, "images", "$")
    out: dict[str, tuple[GtObject, ...]] = {}
    for i, img in enumerate(images):
        where = f"$.images[{i}]"
        image_id = str(_require(img, "id", where))
        objs = []
        for j, obj in enumerate(_require(img, "objects", where)):
            owhere = f"{where}.objects[{j}]"
            row = _require(obj, "box", owhere)
            try:
                box = box_from_row(row)
            except ValueError as exc:
                raise SchemaError(f"{owhere}.box: {exc}") from exc
            objs.append(
                GtObject(
                    class_id=int(_require(obj, "class", owhere)),
                    box=box,
                    difficult=bool(obj.get("difficult", False)),
                )
            )
        out[image_id] = tuple(objs)
    return GroundTruth(images=out)


def save_gt(path: str | Path, gt: GroundTruth, sizes: Mapping[str, tuple[float, float]] | None = None) -> None:
    images = []
    for image_id in sorted(gt.images):
        entry: dict = {"id": image_id}
        if sizes is not None and image_id in sizes:
            entry["width"], entry["height"] = sizes[image_id]
        entry["objects"] = [
            {
                "class": obj.class_id,
                "box": obj.box.to_list(),
                "difficult": obj.difficult,
            }
            for obj in gt.images[image_id]
        ]
        images.append(entry)
    dump_json(path, {"images": images})


def load_scores(path: str | Path) -> dict[str, np.ndarray]:
    """Score-matrix file: {"scores": [{"id": ..., "matrix": [[...], ...]}]}."""
    doc = json.loads(Path(path).read_text())
    entries = _require(doc, "scores", "$")
    out = {}
    for i, entry in enumerate(entries):
        where = f"$.scores[{i}]"
        mat = np.asarray(_require(entry, "matrix", where), dtype=np.float64)
        if mat.ndim != 2:
            raise SchemaError(f"{where}.matrix: expected a 2-D matrix")
        if not np.all(np.isfinite(mat)):
            raise SchemaError(f"{where}.matrix: non-finite entry")
        out[str(_require(entry, "id", where))] = mat
    return out


def save_scores(path: str | Path, matrices: Mapping[str, np.ndarray]) -> None:
    entries = [
        {"id": image_id, "matrix": [[float(v) for v in row] for row in np.asarray(matrices[image_id])]}
        for image_id in sorted(matrices)
    ]
    dump_json(path, {"scores": entries})


# ---------------------------------------------------------------------------
# VOC XML conversion
# ---------------------------------------------------------------------------

def convert_voc_xml(paths: Sequence[str | Path], class_names: Sequence[str]) -> GroundTruth:
    """Read VOC-layout annotation XMLs into ground truth.

    Coordinates are taken as written (this library has no +1 pixel
    convention). Class ids follow the order of `class_names`.
    """
    name_to_id = {name: i for i, name in enumerate(class_names)}
    images: dict[str, tuple[GtObject, ...]] = {}
    for path in paths:
        path = Path(path)
        root = ET.parse(path).getroot()
        filename_node = root.find("filename")
        image_id = (
            filename_node.text.rsplit(".", 1)[0]
            if filename_node is not None and filename_node.text
            else path.stem
        )
        objs = []
        for obj in root.findall("object"):
            name = obj.findtext("name", "").strip()
            if name not in name_to_id:
                raise SchemaError(f"{path}: unknown class name {name!r}")
            bnd = obj.find("bndbox")
            if bnd is None:
                raise SchemaError(f"{path}: object without bndbox")
            coords = [float(bnd.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
            objs.append(
                GtObject(
                    class_id=name_to_id[name],
                    box=box_from_row(coords),
                    difficult=obj.findtext("difficult", "0").strip() == "1",
                )
            )
        images[image_id] = tuple(objs)
    return GroundTruth(images=images)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Generator knobs; see the module docstring for the construction.

    salient_fraction is the AREA fraction of the object covered by the
    salient patch (the patch's sides scale by its square root). The patch
    sits in a fixed corner per class, mirroring how an object category's
    most distinctive part occupies a consistent position on the object.
    """

    width: float = 100.0
    height: float = 100.0
    num_classes: int = 2
    max_objects_per_class: int = 2
    class_prob: float = 0.6  # chance each class appears (at least one forced)
    multi_object_prob: float = 0.5  # chance a present class gets a second object
    salient_fraction: float = 0.3  # area fraction of the object
    salience_boost: float = 3.0
    feature_dim: int = 32
    noise_sigma: float = 0.05
    ladder_steps: tuple[float, ...] = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)
    ladder_repeats: int = 2
    context_scale: float = 1.3  # co-centered crops this factor larger than the object
    context_repeats: int = 2
    background_proposals: int = 6
    jitter: float = 0.05  # jitter of part/union crops, fraction of object size
    object_jitter: float = 0.1  # jitter of whole-object and context crops
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.salient_fraction < 1.0:
            raise ValueError("salient_fraction must be in (0, 1)")
        if self.max_objects_per_class < 1:
            raise ValueError("max_objects_per_class must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.context_scale < 1.0:
            raise ValueError("context_scale must be >= 1")


@dataclass(frozen=True)
class SceneSample:
    """A generated bag plus everything a test needs to audit it."""

    bag: ProposalBag
    objects: tuple[GtObject, ...]
    salient_boxes: tuple[Box, ...]  # parallel to objects
    proposal_kinds: tuple[str, ...]  # "part" | "union" | "object" | "context" | "background"
    activations: np.ndarray  # (C, N) noiseless total activation (salient + extent)

    @property
    def ground_truth(self) -> tuple[GtObject, ...]:
        return self.objects


def _class_directions(num_classes: int, feature_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal direction pairs: (salient dirs, extent dirs),
    each (C, D)."""
    if 2 * num_classes > feature_dim:
        raise ValueError("feature_dim must be >= 2 * num_classes")
    rng = np.random.default_rng([seed, 7919])
    mat = rng.normal(size=(feature_dim, 2 * num_classes))
    q, r = np.linalg.qr(mat)
    # Fix signs so the decomposition is unique and stable across platforms.
    q = (q * np.sign(np.diag(r))).T
    return q[:num_classes], q[num_classes:]


def _place_objects(
    rng: np.random.Generator, cfg: SyntheticSceneConfig, count: int
) -> list[Box]:
    """Non-overlapping object rectangles with a small separation margin."""
    placed: list[Box] = []
    margin = 0.02 * min(cfg.width, cfg.height)
    for _ in range(count):
        for _attempt in range(200):
            w = rng.uniform(0.22, 0.38) * cfg.width
            h = rng.uniform(0.22, 0.38) * cfg.height
            x1 = rng.uniform(0.0, cfg.width - w)
            y1 = rng.uniform(0.0, cfg.height - h)
            cand = Box(x1, y1, x1 + w, y1 + h)
            grown = Box(
                max(cand.x1 - margin, 0.0),
                max(cand.y1 - margin, 0.0),
                min(cand.x2 + margin, cfg.width),
                min(cand.y2 + margin, cfg.height),
            )
            if all(not _boxes_touch(grown, other) for other in placed):
                placed.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not place {count} non-overlapping objects in "
                f"{cfg.width} x {cfg.height} after 200 attempts"
            )
    return placed


def _boxes_touch(a: Box, b: Box) -> bool:
    return (
        min(a.x2, b.x2) - max(a.x1, b.x1) > 0.0
        and min(a.y2, b.y2) - max(a.y1, b.y1) > 0.0
    )


def _salient_corner(corner: int, obj: Box, area_fraction: float) -> Box:
    side = math.sqrt(area_fraction)
    sw, sh = obj.width * side, obj.height * side
    if corner == 0:
        return Box(obj.x1, obj.y1, obj.x1 + sw, obj.y1 + sh)
    if corner == 1:
        return Box(obj.x2 - sw, obj.y1, obj.x2, obj.y1 + sh)
    if corner == 2:
        return Box(obj.x1, obj.y2 - sh, obj.x1 + sw, obj.y2)
    return Box(obj.x2 - sw, obj.y2 - sh, obj.x2, obj.y2)


def _jittered(
    rng: np.random.Generator, base: np.ndarray, amount: float, cfg: SyntheticSceneConfig
) -> np.ndarray:
    row = base + rng.uniform(-amount, amount, size=4)
    row[0] = min(max(row[0], 0.0), cfg.width - 1.0)
    row[1] = min(max(row[1], 0.0), cfg.height - 1.0)
    row[2] = min(max(row[2], row[0] + 1.0), cfg.width)
    row[3] = min(max(row[3], row[1] + 1.0), cfg.height)
    return row


def generate_scene(cfg: SyntheticSceneConfig, image_index: int = 0) -> SceneSample:
    """One deterministic scene; per-image randomness derives from (seed, index)."""
    rng = np.random.default_rng([cfg.seed, 104729, image_index])
    directions = _class_directions(cfg.num_classes, cfg.feature_dim, cfg.seed)
    corner_rng = np.random.default_rng([cfg.seed, 60013])
    class_corners = corner_rng.integers(0, 4, size=cfg.num_classes)

    present = [c for c in range(cfg.num_classes) if rng.random() < cfg.class_prob]
    if not present:
        present = [int(rng.integers(0, cfg.num_classes))]
    counts = [
        1 + int(
            cfg.max_objects_per_class > 1 and rng.random() < cfg.multi_object_prob
        )
        for _ in present
    ]
    object_boxes = _place_objects(rng, cfg, sum(counts))
    objects: list[GtObject] = []
    salients: list[Box] = []
    i = 0
    for c, cnt in zip(present, counts):
        for _ in range(cnt):
            obj = object_boxes[i]
            objects.append(GtObject(class_id=c, box=obj))
            salients.append(
                _salient_corner(int(class_corners[c]), obj, cfg.salient_fraction)
            )
            i += 1

    rows: list[np.ndarray] = []
    kinds: list[str] = []
    for obj, salient in zip(objects, salients):
        size = min(obj.box.width, obj.box.height)
        s = np.asarray(salient.to_list())
        o = np.asarray(obj.box.to_list())
        for t in cfg.ladder_steps:
            base = s + t * (o - s)
            amount = (cfg.object_jitter if t == 1.0 else cfg.jitter) * size
            for _rep in range(cfg.ladder_repeats):
                rows.append(_jittered(rng, base, amount, cfg))
                if t == 0.0:
                    kinds.append("part")
                elif t == 1.0:
                    kinds.append("object")
                else:
                    kinds.append("union")
        cx, cy = (o[0] + o[2]) / 2.0, (o[1] + o[3]) / 2.0
        half_w = obj.box.width * cfg.context_scale / 2.0
        half_h = obj.box.height * cfg.context_scale / 2.0
        ctx = np.array([cx - half_w, cy - half_h, cx + half_w, cy + half_h])
        for _rep in range(cfg.context_repeats):
            rows.append(_jittered(rng, ctx, cfg.object_jitter * size, cfg))
            kinds.append("context")
    for _ in range(cfg.background_proposals):
        w = rng.uniform(0.08, 0.3) * cfg.width
        h = rng.uniform(0.08, 0.3) * cfg.height
        x1 = rng.uniform(0.0, cfg.width - w)
        y1 = rng.uniform(0.0, cfg.height - h)
        rows.append(np.array([x1, y1, x1 + w, y1 + h]))
        kinds.append("background")

    # Shuffle so proposal position carries no information about kind.
    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    kinds = [kinds[i] for i in order]

    box_arr = np.vstack(rows)
    n = box_arr.shape[0]
    obj_arr = np.vstack([o.box.to_list() for o in objects])
    sal_arr = np.vstack([s.to_list() for s in salients])
    iou_obj = pairwise_iou(box_arr, obj_arr)  # (N, M)
    iou_sal = pairwise_iou(box_arr, sal_arr)
    sal_act = np.zeros((cfg.num_classes, n))
    ext_act = np.zeros((cfg.num_classes, n))
    for m, obj in enumerate(objects):
        c = obj.class_id
        sal_act[c] = np.maximum(sal_act[c], cfg.salience_boost * iou_sal[:, m])
        ext_act[c] = np.maximum(ext_act[c], iou_obj[:, m])

    sal_dirs, ext_dirs = directions
    features = sal_act.T @ sal_dirs + ext_act.T @ ext_dirs  # (N, D)
    features = features + rng.normal(0.0, cfg.noise_sigma, size=features.shape)
    activations = sal_act + ext_act  # scalar audit summary per class

    labels = np.zeros(cfg.num_classes, dtype=np.int64)
    labels[[o.class_id for o in objects]] = 1
    bag = ProposalBag(
        image_id=f"img_{image_index:04d}",
        width=cfg.width,
        height=cfg.height,
        boxes=box_arr,
        labels=labels,
        features=features,
    )
    validate_bag(bag, f"generated scene {image_index}")
    return SceneSample(
        bag=bag,
        objects=tuple(objects),
        salient_boxes=tuple(salients),
        proposal_kinds=tuple(kinds),
        activations=activations,
    )


def generate_dataset(
    cfg: SyntheticSceneConfig, num_images: int
) -> tuple[list[ProposalBag], GroundTruth]:
    """A list of bags plus matching ground truth."""
    bags = []
    gt: dict[str, tuple[GtObject, ...]] = {}
    for i in range(num_images):
        sample = generate_scene(cfg, i)
        bags.append(sample.bag)
        gt[sample.bag.image_id] = sample.objects
    return bags, GroundTruth(images=gt)
