"""Command-line front end.

One binary with subcommands; every subcommand is a pure function of its
input files, flags, and seed, so re-runs are byte-identical. Exit codes:
0 success, 1 runtime failure (bad data, divergence, I/O), 2 usage error.

A JSON config file passed via --config supplies values for any flag the
user did not set explicitly on the command line; explicit flags win, and
keys a subcommand does not use are ignored.
"""

from __future__ import annotations

import functools
import json
from pathlib import Path

import click
from click.core import ParameterSource

from . import data as dio
from .evaluation import evaluate, format_report, report_to_dict
from .fusion import fuse_history
from .geometry import ScoredBox, box_from_row, nms as run_nms
from .mil_head import assign_pseudo_labels
from .mining import MiningConfig, mine_box
from .pipeline import (
    PipelineConfig,
    class_top_boxes,
    infer,
    load_checkpoint,
    save_checkpoint,
    train,
)


def _runtime_errors(f):
    """Map data/compute failures to exit code 1; usage errors keep exit 2."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
            raise click.ClickException(str(exc))

    return wrapper


def _apply_config(ctx: click.Context, config: str | None, values: dict) -> dict:
    if not config:
        return values
    doc = json.loads(Path(config).read_text())
    if not isinstance(doc, dict):
        raise click.UsageError(f"config file {config} must hold a JSON object")
    out = dict(values)
    for key, val in doc.items():
        k = key.replace("-", "_")
        if k in out and ctx.get_parameter_source(k) != ParameterSource.COMMANDLINE:
            out[k] = val
    return out


def _parse_iou_ign(value: str) -> float | None:
    if value.lower() == "off":
        return None
    try:
        t = float(value)
    except ValueError:
        raise click.UsageError(f"--iou-ign expects a number or 'off', got {value!r}")
    if not 0.0 <= t <= 1.0:
        raise click.UsageError(f"--iou-ign must be in [0, 1], got {t}")
    return t


def _check_unit(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise click.UsageError(f"--{name} must be in [0, 1], got {value}")
    return value


@click.group()
def main():
    """Weakly supervised detection refinement toolkit."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@main.command()
@click.option("--output-bags", required=True, type=click.Path(), help="Bag file to write.")
@click.option("--output-gt", required=True, type=click.Path(), help="Ground-truth file to write.")
@click.option("--images", default=40, show_default=True, help="Number of scenes.")
@click.option("--image-size", default=100.0, show_default=True, help="Square image side length.")
@click.option("--classes", default=2, show_default=True, help="Number of object classes.")
@click.option("--max-objects", default=2, show_default=True,
              help="Max same-class objects per image.")
@click.option("--salient-fraction", default=0.3, show_default=True,
              help="Linear fraction of each object side forming the salient patch.")
@click.option("--salience-boost", default=3.0, show_default=True,
              help="Feature-activation multiplier of salient-patch overlap.")
@click.option("--feature-dim", default=32, show_default=True)
@click.option("--noise-sigma", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def simulate(ctx, **kw):
    """Generate synthetic scenes (bags plus ground truth)."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    cfg = dio.SyntheticSceneConfig(
        width=kw["image_size"],
        height=kw["image_size"],
        num_classes=kw["classes"],
        max_objects_per_class=kw["max_objects"],
        salient_fraction=kw["salient_fraction"],
        salience_boost=kw["salience_boost"],
        feature_dim=kw["feature_dim"],
        noise_sigma=kw["noise_sigma"],
        seed=kw["seed"],
    )
    bags, gt = dio.generate_dataset(cfg, kw["images"])
    dio.save_bags(kw["output_bags"], bags)
    sizes = {b.image_id: (b.width, b.height) for b in bags}
    dio.save_gt(kw["output_gt"], gt, sizes=sizes)
    click.echo(f"wrote {len(bags)} scenes to {kw['output_bags']} and {kw['output_gt']}")


# ---------------------------------------------------------------------------
# mine
# ---------------------------------------------------------------------------

@main.command()
@click.argument("scores_file", type=click.Path(exists=True))
@click.argument("bags_file", type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path(), help="Mined-boxes file to write.")
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Optional mining-trace file to write.")
@click.option("--gamma1", default=0.3, show_default=True,
              help="Cluster IoU threshold.")
@click.option("--q", default=3, show_default=True, help="Maximum cluster count.")
@click.option("--size-weight", type=click.Choice(["uniform", "area"]),
              default="area", show_default=True,
              help="Step-2 averaging weights for surviving created boxes.")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def mine(ctx, scores_file, bags_file, **kw):
    """Mine per-class supervision boxes from proposal scores."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    _check_unit("gamma1", kw["gamma1"])
    if kw["q"] < 1:
        raise click.UsageError(f"--q must be >= 1, got {kw['q']}")
    cfg = MiningConfig(gamma1=kw["gamma1"], q=kw["q"], size_weight_mode=kw["size_weight"])
    bags = dio.load_bags(bags_file)
    scores = dio.load_scores(scores_file)
    mined_entries = []
    trace_entries = []
    for bag in sorted(bags, key=lambda b: b.image_id):
        if bag.image_id not in scores:
            raise click.ClickException(f"no score matrix for image {bag.image_id!r}")
        mat = scores[bag.image_id]
        if mat.shape[1] != bag.num_proposals:
            raise click.ClickException(
                f"image {bag.image_id!r}: matrix has {mat.shape[1]} columns "
                f"but the bag has {bag.num_proposals} proposals"
            )
        boxes = bag.box_list()
        mined: dict[str, list[float]] = {}
        traces: dict[str, dict] = {}
        for c in bag.positive_classes:
            trace = mine_box(mat[int(c)], boxes, cfg)
            mined[str(int(c))] = trace.final_box.to_list()
            traces[str(int(c))] = {
                "clusters": [
                    {"members": list(cl.members), "seed": cl.seed,
                     "created": cl.created.to_list()}
                    for cl in trace.clusters
                ],
                "eliminated": list(trace.eliminated),
                "fallback": trace.fallback,
                "final": trace.final_box.to_list(),
            }
        mined_entries.append({"id": bag.image_id, "mined": mined})
        trace_entries.append({"id": bag.image_id, "classes": traces})
    dio.dump_json(kw["output"], {"images": mined_entries})
    if kw["trace_path"]:
        dio.dump_json(kw["trace_path"], {"images": trace_entries})
    click.echo(f"mined boxes for {len(mined_entries)} images -> {kw['output']}")


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------

@main.command()
@click.argument("score_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--delta", default=0.1, show_default=True, help="Recency step.")
@click.option("--output", required=True, type=click.Path(), help="Fused score file.")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def fuse(ctx, score_files, **kw):
    """Blend per-stage score files with recency weights (earliest first)."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    if kw["delta"] < 0:
        raise click.UsageError(f"--delta must be >= 0, got {kw['delta']}")
    stages = [dio.load_scores(path) for path in score_files]
    ids = sorted(stages[0])
    for path, stage in zip(score_files, stages):
        if sorted(stage) != ids:
            raise click.ClickException(f"{path} lists different image ids")
    fused = {
        image_id: fuse_history([stage[image_id] for stage in stages], kw["delta"])
        for image_id in ids
    }
    dio.save_scores(kw["output"], fused)
    click.echo(f"fused {len(score_files)} stages for {len(ids)} images -> {kw['output']}")


# ---------------------------------------------------------------------------
# assign
# ---------------------------------------------------------------------------

@main.command()
@click.argument("bags_file", type=click.Path(exists=True))
@click.argument("sup_file", type=click.Path(exists=True))
@click.option("--gamma2", default=0.5, show_default=True,
              help="Foreground IoU threshold.")
@click.option("--iou-ign", default="off", show_default=True,
              help="Ignore proposals with IoU in (t, gamma2]; 'off' disables.")
@click.option("--num-classes", default=None, type=int,
              help="Class count [default: inferred from the bags].")
@click.option("--output", required=True, type=click.Path(), help="Labels file to write.")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def assign(ctx, bags_file, sup_file, **kw):
    """Assign per-proposal pseudo-labels from supervision boxes."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    gamma2 = _check_unit("gamma2", kw["gamma2"])
    iou_ign = _parse_iou_ign(str(kw["iou_ign"]))
    bags = dio.load_bags(bags_file, num_classes=kw["num_classes"])
    sup_doc = json.loads(Path(sup_file).read_text())
    sup_by_image = {
        str(entry["id"]): entry.get("mined", {})
        for entry in sup_doc.get("images", [])
    }
    num_classes = bags[0].num_classes if bags else (kw["num_classes"] or 0)
    entries = []
    for bag in sorted(bags, key=lambda b: b.image_id):
        raw = sup_by_image.get(bag.image_id, {})
        sup_boxes = {int(c): box_from_row(row) for c, row in raw.items()}
        labels = assign_pseudo_labels(
            bag.box_list(), sup_boxes, gamma2, num_classes, iou_ign_threshold=iou_ign
        )
        entries.append(
            {
                "id": bag.image_id,
                "labels": [int(v) for v in labels.labels],
                "weights": [float(v) for v in labels.weights],
            }
        )
    dio.dump_json(kw["output"], {"background_id": num_classes, "images": entries})
    click.echo(f"assigned labels for {len(entries)} images -> {kw['output']}")


# ---------------------------------------------------------------------------
# nms
# ---------------------------------------------------------------------------

@main.command(name="nms")
@click.argument("detections_file", type=click.Path(exists=True))
@click.option("--nms-threshold", default=0.3, show_default=True,
              help="Suppress boxes overlapping a kept same-class box above this IoU.")
@click.option("--output", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def nms_cmd(ctx, detections_file, **kw):
    """Apply per-class NMS to a detections file."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    threshold = _check_unit("nms-threshold", kw["nms_threshold"])
    doc = json.loads(Path(detections_file).read_text())
    out_images = []
    for entry in sorted(doc.get("images", []), key=lambda e: str(e.get("id", ""))):
        dets = [
            ScoredBox(
                box=box_from_row(d["box"]),
                score=float(d["score"]),
                class_id=int(d["class"]),
            )
            for d in entry.get("detections", [])
        ]
        kept = run_nms(dets, threshold)
        new_entry = dict(entry)
        new_entry["detections"] = [
            {"box": d.box.to_list(), "score": d.score, "class": d.class_id}
            for d in kept
        ]
        out_images.append(new_entry)
    dio.dump_json(kw["output"], {"images": out_images})
    click.echo(f"suppressed overlaps in {len(out_images)} images -> {kw['output']}")


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

@main.command(name="train-toy")
@click.argument("bags_file", type=click.Path(exists=True))
@click.option("--output-checkpoint", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Line-delimited JSON training log.")
@click.option("--iterations", default=200, show_default=True)
@click.option("--learning-rate", default=0.01, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--batch-size", default=2, show_default=True)
@click.option("--k-stages", default=3, show_default=True,
              help="Refinement stages in each block (memory and mining).")
@click.option("--gamma1", default=0.3, show_default=True)
@click.option("--gamma2", default=0.5, show_default=True)
@click.option("--delta", default=0.1, show_default=True)
@click.option("--q", default=3, show_default=True)
@click.option("--size-weight", type=click.Choice(["uniform", "area"]),
              default="area", show_default=True)
@click.option("--iou-ign", default="off", show_default=True)
@click.option("--nms-threshold", default=0.3, show_default=True)
@click.option("--num-classes", default=None, type=int,
              help="[default: inferred from bag labels]")
@click.option("--heads", default=4, show_default=True)
@click.option("--layers", default=2, show_default=True)
@click.option("--n-max", default=None, type=int,
              help="[default: largest proposal count in the bags]")
@click.option("--disable-mining", is_flag=True, help="Top-1 supervision only (ablation).")
@click.option("--disable-memory", is_flag=True, help="Previous-stage supervision only (ablation).")
@click.option("--confidence-weights", is_flag=True,
              help="Weight refinement losses by seed confidence (ablation).")
@click.option("--seed", default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON file supplying unset flags.")
@click.pass_context
@_runtime_errors
def train_toy(ctx, bags_file, **kw):
    """Train the refinement pipeline on a bag file (desk scale)."""
    kw = _apply_config(ctx, kw.pop("config"), kw)
    _check_unit("gamma1", kw["gamma1"])
    _check_unit("gamma2", kw["gamma2"])
    _check_unit("nms-threshold", kw["nms_threshold"])
    iou_ign = _parse_iou_ign(str(kw["iou_ign"]))
    bags = dio.load_bags(bags_file, num_classes=kw["num_classes"])
    if not bags:
        raise click.ClickException("bag file holds no images")
    for bag in bags:
        if bag.features is None:
            raise click.ClickException(f"image {bag.image_id!r} has no features")
    feature_dim = bags[0].features.shape[1]
    n_max = kw["n_max"] or max(bag.num_proposals for bag in bags)
    cfg = PipelineConfig(
        num_classes=bags[0].num_classes,
        feature_dim=feature_dim,
        heads=kw["heads"],
        layers=kw["layers"],
        n_max=n_max,
        memory_stages=kw["k_stages"],
        mining_stages=kw["k_stages"],
        gamma1=kw["gamma1"],
        gamma2=kw["gamma2"],
        delta=kw["delta"],
        q=kw["q"],
        size_weight_mode=kw["size_weight"],
        iou_ign=iou_ign,
        nms_threshold=kw["nms_threshold"],
        learning_rate=kw["learning_rate"],
        momentum=kw["momentum"],
        iterations=kw["iterations"],
        batch_size=kw["batch_size"],
        seed=kw["seed"],
        use_mining=not kw["disable_mining"],
        use_memory=not kw["disable_memory"],
        use_confidence_weights=kw["confidence_weights"],
    )
    state = train(bags, cfg)
    save_checkpoint(kw["output_checkpoint"], state)
    if kw["log_path"]:
        lines = [json.dumps(rec, sort_keys=True) for rec in state.history]
        Path(kw["log_path"]).write_text("\n".join(lines) + ("\n" if lines else ""))
    final = state.history[-1]["loss_total"] if state.history else float("nan")
    click.echo(
        f"trained {cfg.iterations} iterations on {len(bags)} images "
        f"(final batch loss {final:.4f}) -> {kw['output_checkpoint']}"
    )


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

@main.command(name="infer")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("bags_file", type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path(), help="Detections file.")
@click.option("--nms-threshold", default=None, type=float,
              help="[default: the checkpoint's configured threshold]")
@click.pass_context
@_runtime_errors
def infer_cmd(ctx, checkpoint, bags_file, **kw):
    """Run detection on a bag file with a trained checkpoint."""
    state = load_checkpoint(checkpoint)
    cfg = state.config
    if kw["nms_threshold"] is not None:
        from dataclasses import replace
        cfg = replace(cfg, nms_threshold=_check_unit("nms-threshold", kw["nms_threshold"]))
    bags = dio.load_bags(bags_file, num_classes=cfg.num_classes)
    entries = []
    for bag in sorted(bags, key=lambda b: b.image_id):
        dets = infer(bag, state.params, cfg)
        tops = class_top_boxes(bag, state.params, cfg)
        entries.append(
            {
                "id": bag.image_id,
                "detections": [
                    {"box": d.box.to_list(), "score": d.score, "class": d.class_id}
                    for d in dets
                ],
                "top": {
                    str(c): {"box": t.box.to_list(), "score": t.score}
                    for c, t in sorted(tops.items())
                },
            }
        )
    dio.dump_json(kw["output"], {"images": entries})
    click.echo(f"detections for {len(entries)} images -> {kw['output']}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

@main.command(name="eval")
@click.argument("detections_file", type=click.Path(exists=True))
@click.argument("gt_file", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(list(("voc07_11point", "area"))),
              default="voc07_11point", show_default=True)
@click.option("--iou-pos", default=0.5, show_default=True,
              help="IoU strictly above this counts as a correct localization.")
@click.option("--output", type=click.Path(), default=None, help="JSON report path.")
@click.pass_context
@_runtime_errors
def eval_cmd(ctx, detections_file, gt_file, **kw):
    """Score a detections file against ground truth (AP, mAP, CorLoc)."""
    _check_unit("iou-pos", kw["iou_pos"])
    doc = json.loads(Path(detections_file).read_text())
    gt = dio.load_gt(gt_file)
    detections: dict[str, list[ScoredBox]] = {}
    top_dets: dict[str, dict[int, ScoredBox]] = {}
    class_ids: set[int] = set(gt.class_ids())
    for entry in doc.get("images", []):
        image_id = str(entry["id"])
        dets = [
            ScoredBox(box=box_from_row(d["box"]), score=float(d["score"]),
                      class_id=int(d["class"]))
            for d in entry.get("detections", [])
        ]
        detections[image_id] = dets
        class_ids.update(d.class_id for d in dets)
        tops = {}
        for c, t in entry.get("top", {}).items():
            tops[int(c)] = ScoredBox(
                box=box_from_row(t["box"]), score=float(t["score"]), class_id=int(c)
            )
        top_dets[image_id] = tops
        class_ids.update(tops)
    report = evaluate(
        detections, top_dets, gt, sorted(class_ids),
        iou_pos=kw["iou_pos"], mode=kw["mode"],
    )
    click.echo(format_report(report))
    if kw["output"]:
        dio.dump_json(kw["output"], report_to_dict(report))


if __name__ == "__main__":
    main()
