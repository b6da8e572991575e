"""Command line interface.

Every subcommand funnels randomness through one --seed flag, writes its
delimited outputs plus rendered figures into --out, and drops a
manifest.json recording the command, the effective configuration, input
file hashes, and the produced files.

Exit codes: 0 success, 2 missing input file, 3 bad configuration or
arguments or checkpoint, 4 aborted run (non-finite loss, impossible scene).
Failures print a single JSON line on stderr.
"""

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .boxes import BBox, LossKind, loss_landscape
from .data import SceneConfig, load_split, write_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    GenerationError,
    InvalidArgumentError,
    NanAbortError,
)
from .model import HEAD_ORDER, ModelConfig, PAN_MODES, build_model, count_flops, count_params, trim
from .pipeline import LossConfig, write_detections_csv
from .plots import (
    save_flops_png,
    save_history_png,
    save_landscape_png,
    save_preview_png,
    save_pr_curve_png,
)
from .train import (
    FREEZE_SPECS,
    TrainConfig,
    freeze,
    load_checkpoint,
    reinit_trainable,
    run_validation,
    save_checkpoint,
    train,
)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, seed, inputs, outputs):
    manifest = {
        "tool": f"irdet {__version__}",
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _model_config_from_args(args):
    heads = tuple(h.strip() for h in args.heads.split(",") if h.strip())
    return ModelConfig(
        stem_stride=args.stem_stride,
        width_multiple=args.width,
        enable_p2_head="P2" in heads,
        ca_blocks_on_p2=args.ca_blocks,
        active_heads=heads,
        pan_mode=args.pan,
    ).validate()


def _add_model_flags(p):
    p.add_argument("--stem-stride", type=int, default=1, choices=(1, 2))
    p.add_argument("--width", type=float, default=1.0, help="channel width multiple")
    p.add_argument("--heads", default="P2,P3,P4,P5", help="comma list drawn from P2,P3,P4,P5")
    p.add_argument("--pan", default="full", choices=PAN_MODES)
    p.add_argument("--ca-blocks", type=int, default=3, help="attention blocks on the P2 branch")


def _load_model(args, inputs):
    if args.ckpt:
        inputs.append(args.ckpt)
        model, _ = load_checkpoint(args.ckpt)
        return model
    return build_model(_model_config_from_args(args), seed=args.seed)


# -- synth -------------------------------------------------------------------


def cmd_synth(args):
    cfg = SceneConfig(
        image_size=args.image_size,
        targets_min=args.targets_min,
        targets_max=args.targets_max,
        size_min=args.size_min,
        size_max=args.size_max,
        intensity_min=args.intensity_min,
        intensity_max=args.intensity_max,
        background=args.background,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    train_samples, val_samples = write_dataset(cfg, args.out, args.train_count, args.val_count)
    outputs = ["images/", "labels/", "train.txt", "val.txt"]
    if args.preview:
        save_preview_png(os.path.join(args.out, "preview.png"), train_samples[: args.preview])
        outputs.append("preview.png")
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(args.out, "synth", snapshot, args.seed, [], outputs)
    print(f"wrote {len(train_samples)} train / {len(val_samples)} val scenes to {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(args):
    os.makedirs(args.out, exist_ok=True)
    inputs = [os.path.join(args.data, "train.txt"), os.path.join(args.data, "val.txt")]
    train_samples = load_split(args.data, "train")
    val_samples = load_split(args.data, "val")

    model = _load_model(args, inputs)
    if args.reinit_trainable:
        freeze(model, args.freeze)
        reinit_trainable(model, seed=args.seed)

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        freeze_spec=args.freeze,
        loss=LossConfig(kind=LossKind(tag=args.loss, c_const=args.c_const)),
        checkpoint_every=args.checkpoint_every,
        warmup_epochs=args.warmup_epochs,
        lr_final_frac=args.lr_final_frac,
    )

    def log(entry):
        print(
            f"epoch {entry['epoch']:4d}  loss {entry['loss_total']:.4f}  "
            f"ap50 {entry['ap50']:.3f}  f1 {entry['f1']:.3f}"
        )

    history = train(model, train_samples, cfg, val_samples=val_samples, out_dir=args.out, log=log)
    save_history_png(os.path.join(args.out, "curves.png"), history)
    outputs = ["history.jsonl", "curves.png", "final.ckpt"]
    outputs += [f for f in os.listdir(args.out) if f.startswith("epoch_")]
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(args.out, "train", snapshot, args.seed, inputs, outputs)
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    inputs = [args.ckpt, os.path.join(args.data, f"{args.split}.txt")]
    model, _ = load_checkpoint(args.ckpt)
    samples = load_split(args.data, args.split)

    report, per_dets = run_validation(model, samples, conf_thresh=args.conf)
    det_rows = [(s.image_id, d) for s, dets in zip(samples, per_dets) for d in dets]
    write_detections_csv(os.path.join(args.out, "detections.csv"), det_rows)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(args.out, "pr_curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("recall", "precision"))
        w.writerows(report.pr_curve)
    save_pr_curve_png(os.path.join(args.out, "pr_curve.png"), report.pr_curve, report.ap50)
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(
        args.out,
        "eval",
        snapshot,
        args.seed,
        inputs,
        ["detections.csv", "metrics.json", "pr_curve.csv", "pr_curve.png"],
    )
    print(report.to_json())
    return 0


# -- trim --------------------------------------------------------------------


def cmd_trim(args):
    os.makedirs(args.out, exist_ok=True)
    model, _ = load_checkpoint(args.ckpt)
    keep = tuple(h.strip() for h in args.heads.split(",") if h.strip())

    p_before, _ = count_params(model)
    f_before, _ = count_flops(model, (args.image_size, args.image_size))
    trimmed = trim(model, keep, args.pan)
    p_after, _ = count_params(trimmed)
    f_after, _ = count_flops(trimmed, (args.image_size, args.image_size))

    save_checkpoint(os.path.join(args.out, "trimmed.ckpt"), trimmed)
    with open(os.path.join(args.out, "trim_report.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("quantity", "before", "after", "delta_pct"))
        w.writerow(("params", p_before, p_after, round(100.0 * (p_after - p_before) / p_before, 4)))
        w.writerow(("flops", f_before, f_after, round(100.0 * (f_after - f_before) / f_before, 4)))
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(
        args.out, "trim", snapshot, args.seed, [args.ckpt], ["trimmed.ckpt", "trim_report.csv"]
    )
    print(
        f"params {p_before} -> {p_after} ({100.0 * (p_after - p_before) / p_before:+.2f}%), "
        f"flops {f_before} -> {f_after} ({100.0 * (f_after - f_before) / f_before:+.2f}%)"
    )
    return 0


# -- flops -------------------------------------------------------------------


def cmd_flops(args):
    os.makedirs(args.out, exist_ok=True)
    inputs = []
    model = _load_model(args, inputs)

    p_total, p_rows = count_params(model)
    f_total, f_rows = count_flops(model, (args.image_size, args.image_size))
    params_by_name = {name: n for name, _, n in p_rows}

    with open(os.path.join(args.out, "flops.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("record", "kind", "params", "flops", "out_shape"))
        for name, kind, flops, shape in f_rows:
            w.writerow((name, kind, params_by_name.get(name, 0), flops, "x".join(map(str, shape))))
        w.writerow(("total", "", p_total, f_total, ""))
    save_flops_png(os.path.join(args.out, "flops.png"), f_rows)
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(args.out, "flops", snapshot, args.seed, inputs, ["flops.csv", "flops.png"])
    print(f"{p_total} params, {f_total / 1e9:.3f} GFLOPs at {args.image_size}x{args.image_size}")
    return 0


# -- landscape ---------------------------------------------------------------


def cmd_landscape(args):
    os.makedirs(args.out, exist_ok=True)
    kind = LossKind(tag=args.kind, c_const=args.c_const)
    gt = BBox(0.0, 0.0, args.box_w, args.box_h)
    offsets = np.arange(-args.extent, args.extent + args.step / 2, args.step)
    grid = loss_landscape(gt, offsets, offsets, kind)

    with open(os.path.join(args.out, "landscape.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("dy", "dx", "value"))
        for i, dy in enumerate(offsets):
            for j, dx in enumerate(offsets):
                w.writerow((round(float(dy), 6), round(float(dx), 6), round(float(grid[i, j]), 8)))
    title = f"{args.kind} similarity, {args.box_w:g}x{args.box_h:g} box"
    save_landscape_png(os.path.join(args.out, "landscape.png"), grid, offsets, offsets, title)
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(
        args.out, "landscape", snapshot, args.seed, [], ["landscape.csv", "landscape.png"]
    )
    print(f"grid {grid.shape[0]}x{grid.shape[1]}, min {grid.min():.6f}, max {grid.max():.6f}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="irdet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"irdet {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic small-target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=64)
    p.add_argument("--val-count", type=int, default=16)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--targets-min", type=int, default=1)
    p.add_argument("--targets-max", type=int, default=3)
    p.add_argument("--size-min", type=float, default=2.0)
    p.add_argument("--size-max", type=float, default=8.0)
    p.add_argument("--intensity-min", type=float, default=0.06)
    p.add_argument("--intensity-max", type=float, default=0.14)
    p.add_argument("--background", default="mixed", choices=("gradient", "clutter", "mixed"))
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--preview", type=int, default=8, help="scenes in preview.png, 0 to skip")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory from synth")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default="", help="start from this checkpoint instead of a fresh init")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup-epochs", type=float, default=0.0)
    p.add_argument("--lr-final-frac", type=float, default=1.0, help="cosine floor; 1.0 = constant lr")
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--loss", default="nwd", choices=("iou", "ciou", "nwd"))
    p.add_argument("--c-const", type=float, default=17.0)
    p.add_argument("--freeze", default="none", choices=FREEZE_SPECS)
    p.add_argument(
        "--reinit-trainable",
        action="store_true",
        help="redraw the unfrozen records before training (two-stage refinement)",
    )
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--conf", type=float, default=0.25, help="operating confidence threshold")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trim", help="drop heads and shrink the fusion path of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--heads", required=True, help="comma list of heads to keep")
    p.add_argument("--pan", required=True, choices=PAN_MODES)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=512, help="input size for the cost report")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("flops", help="parameter and FLOP accounting")
    p.add_argument("--ckpt", default="", help="checkpoint to measure; omit to use model flags")
    _add_model_flags(p)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("landscape", help="box-similarity surface under center offsets")
    p.add_argument("--kind", default="nwd", choices=("iou", "ciou", "nwd"))
    p.add_argument("--c-const", type=float, default=17.0)
    p.add_argument("--box-w", type=float, default=4.0)
    p.add_argument("--box-h", type=float, default=4.0)
    p.add_argument("--extent", type=float, default=8.0, help="max |offset| in px")
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_landscape)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        return _fail("FileNotFoundError", str(e), 2)
    except (ConfigError, InvalidArgumentError, CheckpointError) as e:
        return _fail(type(e).__name__, str(e), 3)
    except (NanAbortError, GenerationError) as e:
        return _fail(type(e).__name__, str(e), 4)


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
