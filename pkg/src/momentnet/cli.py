"""Command-line surface: train, eval, finetune, visualize, moments.

Exit codes: 0 ok, 2 config/contract error, 3 runtime (numerics, degenerate
input), 4 io/format error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import model as modelmod
from . import moments as momentsmod
from . import visualize as vizmod
from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateImageError,
    FormatError,
    GenerationError,
    NumericsError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _build_datasets(resolved: dict, seed: int):
    kind = resolved["data.kind"]
    h, w = resolved["model.input_h"], resolved["model.input_w"]
    if kind == "synth":
        classes = cfgmod.class_list(resolved)
        # even/odd derived seeds keep train and eval streams disjoint
        train = datamod.synth_generate(resolved["data.train_size"], classes, h, w,
                                       seed=2 * seed, noise_max=resolved["data.noise_max"])
        evalset = datamod.synth_generate(resolved["data.eval_size"], classes, h, w,
                                         seed=2 * seed + 1, noise_max=resolved["data.noise_max"])
        return train, evalset
    if kind == "cifar10":
        train = datamod.cifar_load(resolved["data.path"], "train")
        evalset = datamod.cifar_load(resolved["data.path"], "test")
        return train, evalset
    if kind == "records":
        ds = datamod.load_records(resolved["data.path"])
        n_eval = min(resolved["data.eval_size"], len(ds) // 5)
        return ds.subset(slice(n_eval, None)), ds.subset(slice(0, n_eval))
    raise ConfigError(f"unknown data.kind '{kind}'")


def _write_run_files(out_dir: str, resolved: dict, report=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as f:
        f.write(cfgmod.format_config(resolved))
    if report is not None:
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write(report.to_csv())


def cmd_train(args) -> int:
    resolved = cfgmod.load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else resolved["seed"]
    resolved["seed"] = seed
    mcfg = cfgmod.model_config(resolved)
    train_set, eval_set = _build_datasets(resolved, seed)
    if train_set.num_classes != mcfg.num_classes:
        raise ConfigError(
            f"dataset has {train_set.num_classes} classes but model.num_classes = {mcfg.num_classes}")
    model = modelmod.build(mcfg, seed)
    hyper = modelmod.Hyper(
        epochs=resolved["train.epochs"],
        batch_size=resolved["train.batch_size"],
        lr=resolved["train.lr"],
        momentum=resolved["train.momentum"],
        weight_decay=resolved["train.weight_decay"],
        augment=resolved["train.augment"],
        stop_at_eval_acc=resolved["train.stop_at_eval_acc"],
    )
    report = modelmod.train(model, train_set, eval_set, hyper, seed)
    _write_run_files(args.out, resolved, report)
    modelmod.save(model, os.path.join(args.out, "checkpoint.bin"))
    last = report.epochs[-1]
    print(f"trained {len(report.epochs)} epochs: train_acc={last.train_acc!r} eval_acc={last.eval_acc!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    resolved = cfgmod.load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else resolved["seed"]
    resolved["seed"] = seed
    model = modelmod.load(args.checkpoint)
    _, eval_set = _build_datasets(resolved, seed)
    if eval_set.images.shape[2:] != (model.config.input_h, model.config.input_w):
        raise ContractViolation(
            f"dataset images {eval_set.images.shape[2:]} do not match checkpoint input "
            f"{(model.config.input_h, model.config.input_w)}")
    rows = []
    clean = modelmod.evaluate(model, eval_set)
    rows.append(("clean_acc", clean))
    print(f"clean_acc={clean!r}")
    if args.distort is not None:
        spec = datamod.DistortionSpec(kind=args.distort)
        distorted = datamod.distort_eval_set(eval_set, spec, seed=args.distort_seed if args.distort_seed is not None else seed)
        acc = modelmod.evaluate(model, distorted)
        rows.append((f"{args.distort.lower()}_acc", acc))
        print(f"{args.distort.lower()}_acc={acc!r}")
    if args.out:
        _write_run_files(args.out, resolved)
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
            f.write("metric,value\n")
            for k, v in rows:
                f.write(f"{k},{v!r}\n")
    return EXIT_OK


def cmd_finetune(args) -> int:
    resolved = cfgmod.load_config(args.config, args.set)
    seed = args.seed if args.seed is not None else resolved["seed"]
    resolved["seed"] = seed
    model = modelmod.load(args.checkpoint)
    if model.config.variant != "dgm":
        raise ConfigError("finetuning applies to dgm checkpoints only")
    train_set, eval_set = _build_datasets(resolved, seed)
    if train_set.images.shape[2:] != (model.config.input_h, model.config.input_w):
        raise ContractViolation("finetune dataset dims do not match the checkpoint")

    checksum_before = modelmod.frozen_checksum(model)
    trainable, frozen = modelmod.prepare_finetune(model, train_set.num_classes, seed)
    total = model.parameter_count()
    trainable_count = sum(p.data.size for name, p in model.named_parameters() if name in set(trainable))
    hyper = modelmod.Hyper(
        epochs=resolved["finetune.epochs"],
        batch_size=resolved["train.batch_size"],
        lr=resolved["finetune.lr"],
        momentum=resolved["train.momentum"],
        weight_decay=resolved["train.weight_decay"],
        augment=resolved["train.augment"],
        stop_at_eval_acc=resolved["train.stop_at_eval_acc"],
    )
    report = modelmod.train(model, train_set, eval_set, hyper, seed, trainable=trainable)
    checksum_after = modelmod.frozen_checksum(model)
    if checksum_after != checksum_before:
        raise NumericsError("frozen image-pipeline state changed during finetuning")

    _write_run_files(args.out, resolved, report)
    modelmod.save(model, os.path.join(args.out, "checkpoint.bin"))
    fraction = trainable_count / total
    lines = [
        f"frozen_checksum_before={checksum_before}",
        f"frozen_checksum_after={checksum_after}",
        f"trainable_fraction={fraction!r}",
        f"final_eval_acc={report.final_eval_acc!r}",
    ]
    with open(os.path.join(args.out, "finetune.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def _load_image_for_model(path: str, model) -> np.ndarray:
    img = vizmod.read_pnm(path)
    if img.ndim == 2:
        img = np.stack([img, img, img])
    if img.shape[1:] != (model.config.input_h, model.config.input_w):
        raise ContractViolation(
            f"{path}: image is {img.shape[1:]}, checkpoint expects "
            f"{(model.config.input_h, model.config.input_w)}")
    return img


def cmd_visualize(args) -> int:
    from . import tensor as T

    model = modelmod.load(args.checkpoint)
    if model.config.variant != "dgm":
        raise ConfigError("visualization requires a dgm checkpoint")
    levels = list(range(1, model.config.levels + 1)) if args.all_levels else [args.level]
    for lv in levels:
        if not 1 <= lv <= model.config.levels:
            raise ConfigError(f"level {lv} out of range 1..{model.config.levels}")
    spec = vizmod.RenderSpec(colormap=args.colormap, overlay_alpha=args.alpha, upscale=args.upscale)
    spec.validate()
    os.makedirs(args.out, exist_ok=True)
    for i, path in enumerate(args.images):
        img = _load_image_for_model(path, model)
        trace: list = []
        with T.no_grad():
            model.forward(img[None], training=False, trace=trace)
        for lv in levels:
            rec = trace[lv - 1]
            heat = vizmod.reconstruct(rec["moments"][0], rec["basis"][0], rec["features_in"][0])
            rgb = vizmod.render(heat, np.repeat(np.repeat(img, 1, axis=1), 1, axis=2), spec)
            vizmod.write_ppm(rgb, os.path.join(args.out, f"img{i}_level{lv}.ppm"))
        if args.dump_bases:
            for lv in levels:
                vizmod.dump_bases(model, lv, img, args.out,
                                  channels=range(min(model.config.channels, args.basis_channels)))
    print(f"wrote visualizations for {len(args.images)} image(s) at {len(levels)} level(s) to {args.out}")
    return EXIT_OK


def cmd_moments(args) -> int:
    img = vizmod.read_pnm(args.image)
    if img.ndim == 3:
        img = img[0]  # first channel
    table = momentsmod.raw_moments(img, args.max_order, coords=args.coords)
    print(f"raw moments ({args.coords} coords), order <= {args.max_order}:")
    for (p, q), v in table.items():
        print(f"  m[{p},{q}] = {v:.12g}")
    hu = None
    theta = None
    if args.hu or args.orientation:
        central = momentsmod.central_moments(table if table.max_order >= 3 else
                                             momentsmod.raw_moments(img, 3, coords=args.coords))
        if args.hu:
            hu = momentsmod.hu_invariants(momentsmod.normalized_central(central))
            for i in range(7):
                print(f"  phi{i + 1} = {hu[i]:.12g}")
        if args.orientation:
            theta = momentsmod.orientation(central)
            print(f"  orientation_deg = {math.degrees(theta):.6f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write("name,value\n")
            for (p, q), v in table.items():
                f.write(f"m{p}{q},{v!r}\n")
            if hu is not None:
                for i in range(7):
                    f.write(f"phi{i + 1},{hu[i]!r}\n")
            if theta is not None:
                f.write(f"orientation_rad,{theta!r}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentnet")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--seed", type=int, default=None)
        if needs_out:
            p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("train", help="train a model from a config")
    add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally under distortion")
    add_common(p, needs_out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--distort", choices=["R", "RST"], default=None)
    p.add_argument("--distort-seed", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("finetune", help="retrain the coordinate pipeline and classifier")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("visualize", help="write per-level heatmap overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--all-levels", action="store_true")
    p.add_argument("--colormap", choices=["grayscale", "diverging"], default="diverging")
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--upscale", type=int, default=1)
    p.add_argument("--dump-bases", action="store_true")
    p.add_argument("--basis-channels", type=int, default=8)
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("moments", help="classical moment table for one image")
    p.add_argument("image")
    p.add_argument("--max-order", type=int, default=3)
    p.add_argument("--coords", choices=["index", "normalized"], default="index")
    p.add_argument("--hu", action="store_true")
    p.add_argument("--orientation", action="store_true")
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_moments)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ContractViolation, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, DegenerateImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
