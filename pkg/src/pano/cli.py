"""Command-line entry point: ``pano <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import json
import logging
import os
import sys
import time
from typing import Optional

import numpy as np

from . import gradcheck, ppam, synthdata
from . import imageio as io_
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EmptyTargetError,
    EvaluationError,
    GeometryError,
    ResourceError,
)
from .metrics import format_table, miou
from .model import SegModel, load_checkpoint, pretrain_source, save_checkpoint
from .projection import ffp_split, get_layout, project_tp
from .train import AdaptConfig, adapt, config_from_mapping, evaluate, format_value, load_config, write_metrics_csv

logger = logging.getLogger("pano")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMBOS = {
    "sup": ("sup",),
    "sup+ppa": ("sup", "ppa"),
    "sup+ppa+sft": ("sup", "ppa", "sft"),
    "sup+cda": ("sup", "cda"),
    "sup+cda+bns": ("sup", "cda", "bns"),
    "full": ("sup", "ppa", "sft", "cda", "bns"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- data directories ---------------------------------------------------------------
def _resolve_images(path: str) -> str:
    sub = os.path.join(path, "images")
    return sub if os.path.isdir(sub) else path


def _resolve_labels(path: str) -> str:
    sub = os.path.join(path, "labels")
    return sub if os.path.isdir(sub) else path


def load_images(path: str) -> tuple:
    directory = _resolve_images(path)
    names = io_.list_images(directory)
    if not names:
        raise DataError(f"no PNG images in {directory}")
    imgs = [io_.read_rgb(os.path.join(directory, n)) for n in names]
    if len({im.shape for im in imgs}) != 1:
        raise DataError(f"images in {directory} differ in size")
    return np.stack(imgs), names


def load_labels(path: str, names) -> np.ndarray:
    directory = _resolve_labels(path)
    missing = [n for n in names if not os.path.isfile(os.path.join(directory, n))]
    if missing:
        raise DataError(f"{directory}: no label map for {missing[0]}")
    return np.stack([io_.read_labels(os.path.join(directory, n)) for n in names])


def load_labelled(path: str, labels_path: Optional[str] = None) -> tuple:
    images, names = load_images(path)
    labels = load_labels(labels_path or path, names)
    if labels.shape[1:] != images.shape[2:]:
        raise DataError("label maps and images differ in size")
    return images, labels


def _parse_list(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad list value: {text!r}") from None


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _banner(title: str, values: dict) -> None:
    print(f"# {title}")
    for k, v in values.items():
        print(f"#   {k} = {v}")
    sys.stdout.flush()


# -- verbs ----------------------------------------------------------------------------
def cmd_synth(args) -> int:
    _banner("synth", vars_of(args))
    img_dir, lab_dir = os.path.join(args.out, "images"), os.path.join(args.out, "labels")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    style = synthdata.TARGET_STYLE if args.style == "target" else synthdata.SOURCE_STYLE
    if args.kind == "erp":
        images, labels = synthdata.generate_erp_set(args.seed, args.n, args.height, args.width, style, args.offset)
    else:
        images, labels, _ = synthdata.generate_pinhole_crops(
            synthdata.SceneSpec(seed=args.seed), args.n, args.size, style, args.max_lat
        )
    files = []
    for i in range(args.n):
        name = f"{i:05d}.png"
        io_.write_rgb(os.path.join(img_dir, name), images[i])
        io_.write_labels(os.path.join(lab_dir, name), labels[i])
        files.append({"image": f"images/{name}", "labels": f"labels/{name}"})
    manifest = {
        "kind": args.kind,
        "seed": args.seed,
        "count": args.n,
        "classes": list(synthdata.CLASS_NAMES),
        "style": {"hue_shift": style.hue_shift, "noise": style.noise, "contrast": style.contrast},
        "dims": list(images.shape[2:]),
        "offset": args.offset,
        "max_lat_deg": args.max_lat if args.kind == "crops" else None,
        "files": files,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {args.n} {args.kind} pairs to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _banner("pretrain", vars_of(args))
    if args.data:
        images, labels = load_labelled(args.data)
    else:
        images, labels, _ = synthdata.generate_pinhole_crops(
            synthdata.SceneSpec(seed=args.seed), args.n, args.size, max_lat_deg=args.max_lat
        )
    model = SegModel(args.classes, args.feat_channels, seed=args.seed)
    start = time.perf_counter()
    model, stats, history = pretrain_source(
        model, images, labels, args.epochs, args.lr, args.batch_size, seed=args.seed
    )
    save_checkpoint(args.out, model, stats)
    cm = evaluate(model, images, labels)
    print(f"final ce={history[-1]:.4f} train mIoU={100 * miou(cm)[1]:.2f} ({time.perf_counter() - start:.1f}s)")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_project(args) -> int:
    _banner("project", vars_of(args))
    erp = io_.read_rgb(args.image)
    os.makedirs(args.out, exist_ok=True)
    layout = get_layout(args.layout, (args.patch_size, args.patch_size))
    patches = project_tp(erp, layout).data
    for i, patch in enumerate(patches):
        io_.write_rgb(os.path.join(args.out, f"tp_{i:02d}.png"), patch)
    slabs = ffp_split(erp, args.fov)
    for k, slab in enumerate(slabs):
        io_.write_rgb(os.path.join(args.out, f"ffp_{k}.png"), slab)
    print(f"wrote {len(patches)} tangent patches and {len(slabs)} slabs to {args.out}")
    return EXIT_OK


def _read_config(args) -> AdaptConfig:
    cfg = load_config(args.config) if args.config else AdaptConfig()
    return config_from_mapping(_parse_overrides(args.set), cfg)


def cmd_adapt(args) -> int:
    cfg = _read_config(args)
    _banner("adapt", {**cfg.as_dict(), "source": args.source, "data": args.data, "out": args.out})
    source, stats = load_checkpoint(args.source)
    if stats is None:
        stats = source.bn_stats()
    images, _ = load_images(args.data)
    eval_images = eval_labels = None
    if args.eval_data:
        eval_images, eval_labels = load_labelled(args.eval_data, args.eval_labels)
        base = miou(evaluate(source, eval_images, eval_labels))[1]
        print(f"source-only mIoU: {100 * base:.2f}")
    os.makedirs(args.out, exist_ok=True)
    attention_dir = os.path.join(args.out, "attention") if args.dump_attention else None
    result = adapt(cfg, source, stats, images, eval_images, eval_labels, attention_dir)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), result.rows)
    save_checkpoint(os.path.join(args.out, "target.ckpt"), result.target, result.target.bn_stats())
    save_checkpoint(os.path.join(args.out, "source_finetuned.ckpt"), result.source, stats)
    ppam.save_bank(os.path.join(args.out, "protos.bin"), result.tau_g)
    for row in result.rows:
        print(", ".join(f"{k}={format_value(row[k])}" for k in row))
    return EXIT_OK


def cmd_eval(args) -> int:
    _banner("eval", vars_of(args))
    model, _ = load_checkpoint(args.ckpt)
    images, labels = load_labelled(args.data, args.labels)
    cm = evaluate(model, images, labels)
    print(format_table(cm, list(synthdata.CLASS_NAMES) if model.num_classes == 5 else None))
    if args.csv:
        iou, mean = miou(cm)
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for k, v in enumerate(iou):
                w.writerow([k, format_value(float(v))])
            w.writerow(["mean", format_value(mean)])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _banner("gradcheck", vars_of(args))
    start = time.perf_counter()
    results = gradcheck.run_suite(args.seed, args.step)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<28} rel_err={r.error:.3e} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


ABLATE_COLUMNS = ("combo", "ffp_fov", "lambda", "gamma", "epochs", "sup", "ppa", "sft", "bns", "cda", "total", "miou", "seconds")


def cmd_ablate(args) -> int:
    base = _read_config(args)
    fovs = _parse_list(args.fov, int) if args.fov else [base.ffp_fov]
    lams = _parse_list(args.lam) if args.lam else [base.lam]
    gammas = _parse_list(args.gamma) if args.gamma else [base.gamma]
    combos = args.combos.split(",") if args.combos else ["full"]
    unknown = [c for c in combos if c not in COMBOS]
    if unknown:
        raise UsageError(f"unknown loss combination {unknown[0]!r}; choose from {', '.join(COMBOS)}")
    _banner("ablate", {**base.as_dict(), "fov": fovs, "lambda_grid": lams, "gamma_grid": gammas, "combos": combos})
    source, stats = load_checkpoint(args.source)
    stats = stats or source.bn_stats()
    images, _ = load_images(args.data)
    eval_images, eval_labels = load_labelled(args.eval_data, args.eval_labels)
    print(f"source-only mIoU: {100 * miou(evaluate(source, eval_images, eval_labels))[1]:.2f}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATE_COLUMNS)
        for combo, fov, lam, gamma in itertools.product(combos, fovs, lams, gammas):
            on = COMBOS[combo]
            values = {f"use_{n}": n in on for n in ("sup", "ppa", "sft", "cda", "bns")}
            cfg = config_from_mapping({**values, "ffp_fov": fov, "lam": lam, "gamma": gamma}, base)
            start = time.perf_counter()
            result = adapt(cfg, source, stats, images, eval_images, eval_labels)
            last = result.rows[-1]
            row = {
                "combo": combo,
                "ffp_fov": fov,
                "lambda": lam,
                "gamma": gamma,
                "epochs": cfg.epochs,
                **{k: last[k] for k in ("sup", "ppa", "sft", "bns", "cda", "total", "miou")},
                "seconds": round(time.perf_counter() - start, 2),
            }
            writer.writerow([row[c] if isinstance(row[c], str) else format_value(row[c]) for c in ABLATE_COLUMNS])
            fh.flush()
            print(f"{combo} fov={fov} lambda={lam} gamma={gamma}: mIoU={100 * last['miou']:.2f}")
    print(f"ablation table written to {path}")
    return EXIT_OK


def cmd_protos(args) -> int:
    if args.action == "dump":
        text = ppam.bank_to_json(ppam.load_bank(args.input))
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text)
        else:
            print(text)
    else:
        with open(args.input) as fh:
            bank = ppam.bank_from_json(fh.read())
        ppam.save_bank(args.output, bank)
    return EXIT_OK


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}


# -- parser ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pano", description="Source-free pinhole-to-panorama segmentation adaptation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser, metavar="verb")
    sub.required = True

    s = sub.add_parser("synth", help="generate labelled synthetic panoramas or pinhole crops")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--kind", choices=("erp", "crops"), default="erp")
    s.add_argument("--style", choices=("target", "source"), default=None,
                   help="colour style (default: target for erp, source for crops)")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--size", type=int, default=64, help="crop side length")
    s.add_argument("--max-lat", type=float, default=synthdata.CROP_MAX_LAT_DEG, help="crop centre latitude bound (deg)")
    s.add_argument("--offset", type=int, default=0, help="scene index offset for erp sets")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="train the source model on labelled pinhole crops")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--data", help="directory with images/ and labels/ (default: generate crops)")
    s.add_argument("--n", type=int, default=200, help="number of generated crops when --data is absent")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--max-lat", type=float, default=synthdata.CROP_MAX_LAT_DEG, help="crop centre latitude bound (deg)")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--feat-channels", type=int, default=32)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("project", help="write tangent patches and fixed-FoV slabs of one panorama")
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--layout", default="default")
    s.add_argument("--fov", type=int, default=90)
    s.add_argument("--patch-size", type=int, default=64)
    s.set_defaults(func=cmd_project)

    def adapt_flags(s):
        s.add_argument("--config", help="flat key = value file with AdaptConfig fields")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        s.add_argument("--source", required=True, help="source checkpoint")
        s.add_argument("--data", required=True, help="directory of target panoramas")
        s.add_argument("--out", required=True)
        s.add_argument("--eval-labels", help="label directory for --eval-data (default: its labels/)")

    s = sub.add_parser("adapt", help="adapt a source model to unlabelled panoramas")
    adapt_flags(s)
    s.add_argument("--eval-data", help="held-out labelled panoramas scored after every epoch")
    s.add_argument("--dump-attention", action="store_true", help="write attention maps as PNGs each epoch")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="score a checkpoint on labelled images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--labels", help="label directory (default: <data>/labels or <data>)")
    s.add_argument("--csv", help="also write per-class IoU as CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--step", type=float, default=gradcheck.STEP)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="rerun adaptation over a grid of settings")
    adapt_flags(s)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--fov", help="comma list of slab FoVs, e.g. 60,72,90,120,180,360")
    s.add_argument("--lambda", dest="lam", help="comma list of prototype-loss weights")
    s.add_argument("--gamma", help="comma list of attention-loss weights")
    s.add_argument("--combos", help=f"comma list from {','.join(COMBOS)} (default: full)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("protos", help="convert prototype banks between binary and JSON")
    s.add_argument("action", choices=("dump", "load"))
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", help="dump: JSON path (default stdout); load: binary path")
    s.set_defaults(func=cmd_protos)
    return p


def _thread_limit():
    raw = os.environ.get("PANO_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PANO_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("PANO_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.verb == "protos" and args.action == "load" and not args.output:
            raise UsageError("protos load requires --out")
        if args.verb == "synth" and args.style is None:
            args.style = "target" if args.kind == "erp" else "source"
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (EvaluationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, DimensionError, EmptyTargetError, GeometryError, ResourceError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
