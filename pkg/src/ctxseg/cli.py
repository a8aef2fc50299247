"""Command-line entry point.

Subcommands: ``gen`` (build a synthetic dataset), ``train`` (two-phase
training), ``eval`` (full-slide Dice report), ``attn`` (attention views),
``memsize`` (embedding-store accounting). Exit codes: 0 success, 2 config
error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import kernels
from .config import ConfigError
from .grid import memory_bytes
from .metrics import evaluate_predictions
from .ndiff import load_params, save_params
from .segnet import DeskNet
from .synth import SynthParams, _write_labels, generate_dataset, load_dataset, save_dataset
from .train import epoch_memory_fill, evaluate_full, fit
from .attviz import fit_gaussian, head_average, render_attention_view, render_patch_heatmap, write_fits_csv
from .grid import build_memory


class DataError(RuntimeError):
    """Missing or malformed data inputs (exit code 3)."""


def _threads_from(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("VV_THREADS")
    return int(env) if env else 0


def _setup_threads(n: int):
    if n > 0:
        kernels.set_num_threads(n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty (use --force)")
    params = SynthParams(
        n_regions=args.regions,
        marker_rate=args.marker_rate,
        stroma_halfwidth=args.stroma,
    )
    slides = generate_dataset(
        seed=args.seed, n_slides=args.slides, n_x=args.nx, n_y=args.ny, S=args.S, params=params
    )
    meta = save_dataset(out, slides, seed=args.seed, params=params)
    print(f"wrote {len(slides)} slides ({meta['n_x']}x{meta['n_y']} patches of {meta['S']}px) to {out}")
    return 0


def _load_data(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc))


def _split_slides(slides, meta, which):
    ids = set(meta["splits"][which])
    return [s for s in slides if s.slide_id in ids]


def cmd_train(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    maf = {}
    if args.k is not None:
        maf["k"] = args.k
    if getattr(args, "lambda_", None) is not None:
        maf["lambda"] = args.lambda_
    if args.pos is not None:
        maf["pos_kind"] = args.pos
    if maf:
        overrides["maf"] = maf
    tr = {}
    if args.epochs is not None:
        tr["max_epochs"] = args.epochs
        tr["patience"] = min(cfgmod.DEFAULTS["train"]["patience"], args.epochs)
    if args.lr0 is not None:
        tr["lr0"] = args.lr0
    if tr:
        overrides["train"] = tr
    if args.threads is not None:
        overrides["threads"] = args.threads
    cfg = cfgmod.resolve(args.config, overrides)
    _setup_threads(_threads_from(args) or cfg["threads"])

    slides, meta = _load_data(args.data)
    cfg = cfgmod.adopt_dataset(cfg, meta)
    net_cfg = cfgmod.net_config(cfg)  # validate before touching the out dir
    tr_cfg = cfgmod.train_config(cfg)
    cfgmod.check_resume(args.out, cfg)
    cfgmod.write_resolved(args.out, cfg)

    train_slides = _split_slides(slides, meta, "train")
    val_slides = _split_slides(slides, meta, "val")
    if not train_slides or not val_slides:
        raise DataError(f"{args.data}: empty train or val split")

    history_path = Path(args.out) / "history.jsonl"
    with open(history_path, "w") as hist_file:
        def log(rec):
            hist_file.write(json.dumps(rec) + "\n")
            hist_file.flush()
            print(
                f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.4f}  "
                f"val {rec['val_loss']:.4f}  lr {rec['lr']:.2e}"
            )

        model, history = fit(train_slides, val_slides, net_cfg, tr_cfg, log=log)
    save_params(Path(args.out) / "model.vvwt", model.named_parameters())
    best = min(history, key=lambda r: r["val_loss"])
    print(f"best val loss {best['val_loss']:.4f} at epoch {best['epoch']} ({len(history)} epochs run)")
    return 0


def _load_model(model_dir) -> DeskNet:
    model_dir = Path(model_dir)
    cfg_path = model_dir / "resolved_config.json"
    snap_path = model_dir / "model.vvwt"
    if not cfg_path.exists() or not snap_path.exists():
        raise DataError(f"{model_dir}: need resolved_config.json and model.vvwt")
    cfg = json.loads(cfg_path.read_text())
    model = DeskNet(cfgmod.net_config(cfg), seed=cfg["seed"])
    model.load_state(load_params(snap_path))
    return model


def cmd_eval(args) -> int:
    _setup_threads(_threads_from(args))
    slides, meta = _load_data(args.data)
    model = _load_model(args.model)
    which = args.split
    eval_slides = _split_slides(slides, meta, which)
    if not eval_slides:
        raise DataError(f"{args.data}: split {which!r} is empty")
    report, preds = evaluate_full(model, eval_slides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "dice_report.csv")
    for sid, labmap in preds.items():
        _write_labels(out / f"pred_{sid}.vvl", labmap)
    for c, v in sorted(report.per_class.items()):
        print(f"class {c}: DSC {v:.4f}")
    print(f"DSC_total {report.total:.4f}")
    return 0


def cmd_attn(args) -> int:
    _setup_threads(_threads_from(args))
    slides, meta = _load_data(args.data)
    model = _load_model(args.model)
    if not model.maf_enabled:
        raise ConfigError("attention views need a model trained with k > 0")
    wanted = [s for s in slides if s.slide_id == args.slide]
    if not wanted:
        raise DataError(f"slide {args.slide!r} not in dataset ({[s.slide_id for s in slides]})")
    slide = wanted[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bank = build_memory([slide.grid()], model.cfg.k, model.cfg.D)
    epoch_memory_fill(model, [slide], bank)
    _, preds = evaluate_full(model, [slide])

    fits = {}
    rows = []
    coords = (
        [(args.patch[0], args.patch[1])]
        if args.patch
        else [(i, j) for i in range(slide.n_x) for j in range(slide.n_y)]
    )
    for i, j in coords:
        _, _, scores = model.forward_maf(slide.patch_image(i, j), bank, slide.slide_id, i, j)
        amap = head_average(scores[0])
        if amap.grid.sum() <= 0:
            continue
        efit = fit_gaussian(amap)
        fits[(i, j)] = efit
        rows.append((slide.slide_id, i, j, efit))
        if args.patch:
            render_patch_heatmap(amap, out / f"heatmap_{slide.slide_id}_{i}_{j}.svg")
    write_fits_csv(out / f"fits_{slide.slide_id}.csv", rows)
    if not args.patch:
        render_attention_view(
            preds[slide.slide_id], fits, slide.S, out / f"view_{slide.slide_id}.svg"
        )
    print(f"wrote {len(rows)} fits for {slide.slide_id} to {out}")
    return 0


def cmd_memsize(args) -> int:
    n = memory_bytes(args.slides, args.nx, args.ny, args.k, args.D)
    print(f"{n} bytes = {n / 2**30:.2f} GiB")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxseg", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="worker threads (VV_THREADS fallback)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic context-dependent dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--slides", type=int, default=12)
    g.add_argument("--nx", type=int, default=16)
    g.add_argument("--ny", type=int, default=16)
    g.add_argument("--S", type=int, default=32)
    g.add_argument("--regions", type=int, default=12)
    g.add_argument("--marker-rate", type=float, default=0.2)
    g.add_argument("--stroma", type=int, default=3)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train with the two-phase memory protocol")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON run config (flags win)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--k", type=int, default=None, help="neighbourhood radius (0 = plain baseline)")
    t.add_argument("--lambda", dest="lambda_", type=float, default=None)
    t.add_argument("--pos", choices=("none", "sin1d", "rel2d"), default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr0", type=float, default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="full-slide evaluation to a Dice report")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="training output directory")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attn", help="attention ellipse views and fits")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--slide", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--patch", type=int, nargs=2, default=None, metavar=("I", "J"))
    a.set_defaults(fn=cmd_attn)

    m = sub.add_parser("memsize", help="embedding-store size accounting")
    m.add_argument("--slides", type=int, required=True)
    m.add_argument("--nx", type=int, required=True)
    m.add_argument("--ny", type=int, required=True)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--D", type=int, required=True)
    m.set_defaults(fn=cmd_memsize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
