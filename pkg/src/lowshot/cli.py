"""Command-line entry point: ``lowshot <gen|train|eval|predict|gradcheck|ablate> ...``."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import serialize
from .config import ModelConfig, TrainConfig, apply_overrides, parse_kv, split_sections
from .data import GeneratorConfig, load_dataset, read_ppm, resize_image, synth_generate, write_dataset
from .metrics import MODES, evaluate


class CliError(Exception):
    pass


def load_config(path):
    """``(ModelConfig, TrainConfig, GeneratorConfig)`` from a key=value file (or defaults)."""
    model, train, gen = ModelConfig(), TrainConfig(), GeneratorConfig()
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e}") from None
        sec = split_sections(parse_kv(text, path))
        model = apply_overrides(model, sec["model"])
        train = apply_overrides(train, sec["train"])
        gen = apply_overrides(gen, sec["data"])
    return model.validate(), train.validate(), gen


def parse_values(text):
    """``"1..6"`` -> [1..6]; ``"1,3,5"`` -> [1, 3, 5]."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def parse_boxes(text):
    """``"x1,y1,x2,y2;..."`` in normalised coordinates -> (k, 4) array."""
    if not text:
        return np.zeros((0, 4))
    try:
        boxes = np.array([[float(v) for v in b.split(",")] for b in text.split(";") if b.strip()])
    except ValueError:
        raise CliError(f"cannot parse boxes {text!r}; expected x1,y1,x2,y2;...") from None
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise CliError(f"each box needs four numbers, got {text!r}")
    return boxes


# -- subcommands ---------------------------------------------------------------
def cmd_gen(args):
    _, _, gen = load_config(args.config)
    out = args.out or "data"
    splits = synth_generate(gen, args.seed)
    counts = write_dataset(out, splits, {"seed": args.seed, "generator": asdict(gen)})
    print(f"wrote {sum(counts.values())} scenes to {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def _load_split(path, split, size):
    try:
        return load_dataset(path, split, image_size=size)
    except FileNotFoundError as e:
        raise CliError(str(e)) from None


def cmd_train(args):
    from .model import LowShotCounter
    from .train import resume, train_loop

    out = args.out or "runs/train"
    if args.checkpoint:
        model, opt, tcfg, meta = resume(args.checkpoint)
        start = meta
    else:
        mcfg, tcfg, _ = load_config(args.config)
        tcfg = replace(tcfg, seed=args.seed, shots={"few": 3, "one": 1, "zero": 0}[args.mode]).validate()
        model, opt, start = LowShotCounter(mcfg, tcfg.seed), None, None
    size = model.cfg.encoder.input_size
    train = _load_split(args.data, "train", size)
    val = _load_split(args.data, "val", size) if os.path.exists(os.path.join(args.data, "val.jsonl")) else []

    def report(epoch, b, rep):
        if args.verbose:
            print(f"epoch {epoch + 1} step {b + 1} loss {rep.total:.5f} L_OSE {rep.l_ose:.5f} "
                  f"L_AUX {rep.l_aux:.5f} grad_norm {rep.grad_norm:.4f}")

    history = train_loop(model, train, val, tcfg, out_dir=out, opt=opt, start=start, on_step=report)
    for r in history:
        if r["split"] == "val":
            print(f"epoch {r['epoch']} val MAE {r['MAE']:.3f} RMSE {r['RMSE']:.3f}")
    print(f"checkpoints in {out}")


def cmd_eval(args):
    from .train import load_model

    if not args.checkpoint:
        raise CliError("eval needs --checkpoint")
    model, _, _ = load_model(args.checkpoint)
    scenes = _load_split(args.data, args.split, model.cfg.encoder.input_size)
    if args.mode == "zero":
        # zero-shot must not see exemplars: drop them before the model runs
        scenes = [replace(s, boxes=np.zeros((0, 4))) for s in scenes]
    res = evaluate(model, scenes, args.mode, clamp=args.clamp)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"eval-{args.split}-{args.mode}.csv")
    res.write_csv(path)
    print(res.summary())
    print(f"per-image results in {path}")


def write_pgm(path, dmap):
    """Min-max scaled 8-bit PGM of a density map.

    Returns ``(offset, scale)`` such that density = offset + grey * scale.
    """
    lo, hi = float(np.min(dmap)), float(np.max(dmap))
    scale = (hi - lo) / 255.0 if hi > lo else 1.0
    img = np.clip(np.round((dmap - lo) / scale), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
    return lo, scale


def cmd_predict(args):
    from .train import load_model

    if not args.checkpoint or not args.image:
        raise CliError("predict needs --checkpoint and --image")
    model, _, _ = load_model(args.checkpoint)
    try:
        img = read_ppm(args.image)
    except OSError as e:
        raise CliError(f"cannot read image {args.image}: {e}") from None
    img = resize_image(img, model.cfg.encoder.input_size)
    boxes = parse_boxes(args.boxes)
    if args.mode == "zero":
        boxes = boxes[:0]
    dmap, count = model.predict(img, boxes)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    values = dmap.numpy()
    serialize.save_tensor(os.path.join(out, f"{stem}.density.ltsr"), values)
    if args.pgm:
        offset, scale = write_pgm(os.path.join(out, f"{stem}.density.pgm"), values)
        with open(os.path.join(out, f"{stem}.density.txt"), "w") as f:
            f.write(f"# density = offset + grey * scale\noffset = {offset!r}\nscale = {scale!r}\ncount = {count!r}\n")
    print(f"{count:.4f}")


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    entries = run_suite(args.seed, per_tensor=args.per_tensor)
    for e in entries:
        print(e.line())
    failed = [e.name for e in entries if not e.passed()]
    if failed:
        raise CliError(f"gradient check failed: {', '.join(failed)}")
    print(f"all {len(entries)} gradient checks passed")


def cmd_ablate(args):
    from . import experiments as X

    mcfg, tcfg, gen = load_config(args.config)
    if not args.config:
        tcfg, gen = (X.SWEEP_TRAIN, X.SWEEP_DATA) if args.sweep else (X.ABLATION_TRAIN, X.ABLATION_DATA)
    if args.epochs:
        tcfg = replace(tcfg, epochs=args.epochs)
    tcfg = replace(tcfg, shots=3)
    if args.out:
        os.environ["LOWSHOT_CACHE"] = args.out
    if args.sweep:
        name, _, values = args.sweep.partition("=")
        field = {"L": "iterations", "s": "prototype_size"}.get(name)
        if field is None or not values:
            raise CliError(f"--sweep expects L=<values> or s=<values>, got {args.sweep!r}")
        rows = X.sweep(field, parse_values(values), args.seed, model_cfg=mcfg, train_cfg=tcfg,
                       gen=replace(gen, n_test=max(gen.n_test, 1)))
        print(X.format_table(rows, name, field))
        return
    variants = [v.strip() for v in args.variants.split(",")]
    alias = {"shape-off": "no_shape", "sum-variant": "sum"}
    variants = [alias.get(v, v) for v in variants]
    seeds = parse_values(args.seeds)
    res = X.variant_ablation(variants, seeds, model_cfg=mcfg, train_cfg=tcfg, gen=gen)
    print(f"{'variant':>10} | " + " ".join(f"seed{s:>2}" for s in seeds) + " |   mean")
    for v, runs in res.items():
        maes = [r["val_mae"] for r in runs]
        print(f"{v:>10} | " + " ".join(f"{m:>6.2f}" for m in maes) + f" | {np.mean(maes):>6.2f}")


def build_parser():
    p = argparse.ArgumentParser(prog="lowshot", description="Low-shot object counting on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        return sp

    common(sub.add_parser("gen", help="synthesize a dataset"))
    t = common(sub.add_parser("train", help="train a model"), data=True)
    t.add_argument("--mode", choices=sorted(MODES), default="few")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("-v", "--verbose", action="store_true")
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"), data=True)
    e.add_argument("--checkpoint")
    e.add_argument("--mode", choices=sorted(MODES), default="few")
    e.add_argument("--split", default="val")
    e.add_argument("--clamp", action="store_true", help="drop negative densities before counting")
    pr = common(sub.add_parser("predict", help="count objects in one PPM image"))
    pr.add_argument("--checkpoint")
    pr.add_argument("--image")
    pr.add_argument("--boxes", default="", help="normalised x1,y1,x2,y2;... exemplar boxes")
    pr.add_argument("--mode", choices=sorted(MODES), default="few")
    pr.add_argument("--pgm", action="store_true", help="also write an 8-bit PGM preview")
    g = common(sub.add_parser("gradcheck", help="run the finite-difference suite"))
    g.add_argument("--per-tensor", type=int, default=4, help="coordinates sampled per model parameter")
    a = common(sub.add_parser("ablate", help="variant ablations and L / s sweeps"))
    a.add_argument("--sweep", help="L=1..6 or s=1,3,5")
    a.add_argument("--variants", default="full,no_shape,no_ope")
    a.add_argument("--seeds", default="0..4")
    a.add_argument("--epochs", type=int)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (CliError, ValueError, KeyError, OSError) as e:
        print(f"lowshot {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
