"""Learning demonstration, variant ablations and hyper-parameter sweeps.

Every run is a pure function of (generator config, model config, train
config, seed, package source). Results are cached as JSON under a key that
hashes all of these, so a cached number is only reused for identical code and
settings.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, replace
from pathlib import Path

from .config import ModelConfig, TrainConfig
from .data import GeneratorConfig, synth_generate
from .metrics import MODES, evaluate, mean_count_baseline

SHOTS = {"few": 3, "one": 1, "zero": 0}
DEMO_DATA = GeneratorConfig(n_train=800, n_val=100, n_test=100)
# the ablation needs 15 trainings; they run on a smaller schedule than the demo
ABLATION_DATA = GeneratorConfig(n_train=400, n_val=100, n_test=0)
ABLATION_TRAIN = TrainConfig(epochs=20)
# the L / s sweeps only check the report and shape contracts, so they train briefly
SWEEP_DATA = GeneratorConfig(n_train=100, n_val=50, n_test=50)
SWEEP_TRAIN = TrainConfig(epochs=2)

_SOURCES = ("tensor.py", "kernels.py", "_kernels_py.py", "_ckernels.pyx", "nn.py", "encoder.py", "ope.py",
            "decode.py", "model.py", "density.py", "losses.py", "optim.py", "train.py", "data.py",
            "metrics.py", "config.py", "experiments.py")


def source_digest():
    h = hashlib.sha1()
    root = Path(__file__).parent
    for name in _SOURCES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:12]


def run_key(*parts):
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts], sort_keys=True)
    return hashlib.sha1((blob + source_digest()).encode()).hexdigest()[:16]


def cache_dir():
    return Path(os.environ.get("LOWSHOT_CACHE", Path.cwd() / "runs" / "cache"))


def cached(name, key, fn, refresh=False):
    """Return ``fn()``'s JSON result, reusing ``<cache>/<name>-<key>.json`` when present."""
    path = cache_dir() / f"{name}-{key}.json"
    if path.exists() and not refresh:
        with open(path) as f:
            return json.load(f)
    result = fn()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
    os.replace(tmp, path)
    return result


_datasets = {}


def dataset(gen: GeneratorConfig, seed=0):
    key = (gen, seed)
    if key not in _datasets:
        _datasets[key] = synth_generate(gen, seed)
    return _datasets[key]


def train_and_eval(model_cfg: ModelConfig, train_cfg: TrainConfig, gen: GeneratorConfig, data_seed=0,
                   out_dir=None, eval_test=False):
    """Train one model and report final-epoch validation (and optionally test) metrics."""
    from .model import LowShotCounter
    from .train import train_loop

    data = dataset(gen, data_seed)
    mode = {3: "few", 1: "one", 0: "zero"}[train_cfg.shots]
    model = LowShotCounter(model_cfg, train_cfg.seed)
    t0 = time.perf_counter()
    history = train_loop(model, data["train"], data["val"], train_cfg, out_dir=out_dir)
    elapsed = time.perf_counter() - t0
    val = [r for r in history if r["split"] == "val"]
    final = evaluate(model, data["val"], mode)
    clamped = evaluate(model, data["val"], mode, clamp=True)
    base = mean_count_baseline(data["train"], data["val"])
    out = {
        "mode": mode,
        "variant": model_cfg.variant,
        "iterations": model_cfg.iterations,
        "prototype_size": model_cfg.prototype_size,
        "seed": train_cfg.seed,
        "epochs": train_cfg.epochs,
        "n_train": len(data["train"]),
        "n_val": len(data["val"]),
        "val_mae": final.mae,
        "val_rmse": final.rmse,
        "val_mae_clamped": clamped.mae,
        "best_val_mae": min(r["MAE"] for r in val),
        "val_curve": [r["MAE"] for r in val],
        "baseline_mae": base.mae,
        "baseline_rmse": base.rmse,
        "train_seconds": elapsed,
        "source": source_digest(),
    }
    if eval_test and data["test"]:
        t = evaluate(model, data["test"], mode)
        out.update(test_mae=t.mae, test_rmse=t.rmse)
    return out


def learning_demo(mode="few", seed=0, refresh=False, model_cfg=None, train_cfg=None, gen=None):
    """Desk-scale training in one mode; validation MAE vs the mean-count baseline."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}")
    model_cfg = model_cfg or ModelConfig()
    train_cfg = replace(train_cfg or TrainConfig(), shots=SHOTS[mode], seed=seed)
    gen = gen or DEMO_DATA
    key = run_key(model_cfg, train_cfg, gen)
    name = f"demo-{mode}"
    out = cache_dir() / f"{name}-{key}"  # metrics.csv and checkpoints for inspection
    return cached(name, key, lambda: train_and_eval(model_cfg, train_cfg, gen, out_dir=out), refresh)


def ablation_run(variant, seed, refresh=False, model_cfg=None, train_cfg=None, gen=None):
    model_cfg = replace(model_cfg or ModelConfig(), variant=variant)
    train_cfg = replace(train_cfg or ABLATION_TRAIN, seed=seed)
    gen = gen or ABLATION_DATA
    key = run_key(model_cfg, train_cfg, gen)
    return cached(f"ablate-{variant}-s{seed}", key, lambda: train_and_eval(model_cfg, train_cfg, gen), refresh)


def variant_ablation(variants=("full", "no_shape", "no_ope"), seeds=range(5), **kw):
    """``{variant: [result per seed]}``."""
    return {v: [ablation_run(v, s, **kw) for s in seeds] for v in variants}


def sweep(field, values, seed=0, refresh=False, model_cfg=None, train_cfg=None, gen=None):
    """Train one model per value of a ModelConfig field (``iterations`` or ``prototype_size``)."""
    rows = []
    base = model_cfg or ModelConfig()
    train_cfg = replace(train_cfg or SWEEP_TRAIN, seed=seed)
    gen = gen or SWEEP_DATA
    for v in values:
        cfg = replace(base, **{field: v}).validate()
        key = run_key(cfg, train_cfg, gen)
        rows.append(cached(f"sweep-{field}-{v}", key,
                           lambda cfg=cfg: train_and_eval(cfg, train_cfg, gen, eval_test=True), refresh))
    return rows


def format_table(rows, label="L", field="iterations"):
    """Rows as a fixed-width table: the swept value then validation and test MAE / RMSE."""
    head = f"{label:>4} | {'val MAE':>8} {'val RMSE':>9} | {'test MAE':>8} {'test RMSE':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r[field]:>4} | {r['val_mae']:>8.2f} {r['val_rmse']:>9.2f} | "
                     f"{r.get('test_mae', float('nan')):>8.2f} {r.get('test_rmse', float('nan')):>9.2f}")
    return "\n".join(lines)


def main(argv=None):
    """``python -m lowshot.experiments [demo] [ablation] [sweep]``: fill the result cache."""
    import sys

    which = (argv if argv is not None else sys.argv[1:]) or ["demo", "ablation", "sweep"]
    if "demo" in which:
        for mode in ("few", "one", "zero"):
            r = learning_demo(mode)
            print(f"demo {mode}: val MAE {r['val_mae']:.3f} baseline {r['baseline_mae']:.3f} "
                  f"({r['train_seconds'] / 60:.1f} min)", flush=True)
    if "ablation" in which:
        for v, runs in variant_ablation().items():
            print(f"ablation {v}: " + " ".join(f"{r['val_mae']:.3f}" for r in runs), flush=True)
    if "sweep" in which:
        print(format_table(sweep("iterations", range(1, 7))), flush=True)


if __name__ == "__main__":
    main()
