"""Count metrics: MAE / RMSE overall and per ground-truth count bucket."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

BUCKETS = ((0, 10), (11, 50), (51, 200), (201, None))
MODES = {"few": 3, "one": 1, "zero": 0}


def bucket_name(lo, hi):
    return f"{lo}+" if hi is None else f"{lo}-{hi}"


def bucket_of(count):
    for lo, hi in BUCKETS:
        if count >= lo and (hi is None or count <= hi):
            return bucket_name(lo, hi)
    raise ValueError(f"negative count {count}")


@dataclass
class EvalResult:
    mae: float
    rmse: float
    buckets: dict  # name -> {"n", "mae", "rmse"}
    records: list = field(default_factory=list)  # (id, gt, pred), sorted by id

    def summary(self):
        parts = [f"MAE {self.mae:.3f}", f"RMSE {self.rmse:.3f}", f"n {len(self.records)}"]
        for name, b in self.buckets.items():
            if b["n"]:
                parts.append(f"[{name}] n={b['n']} MAE={b['mae']:.3f} RMSE={b['rmse']:.3f}")
        return "  ".join(parts)

    def write_csv(self, path):
        try:
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["id", "gt", "pred", "abs_err", "bucket"])
                for sid, gt, pred in self.records:
                    w.writerow([sid, gt, f"{pred:.6f}", f"{abs(pred - gt):.6f}", bucket_of(gt)])
        except OSError as e:
            raise OSError(f"cannot write {path}: {e}") from e


def count_errors(ids, gts, preds):
    """EvalResult from parallel lists of ids, true counts and predicted counts."""
    if len(gts) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ids = [ids[i] for i in order]
    gts = np.asarray(gts, dtype=np.float64)[order]
    preds = np.asarray(preds, dtype=np.float64)[order]
    err = preds - gts
    buckets = {}
    for lo, hi in BUCKETS:
        sel = (gts >= lo) & ((gts <= hi) if hi is not None else True)
        n = int(np.sum(sel))
        e = err[sel]
        buckets[bucket_name(lo, hi)] = {
            "n": n,
            "mae": float(np.mean(np.abs(e))) if n else float("nan"),
            "rmse": float(math.sqrt(np.mean(e * e))) if n else float("nan"),
        }
    records = [(i, int(g), float(p)) for i, g, p in zip(ids, gts, preds)]
    return EvalResult(float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err))), buckets, records)


def evaluate(model, dataset, mode="few", batch_size=8, clamp=False):
    """Count every scene with 3 / 1 / 0 exemplars (``few`` / ``one`` / ``zero``).

    Counts are raw density sums; ``clamp`` drops negative densities first.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
    scenes = list(dataset)
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")
    k = MODES[mode]
    preds = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        images = np.stack([s.image for s in chunk]).astype(np.float32)
        boxes = [s.boxes[:k] for s in chunk] if k else None
        maps = model.predict_batch(images, boxes)
        if clamp:
            maps = np.maximum(maps, 0)
        preds += [float(np.sum(m, dtype=np.float64)) for m in maps]
    return count_errors([s.id for s in scenes], [s.count for s in scenes], preds)


def mean_count_baseline(train, dataset):
    """Predict the mean training count for every scene."""
    mean = float(np.mean([s.count for s in train]))
    scenes = list(dataset)
    return count_errors([s.id for s in scenes], [s.count for s in scenes], [mean] * len(scenes))
