"""Training step, training loop and checkpointing."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import serialize
from . import tensor as T
from .config import TrainConfig, model_config_from_dict, train_config_from_dict
from .density import gt_density
from .losses import LossReport, total_loss
from .metrics import evaluate
from .optim import AdamW, clip_grad_norm

LOG_FIELDS = ("epoch", "split", "MAE", "RMSE", "L_OSE", "L_AUX", "wall_ms")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, 3)
    boxes: list | None  # per-image (k, 4) exemplar arrays, None for zero-shot
    gt: np.ndarray  # (B, H, W)
    objects: int  # M


def make_batch(scenes, shots, zero_shot_kernel=1.7, sigma_ratio=1.0):
    """Stack scenes into a Batch using the first ``shots`` exemplars per image.

    Ground-truth kernels follow the annotated exemplars; zero-shot batches use
    ``zero_shot_kernel`` so no box annotation is read.
    """
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    _, h, w, _ = images.shape
    gts = []
    for s in scenes:
        if shots:
            gts.append(gt_density(s.points, s.boxes, h, w, sigma_ratio=sigma_ratio))
        else:
            gts.append(gt_density(s.points, None, h, w, default_kernel=zero_shot_kernel, sigma_ratio=sigma_ratio))
    boxes = [np.asarray(s.boxes[:shots]) for s in scenes] if shots else None
    return Batch(images, boxes, np.stack(gts), int(sum(s.count for s in scenes)))


def trainable(model, cfg):
    named = model.named_parameters()
    if cfg.freeze_backbone:
        named = [(n, p) for n, p in named if not n.startswith("encoder.backbone.")]
    return list(named)


def make_optimizer(model, cfg):
    return AdamW(trainable(model, cfg), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


def train_step(model, batch: Batch, cfg: TrainConfig, opt: AdamW) -> LossReport:
    """One forward/backward/clip/AdamW update. Raises NonFiniteLoss on NaN or Inf."""
    if not model.training:
        raise RuntimeError("train_step needs the model in train mode")
    model.zero_grad()
    final, aux_maps, _ = model.forward(batch.images, batch.boxes, aux=cfg.aux_weight > 0)
    loss, l_ose, l_aux = total_loss(final, aux_maps, batch.gt, batch.objects, cfg.aux_weight)
    value = float(loss.data)
    if not math.isfinite(value):
        tape = T.Tape(loss)
        raise NonFiniteLoss(f"loss is {value}; first non-finite op: {tape.first_nonfinite()}")
    loss.backward()
    params = [p for _, p in opt.params]
    norm = clip_grad_norm(params, cfg.clip_norm)
    if not math.isfinite(norm):
        raise NonFiniteLoss(f"gradient norm is {norm}")
    opt.step()
    return LossReport(float(l_ose.data), float(l_aux.data), value, batch.objects, norm)


# -- checkpoints ---------------------------------------------------------------
def save_training_state(path, model, opt, train_cfg, extra=None):
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    otensors, ometa = opt.state()
    tensors.update(otensors)
    meta = {
        "model_config": asdict(model.cfg),
        "train_config": asdict(train_cfg),
        "optimizer": ometa,
        "dropout_rng": model.dropout_rng.bit_generator.state,
        **(extra or {}),
    }
    serialize.save_checkpoint(path, tensors, meta)


def load_model(path, seed=0):
    """Rebuild a model from any checkpoint written by this module."""
    from .model import LowShotCounter

    tensors, meta = serialize.load_checkpoint(path)
    model = LowShotCounter(model_config_from_dict(meta["model_config"]), seed)
    model.load_state_dict({k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")})
    if "dropout_rng" in meta:
        model.dropout_rng.bit_generator.state = meta["dropout_rng"]
    return model, tensors, meta


def resume(path):
    """Return ``(model, optimizer, train_cfg, meta)`` restored from a checkpoint."""
    model, tensors, meta = load_model(path)
    cfg = train_config_from_dict(meta["train_config"])
    opt = make_optimizer(model, cfg)
    opt.load_state(tensors, meta["optimizer"])
    return model, opt, cfg, meta


# -- loop ----------------------------------------------------------------------
def epoch_order(n, seed, epoch, hflip):
    """Shuffle order and flip flags for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch, 17])
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if hflip else np.zeros(n, bool)
    return order, flips


def _append_log(path, row):
    new = not os.path.exists(path)
    try:
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
            if new:
                w.writeheader()
            w.writerow(row)
    except OSError as e:
        raise OSError(f"cannot append to metrics log {path}: {e}") from e


def _val_mode(shots):
    return {3: "few", 1: "one", 0: "zero"}[shots]


def train_loop(model, train_set, val_set, cfg: TrainConfig, out_dir=None, opt=None, start=None,
               max_steps=None, on_step=None):
    """Train for ``cfg.epochs`` epochs with per-epoch validation.

    Writes ``metrics.csv``, ``last.ckpt`` and ``best.ckpt`` (lowest validation
    MAE so far) to ``out_dir`` when given. ``start`` is the meta dict of a
    checkpoint to resume from. Returns the list of per-epoch history rows.
    """
    cfg.validate()
    opt = opt or make_optimizer(model, cfg)
    state = {"epoch": 0, "batch": 0, "best_mae": float("inf"), "history": []}
    if start:
        state.update({k: start[k] for k in state if k in start})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    log = os.path.join(out_dir, "metrics.csv") if out_dir else None
    model.train()
    steps = 0
    n = len(train_set)
    nb = max(1, n // cfg.batch_size)  # drop the ragged tail so every step sees a full batch
    while state["epoch"] < cfg.epochs:
        epoch = state["epoch"]
        t0 = time.perf_counter()
        order, flips = epoch_order(n, cfg.seed, epoch, cfg.hflip)
        sums = np.zeros(2)
        seen = 0
        for b in range(state["batch"], nb):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            scenes = [train_set[i].hflip() if flips[i] else train_set[i] for i in idx]
            rep = train_step(model, make_batch(scenes, cfg.shots, cfg.zero_shot_kernel, cfg.gt_sigma_ratio), cfg, opt)
            sums += (rep.l_ose, rep.l_aux)
            seen += 1
            state["batch"] = b + 1
            steps += 1
            if on_step:
                on_step(epoch, b, rep)
            if max_steps is not None and steps >= max_steps:
                return state["history"]
        state["epoch"], state["batch"] = epoch + 1, 0
        row = {"epoch": epoch + 1, "split": "train", "MAE": "", "RMSE": "",
               "L_OSE": float(sums[0] / max(seen, 1)), "L_AUX": float(sums[1] / max(seen, 1)),
               "wall_ms": round((time.perf_counter() - t0) * 1000)}
        rows = [row]
        improved = False
        if val_set and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            t1 = time.perf_counter()
            res = evaluate(model, val_set, _val_mode(cfg.shots))
            model.train()
            rows.append({"epoch": epoch + 1, "split": "val", "MAE": res.mae, "RMSE": res.rmse,
                         "L_OSE": "", "L_AUX": "", "wall_ms": round((time.perf_counter() - t1) * 1000)})
            if res.mae < state["best_mae"]:
                state["best_mae"], improved = res.mae, True
        state["history"] += rows
        if log:
            for r in rows:
                _append_log(log, r)
        if out_dir:
            save_training_state(os.path.join(out_dir, "last.ckpt"), model, opt, cfg, state)
            if improved:
                save_training_state(os.path.join(out_dir, "best.ckpt"), model, opt, cfg, state)
    return state["history"]
