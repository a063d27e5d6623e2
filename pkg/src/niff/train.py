"""Training loop: SGD with momentum, cosine schedule, label-smoothed cross-entropy.

Randomness comes from one seed split into independent streams by purpose:
``[seed, 0]`` initializes the model, ``[seed, 1, epoch]`` shuffles and
``[seed, 2, epoch]`` augments.  Epoch streams are re-derived rather than
carried, so a resumed run needs no generator state beyond the seed and epoch.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import load_model_tensors, model_tensors, read_checkpoint, save_checkpoint
from .data import Dataset, channel_stats, normalize, augment
from .model import Model, ModelSpec

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "epoch_seconds"]
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2


class NumericalFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.002
    label_smoothing: float = 0.1
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    pad: int = 0
    flip_prob: float = 0.0
    log_timing: bool = True

    def validate(self):
        for name in ("lr", "momentum", "weight_decay", "label_smoothing", "pad", "flip_prob"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("train.batch_size and train.epochs must be positive")
        return self


def cosine_lr(base, epoch, epochs):
    return 0.5 * base * (1 + math.cos(math.pi * epoch / epochs))


def smoothed_cross_entropy(logits, labels, smoothing=0.1):
    """Mean loss and its gradient w.r.t. ``logits``."""
    b, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((b, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1 - smoothing
    loss = -(target * logp).sum() / b
    grad = (np.exp(logp) - target) / b
    return float(loss), grad.astype(logits.dtype)


class SGD:
    """PyTorch-style SGD: ``v = mu*v + (g + wd*p)``, ``p -= lr*v``."""

    def __init__(self, model: Model, momentum=0.9, weight_decay=0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = {}

    def step(self, lr):
        for (name, p), (_, g) in zip(self.model.named_parameters(), self.model.named_grads()):
            d = g + self.weight_decay * p if self.weight_decay else g.copy()
            v = self.state.get(name)
            if v is None:
                v = self.state[name] = d
            else:
                v *= self.momentum
                v += d
            p -= (lr * v).astype(p.dtype, copy=False)


def evaluate(model: Model, x, labels, batch_size=256) -> float:
    """Top-1 accuracy.  The first batch also records each layer's imaginary residue."""
    model.set_bank_caching(True)
    correct = 0
    for i in range(0, len(labels), batch_size):
        model.set_residue_tracking(i == 0)
        logits = model.forward(x[i:i + batch_size], train=False)
        if i == 0:
            model.last_residues = model.residues()
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    model.set_residue_tracking(False)
    model.set_bank_caching(False)
    return correct / len(labels)


def _stream(seed, purpose, epoch):
    return np.random.default_rng([seed, purpose, epoch])


def run_epoch(model, opt, x, labels, cfg: TrainConfig, epoch, lr, fill):
    n = len(labels)
    order = _stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
    aug_rng = _stream(cfg.seed, STREAM_AUGMENT, epoch)
    total_loss, correct = 0.0, 0
    for step, i in enumerate(range(0, n, cfg.batch_size)):
        idx = order[i:i + cfg.batch_size]
        xb = augment(x[idx], aug_rng, pad=cfg.pad, flip_prob=cfg.flip_prob, fill=fill)
        yb = labels[idx]
        logits = model.forward(xb, train=True)
        loss, dlogits = smoothed_cross_entropy(logits, yb, cfg.label_smoothing)
        if not np.isfinite(loss):
            raise NumericalFailure(f"loss became {loss} at epoch {epoch}, step {step} (lr={lr:.4g}); "
                                   "lower train.lr or check the input normalization")
        model.backward(dlogits)
        opt.step(lr)
        total_loss += loss * len(idx)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return total_loss / n, correct / n


def write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["train_acc"]), repr(r["test_acc"]),
                        repr(r["lr"]), repr(r["epoch_seconds"])])


def read_metrics(path):
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def save_training_state(path, model, opt, meta):
    save_checkpoint(path, model_tensors(model, opt), meta)


def train(spec: ModelSpec, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig, out_dir=None,
          resume=None, stop_after=None, run_config=None, on_epoch=None):
    """Train ``spec`` from scratch (or from the checkpoint at ``resume``).

    Writes ``metrics.csv`` and ``checkpoint.niff`` into ``out_dir`` after every
    epoch when ``out_dir`` is given.  ``stop_after`` ends the run early after
    that many epochs in total, as an interrupted job would.  Returns the model
    and the metric rows.
    """
    from .model import build_model

    cfg.validate()
    mean, std = channel_stats(train_ds.images)
    x_train = normalize(train_ds.images, mean, std)
    x_test = normalize(test_ds.images, mean, std)
    fill = ((0.0 - mean) / std).astype(np.float32)
    model = build_model(spec, seed=cfg.seed)
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    rows, start = [], 0
    if resume is not None:
        tensors, meta = read_checkpoint(resume)
        if meta.get("model_spec") != spec.to_dict():
            raise ValueError("resume checkpoint was written for a different model spec")
        # the schedule and data streams depend on every setting but timing
        saved = {k: v for k, v in meta.get("train_config", {}).items() if k != "log_timing"}
        changed = sorted(k for k, v in asdict(cfg).items() if k != "log_timing" and saved.get(k) != v)
        if changed:
            raise ValueError(f"resume checkpoint was trained with different train settings: {', '.join(changed)}")
        load_model_tensors(model, tensors, opt)
        rows = meta["metrics"]
        start = meta["epoch"]
    log.info("model has %d parameters", model.num_parameters())
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, last):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        t0 = time.perf_counter()
        loss, acc = run_epoch(model, opt, x_train, train_ds.labels, cfg, epoch, lr, fill)
        seconds = time.perf_counter() - t0 if cfg.log_timing else 0.0
        test_acc = evaluate(model, x_test, test_ds.labels)
        rows.append(dict(epoch=epoch + 1, train_loss=loss, train_acc=acc, test_acc=test_acc,
                         lr=lr, epoch_seconds=seconds))
        log.info("epoch %d loss %.4f train %.4f test %.4f lr %.4g (%.1fs)", epoch + 1, loss, acc, test_acc,
                 lr, seconds)
        for name, r in model.last_residues.items():
            log.debug("  %s imaginary residue %.3g", name, r)
        if out_dir:
            meta = dict(model_spec=spec.to_dict(), train_config=asdict(cfg), epoch=epoch + 1,
                        metrics=rows, normalization=dict(mean=list(map(float, mean)), std=list(map(float, std))),
                        rng=dict(seed=cfg.seed, scheme="default_rng([seed, purpose, epoch])",
                                 streams=dict(init=0, shuffle=STREAM_SHUFFLE, augment=STREAM_AUGMENT)),
                        residues=model.last_residues, run_config=run_config or {})
            save_training_state(os.path.join(out_dir, "checkpoint.niff"), model, opt, meta)
            write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        if on_epoch:
            on_epoch(rows[-1])
    return model, rows


def load_trained(path):
    """Rebuild the model stored in a checkpoint; returns ``(model, metadata)``."""
    from .model import build_model

    tensors, meta = read_checkpoint(path)
    spec = ModelSpec.from_dict(meta["model_spec"])
    model = build_model(spec, seed=meta.get("train_config", {}).get("seed", 0))
    load_model_tensors(model, tensors)
    return model, meta
