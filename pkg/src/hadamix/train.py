"""AdamW training with warmup + cosine decay, clipping, eval and checkpoints.

Runs are deterministic for a given seed. Model init, the training data stream,
and the validation windows each come from their own seeded generator, so
the dense and Hadamard variants see identical batches in identical order.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import count_params, training_flops
from .model import TransformerModel, load_model, save_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "lr", "train_loss", "val_loss", "wall_ms", "cumulative_flops")


@dataclass
class TrainConfig:
    """Optimizer and loop settings.

    ``min_lr`` defaults to ``peak_lr / 10`` and ``warmup_steps`` to 2% of
    ``total_steps``; neither is pinned down by the reference recipe.
    """

    total_steps: int = 200
    peak_lr: float = 3e-3
    min_lr: float | None = None
    warmup_steps: int | None = None
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    batch_tokens: int = 2048
    seed: int = 0
    eval_interval: int = 100
    eval_batches: int = 8
    checkpoint_interval: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.min_lr is None:
            self.min_lr = self.peak_lr / 10
        if self.warmup_steps is None:
            self.warmup_steps = int(0.02 * self.total_steps)
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.total_steps and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must be in [0, total_steps={self.total_steps})")
        if not self.peak_lr > self.min_lr >= 0:
            raise ValueError(f"need peak_lr > min_lr >= 0, got {self.peak_lr}, {self.min_lr}")
        if self.batch_tokens < 1 or self.eval_batches < 1 or self.eval_interval < 1:
            raise ValueError("batch_tokens, eval_batches and eval_interval must be positive")

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def lr_at(step, cfg):
    """Linear ramp from 0 to ``peak_lr`` then cosine decay to ``min_lr``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span > 0 else 1.0
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_gradients(params, max_norm=1.0):
    """Scale all grads so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= p.grad.dtype.type(scale)
    return total


def adamw_step(params, state, lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1):
    """One AdamW update in place.

    Weight decay is decoupled and applied before the Adam term, only to
    parameters with ``decay=True``.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {p.name}; step aborted")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * np.square(p.grad)
        if p.decay and weight_decay:
            p.value *= p.value.dtype.type(1.0 - lr * weight_decay)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)


def decay_exempt(params):
    return {p.name for p in params if not p.decay}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_corpus(data):
    """Bytes, str, path or integer array -> uint8 token array."""
    if isinstance(data, (str, os.PathLike)) and not isinstance(data, bytes):
        path = Path(data)
        if not path.is_file():
            raise FileNotFoundError(f"dataset not readable: {path}")
        return np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if isinstance(data, (bytes, bytearray)):
        return np.frombuffer(bytes(data), dtype=np.uint8)
    return np.asarray(data, dtype=np.uint8)


def split_corpus(tokens, context_length):
    cut = int(0.9 * len(tokens))
    train, val = tokens[:cut], tokens[cut:]
    if len(train) < context_length + 1 or len(val) < context_length + 1:
        raise ValueError(f"dataset too short: {len(tokens)} bytes cannot fill a window of {context_length + 1} in both splits")
    return train, val


def windows(tokens, offsets, length):
    idx = offsets[:, None] + np.arange(length + 1)
    chunk = tokens[idx].astype(np.int64)
    return chunk[:, :-1], chunk[:, 1:]


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    rng: np.random.Generator = None
    best_val: float = math.inf
    initial_val_loss: float = math.nan
    cumulative_flops: int = 0


@dataclass
class TrainResult:
    model: TransformerModel
    state: TrainState
    history: list
    out_dir: Path | None = None

    @property
    def val_history(self):
        return [(r["step"], r["val_loss"]) for r in self.history if r["val_loss"] != ""]


def _evaluate(model, val, offsets, batch_size, context):
    losses = []
    for i in range(0, len(offsets), batch_size):
        x, y = windows(val, offsets[i:i + batch_size], context)
        losses.append(model.loss(x, y))
    return float(np.mean(losses))


def save_train_checkpoint(path, model, state, train_cfg):
    meta = {
        "train": train_cfg.to_dict(),
        "state": {
            "step": state.step,
            "adam_t": state.adam.t,
            "rng": state.rng.bit_generator.state,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "initial_val_loss": state.initial_val_loss,
            "cumulative_flops": state.cumulative_flops,
        },
    }
    extra = {f"adam.m.{k}": v for k, v in state.adam.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    save_model(path, model, meta, extra)


def load_train_checkpoint(path):
    """Return ``(model, train_cfg, state)`` from a training checkpoint."""
    model, meta, tensors = load_model(path)
    if "state" not in meta:
        raise ValueError(f"{path}: no optimizer state; not a training checkpoint")
    s = meta["state"]
    adam = AdamState(t=s["adam_t"])
    for key, arr in tensors.items():
        kind, _, name = key[len("adam."):].partition(".")
        getattr(adam, kind)[name] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = s["rng"]
    state = TrainState(step=s["step"], adam=adam, rng=rng,
                       best_val=s["best_val"] if s["best_val"] is not None else math.inf,
                       initial_val_loss=s["initial_val_loss"], cumulative_flops=s["cumulative_flops"])
    return model, TrainConfig.from_dict(meta["train"]), state


def _fmt(x):
    return "" if x == "" else repr(x)


def _read_log(path, upto):
    with open(path, newline="") as f:
        rows = [r for r in csv.DictReader(f) if int(r["step"]) <= upto]
    for r in rows:
        r["step"] = int(r["step"])
        r["cumulative_flops"] = int(r["cumulative_flops"])
        for k in ("lr", "train_loss", "wall_ms"):
            r[k] = float(r[k])
        r["val_loss"] = float(r["val_loss"]) if r["val_loss"] else ""
    return rows


def write_manifest(out_dir, **fields):
    manifest = {"version": __version__, **fields}
    with open(Path(out_dir) / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def train_loop(model_cfg, train_cfg, data, out_dir=None, resume=None, extra_manifest=None):
    """Train ``model_cfg`` on ``data`` (path, bytes or uint8 array).

    With ``out_dir`` the run writes ``train_log.csv``, ``manifest.json``,
    ``summary.json``, an initial checkpoint ``ckpt_000000.hmix``, periodic
    checkpoints when ``checkpoint_interval`` is set, and ``last.hmix``.
    ``resume`` is a training checkpoint to continue from. The resumed run
    reproduces the uninterrupted one exactly.
    """
    tokens = load_corpus(data)
    context = model_cfg.context_length
    train, val = split_corpus(tokens, context)
    batch_size = max(1, train_cfg.batch_tokens // context)
    val_offsets = np.random.default_rng([train_cfg.seed, 2]).integers(
        0, len(val) - context, size=train_cfg.eval_batches * batch_size)

    if resume is not None:
        model, saved_cfg, state = load_train_checkpoint(resume)
        if model.cfg.to_dict() != model_cfg.to_dict():
            raise ValueError("resume checkpoint was written for a different model config")
        if saved_cfg.to_dict() != train_cfg.to_dict():
            raise ValueError("resume checkpoint was written for a different train config")
    else:
        model = TransformerModel(model_cfg, seed=train_cfg.seed)
        state = TrainState(rng=np.random.default_rng([train_cfg.seed, 1]))
        state.initial_val_loss = _evaluate(model, val, val_offsets, batch_size, context)
        state.best_val = state.initial_val_loss

    params = model.params()
    step_flops = training_flops(model_cfg, context, batch_size * context)
    history = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if resume is not None and log_path.exists():
            history = _read_log(log_path, state.step)
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in history:
            writer.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
        write_manifest(out_dir, model=model_cfg.to_dict(), train=train_cfg.to_dict(), seed=train_cfg.seed,
                       params=count_params(model_cfg).total, resumed_from=str(resume) if resume else None,
                       **(extra_manifest or {}))
        if resume is None:
            save_train_checkpoint(out_dir / "ckpt_000000.hmix", model, state, train_cfg)

    try:
        while state.step < train_cfg.total_steps:
            t0 = time.perf_counter()
            step = state.step + 1
            offsets = state.rng.integers(0, len(train) - context, size=batch_size)
            x, y = windows(train, offsets, context)
            model.zero_grad()
            loss = model.loss_and_grad(x, y)
            clip_gradients(params, train_cfg.clip_norm)
            lr = lr_at(step, train_cfg)
            adamw_step(params, state.adam, lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
            state.step = step
            state.cumulative_flops += step_flops
            val_loss = ""
            if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
                val_loss = _evaluate(model, val, val_offsets, batch_size, context)
                state.best_val = min(state.best_val, val_loss)
            row = dict(step=step, lr=lr, train_loss=loss, val_loss=val_loss,
                       wall_ms=(time.perf_counter() - t0) * 1000.0, cumulative_flops=state.cumulative_flops)
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
                if train_cfg.checkpoint_interval and step % train_cfg.checkpoint_interval == 0:
                    fh.flush()
                    save_train_checkpoint(out_dir / f"ckpt_{step:06d}.hmix", model, state, train_cfg)
            if val_loss != "":
                log.info("step %d lr %.3g train %.4f val %.4f", step, lr, loss, val_loss)
    finally:
        if fh is not None:
            fh.close()

    if out_dir is not None:
        save_train_checkpoint(out_dir / "last.hmix", model, state, train_cfg)
        summary = dict(steps=state.step, initial_val_loss=state.initial_val_loss,
                       final_val_loss=history[-1]["val_loss"] if history else state.initial_val_loss,
                       best_val_loss=state.best_val, cumulative_flops=state.cumulative_flops,
                       params=model.num_params(), variant=model_cfg.variant.value)
        with open(out_dir / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    return TrainResult(model=model, state=state, history=history, out_dir=out_dir)
