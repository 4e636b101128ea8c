"""ADAM training loop with a per-epoch exponential learning-rate schedule."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .data import FeatureSequence, trim_segment
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import ArchConfig, ModelParams, init_params, load_params, save_params
from .sampling import stream

log = logging.getLogger(__name__)

VARIANTS = ("mfae", "mfvae")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    segment_frames: int = 300
    frame_hop_ms: float = 10.0
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    tau: float = 0.1
    beta_omega: float = 0.0
    beta_y: float = 0.0
    variant: str = "mfae"
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.segment_frames < 1:
            raise ConfigError("segment_frames must be at least 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("learning rates must satisfy 0 < lr_end <= lr_start")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.beta_omega < 0 or self.beta_y < 0:
            raise ConfigError("KL weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")


def lr_at_epoch(config: TrainConfig, epoch: float) -> float:
    """Geometric interpolation from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    ratio = config.lr_end / config.lr_start
    return config.lr_start * ratio ** (epoch / (config.epochs - 1))


# ---------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kwargs)

    def save(self, path) -> None:
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        meta = np.array([self.step, self.beta1, self.beta2, self.eps], dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=meta, **arrays)

    @classmethod
    def load(cls, path) -> "AdamState":
        with np.load(path) as z:
            step, b1, b2, eps = z["__meta__"]
            m = {k[2:]: z[k] for k in z.files if k.startswith("m/")}
            v = {k[2:]: z[k] for k in z.files if k.startswith("v/")}
        return cls(m, v, int(step), float(b1), float(b2), float(eps))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected ADAM update, applied in place; returns ``(params, state)``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


# ---------------------------------------------------------------- driver


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict] = field(default_factory=list)


def batch_loss(params, batch, config: TrainConfig, rng, training=True, with_grads=True):
    if config.variant == "mfae":
        return losses.mfae_loss(params, batch, config.tau, rng, training=training, with_grads=with_grads)
    return losses.mfvae_loss(params, batch, config.beta_omega, config.beta_y, config.tau, rng,
                             training=training, with_grads=with_grads)


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _save_epoch(out_dir: Path, epoch: int, params: ModelParams, adam: AdamState,
                record: dict, train_config: TrainConfig) -> None:
    _atomic_write(out_dir / f"epoch{epoch:03d}.mfae", lambda p: save_params(p, params))
    _atomic_write(out_dir / "optimizer.npz", adam.save)
    with open(out_dir / "loss_log.jsonl", "a") as fh:
        fh.write(json.dumps(record) + "\n")
    state = {"epoch": epoch, "checkpoint": f"epoch{epoch:03d}.mfae", "train_config": dataclasses.asdict(train_config)}
    _atomic_write(out_dir / "state.json", lambda p: Path(p).write_text(json.dumps(state, indent=1)))


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train(
    train_config: TrainConfig,
    arch_config: ArchConfig,
    dataset: Sequence[FeatureSequence],
    out_dir=None,
    resume: bool = False,
    init: ModelParams | None = None,
) -> TrainResult:
    """Optimize the configured objective over ``dataset``.

    Every epoch draws a fresh shuffle, trims each utterance to
    ``segment_frames`` and takes one ADAM step per batch.  Randomness for
    epoch ``e`` comes from a stream keyed on ``(seed, e)``, so resuming from
    the epoch-``e`` checkpoint reproduces the uninterrupted run.  With
    ``out_dir`` a checkpoint, the optimizer state and a loss-log line are
    written after each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    dims = {s.frames.shape[1] for s in dataset}
    if dims != {arch_config.feat_dim}:
        raise ConfigError(f"feature dims {sorted(dims)} do not match feat_dim={arch_config.feat_dim}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = init.copy() if init is not None else init_params(arch_config, train_config.seed)
    adam = AdamState.zeros_like(params.weights)
    history: list[dict] = []
    first_epoch = 0
    if resume and out is not None and (out / "state.json").exists():
        state = json.loads((out / "state.json").read_text())
        params = load_params(out / state["checkpoint"])
        adam = AdamState.load(out / "optimizer.npz")
        history = [r for r in read_loss_log(out / "loss_log.jsonl") if r["epoch"] <= state["epoch"]]
        (out / "loss_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in history))
        first_epoch = state["epoch"] + 1
        log.info("resuming after epoch %d", state["epoch"])
    elif out is not None and (out / "loss_log.jsonl").exists():
        (out / "loss_log.jsonl").unlink()

    n = len(dataset)
    for epoch in range(first_epoch, train_config.epochs):
        lr = lr_at_epoch(train_config, epoch)
        rng = stream(train_config.seed, epoch)
        order = rng.permutation(n)
        sums = dict(reconstruction=0.0, kl_omega=0.0, kl_y=0.0, total=0.0)
        frames = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            batch = [trim_segment(dataset[i], train_config.segment_frames, rng) for i in idx]
            try:
                breakdown, grads = batch_loss(params, batch, train_config, rng)
                if train_config.grad_clip is not None:
                    clip_gradients(grads, train_config.grad_clip)
                adam_step(params.weights, grads, adam, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            params.step += 1
            for key in sums:
                sums[key] += getattr(breakdown, key)
            frames += breakdown.n_frames
        record = {"epoch": epoch, "lr": lr, **{k: v / frames for k, v in sums.items()}}
        history.append(record)
        log.info("epoch %d lr %.3g loss/frame %.5f", epoch, lr, record["total"])
        if out is not None:
            _save_epoch(out, epoch, params, adam, record, train_config)
    if out is not None:
        save_params(out / "final.mfae", params)
    return TrainResult(params, history)
