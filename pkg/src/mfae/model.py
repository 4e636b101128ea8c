"""Utterance embedder, frame tokenizer and frame decoder.

All three networks are stacks of TDNN (spliced affine) and feed-forward
layers.  Every hidden layer is ``affine -> ReLU -> batch norm``; output layers
are plain affine maps.

Parameters live in :class:`ModelParams` as float32 numpy arrays, keyed by
``"<network>.<layer>.<kind>"``.  Graph-building functions take an optional
``tensors`` dict that overrides the stored weights with autodiff leaves, which
is how training and gradient checks obtain gradients.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BadMagicError, ConfigError, FormatError, TruncatedError

CHECKPOINT_MAGIC = b"MFAE0001"

DEFAULT_FRAME_CONTEXTS: tuple[tuple[int, ...], ...] = (
    (-2, -1, 0, 1, 2),
    (-2, 0, 2),
    (-3, 0, 3),
    (0,),
)
DEFAULT_DECODER_CONTEXT: tuple[int, ...] = (-1, 0, 1)


@dataclass(frozen=True)
class ArchConfig:
    feat_dim: int
    n_mixtures: int = 256
    embed_dim: int = 600
    tdnn_hidden: int = 512
    ff_hidden: int = 512
    decoder_hidden: int = 512
    frame_contexts: tuple[tuple[int, ...], ...] = DEFAULT_FRAME_CONTEXTS
    decoder_context: tuple[int, ...] = DEFAULT_DECODER_CONTEXT

    def __post_init__(self):
        object.__setattr__(self, "frame_contexts", tuple(tuple(int(c) for c in ctx) for ctx in self.frame_contexts))
        object.__setattr__(self, "decoder_context", tuple(int(c) for c in self.decoder_context))
        self.validate()

    def validate(self) -> None:
        if self.feat_dim < 1:
            raise ConfigError("feat_dim must be at least 1")
        if self.n_mixtures < 2:
            raise ConfigError("n_mixtures must be at least 2")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be at least 1")
        for name in ("tdnn_hidden", "ff_hidden", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        contexts = list(self.frame_contexts) + [self.decoder_context]
        if not self.frame_contexts or any(not ctx for ctx in contexts):
            raise ConfigError("context lists must be non-empty")
        for ctx in contexts:
            if list(ctx) != sorted(ctx):
                raise ConfigError(f"context {ctx} must be sorted ascending")

    def to_text(self) -> str:
        rows = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "frame_contexts":
                value = ";".join(",".join(str(c) for c in ctx) for ctx in value)
            elif f.name == "decoder_context":
                value = ",".join(str(c) for c in value)
            rows.append(f"{f.name}={value}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "ArchConfig":
        kwargs: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "frame_contexts":
                kwargs[f.name] = tuple(parse_context(part) for part in raw.split(";"))
            elif f.name == "decoder_context":
                kwargs[f.name] = parse_context(raw)
            else:
                kwargs[f.name] = int(raw)
        unknown = set(items) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**kwargs)


def parse_context(text: str) -> tuple[int, ...]:
    text = text.strip()
    if ".." in text:
        lo, hi = (int(v) for v in text.split(".."))
        return tuple(range(lo, hi + 1))
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass
class UtteranceEmbedding:
    mu_omega: np.ndarray
    sigma2_omega: np.ndarray


@dataclass
class MixturePosterior:
    logits: np.ndarray
    probs: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


@dataclass
class ModelParams:
    config: ArchConfig
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.step,
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.weights.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.step,
        )


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class _Layer:
    name: str
    fan_in: int
    fan_out: int
    norm: bool


def _layers(config: ArchConfig) -> list[_Layer]:
    layers: list[_Layer] = []
    for net in ("embedder", "tokenizer"):
        width = config.feat_dim
        for i, ctx in enumerate(config.frame_contexts):
            layers.append(_Layer(f"{net}.tdnn{i}", width * len(ctx), config.tdnn_hidden, True))
            width = config.tdnn_hidden
        if net == "embedder":
            width *= 2  # mean + std pooling
        for i in range(2):
            layers.append(_Layer(f"{net}.ff{i}", width, config.ff_hidden, True))
            width = config.ff_hidden
        if net == "embedder":
            layers.append(_Layer("embedder.mu", width, config.embed_dim, False))
            layers.append(_Layer("embedder.sigma2", width, config.embed_dim, False))
        else:
            layers.append(_Layer("tokenizer.out", width, config.n_mixtures, False))
    e, h = config.embed_dim, config.decoder_hidden
    layers.append(_Layer("decoder.in", config.n_mixtures * len(config.decoder_context) + e, h, True))
    for i in range(3):
        layers.append(_Layer(f"decoder.ff{i}", h + e, h, True))
    layers.append(_Layer("decoder.out", h + e, config.feat_dim, False))
    return layers


def param_layout(config: ArchConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """Ordered ``(name, shape, trainable)`` entries; this is the checkpoint blob order.

    For every layer in network order (embedder, tokenizer, decoder) the entries
    are ``weight`` (fan_in x fan_out), ``bias``, then for normalized layers
    ``bn_scale``, ``bn_shift`` (trainable) and ``bn_mean``, ``bn_var``
    (running statistics).
    """
    out = []
    for layer in _layers(config):
        out.append((f"{layer.name}.weight", (layer.fan_in, layer.fan_out), True))
        out.append((f"{layer.name}.bias", (layer.fan_out,), True))
        if layer.norm:
            out.append((f"{layer.name}.bn_scale", (layer.fan_out,), True))
            out.append((f"{layer.name}.bn_shift", (layer.fan_out,), True))
            out.append((f"{layer.name}.bn_mean", (layer.fan_out,), False))
            out.append((f"{layer.name}.bn_var", (layer.fan_out,), False))
    return out


def init_params(config: ArchConfig, seed: int = 0) -> ModelParams:
    """Kaiming-uniform weights, zero biases, identity batch norm."""
    config.validate()
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, shape, trainable in param_layout(config):
        kind = name.rsplit(".", 1)[1]
        if kind == "weight":
            bound = np.sqrt(6.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif kind in ("bn_scale", "bn_var"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        (weights if trainable else buffers)[name] = value.astype(np.float32)
    return ModelParams(config, weights, buffers)


# ---------------------------------------------------------------- graphs


def _resolve(params: ModelParams, tensors: dict[str, Tensor] | None) -> dict[str, Tensor]:
    if tensors is not None:
        return tensors
    return {k: Tensor(v) for k, v in params.weights.items()}


def _hidden(t, buffers, name, x, training):
    h = ad.relu(ad.affine(x, t[f"{name}.weight"], t[f"{name}.bias"]))
    return ad.batch_norm(
        h, t[f"{name}.bn_scale"], t[f"{name}.bn_shift"],
        buffers[f"{name}.bn_mean"], buffers[f"{name}.bn_var"], training,
    )


def _output(t, name, x):
    return ad.affine(x, t[f"{name}.weight"], t[f"{name}.bias"])


def _frame_stack(t, params, net, x, lengths, training):
    h = x
    for i, ctx in enumerate(params.config.frame_contexts):
        h = _hidden(t, params.buffers, f"{net}.tdnn{i}", ad.splice(h, ctx, lengths), training)
    return h


def _check_input(params: ModelParams, x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != params.config.feat_dim:
        raise ValueError(f"expected N x {params.config.feat_dim} features, got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty feature sequence")
    dtype = next(iter(params.weights.values())).dtype
    return x if x.dtype == dtype else Tensor(x.data.astype(dtype))


def embedder_graph(params, x, lengths, training, tensors=None) -> tuple[Tensor, Tensor]:
    """Return ``(mu, sigma2)``, each B x embed_dim, for the stacked sequences in ``x``."""
    t = _resolve(params, tensors)
    x = _check_input(params, ad.as_tensor(x))
    h = _frame_stack(t, params, "embedder", x, lengths, training)
    h = ad.stats_pool(h, lengths)
    for i in range(2):
        h = _hidden(t, params.buffers, f"embedder.ff{i}", h, training)
    return _output(t, "embedder.mu", h), ad.softplus(_output(t, "embedder.sigma2", h))


def tokenizer_graph(params, x, lengths, training, tensors=None) -> Tensor:
    """Per-frame mixture logits, N x K."""
    t = _resolve(params, tensors)
    x = _check_input(params, ad.as_tensor(x))
    h = _frame_stack(t, params, "tokenizer", x, lengths, training)
    for i in range(2):
        h = _hidden(t, params.buffers, f"tokenizer.ff{i}", h, training)
    return _output(t, "tokenizer.out", h)


def decoder_from_spliced(params, y_spliced, seq_frames, training, tensors=None) -> Tensor:
    """Decode already-spliced mixture indicators, one sequence vector row per frame."""
    t = _resolve(params, tensors)
    h = _hidden(t, params.buffers, "decoder.in", ad.concat([y_spliced, seq_frames]), training)
    for i in range(3):
        h = _hidden(t, params.buffers, f"decoder.ff{i}", ad.concat([h, seq_frames]), training)
    return _output(t, "decoder.out", ad.concat([h, seq_frames]))


def decoder_graph(params, seq_vecs, y, lengths, training, tensors=None) -> Tensor:
    """Reconstruct N x D frames from B x E sequence vectors and N x K indicators."""
    y = ad.as_tensor(y)
    seq_vecs = ad.as_tensor(seq_vecs)
    cfg = params.config
    if y.data.ndim != 2 or y.shape[1] != cfg.n_mixtures:
        raise ValueError(f"expected N x {cfg.n_mixtures} mixture indicators, got {y.shape}")
    if seq_vecs.data.ndim != 2 or seq_vecs.shape[1] != cfg.embed_dim:
        raise ValueError(f"expected B x {cfg.embed_dim} sequence vectors, got {seq_vecs.shape}")
    lengths = [y.shape[0]] if lengths is None else list(lengths)
    seq_frames = ad.expand_rows(seq_vecs, lengths)
    return decoder_from_spliced(
        params, ad.splice(y, cfg.decoder_context, lengths), seq_frames, training, tensors
    )


# ---------------------------------------------------------------- single-sequence API


def _training(mode: str) -> bool:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', not {mode!r}")
    return mode == "train"


def _frames(features) -> np.ndarray:
    return features.frames if hasattr(features, "frames") else np.asarray(features)


def embed_utterance(params: ModelParams, features, mode: str = "infer") -> UtteranceEmbedding:
    frames = _frames(features)
    mu, sigma2 = embedder_graph(params, frames, None, _training(mode))
    return UtteranceEmbedding(mu.data[0].copy(), sigma2.data[0].copy())


def tokenize_frames(params: ModelParams, features, mode: str = "infer") -> MixturePosterior:
    frames = _frames(features)
    logits = tokenizer_graph(params, frames, None, _training(mode))
    return MixturePosterior(logits.data, ad.softmax(logits).data)


def decode_frames(params: ModelParams, seq_vec, y_seq, mode: str = "infer") -> np.ndarray:
    dtype = next(iter(params.weights.values())).dtype
    seq_vec = np.asarray(seq_vec, dtype=dtype).reshape(1, -1)
    y_seq = np.asarray(y_seq, dtype=dtype)
    return decoder_graph(params, seq_vec, y_seq, None, _training(mode)).data


def embed_batch(params: ModelParams, sequences: Sequence, mode: str = "infer") -> np.ndarray:
    """``mu_omega`` for every sequence, stacked B x E (one pass when lengths are given)."""
    if not sequences:
        return np.zeros((0, params.config.embed_dim), dtype=np.float32)
    frames = [_frames(s) for s in sequences]
    mu, _ = embedder_graph(params, np.concatenate(frames), [len(f) for f in frames], _training(mode))
    return mu.data


# ---------------------------------------------------------------- checkpoints


def save_params(path, params: ModelParams) -> None:
    """Write a checkpoint: magic, length-prefixed key=value header, float32 blobs."""
    header = params.config.to_text() + f"step={params.step}\n"
    raw = header.encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for name, shape, trainable in param_layout(params.config):
        arr = (params.weights if trainable else params.buffers)[name]
        if arr.shape != shape:
            raise FormatError(f"{name} has shape {arr.shape}, layout expects {shape}")
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + n:
        raise TruncatedError(f"{path}: truncated header")
    items = {}
    for line in blob[12 : 12 + n].decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    step = int(items.pop("step", "0"))
    config = ArchConfig.from_mapping(items)
    offset = 12 + n
    weights, buffers = {}, {}
    for name, shape, trainable in param_layout(config):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise TruncatedError(f"{path}: payload ends inside {name}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float32).reshape(shape)
        (weights if trainable else buffers)[name] = arr
        offset = end
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return ModelParams(config, weights, buffers, step)
