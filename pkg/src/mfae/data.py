"""Feature archives, normalization, segment trimming and synthetic corpora."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedError

FEATURE_MAGIC = b"FEAT0001"
GMVN_VAR_FLOOR = 1e-8
CMN_WINDOW = 301
SYNTH_LABEL_SCALE = 2.0


@dataclass
class FeatureSequence:
    utt_id: str
    frames: np.ndarray
    spk_id: str | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: frames must be a non-empty T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"{self.utt_id}: frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def replace(self, frames) -> "FeatureSequence":
        return FeatureSequence(self.utt_id, frames, self.spk_id)


# ---------------------------------------------------------------- archive


def save_features(path, sequences: Sequence[FeatureSequence]) -> None:
    """Write sequences in archive order.

    Layout (little-endian): magic ``FEAT0001``; u32 count; then per sequence
    u32 id length + utf-8 bytes, u32 speaker length + bytes (0 = absent),
    u32 T, u32 D and T*D float32 values, row-major.
    """
    dims = {s.frames.shape[1] for s in sequences}
    if len(dims) > 1:
        raise FormatError(f"mixed feature dimensions in archive: {sorted(dims)}")
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<I", len(sequences)))
    for s in sequences:
        uid = s.utt_id.encode("utf-8")
        spk = (s.spk_id or "").encode("utf-8")
        buf.write(struct.pack("<I", len(uid)))
        buf.write(uid)
        buf.write(struct.pack("<I", len(spk)))
        buf.write(spk)
        t, d = s.frames.shape
        buf.write(struct.pack("<II", t, d))
        buf.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, blob: bytes, name: str):
        self.blob, self.pos, self.name = blob, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(f"{self.name}: truncated at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_features(path) -> list[FeatureSequence]:
    blob = Path(path).read_bytes()
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    r = _Reader(blob, str(path))
    r.take(len(FEATURE_MAGIC))
    count = r.u32()
    out: list[FeatureSequence] = []
    dim = None
    for _ in range(count):
        uid = r.take(r.u32()).decode("utf-8")
        spk = r.take(r.u32()).decode("utf-8") or None
        t, d = r.u32(), r.u32()
        if dim is not None and d != dim:
            raise FormatError(f"{path}: {uid} has dimension {d}, expected {dim}")
        dim = d
        frames = np.frombuffer(r.take(4 * t * d), dtype="<f4").astype(np.float32).reshape(t, d)
        out.append(FeatureSequence(uid, frames, spk))
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return out


# ---------------------------------------------------------------- normalization


@dataclass
class GmvnStats:
    mean: np.ndarray
    var: np.ndarray


def gmvn_fit(corpus: Sequence[FeatureSequence]) -> GmvnStats:
    """Corpus-wide per-dimension mean and (floored) variance."""
    if len(corpus) == 0:
        raise ValueError("cannot fit GMVN on an empty corpus")
    allf = np.concatenate([s.frames for s in corpus]).astype(np.float64)
    return GmvnStats(allf.mean(axis=0), np.maximum(allf.var(axis=0), GMVN_VAR_FLOOR))


def gmvn_apply(stats: GmvnStats, seq: FeatureSequence) -> FeatureSequence:
    return seq.replace((seq.frames - stats.mean) / np.sqrt(stats.var))


def sliding_cmn(seq: FeatureSequence, window_frames: int = CMN_WINDOW) -> FeatureSequence:
    """Subtract the mean of a centered window, truncated at the utterance edges."""
    if window_frames < 1 or window_frames % 2 == 0:
        raise ValueError("window must be odd and at least 1")
    x = seq.frames.astype(np.float64)
    t = x.shape[0]
    half = window_frames // 2
    csum = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(t) - half, 0, t)
    hi = np.clip(np.arange(t) + half + 1, 0, t)
    means = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    return seq.replace(x - means)


def trim_segment(seq: FeatureSequence, segment_frames: int, rng: np.random.Generator) -> FeatureSequence:
    """A ``segment_frames`` long piece: random crop, or cyclic repetition when too short."""
    if segment_frames < 1:
        raise ValueError("segment_frames must be at least 1")
    t = seq.n_frames
    if t >= segment_frames:
        start = int(rng.integers(0, t - segment_frames + 1))
        return seq.replace(seq.frames[start : start + segment_frames])
    reps = -(-segment_frames // t)
    return seq.replace(np.tile(seq.frames, (reps, 1))[:segment_frames])


# ---------------------------------------------------------------- synthetic corpora


@dataclass
class SynthOracle:
    """Ground truth of a synthetic corpus.

    ``generator`` holds the weights of the fixed two-hidden-layer tanh network
    mapping ``[omega, label_scale * onehot(y)]`` to a frame mean.
    """

    generator: dict[str, np.ndarray]
    sequence_vectors: np.ndarray
    utt_classes: dict[str, int]
    mixture_labels: dict[str, np.ndarray]
    k_true: int
    n_classes: int
    noise_scale: float
    label_scale: float = 1.0
    clean: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def frame_means(self, class_id: int, labels) -> np.ndarray:
        """Noise-free frames for a class and a sequence of mixture labels."""
        labels = np.asarray(labels, dtype=np.int64)
        omega = np.broadcast_to(self.sequence_vectors[class_id], (len(labels), self.sequence_vectors.shape[1]))
        y = np.eye(self.k_true)[labels] * self.label_scale
        return _generator_forward(self.generator, np.concatenate([omega, y], axis=1))

    def centroids(self) -> np.ndarray:
        """``n_classes x k_true x D`` noise-free frame for every (class, label) pair."""
        return np.stack([self.frame_means(c, np.arange(self.k_true)) for c in range(self.n_classes)])


def _generator_forward(g: dict[str, np.ndarray], inputs: np.ndarray) -> np.ndarray:
    h = np.tanh(inputs @ g["w0"] + g["b0"])
    h = np.tanh(h @ g["w1"] + g["b1"])
    return h @ g["w2"] + g["b2"]


def synth_generate(
    k_true: int,
    n_classes: int,
    utts_per_class: int,
    frames_per_utt: int,
    feat_dim: int,
    noise_scale: float,
    seed: int = 0,
    latent_dim: int = 4,
    hidden: int = 64,
    label_scale: float = SYNTH_LABEL_SCALE,
) -> tuple[list[FeatureSequence], SynthOracle]:
    """Sample a corpus from the two-factor generative process.

    One sequence vector ``omega ~ N(0, I)`` per class, one label
    ``y ~ Cat(1/k_true)`` per frame, and ``o = mu(omega, y) + noise_scale * n``
    with ``n ~ N(0, I)`` through a fixed random tanh network.  Each class plays
    the role of a speaker.
    """
    for name, v in dict(k_true=k_true, n_classes=n_classes, utts_per_class=utts_per_class,
                        frames_per_utt=frames_per_utt, feat_dim=feat_dim).items():
        if v < 1:
            raise ValueError(f"{name} must be at least 1")
    rng = np.random.default_rng(seed)
    n_in = latent_dim + k_true
    gen = {
        "w0": rng.standard_normal((n_in, hidden)) * np.sqrt(2.0 / n_in),
        "b0": rng.standard_normal(hidden) * 0.1,
        "w1": rng.standard_normal((hidden, hidden)) * np.sqrt(2.0 / hidden),
        "b1": rng.standard_normal(hidden) * 0.1,
        "w2": rng.standard_normal((hidden, feat_dim)) * np.sqrt(2.0 / hidden),
        "b2": np.zeros(feat_dim),
    }
    omegas = rng.standard_normal((n_classes, latent_dim))
    oracle = SynthOracle(gen, omegas, {}, {}, k_true, n_classes, float(noise_scale), label_scale)
    dataset: list[FeatureSequence] = []
    for c in range(n_classes):
        for u in range(utts_per_class):
            utt = f"c{c:03d}_u{u:03d}"
            labels = rng.integers(0, k_true, size=frames_per_utt)
            clean = oracle.frame_means(c, labels)
            frames = clean + noise_scale * rng.standard_normal(clean.shape)
            oracle.utt_classes[utt] = c
            oracle.mixture_labels[utt] = labels
            oracle.clean[utt] = clean
            dataset.append(FeatureSequence(utt, frames, f"c{c:03d}"))
    return dataset, oracle


def write_labels(path, oracle: SynthOracle, order: Sequence[str] | None = None) -> None:
    """Label sidecar: one ``utt_id class_id l_1 ... l_T`` line per utterance."""
    order = list(order) if order is not None else list(oracle.mixture_labels)
    lines = []
    for utt in order:
        labels = " ".join(str(int(v)) for v in oracle.mixture_labels[utt])
        lines.append(f"{utt} {oracle.utt_classes[utt]} {labels}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path) -> tuple[dict[str, int], dict[str, np.ndarray]]:
    classes, labels = {}, {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise FormatError(f"{path}:{n}: expected 'utt_id class_id labels...'")
        classes[parts[0]] = int(parts[1])
        labels[parts[0]] = np.array([int(v) for v in parts[2:]], dtype=np.int64)
    return classes, labels


def read_frame_labels(path) -> dict[str, np.ndarray]:
    """Argmax label file written by ``tokenize``: one ``utt_id l_1 ... l_T`` line per utterance."""
    labels = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if parts:
            labels[parts[0]] = np.array([int(v) for v in parts[1:]], dtype=np.int64)
    return labels
