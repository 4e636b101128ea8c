"""Training objectives for the factorized auto-encoders.

``mfae_loss`` is the auto-encoder objective: half the squared reconstruction
error with the sequence vector fixed at ``mu_omega`` and a Gumbel-Softmax
relaxed mixture indicator per frame.  ``mfvae_loss`` is the full variational
bound with weighted KL terms.  The Gaussian likelihood constant is omitted
everywhere.  All values are sums over the batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError
from .sampling import gumbel_max_sample, gumbel_noise, gumbel_softmax, gumbel_softmax_sample


@dataclass
class LossBreakdown:
    reconstruction: float
    kl_omega: float
    kl_y: float
    total: float
    beta_omega: float = 0.0
    beta_y: float = 0.0
    n_frames: int = 0

    def per_frame(self) -> dict[str, float]:
        n = max(self.n_frames, 1)
        return {
            "reconstruction": self.reconstruction / n,
            "kl_omega": self.kl_omega / n,
            "kl_y": self.kl_y / n,
            "total": self.total / n,
        }


# ---------------------------------------------------------------- closed-form KL


def kl_gaussian_std(mu, sigma2) -> float:
    """KL( N(mu, diag(sigma2)) || N(0, I) )."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be strictly positive")
    return float(0.5 * np.sum(sigma2 + mu * mu - 1.0 - np.log(sigma2)))


def kl_categorical_uniform(pi):
    """KL( Cat(pi) || Cat(1/K) ) = sum_k pi_k log(pi_k K), with 0 log 0 = 0.

    A K vector gives a float; an N x K matrix gives one value per row.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=-1) - 1.0) > 1e-5):
        raise ValueError("pi must lie on the probability simplex")
    k = pi.shape[-1]
    safe = np.where(pi > 0, pi, 1.0)
    out = np.sum(np.where(pi > 0, pi * np.log(safe * k), 0.0), axis=-1)
    return float(out) if pi.ndim == 1 else out


def kl_gaussian_graph(mu: Tensor, sigma2: Tensor) -> Tensor:
    inner = ad.add(ad.add(sigma2, ad.mul(mu, mu)), -1.0)
    return ad.scale(ad.sum(ad.add(inner, ad.scale(ad.log(sigma2), -1.0))), 0.5)


def kl_categorical_graph(logits: Tensor) -> Tensor:
    """Summed per-row KL of ``softmax(logits)`` from the uniform categorical."""
    n, k = logits.shape
    neg_entropy = ad.sum(ad.mul(ad.softmax(logits), ad.log_softmax(logits)))
    return ad.add(neg_entropy, n * np.log(k))


# ---------------------------------------------------------------- batches


def stack_batch(batch: Sequence) -> tuple[np.ndarray, list[int]]:
    """Stack sequences (arrays or objects with ``.frames``) into N x D rows plus lengths."""
    if len(batch) == 0:
        raise ValueError("batch must not be empty")
    frames = [np.asarray(b.frames if hasattr(b, "frames") else b) for b in batch]
    if any(f.shape[0] < 1 for f in frames):
        raise ValueError("every utterance needs at least one frame")
    return np.concatenate(frames), [f.shape[0] for f in frames]


def _leaves(params: M.ModelParams, dtype=None) -> dict[str, Tensor]:
    return {k: ad.parameter(v if dtype is None else v.astype(dtype)) for k, v in params.weights.items()}


def _grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def _dtype(params: M.ModelParams):
    return next(iter(params.weights.values())).dtype


# ---------------------------------------------------------------- mFAE


def mfae_graph(params, frames, lengths, tau, noise, tensors=None, training=True) -> Tensor:
    """Sampled reconstruction loss ``0.5 sum ||o - mu_o(mu_omega, y_hat)||^2`` as a graph."""
    x = ad.as_tensor(np.asarray(frames, dtype=_dtype(params)))
    mu, _ = M.embedder_graph(params, x, lengths, training, tensors)
    logits = M.tokenizer_graph(params, x, lengths, training, tensors)
    y_hat = gumbel_softmax(logits, tau, noise)
    recon = M.decoder_graph(params, mu, y_hat, lengths, training, tensors)
    return ad.squared_error(recon, x.data)


def mfae_loss(params, batch, tau, rng=None, noise=None, training=True, with_grads=True):
    """Return ``(LossBreakdown, grads)`` for the auto-encoder objective.

    ``noise`` (N x K Gumbel samples) freezes the relaxation; otherwise it is
    drawn from ``rng``.  KL fields are zero.
    """
    frames, lengths = stack_batch(batch)
    if noise is None:
        noise = gumbel_noise((frames.shape[0], params.config.n_mixtures), rng)
    leaves = _leaves(params) if with_grads else None
    loss = mfae_graph(params, frames, lengths, tau, noise, leaves, training)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite mFAE loss")
    grads = None
    if with_grads:
        loss.backward()
        grads = _grads(leaves)
    return LossBreakdown(value, 0.0, 0.0, value, n_frames=frames.shape[0]), grads


# ---------------------------------------------------------------- mFVAE


def mfvae_graph(params, frames, lengths, beta_omega, beta_y, tau, noise, eps, tensors=None, training=True):
    """``(total, reconstruction, kl_omega, kl_y)`` tensors of the weighted variational bound."""
    x = ad.as_tensor(np.asarray(frames, dtype=_dtype(params)))
    mu, sigma2 = M.embedder_graph(params, x, lengths, training, tensors)
    omega = ad.add(mu, ad.mul(ad.sqrt(sigma2), ad.as_tensor(eps.astype(mu.dtype))))
    logits = M.tokenizer_graph(params, x, lengths, training, tensors)
    y_hat = gumbel_softmax(logits, tau, noise)
    recon = ad.squared_error(M.decoder_graph(params, omega, y_hat, lengths, training, tensors), x.data)
    kl_w = kl_gaussian_graph(mu, sigma2)
    kl_y = kl_categorical_graph(logits)
    total = ad.add(ad.add(recon, ad.scale(kl_w, beta_omega)), ad.scale(kl_y, beta_y))
    return total, recon, kl_w, kl_y


def mfvae_loss(params, batch, beta_omega, beta_y, tau, rng=None, noise=None, eps=None,
               training=True, with_grads=True):
    """Return ``(LossBreakdown, grads)`` for the variational objective.

    The sequence vector is reparameterized as ``mu + sqrt(sigma2) * eps``, one
    ``eps`` per utterance; the mixture indicator uses one Gumbel draw per frame.
    Gumbel noise is drawn before ``eps`` when both come from ``rng``.
    """
    if beta_omega < 0 or beta_y < 0:
        raise ConfigError("KL weights must be non-negative")
    frames, lengths = stack_batch(batch)
    if noise is None:
        noise = gumbel_noise((frames.shape[0], params.config.n_mixtures), rng)
    if eps is None:
        eps = rng.standard_normal((len(lengths), params.config.embed_dim))
    leaves = _leaves(params) if with_grads else None
    total, recon, kl_w, kl_y = mfvae_graph(
        params, frames, lengths, beta_omega, beta_y, tau, noise, np.asarray(eps), leaves, training
    )
    if not np.isfinite(float(total.data)):
        raise NonFiniteError("non-finite mFVAE loss")
    grads = None
    if with_grads:
        total.backward()
        grads = _grads(leaves)
    breakdown = LossBreakdown(
        float(recon.data), float(kl_w.data), float(kl_y.data), float(total.data),
        beta_omega, beta_y, frames.shape[0],
    )
    return breakdown, grads


# ---------------------------------------------------------------- exact expectation


def _frame_assignments(t: int, n: int, context, k: int):
    """Distinct source frames of frame ``t`` and all joint mixture assignments over them."""
    sources = [min(max(t + c, 0), n - 1) for c in context]
    distinct = sorted(set(sources))
    slot = [distinct.index(s) for s in sources]
    combos = np.array(list(itertools.product(range(k), repeat=len(distinct))), dtype=np.int64)
    return distinct, slot, combos


def exact_expected_reconstruction(params: M.ModelParams, features, mu_omega) -> float:
    """``E_{y ~ q(y|o)} [0.5 sum_t ||o_t - mu_o(mu_omega, y)||^2]`` by enumeration.

    Because the decoder splices indicators over its context window, frame ``t``
    depends on the indicators of every distinct frame in that window; the
    expectation marginalizes all of them jointly (``K^|window|`` terms per
    frame).  With a ``{0}`` decoder context this reduces to
    ``sum_t sum_k pi_k(o_t) 0.5 ||o_t - mu_o(mu_omega, e_k)||^2``.  Both
    networks run in inference mode so frames are independent given the
    running batch-norm statistics.
    """
    frames = np.asarray(features.frames if hasattr(features, "frames") else features)
    dtype = _dtype(params)
    pi = M.tokenize_frames(params, frames, "infer").probs.astype(np.float64)
    n, k = pi.shape
    context = params.config.decoder_context
    c = len(context)
    rows, weights, owners = [], [], []
    for t in range(n):
        distinct, slot, combos = _frame_assignments(t, n, context, k)
        onehot = np.zeros((len(combos), c * k))
        for j, s in enumerate(slot):
            onehot[np.arange(len(combos)), j * k + combos[:, s]] = 1.0
        w = np.ones(len(combos))
        for j, src in enumerate(distinct):
            w *= pi[src, combos[:, j]]
        rows.append(onehot)
        weights.append(w)
        owners.append(np.full(len(combos), t))
    rows = np.concatenate(rows).astype(dtype)
    weights = np.concatenate(weights)
    owners = np.concatenate(owners)
    seq = np.repeat(np.asarray(mu_omega, dtype=dtype).reshape(1, -1), len(rows), axis=0)
    out = M.decoder_from_spliced(params, ad.as_tensor(rows), ad.as_tensor(seq), False).data
    err = 0.5 * np.sum((frames[owners].astype(np.float64) - out) ** 2, axis=1)
    return float(np.sum(weights * err))


def sampled_reconstruction_draws(params, features, mu_omega, tau, rng, n_draws, hard=False, chunk=512):
    """Per-draw sampled reconstruction losses in inference mode.

    Each draw relaxes every frame's indicator with fresh Gumbel noise (or
    takes the Gumbel-Max one-hot when ``hard``) and decodes with
    ``mu_omega``.  This is the estimate the auto-encoder loss uses, batched
    over draws.
    """
    frames = np.asarray(features.frames if hasattr(features, "frames") else features)
    dtype = _dtype(params)
    logits = M.tokenize_frames(params, frames, "infer").logits.astype(np.float64)
    n, k = logits.shape
    mu = np.asarray(mu_omega, dtype=dtype).reshape(1, -1)
    target = frames.astype(np.float64)
    out = []
    for start in range(0, n_draws, chunk):
        m = min(chunk, n_draws - start)
        g = gumbel_noise((m, n, k), rng)
        z = np.broadcast_to(logits, (m, n, k))
        y = gumbel_max_sample(z, rng, noise=g) if hard else gumbel_softmax_sample(z, tau, rng, noise=g)
        recon = M.decoder_graph(
            params, np.repeat(mu, m, axis=0), y.reshape(m * n, k).astype(dtype), [n] * m, False
        ).data.reshape(m, n, -1)
        out.append(0.5 * np.sum((recon - target[None]) ** 2, axis=(1, 2)))
    return np.concatenate(out)
