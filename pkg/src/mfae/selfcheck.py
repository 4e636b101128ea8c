"""Built-in verification suites run by ``mfae selfcheck``.

Each suite returns a :class:`SuiteResult`; nothing here depends on trained
models, so the suites are suitable for checking a fresh install.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import losses as L
from . import model as M
from .sampling import gumbel_max_sample, gumbel_noise, gumbel_softmax, gumbel_softmax_sample


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str


def tiny_config(**overrides) -> M.ArchConfig:
    kw = dict(feat_dim=5, n_mixtures=3, embed_dim=4, tdnn_hidden=6, ff_hidden=6, decoder_hidden=6)
    kw.update(overrides)
    return M.ArchConfig(**kw)


def primitive_cases(rng: np.random.Generator) -> dict:
    """``name -> (f, params)`` pairs covering every differentiable primitive."""
    x = rng.standard_normal((7, 4))
    target = rng.standard_normal((7, 3))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)
    pos = rng.uniform(0.5, 2.0, size=(7, 4))
    mix = rng.standard_normal((7, 4)) + np.sign(rng.standard_normal((7, 4)))
    weights = rng.standard_normal((7, 4))
    rm, rv = np.zeros(4), np.ones(4)

    def weighted(t):
        return ad.sum(ad.mul(t, ad.as_tensor(weights[: t.shape[0], : t.shape[1]])))

    def bn(training):
        def f(p):
            out = ad.batch_norm(p["x"], p["g"], p["b"], rm.copy() + 0.3, rv.copy() * 1.7, training)
            return weighted(out)
        return f

    def sp_weighted(t):
        return ad.sum(ad.mul(t, ad.as_tensor(rng_w(t.shape))))

    fixed = {}

    def rng_w(shape):
        if shape not in fixed:
            fixed[shape] = np.random.default_rng(len(fixed) + 7).standard_normal(shape)
        return fixed[shape]

    return {
        "affine+mse": (lambda p: ad.squared_error(ad.affine(p["x"], p["w"], p["b"]), target),
                       {"x": x, "w": w, "b": b}),
        "relu": (lambda p: weighted(ad.relu(p["x"])), {"x": mix}),
        "batch_norm[train]": (bn(True), {"x": x, "g": rng.uniform(0.5, 1.5, 4), "b": rng.standard_normal(4)}),
        "batch_norm[infer]": (bn(False), {"x": x, "g": rng.uniform(0.5, 1.5, 4), "b": rng.standard_normal(4)}),
        "softmax": (lambda p: weighted(ad.softmax(p["x"])), {"x": x}),
        "log_softmax": (lambda p: weighted(ad.log_softmax(p["x"])), {"x": x}),
        "softplus": (lambda p: weighted(ad.softplus(p["x"])), {"x": x}),
        "log": (lambda p: weighted(ad.log(p["x"])), {"x": pos}),
        "sqrt": (lambda p: weighted(ad.sqrt(p["x"])), {"x": pos}),
        "concat": (lambda p: sp_weighted(ad.concat([p["x"], p["y"]])), {"x": x, "y": pos}),
        "add+mul": (lambda p: weighted(ad.mul(ad.add(p["x"], p["y"]), p["y"])), {"x": x, "y": pos}),
        "squared_error": (lambda p: ad.squared_error(p["x"], p["y"]), {"x": x, "y": pos}),
        "logsumexp": (lambda p: ad.sum(ad.mul(ad.logsumexp(p["x"]), ad.as_tensor(weights[:, 0]))), {"x": x}),
        "splice": (lambda p: sp_weighted(ad.splice(p["x"], (-2, 0, 1), [3, 4])), {"x": x}),
        "stats_pool": (lambda p: sp_weighted(ad.stats_pool(p["x"], [3, 4])), {"x": x}),
        "expand_rows": (lambda p: sp_weighted(ad.expand_rows(p["x"], [2, 1, 3])), {"x": x[:3]}),
        "gumbel_softmax": (lambda p: weighted(gumbel_softmax(p["x"], 0.5, noise)), {"x": x}),
    }


noise = np.random.default_rng(11).gumbel(size=(7, 4))


def composed_case(seed: int = 0, n_utts: int = 4, n_frames: int = 8):
    """Per-frame mean mFAE loss of a tiny model with frozen Gumbel noise."""
    params = M.init_params(tiny_config(), seed)
    rng = np.random.default_rng(seed)
    batch = [rng.standard_normal((n_frames, 5)) for _ in range(n_utts)]
    frames, lengths = L.stack_batch(batch)
    noise_ = gumbel_noise((frames.shape[0], 3), rng)
    graph_params = params.astype(np.float64)
    n = frames.shape[0]

    def f(t):
        return ad.scale(L.mfae_graph(graph_params, frames, lengths, 0.1, noise_, t), 1.0 / n)

    return f, params.weights


def gradient_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = {}
    for name, (f, params) in primitive_cases(rng).items():
        worst[name] = ad.check_gradients(f, params, seed=seed, n_probe=30)
    f, params = composed_case(seed)
    composed = ad.check_gradients(f, params, seed=seed, n_probe=40)
    bad = [k for k, v in worst.items() if not v < 1e-4]
    ok = bool(not bad and composed < 1e-3)
    detail = f"max primitive err {max(worst.values()):.2e}; composed err {composed:.2e}"
    if bad:
        detail += f"; failing: {', '.join(bad)}"
    return SuiteResult("gradients", ok, detail)


def mc_kl_gaussian(mu, sigma2, n, rng) -> float:
    """Monte-Carlo ``E_q[log q(w) - log p(w)]`` for diagonal Gaussian q and standard normal p."""
    sd = np.sqrt(sigma2)
    z = rng.standard_normal((n, mu.size))
    w = mu + sd * z
    log_ratio = (-0.5 * z**2 - np.log(sd) + 0.5 * w**2).sum(axis=1)
    return float(np.mean(log_ratio))


def mc_kl_categorical(pi, n, rng) -> float:
    """Monte-Carlo ``E_{k ~ pi}[log pi_k - log(1/K)]``."""
    draws = rng.choice(pi.size, size=n, p=pi)
    return float(np.mean(np.log(pi[draws]) + np.log(pi.size)))


def kl_suite(seed: int = 0, n_inputs: int = 20, n_samples: int = 10**6) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_inputs):
        d = int(rng.integers(2, 7))
        mu = rng.standard_normal(d)
        sigma2 = rng.uniform(0.2, 3.0, d)
        exact = L.kl_gaussian_std(mu, sigma2)
        worst = max(worst, abs(mc_kl_gaussian(mu, sigma2, n_samples, rng) - exact) / exact)
        pi = rng.dirichlet(np.full(int(rng.integers(3, 10)), 0.5))
        exact = L.kl_categorical_uniform(pi)
        worst = max(worst, abs(mc_kl_categorical(pi, n_samples, rng) - exact) / exact)
    anchors = (
        abs(L.kl_gaussian_std(np.zeros(3), np.ones(3))) < 1e-12
        and abs(L.kl_gaussian_std([1.0], [1.0]) - 0.5) < 1e-12
        and abs(L.kl_categorical_uniform(np.full(4, 0.25))) < 1e-12
        and abs(L.kl_categorical_uniform(np.eye(4)[1]) - np.log(4)) < 1e-12
    )
    return SuiteResult("kl", bool(worst < 0.01 and anchors), f"max MC relative deviation {worst:.2e}; anchors {'ok' if anchors else 'FAIL'}")


def sampler_suite(seed: int = 0, n_draws: int = 10**5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    k = 8
    logits = rng.standard_normal(k)
    pi = np.exp(logits - logits.max())
    pi /= pi.sum()
    counts = gumbel_max_sample(np.broadcast_to(logits, (n_draws, k)), rng).sum(axis=0)
    sigma = np.sqrt(pi * (1 - pi) / n_draws)
    z = np.max(np.abs(counts / n_draws - pi) / sigma)
    soft = gumbel_softmax_sample(np.broadcast_to(logits, (n_draws, k)), 0.01, rng)
    soft_counts = np.bincount(soft.argmax(axis=1), minlength=k)
    p_chi2 = stats.chi2_contingency(np.stack([counts, soft_counts])).pvalue
    sharp = (gumbel_softmax_sample(np.zeros((10**4, k)), 0.001, rng).max(axis=1) > 0.99).mean()
    smooth = (np.abs(gumbel_softmax_sample(np.zeros((10**4, k)), 100.0, rng) - 1 / k) < 0.05).all(axis=1).mean()
    ok = bool(z <= 3 and p_chi2 > 0.01 and sharp >= 0.99 and smooth >= 0.99)
    return SuiteResult(
        "sampler", ok,
        f"max |z| {z:.2f}; chi2 p {p_chi2:.3f}; sharp(tau=0.001) {sharp:.4f}; smooth(tau=100) {smooth:.4f}",
    )


def kl_gap(probs: np.ndarray) -> float:
    """Mean per-frame KL to uniform minus the KL of the mean posterior."""
    return float(np.mean(L.kl_categorical_uniform(probs)) - L.kl_categorical_uniform(probs.mean(axis=0)))


def jensen_suite(seed: int = 0, n_outputs: int = 100) -> SuiteResult:
    """Average posterior KL never falls below the KL of the average posterior."""
    rng = np.random.default_rng(seed)
    config = tiny_config(n_mixtures=6)
    worst = np.inf
    for i in range(n_outputs):
        params = M.init_params(config, seed * 1000 + i)
        x = rng.standard_normal((int(rng.integers(5, 30)), config.feat_dim)) * rng.uniform(0.5, 3.0)
        probs = M.tokenize_frames(params, x, "infer").probs.astype(np.float64)
        worst = min(worst, kl_gap(probs))
    equal_rows = np.tile(rng.dirichlet(np.ones(6)), (10, 1))
    eq_gap = kl_gap(equal_rows)
    ok = bool(worst > 0 and abs(eq_gap) < 1e-12)
    return SuiteResult("jensen", ok, f"min gap {worst:.3e}; equal-rows gap {eq_gap:.1e}")


SUITES = {
    "gradients": gradient_suite,
    "kl": kl_suite,
    "sampler": sampler_suite,
    "jensen": jensen_suite,
}


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [suite(seed) for suite in SUITES.values()]
