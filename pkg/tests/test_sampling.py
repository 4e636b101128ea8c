import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from mfae import autodiff as ad
from mfae.errors import ConfigError, NonFiniteError
from mfae.sampling import (
    GumbelConfig,
    gumbel_max_sample,
    gumbel_noise,
    gumbel_softmax,
    gumbel_softmax_sample,
    stream,
)

logit_arrays = arrays(np.float64, st.integers(2, 10), elements=st.floats(-20, 20, allow_nan=False))


class TestGumbelNoise:
    def test_moments(self, rng):
        g = gumbel_noise(10**6, rng)
        assert abs(g.mean() - np.euler_gamma) < 0.01
        assert abs(g.var() - np.pi**2 / 6) < 0.02

    def test_ks_against_scipy(self, rng):
        assert stats.kstest(gumbel_noise(20000, rng), stats.gumbel_r.cdf).pvalue > 0.01

    def test_clamped_uniforms_stay_finite(self):
        class Extreme:
            def uniform(self, size):
                return np.array([0.0, 1.0])

        assert np.all(np.isfinite(gumbel_noise(2, Extreme())))


class TestGumbelMax:
    def test_dominant_logit(self, rng):
        draws = gumbel_max_sample(np.broadcast_to([100.0, 0.0, 0.0], (10**4, 3)), rng)
        assert draws[:, 0].mean() > 0.999

    def test_uniform_frequencies(self, rng):
        n, k = 10**5, 8
        freq = gumbel_max_sample(np.zeros((n, k)), rng).mean(axis=0)
        sigma = np.sqrt((1 / k) * (1 - 1 / k) / n)
        assert np.all(np.abs(freq - 1 / k) <= 3 * sigma)

    @settings(max_examples=50, deadline=None)
    @given(z=logit_arrays, c=st.floats(-100, 100), seed=st.integers(0, 2**16))
    def test_shift_invariance(self, z, c, seed):
        noise = gumbel_noise(z.shape, np.random.default_rng(seed))
        np.testing.assert_array_equal(gumbel_max_sample(z, None, noise), gumbel_max_sample(z + c, None, noise))

    @settings(max_examples=50, deadline=None)
    @given(z=logit_arrays, seed=st.integers(0, 2**16))
    def test_raw_logits_equal_log_probs(self, z, seed):
        noise = gumbel_noise(z.shape, np.random.default_rng(seed))
        log_pi = ad.log_softmax(ad.as_tensor(z[None])).data[0]
        np.testing.assert_array_equal(gumbel_max_sample(z, None, noise), gumbel_max_sample(log_pi, None, noise))

    def test_one_hot(self, rng):
        out = gumbel_max_sample(rng.standard_normal((50, 6)), rng)
        np.testing.assert_array_equal(out.sum(axis=1), 1.0)
        assert set(np.unique(out)) == {0.0, 1.0}

    def test_non_finite_logits(self, rng):
        with pytest.raises(NonFiniteError):
            gumbel_max_sample([0.0, np.nan], rng)


class TestGumbelSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(z=logit_arrays, tau=st.floats(1e-3, 100), seed=st.integers(0, 2**16))
    def test_on_simplex(self, z, tau, seed):
        y = gumbel_softmax_sample(z, tau, np.random.default_rng(seed))
        assert np.all(y >= 0)
        assert abs(y.sum() - 1.0) < 1e-6

    def test_smooth_at_high_temperature(self, rng):
        y = gumbel_softmax_sample(np.zeros((10**4, 8)), 100.0, rng)
        assert (np.abs(y - 1 / 8) < 0.05).all(axis=1).mean() >= 0.99

    def test_sharpness_grows_as_tau_falls(self, rng):
        noise = gumbel_noise((10**4, 8), rng)
        fractions = [(gumbel_softmax_sample(np.zeros((10**4, 8)), tau, None, noise).max(axis=1) > 0.99).mean()
                     for tau in (0.1, 0.01, 0.001)]
        assert fractions[0] < fractions[1] < fractions[2]
        assert fractions[2] >= 0.99

    def test_argmax_matches_gumbel_max_for_shared_noise(self, rng):
        z = rng.standard_normal((1000, 8))
        noise = gumbel_noise(z.shape, rng)
        soft = gumbel_softmax_sample(z, 0.01, None, noise).argmax(axis=1)
        np.testing.assert_array_equal(soft, gumbel_max_sample(z, None, noise).argmax(axis=1))

    def test_chi2_against_gumbel_max(self, rng):
        logits = rng.standard_normal(8)
        n = 10**5
        hard = np.bincount(gumbel_max_sample(np.broadcast_to(logits, (n, 8)), rng).argmax(axis=1), minlength=8)
        soft = np.bincount(gumbel_softmax_sample(np.broadcast_to(logits, (n, 8)), 0.01, rng).argmax(axis=1), minlength=8)
        assert stats.chi2_contingency(np.stack([hard, soft])).pvalue > 0.01

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, rng, tau):
        with pytest.raises(ConfigError):
            gumbel_softmax_sample([0.0, 1.0], tau, rng)
        with pytest.raises(ConfigError):
            GumbelConfig(tau=tau)

    def test_graph_matches_array_version(self, rng):
        z = rng.standard_normal((6, 4))
        noise = gumbel_noise(z.shape, rng)
        np.testing.assert_allclose(gumbel_softmax(ad.as_tensor(z), 0.3, noise).data,
                                   gumbel_softmax_sample(z, 0.3, None, noise), rtol=1e-12)

    @pytest.mark.parametrize("tau", [0.1, 1.0, 5.0])
    def test_gradient_with_frozen_noise(self, rng, tau):
        # keep (z + g) / tau of order one: saturated rows have gradients near
        # 1e-9 where central differences are dominated by roundoff
        scale = min(tau, 1.0)
        z = rng.standard_normal((5, 4)) * scale
        noise = gumbel_noise(z.shape, rng) * scale
        w = rng.standard_normal(z.shape)
        f = lambda p: ad.sum(ad.mul(gumbel_softmax(p["z"], tau, noise), ad.as_tensor(w)))
        assert ad.check_gradients(f, {"z": z}, n_probe=20) < 1e-4


class TestStreams:
    def test_reproducible(self):
        np.testing.assert_array_equal(stream(3, 1).uniform(size=5), stream(3, 1).uniform(size=5))

    def test_keys_separate_streams(self):
        assert not np.array_equal(stream(3, 1).uniform(size=5), stream(3, 2).uniform(size=5))
        assert not np.array_equal(stream(3, 1).uniform(size=5), stream(4, 1).uniform(size=5))
