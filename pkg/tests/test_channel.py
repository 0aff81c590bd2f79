import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from airpca import channel as ch


def test_exponential_integral_against_quadrature():
    for x in [1e-6, 0.001, 0.2, 0.5, 1.0, 1.5, 3.0, 10.0, 40.0]:
        ref, _ = integrate.quad(lambda t: math.exp(-t) / t, x, np.inf, epsabs=0, epsrel=1e-13, limit=500)
        assert ch.exponential_integral(x) == pytest.approx(ref, rel=1e-10)
    assert ch.exponential_integral(0.2) == pytest.approx(1.22265, abs=1e-5)
    assert ch.exponential_integral(1.0) == pytest.approx(0.2193839, abs=1e-7)


def test_exponential_integral_precision_and_domain():
    grid = np.concatenate([np.geomspace(1e-8, 0.999, 40), np.linspace(1.0, 60, 40)])
    for x in grid:
        assert ch.exponential_integral(x) == pytest.approx(special.exp1(x), rel=1e-12)
    vals = [ch.exponential_integral(x) for x in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert ch.exponential_integral(800.0) == 0.0
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            ch.exponential_integral(bad)


def test_max_avg_receive_power():
    cfg = ch.ChannelConfig(M=1, G=1.0, sigma2=1.0, p_bar=1.0)
    assert ch.max_avg_receive_power(cfg) == pytest.approx(4.5582, abs=1e-4)
    double = ch.ChannelConfig(M=1, G=1.0, sigma2=1.0, p_bar=2.0)
    assert ch.max_avg_receive_power(double) == pytest.approx(2 * ch.max_avg_receive_power(cfg))
    grid = [ch.max_avg_receive_power(ch.ChannelConfig(M=10, G=g, sigma2=1.0, p_bar=1.0)) for g in np.geomspace(1e-6, 5, 30)]
    assert all(a < b for a, b in zip(grid, grid[1:]))


def test_config_units_and_validation():
    cfg = ch.ChannelConfig.from_dbm(M=1000, G=0.2, p_bar_dbm=26.0, noise_power_dbm=-100.0)
    assert cfg.p_bar == pytest.approx(398.107, rel=1e-5)
    assert cfg.sigma2 == pytest.approx(1e-10 / 1000)
    assert cfg.zeta_act == pytest.approx(0.8187307531)
    for kw in ({"G": 0.0}, {"p_bar": 0.0}, {"p_outage": 1.0}, {"M": 0}, {"sigma2": -1.0}):
        base = {"M": 1, "G": 0.2, "sigma2": 1.0, "p_bar": 1.0}
        with pytest.raises(ValueError):
            ch.ChannelConfig(**{**base, **kw})
    assert ch.mw_to_dbm(ch.dbm_to_mw(13.0)) == pytest.approx(13.0)


def test_vectorize_examples():
    v = ch.complex_vectorize(np.array([[1.5], [-2.0]]))
    np.testing.assert_array_equal(v, [1.5 - 2.0j])
    z = ch.complex_vectorize(np.zeros((3, 3)))
    assert z.shape == (5,) and not z.any()
    np.testing.assert_array_equal(ch.devectorize(np.zeros(5, complex), 3, 3), np.zeros((3, 3)))
    # column-major pairing
    g = np.array([[1.0, 3.0], [2.0, 4.0]])
    np.testing.assert_array_equal(ch.complex_vectorize(g), [1 + 2j, 3 + 4j])
    with pytest.raises(ValueError):
        ch.devectorize(np.zeros(4, complex), 3, 3)


@settings(max_examples=60, deadline=None)
@given(D=st.integers(1, 12), d=st.integers(1, 4), seed=st.integers(0, 10**6))
def test_vectorize_round_trip(D, d, seed):
    g = np.random.default_rng(seed).standard_normal((D, d))
    v = ch.complex_vectorize(g)
    assert v.shape == ((D * d + 1) // 2,)
    np.testing.assert_array_equal(ch.devectorize(v, D, d), g)


def test_normalization_examples():
    same = [np.full((2, 2), 3.0)] * 3
    s = ch.compute_normalization(same)
    assert s.eta == 3.0 and s.nu == ch.NU_FLOOR
    pm = [np.array([[1.0, -1.0]]), np.array([[-1.0, 1.0]])]
    s = ch.compute_normalization(pm)
    assert s.eta == 0.0 and s.nu == 1.0
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal((4, 3)) for _ in range(3)]
    flat = np.concatenate([g.ravel() for g in grads])
    mean = sum(flat) / flat.size
    std = math.sqrt(sum((flat - mean) ** 2) / flat.size)
    s = ch.compute_normalization(grads)
    assert s.eta == pytest.approx(mean, abs=1e-12) and s.nu == pytest.approx(std, abs=1e-12)
    with pytest.raises(ValueError):
        ch.compute_normalization([])


def test_sample_channel_basics():
    cfg = ch.ChannelConfig(M=10, G=1e-12, sigma2=1.0, p_bar=1.0)
    r = ch.sample_channel(cfg, 4, 50, rng=3)
    assert r.active_mask.all()
    np.testing.assert_array_equal(r.active_count, r.active_mask.sum(axis=0))
    r2 = ch.sample_channel(cfg, 4, 50, rng=3)
    np.testing.assert_array_equal(r.gains, r2.gains)
    np.testing.assert_array_equal(r.noise, r2.noise)
    with pytest.raises(ValueError):
        ch.sample_channel(cfg, 0, 5, rng=0)


def test_gain_variance_and_activation_frequency():
    cfg = ch.ChannelConfig(M=10, G=0.2, sigma2=1.0, p_bar=1.0)
    r = ch.sample_channel(cfg, 10, 100_000, rng=1)
    assert np.mean(np.abs(r.gains) ** 2) == pytest.approx(1.0, abs=0.01)
    n = r.active_mask.size
    p = math.exp(-0.2)
    assert abs(r.active_mask.mean() - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_active_count_is_binomial():
    K, G = 8, 0.2
    cfg = ch.ChannelConfig(M=10, G=G, sigma2=1.0, p_bar=1.0)
    counts = ch.sample_channel(cfg, K, 100_000, rng=7).active_count
    observed = np.bincount(counts, minlength=K + 1)
    expected = stats.binom.pmf(np.arange(K + 1), K, math.exp(-G)) * counts.size
    # pool sparse low bins so every expected count is >= 5
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_outage_silences_whole_devices():
    cfg = ch.ChannelConfig(M=10, G=0.2, sigma2=1.0, p_bar=1.0, p_outage=0.5)
    rng = np.random.default_rng(0)
    grads = np.ones((6, 3, 2))
    for _ in range(20):
        r = ch.sample_channel(cfg, 6, 3, rng)
        out = ch.transmit_and_aggregate(grads, ch.compute_normalization(grads), r, 1.0)
        dead = ~r.active_mask.any(axis=1)
        assert np.all(out.per_device_tx_power[dead] == 0)
        assert np.all(out.per_device_tx_power >= 0)


def test_noiseless_full_participation_is_exact():
    rng = np.random.default_rng(1)
    g = rng.standard_normal((5, 3))
    grads = np.stack([g] * 4)
    cfg = ch.ChannelConfig(M=10, G=1e-12, sigma2=0.0, p_bar=1.0)
    r = ch.sample_channel(cfg, 4, 8, rng)
    out = ch.transmit_and_aggregate(grads, ch.compute_normalization(grads), r, 0.7)
    np.testing.assert_allclose(out.noisy_gradient, g, rtol=1e-12, atol=1e-12)
    assert out.empty_elements == 0


def test_single_device_inversion():
    g = np.array([[0.3], [-1.2]])
    h = np.array([[0.4 - 0.9j]])
    real = ch.ChannelRealization(h, np.array([[True]]), np.zeros(1, complex), np.array([1]))
    out = ch.transmit_and_aggregate(g[None], ch.NormalizationStats(0.1, 0.5), real, 2.0)
    np.testing.assert_allclose(out.noisy_gradient, g, rtol=1e-14, atol=1e-15)
    assert out.per_device_tx_power[0] == pytest.approx(2.0 / abs(h[0, 0]) ** 2)


def test_empty_element_falls_back_to_eta(caplog):
    grads = np.ones((2, 2, 1)) * 4.0
    mask = np.array([[False], [False]])
    real = ch.ChannelRealization(np.ones((2, 1), complex), mask, np.zeros(1, complex), np.array([0]))
    with caplog.at_level(logging.DEBUG, logger="airpca.channel"):
        out = ch.transmit_and_aggregate(grads, ch.NormalizationStats(1.5, 1.0), real, 1.0)
    np.testing.assert_array_equal(out.noisy_gradient, [[1.5], [1.5]])
    assert out.empty_elements == 1
    assert "no active device" in caplog.text


def test_nu_below_floor_warns(caplog):
    grads = np.ones((1, 2, 1))
    real = ch.ChannelRealization(np.ones((1, 1), complex), np.array([[True]]), np.zeros(1, complex), np.array([1]))
    out = ch.transmit_and_aggregate(grads, ch.NormalizationStats(1.0, 0.0), real, 1.0)
    np.testing.assert_allclose(out.noisy_gradient, grads[0])
    assert "below floor" in caplog.text


def test_transmit_validation():
    grads = np.ones((2, 2, 1))
    cfg = ch.ChannelConfig(M=10, G=0.2, sigma2=1.0, p_bar=1.0)
    r = ch.sample_channel(cfg, 3, 1, rng=0)
    with pytest.raises(ValueError):
        ch.transmit_and_aggregate(grads, ch.NormalizationStats(0, 1), r, 1.0)
    r = ch.sample_channel(cfg, 2, 1, rng=0)
    with pytest.raises(ValueError):
        ch.transmit_and_aggregate(grads, ch.NormalizationStats(0, 1), r, 0.0)


def noise_samples(p_rx, rounds, K=5, c=4, seed=0, sigma2=0.3):
    """Channel-noise-only samples: identical gradients remove the data noise."""
    rng = np.random.default_rng(seed)
    D, d = 2 * c, 1
    g = rng.standard_normal((D, d))
    grads = np.stack([g] * K)
    stats_ = ch.NormalizationStats(0.2, 1.7)
    cfg = ch.ChannelConfig(M=10, G=0.2, sigma2=sigma2, p_bar=1.0)
    xi, counts = [], []
    for _ in range(rounds):
        r = ch.sample_channel(cfg, K, c, rng)
        out = ch.transmit_and_aggregate(grads, stats_, r, p_rx)
        xi.append(ch.complex_vectorize(out.combined_noise))
        counts.append(r.active_count)
    return np.concatenate(xi), np.concatenate(counts), stats_.nu, sigma2


def test_conditional_noise_variance():
    p_rx = 0.8
    xi, k, nu, sigma2 = noise_samples(p_rx, 20_000)
    for kk in (3, 4, 5):
        sel = xi[k == kk]
        theory = nu**2 * sigma2 / (kk**2 * p_rx)
        assert np.mean(np.abs(sel) ** 2) == pytest.approx(theory, rel=0.03)


def test_noise_variance_scales_inversely_with_power():
    a, ka, nu, s2 = noise_samples(1.0, 10_000, seed=1)
    b, kb, _, _ = noise_samples(0.5, 10_000, seed=2)
    va = np.mean(np.abs(a[ka > 0]) ** 2 * ka[ka > 0] ** 2)
    vb = np.mean(np.abs(b[kb > 0]) ** 2 * kb[kb > 0] ** 2)
    assert vb / va == pytest.approx(2.0, rel=0.05)


def test_aggregate_is_unbiased():
    rng = np.random.default_rng(4)
    K, D, d = 5, 4, 2
    grads = rng.standard_normal((K, D, d))
    g = grads.mean(axis=0)
    stats_ = ch.compute_normalization(grads)
    cfg = ch.ChannelConfig(M=10, G=0.05, sigma2=0.1, p_bar=1.0)
    c = D * d // 2
    est = np.array(
        [ch.transmit_and_aggregate(grads, stats_, ch.sample_channel(cfg, K, c, rng), 1.0).noisy_gradient for _ in range(20_000)]
    )
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - g) <= 3 * se + 1e-12)


def test_mean_transmit_power_respects_budget():
    cfg = ch.ChannelConfig.from_dbm(M=1000, G=0.2, p_bar_dbm=26.0, noise_power_dbm=-100.0)
    p_max = ch.max_avg_receive_power(cfg)
    rng = np.random.default_rng(5)
    K, c = 4, 8
    grads = rng.standard_normal((K, 4, 4))
    stats_ = ch.compute_normalization(grads)
    power = np.mean(
        [ch.transmit_and_aggregate(grads, stats_, ch.sample_channel(cfg, K, c, rng), p_max).per_device_tx_power for _ in range(20_000)],
        axis=0,
    )
    assert np.all(power <= 1.01 * cfg.p_bar)
    assert power.mean() == pytest.approx(cfg.p_bar, rel=0.01)
