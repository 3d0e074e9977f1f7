import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stableavg.errors import ParameterError, ResourceError
from stableavg.stable_noise import (
    ModeSpectrum, NoisePath, SeedLineage, StableParams, check_assumptions, generate_noise_path,
    hill_estimator, increment_scales, levy_constant, mix_seed, ou_increment_scale, sample_sas,
    sampler_check, sas_cdf, sas_quantile, split_step_check, standard_sas,
    stochastic_convolution, tail_constant)
from stableavg.stats import quantile_se


def test_empty_sample(rng):
    assert sample_sas(StableParams(1.5), 0, rng).shape == (0,)


@pytest.mark.parametrize("alpha", [1.0, 0.5, 2.01])
def test_alpha_out_of_range(alpha):
    with pytest.raises(ParameterError):
        StableParams(alpha)


def test_scale_must_be_positive():
    with pytest.raises(ParameterError):
        StableParams(1.5, 0.0)


def test_gaussian_limit_variance(rng):
    x = sample_sas(StableParams(2.0), 10**6, rng)
    assert abs(x.var() - 2.0) < 0.04
    # against numpy's own normal sampler with variance 2
    ref = rng.normal(0.0, math.sqrt(2.0), 10**6)
    assert abs(np.quantile(x, 0.9) - np.quantile(ref, 0.9)) < 0.02


def test_cdf_matches_scipy_levy_stable():
    # scipy's S1 parametrisation with beta = 0 has cf exp(-|u|^alpha)
    for alpha in (1.3, 1.75):
        for x in (-2.0, 0.4, 1.5, 5.0):
            assert sas_cdf(x, alpha) == pytest.approx(
                stats.levy_stable.cdf(x, alpha, 0.0), abs=2e-6)


def test_cdf_gaussian_limit():
    for x in (-1.0, 0.3, 2.2):
        assert sas_cdf(x, 2.0) == pytest.approx(stats.norm.cdf(x, scale=math.sqrt(2)), abs=1e-9)


def test_quantile_inverts_cdf():
    for p in (0.05, 0.3, 0.5, 0.8, 0.99):
        q = sas_quantile(p, 1.6)
        assert sas_cdf(q, 1.6) == pytest.approx(p, abs=1e-9)


def test_samples_follow_cdf(rng):
    x = standard_sas(1.6, 200_000, rng)
    for t in (-3.0, -0.5, 0.7, 4.0):
        p = sas_cdf(t, 1.6)
        se = math.sqrt(p * (1 - p) / x.size)
        assert abs(np.mean(x <= t) - p) < 4 * se


def test_levy_constant_tail():
    # P(S > x) ~ tail_constant x^-alpha far out; scipy's sf as an independent oracle
    alpha = 1.5
    x = 200.0
    assert stats.levy_stable.sf(x, alpha, 0.0) == pytest.approx(
        tail_constant(alpha) * x**-alpha, rel=0.02)
    assert levy_constant(2.0) == 0.0


def test_scaling_property(rng):
    a = sample_sas(StableParams(1.7, 3.0), 100_000, rng)
    b = 3.0 * sample_sas(StableParams(1.7, 1.0), 100_000, rng)
    for p in (0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99):
        tol = 4 * math.hypot(quantile_se(a, p), quantile_se(b, p))
        assert abs(np.quantile(a, p) - np.quantile(b, p)) < tol


def test_hill_on_exact_pareto(rng):
    u = rng.random(10**6)
    x = u ** (-1.0 / 1.5)
    assert hill_estimator(x, 10_000) == pytest.approx(1.5, abs=0.05)


def test_hill_rejects_bad_k():
    with pytest.raises(ParameterError):
        hill_estimator(np.ones(10), 10)


@pytest.mark.xfail(strict=True, reason="top-1% Hill at n=1e6 is biased upward by the "
                   "near-Gaussian bulk for alpha near 2; measured about 1.88 at alpha=1.75")
def test_hill_top_percent_alpha_175():
    x = standard_sas(1.75, 10**6, SeedLineage(7, 1, "sampler").rng())
    assert abs(hill_estimator(x, 10**4) - 1.75) <= 0.1


@pytest.mark.xfail(strict=True, reason="log-log slope of the survival function over the top "
                   "decile still sees the bulk and is far steeper than -alpha")
def test_tail_slope_top_decile():
    x = np.sort(np.abs(standard_sas(1.75, 10**6, SeedLineage(7, 1, "sampler").rng())))
    n = x.size
    top = x[int(0.9 * n):-1]
    surv = 1.0 - np.arange(int(0.9 * n), n - 1) / n
    slope = np.polyfit(np.log(top), np.log(surv), 1)[0]
    assert abs(slope + 1.75) <= 0.1


def test_sampler_check_reports_deciles(rng):
    res = sampler_check(1.75, 200_000, rng)
    assert res["k"] == math.isqrt(200_000)
    assert [q["p"] for q in res["quantiles"]] == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert all(q["rel_err"] < 0.05 for q in res["quantiles"] if q["exact"] != 0)


def test_ou_scale_small_dt():
    s = ou_increment_scale(1.0, 1.0, 1.75, 1e-4)
    assert s == pytest.approx(1e-4 ** (1 / 1.75), rel=0.01)


def test_ou_scale_gaussian_oracle():
    assert ou_increment_scale(1.0, 1.0, 2.0, 1.0) == pytest.approx(
        math.sqrt((1 - math.exp(-2)) / 2), abs=5e-6)
    # the quoted rounded value 0.65745; the exact one is 0.657519...
    assert ou_increment_scale(1.0, 1.0, 2.0, 1.0) == pytest.approx(0.65745, abs=1e-4)


def test_ou_scale_stationary_limit():
    assert ou_increment_scale(3.0, 2.0, 1.6, 50.0) == pytest.approx(2.0 * (1.6 * 3.0) ** (-1 / 1.6))


def test_ou_scale_rejects_bad_input():
    with pytest.raises(ParameterError):
        ou_increment_scale(0.0, 1.0, 1.5, 0.1)
    with pytest.raises(ParameterError):
        ou_increment_scale(1.0, 1.0, 1.5, 0.0)


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(0.01, 100), dt=st.floats(1e-4, 5), alpha=st.floats(1.05, 2.0))
def test_ou_scale_composes_over_half_steps(lam, dt, alpha):
    # a stable sum: s(dt)^a = (e^{-lam dt/2} s(dt/2))^a + s(dt/2)^a
    full = ou_increment_scale(lam, 1.0, alpha, dt)
    half = ou_increment_scale(lam, 1.0, alpha, dt / 2)
    assert full**alpha == pytest.approx((math.exp(-lam * dt / 2) * half) ** alpha + half**alpha,
                                        rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(lam=st.floats(0.01, 100), alpha=st.floats(1.05, 2.0),
       dt=st.floats(1e-4, 10), factor=st.floats(1.01, 3))
def test_ou_scale_increasing_and_bounded(lam, alpha, dt, factor):
    a = ou_increment_scale(lam, 1.0, alpha, dt)
    b = ou_increment_scale(lam, 1.0, alpha, dt * factor)
    assert a <= b * (1 + 1e-12)
    assert b <= (alpha * lam) ** (-1 / alpha) * (1 + 1e-12)
    if alpha * lam * dt < 20:
        assert a < b


def test_fast_stationary_scale_free_of_epsilon(heat):
    for eps in (0.5, 0.05, 0.001):
        s = increment_scales(heat, "fast", 1.75, 1e3, eps)
        np.testing.assert_allclose(s, heat.gamma * (1.75 * heat.lam) ** (-1 / 1.75))


def test_slow_requires_unit_epsilon(heat):
    with pytest.raises(ParameterError):
        increment_scales(heat, "slow", 1.75, 0.1, 0.5)


def test_noise_path_deterministic(heat):
    lin = SeedLineage(3, 2, "slow")
    a = generate_noise_path(heat, "slow", 0.01, 50, lin, 1.75)
    b = generate_noise_path(heat, "slow", 0.01, 50, lin, 1.75)
    assert np.array_equal(a.increments, b.increments)
    c = generate_noise_path(heat, "slow", 0.01, 50, SeedLineage(3, 3, "slow"), 1.75)
    assert not np.array_equal(a.increments, c.increments)


def test_noise_path_empty_and_readonly(heat):
    p = generate_noise_path(heat, "slow", 0.01, 0, SeedLineage(1), 1.75)
    assert p.increments.shape == (0, 8)
    q = generate_noise_path(heat, "slow", 0.01, 3, SeedLineage(1), 1.75)
    with pytest.raises(ValueError):
        q.increments[0, 0] = 1.0


def test_noise_path_rejects_nonfinite():
    with pytest.raises(ParameterError):
        NoisePath(0.1, np.array([[np.nan]]))


def test_noise_path_budget(heat):
    with pytest.raises(ResourceError):
        generate_noise_path(heat, "slow", 0.01, 10**6, SeedLineage(1), 1.75, memory_budget=1000)


def test_noise_binary_roundtrip(heat, tmp_path):
    p = generate_noise_path(heat, "fast", 0.001, 17, SeedLineage(5), 1.75, epsilon=0.1)
    data = p.to_bytes()
    assert len(data) == 32 + 17 * 8 * 8
    assert data[:8] == b"SASNOISE"
    q = NoisePath.from_bytes(data)
    assert q.dt == p.dt and np.array_equal(q.increments, p.increments)
    p.save(tmp_path / "n.bin")
    assert np.array_equal(NoisePath.load(tmp_path / "n.bin").increments, p.increments)
    # body is plain little-endian row-major float64
    body = np.frombuffer(data[32:], dtype="<f8").reshape(17, 8)
    assert np.array_equal(body, p.increments)


def test_noise_binary_rejects_garbage():
    with pytest.raises(ParameterError):
        NoisePath.from_bytes(b"NOTNOISE" + bytes(24))
    with pytest.raises(ParameterError):
        NoisePath.from_bytes(b"short")


def test_convolution_stationary():
    sp = ModeSpectrum([1.0], [1.0], [1.0])
    p = generate_noise_path(sp, "slow", 0.01, 10**5, SeedLineage(9), 1.75)
    v = stochastic_convolution(sp, p)[:, 0]
    # median |v| of the stationary law, from the exact cdf
    target = sas_quantile(0.75, 1.75, (1.75) ** (-1 / 1.75))
    a = np.abs(v[1000:])
    first, second = np.median(a[: a.size // 2]), np.median(a[a.size // 2:])
    assert np.median(a) == pytest.approx(target, rel=0.1)
    assert second / first == pytest.approx(1.0, abs=0.2)


def test_split_step_passes(heat, rng):
    rows = split_step_check(heat, 1.75, 0.01, 50_000, rng)
    assert len(rows) == 19 * 8
    assert sum(not r["ok"] for r in rows) <= 3


def test_mix_seed_distinct():
    seeds = {mix_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000


def test_assumptions_heat_preset_green(heat):
    rep = check_assumptions(heat, 1.75, r_hint=0.35, holder_min=0.9025)
    assert rep.ok, rep.flags
    assert rep.gamma_index == pytest.approx(1.75 / (1.75 * 0.35 + 1))


def test_assumptions_flat_beta_diverges():
    n = np.arange(1, 9, dtype=float)
    sp = ModeSpectrum(n**2, np.ones(8), np.ones(8))
    rep = check_assumptions(sp, 1.75)
    assert not rep.flags["sum_beta_alpha_converges"]


def test_assumptions_kappa1_too_large(heat):
    kmax = (1.75 - 1.75 * 0.35 - 1) / 1.75
    rep = check_assumptions(heat, 1.75, kappa1=kmax + 1e-3, r_hint=0.35)
    assert not rep.flags["integral_Lambda3_finite"]
    # numerical oracle: int_0^1 t^-(r + kappa1 + 1/alpha) dt over shrinking lower limits grows
    e = 0.35 + kmax + 1e-3 + 1 / 1.75
    vals = [(1 - a ** (1 - e)) / (1 - e) for a in (1e-4, 1e-8, 1e-16)]
    assert vals[2] > vals[1] > vals[0]


def test_assumption_sums_monotone_in_truncation():
    prev = None
    for n in (4, 8, 16):
        rep = check_assumptions(ModeSpectrum.heat(n, 0.35), 1.75, r_hint=0.35)
        cur = (rep.sum_beta_alpha, rep.sum_gamma_alpha, rep.sum_inv_lambda)
        if prev:
            assert all(c >= p for c, p in zip(cur, prev))
        prev = cur
