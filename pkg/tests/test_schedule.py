"""Schedule identities, depth-sample statistics, guidance, and the reverse step."""

from __future__ import annotations

import numpy as np
import pytest

from mvrgbd import schedule as sch
from mvrgbd.errors import InvalidBounds, ShapeMismatch, StepOutOfRange


def test_linear_schedule_identities():
    s = sch.linear_schedule()
    assert s.T == 100
    assert s.beta[0] == pytest.approx(1e-3) and s.beta[-1] == pytest.approx(0.2)
    # alpha_bar: strictly decreasing, in (0, 1), product identity at every t
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    prod = 1.0
    for t in range(1, s.T + 1):
        prod *= 1.0 - s.beta[t - 1]
        assert s.abar(t) == pytest.approx(prod, rel=1e-12)
    # terminal signal is tiny: sampling can start from pure noise
    assert s.abar(s.T) < 1e-4
    assert s.abar_prev(1) == 1.0
    assert s.abar_prev(5) == s.abar(4)


def test_step_range_checks():
    s = sch.linear_schedule(T=10)
    with pytest.raises(StepOutOfRange):
        s.abar(0)
    with pytest.raises(StepOutOfRange):
        s.abar(11)
    with pytest.raises(ValueError):
        sch.NoiseSchedule(np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        sch.NoiseSchedule(np.array([]))


def test_forward_noise_formula_and_moments():
    s = sch.linear_schedule()
    x0 = np.full((8, 8), 0.7)
    eps = np.zeros((8, 8))
    t = 40
    np.testing.assert_allclose(sch.forward_noise(x0, t, eps, s), np.sqrt(s.abar(t)) * 0.7)
    # Monte-Carlo: mean and variance of x_t match sqrt(abar)*x0, 1-abar within 3 SE
    rng = np.random.default_rng(200)
    n = 20000
    draws = sch.forward_noise(np.full(n, 0.7), t, rng.standard_normal(n), s)
    abar = s.abar(t)
    se_mean = np.sqrt(1 - abar) / np.sqrt(n)
    assert abs(draws.mean() - np.sqrt(abar) * 0.7) < 3 * se_mean
    var = draws.var(ddof=1)
    se_var = (1 - abar) * np.sqrt(2.0 / (n - 1))
    assert abs(var - (1 - abar)) < 3 * se_var
    with pytest.raises(ShapeMismatch):
        sch.forward_noise(np.zeros(3), 1, np.zeros(4), s)


def test_expected_depth_is_unbiased():
    s = sch.linear_schedule()
    rng = np.random.default_rng(201)
    d0 = 1.8
    t = 55
    n = 20000
    d_t = sch.forward_noise(np.full(n, d0), t, rng.standard_normal(n), s)
    est = sch.expected_depth(d_t, t, s)
    se = np.sqrt((1 - s.abar(t)) / s.abar(t)) / np.sqrt(n)
    assert abs(est.mean() - d0) < 3 * se


def test_depth_sigma_forms():
    s = sch.linear_schedule()
    p_rec = sch.DepthSampleParams(k=2.0)
    p_ver = sch.DepthSampleParams(k=2.0, schedule_form=sch.ScheduleForm.VERBATIM)
    for t in (1, 37, 100):
        abar = s.abar(t)
        ratio = np.sqrt(abar) / np.sqrt(1 - abar)
        assert sch.depth_sigma(t, p_ver, s) == pytest.approx(2.0 * ratio, rel=1e-12)
        assert sch.depth_sigma(t, p_rec, s) == pytest.approx(2.0 / ratio, rel=1e-12)
    # reciprocal spread tightens as denoising proceeds (t decreasing)
    assert sch.depth_sigma(1, p_rec, s) < sch.depth_sigma(100, p_rec, s)


def test_sample_depths_statistics_and_clamping():
    s = sch.linear_schedule()
    params = sch.DepthSampleParams(k=0.5, D=3)
    rng = np.random.default_rng(202)
    t = 30
    d0 = 2.0
    d_t = np.full(4000, np.sqrt(s.abar(t)) * d0)  # noiseless depth channel
    out = sch.sample_depths(d_t, t, params, s, rng, near=-10.0, far=10.0)
    assert out.shape == (4000, 3)
    sigma = sch.depth_sigma(t, params, s)
    n = out.size
    assert abs(out.mean() - d0) < 3 * sigma / np.sqrt(n)
    assert abs(out.std(ddof=1) - sigma) / sigma < 0.05
    # clamping
    clamped = sch.sample_depths(d_t, t, params, s, np.random.default_rng(0), 1.9, 2.1)
    assert clamped.min() >= 1.9 and clamped.max() <= 2.1
    with pytest.raises(InvalidBounds):
        sch.sample_depths(d_t, t, params, s, rng, 2.0, 2.0)


def test_sample_depths_unit_agnostic():
    # scaling depths and bounds by c scales the distance-to-center by c as well
    s = sch.linear_schedule()
    params = sch.DepthSampleParams(k=0.5, D=2)
    t = 20
    d_t = np.array([0.3, 0.9])
    a = sch.sample_depths(d_t, t, params, s, np.random.default_rng(7), -10.0, 10.0)
    center = sch.expected_depth(d_t, t, s)[..., None]
    # same draws, scaled units: deltas are identical because sigma depends on t only
    b = sch.sample_depths(d_t, t, params, s, np.random.default_rng(7), -100.0, 100.0)
    np.testing.assert_allclose(b, a, atol=1e-12)
    assert np.all(np.abs(a - center) > 0)


def test_cfg_combine():
    rng = np.random.default_rng(203)
    c, u = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    np.testing.assert_allclose(sch.cfg_combine(c, u, 1.0), c)
    np.testing.assert_allclose(sch.cfg_combine(c, c, 3.3), c)
    np.testing.assert_allclose(sch.cfg_combine(c, u, 2.0), 2 * c - u)
    with pytest.raises(ShapeMismatch):
        sch.cfg_combine(np.zeros(3), np.zeros(4), 2.0)


def test_ancestral_step_inverts_forward_with_true_noise():
    """Walking T..1 with the exact noise and no injected randomness recovers x0."""
    s = sch.linear_schedule(T=50)
    rng = np.random.default_rng(204)
    x0 = rng.standard_normal((4, 4))
    eps = rng.standard_normal((4, 4))
    x = sch.forward_noise(x0, s.T, eps, s)
    for t in range(s.T, 0, -1):
        # true eps consistent with x_t at this step
        abar = s.abar(t)
        eps_t = (x - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
        x = sch.ancestral_step(x, eps_t, t, s, rng=None)
    np.testing.assert_allclose(x, x0, atol=1e-9)


def test_ancestral_step_noise_variance():
    s = sch.linear_schedule()
    t = 60
    rng = np.random.default_rng(205)
    x_t = np.zeros(30000)
    eps = np.zeros(30000)
    out = sch.ancestral_step(x_t, eps, t, s, rng)
    var = s.posterior_variance(t)
    assert abs(out.var(ddof=1) - var) / var < 0.05
    # t=1 and rng=None are both noiseless
    assert np.array_equal(sch.ancestral_step(x_t, eps, 1, s, rng), np.zeros(30000))
    assert np.array_equal(sch.ancestral_step(x_t, eps, t, s, None), np.zeros(30000))


def test_posterior_variance_below_beta():
    s = sch.linear_schedule()
    for t in range(2, s.T + 1):
        assert 0 < s.posterior_variance(t) < s.beta[t - 1]
    assert s.posterior_variance(1) == 0.0
