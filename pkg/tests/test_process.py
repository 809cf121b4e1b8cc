import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrestore.process import (KINDS, denoise_to_x0, drift_diffusion, kernel_moments, make_process, prior_sample,
                                 sample_kernel)


def linear_drift_coeff(process, tau):
    """Coefficient c(tau) in drift = c * x + (terms in y)."""
    return float(process.drift(np.array([1.0]), tau, np.array([0.0]) if process.requires_y else None)[0])


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("tau", [0.05, 0.2, 0.5, 0.9])
def test_moments_solve_the_moment_odes(kind, tau):
    # dm/dtau = c m + (drift at x = 0),  dvar/dtau = 2 c var + g^2
    p = make_process(kind)
    h = 1e-6
    x0, y = 0.8, -0.4
    yv = np.array(y) if p.requires_y else None

    def mean(t):
        return float(kernel_moments(p, np.array(x0), yv, t).mean)

    def var(t):
        return float(p.sigma(t)) ** 2

    c = linear_drift_coeff(p, tau)
    offset = float(p.drift(np.array([0.0]), tau, np.array([y]) if p.requires_y else None)[0])
    dm = (mean(tau + h) - mean(tau - h)) / (2 * h)
    dv = (var(tau + h) - var(tau - h)) / (2 * h)
    assert dm == pytest.approx(c * mean(tau) + offset, rel=1e-6, abs=1e-8)
    assert dv == pytest.approx(2 * c * var(tau) + float(p.diffusion(tau)) ** 2, rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("kind", KINDS)
def test_kernel_starts_at_the_clean_signal(kind):
    p = make_process(kind)
    y = np.array([3.0]) if p.requires_y else None
    m = kernel_moments(p, np.array([1.5]), y, 0.0)
    assert m.std == 0.0
    np.testing.assert_array_equal(m.mean, [1.5])
    out = sample_kernel(p, np.array([1.5]), y, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, [1.5])


@pytest.mark.parametrize("kind", ["ve", "vp", "ouve"])
def test_sigma_is_increasing(kind):
    p = make_process(kind)
    s = p.sigma(np.linspace(0, p.T, 500))
    assert np.all(np.diff(s) > 0)


def test_bridge_variance_vanishes_at_both_ends():
    p = make_process("bbed")
    assert float(p.sigma(0.0)) == 0.0 and float(p.sigma(p.T)) == 0.0
    assert p.tau_max == pytest.approx(p.T - p.tau_eps)
    a, b = p.coefficients(p.T)
    assert (float(a), float(b)) == (0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(kind=st.sampled_from(["ve", "vp", "ouve"]), frac=st.floats(0.01, 0.99))
def test_sigma_inverse_round_trip(kind, frac):
    p = make_process(kind)
    tau = frac * p.T
    assert p.sigma_inverse(float(p.sigma(tau))) == pytest.approx(tau, rel=1e-8)


@settings(max_examples=50, deadline=None)
@given(kind=st.sampled_from(KINDS), frac=st.floats(0.01, 0.95),
       x0=st.floats(-5, 5), y=st.floats(-5, 5), x=st.floats(-10, 10))
def test_tweedie_recovers_point_mass(kind, frac, x0, y, x):
    # the score of a point-mass prior pushed through the kernel is -(x - mean) / sigma^2
    p = make_process(kind)
    tau = frac * p.T
    yv = np.array([y]) if p.requires_y else None
    m = kernel_moments(p, np.array([x0]), yv, tau)
    score = -(np.array([x]) - m.mean) / m.std**2
    est = denoise_to_x0(p, np.array([x]), score, tau, yv)
    assert float(est[0]) == pytest.approx(x0, abs=1e-6 * (1 + abs(x) + abs(y)) / float(p.coefficients(tau)[0]))


def test_task_adapted_processes_require_y():
    p = make_process("ouve")
    with pytest.raises(ValueError, match="requires"):
        kernel_moments(p, np.zeros(3), None, 0.5)
    with pytest.raises(ValueError, match="takes no y"):
        kernel_moments(make_process("ve"), np.zeros(3), np.zeros(3), 0.5)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        make_process("cosine")
    with pytest.raises(ValueError):
        make_process("ve", sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        make_process("ve", not_a_param=1.0)
    p = make_process("ve")
    with pytest.raises(ValueError):
        kernel_moments(p, np.zeros(2), None, 1.5)
    with pytest.raises(ValueError):
        drift_diffusion(p, np.array([np.nan]), 0.5)
    with pytest.raises(ValueError, match="singular"):
        drift_diffusion(make_process("bbed"), np.zeros(2), 1.0, np.zeros(2))
    with pytest.raises(ValueError):
        prior_sample(p, 4)


def test_prior_sample_shape_and_centre():
    p = make_process("ouve")
    y = np.full(4, 2.0)
    x = prior_sample(p, (5000, 4), y, np.random.default_rng(0))
    assert x.shape == (5000, 4)
    assert abs(x.mean() - 2.0) < 0.05
    assert x.std() == pytest.approx(float(p.sigma(p.T)), rel=0.05)


def test_drift_examples():
    p = make_process("ouve")
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(drift_diffusion(p, x, 0.4, x)[0], 0.0)
    np.testing.assert_array_equal(drift_diffusion(make_process("ve"), x, 0.4)[0], 0.0)


def test_ouve_mean_closed_form():
    p = make_process("ouve", gamma=1.5)
    m = kernel_moments(p, np.array([1.0]), np.array([0.0]), 1.0)
    assert float(m.mean[0]) == pytest.approx(np.exp(-1.5), rel=1e-14)


@pytest.mark.parametrize("kind", KINDS)
def test_kernel_collapses_near_zero_and_endpoints_interpolate(kind):
    p = make_process(kind)
    x0, y = np.array([1.0]), np.array([-2.0])
    yv = y if p.requires_y else None
    m = kernel_moments(p, x0, yv, p.tau_eps)
    assert abs(float(m.mean[0]) - 1.0) < 0.01 and m.std < 0.1
    if kind != "bbed":
        assert float(p.sigma(p.tau_eps)) < 0.1 * float(p.sigma(p.T))
    if p.requires_y:
        end = float(kernel_moments(p, x0, yv, p.T).mean[0])
        bound = 0.0 if kind == "bbed" else np.exp(-p.params["gamma"] * p.T) * 3.0
        assert abs(end - y[0]) <= bound + 1e-15


def test_sample_kernel_statistics_and_determinism():
    p = make_process("vp")
    x0 = np.zeros(100_000)
    a = sample_kernel(p, x0, None, 0.4, np.random.default_rng(5))
    b = sample_kernel(p, x0, None, 0.4, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.std() == pytest.approx(float(p.sigma(0.4)), rel=0.01)


def test_prior_sample_examples():
    ve = make_process("ve", sigma_max=10.0)
    x = prior_sample(ve, (100_000,), None, np.random.default_rng(0))
    assert x.std() == pytest.approx(10.0, rel=0.02)
    ouve = make_process("ouve")
    y = np.full(100_000, 0.7)
    x = prior_sample(ouve, y.shape, y, np.random.default_rng(1))
    assert abs(x.mean() - 0.7) < 3 * x.std() / np.sqrt(x.size)


def test_tweedie_examples():
    p = make_process("ve")
    x = np.array([0.4, -0.9])
    np.testing.assert_array_equal(denoise_to_x0(p, x, np.zeros(2), 0.5), x)
    np.testing.assert_allclose(denoise_to_x0(p, x, np.array([1.0, 1.0]), p.tau_eps), x, atol=1e-3)
    # single Gaussian prior N(mu, v): E[x0 | x_tau] = (v x + s2 mu) / (v + s2)
    mu, v, tau = 0.3, 0.5, 0.6
    s2 = float(p.sigma(tau)) ** 2
    score = -(x - mu) / (v + s2)
    expected = (v * x + s2 * mu) / (v + s2)
    np.testing.assert_allclose(denoise_to_x0(p, x, score, tau), expected, rtol=1e-10)
