import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrestore import operators as ops
from diffrestore.verify import finite_diff_grad, operator_matrix

N = 64


def all_operators(rng):
    return [
        ops.DegradationOperator("identity"),
        ops.mask_operator((rng.random(N) > 0.4).astype(float)),
        ops.fir_operator(ops.design_lowpass_fir(2500.0, 21)),
        ops.fir_operator(ops.synthetic_rir(0.1, length_s=0.01, rng=rng), "rir_convolution"),
        ops.ideal_lowpass(3000.0),
        ops.parametric_lowpass(2000.0, 40.0),
    ]


@pytest.mark.parametrize("index", range(6))
def test_adjoint_is_matrix_transpose(index):
    op = all_operators(np.random.default_rng(0))[index]
    A = operator_matrix(lambda v: ops.apply(op, v), N)
    At = operator_matrix(lambda v: ops.adjoint(op, v), N)
    np.testing.assert_allclose(At, A.T, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), index=st.integers(0, 5))
def test_dot_product_identity(seed, index):
    rng = np.random.default_rng(seed)
    op = all_operators(rng)[index]
    x, v = rng.standard_normal(N), rng.standard_normal(N)
    lhs, rhs = np.dot(ops.apply(op, x), v), np.dot(x, ops.adjoint(op, v))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs), 1e-300)
    np.testing.assert_array_equal(ops.grad_x(op, x, v), ops.adjoint(op, v))


@pytest.mark.parametrize("index", [0, 1, 4, 5])
def test_gram_inverse_is_exact_for_diagonalizable_operators(index):
    op = all_operators(np.random.default_rng(1))[index]
    A = operator_matrix(lambda v: ops.apply(op, v), N)
    v = np.random.default_rng(2).standard_normal(N)
    s0, s1 = 0.03, 0.7
    np.testing.assert_allclose(ops.gram_inverse(op, v, s0, s1), np.linalg.solve(s0 * np.eye(N) + s1 * A @ A.T, v),
                               rtol=1e-9, atol=1e-12)


def test_gram_inverse_for_convolutions_is_close():
    op = ops.fir_operator(ops.design_lowpass_fir(2500.0, 21))
    n = 512
    A = operator_matrix(lambda v: ops.apply(op, v), n)
    v = np.random.default_rng(2).standard_normal(n)
    exact = np.linalg.solve(0.1 * np.eye(n) + A @ A.T, v)
    approx = ops.gram_inverse(op, v, 0.1, 1.0)
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 0.1


def test_trivial_operators_pass_signal_through():
    x = np.random.default_rng(3).standard_normal(N)
    np.testing.assert_array_equal(ops.apply(ops.mask_operator(np.ones(N)), x), x)
    np.testing.assert_allclose(ops.apply(ops.fir_operator([1.0]), x), x, atol=1e-14)
    np.testing.assert_array_equal(ops.apply(ops.DegradationOperator("identity"), x), x)


def test_steep_lowpass_kills_a_tone_two_octaves_up():
    t = np.arange(1600) / 16000
    x = np.sin(2 * np.pi * 4000 * t)
    out = ops.apply(ops.parametric_lowpass(1000.0, 60.0), x)
    ratio = np.sqrt(np.mean(out**2) / np.mean(x**2))
    # -120 dB is exactly 1e-6; allow for rounding in the gain evaluation
    assert ratio <= 1e-6 * (1 + 1e-9)


def test_response_examples():
    phi = (1200.0, 30.0)
    f = np.array([600.0, 1200.0, 2400.0])
    g = ops.parametric_response(phi, f)
    assert g[0] == 1.0 and g[1] == 1.0
    assert g[2] == pytest.approx(10 ** (-30 / 20), rel=1e-12)
    left, right = ops.parametric_response(phi, [1200.0 * (1 - 1e-12), 1200.0 * (1 + 1e-12)])
    assert abs(left - right) < 1e-9


@settings(max_examples=40, deadline=None)
@given(fc=st.floats(100, 7000), slope=st.floats(1, 150))
def test_response_is_monotone_and_bounded(fc, slope):
    g = ops.parametric_response((fc, slope), np.linspace(0, 8000, 513))
    assert np.all(np.diff(g) <= 0)
    assert np.all((g > 0) & (g <= 1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_contractive_operators_do_not_add_energy(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(N)
    for op in (ops.mask_operator((rng.random(N) > 0.5).astype(float)), ops.ideal_lowpass(rng.uniform(100, 7900)),
               ops.parametric_lowpass(rng.uniform(100, 7900), rng.uniform(1, 100))):
        assert np.sum(ops.apply(op, x) ** 2) <= np.sum(x**2) * (1 + 1e-12)


def test_grad_phi_matches_finite_differences():
    rng = np.random.default_rng(4)
    x, v = rng.standard_normal((3, 256)), rng.standard_normal((3, 256))
    phi = np.array([1800.0, 35.0])

    def inner(p):
        return float(np.sum(ops.apply(ops.parametric_lowpass(*p), x) * v))

    fd = finite_diff_grad(inner, phi, eps=1e-6)
    np.testing.assert_allclose(ops.grad_phi(ops.parametric_lowpass(*phi), x, v), fd, rtol=1e-3)
    np.testing.assert_array_equal(ops.grad_phi(ops.parametric_lowpass(*phi), x, np.zeros_like(v)), 0.0)
    with pytest.raises(ValueError):
        ops.grad_phi(ops.ideal_lowpass(1000.0), x, v)


@settings(max_examples=50, deadline=None)
@given(u=st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_sigmoid_parameters_stay_inside_bounds(u):
    params = ops.OperatorParams.from_phi([2000.0, 30.0], [200.0, 6.0], [7800.0, 120.0])
    params.u = np.array(u)
    assert np.all(params.phi >= params.lower) and np.all(params.phi <= params.upper)


def test_parameter_transform_round_trip_and_chain_rule():
    lower, upper = np.array([200.0, 6.0]), np.array([7800.0, 120.0])
    params = ops.OperatorParams.from_phi([2000.0, 30.0], lower, upper)
    np.testing.assert_allclose(params.phi, [2000.0, 30.0], rtol=1e-12)
    base = params.u.copy()

    def phi_of(u):
        return lower + (upper - lower) / (1 + np.exp(-u))

    for i in range(2):
        fd = finite_diff_grad(lambda u: phi_of(u)[i], base)
        np.testing.assert_allclose(params.chain(np.eye(2)[i]), fd, rtol=1e-6)
    with pytest.raises(ValueError):
        ops.OperatorParams.from_phi([9000.0, 30.0], lower, upper)
    assert not params.at_bound()
    params.u = np.array([30.0, 0.0])
    assert params.at_bound()


def test_invalid_operators_rejected(tmp_path):
    with pytest.raises(ValueError):
        ops.DegradationOperator("clipping")
    with pytest.raises(ValueError):
        ops.mask_operator([0.0, 0.5, 1.0])
    with pytest.raises(ValueError):
        ops.ideal_lowpass(9000.0)
    with pytest.raises(ValueError):
        ops.parametric_lowpass(1000.0, -3.0)
    with pytest.raises(ValueError):
        ops.apply(ops.mask_operator(np.ones(4)), np.ones(5))
    with pytest.raises(ValueError):
        ops.fir_operator([])


def test_taps_csv_round_trip(tmp_path):
    taps = ops.synthetic_rir(0.2, length_s=0.005, rng=np.random.default_rng(0))
    ops.save_taps_csv(tmp_path / "h.csv", taps)
    np.testing.assert_array_equal(ops.load_taps_csv(tmp_path / "h.csv"), taps)
