import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from searchbias import splines
from searchbias.errors import RankError


@pytest.fixture
def basis():
    x = np.random.default_rng(3).uniform(-2, 5, 300)
    return splines.build_crs(x, k=8)


def test_quantile_knots():
    x = np.r_[np.arange(10.0), np.arange(10.0)]
    kn = splines.quantile_knots(x, 4)
    np.testing.assert_allclose(kn, [0, 3, 6, 9])
    with pytest.raises(RankError, match="distinct"):
        splines.quantile_knots(np.ones(20), 4)
    with pytest.raises(ValueError):
        splines.quantile_knots(x, 2)


def test_values_at_knots_are_coefficients(basis):
    np.testing.assert_allclose(basis.evaluate(basis.knots), np.eye(basis.k), atol=1e-14)


def test_matches_natural_cubic_interpolant(basis):
    rng = np.random.default_rng(1)
    b = rng.normal(size=basis.k)
    ref = CubicSpline(basis.knots, b, bc_type="natural")
    t = np.linspace(basis.knots[0], basis.knots[-1], 500)
    np.testing.assert_allclose(basis.evaluate(t) @ b, ref(t), atol=1e-12)
    np.testing.assert_allclose(basis.derivative(t) @ b, ref(t, 1), atol=1e-10)
    np.testing.assert_allclose(basis.second_derivative(t) @ b, ref(t, 2), atol=1e-9)


def test_penalty_equals_integrated_squared_curvature(basis):
    # f'' is piecewise linear, so Simpson on each interval is exact
    rng = np.random.default_rng(2)
    kn = basis.knots
    for _ in range(20):
        b = rng.normal(size=basis.k)
        total = 0.0
        for lo, hi in zip(kn[:-1], kn[1:]):
            t = np.array([lo, (lo + hi) / 2, hi])
            f2 = (basis.second_derivative(t) @ b) ** 2
            total += (hi - lo) / 6 * (f2[0] + 4 * f2[1] + f2[2])
        assert b @ basis.S @ b == pytest.approx(total, rel=1e-10)


def test_linear_functions_are_unpenalized(basis):
    b = 3.0 * basis.knots - 1.0
    assert abs(b @ basis.S @ b) < 1e-9
    assert np.linalg.matrix_rank(basis.S, tol=1e-9 * np.abs(basis.S).max()) == basis.k - 2


def test_linear_extrapolation(basis):
    b = np.random.default_rng(5).normal(size=basis.k)
    lo, hi = basis.knots[0], basis.knots[-1]
    left = basis.evaluate(np.array([lo - 2.0, lo - 1.0, lo])) @ b
    right = basis.evaluate(np.array([hi, hi + 1.0, hi + 2.0])) @ b
    assert left[1] - left[0] == pytest.approx(left[2] - left[1], abs=1e-12)
    assert right[1] - right[0] == pytest.approx(right[2] - right[1], abs=1e-12)
    assert np.all(basis.second_derivative(np.array([lo - 1, hi + 1])) == 0)


def test_sum_to_zero_constraint(basis):
    x = np.random.default_rng(3).uniform(-2, 5, 300)
    Xc = basis.design(x)
    assert Xc.shape == (300, basis.k - 1)
    np.testing.assert_allclose(Xc.sum(axis=0), 0, atol=1e-11)
    np.testing.assert_allclose(basis.Z.T @ basis.Z, np.eye(basis.k - 1), atol=1e-14)


def test_serialization_round_trip(basis):
    back = splines.SmoothBasis.from_dict(basis.to_dict())
    t = np.linspace(-3, 6, 50)
    np.testing.assert_array_equal(back.design(t), basis.design(t))


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 12), st.integers(0, 10_000))
def test_penalty_psd_and_symmetric(k, seed):
    x = np.random.default_rng(seed).normal(size=60)
    b = splines.build_crs(x, k)
    np.testing.assert_array_equal(b.S, b.S.T)
    assert np.linalg.eigvalsh(b.S).min() > -1e-9 * np.abs(b.S).max()


def test_row_kron():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]])
    out = splines.row_kron(a, b)
    for i in range(2):
        np.testing.assert_array_equal(out[i], np.kron(a[i], b[i]))


def test_tensor_basis():
    rng = np.random.default_rng(4)
    xs = rng.uniform(0, 1, (3, 400))
    tb = splines.build_tensor(*xs, k_marginal=5)
    assert tb.dim == 125
    X = tb.design(*xs)
    assert X.shape == (400, 124)
    np.testing.assert_allclose(X.sum(axis=0), 0, atol=1e-10)
    # raw tensor basis reproduces products of marginal functions
    raw = tb.evaluate(*xs)
    np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-12)  # each CRS margin is a partition of unity
    assert len(tb.penalties) == 3
    # a function linear in each margin separately is in the joint null space
    cs = [m.knots for m in tb.margins]
    coef = np.einsum("i,j,k->ijk", cs[0], cs[1], cs[2]).ravel()
    for P in tb.raw_penalties:
        assert abs(coef @ P @ coef) < 1e-8


def test_monotone_basis():
    x = np.random.default_rng(6).uniform(0, 10, 200)
    mb = splines.build_monotone(x, k=8)
    assert mb.k == 8
    t = np.linspace(-2, 12, 400)
    X = mb.evaluate(t)
    assert X.shape == (400, 8)
    inside = (t >= mb.knots[0]) & (t <= mb.knots[-1])
    assert np.all(np.diff(X[inside], axis=0) >= -1e-12)
    np.testing.assert_allclose(mb.evaluate(mb.knots[[0]]), 0.0, atol=1e-12)
    np.testing.assert_allclose(mb.evaluate(mb.knots[[-1]]), 1.0, atol=1e-12)
    assert np.all(X[inside] >= -1e-12) and np.all(X[inside] <= 1 + 1e-12)
    # nonnegative combinations are nondecreasing everywhere, including extrapolation
    c = np.random.default_rng(7).uniform(0, 1, 8)
    assert np.all(np.diff(X @ c) >= -1e-12)
    # derivative agrees with finite differences
    tt = np.linspace(0.5, 9.5, 30)
    h = 1e-6
    fd = (mb.evaluate(tt + h) - mb.evaluate(tt - h)) / (2 * h)
    np.testing.assert_allclose(mb.derivative(tt), fd, atol=1e-5)


@pytest.mark.parametrize("target", [np.sqrt, np.log, lambda t: 1 / (1 + np.exp(-(t - 5)))])
def test_monotone_fit_recovers_noiseless_target(target):
    from scipy.optimize import nnls
    x = np.linspace(1, 10, 500)
    mb = splines.build_monotone(x, k=10)
    A = np.column_stack([np.ones_like(x), -np.ones_like(x), mb.evaluate(x)])  # free intercept as +/- pair
    c, _ = nnls(A, target(x))
    assert np.sqrt(np.mean((A @ c - target(x)) ** 2)) <= 1e-3
    assert np.all(np.diff(mb.evaluate(np.linspace(1, 10, 1000)) @ c[2:]) >= -1e-12)
