import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.interpolate import BSpline

from gamdesign.basis import (
    OSullivanBasis,
    TensorSmooth,
    _bspline_penalty,
    _knot_vector,
    build_osullivan,
    build_tensor_smooth,
    rowwise_kronecker,
)
from gamdesign.errors import (
    DegenerateCovariate,
    InvalidParameter,
    KnotCountTooLarge,
    ShapeMismatch,
)


# ---------------------------------------------------------------------------
# row-wise Kronecker product


def test_rowwise_kronecker_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 3))
    b = rng.normal(size=(7, 4))
    got = rowwise_kronecker(a, b)
    expect = np.empty((7, 12))
    for i in range(7):
        for j in range(3):
            for k in range(4):
                expect[i, j * 4 + k] = a[i, j] * b[i, k]
    assert np.allclose(got, expect, atol=1e-14)


def test_rowwise_kronecker_shape_checks():
    with pytest.raises(ShapeMismatch):
        rowwise_kronecker(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ShapeMismatch):
        rowwise_kronecker(np.ones(3), np.ones((3, 2)))


# ---------------------------------------------------------------------------
# penalty matrix: exact Simpson vs adaptive quadrature


def test_penalty_matches_quadrature_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, 200)
    basis = OSullivanBasis.fit(x, 6)
    t = _knot_vector(basis.interior_knots)
    nb = len(t) - 4
    omega = _bspline_penalty(t, nb)
    spl2 = BSpline(t, np.eye(nb), 3).derivative(2)

    def integrand(u, i, j):
        v = spl2(min(u, 1.0 - 1e-12))
        return v[i] * v[j]

    for i, j in [(0, 0), (2, 3), (4, 4), (1, 6), (7, 7)]:
        oracle, _ = quad(integrand, 0.0, 1.0, args=(i, j), limit=200)
        assert omega[i, j] == pytest.approx(oracle, abs=1e-8, rel=1e-8)


def test_penalty_null_space_dimension_is_two():
    x = np.linspace(0, 1, 100)
    basis = OSullivanBasis.fit(x, 8)
    t = _knot_vector(basis.interior_knots)
    omega = _bspline_penalty(t, len(t) - 4)
    evals = np.linalg.eigvalsh(omega)
    assert np.sum(evals < 1e-8 * evals[-1]) == 2


# ---------------------------------------------------------------------------
# fitted basis properties


def test_smooth_columns_orthogonal_to_intercept_and_linear():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, 150)
    xn, z, knots = build_osullivan(x, 7)
    design_lin = np.column_stack([np.ones_like(xn), xn])
    assert np.max(np.abs(design_lin.T @ z)) < 1e-8


def test_knots_at_equally_spaced_quantiles():
    x = np.linspace(-2.0, 4.0, 301)
    basis = OSullivanBasis.fit(x, 5)
    # boundaries plus k-2 interior knots, in covariate units
    assert basis.knots.shape == (5,)
    assert basis.knots[0] == pytest.approx(-2.0)
    assert basis.knots[-1] == pytest.approx(4.0)
    inner = np.quantile(x, np.arange(1, 4) / 4)
    assert np.allclose(basis.knots[1:-1], inner, atol=1e-9)


def test_transform_frozen_at_fit_time():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 120)
    basis = OSullivanBasis.fit(x, 6)
    xn1, z1 = basis.transform(x[:10])
    xn2, z2 = basis.transform(x[:10])
    assert np.array_equal(z1, z2)
    # values outside the construction range are clipped, not extrapolated
    xn_out, z_out = basis.transform(np.array([-5.0, 5.0]))
    xn_edge, z_edge = basis.transform(np.array([x.min(), x.max()]))
    assert np.allclose(z_out, z_edge, atol=1e-12)
    assert xn_out[0] == 0.0 and xn_out[1] == 1.0


def test_fit_validation_errors():
    x = np.linspace(0, 1, 50)
    with pytest.raises(InvalidParameter):
        OSullivanBasis.fit(x, 1)
    with pytest.raises(DegenerateCovariate):
        OSullivanBasis.fit(np.full(50, 2.0), 4)
    with pytest.raises(DegenerateCovariate):
        OSullivanBasis.fit(np.tile([0.0, 1.0, 2.0], 20), 6)
    with pytest.raises(KnotCountTooLarge):
        OSullivanBasis.fit(np.linspace(0, 1, 8), 6)


@settings(max_examples=25, deadline=None)
@given(
    k=st.integers(min_value=2, max_value=9),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_basis_shape_and_determinism(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3, 7, 80)
    xn, z, knots = build_osullivan(x, k)
    assert z.shape == (80, k)
    assert np.all((xn >= 0) & (xn <= 1))
    xn2, z2, _ = build_osullivan(x, k)
    assert np.array_equal(z, z2)


# ---------------------------------------------------------------------------
# tensor smooths


def test_tensor_transform_matches_marginal_kronecker():
    rng = np.random.default_rng(4)
    xa = rng.uniform(0, 1, 90)
    xb = rng.uniform(10, 20, 90)
    smooth = TensorSmooth.fit(xa, xb, 3, 4)
    w = smooth.transform(xa, xb)
    ma = smooth.marginal("a", xa)
    mb = smooth.marginal("b", xb)
    assert w.shape == (90, 4 * 5)
    expect = rowwise_kronecker(ma, mb)
    assert np.allclose(w, expect, atol=1e-14)
    # marginals are centered over the construction sample
    assert np.max(np.abs(ma.mean(axis=0))) < 1e-12
    assert np.max(np.abs(mb.mean(axis=0))) < 1e-12


def test_tensor_penalties_diagonal_and_positive_definite():
    rng = np.random.default_rng(5)
    xa = rng.uniform(0, 1, 60)
    xb = rng.uniform(0, 1, 60)
    w, (s0, s1, s2) = build_tensor_smooth(xa, xb, 3, 3)
    for s in (s0, s1, s2):
        assert np.allclose(s, np.diag(np.diag(s)))
    for lam in ([1.0, 1.0, 1.0], [0.3, 2.0, 5.0], [10.0, 0.1, 0.1]):
        total = lam[0] * s0 + lam[1] * s1 + lam[2] * s2
        assert np.all(np.diag(total) > 0)


def test_tensor_penalty_structure():
    xa = np.linspace(0, 1, 50)
    xb = np.linspace(0, 1, 50)
    smooth = TensorSmooth.fit(xa, xb, 2, 3)
    s0, s1, s2 = smooth.penalties()
    da, db = 3, 4  # (k+1) per side
    assert s0.shape == (da * db, da * db)
    # s0 penalizes only the joint linear-by-linear coefficient
    assert np.sum(np.diag(s0)) == pytest.approx(1.0)
    assert np.diag(s0)[0] == pytest.approx(1.0)
    # s1/s2 penalize each marginal smooth direction
    assert np.sum(np.diag(s1)) == pytest.approx(2 * db)
    assert np.sum(np.diag(s2)) == pytest.approx(3 * da)
