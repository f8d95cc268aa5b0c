"""Spline and tensor-product basis construction.

Univariate smooths use orthogonalized O'Sullivan splines: a cubic B-spline
basis with an integrated-squared-second-derivative penalty, re-expressed in
mixed-model form by a spectral decomposition of the penalty so the smooth
coefficients carry an i.i.d. Gaussian prior.  Bivariate smooths are built as
row-wise Kronecker products of marginal bases with diagonal marginal penalty
matrices.

Basis objects are fitted once (fixing knots, the spectral transform and the
covariate normalization) and can then be evaluated at new covariate values, so
design points are mapped through exactly the same basis functions as the data
that defined them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import (
    DegenerateCovariate,
    KnotCountTooLarge,
    InvalidParameter,
    NumericalSingularity,
    ShapeMismatch,
)

_NULL_DIM = 2  # second-derivative penalty annihilates constants and linears


def rowwise_kronecker(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row i of the result is kron(a[i], b[i])."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch("rowwise_kronecker expects two 2-D arrays")
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(
            f"row counts differ: {a.shape[0]} vs {b.shape[0]}"
        )
    n = a.shape[0]
    return np.einsum("ij,ik->ijk", a, b).reshape(n, a.shape[1] * b.shape[1])


def _bspline_penalty(knots: np.ndarray, nbasis: int) -> np.ndarray:
    """Exact integral of second-derivative products of a cubic B-spline basis.

    On each inter-knot interval the second derivatives are linear, so their
    products are quadratic and Simpson's rule is exact.
    """
    spl2 = BSpline(knots, np.eye(nbasis), 3).derivative(2)
    breaks = np.unique(knots)
    omega = np.zeros((nbasis, nbasis))
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        h = hi - lo
        if h <= 0:
            continue
        pts = np.array([lo, 0.5 * (lo + hi), hi])
        # clip right endpoint into the support to avoid extrapolation at 1.0
        vals = spl2(np.minimum(pts, knots[-1] - 1e-12))
        omega += (h / 6.0) * (
            np.outer(vals[0], vals[0])
            + 4.0 * np.outer(vals[1], vals[1])
            + np.outer(vals[2], vals[2])
        )
    return 0.5 * (omega + omega.T)


def _knot_vector(interior: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(4), interior, np.ones(4)])


@dataclass
class OSullivanBasis:
    """A fitted univariate O'Sullivan spline basis with ``k`` smooth columns.

    ``transform`` maps new covariate values through the basis functions frozen
    at fit time (normalization constants, knots, spectral transform and the
    linear correction that orthogonalizes the smooth columns against the
    intercept and linear column of the construction sample).
    """

    k: int
    lo: float
    hi: float
    interior_knots: np.ndarray  # on the normalized [0, 1] scale
    transform_matrix: np.ndarray = field(repr=False)  # (k+2) x k
    linear_correction: np.ndarray = field(repr=False)  # 2 x k

    @property
    def knots(self) -> np.ndarray:
        """Knot locations (boundaries plus interior) in covariate units."""
        full = np.concatenate([[0.0], self.interior_knots, [1.0]])
        return self.lo + full * (self.hi - self.lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hi <= self.lo:
            raise DegenerateCovariate("normalization range is empty")
        return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def transform(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (normalized linear column, n x k spline matrix) at ``x``."""
        xn = self.normalize(x)
        t = _knot_vector(self.interior_knots)
        nbasis = len(t) - 4
        b = BSpline(t, np.eye(nbasis), 3)(np.minimum(xn, 1.0 - 1e-12))
        z = b @ self.transform_matrix
        z -= np.column_stack([np.ones_like(xn), xn]) @ self.linear_correction
        return xn, z

    @classmethod
    def fit(cls, x: np.ndarray, k: int, normalize: bool = True) -> "OSullivanBasis":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        if k < 2:
            raise InvalidParameter(f"knot count must be >= 2, got {k}")
        distinct = np.unique(x)
        if distinct.size < 2:
            raise DegenerateCovariate("covariate is constant")
        if distinct.size < k:
            raise DegenerateCovariate(
                f"covariate has {distinct.size} distinct values, need >= {k}"
            )
        if n < k + 4:
            raise KnotCountTooLarge(f"k={k} requires n >= {k + 4}, got n={n}")

        if normalize:
            lo, hi = float(x.min()), float(x.max())
        else:
            lo, hi = 0.0, 1.0
        xn = np.clip((x - lo) / (hi - lo), 0.0, 1.0)

        # interior knots at equally spaced quantiles of the construction sample
        if k > 2:
            probs = np.arange(1, k - 1) / (k - 1)
            interior = np.quantile(xn, probs)
        else:
            interior = np.empty(0)
        if interior.size and (
            np.any(np.diff(interior) <= 0)
            or interior[0] <= 0.0
            or interior[-1] >= 1.0
        ):
            raise DegenerateCovariate("quantile knots are not strictly increasing")

        t = _knot_vector(interior)
        nbasis = len(t) - 4  # == k + 2
        omega = _bspline_penalty(t, nbasis)
        evals, evecs = np.linalg.eigh(omega)
        scale = max(evals[-1], 1.0)
        if np.any(evals[_NULL_DIM:] <= 1e-12 * scale):
            raise NumericalSingularity("penalty spectrum has a deficient range space")
        pos_vals = evals[_NULL_DIM:]
        pos_vecs = evecs[:, _NULL_DIM:]
        # deterministic column signs
        signs = np.sign(pos_vecs[np.argmax(np.abs(pos_vecs), axis=0), np.arange(k)])
        transform = (pos_vecs * signs) / np.sqrt(pos_vals)

        b = BSpline(t, np.eye(nbasis), 3)(np.minimum(xn, 1.0 - 1e-12))
        z_raw = b @ transform
        design_lin = np.column_stack([np.ones(n), xn])
        correction, *_ = np.linalg.lstsq(design_lin, z_raw, rcond=None)

        return cls(
            k=k,
            lo=lo,
            hi=hi,
            interior_knots=np.asarray(interior, dtype=float),
            transform_matrix=transform,
            linear_correction=correction,
        )


def build_osullivan(
    x: np.ndarray, k: int, normalize: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit an O'Sullivan basis on ``x`` and evaluate it there.

    Returns the normalized linear column, the n x k spline matrix, and the
    knot locations in covariate units.
    """
    basis = OSullivanBasis.fit(x, k, normalize=normalize)
    xn, z = basis.transform(x)
    return xn, z, basis.knots


@dataclass
class TensorSmooth:
    """A fitted tensor-product smooth of two covariates.

    Marginal bases are the linear column plus the O'Sullivan smooth columns
    (dimension k + 1 per side), centered (sum-to-zero over the construction
    sample) before the Kronecker expansion.  The three marginal penalties are
    diagonal in this parameterization: one per marginal smooth direction plus
    a ridge term on the joint null coefficient, so any strictly positive
    combination of them is positive definite.
    """

    basis_a: OSullivanBasis
    basis_b: OSullivanBasis
    center_a: np.ndarray = field(repr=False)
    center_b: np.ndarray = field(repr=False)

    @property
    def n_cols(self) -> int:
        return (self.basis_a.k + 1) * (self.basis_b.k + 1)

    def marginal(self, side: str, x: np.ndarray) -> np.ndarray:
        basis = self.basis_a if side == "a" else self.basis_b
        center = self.center_a if side == "a" else self.center_b
        xn, z = basis.transform(x)
        return np.column_stack([xn, z]) - center

    def transform(self, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
        return rowwise_kronecker(self.marginal("a", x_a), self.marginal("b", x_b))

    def penalties(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        da = np.diag(np.r_[0.0, np.ones(self.basis_a.k)])
        db = np.diag(np.r_[0.0, np.ones(self.basis_b.k)])
        ea = np.diag(np.r_[1.0, np.zeros(self.basis_a.k)])
        eb = np.diag(np.r_[1.0, np.zeros(self.basis_b.k)])
        ia = np.eye(self.basis_a.k + 1)
        ib = np.eye(self.basis_b.k + 1)
        s0 = np.kron(ea, eb)  # ridge on the joint linear-by-linear coefficient
        s1 = np.kron(da, ib)
        s2 = np.kron(ia, db)
        return s0, s1, s2

    @classmethod
    def fit(
        cls, x_a: np.ndarray, x_b: np.ndarray, k_a: int, k_b: int
    ) -> "TensorSmooth":
        basis_a = OSullivanBasis.fit(x_a, k_a)
        basis_b = OSullivanBasis.fit(x_b, k_b)
        parts = []
        for basis, x in ((basis_a, x_a), (basis_b, x_b)):
            xn, z = basis.transform(x)
            m = np.column_stack([xn, z])
            parts.append(m.mean(axis=0))
        return cls(basis_a=basis_a, basis_b=basis_b, center_a=parts[0], center_b=parts[1])


def build_tensor_smooth(
    x_a: np.ndarray, x_b: np.ndarray, k_a: int, k_b: int
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Fit a tensor smooth on the given samples and evaluate it there.

    Returns the n x ((k_a+1)(k_b+1)) tensor block and the three marginal
    penalty matrices.
    """
    smooth = TensorSmooth.fit(x_a, x_b, k_a, k_b)
    return smooth.transform(x_a, x_b), smooth.penalties()


@dataclass
class BasisBundle:
    """Design matrices and penalties for one design under one model.

    ``x_cols`` holds the intercept and linear columns, ``z_cols`` the spline
    columns grouped by smooth covariate, ``w_cols`` the tensor-product columns
    grouped by interaction.
    """

    x_cols: np.ndarray
    z_cols: np.ndarray
    w_cols: np.ndarray
    z_slices: dict[str, slice]
    w_slices: dict[str, slice]
    penalty_sets: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
    knot_locations: dict[str, np.ndarray]

    @property
    def n(self) -> int:
        return self.x_cols.shape[0]
