"""Closed-form posteriors for Gaussian linear additive models.

For a normal-identity model y = Q theta + eps with a Gaussian prior on theta
and known noise scale, the posterior is Gaussian with

    Omega1 = [sigma^-2 Q'Q + Omega0^-1]^-1
    mu1    = Omega1 [sigma^-2 Q'y + Omega0^-1 mu0]

Because Omega1 does not depend on y, the expected KLD utility of a design
splits into a deterministic trace/log-det part computed once and a mean-shift
quadratic that is Monte-Carlo averaged over prior-predictive draws, which
keeps the variance of the estimate low.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .basis import OSullivanBasis
from .errors import InvalidParameter, NumericalSingularity
from .gamm import GaussianDist
from .rng import rng_for


def conjugate_posterior(
    q: np.ndarray,
    y: np.ndarray,
    mu0: np.ndarray,
    omega0: np.ndarray,
    sigma_eps: float,
    labels: tuple[str, ...] | None = None,
) -> GaussianDist:
    """Exact Gaussian posterior of theta for y ~ N(Q theta, sigma_eps^2 I)."""
    q = np.atleast_2d(np.asarray(q, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    mu0 = np.asarray(mu0, dtype=float).ravel()
    omega0 = np.asarray(omega0, dtype=float)
    if sigma_eps <= 0:
        raise InvalidParameter("sigma_eps must be > 0")
    t = mu0.size
    if q.shape[1] != t and q.size == 0:
        q = q.reshape(0, t)
    try:
        prior_chol = cho_factor(omega0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalSingularity("prior covariance is not positive definite") from exc
    prior_prec = cho_solve(prior_chol, np.eye(t))
    prec1 = q.T @ q / sigma_eps**2 + prior_prec
    try:
        post_chol = cho_factor(prec1, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalSingularity("posterior precision is singular") from exc
    omega1 = cho_solve(post_chol, np.eye(t))
    rhs = q.T @ y / sigma_eps**2 + prior_prec @ mu0
    mu1 = cho_solve(post_chol, rhs)
    if labels is None:
        labels = tuple(f"theta:{i}" for i in range(t))
    return GaussianDist(mean=mu1, cov=0.5 * (omega1 + omega1.T), labels=labels)


# ---------------------------------------------------------------------------
# expected KLD for conjugate problems


@dataclass
class GaussianLinearProblem:
    """A normal-identity model with fixed feature map and Gaussian prior.

    ``features`` maps a vector of design points to the model matrix Q; the
    prior is MVN(mu0, diag(prior_var)); the noise scale is known.
    """

    features: Callable[[np.ndarray], np.ndarray]
    prior_var: np.ndarray
    sigma_eps: float
    mu0: np.ndarray | None = None

    def __post_init__(self):
        self.prior_var = np.asarray(self.prior_var, dtype=float).ravel()
        if np.any(self.prior_var <= 0) or self.sigma_eps <= 0:
            raise InvalidParameter("prior variances and sigma_eps must be > 0")
        if self.mu0 is None:
            self.mu0 = np.zeros(self.prior_var.size)

    @property
    def dim(self) -> int:
        return self.prior_var.size

    def posterior_cov(self, x: np.ndarray) -> np.ndarray:
        q = self.features(np.asarray(x, dtype=float))
        prec = q.T @ q / self.sigma_eps**2 + np.diag(1.0 / self.prior_var)
        return np.linalg.inv(prec)

    def crn(self, l_draws: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Common random numbers shared by every design compared under one seed."""
        rng = rng_for(seed)
        return (
            rng.standard_normal((l_draws, self.dim)),
            rng.standard_normal((l_draws, n)),
        )

    def expected_kld_draws(
        self,
        x: np.ndarray,
        l_draws: int,
        seed: int,
        crn: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> np.ndarray:
        """Per-draw KLD utilities at design ``x`` (Monte Carlo over y)."""
        x = np.asarray(x, dtype=float)
        q = self.features(x)
        n, t = q.shape
        if crn is None:
            crn = self.crn(l_draws, n, seed)
        eps_theta, eps_y = crn
        if eps_theta.shape != (l_draws, t) or eps_y.shape != (l_draws, n):
            raise InvalidParameter("common random numbers have the wrong shape")

        sd0 = np.sqrt(self.prior_var)
        prec0_diag = 1.0 / self.prior_var
        prec1 = q.T @ q / self.sigma_eps**2 + np.diag(prec0_diag)
        try:
            chol1 = cho_factor(prec1, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalSingularity("posterior precision is singular") from exc
        omega1 = cho_solve(chol1, np.eye(t))

        logdet0 = float(np.sum(np.log(self.prior_var)))
        logdet1 = -2.0 * float(np.sum(np.log(np.diag(chol1[0]))))
        det_part = 0.5 * (
            np.sum(prec0_diag * np.diag(omega1)) - t + logdet0 - logdet1
        )

        # r_l = y_l - Q mu0 under the prior predictive; shift m_l = s^-2 O1 Q' r_l
        r = (eps_theta * sd0) @ q.T + self.sigma_eps * eps_y
        m = (r @ q) @ omega1 / self.sigma_eps**2
        quad = np.sum(m**2 * prec0_diag, axis=1)
        return det_part + 0.5 * quad

    def expected_kld(
        self,
        x: np.ndarray,
        l_draws: int,
        seed: int,
        crn: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> tuple[float, float]:
        draws = self.expected_kld_draws(x, l_draws, seed, crn=crn)
        return float(draws.mean()), float(draws.std(ddof=1) / np.sqrt(draws.size))

    def expected_kld_analytic(self, x: np.ndarray) -> float:
        """Exact expected KLD (the mean-shift quadratic in closed form)."""
        x = np.asarray(x, dtype=float)
        q = self.features(x)
        n, t = q.shape
        prec0_diag = 1.0 / self.prior_var
        prec1 = q.T @ q / self.sigma_eps**2 + np.diag(prec0_diag)
        chol1 = cho_factor(prec1, lower=True)
        omega1 = cho_solve(chol1, np.eye(t))
        logdet0 = float(np.sum(np.log(self.prior_var)))
        logdet1 = -2.0 * float(np.sum(np.log(np.diag(chol1[0]))))
        det_part = 0.5 * (np.sum(prec0_diag * np.diag(omega1)) - t + logdet0 - logdet1)
        sigma_r = q @ (self.prior_var[:, None] * q.T) + self.sigma_eps**2 * np.eye(n)
        b = omega1 @ q.T / self.sigma_eps**2  # t x n, m = B r
        quad_mean = float(np.sum((b @ sigma_r) * b * prec0_diag[:, None]))
        return det_part + 0.5 * quad_mean


def gam_problem(
    k: int,
    sigma_u: float,
    sigma_eps: float,
    beta_sd: float = 10.0,
    domain: tuple[float, float] = (-1.0, 1.0),
    ref_points: int = 101,
) -> GaussianLinearProblem:
    """Linear additive model with one O'Sullivan smooth on ``domain``.

    The basis is fitted once on an equally spaced reference grid over the
    design space, so every candidate design is evaluated through the same
    basis functions.
    """
    ref = np.linspace(domain[0], domain[1], ref_points)
    basis = OSullivanBasis.fit(ref, k)

    def features(x: np.ndarray) -> np.ndarray:
        xn, z = basis.transform(np.asarray(x, dtype=float).ravel())
        return np.column_stack([np.ones_like(xn), xn, z])

    prior_var = np.r_[np.full(2, beta_sd**2), np.full(k, sigma_u**2)]
    return GaussianLinearProblem(features=features, prior_var=prior_var, sigma_eps=sigma_eps)


def poly_problem(
    degree: int,
    sigma_eps: float,
    beta_sd: float = 10.0,
    domain: tuple[float, float] = (-1.0, 1.0),
) -> GaussianLinearProblem:
    """Polynomial regression reference model of the given degree."""
    lo, hi = domain

    def features(x: np.ndarray) -> np.ndarray:
        xn = (np.asarray(x, dtype=float).ravel() - lo) / (hi - lo)
        return np.column_stack([xn**d for d in range(degree + 1)])

    prior_var = np.full(degree + 1, beta_sd**2)
    return GaussianLinearProblem(features=features, prior_var=prior_var, sigma_eps=sigma_eps)


# ---------------------------------------------------------------------------
# corollary study over the fixed spread-vs-replication designs


def corollary_designs(n: int) -> dict[int, np.ndarray]:
    """The equally spaced designs with stated repetition counts, keyed by index."""
    if n == 12:
        uniques = [2, 3, 4, 6, 12]
    elif n == 24:
        uniques = [2, 3, 4, 6, 12, 24]
    else:
        raise InvalidParameter("corollary designs are defined for n in {12, 24}")
    out = {}
    for idx, m in enumerate(uniques, start=1):
        out[idx] = np.repeat(np.linspace(-1.0, 1.0, m), n // m)
    return out


@dataclass
class CorollaryTable:
    """Expected-KLD table over the corollary design grid plus per-draw values."""

    rows: list[dict]
    draws: dict[tuple, np.ndarray] = field(default_factory=dict, repr=False)

    def lookup(self, n, design_index, sigma_u, k, sigma_eps) -> dict:
        for row in self.rows:
            if (
                row["n"] == n
                and row["design_index"] == design_index
                and row["sigma_u"] == sigma_u
                and row["K"] == k
                and row["sigma_eps"] == sigma_eps
            ):
                return row
        raise KeyError((n, design_index, sigma_u, k, sigma_eps))

    def ranking(self, n, sigma_u, k, sigma_eps) -> list[int]:
        """Design indices ordered from best to worst expected KLD."""
        rows = [
            r
            for r in self.rows
            if r["n"] == n and r["sigma_u"] == sigma_u and r["K"] == k and r["sigma_eps"] == sigma_eps
        ]
        rows.sort(key=lambda r: -r["expected_kld"])
        return [r["design_index"] for r in rows]

    def paired_se(self, n, sigma_u, k, sigma_eps, idx_a, idx_b) -> tuple[float, float]:
        """Mean and standard error of the paired per-draw utility difference."""
        da = self.draws[(n, idx_a, sigma_u, k, sigma_eps)]
        db = self.draws[(n, idx_b, sigma_u, k, sigma_eps)]
        diff = da - db
        return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(diff.size))


def corollary_study(
    sigma_u_grid=(1.0, 10.0, 30.0),
    k_grid=(3, 6, 12),
    sigma_eps_grid=(0.1, 1.0),
    n_values=(12, 24),
    l_draws: int = 1000,
    seed: int = 0,
    keep_draws: bool = True,
) -> CorollaryTable:
    """Expected KLD per (design index, parameter combo) over Tables 1 and 2."""
    rows: list[dict] = []
    draws_store: dict[tuple, np.ndarray] = {}
    for n in n_values:
        designs = corollary_designs(n)
        combo_id = 0
        for k in k_grid:
            for sigma_u in sigma_u_grid:
                for sigma_eps in sigma_eps_grid:
                    problem = gam_problem(k, sigma_u, sigma_eps)
                    crn = problem.crn(l_draws, n, rng_seed(seed, n, combo_id))
                    for idx, x in designs.items():
                        draws = problem.expected_kld_draws(
                            x, l_draws, seed=0, crn=crn
                        )
                        rows.append(
                            {
                                "n": n,
                                "design_index": idx,
                                "sigma_u": sigma_u,
                                "K": k,
                                "sigma_eps": sigma_eps,
                                "expected_kld": float(draws.mean()),
                                "mc_se": float(draws.std(ddof=1) / np.sqrt(l_draws)),
                            }
                        )
                        if keep_draws:
                            draws_store[(n, idx, sigma_u, k, sigma_eps)] = draws
                    combo_id += 1
    return CorollaryTable(rows=rows, draws=draws_store)


def rng_seed(seed: int, *path: int) -> int:
    """Derive a child integer seed from a master seed and a path."""
    return int(rng_for(seed, *path).integers(0, 2**63 - 1))
