"""Design utilities: Kullback-Leibler divergence between the Laplace
posterior and the prior, its Monte Carlo expectation over the prior
predictive distribution, and relative design efficiency.

The expected utility of a design is estimated by simulating data sets from
the prior predictive at that design, fitting each with the two-step Laplace
approximation, and averaging the prior-to-posterior Gaussian divergences.
Simulation streams depend only on the master seed and the draw index, so two
designs evaluated with the same seed see identical parameter draws and the
difference of their estimates is a paired comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import (
    EfficiencyUndefined,
    EstimationFailed,
    GamDesignError,
    InvalidParameter,
    NotPositiveDefinite,
    ShapeMismatch,
)
from .gamm import Design, GammModel, GaussianDist, simulate_prior_predictive
from .laplace import FitOptions, fit_alpha, fit_theta
from .rng import rng_for

_SIM_STREAM = 1
_FIT_STREAM = 2


def kld_mvn(
    mean_post: np.ndarray,
    cov_post: np.ndarray,
    mean_prior: np.ndarray,
    cov_prior: np.ndarray,
) -> float:
    """KL divergence between two Gaussians, KL(posterior || prior).

    0.5 [ tr(C0^-1 C1) + (m0 - m1)' C0^-1 (m0 - m1) - T + log det C0
          - log det C1 ].
    """
    mean_post = np.asarray(mean_post, dtype=float).ravel()
    mean_prior = np.asarray(mean_prior, dtype=float).ravel()
    cov_post = np.asarray(cov_post, dtype=float)
    cov_prior = np.asarray(cov_prior, dtype=float)
    t = mean_post.size
    if mean_prior.size != t or cov_post.shape != (t, t) or cov_prior.shape != (t, t):
        raise ShapeMismatch("mean/covariance dimensions do not agree")
    try:
        l0 = np.linalg.cholesky(cov_prior)
        l1 = np.linalg.cholesky(cov_post)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite") from exc
    # tr(C0^-1 C1) = || L0^-1 L1 ||_F^2
    w = solve_triangular(l0, l1, lower=True)
    trace = float(np.sum(w * w))
    d = solve_triangular(l0, mean_prior - mean_post, lower=True)
    quad = float(d @ d)
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(l0))))
    logdet1 = 2.0 * float(np.sum(np.log(np.diag(l1))))
    return 0.5 * (trace + quad - t + logdet0 - logdet1)


def kld_gaussians(post: GaussianDist, prior: GaussianDist) -> float:
    """Label-aware wrapper around :func:`kld_mvn`."""
    if post.labels != prior.labels:
        raise ShapeMismatch("posterior and prior carry different parameter labels")
    return kld_mvn(post.mean, post.cov, prior.mean, prior.cov)


@dataclass
class UtilityEstimate:
    value: float
    mc_se: float
    l_draws: int
    seed: int
    failed_draws: int = 0

    def __float__(self) -> float:
        return self.value


def joint_prior(model: GammModel, prior: GaussianDist, design: Design) -> GaussianDist:
    """Joint Gaussian prior over (theta, alpha) for one design.

    The alpha block is the conditional prior N(0, G(theta)) evaluated at the
    prior mean of the variance parameters, stacked block-diagonally with the
    theta block.
    """
    theta_labels = model.theta_labels()
    theta_block = prior.marginal(theta_labels)
    alpha_labels = model.alpha_labels(design)
    if not alpha_labels:
        return theta_block
    tdict = dict(zip(theta_labels, theta_block.mean))
    var = model.alpha_prior_variances(design, tdict)
    mean = np.concatenate([theta_block.mean, np.zeros(var.size)])
    dim = mean.size
    cov = np.zeros((dim, dim))
    nt = theta_block.dim
    cov[:nt, :nt] = theta_block.cov
    cov[nt:, nt:] = np.diag(var)
    return GaussianDist(mean=mean, cov=cov, labels=tuple(theta_labels) + tuple(alpha_labels))


def expected_utility(
    model: GammModel,
    prior: GaussianDist,
    design: Design,
    l_draws: int,
    seed: int,
    fit_opts: FitOptions | None = None,
) -> UtilityEstimate:
    """Monte Carlo expected KL divergence of a design.

    For each draw: simulate (theta, alpha, y) from the prior predictive, run
    the two-step Laplace fit, and score KL(joint Laplace posterior || joint
    prior).  Draws whose fit fails to converge (or whose simulation overflows)
    are dropped and counted.
    """
    if l_draws < 1:
        raise InvalidParameter("l_draws must be >= 1")
    bundle = model.bundle(design)
    prior_joint = joint_prior(model, prior, design)
    fit_opts = fit_opts or FitOptions()
    theta_labels = model.theta_labels()
    nt = len(theta_labels)

    klds = []
    failed = 0
    for l in range(l_draws):
        sim_seed = _stream_seed(seed, _SIM_STREAM, l)
        try:
            _, _, y = simulate_prior_predictive(model, prior, design, sim_seed, bundle=bundle)
            opts = FitOptions(
                e_draws=fit_opts.e_draws,
                seed=_stream_seed(seed, _FIT_STREAM, l),
                max_iter=fit_opts.max_iter,
                grad_tol=fit_opts.grad_tol,
                grad_step=fit_opts.grad_step,
                hess_step=fit_opts.hess_step,
                method=fit_opts.method,
            )
            tfit = fit_theta(model, prior, y, design, opts=opts, bundle=bundle)
            if not tfit.converged:
                failed += 1
                continue
            afit = fit_alpha(model, tfit.theta_star, y, design, bundle=bundle)
            mean1 = np.concatenate([tfit.theta_star, afit.alpha_star])
            dim = mean1.size
            cov1 = np.zeros((dim, dim))
            cov1[:nt, :nt] = _chol_inv(tfit.hessian)
            if dim > nt:
                cov1[nt:, nt:] = _chol_inv(afit.hessian)
            klds.append(kld_mvn(mean1, cov1, prior_joint.mean, prior_joint.cov))
        except (np.linalg.LinAlgError, FloatingPointError, GamDesignError):
            # simulation overflow or a degenerate fit: drop the draw
            failed += 1
    if len(klds) < max(1, l_draws // 2):
        raise EstimationFailed(
            f"{failed} of {l_draws} utility draws failed; estimate is unreliable"
        )
    arr = np.asarray(klds)
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else float("nan")
    return UtilityEstimate(
        value=float(arr.mean()),
        mc_se=se,
        l_draws=l_draws,
        seed=seed,
        failed_draws=failed,
    )


def relative_efficiency(
    model: GammModel,
    prior: GaussianDist,
    design_num: Design,
    design_den: Design,
    l_draws: int,
    seed: int,
    fit_opts: FitOptions | None = None,
) -> tuple[float, UtilityEstimate, UtilityEstimate]:
    """U(design_num) / U(design_den) under common random numbers.

    Both designs are evaluated with the same master seed so their simulated
    parameter draws coincide.
    """
    u_num = expected_utility(model, prior, design_num, l_draws, seed, fit_opts=fit_opts)
    u_den = expected_utility(model, prior, design_den, l_draws, seed, fit_opts=fit_opts)
    if not np.isfinite(u_den.value) or u_den.value <= 0:
        raise EfficiencyUndefined("reference design has non-positive expected utility")
    return u_num.value / u_den.value, u_num, u_den


def _stream_seed(seed: int, stream: int, draw: int) -> int:
    """A scalar seed for the (stream, draw) substream of a master seed."""
    return int(rng_for(seed, stream, draw).integers(0, 2**63 - 1))


def _chol_inv(h: np.ndarray) -> np.ndarray:
    chol = cho_factor(h, lower=True)
    inv = cho_solve(chol, np.eye(h.shape[0]))
    return 0.5 * (inv + inv.T)
