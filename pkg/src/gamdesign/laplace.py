"""Laplace approximation of GA(M)M posteriors.

The posterior of the model parameters theta (coefficients plus free variance
parameters) is approximated by a Gaussian centered at the maximizer of the
log marginal likelihood plus log prior, with precision equal to the negative
Hessian there.  The marginal likelihood integrates the latent coefficients
alpha = (u, v, s) out of the conditional likelihood:

* normal family, identity link: the integral is Gaussian and evaluated
  exactly through the marginal covariance sigma_eps^2 I + A G A'.
* otherwise: Monte Carlo over prior draws of alpha with common random
  numbers, so the objective is a smooth deterministic function of theta.

Given theta*, the marginal posterior of alpha is approximated by a second
Laplace step around the conditional MAP; the joint posterior covariance is
block diagonal across the two blocks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logsumexp

from .basis import BasisBundle
from .errors import (
    EstimationFailed,
    EvidenceUndefined,
    InvalidParameter,
    LikelihoodUnderflow,
    ShapeMismatch,
)
from .gamm import Design, GammModel, GammSpec, GaussianDist, concat_gaussians
from .rng import rng_for

_UNDERFLOW_SENTINEL = -1e12


# ---------------------------------------------------------------------------
# result containers


@dataclass
class ThetaFit:
    theta_star: np.ndarray
    hessian: np.ndarray  # precision of the Gaussian approximation (PD)
    converged: bool
    iterations: int
    logpost_at_mode: float
    regularized: bool = False


@dataclass
class AlphaFit:
    alpha_star: np.ndarray
    hessian: np.ndarray


@dataclass
class LaplaceFit:
    theta_star: np.ndarray
    theta_hessian: np.ndarray
    alpha_star: np.ndarray
    alpha_hessian: np.ndarray
    log_evidence: float
    converged: bool
    iterations: int


@dataclass
class FitOptions:
    e_draws: int = 500
    seed: int = 0
    max_iter: int = 200
    grad_tol: float = 1e-5
    grad_step: float = 1e-6
    hess_step: float = 1e-4
    method: str = "auto"  # "auto", "exact" or "mc"


# ---------------------------------------------------------------------------
# conditional likelihoods


def _log1pexp(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _conditional_loglik(spec: GammSpec, y: np.ndarray, eta: np.ndarray, sigma_eps: float) -> float:
    if spec.family == "normal":
        r = y - eta
        n = y.size
        return float(-0.5 * n * np.log(2 * np.pi * sigma_eps**2) - 0.5 * (r @ r) / sigma_eps**2)
    m = spec.trials
    const = float(np.sum(gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)))
    return const + float(y @ eta - m * np.sum(_log1pexp(eta)))


# ---------------------------------------------------------------------------
# fitting context: per-(model, design, y) matrices cached once


class _FitContext:
    def __init__(
        self,
        model: GammModel,
        y: np.ndarray,
        design: Design,
        bundle: BasisBundle | None = None,
    ):
        self.model = model
        self.spec = model.spec
        self.y = np.asarray(y, dtype=float).ravel()
        self.design = design
        self.bundle = bundle if bundle is not None else model.bundle(design)
        if self.y.size != self.bundle.n:
            raise ShapeMismatch("response length does not match design")
        self.a_mat = model.alpha_design_matrix(design, self.bundle)
        self.n_alpha = self.a_mat.shape[1]
        self.theta_labels = model.theta_labels()
        self.beta_labels = model.beta_labels()
        self.n_beta = len(self.beta_labels)
        self.var_labels = [lbl for lbl in self.theta_labels if not lbl.startswith("beta:")]
        if self.spec.family == "binomial":
            m = self.spec.trials
            self.binom_const = float(
                np.sum(gammaln(m + 1) - gammaln(self.y + 1) - gammaln(m - self.y + 1))
            )

    # -- parameter bookkeeping ------------------------------------------------

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, dict[str, float]]:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != len(self.theta_labels):
            raise ShapeMismatch("theta length does not match the model's theta block")
        return theta[: self.n_beta], dict(zip(self.theta_labels, theta))

    def sigma_eps(self, tdict: dict[str, float]) -> float:
        return self.model.sigma_eps(tdict)

    def alpha_var(self, tdict: dict[str, float]) -> np.ndarray:
        return self.model.alpha_prior_variances(self.design, tdict)

    def alpha_logsd_jac(self, tdict: dict[str, float]) -> np.ndarray:
        """d log(prior sd of alpha_c) / d (free variance parameter k)."""
        jac = np.zeros((self.n_alpha, len(self.var_labels)))
        col = {lbl: j for j, lbl in enumerate(self.var_labels)}
        ofs = 0
        model = self.model
        for name, k in self.spec.smooth_terms:
            lbl = f"log_prec:u:{name}"
            if lbl in col:
                jac[ofs : ofs + k, col[lbl]] = -0.5
            ofs += k
        for a, b, ka, kb in self.spec.interactions:
            key = f"{a}x{b}"
            dim = (ka + 1) * (kb + 1)
            pens = model.tensors[key].penalties()
            lam = [np.exp(model._param(f"log_lambda:{key}:{f}", tdict)) for f in range(3)]
            prec = sum(l * np.diag(s) for l, s in zip(lam, pens))
            for f in range(3):
                lbl = f"log_lambda:{key}:{f}"
                if lbl in col:
                    jac[ofs : ofs + dim, col[lbl]] = -0.5 * lam[f] * np.diag(pens[f]) / prec
            ofs += dim
        re = self.spec.random_effect
        if re.kind == "grouped":
            for gi, gname in enumerate(re.groupings):
                g = np.unique(self.design.groups[gname]).size
                lbl = f"log_prec:phi{gi+1}"
                if lbl in col:
                    jac[ofs : ofs + g, col[lbl]] = -0.5
                ofs += g
        return jac

    # -- marginal log likelihood ----------------------------------------------

    def crn_eps(self, e_draws: int, seed: int) -> np.ndarray:
        return rng_for(seed).standard_normal((e_draws, self.n_alpha))

    def marginal_loglik_exact(self, theta: np.ndarray, want_grad: bool = False):
        """Exact integral over alpha; normal family with identity link only."""
        beta, tdict = self.split(theta)
        sigma = self.sigma_eps(tdict)
        mu = self.bundle.x_cols @ beta
        n = self.y.size
        cov = sigma**2 * np.eye(n)
        var = self.alpha_var(tdict) if self.n_alpha else np.zeros(0)
        if self.n_alpha:
            cov += (self.a_mat * var) @ self.a_mat.T
        chol = cho_factor(cov, lower=True)
        r = self.y - mu
        w = cho_solve(chol, r)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        value = float(-0.5 * (r @ w + logdet + n * np.log(2 * np.pi)))
        if not want_grad:
            return value

        grad = np.zeros(len(self.theta_labels))
        grad[: self.n_beta] = self.bundle.x_cols.T @ w
        if self.var_labels:
            cinv = cho_solve(chol, np.eye(n))
            # d loglik / d gamma = 0.5 (w' dC w - tr(C^{-1} dC))
            gvar = np.zeros(len(self.var_labels))
            if "log_prec:eps" in self.var_labels:
                j = self.var_labels.index("log_prec:eps")
                # dC/dgamma = -sigma^2 I since sigma^2 = exp(-gamma)
                gvar[j] = -0.5 * sigma**2 * (w @ w - np.trace(cinv))
            if self.n_alpha:
                jac = self.alpha_logsd_jac(tdict)  # d log sd_c / d gamma_k
                dvar = 2.0 * var[:, None] * jac  # d var_c / d gamma_k
                aw = self.a_mat.T @ w  # (n_alpha,)
                quad = aw[:, None] ** 2 * dvar  # (n_alpha, n_var)
                # tr(C^{-1} A diag(dvar_k) A') = sum_c dvar_ck (A' C^{-1} A)_cc
                diag_acia = np.einsum("nc,nm,mc->c", self.a_mat, cinv, self.a_mat)
                gvar += 0.5 * ((quad - diag_acia[:, None] * dvar).sum(axis=0))
            grad[self.n_beta :] = gvar
        return value, grad

    def conditional_loglik_and_grad(self, theta: np.ndarray):
        """Likelihood (and score) for models with no latent coefficients."""
        beta, tdict = self.split(theta)
        eta = self.bundle.x_cols @ beta
        grad = np.zeros(len(self.theta_labels))
        if self.spec.family == "binomial":
            m = self.spec.trials
            value = self.binom_const + float(self.y @ eta - m * np.sum(_log1pexp(eta)))
            grad[: self.n_beta] = self.bundle.x_cols.T @ (self.y - m * expit(eta))
            return value, grad
        sigma = self.sigma_eps(tdict)
        r = self.y - eta
        n = self.y.size
        value = float(-0.5 * n * np.log(2 * np.pi * sigma**2) - 0.5 * (r @ r) / sigma**2)
        grad[: self.n_beta] = self.bundle.x_cols.T @ r / sigma**2
        if "log_prec:eps" in self.var_labels:
            j = self.n_beta + self.var_labels.index("log_prec:eps")
            grad[j] = 0.5 * n - 0.5 * (r @ r) / sigma**2
        return value, grad

    def marginal_loglik_mc(
        self, theta: np.ndarray, eps: np.ndarray, want_grad: bool = False
    ):
        """Monte Carlo marginal log likelihood over fixed standard normals.

        With ``want_grad`` also returns the gradient with respect to theta,
        using the softmax weights of the per-draw conditional likelihoods.
        """
        beta, tdict = self.split(theta)
        e_draws = eps.shape[0]
        eta0 = self.bundle.x_cols @ beta
        if self.n_alpha:
            var = self.alpha_var(tdict)
            alpha = eps * np.sqrt(var)  # (E, n_alpha)
            eta = eta0 + alpha @ self.a_mat.T  # (E, n)
        else:
            alpha = np.zeros((e_draws, 0))
            eta = np.broadcast_to(eta0, (e_draws, eta0.size)).copy()

        if self.spec.family == "binomial":
            m = self.spec.trials
            ll = self.binom_const + eta @ self.y - m * np.sum(_log1pexp(eta), axis=1)
        else:
            sigma = self.sigma_eps(tdict)
            r2 = np.sum((self.y - eta) ** 2, axis=1)
            n = self.y.size
            ll = -0.5 * n * np.log(2 * np.pi * sigma**2) - 0.5 * r2 / sigma**2

        finite = np.isfinite(ll)
        if not np.any(finite):
            raise LikelihoodUnderflow("conditional likelihood underflowed for every draw")
        ll = np.where(finite, ll, -np.inf)
        value = float(logsumexp(ll) - np.log(e_draws))
        if not want_grad:
            return value

        w = np.exp(ll - logsumexp(ll))  # (E,)
        if self.spec.family == "binomial":
            resid = self.y - self.spec.trials * expit(eta)  # (E, n)
        else:
            sigma = self.sigma_eps(tdict)
            resid = (self.y - eta) / sigma**2
        grad = np.zeros(len(self.theta_labels))
        grad[: self.n_beta] = self.bundle.x_cols.T @ (w @ resid)
        if self.var_labels:
            jac = self.alpha_logsd_jac(tdict)
            # d eta / d gamma_k for draw e is A (alpha_e * jac[:, k])
            proj = resid @ self.a_mat  # (E, n_alpha)
            per_draw = (proj * alpha) @ jac  # (E, n_var)
            gvar = w @ per_draw
            if self.spec.family == "normal":
                lbl = "log_prec:eps"
                if lbl in self.var_labels:
                    sigma = self.sigma_eps(tdict)
                    j = self.var_labels.index(lbl)
                    n = self.y.size
                    r2 = np.sum((self.y - eta) ** 2, axis=1)
                    gvar[j] += w @ (0.5 * n - 0.5 * r2 / sigma**2)
            grad[self.n_beta :] = gvar
        return value, grad


# ---------------------------------------------------------------------------
# public operations


def marginal_loglik(
    model: GammModel,
    theta: np.ndarray,
    y: np.ndarray,
    design: Design,
    e_draws: int = 500,
    seed: int = 0,
    bundle: BasisBundle | None = None,
) -> float:
    """Monte Carlo approximation of log p(y | theta, d).

    Latent coefficients are drawn from their priors given theta's variance
    components using a stream fixed by ``seed``; models without latent
    coefficients evaluate the conditional likelihood exactly.
    """
    if e_draws < 1:
        raise InvalidParameter("e_draws must be >= 1")
    ctx = _FitContext(model, y, design, bundle)
    if ctx.n_alpha == 0:
        beta, tdict = ctx.split(theta)
        sigma = ctx.sigma_eps(tdict) if model.spec.family == "normal" else 0.0
        return _conditional_loglik(model.spec, ctx.y, ctx.bundle.x_cols @ beta, sigma)
    return ctx.marginal_loglik_mc(np.asarray(theta, dtype=float), ctx.crn_eps(e_draws, seed))


def fit_theta(
    model: GammModel,
    prior: GaussianDist,
    y: np.ndarray,
    design: Design,
    opts: FitOptions | None = None,
    bundle: BasisBundle | None = None,
) -> ThetaFit:
    """Laplace fit of the theta block: quasi-Newton ascent of the log
    marginal likelihood plus log prior, Hessian by central differences of the
    gradient at the mode."""
    opts = opts or FitOptions()
    ctx = _FitContext(model, y, design, bundle)
    prior_theta = prior.marginal(ctx.theta_labels)
    prior_chol = cho_factor(prior_theta.cov, lower=True)

    def prior_logpdf_and_grad(theta):
        d = theta - prior_theta.mean
        w = cho_solve(prior_chol, d)
        logdet = 2.0 * float(np.sum(np.log(np.diag(prior_chol[0]))))
        val = -0.5 * (d @ w + logdet + theta.size * np.log(2 * np.pi))
        return val, -w

    exact = opts.method == "exact" or (
        opts.method == "auto" and model.spec.family == "normal" and model.spec.link == "identity"
    )
    use_mc = not exact and ctx.n_alpha > 0
    eps = ctx.crn_eps(opts.e_draws, opts.seed) if use_mc else None

    def loglik_and_grad(theta):
        if use_mc:
            try:
                return ctx.marginal_loglik_mc(theta, eps, want_grad=True)
            except LikelihoodUnderflow:
                return _UNDERFLOW_SENTINEL, np.zeros(theta.size)
        if exact and ctx.n_alpha > 0:
            return ctx.marginal_loglik_exact(theta, want_grad=True)
        # no latent coefficients: conditional likelihood is the marginal one
        return ctx.conditional_loglik_and_grad(theta)

    def objective_and_grad(theta):
        lv, lg = loglik_and_grad(theta)
        pv, pg = prior_logpdf_and_grad(theta)
        return lv + pv, lg + pg

    def neg(theta):
        v, g = objective_and_grad(theta)
        return -v, -g

    res = minimize(
        neg,
        prior_theta.mean.copy(),
        jac=True,
        method="BFGS",
        options={"maxiter": opts.max_iter, "gtol": 0.1 * opts.grad_tol},
    )
    theta_star = res.x
    value, grad = objective_and_grad(theta_star)
    converged = bool(np.max(np.abs(grad)) < opts.grad_tol)

    def grad_only(theta):
        return objective_and_grad(theta)[1]

    hess = -_central_jacobian(grad_only, theta_star, opts.hess_step)
    hess = 0.5 * (hess + hess.T)
    hess, regularized = _regularize_pd(hess)
    return ThetaFit(
        theta_star=theta_star,
        hessian=hess,
        converged=converged,
        iterations=int(res.nit),
        logpost_at_mode=float(value),
        regularized=regularized,
    )


def fit_alpha(
    model: GammModel,
    theta_star: np.ndarray,
    y: np.ndarray,
    design: Design,
    bundle: BasisBundle | None = None,
    max_iter: int = 100,
    tol: float = 1e-9,
) -> AlphaFit:
    """Conditional Laplace fit of the latent coefficients given theta*."""
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    if not np.all(np.isfinite(theta_star)):
        raise InvalidParameter("theta_star must be finite")
    ctx = _FitContext(model, y, design, bundle)
    if ctx.n_alpha == 0:
        return AlphaFit(alpha_star=np.zeros(0), hessian=np.zeros((0, 0)))
    beta, tdict = ctx.split(theta_star)
    offset = ctx.bundle.x_cols @ beta
    prec_diag = 1.0 / ctx.alpha_var(tdict)
    a = ctx.a_mat

    if model.spec.family == "normal":
        sigma = ctx.sigma_eps(tdict)
        h = a.T @ a / sigma**2 + np.diag(prec_diag)
        rhs = a.T @ (ctx.y - offset) / sigma**2
        chol = cho_factor(h, lower=True)
        return AlphaFit(alpha_star=cho_solve(chol, rhs), hessian=h)

    m = model.spec.trials
    alpha = np.zeros(ctx.n_alpha)
    h = None
    for _ in range(max_iter):
        eta = offset + a @ alpha
        p = expit(eta)
        grad = a.T @ (ctx.y - m * p) - prec_diag * alpha
        w = m * p * (1.0 - p)
        h = (a.T * w) @ a + np.diag(prec_diag)
        step = cho_solve(cho_factor(h, lower=True), grad)
        alpha = alpha + step
        if np.max(np.abs(grad)) < tol:
            break
    eta = offset + a @ alpha
    p = expit(eta)
    w = m * p * (1.0 - p)
    h = (a.T * w) @ a + np.diag(prec_diag)
    return AlphaFit(alpha_star=alpha, hessian=h)


def log_evidence(fit: ThetaFit) -> float:
    """Laplace approximation to the log model evidence.

    log p(y | theta*) + log p(theta*) + (T/2) log 2 pi - 0.5 log |B(theta*)|,
    where the first two terms are the objective value at the mode.
    """
    if not fit.converged:
        raise EvidenceUndefined("theta fit did not converge")
    t = fit.theta_star.size
    try:
        chol = cho_factor(fit.hessian, lower=True)
    except np.linalg.LinAlgError as exc:
        raise EvidenceUndefined("Hessian is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return fit.logpost_at_mode + 0.5 * t * np.log(2 * np.pi) - 0.5 * logdet


def posterior_model_probs(log_evidences, prior_probs) -> np.ndarray:
    """Posterior model probabilities from log evidences and prior weights."""
    log_evidences = np.asarray(log_evidences, dtype=float).ravel()
    prior_probs = np.asarray(prior_probs, dtype=float).ravel()
    if log_evidences.size != prior_probs.size:
        raise ShapeMismatch("log evidence and prior probability lengths differ")
    if abs(prior_probs.sum() - 1.0) > 1e-8 or np.any(prior_probs < 0):
        raise InvalidParameter("prior probabilities must be nonnegative and sum to 1")
    logw = np.log(prior_probs) + log_evidences
    return np.exp(logw - logsumexp(logw))


def laplace_fit(
    model: GammModel,
    prior: GaussianDist,
    y: np.ndarray,
    design: Design,
    opts: FitOptions | None = None,
    bundle: BasisBundle | None = None,
) -> LaplaceFit:
    """Both Laplace steps plus the evidence, packaged together."""
    tfit = fit_theta(model, prior, y, design, opts=opts, bundle=bundle)
    afit = fit_alpha(model, tfit.theta_star, y, design, bundle=bundle)
    evidence = log_evidence(tfit) if tfit.converged else float("nan")
    return LaplaceFit(
        theta_star=tfit.theta_star,
        theta_hessian=tfit.hessian,
        alpha_star=afit.alpha_star,
        alpha_hessian=afit.hessian,
        log_evidence=evidence,
        converged=tfit.converged,
        iterations=tfit.iterations,
    )


def fit_pilot(
    model: GammModel,
    y: np.ndarray,
    design: Design,
    vague_prior: GaussianDist,
    opts: FitOptions | None = None,
) -> GaussianDist:
    """Fit pilot data and package the posterior as a design prior.

    Returns a joint Gaussian over (theta, alpha) with block-diagonal
    covariance, suitable as the prior for expected-utility evaluation.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise InvalidParameter("pilot data is empty")
    tfit = fit_theta(model, vague_prior, y, design, opts=opts)
    if not tfit.converged:
        raise EstimationFailed("pilot theta fit did not converge")
    afit = fit_alpha(model, tfit.theta_star, y, design)
    theta_block = GaussianDist(
        mean=tfit.theta_star,
        cov=_chol_inverse(tfit.hessian),
        labels=tuple(model.theta_labels()),
    )
    if afit.alpha_star.size == 0:
        return theta_block
    alpha_block = GaussianDist(
        mean=afit.alpha_star,
        cov=_chol_inverse(afit.hessian),
        labels=tuple(model.alpha_labels(design)),
    )
    return concat_gaussians([theta_block, alpha_block])


# ---------------------------------------------------------------------------
# model enumeration for evidence-based selection


def enumerate_model_specs(
    smooth_candidates: dict[str, int],
    linear_candidates: tuple[str, ...] = (),
    interaction_k: int = 3,
    correlations: dict[tuple[str, str], float] | None = None,
    corr_limit: float = 0.5,
) -> list[GammSpec]:
    """All covariate subsets plus two-way interactions where both mains are
    present, dropping models that contain a covariate pair whose absolute
    correlation exceeds the limit.  Specs are returned with normal/identity
    defaults; callers adapt family and random effects as needed."""
    names = list(smooth_candidates) + list(linear_candidates)
    correlations = correlations or {}

    def too_correlated(subset):
        for a, b in itertools.combinations(subset, 2):
            c = correlations.get((a, b), correlations.get((b, a), 0.0))
            if abs(c) > corr_limit:
                return True
        return False

    specs: list[GammSpec] = []
    for r in range(len(names) + 1):
        for subset in itertools.combinations(names, r):
            if too_correlated(subset):
                continue
            smooths = tuple((n, smooth_candidates[n]) for n in subset if n in smooth_candidates)
            linears = tuple(n for n in subset if n in linear_candidates)
            pairs = list(itertools.combinations(subset, 2))
            for ir in range(len(pairs) + 1):
                for chosen in itertools.combinations(pairs, ir):
                    inter = tuple((a, b, interaction_k, interaction_k) for a, b in chosen)
                    specs.append(
                        GammSpec(
                            family="normal",
                            link="identity",
                            smooth_terms=smooths,
                            linear_terms=linears,
                            interactions=inter,
                        )
                    )
    return specs


# ---------------------------------------------------------------------------
# numerics helpers


def _central_grad(f, x: np.ndarray, rel_step: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _central_jacobian(g, x: np.ndarray, rel_step: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((g(xp) - g(xm)) / (2 * h))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def _regularize_pd(h: np.ndarray, floor: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Ridge the matrix up so its smallest eigenvalue reaches the floor."""
    if h.size == 0:
        return h, False
    evals = np.linalg.eigvalsh(h)
    if evals[0] >= floor:
        return h, False
    return h + (floor - evals[0]) * np.eye(h.shape[0]), True


def _chol_inverse(h: np.ndarray) -> np.ndarray:
    chol = cho_factor(h, lower=True)
    inv = cho_solve(chol, np.eye(h.shape[0]))
    return 0.5 * (inv + inv.T)
