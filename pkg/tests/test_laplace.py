import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logsumexp
from scipy.stats import multivariate_normal

from gamdesign.errors import (
    EvidenceUndefined,
    InvalidParameter,
    LikelihoodUnderflow,
    ShapeMismatch,
)
from gamdesign.gamm import Design, GammModel, GammSpec, GaussianDist, RandomEffect
from gamdesign.laplace import (
    FitOptions,
    enumerate_model_specs,
    fit_alpha,
    fit_pilot,
    fit_theta,
    laplace_fit,
    log_evidence,
    marginal_loglik,
    posterior_model_probs,
)
from gamdesign.rng import rng_for


def _normal_gam(n=30, k=4, sigma_u=5.0, sigma_eps=0.5, beta_sd=10.0, seed=0):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-1, 1, n))
    spec = GammSpec(family="normal", link="identity", scale=sigma_eps, smooth_terms=(("x", k),))
    fixed = {"log_prec:eps": -2 * np.log(sigma_eps), "log_prec:u:x": -2 * np.log(sigma_u)}
    model = GammModel.fit_bases(spec, {"x": x}, fixed=fixed)
    design = Design(covariates={"x": x})
    labels = model.theta_labels()
    prior = GaussianDist.from_diagonal(labels, np.zeros(len(labels)), np.full(len(labels), beta_sd))
    bundle = model.bundle(design)
    beta = rng.normal(0, 2, 2)
    u = sigma_u * rng.standard_normal(k)
    y = bundle.x_cols @ beta + bundle.z_cols @ u + sigma_eps * rng.standard_normal(n)
    return model, design, prior, y, bundle, (sigma_u, sigma_eps, beta_sd)


def _binomial_gamm(n=25, k=2, trials=20, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, n)
    spec = GammSpec(family="binomial", link="logit", scale=trials, smooth_terms=(("x", k),))
    model = GammModel.fit_bases(spec, {"x": x})
    design = Design(covariates={"x": x})
    y = rng.integers(0, trials + 1, n).astype(float)
    return model, design, y


# ---------------------------------------------------------------------------
# marginal likelihood


def test_marginal_loglik_no_latents_is_exact():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 20)
    spec = GammSpec(family="normal", link="identity", scale=0.8, linear_terms=("x",))
    model = GammModel.fit_bases(spec, {"x": x})
    model.fixed["log_prec:eps"] = -2 * np.log(0.8)
    design = Design(covariates={"x": x})
    y = rng.normal(size=20)
    theta = np.array([0.5, -1.0])
    got = marginal_loglik(model, theta, y, design, e_draws=1, seed=0)
    bundle = model.bundle(design)
    mu = bundle.x_cols @ theta
    expect = np.sum(-0.5 * np.log(2 * np.pi * 0.64) - 0.5 * (y - mu) ** 2 / 0.64)
    assert got == pytest.approx(expect, abs=1e-12)


def test_marginal_loglik_mc_matches_gauss_hermite_oracle():
    # binomial GAM with a 2-dim latent block: integrate alpha out on a
    # tensor Gauss-Hermite grid and compare with the MC estimate
    model, design, y = _binomial_gamm(n=10, k=2)
    theta = np.array([-0.5, 1.0, 0.0])  # beta0, beta1, log_prec:u
    trials = model.spec.trials
    bundle = model.bundle(design)
    sigma_u = np.exp(-0.5 * 0.0)

    nodes, weights = np.polynomial.hermite_e.hermegauss(60)
    const = float(np.sum(gammaln(trials + 1) - gammaln(y + 1) - gammaln(trials - y + 1)))

    def cond_loglik(a0, a1):
        eta = bundle.x_cols @ theta[:2] + bundle.z_cols @ np.array([a0, a1]) * 1.0
        return const + y @ eta - trials * np.sum(np.logaddexp(0, eta))

    total = -np.inf
    for i, a0 in enumerate(nodes):
        for j, a1 in enumerate(nodes):
            ll = cond_loglik(sigma_u * a0, sigma_u * a1)
            total = np.logaddexp(total, ll + np.log(weights[i]) + np.log(weights[j]))
    oracle = total - np.log(2 * np.pi)

    vals = [
        marginal_loglik(model, theta, y, design, e_draws=100_000, seed=s) for s in range(4)
    ]
    se = np.std(vals, ddof=1) / 2
    assert np.mean(vals) == pytest.approx(oracle, abs=max(3 * se, 5e-3))


def test_marginal_loglik_deterministic_by_seed_and_validates():
    model, design, y = _binomial_gamm()
    theta = np.zeros(3)
    a = marginal_loglik(model, theta, y, design, e_draws=200, seed=5)
    b = marginal_loglik(model, theta, y, design, e_draws=200, seed=5)
    assert a == b
    with pytest.raises(InvalidParameter):
        marginal_loglik(model, theta, y, design, e_draws=0, seed=5)
    with pytest.raises(ShapeMismatch):
        marginal_loglik(model, np.zeros(2), y, design)


def test_marginal_loglik_underflow_raises():
    model, design, y = _binomial_gamm(n=400, seed=3)
    # absurd latent variance makes the conditional likelihood non-finite
    # for every draw
    theta = np.array([0.0, 0.0, -2000.0])
    with np.errstate(all="ignore"), pytest.raises(LikelihoodUnderflow):
        marginal_loglik(model, theta, y, design, e_draws=50, seed=0)


# ---------------------------------------------------------------------------
# theta fit: conjugate exactness


def test_fit_theta_matches_conjugate_closed_form():
    model, design, prior, y, bundle, (sigma_u, sigma_eps, beta_sd) = _normal_gam()
    fit = fit_theta(model, prior, y, design)
    assert fit.converged
    q = np.column_stack([bundle.x_cols, bundle.z_cols])
    prior_var = np.r_[np.full(2, beta_sd**2), np.full(4, sigma_u**2)]
    prec = q.T @ q / sigma_eps**2 + np.diag(1 / prior_var)
    cov = np.linalg.inv(prec)
    mean = cov @ (q.T @ y) / sigma_eps**2
    assert np.allclose(fit.theta_star, mean[:2], atol=1e-8)
    assert np.allclose(np.linalg.inv(fit.hessian), cov[:2, :2], atol=1e-8)


def test_fit_alpha_normal_matches_joint_posterior():
    model, design, prior, y, bundle, (sigma_u, sigma_eps, beta_sd) = _normal_gam(seed=2)
    tfit = fit_theta(model, prior, y, design)
    afit = fit_alpha(model, tfit.theta_star, y, design)
    q = np.column_stack([bundle.x_cols, bundle.z_cols])
    prior_var = np.r_[np.full(2, beta_sd**2), np.full(4, sigma_u**2)]
    prec = q.T @ q / sigma_eps**2 + np.diag(1 / prior_var)
    mean = np.linalg.solve(prec, q.T @ y / sigma_eps**2)
    # joint-Gaussian linearity: the conditional mode at the marginal theta
    # mode equals the marginal alpha mean
    assert np.allclose(afit.alpha_star, mean[2:], atol=1e-8)
    # covariance is the conditional one (beta fixed at its mode)
    a = bundle.z_cols
    cond_prec = a.T @ a / sigma_eps**2 + np.eye(4) / sigma_u**2
    assert np.allclose(afit.hessian, cond_prec, atol=1e-8)


def test_fit_alpha_binomial_matches_newton_oracle():
    model, design, y = _binomial_gamm(n=40, k=3, seed=4)
    theta = np.array([-0.5, 2.0, 1.0])
    afit = fit_alpha(model, theta, y, design)
    bundle = model.bundle(design)
    a = model.alpha_design_matrix(design, bundle)
    var = model.alpha_prior_variances(design, model.theta_dict(theta))
    offset = bundle.x_cols @ theta[:2]
    trials = model.spec.trials

    def neg_logpost(alpha):
        eta = offset + a @ alpha
        return -(y @ eta - trials * np.sum(np.logaddexp(0, eta))) + 0.5 * np.sum(alpha**2 / var)

    res = minimize(neg_logpost, np.zeros(a.shape[1]), method="BFGS", options={"gtol": 1e-10})
    assert np.allclose(afit.alpha_star, res.x, atol=1e-6)
    # hessian is the analytic negative log-posterior curvature at the mode
    p = expit(offset + a @ afit.alpha_star)
    w = trials * p * (1 - p)
    expect_h = (a.T * w) @ a + np.diag(1 / var)
    assert np.allclose(afit.hessian, expect_h, atol=1e-8)


# ---------------------------------------------------------------------------
# evidence


def test_log_evidence_exact_for_gaussian_model():
    model, design, prior, y, bundle, (sigma_u, sigma_eps, beta_sd) = _normal_gam(seed=3)
    fit = fit_theta(model, prior, y, design)
    q = np.column_stack([bundle.x_cols, bundle.z_cols])
    prior_var = np.r_[np.full(2, beta_sd**2), np.full(4, sigma_u**2)]
    cov_y = sigma_eps**2 * np.eye(y.size) + (q * prior_var) @ q.T
    oracle = multivariate_normal(np.zeros(y.size), cov_y).logpdf(y)
    assert log_evidence(fit) == pytest.approx(oracle, abs=1e-6)


def test_log_evidence_binomial_matches_importance_sampling():
    model, design, y = _binomial_gamm(n=30, k=2, seed=6)
    # simulate coherent data so the posterior is well behaved
    labels = model.theta_labels()
    prior = GaussianDist.from_diagonal(labels, [0.0, 1.0, 1.0], [1.5, 1.5, 0.3])
    from gamdesign.gamm import simulate_prior_predictive

    _, _, y = simulate_prior_predictive(model, prior, design, seed=0)
    opts = FitOptions(e_draws=2000, seed=0)
    fit = fit_theta(model, prior, y, design, opts=opts)
    assert fit.converged
    got = log_evidence(fit)

    # importance-sampling oracle over (theta, alpha) jointly, proposal =
    # Laplace posterior x conditional alpha prior
    rng = rng_for(123)
    n_particles = 200_000
    cov_t = np.linalg.inv(fit.hessian)
    lt = np.linalg.cholesky(cov_t)
    thetas = fit.theta_star + rng.standard_normal((n_particles, 3)) @ (1.5 * lt).T
    bundle = model.bundle(design)
    a = model.alpha_design_matrix(design, bundle)
    trials = model.spec.trials
    const = float(np.sum(gammaln(trials + 1) - gammaln(y + 1) - gammaln(trials - y + 1)))
    prop = multivariate_normal(fit.theta_star, 2.25 * cov_t)
    logw = np.empty(n_particles)
    for i in range(n_particles):
        tdict = model.theta_dict(thetas[i])
        var = model.alpha_prior_variances(design, tdict)
        alpha = np.sqrt(var) * rng.standard_normal(var.size)
        eta = bundle.x_cols @ thetas[i, :2] + a @ alpha
        ll = const + y @ eta - trials * np.sum(np.logaddexp(0, eta))
        logw[i] = ll + prior.logpdf(thetas[i]) - prop.logpdf(thetas[i])
    oracle = logsumexp(logw) - np.log(n_particles)
    assert got == pytest.approx(oracle, abs=0.02 * abs(oracle))


def test_log_evidence_requires_convergence():
    model, design, prior, y, _, _ = _normal_gam(seed=4)
    fit = fit_theta(model, prior, y, design)
    fit.converged = False
    with pytest.raises(EvidenceUndefined):
        log_evidence(fit)


# ---------------------------------------------------------------------------
# model probabilities


def test_posterior_model_probs_softmax():
    probs = posterior_model_probs([-10.0, -11.0, -13.0], [1 / 3] * 3)
    w = np.exp([-10.0, -11.0, -13.0])
    assert np.allclose(probs, w / w.sum(), atol=1e-12)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_posterior_model_probs_extreme_evidences_stable():
    probs = posterior_model_probs([-100000.0, -100001.0], [0.5, 0.5])
    assert np.all(np.isfinite(probs))
    assert probs[0] > probs[1]
    assert probs.sum() == pytest.approx(1.0)


def test_posterior_model_probs_validation():
    with pytest.raises(ShapeMismatch):
        posterior_model_probs([1.0, 2.0], [1.0])
    with pytest.raises(InvalidParameter):
        posterior_model_probs([1.0, 2.0], [0.7, 0.7])


# ---------------------------------------------------------------------------
# pilot fitting


def test_fit_pilot_returns_block_diagonal_design_prior():
    model, design, prior, y, _, _ = _normal_gam(seed=5)
    out = fit_pilot(model, y, design, prior)
    assert out.labels[:2] == ("beta:intercept", "beta:x")
    assert sum(1 for l in out.labels if l.startswith("u:x:")) == 4
    nt = 2
    assert np.allclose(out.cov[:nt, nt:], 0.0)
    # the returned prior is usable as a theta prior for a refit
    refit = fit_theta(model, out, y, design)
    assert refit.converged


def test_fit_pilot_empty_data_errors():
    model, design, prior, y, _, _ = _normal_gam()
    with pytest.raises(InvalidParameter):
        fit_pilot(model, np.zeros(0), design, prior)


def test_laplace_fit_bundles_everything():
    model, design, prior, y, _, _ = _normal_gam(seed=6)
    fit = laplace_fit(model, prior, y, design)
    assert fit.converged
    assert np.all(np.linalg.eigvalsh(fit.theta_hessian) > 0)
    assert np.all(np.linalg.eigvalsh(fit.alpha_hessian) > 0)
    assert np.isfinite(fit.log_evidence)


# ---------------------------------------------------------------------------
# model enumeration


def test_enumerate_model_specs_counts():
    specs = enumerate_model_specs({"a": 3, "b": 3}, ())
    # subsets: {}, {a}, {b}, {a,b}; the last also with the a:b interaction
    assert len(specs) == 5
    names = {(s.smooth_terms, s.interactions) for s in specs}
    assert ((("a", 3), ("b", 3)), (("a", "b", 3, 3),)) in names


def test_enumerate_model_specs_correlation_filter():
    specs = enumerate_model_specs(
        {"a": 3, "b": 3}, (), correlations={("a", "b"): 0.9}, corr_limit=0.5
    )
    for s in specs:
        assert not (("a", 3) in s.smooth_terms and ("b", 3) in s.smooth_terms)
    assert len(specs) == 3
