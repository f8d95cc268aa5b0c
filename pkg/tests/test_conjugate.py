import numpy as np
import pytest

from gamdesign.conjugate import (
    CorollaryTable,
    GaussianLinearProblem,
    conjugate_posterior,
    corollary_designs,
    corollary_study,
    gam_problem,
    poly_problem,
)
from gamdesign.errors import InvalidParameter, NumericalSingularity
from gamdesign.rng import rng_for
from gamdesign.utility import kld_mvn


def _random_problem(seed, dim=4, n=15):
    rng = np.random.default_rng(seed)
    q_fixed = rng.normal(size=(n, dim))
    return (
        GaussianLinearProblem(
            features=lambda x, q=q_fixed: q,
            prior_var=rng.uniform(0.5, 4.0, dim),
            sigma_eps=float(rng.uniform(0.3, 1.5)),
        ),
        q_fixed,
    )


# ---------------------------------------------------------------------------
# posterior


def test_conjugate_posterior_matches_direct_formula():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(12, 3))
    y = rng.normal(size=12)
    mu0 = rng.normal(size=3)
    omega0 = np.diag([1.0, 4.0, 0.25])
    sigma = 0.7
    post = conjugate_posterior(q, y, mu0, omega0, sigma)
    prec = q.T @ q / sigma**2 + np.linalg.inv(omega0)
    cov = np.linalg.inv(prec)
    mean = cov @ (q.T @ y / sigma**2 + np.linalg.solve(omega0, mu0))
    assert np.allclose(post.mean, mean, atol=1e-10)
    assert np.allclose(post.cov, cov, atol=1e-10)


def test_conjugate_posterior_no_data_returns_prior():
    mu0 = np.array([1.0, -1.0])
    omega0 = np.diag([2.0, 3.0])
    post = conjugate_posterior(np.zeros((0, 2)), np.zeros(0), mu0, omega0, 1.0)
    assert np.allclose(post.mean, mu0)
    assert np.allclose(post.cov, omega0)


def test_conjugate_posterior_rejects_degenerate_prior():
    with pytest.raises(NumericalSingularity):
        conjugate_posterior(np.ones((3, 2)), np.zeros(3), np.zeros(2), np.zeros((2, 2)), 1.0)


def test_posterior_covariance_is_y_free_and_shrinks():
    problem, q = _random_problem(1)
    cov = problem.posterior_cov(np.zeros(1))
    # Loewner order: prior covariance minus posterior covariance is PSD
    diff = np.diag(problem.prior_var) - cov
    assert np.all(np.linalg.eigvalsh(diff) > -1e-10)


# ---------------------------------------------------------------------------
# expected KLD: brute-force Monte Carlo oracle


def test_expected_kld_matches_bruteforce_oracle():
    problem = gam_problem(k=3, sigma_u=10.0, sigma_eps=1.0)
    x = corollary_designs(12)[4]
    got, se = problem.expected_kld(x, l_draws=4000, seed=3)

    # oracle: simulate (theta, y), form the exact posterior, score the full
    # Gaussian KL divergence, average
    rng = rng_for(99)
    q = problem.features(x)
    mu0 = problem.mu0
    cov0 = np.diag(problem.prior_var)
    vals = []
    for _ in range(4000):
        theta = mu0 + np.sqrt(problem.prior_var) * rng.standard_normal(problem.dim)
        y = q @ theta + problem.sigma_eps * rng.standard_normal(q.shape[0])
        post = conjugate_posterior(q, y, mu0, cov0, problem.sigma_eps)
        vals.append(kld_mvn(post.mean, post.cov, mu0, cov0))
    oracle = np.mean(vals)
    oracle_se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert got == pytest.approx(oracle, abs=3 * np.hypot(se, oracle_se))


def test_expected_kld_analytic_matches_mc():
    problem = gam_problem(k=6, sigma_u=5.0, sigma_eps=0.5)
    for idx, x in corollary_designs(12).items():
        exact = problem.expected_kld_analytic(x)
        mc, se = problem.expected_kld(x, l_draws=20_000, seed=idx)
        assert mc == pytest.approx(exact, abs=4 * se)


def test_expected_kld_nonnegative_and_permutation_invariant():
    problem = poly_problem(2, sigma_eps=1.0)
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, 12)
    perm = rng.permutation(12)
    a = problem.expected_kld_analytic(x)
    b = problem.expected_kld_analytic(x[perm])
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-12)


def test_crn_pairing_reduces_difference_variance():
    problem = gam_problem(k=3, sigma_u=10.0, sigma_eps=0.5)
    designs = corollary_designs(12)
    crn = problem.crn(2000, 12, seed=11)
    d1 = problem.expected_kld_draws(designs[1], 2000, seed=0, crn=crn)
    d5 = problem.expected_kld_draws(designs[5], 2000, seed=0, crn=crn)
    paired_se = np.std(d1 - d5, ddof=1) / np.sqrt(2000)
    unpaired_se = np.hypot(np.std(d1, ddof=1), np.std(d5, ddof=1)) / np.sqrt(2000)
    assert paired_se < unpaired_se


# ---------------------------------------------------------------------------
# corollary designs and study


def test_corollary_designs_structure():
    d12 = corollary_designs(12)
    assert sorted(d12) == [1, 2, 3, 4, 5]
    assert all(len(x) == 12 for x in d12.values())
    assert np.array_equal(np.unique(d12[1]), [-1.0, 1.0])
    assert len(np.unique(d12[5])) == 12
    d24 = corollary_designs(24)
    assert sorted(d24) == [1, 2, 3, 4, 5, 6]
    assert all(len(x) == 24 for x in d24.values())
    with pytest.raises(InvalidParameter):
        corollary_designs(10)


def test_corollary_study_rankings_follow_spread_vs_replication():
    table = corollary_study(
        sigma_u_grid=(1.0, 30.0),
        k_grid=(3, 12),
        sigma_eps_grid=(0.1, 1.0),
        n_values=(12,),
        l_draws=500,
        seed=5,
    )
    # strong wiggliness, low noise: most-spread designs win
    top = table.ranking(12, 30.0, 12, 0.1)[0]
    assert top in (4, 5)
    # near-linear truth, high noise: replicated designs win
    top = table.ranking(12, 1.0, 3, 1.0)[0]
    assert top in (1, 2)
    # paired standard errors available for every comparison
    mean, se = table.paired_se(12, 30.0, 12, 0.1, 5, 1)
    assert mean > 2 * se


def test_corollary_study_deterministic():
    a = corollary_study(sigma_u_grid=(10.0,), k_grid=(6,), sigma_eps_grid=(1.0,), n_values=(12,), l_draws=200, seed=9)
    b = corollary_study(sigma_u_grid=(10.0,), k_grid=(6,), sigma_eps_grid=(1.0,), n_values=(12,), l_draws=200, seed=9)
    assert [r["expected_kld"] for r in a.rows] == [r["expected_kld"] for r in b.rows]
