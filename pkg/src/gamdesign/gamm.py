"""Declarative GA(M)M specification, Gaussian parameter distributions,
linear-predictor evaluation and prior-predictive simulation.

A :class:`GammSpec` declares the model structure (family/link, smooth and
linear covariates, tensor interactions, random effects).  A :class:`GammModel`
binds a spec to fitted basis objects so any design can be mapped to the same
basis functions and normalization constants, and handles the parameter layout:

* theta block: regression coefficients plus any free variance parameters,
  carried on the log-precision scale (``log(1/sigma^2)``) or, for smoothing
  parameters, the log-smoothing scale (``log(lambda)``).
* alpha block: spline coefficients ``u``, tensor coefficients ``v`` and the
  random effects ``s`` (and ``t`` for a second grouping), all of which have a
  diagonal Gaussian prior given the variance parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, kv, expit

from .basis import BasisBundle, OSullivanBasis, TensorSmooth, rowwise_kronecker
from .errors import (
    InvalidParameter,
    ShapeMismatch,
    SimulationOverflow,
    NotPositiveDefinite,
)
from .rng import rng_for

INTERCEPT = "intercept"


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class RandomEffect:
    """Random-effect structure of a GAMM.

    kind: "none", "grouped" or "spatial_matern".  A grouped effect uses the
    group labels carried by the design (named group sets, e.g. a spatial
    fishnet and optionally a year grouping); a Matern effect uses the design's
    point coordinates and is supported for simulation only.
    """

    kind: str = "none"
    groupings: tuple[str, ...] = ()
    matern_kappa: float = 1.5

    def __post_init__(self):
        if self.kind not in ("none", "grouped", "spatial_matern"):
            raise InvalidParameter(f"unknown random effect kind {self.kind!r}")
        if self.kind == "grouped" and not (1 <= len(self.groupings) <= 2):
            raise InvalidParameter("grouped random effect needs one or two groupings")


@dataclass(frozen=True)
class GammSpec:
    family: str = "normal"  # "normal" or "binomial"
    link: str = "identity"  # "identity", "logit" or "log"
    scale: float = 1.0  # sigma_eps for normal, trial count for binomial
    smooth_terms: tuple[tuple[str, int], ...] = ()
    linear_terms: tuple[str, ...] = ()
    interactions: tuple[tuple[str, str, int, int], ...] = ()
    random_effect: RandomEffect = field(default_factory=RandomEffect)

    def __post_init__(self):
        if self.family not in ("normal", "binomial"):
            raise InvalidParameter(f"unsupported family {self.family!r}")
        if self.link not in ("identity", "logit", "log"):
            raise InvalidParameter(f"unsupported link {self.link!r}")
        if self.family == "binomial":
            if self.link != "logit":
                raise InvalidParameter("binomial family requires the logit link")
            if int(self.scale) < 1:
                raise InvalidParameter("binomial trial count must be >= 1")
        elif self.scale <= 0:
            raise InvalidParameter("normal scale sigma_eps must be > 0")
        mains = {name for name, _ in self.smooth_terms} | set(self.linear_terms)
        for a, b, _, _ in self.interactions:
            if a not in mains or b not in mains:
                raise InvalidParameter(
                    f"interaction {a}x{b} requires both main effects in the model"
                )

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.smooth_terms) + tuple(self.linear_terms)

    @property
    def trials(self) -> int:
        return int(self.scale)


# ---------------------------------------------------------------------------
# Gaussian distributions over labeled parameter vectors


@dataclass
class GaussianDist:
    """Mean/covariance pair over an ordered, labeled parameter vector."""

    mean: np.ndarray
    cov: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.cov = np.asarray(self.cov, dtype=float)
        self.labels = tuple(self.labels)
        if len(self.labels) != self.mean.size:
            raise ShapeMismatch("labels length must equal mean length")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ShapeMismatch("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise NotPositiveDefinite("covariance is not symmetric")
        try:
            self._chol = np.linalg.cholesky(0.5 * (self.cov + self.cov.T))
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite("covariance is not positive definite") from exc

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    def marginal(self, labels: "list[str] | tuple[str, ...]") -> "GaussianDist":
        idx = [self.labels.index(lbl) for lbl in labels]
        return GaussianDist(
            mean=self.mean[idx],
            cov=self.cov[np.ix_(idx, idx)],
            labels=tuple(labels),
        )

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.mean + self._chol @ rng.standard_normal(self.dim)
        eps = rng.standard_normal((size, self.dim))
        return self.mean + eps @ self._chol.T

    def logpdf(self, x: np.ndarray) -> float:
        from scipy.linalg import solve_triangular

        d = np.asarray(x, dtype=float) - self.mean
        w = solve_triangular(self._chol, d, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return float(-0.5 * (w @ w + logdet + self.dim * np.log(2 * np.pi)))

    @classmethod
    def from_diagonal(cls, labels, means, sds) -> "GaussianDist":
        means = np.asarray(means, dtype=float)
        sds = np.asarray(sds, dtype=float)
        if np.any(sds <= 0):
            raise InvalidParameter("standard deviations must be > 0")
        return cls(mean=means, cov=np.diag(sds**2), labels=tuple(labels))


def concat_gaussians(parts: "list[GaussianDist]") -> GaussianDist:
    """Block-diagonal concatenation of independent Gaussian blocks."""
    mean = np.concatenate([p.mean for p in parts])
    dim = mean.size
    cov = np.zeros((dim, dim))
    labels: list[str] = []
    ofs = 0
    for p in parts:
        cov[ofs : ofs + p.dim, ofs : ofs + p.dim] = p.cov
        labels.extend(p.labels)
        ofs += p.dim
    return GaussianDist(mean=mean, cov=cov, labels=tuple(labels))


# ---------------------------------------------------------------------------
# designs


@dataclass
class Design:
    """A point in the design space: covariate values plus optional metadata."""

    covariates: dict[str, np.ndarray]
    groups: dict[str, np.ndarray] = field(default_factory=dict)
    coords: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        self.groups = {k: np.asarray(v, dtype=int) for k, v in self.groups.items()}
        sizes = {v.size for v in self.covariates.values()}
        sizes |= {v.size for v in self.groups.values()}
        if len(sizes) > 1:
            raise ShapeMismatch("covariate and group vectors differ in length")

    @property
    def n(self) -> int:
        return next(iter(self.covariates.values())).size


# ---------------------------------------------------------------------------
# fitted model: spec + frozen bases + parameter layout


@dataclass
class GammModel:
    """A GammSpec bound to fitted bases and fixed variance parameters.

    ``fixed`` maps variance-parameter labels to values for parameters that are
    treated as known; any variance parameter not in ``fixed`` must appear in
    the prior used for fitting or design evaluation.
    """

    spec: GammSpec
    bases: dict[str, OSullivanBasis]
    tensors: dict[str, TensorSmooth]
    fixed: dict[str, float] = field(default_factory=dict)
    linear_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    # -- construction ------------------------------------------------------

    @classmethod
    def fit_bases(
        cls,
        spec: GammSpec,
        covariates: dict[str, np.ndarray],
        fixed: dict[str, float] | None = None,
    ) -> "GammModel":
        bases = {
            name: OSullivanBasis.fit(covariates[name], k)
            for name, k in spec.smooth_terms
        }
        tensors = {
            f"{a}x{b}": TensorSmooth.fit(covariates[a], covariates[b], ka, kb)
            for a, b, ka, kb in spec.interactions
        }
        linear_ranges = {}
        for name in spec.linear_terms:
            x = np.asarray(covariates[name], dtype=float)
            lo, hi = float(x.min()), float(x.max())
            if hi <= lo:
                raise InvalidParameter(f"linear covariate {name!r} is constant")
            linear_ranges[name] = (lo, hi)
        return cls(
            spec=spec,
            bases=bases,
            tensors=tensors,
            fixed=dict(fixed or {}),
            linear_ranges=linear_ranges,
        )

    # -- labels ------------------------------------------------------------

    def beta_labels(self) -> list[str]:
        labels = [f"beta:{INTERCEPT}"]
        labels += [f"beta:{name}" for name, _ in self.spec.smooth_terms]
        labels += [f"beta:{name}" for name in self.spec.linear_terms]
        return labels

    def variance_labels(self) -> list[str]:
        labels = []
        if self.spec.family == "normal":
            labels.append("log_prec:eps")
        for name, _ in self.spec.smooth_terms:
            labels.append(f"log_prec:u:{name}")
        for a, b, _, _ in self.spec.interactions:
            labels += [f"log_lambda:{a}x{b}:{f}" for f in range(3)]
        re = self.spec.random_effect
        if re.kind == "grouped":
            labels += [f"log_prec:phi{i+1}" for i in range(len(re.groupings))]
        elif re.kind == "spatial_matern":
            labels += ["log_prec:phi1", "log_scale:phi2"]
        return labels

    def theta_labels(self) -> list[str]:
        return self.beta_labels() + [
            lbl for lbl in self.variance_labels() if lbl not in self.fixed
        ]

    def alpha_labels(self, design: Design) -> list[str]:
        labels = []
        for name, k in self.spec.smooth_terms:
            labels += [f"u:{name}:{j}" for j in range(k)]
        for a, b, ka, kb in self.spec.interactions:
            labels += [f"v:{a}x{b}:{j}" for j in range((ka + 1) * (kb + 1))]
        re = self.spec.random_effect
        if re.kind == "grouped":
            for gi, gname in enumerate(re.groupings):
                sym = "s" if gi == 0 else "t"
                for g in self._group_levels(design, gname):
                    labels.append(f"{sym}:{gname}:{g}")
        elif re.kind == "spatial_matern":
            labels += [f"s:point:{i}" for i in range(design.n)]
        return labels

    @staticmethod
    def _group_levels(design: Design, gname: str) -> np.ndarray:
        if gname not in design.groups:
            raise ShapeMismatch(f"design is missing group labels {gname!r}")
        return np.unique(design.groups[gname])

    # -- design matrices ----------------------------------------------------

    def bundle(self, design: Design) -> BasisBundle:
        n = design.n
        x_parts = [np.ones(n)]
        z_parts, z_slices = [], {}
        w_parts, w_slices = [], {}
        penalty_sets, knots = {}, {}
        ofs = 0
        for name, k in self.spec.smooth_terms:
            xn, z = self.bases[name].transform(design.covariates[name])
            x_parts.append(xn)
            z_parts.append(z)
            z_slices[name] = slice(ofs, ofs + k)
            knots[name] = self.bases[name].knots
            ofs += k
        for name in self.spec.linear_terms:
            lo, hi = self.linear_ranges.get(name, (0.0, 1.0))
            x = np.asarray(design.covariates[name], dtype=float)
            x_parts.append(np.clip((x - lo) / (hi - lo), 0.0, 1.0))
        ofs = 0
        for a, b, ka, kb in self.spec.interactions:
            key = f"{a}x{b}"
            smooth = self.tensors[key]
            w = smooth.transform(design.covariates[a], design.covariates[b])
            w_parts.append(w)
            w_slices[key] = slice(ofs, ofs + w.shape[1])
            penalty_sets[key] = smooth.penalties()
            ofs += w.shape[1]
        return BasisBundle(
            x_cols=np.column_stack(x_parts),
            z_cols=np.column_stack(z_parts) if z_parts else np.zeros((n, 0)),
            w_cols=np.column_stack(w_parts) if w_parts else np.zeros((n, 0)),
            z_slices=z_slices,
            w_slices=w_slices,
            penalty_sets=penalty_sets,
            knot_locations=knots,
        )

    def alpha_design_matrix(self, design: Design, bundle: BasisBundle) -> np.ndarray:
        """The n x dim(alpha) matrix A with eta = X beta + A alpha."""
        parts = [bundle.z_cols, bundle.w_cols]
        re = self.spec.random_effect
        if re.kind == "grouped":
            for gname in re.groupings:
                levels = self._group_levels(design, gname)
                ind = (design.groups[gname][:, None] == levels[None, :]).astype(float)
                parts.append(ind)
        elif re.kind == "spatial_matern":
            parts.append(np.eye(design.n))
        return np.column_stack([p for p in parts if p.shape[1] > 0] or [np.zeros((design.n, 0))])

    # -- variance components -------------------------------------------------

    def _param(self, label: str, theta: dict[str, float]) -> float:
        if label in theta:
            return theta[label]
        if label in self.fixed:
            return self.fixed[label]
        if label == "log_prec:eps" and self.spec.family == "normal":
            return float(-2.0 * np.log(self.spec.scale))
        raise InvalidParameter(f"variance parameter {label!r} is neither free nor fixed")

    def sigma_eps(self, theta: dict[str, float]) -> float:
        return float(np.exp(-0.5 * self._param("log_prec:eps", theta)))

    def alpha_prior_variances(self, design: Design, theta: dict[str, float]) -> np.ndarray:
        """Diagonal prior variances of alpha given the variance parameters.

        All alpha blocks have diagonal priors in this parameterization: the
        tensor penalty matrices are diagonal, so sum_f lambda_f S_f is too.
        """
        var = []
        for name, k in self.spec.smooth_terms:
            s2 = np.exp(-self._param(f"log_prec:u:{name}", theta))
            var.append(np.full(k, s2))
        for a, b, ka, kb in self.spec.interactions:
            key = f"{a}x{b}"
            lam = [np.exp(self._param(f"log_lambda:{key}:{f}", theta)) for f in range(3)]
            s0, s1, s2m = self.tensors[key].penalties()
            prec = lam[0] * np.diag(s0) + lam[1] * np.diag(s1) + lam[2] * np.diag(s2m)
            var.append(1.0 / prec)
        re = self.spec.random_effect
        if re.kind == "grouped":
            for gi, gname in enumerate(re.groupings):
                phi = np.exp(-self._param(f"log_prec:phi{gi+1}", theta))
                var.append(np.full(self._group_levels(design, gname).size, phi))
        elif re.kind == "spatial_matern":
            raise InvalidParameter(
                "spatial_matern random effects are supported for simulation only"
            )
        return np.concatenate(var) if var else np.zeros(0)

    def theta_dict(self, theta: np.ndarray) -> dict[str, float]:
        return dict(zip(self.theta_labels(), np.asarray(theta, dtype=float)))


# ---------------------------------------------------------------------------
# linear predictor and response distributions


def linear_predictor(
    spec: GammSpec,
    bundle: BasisBundle,
    beta: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    s: np.ndarray,
    group_index: np.ndarray | None = None,
) -> np.ndarray:
    """eta = X beta + Z u + W v + s, with s mapped through the group index.

    ``s`` is a per-group vector when ``group_index`` is given, a per-point
    vector when it matches the row count, and ignored for models without a
    random effect.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if bundle.x_cols.shape[1] != beta.size:
        raise ShapeMismatch("beta length does not match fixed-effect columns")
    if bundle.z_cols.shape[1] != u.size:
        raise ShapeMismatch("u length does not match spline columns")
    if bundle.w_cols.shape[1] != v.size:
        raise ShapeMismatch("v length does not match tensor columns")
    eta = bundle.x_cols @ beta
    if u.size:
        eta = eta + bundle.z_cols @ u
    if v.size:
        eta = eta + bundle.w_cols @ v
    if spec.random_effect.kind != "none":
        s = np.asarray(s, dtype=float).ravel()
        if s.size == 0:
            pass
        elif group_index is not None:
            eta = eta + s[np.asarray(group_index, dtype=int)]
        elif s.size == eta.size:
            eta = eta + s
        else:
            raise ShapeMismatch("s needs a group index or one value per point")
    return eta


def inverse_link(link: str, eta: np.ndarray) -> np.ndarray:
    if link == "identity":
        return eta
    if link == "logit":
        return expit(eta)
    if link == "log":
        return np.exp(eta)
    raise InvalidParameter(f"unsupported link {link!r}")


def matern(h, phi1: float, phi2: float, kappa: float):
    """Matern covariance at distance ``h``; reduces to phi1 at h = 0."""
    if phi1 <= 0 or phi2 <= 0 or kappa <= 0:
        raise InvalidParameter("matern parameters must be strictly positive")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise InvalidParameter("distances must be nonnegative")
    scalar = h.ndim == 0
    h = np.atleast_1d(h)
    out = np.full(h.shape, float(phi1))
    pos = h > 0
    if np.any(pos):
        r = h[pos] / phi2
        out[pos] = (
            phi1 * (2.0 ** (1.0 - kappa) / np.exp(gammaln(kappa))) * r**kappa * kv(kappa, r)
        )
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# prior predictive simulation


def simulate_prior_predictive(
    model: GammModel,
    prior: GaussianDist,
    design: Design,
    seed: int,
    bundle: BasisBundle | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (theta, alpha, y) from the prior predictive distribution.

    theta is drawn from the Gaussian prior (restricted to the theta block);
    alpha is drawn hierarchically given theta's variance components; y is
    sampled from the family at the inverse-linked linear predictor.
    """
    spec = model.spec
    rng = rng_for(seed)
    bundle = bundle if bundle is not None else model.bundle(design)

    theta_labels = model.theta_labels()
    theta = prior.marginal(theta_labels).sample(rng)
    tdict = dict(zip(theta_labels, theta))

    re = spec.random_effect
    if re.kind == "spatial_matern":
        alpha = _draw_matern_field(model, design, tdict, rng)
        a_mat = np.eye(design.n)
        nb = len(model.beta_labels())
        eta = bundle.x_cols @ theta[:nb] + alpha
    else:
        var = model.alpha_prior_variances(design, tdict)
        alpha = np.sqrt(var) * rng.standard_normal(var.size)
        a_mat = model.alpha_design_matrix(design, bundle)
        nb = len(model.beta_labels())
        eta = bundle.x_cols @ theta[:nb]
        if alpha.size:
            eta = eta + a_mat @ alpha

    if not np.all(np.isfinite(eta)):
        bad = int(np.flatnonzero(~np.isfinite(eta))[0])
        raise SimulationOverflow(f"non-finite linear predictor at index {bad}", draw_index=bad)

    mu = inverse_link(spec.link, eta)
    if spec.family == "normal":
        sigma = model.sigma_eps(tdict)
        y = mu + sigma * rng.standard_normal(mu.size)
    else:
        y = rng.binomial(spec.trials, mu).astype(float)
    return theta, alpha, y


def _draw_matern_field(
    model: GammModel, design: Design, tdict: dict[str, float], rng: np.random.Generator
) -> np.ndarray:
    if design.coords is None:
        raise ShapeMismatch("spatial_matern simulation needs point coordinates")
    phi1 = np.exp(-model._param("log_prec:phi1", tdict))
    phi2 = np.exp(model._param("log_scale:phi2", tdict))
    pts = np.asarray(design.coords, dtype=float)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    cov = matern(dist, phi1, phi2, model.spec.random_effect.matern_kappa)
    cov[np.diag_indices_from(cov)] = phi1
    chol = np.linalg.cholesky(cov + 1e-10 * phi1 * np.eye(len(pts)))
    return chol @ rng.standard_normal(len(pts))
