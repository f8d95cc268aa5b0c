"""YAML configuration loading, validation, hashing, and the serialization
of fitted models and design priors.

A design prior file carries the fitted prior (labels, mean, covariance), the
serialized model bases (so later runs evaluate new designs through exactly
the basis functions frozen at fit time), and the hash of the model config
that produced it.  A run whose model config hashes differently from its
prior file is refused.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .basis import OSullivanBasis, TensorSmooth
from .errors import ConfigError
from .gamm import GammModel, GammSpec, GaussianDist, RandomEffect

PRIOR_FORMAT = "gamdesign-prior-v1"


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: invalid YAML{where}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def config_hash(section) -> str:
    """Stable hash of a config section (canonical JSON, sorted keys)."""
    blob = json.dumps(section, sort_keys=True, separators=(",", ":"), default=_jsonify)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()[:16]


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot hash config value of type {type(obj)!r}")


def require(cfg: dict, key: str, context: str = "config"):
    if key not in cfg:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return cfg[key]


# ---------------------------------------------------------------------------
# model construction


def spec_from_config(mcfg: dict) -> GammSpec:
    smooths = tuple(
        (str(require(s, "name", "model.smooths")), int(require(s, "k", "model.smooths")))
        for s in mcfg.get("smooths", [])
    )
    interactions = tuple(
        (str(i["a"]), str(i["b"]), int(i.get("ka", 3)), int(i.get("kb", 3)))
        for i in mcfg.get("interactions", [])
    )
    re_cfg = mcfg.get("random_effect", {}) or {}
    random_effect = RandomEffect(
        kind=str(re_cfg.get("kind", "none")),
        groupings=tuple(re_cfg.get("groupings", ())),
        matern_kappa=float(re_cfg.get("matern_kappa", 1.5)),
    )
    family = str(mcfg.get("family", "normal"))
    if family == "binomial":
        scale = float(mcfg.get("trials", mcfg.get("scale", 1)))
    else:
        scale = float(mcfg.get("scale", 1.0))
    return GammSpec(
        family=family,
        link=str(mcfg.get("link", "logit" if family == "binomial" else "identity")),
        scale=scale,
        smooth_terms=smooths,
        linear_terms=tuple(mcfg.get("linears", ())),
        interactions=interactions,
        random_effect=random_effect,
    )


def basis_data_from_config(mcfg: dict, spec: GammSpec) -> dict[str, np.ndarray]:
    """Covariate samples on which the model bases are frozen.

    Each covariate needs either a pilot data column (handled by the caller)
    or a reference range {lo, hi, points} from which an equally spaced grid
    is built.
    """
    ranges = mcfg.get("basis_ranges", {}) or {}
    data = {}
    for name in spec.covariate_names:
        if name not in ranges:
            raise ConfigError(
                f"model.basis_ranges: missing range for covariate {name!r}"
            )
        r = ranges[name]
        data[name] = np.linspace(float(r["lo"]), float(r["hi"]), int(r.get("points", 101)))
    return data


def model_from_config(
    mcfg: dict, covariates: dict[str, np.ndarray] | None = None
) -> GammModel:
    """Build a model from the config's model section.

    Bases are frozen on the given covariate samples (pilot data) or, when
    none are given, on equally spaced grids from ``model.basis_ranges``.
    """
    spec = spec_from_config(mcfg)
    if covariates is None:
        covariates = basis_data_from_config(mcfg, spec)
    fixed = {str(k): float(v) for k, v in (mcfg.get("fixed", {}) or {}).items()}
    return GammModel.fit_bases(spec, covariates, fixed=fixed)


def prior_from_config(pcfg: dict, labels: list[str]) -> GaussianDist:
    """Diagonal Gaussian prior over the given labels from config values."""
    sd_default = float(pcfg.get("sd_default", 10.0))
    by_label = {
        str(p["label"]): (float(p.get("mean", 0.0)), float(require(p, "sd", "prior.parameters")))
        for p in pcfg.get("parameters", [])
    }
    unknown = set(by_label) - set(labels)
    if unknown:
        raise ConfigError(f"prior.parameters: unknown labels {sorted(unknown)}")
    means = np.array([by_label.get(lbl, (0.0, sd_default))[0] for lbl in labels])
    sds = np.array([by_label.get(lbl, (0.0, sd_default))[1] for lbl in labels])
    return GaussianDist.from_diagonal(labels, means, sds)


# ---------------------------------------------------------------------------
# pilot data


def read_table(path) -> dict[str, np.ndarray]:
    """Read a delimited text table into named float columns."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    cols = {}
    for name in rows[0]:
        try:
            cols[name] = np.array([float(r[name]) for r in rows])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: column {name!r} is not numeric") from exc
    return cols


# ---------------------------------------------------------------------------
# prior/model files


def _basis_to_dict(b: OSullivanBasis) -> dict:
    return {
        "k": b.k,
        "lo": b.lo,
        "hi": b.hi,
        "interior_knots": b.interior_knots.tolist(),
        "transform_matrix": b.transform_matrix.tolist(),
        "linear_correction": b.linear_correction.tolist(),
    }


def _basis_from_dict(d: dict) -> OSullivanBasis:
    return OSullivanBasis(
        k=int(d["k"]),
        lo=float(d["lo"]),
        hi=float(d["hi"]),
        interior_knots=np.asarray(d["interior_knots"], dtype=float),
        transform_matrix=np.asarray(d["transform_matrix"], dtype=float),
        linear_correction=np.asarray(d["linear_correction"], dtype=float),
    )


def model_to_dict(model: GammModel) -> dict:
    spec = model.spec
    return {
        "family": spec.family,
        "link": spec.link,
        "scale": spec.scale,
        "smooth_terms": [list(t) for t in spec.smooth_terms],
        "linear_terms": list(spec.linear_terms),
        "interactions": [list(t) for t in spec.interactions],
        "random_effect": {
            "kind": spec.random_effect.kind,
            "groupings": list(spec.random_effect.groupings),
            "matern_kappa": spec.random_effect.matern_kappa,
        },
        "fixed": dict(model.fixed),
        "linear_ranges": {k: list(v) for k, v in model.linear_ranges.items()},
        "bases": {name: _basis_to_dict(b) for name, b in model.bases.items()},
        "tensors": {
            key: {
                "basis_a": _basis_to_dict(t.basis_a),
                "basis_b": _basis_to_dict(t.basis_b),
                "center_a": t.center_a.tolist(),
                "center_b": t.center_b.tolist(),
            }
            for key, t in model.tensors.items()
        },
    }


def model_from_dict(d: dict) -> GammModel:
    re_d = d["random_effect"]
    spec = GammSpec(
        family=d["family"],
        link=d["link"],
        scale=float(d["scale"]),
        smooth_terms=tuple((str(n), int(k)) for n, k in d["smooth_terms"]),
        linear_terms=tuple(d["linear_terms"]),
        interactions=tuple((str(a), str(b), int(ka), int(kb)) for a, b, ka, kb in d["interactions"]),
        random_effect=RandomEffect(
            kind=re_d["kind"],
            groupings=tuple(re_d["groupings"]),
            matern_kappa=float(re_d["matern_kappa"]),
        ),
    )
    bases = {name: _basis_from_dict(b) for name, b in d["bases"].items()}
    tensors = {
        key: TensorSmooth(
            basis_a=_basis_from_dict(t["basis_a"]),
            basis_b=_basis_from_dict(t["basis_b"]),
            center_a=np.asarray(t["center_a"], dtype=float),
            center_b=np.asarray(t["center_b"], dtype=float),
        )
        for key, t in d["tensors"].items()
    }
    return GammModel(
        spec=spec,
        bases=bases,
        tensors=tensors,
        fixed=dict(d["fixed"]),
        linear_ranges={k: (float(v[0]), float(v[1])) for k, v in d.get("linear_ranges", {}).items()},
    )


def write_prior_file(
    path, prior: GaussianDist, model: GammModel, model_hash: str, seed: int
) -> None:
    payload = {
        "format": PRIOR_FORMAT,
        "config_hash": model_hash,
        "seed": int(seed),
        "labels": list(prior.labels),
        "mean": prior.mean.tolist(),
        "cov": prior.cov.tolist(),
        "model": model_to_dict(model),
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_prior_file(path, expected_hash: str | None = None) -> tuple[GaussianDist, GammModel, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"prior file not found: {path}")
    with open(path, "r", encoding="ascii") as fh:
        payload = json.load(fh)
    if payload.get("format") != PRIOR_FORMAT:
        raise ConfigError(f"{path}: not a design prior file")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise ConfigError(
            f"{path}: prior was fitted under model config hash {payload['config_hash']}, "
            f"but this run's model config hashes to {expected_hash}"
        )
    prior = GaussianDist(
        mean=np.asarray(payload["mean"], dtype=float),
        cov=np.asarray(payload["cov"], dtype=float),
        labels=tuple(payload["labels"]),
    )
    return prior, model_from_dict(payload["model"]), payload
