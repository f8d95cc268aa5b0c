"""Command-line interface.

Subcommands:

* fit-pilot        pilot data -> design prior file (Laplace posterior)
* select-model     evidence sweep over covariate subsets -> model probabilities
* find-design      coordinate-exchange transect optimization -> design + trace
* evaluate-design  expected utility of one design -> JSON
* efficiency       relative-efficiency table across reference models
* corollary-study  expected-KLD grid over the fixed spread/replication designs

Every artifact embeds the config hash and seed; identical (config, seed)
runs emit byte-identical files regardless of --threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, report
from .config import (
    config_hash,
    load_config,
    model_from_config,
    prior_from_config,
    read_prior_file,
    read_table,
    require,
    write_prior_file,
)
from .conjugate import corollary_study, gam_problem, poly_problem
from .errors import ConfigError, GamDesignError
from .gamm import Design, GaussianDist
from .geo import (
    Raster,
    TransectParams,
    read_raster,
    transects_to_design,
)
from .laplace import (
    FitOptions,
    enumerate_model_specs,
    fit_pilot,
    fit_theta,
    log_evidence,
    posterior_model_probs,
)
from .optimize import Budget, Coordinate, DesignProblem, optimize_design
from .rng import rng_for
from .utility import expected_utility

TWO_PI = 2.0 * np.pi


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _limit_blas_threads()
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = _HANDLERS[args.command]
        handler(cfg, args, out)
    except (GamDesignError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gamdesign",
        description="Bayesian optimal design for generalized additive mixed models",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit-pilot", "fit pilot data and write a design prior file"),
        ("select-model", "evidence sweep over candidate covariate subsets"),
        ("find-design", "optimize a transect design by coordinate exchange"),
        ("evaluate-design", "expected utility of a design"),
        ("efficiency", "relative-efficiency table across reference models"),
        ("corollary-study", "expected-KLD grid over fixed benchmark designs"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--out", default="out", help="output directory (default ./out)")
        p.add_argument("--threads", type=int, default=1, help="worker thread cap")
        p.add_argument("--l-draws", type=int, default=None, help="override utility draw count")
        p.add_argument("--e-draws", type=int, default=None, help="override likelihood draw count")
    return parser


def _limit_blas_threads() -> None:
    # results must not depend on --threads; BLAS is pinned to one thread and
    # parallelism happens across independent candidate evaluations instead
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# artifact helpers


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def _pilot_design(mcfg: dict, pcfg: dict) -> tuple[dict, Design, np.ndarray]:
    table = read_table(require(pcfg, "data", "pilot"))
    response = str(pcfg.get("response", "y"))
    if response not in table:
        raise ConfigError(f"pilot data is missing the response column {response!r}")
    y = table[response]
    group_names = [str(g) for g in pcfg.get("groups", [])]
    spec = cfgmod.spec_from_config(mcfg)
    missing = [c for c in spec.covariate_names if c not in table]
    if missing:
        raise ConfigError(f"pilot data is missing covariate columns {missing}")
    covs = {c: table[c] for c in spec.covariate_names}
    groups = {g: table[g].astype(int) for g in group_names}
    return covs, Design(covariates=covs, groups=groups), y


# ---------------------------------------------------------------------------
# subcommands


def _cmd_fit_pilot(cfg: dict, args, out: Path) -> None:
    mcfg = require(cfg, "model")
    covs, design, y = _pilot_design(mcfg, require(cfg, "pilot"))
    model = model_from_config(mcfg, covariates=covs)
    vague = prior_from_config(cfg.get("prior", {}), model.theta_labels())
    opts = FitOptions(seed=args.seed, e_draws=args.e_draws or cfg.get("e_draws", 500))
    prior = fit_pilot(model, y, design, vague, opts=opts)
    mhash = config_hash(mcfg)
    write_prior_file(out / "prior.json", prior, model, mhash, args.seed)
    report.plot_pilot_prior(model, prior, out / "pilot_fit.png")
    _write_json(
        out / "pilot_summary.json",
        {
            "config_hash": mhash,
            "seed": args.seed,
            "n_pilot": int(y.size),
            "labels": list(prior.labels),
            "posterior_mean": prior.mean.tolist(),
            "posterior_sd": np.sqrt(np.diag(prior.cov)).tolist(),
        },
    )
    print(f"wrote {out / 'prior.json'}")


def _cmd_select_model(cfg: dict, args, out: Path) -> None:
    mcfg = require(cfg, "model")
    ccfg = require(cfg, "candidates")
    table = read_table(require(require(cfg, "pilot"), "data", "pilot"))
    response = str(cfg["pilot"].get("response", "y"))
    y = table[response]
    group_names = [str(g) for g in cfg["pilot"].get("groups", [])]

    smooth_cands = {str(k): int(v) for k, v in (ccfg.get("smooths", {}) or {}).items()}
    linear_cands = tuple(str(v) for v in ccfg.get("linears", ()))
    names = list(smooth_cands) + list(linear_cands)
    corr = {}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            corr[(a, b)] = float(np.corrcoef(table[a], table[b])[0, 1])
    specs = enumerate_model_specs(
        smooth_cands,
        linear_cands,
        interaction_k=int(ccfg.get("interaction_k", 3)),
        correlations=corr,
        corr_limit=float(ccfg.get("corr_limit", 0.5)),
    )
    re_spec = cfgmod.spec_from_config(mcfg)
    opts = FitOptions(seed=args.seed, e_draws=args.e_draws or cfg.get("e_draws", 500))
    sd_default = float(cfg.get("prior", {}).get("sd_default", 10.0))

    rows = []
    evidences = []
    for spec in specs:
        spec = dataclasses.replace(
            spec,
            family=re_spec.family,
            link=re_spec.link,
            scale=re_spec.scale,
            random_effect=re_spec.random_effect,
        )
        covs = {c: table[c] for c in spec.covariate_names}
        design = Design(
            covariates=covs if covs else {"_const": np.zeros(y.size)},
            groups={g: table[g].astype(int) for g in group_names},
        )
        from .gamm import GammModel

        model = GammModel.fit_bases(spec, covs, fixed=dict(mcfg.get("fixed", {}) or {}))
        labels = model.theta_labels()
        vague = GaussianDist.from_diagonal(labels, np.zeros(len(labels)), np.full(len(labels), sd_default))
        tfit = fit_theta(model, vague, y, design, opts=opts)
        if not tfit.converged:
            print(f"warning: fit did not converge for {_model_name(spec)}; skipped", file=sys.stderr)
            continue
        ev = log_evidence(tfit)
        rows.append([_model_name(spec), ev])
        evidences.append(ev)
    if not rows:
        raise ConfigError("no candidate model could be fitted")
    probs = posterior_model_probs(evidences, np.full(len(evidences), 1.0 / len(evidences)))
    order = np.argsort(-probs)
    table_rows = [[rows[i][0], rows[i][1], float(probs[i])] for i in order]
    mhash = config_hash({"model": mcfg, "candidates": ccfg})
    _write_csv(out / "model_probs.csv", ["model", "log_evidence", "posterior_prob"], table_rows)
    _write_json(
        out / "model_probs.json",
        {
            "config_hash": mhash,
            "seed": args.seed,
            "models": [
                {"model": r[0], "log_evidence": r[1], "posterior_prob": r[2]}
                for r in table_rows
            ],
        },
    )
    report.plot_model_probs([r[0] for r in table_rows], np.array([r[2] for r in table_rows]), out / "model_probs.png")
    print(f"wrote {out / 'model_probs.csv'}")


def _model_name(spec) -> str:
    parts = [f"s({n},k={k})" for n, k in spec.smooth_terms]
    parts += list(spec.linear_terms)
    parts += [f"{a}:{b}" for a, b, _, _ in spec.interactions]
    return " + ".join(parts) if parts else "intercept"


def _load_design_prior(cfg: dict):
    pcfg = require(cfg, "prior")
    if "file" in pcfg:
        expected = config_hash(cfg["model"]) if "model" in cfg else None
        prior, model, payload = read_prior_file(pcfg["file"], expected_hash=expected)
        return prior, model, payload["config_hash"]
    mcfg = require(cfg, "model")
    model = model_from_config(mcfg)
    prior = prior_from_config(pcfg, model.theta_labels())
    return prior, model, config_hash(mcfg)


def _transect_space(cfg: dict, raster: Raster):
    tcfg = require(cfg, "transects")
    count = int(require(tcfg, "count", "transects"))
    length = float(tcfg.get("length", 500.0))
    width = float(tcfg.get("width", 50.0))
    n_points = int(tcfg.get("n_points", 50))
    fishnet = float(tcfg.get("fishnet_size", 500.0))

    e_min, e_max, n_min, n_max = raster.extent
    e_centers = np.arange(e_min + fishnet / 2, e_max, fishnet)
    n_centers = np.arange(n_min + fishnet / 2, n_max, fishnet)
    mask = raster.mask("depth")
    nrows, ncols = raster.shape

    def center_valid(e, n):
        col = int((e - raster.origin_e) / raster.cell_size)
        row = int((raster.origin_n + nrows * raster.cell_size - n) / raster.cell_size)
        return 0 <= row < nrows and 0 <= col < ncols and mask[row, col]

    valid_e = np.array([e for e in e_centers if any(center_valid(e, n) for n in n_centers)])
    valid_n = np.array([n for n in n_centers if any(center_valid(e, n) for e in valid_e)])
    if valid_e.size == 0 or valid_n.size == 0:
        raise ConfigError("no valid fishnet cells on the raster")

    coords = []
    for i in range(count):
        coords.append(Coordinate(f"t{i}:e0", candidates=valid_e))
        coords.append(Coordinate(f"t{i}:n0", candidates=valid_n))
        coords.append(Coordinate(f"t{i}:omega", bounds=(0.0, TWO_PI)))
    meta = {
        "count": count,
        "length": length,
        "width": width,
        "n_points": n_points,
        "fishnet_size": fishnet,
        "valid_e": valid_e,
        "valid_n": valid_n,
    }
    return coords, meta


def _vector_to_transects(x: np.ndarray, meta: dict) -> list[TransectParams]:
    out = []
    for i in range(meta["count"]):
        e0, n0, omega = x[3 * i : 3 * i + 3]
        out.append(
            TransectParams(
                e0=float(e0),
                n0=float(n0),
                omega=float(omega),
                l_t=meta["length"],
                width=meta["width"],
            )
        )
    return out


def _initial_transects(meta: dict, raster: Raster, seed: int) -> np.ndarray:
    """A random feasible starting design: every transect stays in bounds."""
    rng = rng_for(seed, 99)
    x = []
    for _ in range(meta["count"]):
        for _attempt in range(1000):
            e0 = float(rng.choice(meta["valid_e"]))
            n0 = float(rng.choice(meta["valid_n"]))
            omega = float(rng.uniform(0.0, TWO_PI))
            t = TransectParams(e0=e0, n0=n0, omega=omega, l_t=meta["length"], width=meta["width"])
            try:
                transects_to_design(raster, [t], n_points=2, fishnet_size=meta["fishnet_size"])
            except GamDesignError:
                continue
            x.extend([e0, n0, omega])
            break
        else:
            raise ConfigError("could not find a feasible starting transect")
    return np.array(x)


def _cmd_find_design(cfg: dict, args, out: Path) -> None:
    prior, model, mhash = _load_design_prior(cfg)
    raster = read_raster(require(require(cfg, "transects"), "raster", "transects"))
    coords, meta = _transect_space(cfg, raster)
    ocfg = cfg.get("optimizer", {}) or {}
    ucfg = cfg.get("utility", {}) or {}
    l_draws = int(args.l_draws or ucfg.get("l_draws", 200))
    e_draws = int(args.e_draws or ucfg.get("e_draws", 30))
    fit_opts = FitOptions(e_draws=e_draws, max_iter=int(ucfg.get("max_iter", 100)))
    util_seed = _child_seed(args.seed, 11)

    def objective(x: np.ndarray) -> float:
        transects = _vector_to_transects(x, meta)
        design = transects_to_design(
            raster, transects, n_points=meta["n_points"], fishnet_size=meta["fishnet_size"]
        )
        est = expected_utility(model, prior, design, l_draws, util_seed, fit_opts=fit_opts)
        return est.value

    budget = Budget(
        max_sweeps=int(ocfg.get("max_sweeps", 2)),
        candidates_per_coord=ocfg.get("candidates_per_coord"),
        m_evals=int(ocfg.get("m_evals", 5)),
        rel_tol=float(ocfg.get("rel_tol", 1e-4)),
        threads=max(1, int(args.threads)),
    )
    problem = DesignProblem(coordinates=coords, objective=objective, budget=budget)
    init = _initial_transects(meta, raster, args.seed)
    best_x, trace = optimize_design(
        problem, restarts=int(ocfg.get("restarts", 1)), seed=args.seed, init=init
    )

    transects = _vector_to_transects(best_x, meta)
    design = transects_to_design(
        raster, transects, n_points=meta["n_points"], fishnet_size=meta["fishnet_size"]
    )
    est = expected_utility(model, prior, design, l_draws, util_seed, fit_opts=fit_opts)

    rows = []
    for i in range(design.n):
        rows.append(
            [
                design.meta["transect_id"][i],
                design.meta["point_id"][i],
                design.coords[i, 0],
                design.coords[i, 1],
                design.covariates["depth"][i],
                design.groups["cell"][i],
            ]
        )
    _write_csv(
        out / "design.csv",
        ["transect_id", "point_id", "easting", "northing", "depth", "fishnet_id"],
        rows,
    )
    _write_csv(
        out / "trace.csv",
        ["sweep", "coordinate", "old_value", "new_value", "objective"],
        [list(s) for s in trace.steps],
    )
    _write_json(
        out / "design.json",
        {
            "config_hash": mhash,
            "seed": args.seed,
            "l_draws": l_draws,
            "e_draws": e_draws,
            "expected_utility": est.value,
            "mc_se": est.mc_se,
            "failed_draws": est.failed_draws,
            "n_evals": trace.n_evals,
            "transects": [
                {"e0": t.e0, "n0": t.n0, "omega": t.omega, "l_t": t.l_t, "width": t.width}
                for t in transects
            ],
        },
    )
    report.plot_transects(raster, transects, design.coords, out / "design_map.png")
    report.plot_trace(trace.steps, out / "trace.png")
    print(f"wrote {out / 'design.csv'} (expected utility {est.value:.4f})")


def _cmd_evaluate_design(cfg: dict, args, out: Path) -> None:
    prior, model, mhash = _load_design_prior(cfg)
    dcfg = require(cfg, "design")
    ucfg = cfg.get("utility", {}) or {}
    l_draws = int(args.l_draws or ucfg.get("l_draws", 200))
    e_draws = int(args.e_draws or ucfg.get("e_draws", 30))
    fit_opts = FitOptions(e_draws=e_draws, max_iter=int(ucfg.get("max_iter", 100)))

    if "file" in dcfg:
        with open(dcfg["file"], "r", encoding="ascii") as fh:
            payload = json.load(fh)
        raster = read_raster(require(require(cfg, "transects"), "raster", "transects"))
        tcfg = cfg["transects"]
        transects = [
            TransectParams(
                e0=float(t["e0"]), n0=float(t["n0"]), omega=float(t["omega"]),
                l_t=float(t["l_t"]), width=float(t.get("width", 50.0)),
            )
            for t in payload["transects"]
        ]
        design = transects_to_design(
            raster,
            transects,
            n_points=int(tcfg.get("n_points", 50)),
            fishnet_size=float(tcfg.get("fishnet_size", 500.0)),
        )
    else:
        covs = {str(k): np.asarray(v, dtype=float) for k, v in require(dcfg, "covariates", "design").items()}
        groups = {str(k): np.asarray(v, dtype=int) for k, v in (dcfg.get("groups", {}) or {}).items()}
        design = Design(covariates=covs, groups=groups)

    est = expected_utility(model, prior, design, l_draws, _child_seed(args.seed, 11), fit_opts=fit_opts)
    _write_json(
        out / "utility.json",
        {
            "config_hash": mhash,
            "seed": args.seed,
            "l_draws": est.l_draws,
            "expected_utility": est.value,
            "mc_se": est.mc_se,
            "failed_draws": est.failed_draws,
        },
    )
    report.plot_utility(est.value, est.mc_se, out / "utility.png")
    print(f"wrote {out / 'utility.json'} (expected utility {est.value:.4f})")


def _cmd_efficiency(cfg: dict, args, out: Path) -> None:
    ecfg = cfg.get("efficiency", {}) or {}
    sigma_u_grid = [float(v) for v in ecfg.get("sigma_u", (1.0, 5.0, 10.0, 20.0))]
    k = int(ecfg.get("k", 6))
    sigma_eps = float(ecfg.get("sigma_eps", 1.0))
    n = int(ecfg.get("n", 12))
    n_cands = int(ecfg.get("candidates", 23))
    max_degree = int(ecfg.get("max_degree", 3))
    cands = np.linspace(-1.0, 1.0, n_cands)

    def optimal_design(problem) -> np.ndarray:
        coords = [Coordinate(f"x{i}", candidates=cands) for i in range(n)]
        budget = Budget(max_sweeps=20, threads=max(1, int(args.threads)))
        dp = DesignProblem(coords, lambda x: problem.expected_kld_analytic(x), budget)
        best, _ = optimize_design(dp, restarts=int(ecfg.get("restarts", 3)), seed=args.seed)
        return best

    references = {f"poly{d}": poly_problem(d, sigma_eps) for d in range(1, max_degree + 1)}
    ref_optima = {name: optimal_design(p) for name, p in references.items()}
    linear_design = ref_optima["poly1"]

    rows = []
    for sigma_u in sigma_u_grid:
        gam = gam_problem(k, sigma_u, sigma_eps)
        gam_design = optimal_design(gam)
        for ref_name, ref in references.items():
            denom = ref.expected_kld_analytic(ref_optima[ref_name])
            for dname, dvec in (("gam_optimal", gam_design), ("linear_optimal", linear_design)):
                eff = ref.expected_kld_analytic(dvec) / denom
                rows.append([sigma_u, dname, ref_name, eff, 0.0])
    mhash = config_hash(ecfg)
    _write_csv(
        out / "efficiency.csv",
        ["sigma_u", "design", "reference", "efficiency", "mc_se"],
        rows,
    )
    _write_json(
        out / "efficiency.json",
        {
            "config_hash": mhash,
            "seed": args.seed,
            "rows": [
                {"sigma_u": r[0], "design": r[1], "reference": r[2], "efficiency": r[3], "mc_se": r[4]}
                for r in rows
            ],
        },
    )
    report.plot_efficiency(
        [
            {"sigma_u": r[0], "design": r[1], "reference": r[2], "efficiency": r[3]}
            for r in rows
        ],
        out / "efficiency.png",
    )
    print(f"wrote {out / 'efficiency.csv'}")


def _cmd_corollary_study(cfg: dict, args, out: Path) -> None:
    ccfg = cfg.get("corollary", {}) or {}
    table = corollary_study(
        sigma_u_grid=tuple(float(v) for v in ccfg.get("sigma_u", (1.0, 10.0, 30.0))),
        k_grid=tuple(int(v) for v in ccfg.get("k", (3, 6, 12))),
        sigma_eps_grid=tuple(float(v) for v in ccfg.get("sigma_eps", (0.1, 1.0))),
        n_values=tuple(int(v) for v in ccfg.get("n", (12, 24))),
        l_draws=int(args.l_draws or ccfg.get("l_draws", 1000)),
        seed=args.seed,
        keep_draws=False,
    )
    rows = [
        [r["n"], r["design_index"], r["sigma_u"], r["K"], r["sigma_eps"], r["expected_kld"], r["mc_se"]]
        for r in table.rows
    ]
    _write_csv(
        out / "corollary.csv",
        ["n", "design_index", "sigma_u", "K", "sigma_eps", "expected_kld", "mc_se"],
        rows,
    )
    _write_json(
        out / "corollary.json",
        {"config_hash": config_hash(ccfg), "seed": args.seed, "n_rows": len(rows)},
    )
    report.plot_corollary(table.rows, out / "corollary.png")
    print(f"wrote {out / 'corollary.csv'}")


def _child_seed(seed: int, *path: int) -> int:
    return int(rng_for(seed, *path).integers(0, 2**63 - 1))


_HANDLERS = {
    "fit-pilot": _cmd_fit_pilot,
    "select-model": _cmd_select_model,
    "find-design": _cmd_find_design,
    "evaluate-design": _cmd_evaluate_design,
    "efficiency": _cmd_efficiency,
    "corollary-study": _cmd_corollary_study,
}


if __name__ == "__main__":
    sys.exit(main())
