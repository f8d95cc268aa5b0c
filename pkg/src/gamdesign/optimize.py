"""Design optimization by coordinate exchange.

Discrete coordinates are improved by exhaustive (or capped) candidate
evaluation; continuous coordinates by a one-dimensional Gaussian-process
emulator of the expected utility (approximate coordinate exchange).  The
objective is expected to be a deterministic function of the design for a
fixed seed, so exchanges are accepted on strict improvement and the trace of
accepted objective values is monotone non-decreasing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from .errors import GamDesignError, InvalidParameter
from .rng import rng_for


@dataclass(frozen=True)
class Coordinate:
    """One design coordinate: either a finite candidate set or an interval."""

    name: str
    candidates: np.ndarray | None = None
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.candidates is None) == (self.bounds is None):
            raise InvalidParameter(
                f"coordinate {self.name!r} must be discrete or continuous, not both"
            )
        if self.candidates is not None:
            object.__setattr__(
                self, "candidates", np.asarray(self.candidates, dtype=float).ravel()
            )
            if self.candidates.size == 0:
                raise InvalidParameter(f"coordinate {self.name!r} has no candidates")
        else:
            lo, hi = self.bounds
            if not lo < hi:
                raise InvalidParameter(f"coordinate {self.name!r} has an empty interval")

    @property
    def is_discrete(self) -> bool:
        return self.candidates is not None

    def random_value(self, rng: np.random.Generator) -> float:
        if self.is_discrete:
            return float(rng.choice(self.candidates))
        lo, hi = self.bounds
        return float(rng.uniform(lo, hi))


@dataclass
class Budget:
    max_sweeps: int = 5
    candidates_per_coord: int | None = None  # cap for discrete coordinates
    m_evals: int = 20  # objective evaluations per continuous coordinate step
    rel_tol: float = 1e-4
    threads: int = 1  # worker threads for independent candidate evaluations

    def __post_init__(self):
        if self.max_sweeps < 1 or self.m_evals < 3:
            raise InvalidParameter("budget must allow at least one sweep and 3 evaluations")
        if self.candidates_per_coord is not None and self.candidates_per_coord < 1:
            raise InvalidParameter("candidate cap must be >= 1")
        if self.threads < 1:
            raise InvalidParameter("threads must be >= 1")


@dataclass
class DesignProblem:
    """A design space plus a seed-bound expected-utility objective to maximize."""

    coordinates: list[Coordinate]
    objective: Callable[[np.ndarray], float]
    budget: Budget = field(default_factory=Budget)

    @property
    def dim(self) -> int:
        return len(self.coordinates)

    def random_design(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([c.random_value(rng) for c in self.coordinates])


@dataclass
class OptTrace:
    """Accepted exchanges: (sweep, coordinate index, old value, new value,
    objective after the exchange)."""

    steps: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    final_design: np.ndarray | None = None
    final_objective: float = float("-inf")
    n_evals: int = 0

    def record(self, sweep: int, coord: int, old: float, new: float, value: float):
        self.steps.append((int(sweep), int(coord), float(old), float(new), float(value)))

    @property
    def objectives(self) -> np.ndarray:
        return np.array([s[4] for s in self.steps])


def _capped_candidates(coord: Coordinate, incumbent: float, cap: int | None) -> np.ndarray:
    cands = coord.candidates
    if cap is None or cands.size <= cap:
        return cands
    # evenly spaced subsample of the ordered candidate list, keeping the
    # incumbent so the exchange can never lose ground
    order = np.argsort(cands)
    pick = np.unique(np.round(np.linspace(0, cands.size - 1, cap)).astype(int))
    chosen = cands[order][pick]
    if incumbent not in chosen:
        chosen = np.append(chosen, incumbent)
    return chosen


def _safe_eval(objective, x: np.ndarray, trace: OptTrace) -> float:
    trace.n_evals += 1
    try:
        return float(objective(x))
    except GamDesignError as exc:
        warnings.warn(f"candidate {x.tolist()} skipped: {exc}", stacklevel=2)
        return float("-inf")


def _eval_batch(objective, trials: list[np.ndarray], trace: OptTrace, threads: int) -> list[float]:
    """Evaluate independent candidates, in candidate order.

    Each evaluation is a deterministic serial computation, so the results do
    not depend on the thread count.
    """
    if threads <= 1 or len(trials) <= 1:
        return [_safe_eval(objective, t, trace) for t in trials]
    from concurrent.futures import ThreadPoolExecutor

    trace.n_evals += len(trials)

    def one(t):
        try:
            return float(objective(t))
        except GamDesignError as exc:
            warnings.warn(f"candidate {t.tolist()} skipped: {exc}", stacklevel=2)
            return float("-inf")

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, trials))


def coordinate_exchange(
    problem: DesignProblem,
    init: np.ndarray,
    seed: int = 0,
) -> tuple[np.ndarray, OptTrace]:
    """Cyclic coordinate exchange from a given initial design.

    Discrete coordinates are improved by candidate evaluation, continuous ones
    by a GP-emulated step; sweeps stop when a full sweep improves the
    objective by less than the budget's relative tolerance.
    """
    x = np.asarray(init, dtype=float).copy()
    if x.size != problem.dim:
        raise InvalidParameter("initial design does not match the coordinate count")
    budget = problem.budget
    trace = OptTrace()
    best = _safe_eval(problem.objective, x, trace)
    if not np.isfinite(best):
        raise InvalidParameter("objective is infeasible at the initial design")

    for sweep in range(budget.max_sweeps):
        sweep_start = best
        for ci, coord in enumerate(problem.coordinates):
            old = x[ci]
            if coord.is_discrete:
                cands = [
                    c
                    for c in _capped_candidates(coord, old, budget.candidates_per_coord)
                    if c != old
                ]
                trials = []
                for cand in cands:
                    trial = x.copy()
                    trial[ci] = cand
                    trials.append(trial)
                vals = _eval_batch(problem.objective, trials, trace, budget.threads)
                best_cand, best_val = old, best
                for cand, val in zip(cands, vals):
                    # strict improvement; ties retain the incumbent
                    if val > best_val:
                        best_cand, best_val = float(cand), val
                if best_cand != old:
                    x[ci] = best_cand
                    best = best_val
                    trace.record(sweep, ci, old, best_cand, best)
            else:
                new_val, new_obj = ace_coordinate(
                    problem, x, ci, budget.m_evals, rng_seed(seed, sweep, ci), trace=trace
                )
                if new_obj > best:
                    x[ci] = new_val
                    best = new_obj
                    trace.record(sweep, ci, old, new_val, best)
        improvement = best - sweep_start
        if improvement < budget.rel_tol * max(1.0, abs(sweep_start)):
            break

    trace.final_design = x
    trace.final_objective = best
    return x, trace


def ace_coordinate(
    problem: DesignProblem,
    design: np.ndarray,
    coord_index: int,
    m_evals: int,
    seed: int,
    trace: OptTrace | None = None,
) -> tuple[float, float]:
    """One approximate-coordinate-exchange step on a continuous coordinate.

    Evaluates the objective at space-filling points plus the incumbent, fits
    a 1-D GP (constant mean, squared-exponential kernel, nugget), maximizes
    the predictive mean on a 1001-point grid, re-evaluates the true objective
    there, and accepts on strict improvement.  Returns (value, objective at
    the returned value).
    """
    coord = problem.coordinates[coord_index]
    if coord.is_discrete:
        raise InvalidParameter("ace_coordinate requires a continuous coordinate")
    trace = trace if trace is not None else OptTrace()
    lo, hi = coord.bounds
    incumbent = float(design[coord_index])

    points = np.linspace(lo, hi, m_evals)
    if incumbent not in points:
        points = np.append(points, incumbent)
    points = np.unique(points)

    trials = []
    for p in points:
        trial = np.asarray(design, dtype=float).copy()
        trial[coord_index] = p
        trials.append(trial)
    values = np.array(
        _eval_batch(problem.objective, trials, trace, problem.budget.threads)
    )
    feasible = np.isfinite(values)
    if not np.any(feasible):
        raise InvalidParameter("objective infeasible at every emulator point")
    points, values = points[feasible], values[feasible]

    inc_val = float(values[np.argmin(np.abs(points - incumbent))])
    best_raw_i = int(np.argmax(values))

    proposal = None
    try:
        gp = _fit_gp_1d(points, values)
        grid = np.linspace(lo, hi, 1001)
        mean = gp.predict_mean(grid)
        proposal = float(grid[np.argmax(mean)])
    except (np.linalg.LinAlgError, GamDesignError):
        proposal = None

    if proposal is None:
        # GP fit singular: fall back to the best raw evaluation
        cand, cand_val = float(points[best_raw_i]), float(values[best_raw_i])
    else:
        trial = np.asarray(design, dtype=float).copy()
        trial[coord_index] = proposal
        cand_val = _safe_eval(problem.objective, trial, trace)
        cand = proposal
        if values[best_raw_i] > cand_val:
            cand, cand_val = float(points[best_raw_i]), float(values[best_raw_i])

    if cand_val > inc_val:
        return cand, cand_val
    return incumbent, inc_val


def optimize_design(
    problem: DesignProblem,
    restarts: int = 1,
    seed: int = 0,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, OptTrace]:
    """Coordinate exchange from several random starts; best final design wins.

    The first start is ``init`` when given; all other starts and all internal
    randomness derive from the master seed.
    """
    if restarts < 1:
        raise InvalidParameter("restarts must be >= 1")
    best_x, best_trace = None, None
    for r in range(restarts):
        if r == 0 and init is not None:
            x0 = np.asarray(init, dtype=float)
        else:
            x0 = problem.random_design(rng_for(seed, 0, r))
        x, trace = coordinate_exchange(problem, x0, seed=rng_seed(seed, 1, r))
        if best_trace is None or trace.final_objective > best_trace.final_objective:
            best_x, best_trace = x, trace
    return best_x, best_trace


def rng_seed(seed: int, *path: int) -> int:
    return int(rng_for(seed, *path).integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# one-dimensional Gaussian-process emulator


@dataclass
class _GP1D:
    x: np.ndarray
    y_mean: float
    y_scale: float
    resid: np.ndarray  # K^-1 (y - mean) on the standardized scale
    length: float
    amp2: float

    def predict_mean(self, grid: np.ndarray) -> np.ndarray:
        k = self.amp2 * np.exp(
            -0.5 * ((grid[:, None] - self.x[None, :]) / self.length) ** 2
        )
        return self.y_mean + self.y_scale * (k @ self.resid)


def _fit_gp_1d(x: np.ndarray, y: np.ndarray, nugget_floor: float = 1e-8) -> _GP1D:
    """Constant-mean squared-exponential GP with hyperparameters by marginal
    likelihood maximization (length scale, amplitude, nugget)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    y_mean = float(y.mean())
    y_scale = float(y.std())
    if y_scale <= 0:
        raise np.linalg.LinAlgError("constant objective values")
    ys = (y - y_mean) / y_scale
    span = float(x.max() - x.min())
    if span <= 0:
        raise np.linalg.LinAlgError("degenerate emulator support")
    d2 = (x[:, None] - x[None, :]) ** 2
    n = x.size

    def neg_logml(params):
        log_len, log_amp2, log_nug = params
        # the search may visit extreme hyperparameters; overflow to inf is a
        # legitimate "reject this point" signal, not an error
        with np.errstate(over="ignore"):
            k = np.exp(log_amp2) * np.exp(-0.5 * d2 / np.exp(2 * log_len))
            k[np.diag_indices_from(k)] += np.exp(log_nug) + nugget_floor
        if not np.all(np.isfinite(k)):
            return 1e10
        try:
            chol = cho_factor(k, lower=True)
        except np.linalg.LinAlgError:
            return 1e10
        w = cho_solve(chol, ys)
        logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
        return 0.5 * (ys @ w + logdet + n * np.log(2 * np.pi))

    best = None
    for len0 in (span / 10, span / 3, span):
        start = np.array([np.log(len0), 0.0, np.log(1e-4)])
        res = minimize(neg_logml, start, method="Nelder-Mead", options={"maxiter": 200, "xatol": 1e-4, "fatol": 1e-8})
        if best is None or res.fun < best.fun:
            best = res
    log_len, log_amp2, log_nug = best.x
    with np.errstate(over="ignore"):
        k = np.exp(log_amp2) * np.exp(-0.5 * d2 / np.exp(2 * log_len))
        k[np.diag_indices_from(k)] += np.exp(log_nug) + nugget_floor
    if not np.all(np.isfinite(k)):
        raise np.linalg.LinAlgError("degenerate emulator hyperparameters")
    chol = cho_factor(k, lower=True)
    length, amp2 = np.exp(np.clip(log_len, -700.0, 700.0)), np.exp(np.clip(log_amp2, -700.0, 700.0))
    if not (np.isfinite(length) and np.isfinite(amp2) and length > 0):
        raise np.linalg.LinAlgError("degenerate emulator hyperparameters")
    return _GP1D(
        x=x,
        y_mean=y_mean,
        y_scale=y_scale,
        resid=cho_solve(chol, ys),
        length=float(length),
        amp2=float(amp2),
    )
