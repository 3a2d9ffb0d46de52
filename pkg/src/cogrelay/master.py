"""Long-timescale allocation of average power across potential segments.

The allocator maximizes the minimum per-section rate subject to the
probability-weighted power budget.  Each candidate pair's rate curve is
concave in its budget share, and calibration exposes the curve's slope (the
budget's shadow price), so a projected subgradient ascent with diminishing
steps converges; with a noisy Monte-Carlo oracle the best iterate is
reported rather than the last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import Topology
from .seeding import path_fingerprint, stream
from .subpolicy import (
    DEFAULT_P_FLOOR_FACTOR,
    DEFAULT_P_MAX_FACTOR,
    CalibratedPolicy,
    RayleighGains,
    SegmentProblem,
    calibrate_lambda,
)

Pair = tuple[int, int]


def section_rate(
    m: int, prob_table: dict[Pair, float], u_table: dict[Pair, float], last: int
) -> float:
    """Probability-weighted rate crossing the boundary between nodes ``m-1``
    and ``m``: the sum of ``Pr(i,j) * U_ij`` over pairs straddling it."""
    if not 1 <= m <= last:
        raise ValueError(f"section index {m} out of range 1..{last}")
    total = 0.0
    for (i, j), u in u_table.items():
        if i < m <= j:
            total += prob_table.get((i, j), 0.0) * u
    return total


def section_rates(
    prob_table: dict[Pair, float], u_table: dict[Pair, float], last: int
) -> np.ndarray:
    """All section rates, index ``m-1`` for ``m = 1..last``."""
    rates = np.zeros(last)
    for (i, j), u in u_table.items():
        w = prob_table.get((i, j), 0.0) * u
        if w != 0.0 and j > i:
            rates[i : j] += w
    return rates


def flow_balance_identity(
    m: int, prob_table: dict[Pair, float], u_table: dict[Pair, float], last: int
) -> float:
    """Residual of the telescoping identity relating adjacent section rates
    to per-node inflow minus outflow.  Zero to machine precision for any
    inputs; a nonzero value indicates an implementation bug, not an
    infeasible instance."""
    if not 1 <= m <= last - 1:
        raise ValueError(f"interior section index {m} out of range 1..{last - 1}")
    lhs = section_rate(m, prob_table, u_table, last) - section_rate(
        m + 1, prob_table, u_table, last
    )
    inflow = sum(
        prob_table.get((i, m), 0.0) * u_table.get((i, m), 0.0) for i in range(m)
    )
    outflow = sum(
        prob_table.get((m, j), 0.0) * u_table.get((m, j), 0.0)
        for j in range(m + 1, last + 1)
    )
    return lhs - (inflow - outflow)


def project_budget(
    allocation: dict[Pair, float],
    prob_table: dict[Pair, float],
    p0: float,
    p_floor: float | dict[Pair, float],
    tol: float = 1e-12,
) -> dict[Pair, float]:
    """Projection onto the budget set in the probability-weighted metric.

    The weighted projection onto ``{x >= floor, sum Pr*x <= p0}`` reduces to
    a uniform downward shift clipped at the (possibly per-pair) floor, with
    the shift found by bisection on the single dual variable of the budget
    constraint.
    """
    pairs = sorted(allocation)
    w = np.asarray([prob_table[p] for p in pairs])
    y = np.asarray([allocation[p] for p in pairs])
    if isinstance(p_floor, dict):
        floor = np.asarray([p_floor[p] for p in pairs])
    else:
        floor = np.full(len(pairs), float(p_floor))
    if float(w @ floor) > p0 * (1.0 + 1e-12):
        raise ValueError("budget cannot cover the power floor on every pair")

    def weighted_total(shift: float) -> float:
        return float(w @ np.maximum(y - shift, floor))

    if weighted_total(0.0) <= p0 * (1.0 + tol):
        return dict(zip(pairs, (float(v) for v in np.maximum(y, floor))))
    lo, hi = 0.0, float(np.max(y - floor))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if weighted_total(mid) > p0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(hi, 1.0):
            break
    x = np.maximum(y - hi, floor)
    return dict(zip(pairs, (float(v) for v in x)))


@dataclass(frozen=True)
class PairEvaluation:
    """One pair's calibrated operating point at a given budget share."""

    pair: Pair
    pbar: float
    rate: float
    rate_se: float
    lam: float
    shadow_price: float
    achieved_power: float
    policy: CalibratedPolicy


def _calibration_job(payload) -> CalibratedPolicy:
    """Top-level calibration task so process pools can pickle it."""
    problem, root_seed, pair, power_tolerance, lam_hint = payload
    rng = stream(root_seed, "pair", pair[0], pair[1])
    return calibrate_lambda(
        problem, rng, power_tolerance=power_tolerance, lam_hint=lam_hint
    )


class RateModel:
    """Memoized per-pair evaluator backed by segment calibration.

    Evaluations are seeded by pair identity only, so the same fading sample
    streams are reused across budget values and ascent iterations (common
    random numbers), and cached results are bitwise reproducible.  Budgets
    are quantized to four significant digits for cache identity.
    """

    def __init__(
        self,
        topology: Topology,
        root_seed: int,
        mc_samples: int = 2000,
        episodes: int = 2000,
        power_tolerance: float = 1e-2,
        p_max_factor: float = DEFAULT_P_MAX_FACTOR,
        p_floor_factor: float = DEFAULT_P_FLOOR_FACTOR,
        problem_factory: Callable[[Pair, float], SegmentProblem] | None = None,
        threads: int = 1,
    ) -> None:
        self.topology = topology
        self.root_seed = root_seed
        self.mc_samples = mc_samples
        self.episodes = episodes
        self.power_tolerance = power_tolerance
        self.p_max_factor = p_max_factor
        self.p_floor_factor = p_floor_factor
        self._factory = problem_factory
        self.threads = max(int(threads), 1)
        self._cache: dict[tuple[int, int, float], PairEvaluation] = {}
        self._lam_hints: dict[Pair, float] = {}

    @staticmethod
    def quantize(pbar: float) -> float:
        return float(np.format_float_scientific(pbar, precision=3))

    def build_problem(self, pair: Pair, pbar: float) -> SegmentProblem:
        if self._factory is not None:
            return self._factory(pair, pbar)
        i, j = pair
        return SegmentProblem(
            head=i,
            end=j,
            gains=RayleighGains(self.topology),
            pbar=pbar,
            p_max=self.p_max_factor * pbar,
            p_floor=self.p_floor_factor * pbar,
            mc_samples=self.mc_samples,
            episodes=self.episodes,
        )

    def seed_path(self, pair: Pair) -> str:
        return path_fingerprint("pair", pair[0], pair[1])

    def evaluate(self, pair: Pair, pbar: float) -> PairEvaluation:
        q = self.quantize(pbar)
        key = (pair[0], pair[1], q)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        policy = _calibration_job(
            (
                self.build_problem(pair, q),
                self.root_seed,
                pair,
                self.power_tolerance,
                self._lam_hints.get(pair),
            )
        )
        self._store(pair, q, policy)
        return self._cache[key]

    def evaluate_many(self, allocation: dict[Pair, float]) -> dict[Pair, PairEvaluation]:
        """Evaluate a whole allocation; missing pairs run in parallel when the
        model was built with ``threads > 1``.

        Each calibration is seeded by its pair alone, so parallel and serial
        execution produce bitwise-identical results.
        """
        jobs = []
        for pair, pbar in sorted(allocation.items()):
            q = self.quantize(pbar)
            if (pair[0], pair[1], q) not in self._cache:
                jobs.append((pair, q))
        if self.threads > 1 and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor

            payloads = [
                (
                    self.build_problem(pair, q),
                    self.root_seed,
                    pair,
                    self.power_tolerance,
                    self._lam_hints.get(pair),
                )
                for pair, q in jobs
            ]
            with ProcessPoolExecutor(max_workers=self.threads) as pool:
                for (pair, q), policy in zip(jobs, pool.map(_calibration_job, payloads)):
                    self._store(pair, q, policy)
        return {pair: self.evaluate(pair, pbar) for pair, pbar in allocation.items()}

    def _store(self, pair: Pair, q: float, policy: CalibratedPolicy) -> None:
        evaluation = PairEvaluation(
            pair=pair,
            pbar=q,
            rate=policy.metrics.rate,
            rate_se=policy.metrics.rate_se,
            lam=policy.lam,
            shadow_price=policy.shadow_price,
            achieved_power=policy.report.achieved_power,
            policy=policy,
        )
        self._cache[(pair[0], pair[1], q)] = evaluation
        self._lam_hints[pair] = policy.lam

    def cached_points(self, pair: Pair) -> list[PairEvaluation]:
        """All cached evaluations of one pair, sorted by budget."""
        points = [ev for (i, j, _), ev in self._cache.items() if (i, j) == pair]
        return sorted(points, key=lambda ev: ev.pbar)

    def budget_floor(self, pair: Pair) -> float:
        """Smallest calibratable budget for the pair.

        Discrete power grids cannot operate below their cheapest level; the
        margin absorbs the cache's budget quantization.
        """
        probe = self.build_problem(pair, 1.0)
        if probe.power_levels is None:
            return 0.0
        return min(probe.power_levels) * 1.001


def objective(
    allocation: dict[Pair, float],
    u_table: dict[Pair, float],
    prob_table: dict[Pair, float],
    p0: float,
    last: int,
    budget_tol: float = 1e-6,
) -> float:
    """Minimum section rate of an allocation; rejects budget violations."""
    spent = sum(prob_table[p] * v for p, v in allocation.items())
    if spent > p0 * (1.0 + budget_tol):
        raise ValueError(f"allocation spends {spent:.6g} > budget {p0:.6g}")
    return float(np.min(section_rates(prob_table, u_table, last)))


def subgradient(
    allocation: dict[Pair, float],
    evaluations: dict[Pair, PairEvaluation],
    prob_table: dict[Pair, float],
    last: int,
    tie_tolerance: float = 1e-2,
) -> dict[Pair, float]:
    """Ascent direction for the min-section objective.

    Sections within the tie tolerance of the minimum all contribute; each
    pair's component is its probability times its budget shadow price,
    averaged over the tied sections it straddles.  Entrywise non-negative
    because shadow prices are.
    """
    u_table = {p: ev.rate for p, ev in evaluations.items()}
    rates = section_rates(prob_table, u_table, last)
    floor = float(np.min(rates))
    tied = [m for m in range(1, last + 1) if rates[m - 1] <= floor * (1.0 + tie_tolerance) + 1e-300]
    grad: dict[Pair, float] = {}
    for pair in allocation:
        i, j = pair
        straddles = sum(1 for m in tied if i < m <= j)
        grad[pair] = (
            prob_table[pair] * evaluations[pair].shadow_price * straddles / len(tied)
        )
    return grad


@dataclass(frozen=True)
class MasterOptions:
    max_iterations: int = 40
    step_a: float | None = None  # defaults to p0 / 2
    step_b: float = 5.0
    tie_tolerance: float = 1e-2
    objective_tolerance: float = 1e-3
    window: int = 10
    pair_prob_cutoff: float = 1e-6
    allocation_floor_frac: float = 1e-8
    exchange_polish: bool | None = None  # None: only for noise-free rate models


def _exchange_polish(
    rate_model,
    allocation: dict[Pair, float],
    weights: dict[Pair, float],
    last: int,
    p0: float,
    floors: dict[Pair, float],
    fractions=(0.25, 0.1, 0.04, 0.015, 0.006),
    max_moves: int = 400,
) -> tuple[dict[Pair, float], float, dict[Pair, PairEvaluation]]:
    """Greedy budget exchanges between pairs at shrinking step sizes.

    Subgradients carry no information on the piecewise-constant rate curves
    of discretized instances, so the ascent's best iterate is polished by
    direct search: move a slice of weighted budget from one pair to another
    whenever that strictly improves the objective.  Only sound when the rate
    model is noise-free (exact evaluations); the caller gates on that.
    """
    pairs = sorted(allocation)

    def value_of(alloc):
        evals = rate_model.evaluate_many(alloc)
        u = {p: e.rate for p, e in evals.items()}
        return float(np.min(section_rates(weights, u, last))), evals

    best_alloc = dict(allocation)
    best_value, best_evals = value_of(best_alloc)
    moves = 0
    for frac in fractions:
        improved = True
        while improved and moves < max_moves:
            improved = False
            for src in pairs:
                for dst in pairs:
                    if src == dst:
                        continue
                    give = min(
                        frac * p0, weights[src] * (best_alloc[src] - floors[src])
                    )
                    if give <= 0.0:
                        continue
                    trial = dict(best_alloc)
                    trial[src] = best_alloc[src] - give / weights[src]
                    trial[dst] = best_alloc[dst] + give / weights[dst]
                    value, evals = value_of(trial)
                    if value > best_value * (1.0 + 1e-12) + 1e-300:
                        best_value, best_alloc, best_evals = value, trial, evals
                        moves += 1
                        improved = True
    return best_alloc, best_value, best_evals


@dataclass(frozen=True)
class MasterSolution:
    allocation: dict[Pair, float]
    trace: tuple[float, ...]
    best_objective: float
    section_rates: np.ndarray = field(repr=False)
    u_min: float
    u_weighted: float
    balance_active: bool
    evaluations: dict[Pair, PairEvaluation] = field(repr=False)
    iterations: int
    p0: float

    def spent_budget(self, prob_table: dict[Pair, float]) -> float:
        return sum(prob_table[p] * v for p, v in self.allocation.items())


def solve_master(
    rate_model: RateModel,
    prob_table: dict[Pair, float],
    p0: float,
    last: int,
    options: MasterOptions = MasterOptions(),
) -> MasterSolution:
    """Projected subgradient ascent on the min-section rate.

    Starts from the uniform budget-tight allocation, steps along the
    normalized subgradient with an ``a / (b + t)`` schedule, projects back
    onto the budget set, and returns the best iterate.
    """
    pairs = sorted(
        p
        for p, pr in prob_table.items()
        if p[1] > p[0] and pr > options.pair_prob_cutoff
    )
    if not pairs:
        raise ValueError("no transmitting pair clears the probability cutoff")
    weights = {p: prob_table[p] for p in pairs}
    mass = sum(weights.values())
    floors = {
        p: max(options.allocation_floor_frac * p0, rate_model.budget_floor(p))
        for p in pairs
    }
    allocation = project_budget({p: p0 / mass for p in pairs}, weights, p0, floors)
    step_a = options.step_a if options.step_a is not None else p0 / 2.0

    best_obj = -np.inf
    best_alloc = dict(allocation)
    best_evals: dict[Pair, PairEvaluation] = {}
    trace: list[float] = []
    for t in range(options.max_iterations):
        evals = rate_model.evaluate_many(allocation)
        u_table = {p: ev.rate for p, ev in evals.items()}
        obj = float(np.min(section_rates(weights, u_table, last)))
        trace.append(obj)
        if obj > best_obj:
            best_obj = obj
            best_alloc = dict(allocation)
            best_evals = evals
        if t >= options.window:
            past = max(trace[: t - options.window + 1])
            if best_obj - past <= options.objective_tolerance * max(best_obj, 1e-300):
                break
        grad = subgradient(allocation, evals, weights, last, options.tie_tolerance)
        g = np.asarray([grad[p] for p in pairs])
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            break
        step = step_a / (options.step_b + t)
        moved = {p: allocation[p] + step * grad[p] / norm for p in pairs}
        allocation = project_budget(moved, weights, p0, floors)

    final_evals = rate_model.evaluate_many(best_alloc)
    polish = options.exchange_polish
    if polish is None:
        polish = all(ev.rate_se == 0.0 for ev in final_evals.values())
    if polish:
        best_alloc, polished, final_evals = _exchange_polish(
            rate_model, best_alloc, weights, last, p0, floors
        )
        if polished > best_obj:
            best_obj = polished
            trace.append(polished)
    u_table = {p: ev.rate for p, ev in final_evals.items()}
    rates = section_rates(weights, u_table, last)
    u_min = float(np.min(rates))
    u_weighted = float(rates[last - 1])
    balance_active = u_weighted <= u_min * (1.0 + options.tie_tolerance)
    return MasterSolution(
        allocation=best_alloc,
        trace=tuple(trace),
        best_objective=best_obj,
        section_rates=rates,
        u_min=u_min,
        u_weighted=u_weighted,
        balance_active=balance_active,
        evaluations=final_evals,
        iterations=len(trace),
        p0=p0,
    )


def solution_to_payload(
    solution: MasterSolution, prob_table: dict[Pair, float]
) -> dict:
    """JSON document with the allocation, per-pair prices and the trace."""
    return {
        "format_version": 1,
        "p0": solution.p0,
        "objective": solution.best_objective,
        "u_min": solution.u_min,
        "u_weighted": solution.u_weighted,
        "balance_active": solution.balance_active,
        "iterations": solution.iterations,
        "spent_budget": solution.spent_budget(prob_table),
        "section_rates": [float(r) for r in solution.section_rates],
        "trace": list(solution.trace),
        "allocation": [
            {
                "pair": list(pair),
                "prob": prob_table[pair],
                "pbar": pbar,
                "rate": solution.evaluations[pair].rate,
                "rate_se": solution.evaluations[pair].rate_se,
                "lambda": solution.evaluations[pair].lam,
                "shadow_price": solution.evaluations[pair].shadow_price,
                "achieved_power": solution.evaluations[pair].achieved_power,
            }
            for pair, pbar in sorted(solution.allocation.items())
        ],
    }
