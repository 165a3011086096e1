"""Joint threshold selection across the forecast horizon.

Given one admissible interval per horizon, pick ``u_1..u_H`` minimising the
expected cost

    lambda * sum_h (1 - u_h) + max(rho / H - alpha_t, 0)  [+ J_inc(u)]

where ``rho = sum_h 1(u_h > beta_h)`` and each ``beta_h`` is drawn from the
horizon's recent history of back-solved thresholds.  ``alpha_t`` is a
horizon-coverage target adapted online from observed errors.

:func:`solve_dp` handles the built-in objectives with exact expectations:
a forward dynamic program over (distribution of ``rho``, deterministic cost,
last action) with dominance pruning for small problems, and coordinate
descent for large ones.  :func:`solve_generic` handles arbitrary objectives
by scenario sampling and coordinate descent.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import quantile_rank
from .online import ThresholdInterval

OBJECTIVES = ("j1_j2", "j_inc", "custom")

# Evaluators map (actions (H,), beta scenarios (n, H)) -> costs (n,).
Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]
_CUSTOM_OBJECTIVES: dict[str, Callable[..., Evaluator]] = {}


def register_objective(name: str):
    """Register a factory ``f(alpha_t=..., lam=..., lambda_j=..., horizons=...)
    -> Evaluator`` under ``name`` for use with ``objective="custom"``."""

    def deco(factory):
        _CUSTOM_OBJECTIVES[name] = factory
        return factory

    return deco


def get_objective(name: str):
    try:
        return _CUSTOM_OBJECTIVES[name]
    except KeyError:
        raise KeyError(f"no custom objective registered as {name!r}") from None


@dataclass
class OptimizerConfig:
    lam: float = 0.01
    action_grid_k: int = 5
    eta_target: float = 0.01
    n_scenarios: int = 200
    objective: str = "j1_j2"
    lambda_j: float = 0.0
    history_size: int = 100
    theta: float = 1.0
    custom_name: str | None = None
    max_states: int = 256

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.action_grid_k < 1:
            raise ValueError("action_grid_k must be >= 1")
        if self.eta_target <= 0:
            raise ValueError("eta_target must be positive")
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.objective == "custom" and not self.custom_name:
            raise ValueError("objective 'custom' needs custom_name")
        if self.lambda_j < 0:
            raise ValueError("lambda_j must be non-negative")
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.max_states < 1:
            raise ValueError("max_states must be >= 1")


class BetaHistory:
    """Ring buffer of the last ``capacity`` back-solved thresholds per horizon."""

    def __init__(self, horizons: int, capacity: int, theta: float = 1.0):
        self.capacity = capacity
        self.theta = theta
        self.buffers = [deque(maxlen=capacity) for _ in range(horizons)]

    def record(self, h: int, beta: float) -> None:
        if not 0 < beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {beta}")
        self.buffers[h - 1].append(float(beta))

    def values(self, h: int) -> list[float]:
        return list(self.buffers[h - 1])

    def trimmed(self, h: int) -> list[float]:
        return trimmed(self.buffers[h - 1], self.theta)

    def effective(self, h: int) -> list[float]:
        """Trimmed history, falling back to the full buffer when trimming
        leaves nothing."""
        t = self.trimmed(h)
        return t if t else self.values(h)


def trimmed(values: Sequence[float], theta: float) -> list[float]:
    """Values at or below the theta-quantile (``ceil(theta * n)``-th order
    statistic), keeping insertion order.  ``theta = 1`` keeps everything."""
    vals = list(values)
    if not vals:
        return []
    if theta >= 1:
        return vals
    k = quantile_rank(theta, len(vals))
    if k <= 0:
        return []
    cut = sorted(vals)[min(k, len(vals)) - 1]
    return [v for v in vals if v <= cut]


def miscoverage_prob(history: Sequence[float], u: float) -> float:
    """Fraction of historical thresholds strictly below ``u``."""
    f = np.asarray(history, dtype=float)
    if f.size == 0:
        raise ValueError("history is empty")
    return float(np.count_nonzero(u > f)) / f.size


def adapt_target(alpha_t: float, horizon_miscoverage: float, alpha_user: float,
                 eta_target: float) -> float:
    if not 0 <= horizon_miscoverage <= 1:
        raise ValueError("horizon miscoverage must lie in [0, 1]")
    return alpha_t - eta_target * (horizon_miscoverage - alpha_user)


def objective_j1_j2(actions, scenario, alpha_t: float, lam: float) -> float:
    """Width proxy ``lam * sum(1 - u)`` plus the horizon-coverage excess."""
    u = np.asarray(actions, dtype=float)
    b = np.asarray(scenario, dtype=float)
    if u.shape != b.shape:
        raise ValueError("actions and scenario lengths differ")
    rho = np.count_nonzero(u > b)
    return lam * float((1.0 - u).sum()) + max(rho / u.size - alpha_t, 0.0)


def objective_j_inc(actions, lambda_j: float) -> float:
    """Penalty ``sum_{h>=2} max(0, lambda_j * u_h - u_{h-1})`` that favours
    thresholds shrinking (regions growing) along the horizon."""
    u = np.asarray(actions, dtype=float)
    if u.size < 2:
        return 0.0
    return float(np.maximum(0.0, lambda_j * u[1:] - u[:-1]).sum())


def j1_j2_evaluator(alpha_t: float, lam: float, lambda_j: float = 0.0,
                    with_inc: bool = False) -> Evaluator:
    def evaluate(u: np.ndarray, betas: np.ndarray) -> np.ndarray:
        rho = (u[None, :] > betas).sum(axis=1)
        cost = lam * float((1.0 - u).sum()) + np.maximum(rho / u.size - alpha_t, 0.0)
        if with_inc:
            cost = cost + objective_j_inc(u, lambda_j)
        return cost

    return evaluate


def action_grid(interval: ThresholdInterval, k: int) -> np.ndarray:
    """``k`` evenly spaced thresholds covering the interval, endpoints
    included; a point interval gives a single action."""
    if interval.high == interval.low or k == 1:
        return np.array([interval.center if k == 1 else interval.low])
    # same arithmetic as np.linspace without its call overhead
    out = interval.low + np.arange(k) * ((interval.high - interval.low) / (k - 1))
    out[-1] = interval.high
    return out


def _stop_loss(dist: np.ndarray) -> np.ndarray:
    """``E[(rho - c)^+]`` for ``c = 0..len-1`` for each row of ``dist``."""
    # tail[c] = P(rho > c); stop-loss is the reversed cumulative sum of tails
    tail = 1.0 - np.cumsum(dist, axis=-1)
    return np.cumsum(tail[..., ::-1], axis=-1)[..., ::-1]


def _pareto_actions(grid: np.ndarray, history: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per distinct miscoverage probability keep only the largest action;
    smaller actions with the same probability cost strictly more width."""
    u, p = _descending_with_probs(grid, history)
    # p is non-increasing along descending u, so equal p values are adjacent
    first = np.ones(u.size, dtype=bool)
    first[1:] = p[1:] != p[:-1]
    return u[first], p[first]


def _descending_with_probs(grid: np.ndarray, history: np.ndarray):
    u = grid[::-1] if grid.size > 1 and grid[0] < grid[-1] else grid
    f = np.sort(history)
    return u, np.searchsorted(f, u, side="left") / f.size


@dataclass
class DPResult:
    actions: np.ndarray
    expected_cost: float
    exact: bool
    n_states: int


def _candidates(intervals, histories, k: int, keep_all: bool):
    out = []
    for iv, f in zip(intervals, histories):
        grid = action_grid(iv, k)
        f = np.asarray(f, dtype=float)
        if keep_all:
            # J_inc depends on u itself, so equal-p actions are not interchangeable
            out.append(_descending_with_probs(grid, f))
        else:
            out.append(_pareto_actions(grid, f))
    return out


def solve_dp(intervals: Sequence[ThresholdInterval], histories: Sequence[Sequence[float]],
             lam: float, alpha_t: float, k: int = 5, lambda_j: float = 0.0,
             with_inc: bool = False, max_states: int = 256) -> DPResult:
    """Minimise the expected horizon cost over the action grids.

    Horizon errors are independent with ``p_h(u) = P(u > beta_h)``, so a
    partial plan is summarised by the distribution of ``rho`` so far plus
    its deterministic cost.  The forward program drops a state when another
    has no larger deterministic cost, the same last action (only relevant
    with ``J_inc``) and a ``rho`` distribution no larger in increasing-convex
    order; the terminal cost is increasing and convex in ``rho``, so this
    never discards the optimum.

    When the number of action combinations exceeds ``max_states`` the exact
    program is replaced by coordinate descent on the exact expected cost
    and ``exact`` is reported False.  Any empty history returns the
    interval centres.
    """
    H = len(intervals)
    if H == 0:
        raise ValueError("no intervals to optimise")
    if len(histories) != H:
        raise ValueError("need one history per interval")
    centers = np.array([iv.center for iv in intervals])
    if any(len(f) == 0 for f in histories):
        return DPResult(centers, math.nan, False, 0)
    inc = with_inc and lambda_j > 0
    cands = _candidates(intervals, histories, k, inc)
    combos = 1
    for us, _ in cands:
        combos *= us.size
        if combos > max_states:
            break
    if combos > max_states:
        u = _coordinate_descent(cands, lam, alpha_t, lambda_j if inc else 0.0)
        cost = expected_cost(u, histories, alpha_t, lam, lambda_j, with_inc)
        return DPResult(u, cost, False, 0)
    return _forward_dp(cands, lam, alpha_t, lambda_j, inc)


def _forward_dp(cands, lam, alpha_t, lambda_j, inc) -> DPResult:
    H = len(cands)
    dists = np.ones((1, 1))
    det = np.zeros(1)
    plans = np.zeros((1, 0))
    for h, (us, ps) in enumerate(cands):
        n, m = dists.shape[0], us.size
        shifted = np.zeros((n, m, h + 2))
        shifted[:, :, :-1] += dists[:, None, :] * (1 - ps)[None, :, None]
        shifted[:, :, 1:] += dists[:, None, :] * ps[None, :, None]
        new_det = det[:, None] + lam * (1 - us)[None, :]
        if inc and h > 0:
            new_det = new_det + np.maximum(0.0, lambda_j * us[None, :] - plans[:, -1][:, None])
        dists = shifted.reshape(n * m, h + 2)
        det = new_det.reshape(n * m)
        plans = np.concatenate([np.repeat(plans, m, axis=0), np.tile(us, n)[:, None]], axis=1)
        if m > 1 and h < H - 1:
            # the final argmin handles the last layer; pruning it buys nothing
            keep = _prune(dists, det, plans, inc)
            dists, det, plans = dists[keep], det[keep], plans[keep]

    g = np.maximum(np.arange(H + 1) / H - alpha_t, 0.0)
    total = det + dists @ g
    best = total.min()
    tied = np.flatnonzero(total <= best + 1e-12)
    # ties: larger u first, earliest horizon deciding
    pick = max(tied, key=lambda i: tuple(plans[i]))
    return DPResult(plans[pick].copy(), float(total[pick]), True, int(dists.shape[0]))


def _prune(dists: np.ndarray, det: np.ndarray, plans: np.ndarray, inc: bool) -> np.ndarray:
    sl = _stop_loss(dists)
    tol = 1e-12
    # dom[i, j]: state i is at least as good as state j
    dom = (det[:, None] <= det[None, :] + tol) & np.all(
        sl[:, None, :] <= sl[None, :, :] + tol, axis=2
    )
    if inc:
        dom &= plans[:, None, -1] == plans[None, :, -1]
    # preferred order: cheaper deterministic cost, then larger actions lexicographically
    order = np.lexsort(tuple(-plans[:, j] for j in range(plans.shape[1] - 1, -1, -1)) + (det,))
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    # i beats j on strict dominance, or on mutual dominance with a better rank.
    # Dominance is transitive, so every beaten state has an unbeaten
    # dominator and dropping all beaten states at once is safe.
    beats = dom & (~dom.T | (rank[:, None] < rank[None, :]))
    np.fill_diagonal(beats, False)
    return np.flatnonzero(~beats.any(axis=0))


def _bernoulli_add(dist: np.ndarray, p: float) -> np.ndarray:
    out = np.empty(dist.size + 1)
    out[:-1] = dist * (1 - p)
    out[-1] = 0.0
    out[1:] += dist * p
    return out


def _coordinate_descent(cands, lam: float, alpha_t: float, lambda_j: float,
                        max_sweeps: int = 50) -> np.ndarray:
    """Gauss-Seidel sweeps; each coordinate takes its exact best response
    given the others.  Ties go to the larger action, so the walk cannot
    cycle."""
    H = len(cands)
    c = H * alpha_t
    choice = [0] * H  # candidates are sorted by descending u
    ps = [float(p[0]) for _, p in cands]
    us = [float(u[0]) for u, _ in cands]
    for _ in range(max_sweeps):
        # suffix[h]: distribution of errors over horizons h..H-1
        suffix = [None] * (H + 1)
        suffix[H] = np.ones(1)
        for h in range(H - 1, -1, -1):
            suffix[h] = _bernoulli_add(suffix[h + 1], ps[h])
        prefix = np.ones(1)
        changed = False
        for h in range(H):
            cand_u, cand_p = cands[h]
            if cand_u.size > 1:
                others = np.convolve(prefix, suffix[h + 1])
                r = np.arange(others.size)
                s_hit = others @ np.maximum(r + 1 - c, 0.0)
                s_miss = others @ np.maximum(r - c, 0.0)
                cost = lam * (1 - cand_u) + ((1 - cand_p) * s_miss + cand_p * s_hit) / H
                if lambda_j > 0:
                    if h > 0:
                        cost = cost + np.maximum(0.0, lambda_j * cand_u - us[h - 1])
                    if h < H - 1:
                        cost = cost + np.maximum(0.0, lambda_j * us[h + 1] - cand_u)
                j = int(np.argmin(cost))  # first minimum = largest u
                if cost[j] < cost[choice[h]] - 1e-12 or (
                        j < choice[h] and cost[j] <= cost[choice[h]] + 1e-12):
                    choice[h] = j
                    ps[h] = float(cand_p[j])
                    us[h] = float(cand_u[j])
                    changed = True
            prefix = _bernoulli_add(prefix, ps[h])
        if not changed:
            break
    return np.array(us)


def expected_cost(actions, histories, alpha_t: float, lam: float, lambda_j: float = 0.0,
                  with_inc: bool = False) -> float:
    """Exact expected cost of a fixed action vector over the product of the
    empirical histories, by enumerating every error pattern."""
    u = np.asarray(actions, dtype=float)
    H = u.size
    p = np.array([miscoverage_prob(f, x) for f, x in zip(histories, u)])
    dist = np.ones(1)
    for ph in p:
        dist = np.concatenate([dist * (1 - ph), [0.0]]) + np.concatenate([[0.0], dist * ph])
    g = np.maximum(np.arange(H + 1) / H - alpha_t, 0.0)
    cost = lam * float((1 - u).sum()) + float(dist @ g)
    if with_inc:
        cost += objective_j_inc(u, lambda_j)
    return cost


def sample_scenarios(histories: Sequence[Sequence[float]], n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``(n, H)`` matrix of thresholds, column h drawn from history h."""
    cols = [rng.choice(np.asarray(f, dtype=float), size=n, replace=True) for f in histories]
    return np.stack(cols, axis=1)


def solve_generic(intervals: Sequence[ThresholdInterval], histories: Sequence[Sequence[float]],
                  evaluator: Evaluator, k: int = 5, n_scenarios: int = 200,
                  rng_seed: int = 0, max_sweeps: int = 20) -> np.ndarray:
    """Coordinate descent over the action grids on sampled scenarios.

    Starts from the interval centres and only moves on a strict decrease,
    so the result never scores worse than the centres on these scenarios.
    """
    H = len(intervals)
    if H == 0:
        raise ValueError("no intervals to optimise")
    u = np.array([iv.center for iv in intervals])
    if any(len(f) == 0 for f in histories):
        return u
    grids = [action_grid(iv, k) for iv in intervals]
    if all(g.size == 1 and g[0] == c for g, c in zip(grids, u)):
        return u
    rng = np.random.default_rng(rng_seed)
    scen = sample_scenarios(histories, n_scenarios, rng)
    best = float(evaluator(u, scen).mean())
    for _ in range(max_sweeps):
        moved = False
        for h in range(H):
            for cand in grids[h][::-1]:
                if cand == u[h]:
                    continue
                trial = u.copy()
                trial[h] = cand
                c = float(evaluator(trial, scen).mean())
                if c < best - 1e-12:
                    best, u, moved = c, trial, True
        if not moved:
            break
    return u


@dataclass
class OptimizerState:
    alpha_t: float
    histories: BetaHistory = field(repr=False, default=None)


class HorizonOptimizer:
    """Adaptive horizon-coverage target plus beta histories for one stream."""

    def __init__(self, config: OptimizerConfig, horizons: int, alpha_user: float):
        self.config = config
        self.horizons = horizons
        self.alpha_user = alpha_user
        self.state = OptimizerState(alpha_user, BetaHistory(horizons, config.history_size,
                                                            config.theta))
        self.last_exact = True

    @property
    def alpha_t(self) -> float:
        return self.state.alpha_t

    def record_beta(self, h: int, beta: float) -> None:
        self.state.histories.record(h, beta)

    def adapt_target(self, horizon_miscoverage: float) -> None:
        self.state.alpha_t = adapt_target(self.state.alpha_t, horizon_miscoverage,
                                          self.alpha_user, self.config.eta_target)

    def observe(self, outcomes) -> None:
        """Feed one tick's resolution outcomes: record betas, then adapt the
        target from the mean error over the horizons that resolved."""
        if not outcomes:
            return
        for o in outcomes:
            self.record_beta(o.horizon, o.beta)
        self.adapt_target(sum(o.err for o in outcomes) / len(outcomes))

    def choose(self, intervals: Sequence[ThresholdInterval], rng_seed: int = 0) -> np.ndarray:
        cfg = self.config
        hist = [self.state.histories.effective(h) for h in range(1, self.horizons + 1)]
        if cfg.objective == "custom":
            factory = get_objective(cfg.custom_name)
            ev = factory(alpha_t=self.alpha_t, lam=cfg.lam, lambda_j=cfg.lambda_j,
                         horizons=self.horizons)
            return solve_generic(intervals, hist, ev, cfg.action_grid_k, cfg.n_scenarios,
                                 rng_seed)
        res = solve_dp(intervals, hist, cfg.lam, self.alpha_t, cfg.action_grid_k,
                       lambda_j=cfg.lambda_j, with_inc=cfg.objective == "j_inc",
                       max_states=cfg.max_states)
        self.last_exact = res.exact
        return res.actions

    def snapshot(self) -> dict:
        h = self.state.histories
        return {
            "alpha_t": self.state.alpha_t,
            "histories": [list(b) for b in h.buffers],
        }

    def restore(self, snap: dict) -> None:
        self.state.alpha_t = float(snap["alpha_t"])
        for buf, vals in zip(self.state.histories.buffers, snap["histories"]):
            buf.clear()
            buf.extend(float(v) for v in vals)


@register_objective("j1_j2")
def _j1_j2_factory(alpha_t, lam, lambda_j=0.0, horizons=None):
    return j1_j2_evaluator(alpha_t, lam)


@register_objective("j_inc")
def _j_inc_factory(alpha_t, lam, lambda_j=0.0, horizons=None):
    return j1_j2_evaluator(alpha_t, lam, lambda_j, with_inc=True)
