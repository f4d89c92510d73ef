"""Adaptive reconfiguration of the kept parameter set.

A reconfiguration picks the kept set ``M = A | Pbar`` maximizing
``gamma(M) = delta(M) / T(M)``, where ``delta(M)`` is the accumulated squared
gradient over ``M`` (the first-order loss decrease of one masked step) and
``T(M)`` the modeled round time. ``Pbar`` holds large-magnitude weights that
must stay; ``A`` is chosen from the prunable remainder ``P``.

All coordinates are indices into the flat prunable weight vector. Ties are
broken by ascending index throughout.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels
from .cost import CostModel, LinearCost
from .nn import MaskedParams, apply_mask


def gamma_value(delta: float, time: float) -> float:
    """Risk reduction per unit time; 0 when both the gain and the time are 0."""
    if time > 0.0:
        return delta / time
    return 0.0


def set_gamma(importance, cost: LinearCost, mask) -> tuple:
    """(gamma, delta, T) of the kept set ``mask`` under a linear cost.

    Sums are correctly rounded (``math.fsum``), so the value does not depend
    on the order in which coordinates are visited.
    """
    mask = np.asarray(mask, dtype=bool)
    delta = math.fsum(np.asarray(importance)[mask])
    time = math.fsum([cost.c, *cost.t[mask]])
    return gamma_value(delta, time), delta, time


# -- schedules -------------------------------------------------------------

def alpha_at(r: float, base: float = 0.3, half_life: float = 10000.0) -> float:
    """Fraction of prunable capacity that may be pruned at round ``r``."""
    if r < 0:
        raise ValueError("round index must be >= 0")
    return base * 0.5 ** (r / half_life)


@dataclass(frozen=True)
class Schedules:
    alpha_base: float = 0.3
    alpha_half_life: float = 10000.0
    density_limit: Optional[float] = None
    density_target: Optional[float] = None
    r_max: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.alpha_base <= 1:
            raise ValueError("alpha_base must be in [0, 1]")
        if self.capped:
            lim, tgt = self.density_limit, self.density_target
            if not 0 <= tgt <= lim <= 1:
                raise ValueError("need 0 <= density_target <= density_limit <= 1")
            if not self.r_max or self.r_max < 1:
                raise ValueError("r_max must be >= 1 when a density cap is set")
        elif (self.density_limit is None) != (self.density_target is None):
            raise ValueError("density_limit and density_target go together")

    @property
    def capped(self) -> bool:
        return self.density_limit is not None and self.density_target is not None

    def alpha(self, r: float) -> float:
        return alpha_at(r, self.alpha_base, self.alpha_half_life)

    def max_density(self, r: float) -> Optional[float]:
        """Cap decreasing linearly from the limit at r=0 to the target at r_max."""
        if not self.capped:
            return None
        r = min(max(r, 0), self.r_max)
        return (r * self.density_target + (self.r_max - r) * self.density_limit) / self.r_max

    def cap_step(self, interval: int) -> float:
        """Decrease of the cap between reconfigurations ``interval`` rounds apart."""
        if not self.capped:
            return 0.0
        return interval * (self.density_limit - self.density_target) / self.r_max


# -- importance ------------------------------------------------------------

class ImportanceAccumulator:
    """Running per-coordinate sum of squared gradients since the last reset."""

    def __init__(self, size: int):
        self.sums = np.zeros(size)
        self.iterations = 0
        self.samples = 0

    def add(self, flat_grad, batch_size: int = 0):
        self.sums += np.square(flat_grad)
        self.iterations += 1
        self.samples += batch_size

    def snapshot(self) -> np.ndarray:
        s = self.sums.copy()
        s.flags.writeable = False
        return s

    def reset(self):
        self.sums = np.zeros_like(self.sums)
        self.iterations = 0
        self.samples = 0


def merge_importance(snapshots, weights) -> np.ndarray:
    """Weighted mean of client sums, weights renormalized over contributors."""
    w = np.asarray(weights, dtype=np.float64)
    if len(snapshots) != len(w) or not len(w):
        raise ValueError("need one weight per snapshot")
    w = w / w.sum()
    out = np.zeros_like(np.asarray(snapshots[0], dtype=np.float64))
    for s, wi in zip(snapshots, w):
        out += wi * np.asarray(s)
    return out


# -- partition -------------------------------------------------------------

@dataclass(frozen=True)
class PrunablePartition:
    prunable: np.ndarray  # P, sorted ascending
    fixed: np.ndarray  # Pbar, sorted ascending
    alpha: float

    @property
    def size(self) -> int:
        return len(self.prunable) + len(self.fixed)

    def fixed_mask(self) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[self.fixed] = True
        return m


def partition(weights, mask, alpha: float) -> PrunablePartition:
    """Split coordinates into prunable ``P`` and must-keep ``Pbar``.

    ``P`` gets every masked-out or zero-valued coordinate plus the
    ``floor(alpha * capacity)`` smallest-magnitude kept ones.
    """
    w = np.asarray(weights, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = len(w)
    slots = int(math.floor(alpha * n))
    in_p = ~mask | (w == 0.0)
    live = np.flatnonzero(~in_p)
    if slots and len(live):
        # stable sort on |w| keeps ascending index among ties
        order = live[np.argsort(np.abs(w[live]), kind="stable")]
        in_p[order[:slots]] = True
    return PrunablePartition(np.flatnonzero(in_p), np.flatnonzero(~in_p), alpha)


def partition_params(params: MaskedParams, r: float, sched: Schedules) -> PrunablePartition:
    return partition(params.flat_weights(), params.flat_mask(), sched.alpha(r))


# -- solvers ---------------------------------------------------------------

class Solver(str, enum.Enum):
    LINEAR = "linear"
    GENERAL = "general"


@dataclass(frozen=True)
class ReconfigPlan:
    """Outcome of one reconfiguration.

    ``added`` lists ``A`` in the order the solver accepted it; ``mask`` is
    ``A | Pbar`` over the flat prunable space.
    """

    added: np.ndarray
    mask: np.ndarray
    gamma: float
    delta: float
    time: float
    solver: Solver
    n_prunable: int
    n_fixed: int
    cap_violated: bool = False

    @property
    def density(self) -> float:
        return float(self.mask.mean()) if len(self.mask) else 1.0


def solve_linear(importance, cost: LinearCost, part: PrunablePartition) -> ReconfigPlan:
    """Globally optimal ``A`` for a linear round time.

    Candidates are visited by non-increasing ``g^2 / t`` and accepted while
    their ratio is at least the current ``gamma``. Zero-importance
    candidates are never accepted.
    """
    g2 = np.asarray(importance, dtype=np.float64)
    P = part.prunable
    if np.any(cost.t[P] <= 0):
        raise ValueError("per-coordinate times must be positive")
    base = part.fixed_mask()
    _, d0, t0 = set_gamma(g2, cost, base)
    ratio = g2[P] / cost.t[P]
    # non-increasing ratio, ascending index among equal ratios
    order = np.lexsort((P, -ratio))
    cand = P[order]
    k = kernels.greedy_prefix(
        np.ascontiguousarray(ratio[order]),
        np.ascontiguousarray(g2[cand]),
        np.ascontiguousarray(cost.t[cand]),
        float(d0),
        float(t0),
    )
    added = cand[:k]
    mask = base.copy()
    mask[added] = True
    gamma, delta, time = set_gamma(g2, cost, mask)
    return ReconfigPlan(added, mask, gamma, delta, time, Solver.LINEAR, len(P), len(part.fixed))


class NonMonotoneCostError(ValueError):
    pass


def solve_general(
    importance, cost_fn: Callable[[np.ndarray], float], part: PrunablePartition
) -> ReconfigPlan:
    """Locally optimal ``A`` for an arbitrary monotone round-time set function.

    Each pass adds the candidate with the best ratio of importance to
    marginal time ``T(M + j) - T(M)`` while that ratio is at least
    ``gamma(M)``. ``O(|P|^2)`` evaluations of ``cost_fn``.
    """
    g2 = np.asarray(importance, dtype=np.float64)
    mask = part.fixed_mask()
    remaining = list(part.prunable)
    added = []
    delta = math.fsum(g2[mask])
    time = cost_fn(mask)
    while remaining:
        gamma = gamma_value(delta, time)
        best_j, best_r, best_i = None, -1.0, -1
        for i, j in enumerate(remaining):
            mask[j] = True
            marginal = cost_fn(mask) - time
            mask[j] = False
            if marginal < 0:
                raise NonMonotoneCostError(f"adding coordinate {j} lowers the round time")
            if marginal == 0:
                r = math.inf if g2[j] > 0 else 0.0
            else:
                r = g2[j] / marginal
            if r > best_r:
                best_j, best_r, best_i = j, r, i
        if not (best_r > 0 and best_r >= gamma):
            break
        mask[best_j] = True
        added.append(best_j)
        remaining.pop(best_i)
        delta = math.fsum(g2[mask])
        time = cost_fn(mask)
    gamma = gamma_value(delta, time)
    return ReconfigPlan(
        np.asarray(added, dtype=np.int64), mask, gamma, delta, time, Solver.GENERAL,
        len(part.prunable), len(part.fixed),
    )


def apply_caps(
    plan: ReconfigPlan, r: float, sched: Schedules, importance=None, cost: Optional[LinearCost] = None
) -> ReconfigPlan:
    """Truncate ``A`` (in acceptance order) to respect the density cap at round ``r``.

    When ``Pbar`` alone exceeds the cap it is kept whole, ``A`` is emptied
    and the plan is flagged.
    """
    dmax = sched.max_density(r)
    if dmax is None:
        return plan
    n = len(plan.mask)
    # slack absorbs round-off in dmax * n at exact multiples
    limit = int(math.floor(dmax * n + 1e-9))
    room = limit - plan.n_fixed
    violated = room < 0
    keep = max(room, 0)
    if keep >= len(plan.added):
        return plan
    added = plan.added[:keep]
    mask = plan.mask.copy()
    mask[plan.added[keep:]] = False
    if importance is not None and cost is not None:
        gamma, delta, time = set_gamma(importance, cost, mask)
    else:
        gamma, delta, time = math.nan, math.nan, math.nan
    return ReconfigPlan(
        added, mask, gamma, delta, time, plan.solver, plan.n_prunable, plan.n_fixed, violated
    )


def reconfigure(
    params: MaskedParams,
    importance,
    cm: CostModel,
    sched: Schedules,
    r: float,
    cap_round: Optional[float] = None,
):
    """Partition, solve, cap and install the new mask.

    ``r`` drives the prunable fraction; ``cap_round`` (default ``r``) the
    density cap. The caller resets its importance accumulators afterwards.
    """
    importance = np.asarray(importance, dtype=np.float64)
    if importance.shape != (params.capacity,):
        raise ValueError("importance must cover every prunable coordinate")
    part = partition_params(params, r, sched)
    cost = cm.linear_cost(params.layer_sizes())
    plan = solve_linear(importance, cost, part)
    plan = apply_caps(plan, r if cap_round is None else cap_round, sched, importance, cost)
    return apply_mask(params, plan.mask), plan


PLAN_COLUMNS = ("round", "n_prunable", "n_fixed", "n_added", "gamma", "delta", "time", "density")


def plan_row(r: int, plan: ReconfigPlan) -> dict:
    return {
        "round": r,
        "n_prunable": plan.n_prunable,
        "n_fixed": plan.n_fixed,
        "n_added": len(plan.added),
        "gamma": repr(float(plan.gamma)),
        "delta": repr(float(plan.delta)),
        "time": repr(float(plan.time)),
        "density": repr(plan.density),
    }


def write_plans(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=PLAN_COLUMNS)
        w.writeheader()
        w.writerows(rows)
