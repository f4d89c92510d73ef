"""Round-time model ``T(M) = c + sum_l t_l * kept_l`` and traffic accounting.

Byte counts are per client and per round. Normal rounds exchange the values
of kept weights both ways (the pattern is already known). Reconfiguration
rounds upload the full-space importance and download the new sparse model.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import yaml

from .sparse import VALUE_BYTES, storage_cost

CLAMP_FLOOR = 1e-12


class RoundKind(str, enum.Enum):
    NORMAL = "normal"
    RECONFIG = "reconfig"


@dataclass(frozen=True)
class CostModel:
    c: float
    t_per_layer: tuple
    bandwidth: float = math.inf
    r_squared: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "t_per_layer", tuple(float(t) for t in self.t_per_layer))
        if self.c < 0:
            raise ValueError("c must be >= 0")
        if any(not t > 0 for t in self.t_per_layer):
            raise ValueError("per-parameter times must be > 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")

    def compute_time(self, kept_per_layer: Sequence[int]) -> float:
        self._check(kept_per_layer)
        return self.c + sum(t * k for t, k in zip(self.t_per_layer, kept_per_layer))

    def _check(self, kept):
        if len(kept) != len(self.t_per_layer):
            raise ValueError(f"expected {len(self.t_per_layer)} layer counts, got {len(kept)}")

    def linear_cost(self, capacity_per_layer: Sequence[int]) -> "LinearCost":
        """Per-coordinate marginal time of a normal round, for the solvers."""
        self._check(capacity_per_layer)
        per_byte = 0.0 if math.isinf(self.bandwidth) else 1.0 / self.bandwidth
        unit = [t + 2 * VALUE_BYTES * per_byte for t in self.t_per_layer]
        t = np.repeat(np.asarray(unit, dtype=np.float64), capacity_per_layer)
        return LinearCost(self.c, t)


@dataclass(frozen=True)
class LinearCost:
    """``T(M) = c + sum_{j in M} t[j]`` over flat coordinates."""

    c: float
    t: np.ndarray

    def __call__(self, mask) -> float:
        return math.fsum([self.c, *self.t[np.asarray(mask, dtype=bool)]])


def comm_split(
    kept_per_layer: Sequence[int],
    kind: RoundKind,
    capacity_per_layer: Optional[Sequence[int]] = None,
    new_kept_per_layer: Optional[Sequence[int]] = None,
):
    """(upload, download) bytes for one client in one round.

    Reconfiguration rounds need the layer capacities; the download is the
    model after reconfiguration (``new_kept_per_layer``, defaulting to
    ``kept_per_layer``), each layer in its cheaper sparse layout.
    """
    kind = RoundKind(kind)
    if kind is RoundKind.NORMAL:
        b = VALUE_BYTES * int(sum(kept_per_layer))
        return b, b
    if capacity_per_layer is None:
        raise ValueError("reconfiguration traffic needs layer capacities")
    new = kept_per_layer if new_kept_per_layer is None else new_kept_per_layer
    up = VALUE_BYTES * int(sum(capacity_per_layer))
    down = sum(storage_cost(int(c), int(k)).sparse_bytes for c, k in zip(capacity_per_layer, new))
    return up, down


def comm_bytes(kept_per_layer, kind, capacity_per_layer=None, new_kept_per_layer=None) -> int:
    up, down = comm_split(kept_per_layer, kind, capacity_per_layer, new_kept_per_layer)
    return up + down


def round_time(
    cm: CostModel,
    kept_per_layer,
    kind=RoundKind.NORMAL,
    capacity_per_layer=None,
    new_kept_per_layer=None,
) -> float:
    t = cm.compute_time(kept_per_layer)
    nbytes = comm_bytes(kept_per_layer, kind, capacity_per_layer, new_kept_per_layer)
    if nbytes and not math.isinf(cm.bandwidth):
        t += nbytes / cm.bandwidth
    return t


@dataclass(frozen=True)
class TimingSample:
    counts: tuple
    seconds: float

    def __post_init__(self):
        if not self.seconds > 0:
            raise ValueError("measured time must be > 0")
        if any(c < 0 for c in self.counts):
            raise ValueError("negative parameter count")


class RankDeficientError(ValueError):
    pass


def fit(samples: Sequence[TimingSample], bandwidth: float = math.inf) -> CostModel:
    """Least-squares ``(c, t_1..t_L)`` from timing samples.

    Layers never varied in the samples (all-zero column) are pinned at the
    floor. Coefficients that come out below the floor (``c`` below 0) are
    pinned there and the remaining ones are refit until all are feasible.
    Communication is folded into the fitted times, hence infinite bandwidth
    by default.
    """
    if not samples:
        raise RankDeficientError("no timing samples")
    X = np.array([s.counts for s in samples], dtype=np.float64)
    y = np.array([s.seconds for s in samples], dtype=np.float64)
    n_layers = X.shape[1]
    A = np.hstack([np.ones((len(y), 1)), X])
    floors = np.array([0.0] + [CLAMP_FLOOR] * n_layers)
    coef = floors.copy()
    active = [0] + [j + 1 for j in range(n_layers) if np.any(X[:, j] != 0)]
    if np.linalg.matrix_rank(A[:, active]) < len(active):
        raise RankDeficientError(
            f"timing samples do not determine {len(active)} coefficients "
            f"(rank {np.linalg.matrix_rank(A[:, active])})"
        )
    while True:
        fixed = [j for j in range(A.shape[1]) if j not in active]
        rhs = y - A[:, fixed] @ coef[fixed]
        sol, *_ = np.linalg.lstsq(A[:, active], rhs, rcond=None)
        # one step of iterative refinement removes most of the solver round-off
        fix, *_ = np.linalg.lstsq(A[:, active], rhs - A[:, active] @ sol, rcond=None)
        sol = sol + fix
        bad = [j for j, v in zip(active, sol) if v < floors[j]]
        if not bad:
            coef[active] = sol
            break
        for j in bad:
            coef[j] = floors[j]
            active.remove(j)
        if not active:
            break
    coef = np.maximum(coef, floors)
    pred = A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - pred) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if np.allclose(pred, y, rtol=1e-12, atol=0.0) else 0.0
    return CostModel(float(coef[0]), tuple(coef[1:]), bandwidth, r_squared=r2)


def synthesize(cm: CostModel, counts: Sequence[Sequence[int]]):
    """Noiseless timing samples generated from ``cm`` (compute part only)."""
    return [TimingSample(tuple(k), cm.compute_time(k)) for k in counts]


def load_preset(path) -> CostModel:
    with open(path) as f:
        d = yaml.safe_load(f)
    return preset_from_dict(d)


def preset_from_dict(d) -> CostModel:
    keys = {"c_seconds", "bandwidth_Bps", "t_per_layer"}
    extra = set(d) - keys
    if extra:
        raise ValueError(f"unknown cost preset keys: {sorted(extra)}")
    bw = d.get("bandwidth_Bps")
    return CostModel(
        float(d["c_seconds"]),
        tuple(d["t_per_layer"]),
        math.inf if bw is None else float(bw),
    )


def preset_to_dict(cm: CostModel) -> dict:
    return {
        "c_seconds": cm.c,
        "bandwidth_Bps": None if math.isinf(cm.bandwidth) else cm.bandwidth,
        "t_per_layer": list(cm.t_per_layer),
    }


def save_preset(cm: CostModel, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(preset_to_dict(cm), f, sort_keys=False)
