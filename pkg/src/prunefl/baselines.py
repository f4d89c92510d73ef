"""Size-matched pruning comparators for the round loop.

Both plug into :func:`prunefl.fl.run_round` like the adaptive strategy:
``kind(r)``, ``collect(r)`` and ``after_aggregate(server, r, importance)``.
"""
from __future__ import annotations

import math

import numpy as np

from .cost import RoundKind
from .nn import MaskedParams, apply_mask
from .fl import NoPruning


def top_k_mask(scores, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    k = max(0, min(int(k), len(scores)))
    order = np.lexsort((np.arange(len(scores)), -scores))
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:k]] = True
    return mask


def matched_count(capacity: int, density: float) -> int:
    return int(round(density * capacity))


class OneShotPruning(NoPruning):
    """Prune once after the first round to ``density`` by accumulated g^2."""

    name = "oneshot"

    def __init__(self, density: float):
        if not 0.0 <= density <= 1.0:
            raise ValueError("density must be in [0, 1]")
        self.density = density

    def kind(self, r):
        return RoundKind.RECONFIG if r == 0 else RoundKind.NORMAL

    def collect(self, r):
        return r == 0

    def after_aggregate(self, server, r, importance):
        if r != 0 or importance is None:
            return None
        n = server.params.capacity
        mask = top_k_mask(importance, matched_count(n, self.density))
        server.params = apply_mask(server.params, mask)
        return None


def iterative_schedule(total_rounds: int, steps: int = 20) -> dict:
    """Round index -> pruning step (1-based) for ``steps`` equal-interval prunes
    over the first half of training. Rounds that coincide keep the later step."""
    half = total_rounds / 2.0
    out = {}
    for i in range(1, steps + 1):
        r = max(0, int(math.floor(i * half / steps)) - 1)
        out[r] = i
    return out


def magnitude_prune(params: MaskedParams, keep_fraction: float) -> MaskedParams:
    """Keep the largest-magnitude ``keep_fraction`` of each prunable layer."""
    masks = []
    for w, m, p in zip(params.weights, params.masks, params.prunable):
        if not p:
            masks.append(m)
            continue
        k = matched_count(w.size, keep_fraction)
        score = np.where(m.ravel(), np.abs(w.ravel()), -1.0)
        keep = top_k_mask(score, min(k, int(m.sum()))) & m.ravel()
        masks.append(keep.reshape(w.shape))
    return apply_mask(params, masks)


class IterativePruning(NoPruning):
    """Layerwise magnitude pruning at a fixed rate, ``steps`` times in the
    first half of training, ending at ``density``.

    Clients can repeat a magnitude cut locally, so pruning rounds are
    charged as normal rounds.
    """

    name = "iterative"

    def __init__(self, density: float, total_rounds: int, steps: int = 20):
        if not 0.0 < density <= 1.0:
            raise ValueError("density must be in (0, 1]")
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.density = density
        self.steps = steps
        self.rate = density ** (1.0 / steps)
        self.schedule = iterative_schedule(total_rounds, steps)

    def after_aggregate(self, server, r, importance):
        step = self.schedule.get(r)
        if step is None:
            return None
        server.params = magnitude_prune(server.params, self.rate ** step)
        return None
