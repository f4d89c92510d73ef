"""Federated rounds: local masked SGD, weighted averaging, reconfiguration.

Everything runs in-process and sequentially; time is simulated by the cost
model, never measured. Results are bitwise reproducible for a given seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import nn
from .cost import CostModel, RoundKind, comm_split, round_time
from .nn import SGD, MaskedParams, Model, SgdConfig
from .pruner import (
    ImportanceAccumulator,
    ReconfigPlan,
    Schedules,
    merge_importance,
    reconfigure,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoundConfig:
    local_iters: int = 5
    batch_size: int = 20
    clients_per_round: Optional[int] = None
    reconfig_interval: int = 50

    def __post_init__(self):
        if self.local_iters < 1 or self.batch_size < 1 or self.reconfig_interval < 1:
            raise ValueError("local_iters, batch_size and reconfig_interval must be >= 1")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ValueError("clients_per_round must be >= 1")


class Client:
    """One client's shard, sampling state and importance accumulator."""

    def __init__(self, cid: int, x, y, weight: float, seed: int):
        self.cid = cid
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.weight = float(weight)
        self.rng = np.random.default_rng(seed)
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0
        self.accumulator: Optional[ImportanceAccumulator] = None

    def __len__(self):
        return len(self.y)

    def next_batch(self, size: int):
        """Next mini-batch from a reshuffled stream that wraps across epochs."""
        n = len(self.y)
        if n == 0:
            raise ValueError(f"client {self.cid} has no data")
        if size >= n:
            return self.x, self.y
        take = []
        need = size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(n)
                self._pos = 0
            chunk = self._order[self._pos:self._pos + need]
            self._pos += len(chunk)
            need -= len(chunk)
            take.append(chunk)
        idx = np.concatenate(take) if len(take) > 1 else take[0]
        return self.x[idx], self.y[idx]

    def importance(self, capacity: int) -> ImportanceAccumulator:
        if self.accumulator is None or len(self.accumulator.sums) != capacity:
            self.accumulator = ImportanceAccumulator(capacity)
        return self.accumulator


def make_clients(x, y, shards, seed: int, weights=None) -> List[Client]:
    """Clients over index shards; weights default to ``D_n / D``."""
    sizes = np.array([len(s) for s in shards], dtype=np.float64)
    if weights is None:
        weights = sizes / sizes.sum()
    ss = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(len(shards))]
    return [Client(i, x[s], y[s], w, sd) for i, (s, w, sd) in enumerate(zip(shards, weights, seeds))]


@dataclass
class LocalResult:
    params: MaskedParams
    importance: Optional[np.ndarray]
    samples: int
    loss: float


def client_local_update(
    client: Client,
    model: Model,
    global_params: MaskedParams,
    rc: RoundConfig,
    sgd: SgdConfig,
    r: int = 0,
    collect_importance: bool = False,
) -> LocalResult:
    """``rc.local_iters`` masked SGD steps from the broadcast parameters.

    With ``collect_importance`` the full-space squared gradients of every
    step are added to the client's accumulator; the returned ``importance``
    is this round's contribution.
    """
    opt = SGD(sgd)
    params = global_params
    delta = np.zeros(global_params.capacity) if collect_importance else None
    losses = []
    samples = 0
    for _ in range(rc.local_iters):
        xb, yb = client.next_batch(rc.batch_size)
        loss, grad = nn.loss_and_grad(model, params, xb, yb)
        if collect_importance:
            flat = grad.flat(params)
            delta += np.square(flat)
            client.importance(params.capacity).add(flat, len(yb))
        params = opt.step(params, grad, r)
        losses.append(loss)
        samples += len(yb)
    return LocalResult(params, delta, samples, float(np.mean(losses)))


class MaskMismatchError(RuntimeError):
    pass


def server_aggregate(updates) -> MaskedParams:
    """Per-coordinate average of ``(params, weight)`` pairs; weights renormalized."""
    if not updates:
        raise ValueError("nothing to aggregate")
    first = updates[0][0]
    for p, _ in updates[1:]:
        if not all(np.array_equal(a, b) for a, b in zip(p.masks, first.masks)):
            raise MaskMismatchError("participants hold different masks")
    total = math.fsum(w for _, w in updates)
    if not total > 0:
        raise ValueError("aggregation weights must sum to a positive value")
    ws = [w / total for _, w in updates]
    if len(updates) == 1:
        ws = [1.0]
    weights = [ws[0] * w for w in first.weights]
    biases = [ws[0] * b for b in first.biases]
    for (p, _), a in zip(updates[1:], ws[1:]):
        for i in range(len(weights)):
            weights[i] = weights[i] + a * p.weights[i]
            biases[i] = biases[i] + a * p.biases[i]
    weights = [np.where(m, w, 0.0) for w, m in zip(weights, first.masks)]
    return first.replace(weights=weights, biases=biases)


def select_clients(population: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``k`` distinct client ids, ascending."""
    if k > population:
        raise ValueError(f"cannot select {k} of {population} clients")
    if k == population:
        return np.arange(population)
    return np.sort(rng.choice(population, size=k, replace=False))


# -- pruning strategies used by the round loop ------------------------------

class NoPruning:
    """Fixed mask; conventional FedAvg."""

    name = "none"

    def kind(self, r: int) -> RoundKind:
        return RoundKind.NORMAL

    def collect(self, r: int) -> bool:
        return False

    def after_aggregate(self, server: "ServerState", r: int, importance) -> Optional[ReconfigPlan]:
        return None


class AdaptivePruning(NoPruning):
    """Reconfigure every ``interval`` rounds from importance gathered throughout."""

    name = "adaptive"

    def __init__(self, sched: Schedules, interval: int):
        self.sched = sched
        self.interval = interval

    def kind(self, r):
        return RoundKind.RECONFIG if (r + 1) % self.interval == 0 else RoundKind.NORMAL

    def collect(self, r):
        return True

    def after_aggregate(self, server, r, importance):
        if self.kind(r) is not RoundKind.RECONFIG:
            return None
        server.params, plan = reconfigure(server.params, importance, server.cost, self.sched, r)
        return plan


@dataclass
class TraceLine:
    round: int
    client: int
    direction: str
    kind: str
    nbytes: int

    def format(self) -> str:
        return f"{self.round}\t{self.client}\t{self.direction}\t{self.kind}\t{self.nbytes}"


@dataclass
class ServerState:
    params: MaskedParams
    cost: CostModel
    round: int = 0
    clock: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    last_loss: float = float("nan")
    last_kind: RoundKind = RoundKind.NORMAL
    plans: list = field(default_factory=list)
    trace: Optional[list] = None
    selection_rng: Optional[np.random.Generator] = None


def round_participants(server: ServerState, clients, rc: RoundConfig) -> np.ndarray:
    k = rc.clients_per_round
    if k is None or k >= len(clients):
        return np.arange(len(clients))
    if server.selection_rng is None:
        raise ValueError("client sampling needs a selection rng")
    return select_clients(len(clients), k, server.selection_rng)


def run_round(
    server: ServerState,
    clients: List[Client],
    rc: RoundConfig,
    model: Model,
    sgd: SgdConfig,
    strategy=None,
) -> ServerState:
    """Advance ``server`` by one round (in place) and return it."""
    strategy = strategy or NoPruning()
    r = server.round
    kind = strategy.kind(r)
    collect = strategy.collect(r)
    ids = [int(i) for i in round_participants(server, clients, rc)]
    global_params = server.params
    updates, imps, iw, losses, active = [], [], [], [], []
    for i in ids:
        c = clients[i]
        if len(c) == 0:
            log.warning("round %d: client %d has no data, skipped", r, c.cid)
            continue
        res = client_local_update(c, model, global_params, rc, sgd, r, collect)
        updates.append((res.params, c.weight))
        active.append(i)
        losses.append((res.loss, c.weight))
        if kind is RoundKind.RECONFIG and collect:
            imps.append(c.importance(global_params.capacity).snapshot())
            iw.append(c.weight)
    if not updates:
        raise RuntimeError(f"round {r}: no participant had data")
    server.params = server_aggregate(updates)
    kept_before = global_params.kept_per_layer()
    importance = merge_importance(imps, iw) if imps else None
    plan = strategy.after_aggregate(server, r, importance)
    if kind is RoundKind.RECONFIG:
        for c in clients:
            if c.accumulator is not None:
                c.accumulator.reset()
    if plan is not None:
        server.plans.append((r, plan))
    caps = global_params.layer_sizes()
    new_kept = server.params.kept_per_layer()
    up, down = comm_split(kept_before, kind, caps, new_kept)
    n = len(updates)
    server.bytes_up += up * n
    server.bytes_down += down * n
    if server.trace is not None:
        if kind is RoundKind.RECONFIG:
            utag, dtag = "importance", "sparse_model"
        else:
            utag = dtag = "values"
        for i in active:
            server.trace.append(TraceLine(r, i, "up", utag, up))
            server.trace.append(TraceLine(r, i, "down", dtag, down))
    server.clock += round_time(server.cost, kept_before, kind, caps, new_kept)
    wsum = math.fsum(w for _, w in losses)
    server.last_loss = math.fsum(l * w for l, w in losses) / wsum
    server.last_kind = kind
    server.round += 1
    return server


# -- initial pruning at a single client --------------------------------------

@dataclass(frozen=True)
class InitialPruningConfig:
    max_iterations: int = 2000
    iters_per_reconfig: int = 5
    client: int = 0
    stable_tol: float = 0.10
    stable_count: int = 5


@dataclass
class InitStep:
    iteration: int
    clock: float
    density: float
    loss: float
    reconfig: bool


def initial_pruning(
    client: Client,
    model: Model,
    params: MaskedParams,
    sgd: SgdConfig,
    cm: CostModel,
    sched: Schedules,
    cfg: InitialPruningConfig,
    batch_size: int,
    local_iters: int,
    on_step: Optional[Callable[[InitStep, MaskedParams], None]] = None,
):
    """Train and reconfigure on one client until the model size settles.

    Stops after ``cfg.stable_count`` consecutive reconfigurations whose
    relative size change is below ``cfg.stable_tol``, or after
    ``cfg.max_iterations`` local iterations. Each block of ``local_iters``
    iterations costs one round of compute time (no communication).

    Returns ``(params, steps, sizes)``.
    """
    if len(client) == 0:
        raise ValueError("initial pruning needs a client with data")
    opt = SGD(sgd)
    acc = ImportanceAccumulator(params.capacity)
    steps: List[InitStep] = []
    sizes = [int(sum(params.kept_per_layer()))]
    clock = 0.0
    stable = 0
    for it in range(cfg.max_iterations):
        xb, yb = client.next_batch(batch_size)
        loss, grad = nn.loss_and_grad(model, params, xb, yb)
        acc.add(grad.flat(params), len(yb))
        params = opt.step(params, grad, 0)
        clock += cm.compute_time(params.kept_per_layer()) / local_iters
        reconf = (it + 1) % cfg.iters_per_reconfig == 0
        if reconf:
            params, _ = reconfigure(params, acc.sums, cm, sched, 0, cap_round=0)
            opt.on_mask_change(params)
            acc.reset()
            size = int(sum(params.kept_per_layer()))
            prev = sizes[-1]
            change = abs(size - prev) / prev if prev else (0.0 if size == 0 else math.inf)
            sizes.append(size)
            stable = stable + 1 if change < cfg.stable_tol else 0
        step = InitStep(it, clock, params.density, loss, reconf)
        steps.append(step)
        if on_step is not None:
            on_step(step, params)
        if reconf and stable >= cfg.stable_count:
            break
    return params, steps, sizes


def full_gradient(model: Model, params: MaskedParams, x, y):
    """Loss and gradient over a whole dataset (one batch)."""
    return nn.loss_and_grad(model, params, x, y)
