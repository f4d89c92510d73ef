"""Config-driven experiment runner, lottery-ticket check and summaries."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, cost, data, nn
from .baselines import IterativePruning, OneShotPruning
from .config import ConfigError, ExperimentConfig
from .fl import (
    AdaptivePruning,
    InitialPruningConfig,
    NoPruning,
    RoundConfig,
    ServerState,
    initial_pruning,
    make_clients,
    run_round,
)
from .pruner import Schedules, plan_row, write_plans

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "round",
    "sim_seconds",
    "density",
    "train_loss",
    "test_accuracy",
    "bytes_up",
    "bytes_down",
    "reconfig",
)
NOT_REACHED = "not reached"


@dataclass
class RoundRecord:
    round: int
    sim_seconds: float
    density: float
    train_loss: float
    test_accuracy: float
    bytes_up: int
    bytes_down: int
    reconfig: bool

    def row(self) -> list:
        return [
            str(self.round),
            repr(float(self.sim_seconds)),
            repr(float(self.density)),
            repr(float(self.train_loss)),
            repr(float(self.test_accuracy)),
            str(self.bytes_up),
            str(self.bytes_down),
            str(int(self.reconfig)),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "RoundRecord":
        return cls(
            int(row["round"]),
            float(row["sim_seconds"]),
            float(row["density"]),
            float(row["train_loss"]),
            float(row["test_accuracy"]),
            int(row["bytes_up"]),
            int(row["bytes_down"]),
            row["reconfig"] == "1",
        )


def write_records(path, records: Sequence[RoundRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.row())


def read_records(path) -> List[RoundRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [RoundRecord.from_row(r) for r in reader]


def sidecar(out, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + suffix)


# -- building blocks from a config -----------------------------------------

def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = data.generate_synthetic(
            d.classes, d.dims, d.n_train, d.n_test, cfg.seed,
            separation=d.separation, clusters_per_class=d.clusters_per_class, noise=d.noise,
        )
    else:
        full = data.load_idx(d.images, d.labels, d.classes)
        perm = np.random.default_rng(cfg.seed).permutation(len(full.y_train))
        n_test = int(round(d.test_fraction * len(perm)))
        te, tr = np.sort(perm[:n_test]), np.sort(perm[n_test:])
        x = full.x_train
        ds = data.Dataset(x[tr], full.y_train[tr], x[te], full.y_train[te], d.classes)
    if cfg.model.kind == "mlp" and len(ds.feature_shape) > 1:
        n = int(np.prod(ds.feature_shape))
        ds = data.Dataset(ds.x_train.reshape(len(ds.x_train), n), ds.y_train,
                          ds.x_test.reshape(len(ds.x_test), n), ds.y_test, ds.num_classes)
    if cfg.model.kind == "cnn" and len(ds.feature_shape) == 2:
        ds = data.Dataset(ds.x_train[:, None], ds.y_train, ds.x_test[:, None], ds.y_test,
                          ds.num_classes)
    return ds


def build_model(cfg: ExperimentConfig, feature_shape, num_classes: int) -> nn.Model:
    m = cfg.model
    if m.kind == "mlp":
        return nn.mlp(int(np.prod(feature_shape)), m.hidden, num_classes)
    if len(feature_shape) != 3:
        raise ConfigError("model.kind: cnn needs (channels, height, width) inputs")
    c, h, w = feature_shape
    layers = []
    pad = m.kernel_size // 2
    for ch in m.channels:
        layers += [nn.conv2d(c, ch, m.kernel_size, 1, pad), nn.relu()]
        c = ch
        h = h + 2 * pad - m.kernel_size + 1
        w = w + 2 * pad - m.kernel_size + 1
    layers.append(nn.flatten())
    prev = c * h * w
    for hid in m.hidden:
        layers += [nn.fc(prev, hid), nn.relu()]
        prev = hid
    layers += [nn.fc(prev, num_classes), nn.softmax_ce()]
    return nn.Model(tuple(layers), tuple(feature_shape), num_classes)


def build_cost(cfg: ExperimentConfig, model: nn.Model) -> cost.CostModel:
    n_layers = len(model.param_layers)
    if cfg.cost.preset is not None:
        cm = cost.load_preset(cfg.cost.preset)
    else:
        t = cfg.cost.t_per_layer
        t = [t] * n_layers if isinstance(t, float) else list(t)
        bw = cfg.cost.bandwidth_Bps
        cm = cost.CostModel(cfg.cost.c_seconds, tuple(t), math.inf if bw is None else bw)
    if len(cm.t_per_layer) != n_layers:
        raise ConfigError(
            f"cost.t_per_layer: {len(cm.t_per_layer)} values for {n_layers} parameterized layers"
        )
    return cm


def build_schedules(cfg: ExperimentConfig) -> Schedules:
    s = cfg.schedules
    return Schedules(s.alpha_base, s.alpha_half_life, s.density_limit, s.density_target, s.r_max)


def build_round(cfg: ExperimentConfig) -> RoundConfig:
    r = cfg.round
    return RoundConfig(r.local_iters, r.batch_size, r.clients_per_round, r.reconfig_interval)


def build_sgd(cfg: ExperimentConfig) -> nn.SgdConfig:
    return nn.SgdConfig(cfg.sgd.lr, cfg.sgd.momentum, cfg.sgd.lr_half_life)


def build_shards(cfg: ExperimentConfig, ds: data.Dataset):
    p = cfg.data.partition
    spec = data.PartitionSpec(data.PartitionMode(p.mode), p.num_clients, cfg.seed,
                              p.labels_per_client)
    return data.partition(ds, spec)


def matched_density(cfg: ExperimentConfig) -> float:
    if cfg.matched_density is not None:
        return cfg.matched_density
    with open(cfg.matched_summary) as f:
        return float(json.load(f)["final_density"])


@dataclass
class Setup:
    cfg: ExperimentConfig
    ds: data.Dataset
    model: nn.Model
    cm: cost.CostModel
    sched: Schedules
    rc: RoundConfig
    sgd: nn.SgdConfig
    shards: list

    def clients(self):
        return make_clients(self.ds.x_train, self.ds.y_train, self.shards, self.cfg.seed)

    def evaluate(self, params) -> float:
        return nn.accuracy(self.model, params, self.ds.x_test, self.ds.y_test)


def setup(cfg: ExperimentConfig) -> Setup:
    ds = build_dataset(cfg)
    model = build_model(cfg, ds.feature_shape, ds.num_classes)
    return Setup(cfg, ds, model, build_cost(cfg, model), build_schedules(cfg),
                 build_round(cfg), build_sgd(cfg), build_shards(cfg, ds))


# -- experiment ---------------------------------------------------------------

@dataclass
class ExperimentResult:
    records: List[RoundRecord]
    summary: dict
    params: nn.MaskedParams
    plans: list
    trace: list


def _train(
    env: Setup,
    params: nn.MaskedParams,
    strategy,
    rounds: int,
    clock: float = 0.0,
    records: Optional[list] = None,
    trace: Optional[list] = None,
):
    """Run ``rounds`` FL rounds from ``params``; returns the final server state."""
    records = [] if records is None else records
    clients = env.clients()
    server = ServerState(params, env.cm, clock=clock, trace=trace,
                         selection_rng=np.random.default_rng([env.cfg.seed, 1]))
    every = env.cfg.eval_every
    for r in range(rounds):
        up0, down0 = server.bytes_up, server.bytes_down
        run_round(server, clients, env.rc, env.model, env.sgd, strategy)
        evaluated = (r + 1) % every == 0 or r == rounds - 1
        acc = env.evaluate(server.params) if evaluated else math.nan
        records.append(RoundRecord(
            r, server.clock, server.params.density, server.last_loss, acc,
            server.bytes_up - up0, server.bytes_down - down0,
            server.last_kind is cost.RoundKind.RECONFIG,
        ))
    return server


def _initial_pruning(env: Setup, params, records: list):
    """Prune on one client; every ``local_iters`` iterations become one
    pseudo-round with a negative index."""
    cfg = env.cfg.initial_pruning
    ipc = InitialPruningConfig(cfg.max_iterations, cfg.iters_per_reconfig, client=cfg.client,
                               stable_tol=cfg.stable_tol, stable_count=cfg.stable_count)
    clients = env.clients()
    if not 0 <= cfg.client < len(clients):
        raise ConfigError(f"initial_pruning.client: no client {cfg.client}")
    e = env.rc.local_iters
    block = []

    def on_step(step, p):
        block.append(step)
        if len(block) == e:
            flush(p)

    pending = []

    def flush(p):
        pending.append(RoundRecord(
            0, block[-1].clock, p.density, float(np.mean([s.loss for s in block])),
            env.evaluate(p), 0, 0, any(s.reconfig for s in block),
        ))
        block.clear()

    params, steps, sizes = initial_pruning(
        clients[cfg.client], env.model, params, env.sgd, env.cm, env.sched, ipc,
        env.rc.batch_size, e, on_step,
    )
    if block:
        flush(params)
    n = len(pending)
    for i, rec in enumerate(pending):
        rec.round = i - n
    records.extend(pending)
    clock = steps[-1].clock if steps else 0.0
    return params, clock, steps, sizes


def make_strategy(cfg: ExperimentConfig, sched: Schedules):
    if cfg.method == "prunefl":
        return AdaptivePruning(sched, cfg.round.reconfig_interval)
    if cfg.method == "oneshot":
        return OneShotPruning(matched_density(cfg))
    if cfg.method == "iterative":
        return IterativePruning(matched_density(cfg), cfg.rounds)
    return NoPruning()


def run_experiment(cfg: ExperimentConfig, write: bool = True,
                   thresholds: Sequence[float] = (0.9,)) -> ExperimentResult:
    """Run the configured method; with ``write``, emit the CSV and sidecars."""
    cfg.validate()
    env = setup(cfg)
    params = nn.init_params(env.model, cfg.seed)
    initial_accuracy = env.evaluate(params)
    records: List[RoundRecord] = []
    trace: list = []
    clock = 0.0
    init_info = {"iterations": 0, "sizes": []}
    strategy = make_strategy(cfg, env.sched)
    if cfg.rounds > 0 and cfg.method == "prunefl" and cfg.initial_pruning.enabled:
        params, clock, steps, sizes = _initial_pruning(env, params, records)
        init_info = {"iterations": len(steps), "sizes": sizes}
    server = _train(env, params, strategy, cfg.rounds, clock, records, trace)
    plans = [plan_row(r, p) for r, p in server.plans]
    fl_records = [r for r in records if r.round >= 0]
    final = fl_records[-1] if fl_records else None
    summary = {
        "method": cfg.method,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "initial_accuracy": initial_accuracy,
        "initial_pruning_iterations": init_info["iterations"],
        "initial_pruning_sizes": init_info["sizes"],
        "final_density": server.params.density,
        "final_accuracy": final.test_accuracy if final else initial_accuracy,
        "final_train_loss": final.train_loss if final else math.nan,
        "sim_seconds": server.clock,
        "bytes_up": server.bytes_up,
        "bytes_down": server.bytes_down,
        "reconfigurations": len(plans),
        "time_to_accuracy": {
            str(t): v for t, v in summarize_time_to_accuracy(records, thresholds).items()
        },
    }
    if cfg.method in ("oneshot", "iterative"):
        summary["matched_density"] = matched_density(cfg)
    if write:
        _write_outputs(cfg.out, records, summary, server.params, plans, trace)
    return ExperimentResult(records, summary, server.params, plans, trace)


def _write_outputs(out, records, summary, params, plans, trace):
    out = Path(out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_records(out, records)
    write_plans(sidecar(out, ".plans.csv"), plans)
    with open(sidecar(out, ".trace.log"), "w") as f:
        for line in trace:
            f.write(line.format() + "\n")
    checkpoint.save(params, sidecar(out, ".pfnn"))
    with open(sidecar(out, ".summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# -- time to accuracy -----------------------------------------------------------

def summarize_time_to_accuracy(records: Sequence[RoundRecord], thresholds) -> Dict[float, object]:
    """First simulated time at which each accuracy threshold is reached.

    Records without an evaluation (NaN accuracy) are skipped; thresholds
    never reached map to ``"not reached"``.
    """
    out = {}
    for t in thresholds:
        hit = next((r.sim_seconds for r in records
                    if not math.isnan(r.test_accuracy) and r.test_accuracy >= t), None)
        out[t] = NOT_REACHED if hit is None else hit
    return out


def format_time_table(tables: Dict[str, Dict[float, object]]) -> str:
    """Plain-text table: one row per run, one column per threshold."""
    thresholds = sorted({t for tab in tables.values() for t in tab})
    head = ["run"] + [f"acc>={t:g}" for t in thresholds]
    rows = [head]
    for name, tab in tables.items():
        cells = [name]
        for t in thresholds:
            v = tab.get(t, NOT_REACHED)
            cells.append(v if isinstance(v, str) else f"{v:.2f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


# -- lottery ticket -------------------------------------------------------------

def fresh_seed(seed: int) -> int:
    """A seed unrelated to ``seed`` for random reinitialization."""
    return int(np.random.SeedSequence([seed, 0x5EED]).generate_state(1)[0])


@dataclass
class LotteryResult:
    original: List[RoundRecord]
    random: List[RoundRecord]
    full: List[RoundRecord]
    density: float
    original_seed: int
    random_seed: int


def lottery_eval(cfg: ExperimentConfig, checkpoint_path, rounds: Optional[int] = None,
                 random_seed: Optional[int] = None) -> LotteryResult:
    """Retrain the checkpoint's mask from the original-seed and a fresh
    initialization (no further pruning), plus the unpruned reference.

    The checkpoint must carry the seed it was initialized from.
    """
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"checkpoint {checkpoint_path} not found")
    trained = checkpoint.load(checkpoint_path)
    if trained.seed is None:
        raise checkpoint.CheckpointError("checkpoint has no initialization seed")
    env = setup(cfg)
    if rounds is None:
        rounds = cfg.rounds if cfg.lottery_rounds is None else cfg.lottery_rounds
    rs = fresh_seed(trained.seed) if random_seed is None else random_seed
    template = nn.init_params(env.model, trained.seed)
    if [w.shape for w in template.weights] != [w.shape for w in trained.weights]:
        raise ConfigError("model: checkpoint shapes do not match the configured model")
    original = nn.apply_mask(template, trained.masks)
    randomized = nn.apply_mask(nn.init_params(env.model, rs), trained.masks)
    out = []
    for p in (original, randomized, template):
        recs: List[RoundRecord] = []
        _train(env, p, NoPruning(), rounds, records=recs)
        out.append(recs)
    return LotteryResult(out[0], out[1], out[2], trained.density, trained.seed, rs)


def write_lottery(out, result: LotteryResult) -> None:
    for name in ("original", "random", "full"):
        write_records(sidecar(out, f".{name}.csv"), getattr(result, name))


__all__ = [
    "CSV_COLUMNS",
    "NOT_REACHED",
    "RoundRecord",
    "ExperimentResult",
    "LotteryResult",
    "run_experiment",
    "lottery_eval",
    "summarize_time_to_accuracy",
    "read_records",
    "write_records",
]
