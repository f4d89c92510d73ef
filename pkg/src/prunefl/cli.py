"""Command line: ``prunefl {run, lottery, summarize, fit-cost}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import cost, harness


def _load_config(args):
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"out={args.out}")
    return config_mod.load(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    res = harness.run_experiment(cfg, thresholds=args.thresholds)
    print(json.dumps(res.summary, indent=2, sort_keys=True, default=harness._json_default))
    print(f"wrote {cfg.out}")
    return 0


def cmd_lottery(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or harness.sidecar(cfg.out, ".pfnn")
    res = harness.lottery_eval(cfg, ckpt, args.rounds)
    harness.write_lottery(cfg.out, res)
    for name in ("original", "random", "full"):
        recs = getattr(res, name)
        final = recs[-1].test_accuracy if recs else float("nan")
        print(f"{name:8s} final_accuracy={final:.4f}")
    print(f"density={res.density:.4f} original_seed={res.original_seed} random_seed={res.random_seed}")
    return 0


def cmd_summarize(args) -> int:
    tables = {}
    for path in args.csv:
        tables[Path(path).stem] = harness.summarize_time_to_accuracy(
            harness.read_records(path), args.thresholds
        )
    print(harness.format_time_table(tables))
    return 0


def read_timing_csv(path):
    """Rows of ``seconds, count_layer0, count_layer1, ...`` with a header."""
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "seconds":
            raise ValueError(f"{path}: first column must be 'seconds'")
        for row in reader:
            if not row:
                continue
            samples.append(cost.TimingSample(tuple(int(v) for v in row[1:]), float(row[0])))
    return samples


def cmd_fit_cost(args) -> int:
    samples = read_timing_csv(args.samples)
    cm = cost.fit(samples)
    if args.bandwidth is not None:
        cm = cost.CostModel(cm.c, cm.t_per_layer, args.bandwidth, cm.r_squared)
    out = args.out or "cost_preset.yaml"
    cost.save_preset(cm, out)
    print(f"c={cm.c!r} t={list(cm.t_per_layer)!r} r_squared={cm.r_squared!r}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunefl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output CSV path")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dotted config override, repeatable")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.add_argument("--thresholds", type=float, nargs="+", default=[0.9])
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("lottery", help="retrain a pruned mask from original and fresh inits")
    common(sp)
    sp.add_argument("--checkpoint", help="pruned model (default: <out>.pfnn)")
    sp.add_argument("--rounds", type=int)
    sp.set_defaults(func=cmd_lottery)

    sp = sub.add_parser("summarize", help="time to reach accuracy thresholds")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--thresholds", type=float, nargs="+", default=[0.9])
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("fit-cost", help="fit a round-time preset from timing samples")
    sp.add_argument("samples", help="CSV: seconds, then one count column per layer")
    sp.add_argument("--out", help="preset YAML path")
    sp.add_argument("--bandwidth", type=float, help="bytes per second to record in the preset")
    sp.set_defaults(func=cmd_fit_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (config_mod.ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
