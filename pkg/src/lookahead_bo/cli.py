"""Command-line entry point: ``lookahead-bo <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .engine import BOConfig, ProtocolError, Schedule, Session
from .gp import Dataset, fit_hyperparameters
from .harness import (
    STRATEGIES,
    ExperimentConfig,
    bo_config,
    emit_results,
    reemit_results,
    run_experiment,
    starting_samples,
    strategy_spec,
)
from .optimize import OptimizerConfig
from .testbed import ORACLE_NAMES, OracleSpec, evaluate_oracle, make_oracle, true_value


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="base random seed")
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--out", default=None, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lookahead-bo",
        description="Lookahead Bayesian optimization for a future horizon.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("bench", help="run a replicated benchmark from a JSON config")
    p.add_argument("config", help="experiment config file (JSON)")
    p.add_argument("--replications", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("run", help="run one strategy once on a built-in oracle")
    p.add_argument("--oracle", required=True, choices=[o for o in ORACLE_NAMES if o != "external"])
    p.add_argument("--strategy", required=True, type=str, help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--q", type=int, required=True, help="total budget")
    p.add_argument("--n", type=int, required=True, help="starting samples")
    p.add_argument("--t-first", type=float, default=0.0)
    p.add_argument("--t-start", type=float, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--noise", type=float, default=1e-3)
    p.add_argument("--mc-samples", type=int, default=32)
    p.add_argument("--center", action="store_true",
                   help="use the sample mean of the observations as prior mean (default zero)")
    _add_common(p)

    for name, helptext in (("ask", "propose the next decision of a session"),
                           ("tell", "report the observation for the pending decision")):
        p = sub.add_parser(name, help=helptext)
        if name == "tell":
            p.add_argument("y", type=float, help="observed value")
        p.add_argument("--session", required=True, help="session file (created by ask if absent)")
        if name == "ask":
            p.add_argument("--strategy", default="r2LEY")
            p.add_argument("--dim", type=int, default=1)
            p.add_argument("--t-start", type=float, default=0.0)
            p.add_argument("--horizon", type=float, default=1.0)
            p.add_argument("--steps", type=int, default=10)
            p.add_argument("--data", default=None, help="starting data CSV (t, x_1..x_d, y)")
            p.add_argument("--mc-samples", type=int, default=32)
        _add_common(p)

    p = sub.add_parser("fit", help="fit GP hyperparameters to a CSV dataset (t, x_1..x_d, y)")
    p.add_argument("data", help="CSV file with a header row")
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--center", action="store_true",
                   help="fit around the sample mean of y instead of a zero prior mean")
    _add_common(p)

    p = sub.add_parser("oracle", help="probe a built-in oracle")
    osub = p.add_subparsers(dest="oracle_command", required=True, metavar="action")
    e = osub.add_parser("eval", help="evaluate NAME at native x_1 .. x_d and time t")
    e.add_argument("name")
    e.add_argument("values", nargs="+", type=float, help="x_1 ... x_d t")
    e.add_argument("--noise", type=float, default=1e-3)
    _add_common(e)

    p = sub.add_parser("plotdata", help="recompute summary and plot files from stored results")
    p.add_argument("results", help="directory written by bench")
    _add_common(p)
    return parser


def _load_csv_dataset(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header and at least one row")
    arr = np.array([[float(v) for v in r] for r in rows[1:]])
    if arr.shape[1] < 3:
        raise ValueError(f"{path}: expected columns t, x_1..x_d, y")
    return Dataset(arr[:, 1:-1], arr[:, 0], arr[:, -1])


def _fmt_point(x, t) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(x)) + " " + repr(float(t))


def cmd_bench(args) -> int:
    config = ExperimentConfig.load(args.config)
    config = config.replace(base_seed=args.seed, replications=args.replications,
                            output_dir=args.out)
    if not config.output_dir:
        config = config.replace(output_dir="results")
    result = run_experiment(config, threads=max(1, args.threads))
    for s in config.strategies:
        v = result.final_values(s)
        mean = f"{np.mean(v):.6g}" if v.size else "nan"
        print(f"{s:10s} mean f(x_T, T) = {mean}  ({v.size}/{config.replications} complete)")
    print(f"results written to {config.output_dir}")
    return 0


def cmd_run(args) -> int:
    config = ExperimentConfig(args.oracle, (args.strategy,), args.q, args.n, args.t_start,
                              args.horizon, 1, args.seed or 0, args.t_first, args.noise,
                              args.mc_samples, center=args.center)
    from .harness import run_cell
    from .testbed import true_maximizer

    strategy = config.strategies[0]
    cell = run_cell(config, 0, strategy, true_maximizer(config.oracle_spec, config.horizon).maximizer)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(cell.trace.to_dict() if cell.trace else None, fh, indent=1)
    if not cell.ok:
        print(f"run failed: {cell.error}", file=sys.stderr)
        return 1
    spec = config.oracle_spec
    xT, yT = cell.trace.final
    print(f"x_T = {list(map(float, spec.to_native(xT)))}")
    print(f"y_T = {yT!r}")
    print(f"f(x_T, T) = {cell.final_value!r}")
    print(f"|x_T - x*_T| = {cell.distance!r}")
    return 0


def cmd_ask(args) -> int:
    if os.path.exists(args.session):
        session = Session.load(args.session)
    else:
        spec = strategy_spec(args.strategy, args.mc_samples)
        data = _load_csv_dataset(args.data) if args.data else Dataset.empty(args.dim)
        schedule = Schedule.uniform(args.t_start, args.horizon, args.steps)
        session = Session(data, schedule, BOConfig(spec, seed=args.seed or 0))
    x, t = session.ask()
    session.save(args.session)
    print(_fmt_point(x, t))
    return 0


def cmd_tell(args) -> int:
    session = Session.load(args.session)
    session.tell(args.y)
    session.save(args.session)
    remaining = len(session.schedule) - session.position
    print(f"recorded y = {args.y!r}; {remaining} decision(s) remaining")
    return 0


def cmd_fit(args) -> int:
    data = _load_csv_dataset(args.data)
    hyp = fit_hyperparameters(data, n_starts=args.starts,
                              rng=np.random.default_rng(args.seed or 0), center=args.center)
    text = json.dumps(hyp.to_dict(), indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_oracle(args) -> int:
    spec = OracleSpec(args.name, args.noise)
    *x, t = args.values
    if len(x) != spec.dim:
        raise ValueError(f"{spec.kind} takes {spec.dim} coordinate(s) followed by t")
    if args.noise == 0:
        value = true_value(spec, np.array(x), t)
    else:
        value = evaluate_oracle(spec, np.array(x), t, np.random.default_rng(args.seed))
    print(repr(float(value)))
    return 0


def cmd_plotdata(args) -> int:
    paths = reemit_results(args.results, args.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


COMMANDS = {
    "bench": cmd_bench,
    "run": cmd_run,
    "ask": cmd_ask,
    "tell": cmd_tell,
    "fit": cmd_fit,
    "oracle": cmd_oracle,
    "plotdata": cmd_plotdata,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench" and not os.path.isfile(args.config):
        parser.print_usage(sys.stderr)
        print(f"lookahead-bo: error: config file {args.config!r} not found", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (ValueError, ProtocolError, OSError, KeyError) as exc:
        print(f"lookahead-bo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
