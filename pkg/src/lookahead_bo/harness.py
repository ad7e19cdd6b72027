"""Replicated benchmark runs, metrics and result files.

Every strategy in a replication starts from the same starting samples,
drawn from a generator seeded by ``(base_seed, rep)``. Each (rep,
strategy) cell then gets its own generator seeded by ``(base_seed, rep,
crc32(strategy))``, so cells never influence each other.
"""

from __future__ import annotations

import csv
import json
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .acquisition import AcquisitionSpec
from .engine import BOConfig, RunTrace, Schedule, run_strategy
from .gp import Dataset
from .optimize import OptimizerConfig
from .testbed import OracleSpec, evaluate_oracle, make_oracle, true_maximizer, true_value
from .values import ValueFunctionSpec

__all__ = [
    "CONFIG_SCHEMA_VERSION",
    "STRATEGIES",
    "ExperimentConfig",
    "CellResult",
    "ExperimentResult",
    "strategy_spec",
    "starting_samples",
    "run_cell",
    "run_experiment",
    "emit_results",
    "reemit_results",
    "summarize",
]

CONFIG_SCHEMA_VERSION = 1
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"
PLOT_FILE = "plotdata.csv"
CELLS_FILE = "cells.json"
CONFIG_FILE = "config.json"


def _two_step(vf):
    return lambda n: AcquisitionSpec("two_step", vf, mc_samples=n)


STRATEGIES = {
    "EI": lambda n: AcquisitionSpec("ei"),
    "PI": lambda n: AcquisitionSpec("pi"),
    "UCB": lambda n: AcquisitionSpec("ucb", beta=2.0),
    "EImumax": lambda n: AcquisitionSpec("eimumax"),
    "PImumax": lambda n: AcquisitionSpec("pimumax"),
    "mumax": lambda n: AcquisitionSpec("mumax"),
    "Random": lambda n: AcquisitionSpec("random"),
    "r2LEY": _two_step(ValueFunctionSpec.identity()),
    "r2LEI": _two_step(ValueFunctionSpec.ei("posterior_mean_max")),
    "r2LPI": _two_step(ValueFunctionSpec.pi("posterior_mean_max")),
    "r2LUCB": _two_step(ValueFunctionSpec.ucb(2.0)),
    "KG": lambda n: AcquisitionSpec("kg", mc_samples=n),
}
_CANONICAL = {k.lower(): k for k in STRATEGIES}


def canonical_strategy(name: str) -> str:
    try:
        return _CANONICAL[name.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None


def strategy_spec(name: str, mc_samples: int = 32) -> AcquisitionSpec:
    return STRATEGIES[canonical_strategy(name)](mc_samples)


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark: an oracle, a set of strategies and a budget.

    ``n`` starting samples are placed at evenly spaced times in
    ``[t_first, t_start]``; the remaining ``q - n`` decisions are evenly
    spaced in ``(t_start, horizon]``.
    """

    oracle: str
    strategies: tuple
    q: int
    n: int
    t_start: float
    horizon: float
    replications: int = 1
    base_seed: int = 0
    t_first: float = 0.0
    noise_variance: float = 1e-3
    mc_samples: int = 32
    n_starts: int = 16
    one_shot: bool = True
    refit_each_step: bool = True
    fit_starts: int = 8
    center: bool = False
    record_wall_time: bool = True
    output_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategies",
                           tuple(canonical_strategy(s) for s in self.strategies))
        if len(set(self.strategies)) != len(self.strategies):
            raise ValueError("strategies must be distinct")
        if not 0 <= self.n < self.q:
            raise ValueError("need 0 <= n < q")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.horizon > self.t_start:
            raise ValueError("horizon must exceed t_start")
        if self.n and not self.t_start >= self.t_first:
            raise ValueError("t_start must not precede t_first")
        self.oracle_spec  # validates the oracle name

    @property
    def oracle_spec(self) -> OracleSpec:
        return OracleSpec(self.oracle, self.noise_variance)

    @property
    def schedule(self) -> Schedule:
        return Schedule.uniform(self.t_start, self.horizon, self.q - self.n)

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategies"] = list(self.strategies)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d["strategies"] = tuple(d["strategies"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _seed(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1, dtype=np.uint64)[0])


def _strategy_word(name: str) -> int:
    return zlib.crc32(name.encode())


def starting_samples(config: ExperimentConfig, rep: int) -> Dataset:
    """Starting data shared by every strategy of replication ``rep``."""
    spec = config.oracle_spec
    rng = np.random.default_rng(np.random.SeedSequence([config.base_seed, rep]))
    if config.n == 0:
        return Dataset.empty(spec.dim)
    times = np.linspace(config.t_first, config.t_start, config.n)
    if config.n > 1 and times[-1] == times[-2]:
        raise ValueError("starting times must be distinct")
    U = rng.uniform(size=(config.n, spec.dim))
    y = np.array([evaluate_oracle(spec, spec.to_native(u), t, rng) for u, t in zip(U, times)])
    return Dataset(U, times, y)


def bo_config(config: ExperimentConfig, strategy: str, rep: int) -> BOConfig:
    return BOConfig(
        strategy_spec(strategy, config.mc_samples),
        OptimizerConfig(n_starts=config.n_starts),
        refit_each_step=config.refit_each_step,
        seed=_seed(config.base_seed, rep, _strategy_word(strategy)),
        fit_starts=config.fit_starts,
        one_shot=config.one_shot,
        center=config.center,
    )


@dataclass
class CellResult:
    rep: int
    strategy: str
    trace: RunTrace | None
    final_value: float = math.nan
    distance: float = math.nan
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.trace is not None and self.trace.complete


def run_cell(config: ExperimentConfig, rep: int, strategy: str,
             maximizer: np.ndarray | None = None) -> CellResult:
    """Run one strategy on one replication; failures are captured, not raised."""
    spec = config.oracle_spec
    try:
        data0 = starting_samples(config, rep)
        noise_rng = np.random.default_rng(
            np.random.SeedSequence([config.base_seed, rep, _strategy_word(strategy), 1]))
        trace = run_strategy(make_oracle(spec, noise_rng), data0, config.schedule,
                             bo_config(config, strategy, rep))
    except Exception as exc:  # noqa: BLE001 - isolate the cell
        return CellResult(rep, strategy, None, error=f"{type(exc).__name__}: {exc}")
    if not config.record_wall_time:
        for r in trace.records:
            r.wall_ms = 0.0
    if not trace.complete:
        return CellResult(rep, strategy, trace, error=trace.failure or "incomplete trace")
    x_native = spec.to_native(trace.final[0])
    value = float(true_value(spec, x_native, config.horizon))
    dist = math.nan if maximizer is None else float(np.linalg.norm(x_native - maximizer))
    return CellResult(rep, strategy, trace, value, dist)


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list = field(default_factory=list)
    maximizer: np.ndarray | None = None
    max_value: float = math.nan

    def cell(self, rep: int, strategy: str) -> CellResult:
        for c in self.cells:
            if c.rep == rep and c.strategy == strategy:
                return c
        raise KeyError((rep, strategy))

    def final_values(self, strategy: str) -> np.ndarray:
        return np.array([c.final_value for c in self.cells if c.strategy == strategy and c.ok])

    def distances(self, strategy: str) -> np.ndarray:
        return np.array([c.distance for c in self.cells if c.strategy == strategy and c.ok])


def check_output_dir(path) -> None:
    """Fail early when ``path`` cannot be created or written."""
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-probe")
    with open(probe, "w") as fh:
        fh.write("")
    os.remove(probe)


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run every (replication, strategy) cell; results are ordered by (rep, strategy)."""
    if config.output_dir:
        check_output_dir(config.output_dir)
    spec = config.oracle_spec
    gt = true_maximizer(spec, config.horizon) if spec.kind != "external" else None
    maximizer = None if gt is None else gt.maximizer
    jobs = [(config, r, s, maximizer) for r in range(config.replications) for s in config.strategies]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(*job) for job in jobs]
    result = ExperimentResult(config, cells, maximizer,
                              math.nan if gt is None else gt.value)
    if config.output_dir:
        emit_results(result, config.output_dir)
    return result


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def _header(d: int) -> list:
    return ["rep", "strategy", "iter", "t"] + [f"x_{i + 1}" for i in range(d)] \
        + ["yhat", "acq_value", "wall_ms"]


def _rows(result: ExperimentResult) -> list:
    spec = result.config.oracle_spec
    rows = []
    for c in result.cells:
        if c.trace is None:
            continue
        for r in c.trace.records:
            x = spec.to_native(r.x)
            rows.append([c.rep, c.strategy, r.index, r.t] + [float(v) for v in x]
                        + [r.y, r.acq_value, r.wall_ms])
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"count": 0, "mean": None, "std": None, "stderr": None,
                "median": None, "iqr": None, "values": []}
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    q25, q75 = np.percentile(v, [25, 75])
    return {"count": int(v.size), "mean": float(np.mean(v)), "std": std,
            "stderr": std / math.sqrt(v.size), "median": float(np.median(v)),
            "iqr": float(q75 - q25), "values": [float(x) for x in v]}


def _read_rows(path, d: int) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _header(d):
            raise ValueError(f"unexpected trace header {header}")
        out = []
        for row in reader:
            out.append([int(row[0]), row[1], int(row[2]), float(row[3])]
                       + [float(v) for v in row[4:]])
        return out


def summarize(config: ExperimentConfig, rows: list, cells: list,
              maximizer=None) -> tuple[dict, list]:
    """Summary statistics and plot series computed from trace rows.

    ``cells`` lists ``{"rep", "strategy", "status", "error"}``; only cells
    with status ``ok`` contribute to the final-decision metrics.
    """
    spec = config.oracle_spec
    d = spec.dim
    T = config.horizon
    steps = config.q - config.n
    by_cell: dict = {}
    for row in rows:
        by_cell.setdefault((row[0], row[1]), []).append(row)
    ok = {(c["rep"], c["strategy"]) for c in cells if c["status"] == "ok"}
    has_truth = spec.kind != "external"

    strategies = {}
    for s in config.strategies:
        finals, dists, yT = [], [], []
        for rep in range(config.replications):
            if (rep, s) not in ok:
                continue
            last = by_cell[(rep, s)][-1]
            x = np.array(last[4:4 + d])
            yT.append(last[4 + d])
            if has_truth:
                finals.append(float(true_value(spec, x, T)))
                if maximizer is not None:
                    dists.append(float(np.linalg.norm(x - np.asarray(maximizer))))
        strategies[s] = {
            "final_value": _stats(finals),
            "distance_to_maximizer": _stats(dists),
            "final_observation": _stats(yT),
            "failed": sum(1 for c in cells if c["strategy"] == s and c["status"] != "ok"),
        }
    summary = {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "oracle": spec.kind,
        "horizon": T,
        "replications": config.replications,
        "maximizer": None if maximizer is None else [float(v) for v in maximizer],
        "strategies": strategies,
        "failures": [c for c in cells if c["status"] != "ok"],
    }

    plot = []
    if has_truth:
        for s in config.strategies:
            for k in range(steps):
                vals, t = [], None
                for rep in range(config.replications):
                    rs = by_cell.get((rep, s), [])
                    if k < len(rs):
                        t = rs[k][3]
                        vals.append(float(true_value(spec, np.array(rs[k][4:4 + d]), t)))
                if vals:
                    st = _stats(vals)
                    plot.append([s, config.n + k + 1, t, st["mean"], st["std"], st["stderr"],
                                 st["count"]])
    return summary, plot


def _cells_record(result: ExperimentResult) -> list:
    return [{"rep": c.rep, "strategy": c.strategy, "status": "ok" if c.ok else "failed",
             "error": c.error} for c in result.cells]


def _write_outputs(out_dir, config, rows, cells, maximizer, max_value) -> None:
    d = config.oracle_spec.dim
    summary, plot = summarize(config, rows, cells, maximizer)
    summary["max_value"] = None if max_value is None or math.isnan(max_value) else max_value
    with open(os.path.join(out_dir, TRACE_FILE), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(d))
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    with open(os.path.join(out_dir, SUMMARY_FILE), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, PLOT_FILE), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "iter", "t", "mean", "std", "stderr", "count"])
        for row in plot:
            w.writerow([_fmt(v) for v in row])
    with open(os.path.join(out_dir, CELLS_FILE), "w") as fh:
        json.dump({"cells": cells,
                   "maximizer": None if maximizer is None else [float(v) for v in maximizer],
                   "max_value": summary["max_value"]}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
        stored = config.to_dict()
        stored.pop("output_dir")  # keep result files independent of where they live
        json.dump(stored, fh, indent=1, sort_keys=True)
        fh.write("\n")


def emit_results(result: ExperimentResult, out_dir) -> dict:
    """Write trace CSV, summary JSON, plot series and bookkeeping files.

    Returns the paths written, keyed by kind.
    """
    check_output_dir(out_dir)
    rows = _rows(result)
    # round-trip through the CSV text so the summary sees exactly what is on disk
    rows = [[r[0], r[1], r[2], float(repr(r[3]))] + [float(repr(v)) for v in r[4:]] for r in rows]
    _write_outputs(out_dir, result.config, rows, _cells_record(result),
                   result.maximizer, result.max_value)
    return {k: os.path.join(out_dir, f) for k, f in
            [("trace", TRACE_FILE), ("summary", SUMMARY_FILE), ("plot", PLOT_FILE),
             ("cells", CELLS_FILE), ("config", CONFIG_FILE)]}


def reemit_results(in_dir, out_dir=None) -> dict:
    """Recompute summary and plot files from a stored result directory."""
    out_dir = out_dir or in_dir
    check_output_dir(out_dir)
    config = ExperimentConfig.load(os.path.join(in_dir, CONFIG_FILE))
    with open(os.path.join(in_dir, CELLS_FILE)) as fh:
        book = json.load(fh)
    rows = _read_rows(os.path.join(in_dir, TRACE_FILE), config.oracle_spec.dim)
    maximizer = None if book.get("maximizer") is None else np.asarray(book["maximizer"])
    max_value = book.get("max_value")
    _write_outputs(out_dir, config, rows, book["cells"], maximizer,
                   math.nan if max_value is None else max_value)
    return {"summary": os.path.join(out_dir, SUMMARY_FILE),
            "plot": os.path.join(out_dir, PLOT_FILE)}
