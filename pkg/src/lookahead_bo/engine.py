"""Sequential decision loops over a fixed observation schedule.

Both the myopic loop and the recursive two-step loop are driven by a
:class:`Session`, which exposes the same decisions through an ask/tell
interface. ``run_myopic`` and ``run_recursive_two_step`` are thin
ask -> oracle -> tell loops, so replaying recorded observations through a
session reproduces a run exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionSpec, myopic_context, myopic_values
from .gp import Dataset, FittedGP, Hyperparameters, fit_hyperparameters
from .optimize import (
    OptimizerConfig,
    inner_value_maximize,
    mc_lookahead_maximize,
    multistart_maximize,
    one_shot_maximize,
)
from .values import ValueFunctionSpec, max_posterior_mean, resolve_target

__all__ = [
    "SCHEMA_VERSION",
    "ProtocolError",
    "Schedule",
    "BOConfig",
    "StepRecord",
    "RunTrace",
    "Session",
    "run_myopic",
    "run_recursive_two_step",
    "run_strategy",
]

SCHEMA_VERSION = 1
DEFAULT_HYPERPARAMETERS = Hyperparameters(theta_x=0.2, theta_t=1.0, noise_variance=1e-3)


class ProtocolError(RuntimeError):
    """ask/tell called out of order."""


@dataclass(frozen=True)
class Schedule:
    """Strictly increasing decision times; the last one is the horizon."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if not times:
            raise ValueError("schedule needs at least one time")
        if not all(math.isfinite(t) for t in times):
            raise ValueError("schedule times must be finite")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, t_start: float, horizon: float, count: int) -> "Schedule":
        """``count`` evenly spaced times in ``(t_start, horizon]``."""
        if count < 1 or not horizon > t_start:
            raise ValueError("need count >= 1 and horizon > t_start")
        return cls(tuple(np.linspace(t_start, horizon, count + 1)[1:]))

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class BOConfig:
    """Everything that determines a run besides the data and the oracle.

    ``one_shot`` selects joint optimization of the outer point and fantasy
    maximizers; otherwise the outer point is ascended with nested inner
    maximization and envelope gradients. ``center`` uses the sample mean of
    the observations as the constant prior mean; by default the prior mean
    is zero.
    """

    acquisition: AcquisitionSpec
    optimizer: OptimizerConfig = OptimizerConfig()
    refit_each_step: bool = True
    seed: int = 0
    fit_bounds: dict | None = None
    fit_starts: int = 8
    one_shot: bool = True
    initial_hyperparameters: Hyperparameters = DEFAULT_HYPERPARAMETERS
    center: bool = False

    @property
    def value_function(self) -> ValueFunctionSpec | None:
        return self.acquisition.value_function

    def to_dict(self) -> dict:
        return {
            "acquisition": self.acquisition.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "refit_each_step": self.refit_each_step,
            "seed": self.seed,
            "fit_bounds": {k: list(v) for k, v in self.fit_bounds.items()} if self.fit_bounds else None,
            "fit_starts": self.fit_starts,
            "one_shot": self.one_shot,
            "initial_hyperparameters": self.initial_hyperparameters.to_dict(),
            "center": self.center,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BOConfig":
        fb = d.get("fit_bounds")
        return cls(
            AcquisitionSpec.from_dict(d["acquisition"]),
            OptimizerConfig.from_dict(d.get("optimizer", {})),
            bool(d.get("refit_each_step", True)),
            int(d.get("seed", 0)),
            {k: tuple(v) for k, v in fb.items()} if fb else None,
            int(d.get("fit_starts", 8)),
            bool(d.get("one_shot", True)),
            Hyperparameters.from_dict(d["initial_hyperparameters"])
            if d.get("initial_hyperparameters") else DEFAULT_HYPERPARAMETERS,
            bool(d.get("center", False)),
        )


@dataclass
class StepRecord:
    index: int
    t: float
    x: np.ndarray
    y: float
    acq_value: float
    hyperparameters: dict
    rule: str
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return {"index": self.index, "t": self.t, "x": [float(v) for v in self.x], "y": self.y,
                "acq_value": self.acq_value, "hyperparameters": self.hyperparameters,
                "rule": self.rule, "wall_ms": self.wall_ms}

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(int(d["index"]), float(d["t"]), np.asarray(d["x"], dtype=float), float(d["y"]),
                   float(d["acq_value"]), dict(d["hyperparameters"]), d["rule"],
                   float(d.get("wall_ms", 0.0)))

    def decision_key(self) -> tuple:
        return (self.index, self.t, tuple(self.x.tolist()), self.y, self.acq_value,
                tuple(sorted(self.hyperparameters.items())), self.rule)


@dataclass
class RunTrace:
    """Per-decision records of one run, plus a failure marker if it stopped early."""

    records: list = field(default_factory=list)
    schedule: Schedule | None = None
    failure: str | None = None

    @property
    def complete(self) -> bool:
        return self.failure is None and self.schedule is not None \
            and len(self.records) == len(self.schedule)

    @property
    def final(self) -> tuple[np.ndarray, float] | None:
        """``(x_T, y_T)`` of a complete run."""
        if not self.complete:
            return None
        r = self.records[-1]
        return r.x.copy(), r.y

    def same_decisions(self, other: "RunTrace") -> bool:
        """Equality of everything except wall-clock times."""
        return (self.failure == other.failure
                and len(self.records) == len(other.records)
                and all(a.decision_key() == b.decision_key()
                        for a, b in zip(self.records, other.records)))

    def to_dict(self) -> dict:
        return {"records": [r.to_dict() for r in self.records],
                "schedule": list(self.schedule.times) if self.schedule else None,
                "failure": self.failure}

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        sched = Schedule(tuple(d["schedule"])) if d.get("schedule") else None
        return cls([StepRecord.from_dict(r) for r in d["records"]], sched, d.get("failure"))


class Session:
    """Ask/tell state machine for one run.

    Parameters
    ----------
    data : Dataset
        Starting observations; their times must precede the schedule.
    schedule : Schedule
    config : BOConfig
    hyperparameters : Hyperparameters, optional
        Initial estimate; fitted from ``data`` when omitted and refitting is on.
    """

    def __init__(self, data: Dataset, schedule: Schedule, config: BOConfig,
                 hyperparameters: Hyperparameters | None = None, _restore: dict | None = None):
        if data.n and schedule.times[0] <= data.last_time:
            raise ValueError("schedule must start after the last observed time")
        self.config = config
        self.schedule = schedule
        self.data = data
        self.position = 0
        self.pending = None
        self.trace = RunTrace([], schedule)
        self.rng = np.random.default_rng(config.seed)
        if _restore is not None:
            self.hyperparameters = Hyperparameters.from_dict(_restore["hyperparameters"])
            return
        if hyperparameters is not None:
            self.hyperparameters = hyperparameters
        elif config.refit_each_step and data.n >= 2:
            self.hyperparameters = self._fit(config.initial_hyperparameters)
        else:
            self.hyperparameters = config.initial_hyperparameters

    # -- protocol ------------------------------------------------------------

    @property
    def finished(self) -> bool:
        return self.position >= len(self.schedule)

    @property
    def lookahead(self) -> bool:
        return self.config.acquisition.is_lookahead

    def ask(self) -> tuple[np.ndarray, float]:
        """Next decision ``(x, t)`` in unit-cube coordinates."""
        if self.pending is not None:
            raise ProtocolError("ask called twice without tell")
        if self.finished:
            raise ProtocolError("schedule exhausted")
        start = time.perf_counter()
        t = self.schedule.times[self.position]
        x, value, rule = self._decide(t)
        wall = (time.perf_counter() - start) * 1e3
        self.pending = (np.asarray(x, dtype=float), t, float(value), rule, wall)
        return self.pending[0].copy(), t

    def tell(self, y: float) -> None:
        """Record the observation for the pending decision and refit."""
        if self.pending is None:
            raise ProtocolError("tell called before ask")
        y = float(y)
        if not math.isfinite(y):
            raise ValueError("observation must be finite")
        x, t, value, rule, wall = self.pending
        self.pending = None
        self.data = self.data.append(x, t, y)
        self.trace.records.append(StepRecord(
            self.data.n, t, x, y, value, self.hyperparameters.to_dict(), rule, wall))
        self.position += 1
        if self.config.refit_each_step and not self.finished and self.data.n >= 2:
            self.hyperparameters = self._fit(self.hyperparameters)

    # -- decisions -----------------------------------------------------------

    def _fit(self, init: Hyperparameters) -> Hyperparameters:
        return fit_hyperparameters(self.data, self.config.fit_bounds, self.config.fit_starts,
                                   self.rng, init=init, center=self.config.center)

    def _decide(self, t: float):
        cfg = self.config
        spec = cfg.acquisition
        gp = FittedGP(self.data, self.hyperparameters, None if cfg.center else 0.0)
        d = self.data.dim
        T = self.schedule.horizon
        opt = cfg.optimizer
        if spec.kind == "random":
            return opt.sample_starts(self.rng, 1, d)[0], 0.0, "random"
        if not spec.is_lookahead:
            if self.data.n == 0:
                # every myopic field is constant under the prior: take the first start
                x = opt.sample_starts(self.rng, opt.n_starts, d)[0]
                return x, math.nan, "prior"
            ctx = myopic_context(gp, t, spec, self.data, self.rng)
            x, v = multistart_maximize(lambda X: myopic_values(gp, X, t, spec, ctx),
                                       d, opt, self.rng)
            return x, v, "myopic"
        vspec = spec.value_function
        if t >= T:
            ctx = resolve_target(vspec, gp, self.data, T, self.rng)
            x, v = inner_value_maximize(gp, T, vspec, opt, self.rng, ctx)
            return x, v, "final"
        ctx = resolve_target(vspec, gp, self.data, T, self.rng)
        if cfg.one_shot:
            x, _, v = one_shot_maximize(gp, t, T, vspec, spec, opt, self.rng, ctx)
        else:
            x, v = mc_lookahead_maximize(gp, t, T, vspec, spec, opt, self.rng, ctx)
        if spec.kind == "kg":
            v -= max_posterior_mean(gp, T)[1]
        return x, v, "lookahead"

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        pending = None
        if self.pending is not None:
            x, t, value, rule, wall = self.pending
            pending = {"x": [float(v) for v in x], "t": t, "acq_value": value,
                       "rule": rule, "wall_ms": wall}
        return {
            "schema_version": SCHEMA_VERSION,
            "format": "lookahead-bo-session",
            "config": self.config.to_dict(),
            "data": self.data.to_dict(),
            "schedule": list(self.schedule.times),
            "position": self.position,
            "hyperparameters": self.hyperparameters.to_dict(),
            "pending": pending,
            "trace": self.trace.to_dict(),
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported session schema {d.get('schema_version')!r}")
        config = BOConfig.from_dict(d["config"])
        data = Dataset.from_dict(d["data"])
        schedule = Schedule(tuple(d["schedule"]))
        s = cls.__new__(cls)
        s.config = config
        s.schedule = schedule
        s.data = data
        s.position = int(d["position"])
        s.hyperparameters = Hyperparameters.from_dict(d["hyperparameters"])
        p = d.get("pending")
        s.pending = None if p is None else (
            np.asarray(p["x"], dtype=float), float(p["t"]), float(p["acq_value"]),
            p["rule"], float(p["wall_ms"]))
        s.trace = RunTrace.from_dict(d["trace"])
        s.rng = np.random.default_rng()
        s.rng.bit_generator.state = d["rng_state"]
        return s

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Session":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _drive(oracle, session: Session) -> RunTrace:
    while not session.finished:
        x, t = session.ask()
        try:
            y = float(oracle(x, t))
            if not math.isfinite(y):
                raise ValueError(f"non-finite observation {y!r}")
        except Exception as exc:  # noqa: BLE001 - any oracle failure ends the run
            session.trace.failure = f"step {session.position}: {type(exc).__name__}: {exc}"
            session.pending = None
            break
        session.tell(y)
    return session.trace


def run_myopic(oracle, data0: Dataset, schedule: Schedule, config: BOConfig) -> RunTrace:
    """Maximize a myopic acquisition at every scheduled time.

    ``oracle(x, t)`` receives unit-cube points. An oracle exception stops
    the run and is recorded in ``trace.failure``.
    """
    if config.acquisition.is_lookahead:
        raise ValueError("run_myopic needs a myopic acquisition")
    return _drive(oracle, Session(data0, schedule, config))


def run_recursive_two_step(oracle, data0: Dataset, schedule: Schedule,
                           config: BOConfig) -> RunTrace:
    """Two-step lookahead decisions until the horizon, then value maximization at it."""
    if not config.acquisition.is_lookahead:
        raise ValueError("run_recursive_two_step needs a lookahead acquisition")
    return _drive(oracle, Session(data0, schedule, config))


def run_strategy(oracle, data0: Dataset, schedule: Schedule, config: BOConfig) -> RunTrace:
    if config.acquisition.is_lookahead:
        return run_recursive_two_step(oracle, data0, schedule, config)
    return run_myopic(oracle, data0, schedule, config)
