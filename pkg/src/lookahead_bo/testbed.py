"""Synthetic time-dependent oracles and an adapter for external simulators.

Oracles are evaluated in native coordinates; :class:`OracleSpec` carries
the affine map to and from the unit cube the optimizer works in. All
functions are posed for maximization.
"""

from __future__ import annotations

import math
import os
import select
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sp_optimize
from scipy.stats import qmc

__all__ = [
    "ORACLE_NAMES",
    "OracleError",
    "OracleSpec",
    "GroundTruth",
    "oracle_spec",
    "true_value",
    "evaluate_oracle",
    "true_maximizer",
    "ExternalProcessOracle",
    "external_oracle",
    "make_oracle",
]

DEFAULT_NOISE = 1e-3

GRIEWANK_CENTER = np.array([3.0, 0.0])
GRIEWANK_SCALE = 160.0

H3_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
H3_A = np.array([[3.0, 10, 30], [0.1, 10, 35], [3.0, 10, 30], [0.1, 10, 35]])
H3_P = np.array([
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
])
H6_ALPHA = H3_ALPHA
H6_A = np.array([
    [10, 3, 17, 3.5, 1.7, 8],
    [0.05, 10, 17, 0.1, 8, 14],
    [3, 3.5, 1.7, 10, 17, 8],
    [17, 8, 0.05, 10, 0.1, 14],
])
H6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])

_KINDS = {
    "quadratic-a": 1,
    "quadratic-b": 1,
    "quadratic-c": 1,
    "quadratic-d": 1,
    "griewank": 2,
    "hartmann3": 3,
    "hartmann6": 6,
    "external": None,
}
ORACLE_NAMES = tuple(_KINDS)
_ALIASES = {
    "quadratica": "quadratic-a", "quadraticb": "quadratic-b",
    "quadraticc": "quadratic-c", "quadraticd": "quadratic-d",
    "modified-griewank": "griewank", "modifiedgriewank": "griewank",
    "hartmann-3d": "hartmann3", "hartmann3time": "hartmann3", "hartmann-3": "hartmann3",
    "hartmann-6d": "hartmann6", "hartmann6time": "hartmann6", "hartmann-6": "hartmann6",
    "externalprocess": "external",
}


class OracleError(RuntimeError):
    """The oracle could not produce a finite observation."""


@dataclass(frozen=True)
class OracleSpec:
    """A named oracle, its observation noise and its native box.

    For ``kind="external"``, ``command`` is the shell-style command line of
    the simulator and ``dim`` its input dimension.
    """

    kind: str
    noise_variance: float = DEFAULT_NOISE
    lower: tuple | None = None
    upper: tuple | None = None
    command: str | None = None
    dim: int | None = None
    timeout: float = 30.0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        if kind not in _KINDS:
            raise ValueError(f"unknown oracle {self.kind!r}; choose from {ORACLE_NAMES}")
        object.__setattr__(self, "kind", kind)
        if not (self.noise_variance >= 0 and math.isfinite(self.noise_variance)):
            raise ValueError("noise_variance must be a finite non-negative number")
        dim = _KINDS[kind]
        if kind == "external":
            if not self.command:
                raise ValueError("external oracle needs a command")
            if self.dim is None or self.dim < 1:
                raise ValueError("external oracle needs dim >= 1")
            dim = self.dim
        elif self.dim is not None and self.dim != dim:
            raise ValueError(f"{kind} has dimension {dim}, got {self.dim}")
        object.__setattr__(self, "dim", dim)
        lo, hi = (-5.0, 5.0) if kind == "griewank" else (0.0, 1.0)
        lower = np.broadcast_to(lo if self.lower is None else np.asarray(self.lower, float), (dim,))
        upper = np.broadcast_to(hi if self.upper is None else np.asarray(self.upper, float), (dim,))
        if np.any(lower >= upper):
            raise ValueError("native bounds must satisfy lower < upper")
        object.__setattr__(self, "lower", tuple(float(v) for v in lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in upper))

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    def to_native(self, u) -> np.ndarray:
        return np.asarray(self.lower) + np.asarray(u, dtype=float) * self.span

    def to_unit(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.lower)) / self.span

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_variance": self.noise_variance,
                "lower": list(self.lower), "upper": list(self.upper),
                "command": self.command, "dim": self.dim, "timeout": self.timeout}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSpec":
        d = dict(d)
        for key in ("lower", "upper"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def oracle_spec(name: str, noise_variance: float = DEFAULT_NOISE, **kwargs) -> OracleSpec:
    return OracleSpec(name, noise_variance, **kwargs)


@dataclass(frozen=True)
class GroundTruth:
    maximizer: np.ndarray = field(compare=False)
    value: float
    method: str


# ---------------------------------------------------------------------------
# noise-free forms (native coordinates, rows of X)
# ---------------------------------------------------------------------------


def _quadratic(kind: str, x: np.ndarray, t: float) -> np.ndarray:
    base = -4.0 * (x - 0.5) ** 2
    if kind == "quadratic-a":
        u = np.pi * (x + t)
        return base + np.sin(u) + np.cos(u)
    if kind == "quadratic-b":
        u = np.pi * x * t
        return base + np.sin(u) + np.cos(u)
    if kind == "quadratic-c":
        u = np.pi * x * max(0.0, t - 3.0)
        return base + np.sin(u) + np.cos(u)
    s = math.sin(t)
    return base + 2.0 * x * s - s * s


def griewank_reference(X: np.ndarray) -> np.ndarray:
    """Standard Griewank: ``1 + |x|^2 / 4000 - prod cos(x_i / sqrt(i))``.

    Its maxima on [-5, 5]^2 sit where the cosine product is -1, e.g. at
    ``(+-pi, 0)`` and ``(0, +-pi sqrt(2))``; the Gaussian weight in the
    oracle singles out one of them.
    """
    X = np.atleast_2d(X)
    i = np.arange(1, X.shape[1] + 1)
    return 1.0 + np.sum(X * X, axis=1) / 4000.0 - np.prod(np.cos(X / np.sqrt(i)), axis=1)


def rotation(t: float) -> np.ndarray:
    z = math.pi * t / 4.0
    c, s = math.cos(z), math.sin(z)
    return np.array([[c, -s], [s, c]])


def _griewank(X: np.ndarray, t: float) -> np.ndarray:
    rotated = X @ rotation(t).T
    weight = np.exp(-np.sum((X - GRIEWANK_CENTER) ** 2, axis=1) / GRIEWANK_SCALE)
    return griewank_reference(rotated) * weight


def hartmann(X: np.ndarray, alpha, A, P) -> np.ndarray:
    """Hartmann function with the sign flipped so that its optimum is a positive maximum."""
    X = np.atleast_2d(X)
    inner = np.sum(A[None, :, :] * (X[:, None, :] - P[None, :, :]) ** 2, axis=2)
    return np.exp(-inner) @ alpha


def _time_shift(X: np.ndarray, t: float) -> np.ndarray:
    s = math.sin(t)
    return np.sum(2.0 * s * X - s * s, axis=1)


def _noise_free(spec: OracleSpec, X: np.ndarray, t: float) -> np.ndarray:
    kind = spec.kind
    if kind.startswith("quadratic"):
        return _quadratic(kind, X[:, 0], t)
    if kind == "griewank":
        return _griewank(X, t)
    if kind == "hartmann3":
        return hartmann(X, H3_ALPHA, H3_A, H3_P) + _time_shift(X, t)
    if kind == "hartmann6":
        return hartmann(X, H6_ALPHA, H6_A, H6_P) + _time_shift(X, t)
    raise OracleError("external oracles have no closed-form noise-free value")


def _as_rows(spec: OracleSpec, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim <= 1
    X = X.reshape(1, -1) if single else X
    if spec.dim == 1 and X.shape[1] != 1 and single:
        X = X.reshape(-1, 1)
        single = X.shape[0] == 1
    if X.shape[1] != spec.dim:
        raise ValueError(f"{spec.kind} expects {spec.dim}-dimensional inputs")
    if not np.all(np.isfinite(X)):
        raise ValueError("oracle inputs must be finite")
    tol = 1e-12 * spec.span
    if np.any(X < np.asarray(spec.lower) - tol) or np.any(X > np.asarray(spec.upper) + tol):
        raise ValueError(f"input outside the {spec.kind} domain {spec.lower}..{spec.upper}")
    return X, single


def true_value(spec: OracleSpec, x, t: float):
    """Noise-free oracle value at native ``x`` (a point or rows of points)."""
    if not math.isfinite(t):
        raise ValueError("time must be finite")
    X, single = _as_rows(spec, x)
    v = _noise_free(spec, X, float(t))
    return float(v[0]) if single else v


def evaluate_oracle(spec: OracleSpec, x, t: float, rng: np.random.Generator):
    """Noisy observation ``f(x, t) + eps`` with ``eps ~ N(0, noise_variance)``."""
    if spec.kind == "external":
        return external_oracle(spec, x, t)
    f = true_value(spec, x, t)
    if spec.noise_variance == 0:
        return f
    eps = rng.normal(0.0, math.sqrt(spec.noise_variance), size=np.shape(f))
    return f + (float(eps) if np.ndim(f) == 0 else eps)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def true_maximizer(spec: OracleSpec, t: float, resolution: int = 1001,
                   n_starts: int = 64, seed: int = 0) -> GroundTruth:
    """Maximizer of the noise-free oracle at time ``t``.

    Up to two dimensions a tensor grid with ``resolution`` points per axis
    is scanned and the best cell polished with bounded quasi-Newton steps;
    above that a Sobol prepass feeds a multistart local search.
    """
    if spec.kind == "external":
        raise OracleError("external oracles have no ground truth")
    d = spec.dim
    lo, hi = np.asarray(spec.lower), np.asarray(spec.upper)
    if d <= 2:
        if resolution < 1000:
            raise ValueError("grid resolution must be at least 1000 points per dimension")
        axes = [np.linspace(lo[i], hi[i], resolution) for i in range(d)]
        G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = _noise_free(spec, G, t)
        k = int(np.argmax(vals))
        starts = G[k:k + 1]
        method = "grid+polish"
        best_x, best_v = G[k].copy(), float(vals[k])
    else:
        C = qmc.Sobol(d, scramble=True, seed=seed).random(4096)
        C = lo + C * (hi - lo)
        vals = _noise_free(spec, C, t)
        starts = C[np.argsort(-vals)[:n_starts]]
        method = "multistart"
        k = int(np.argmax(vals))
        best_x, best_v = C[k].copy(), float(vals[k])
    for x0 in starts:
        res = sp_optimize.minimize(lambda z: -_noise_free(spec, z[None, :], t)[0], x0,
                                   method="L-BFGS-B", bounds=list(zip(lo, hi)),
                                   options={"ftol": 1e-15, "gtol": 1e-10})
        v = -float(res.fun)
        if v > best_v:
            best_x, best_v = np.clip(res.x, lo, hi), v
    return GroundTruth(best_x, best_v, method)


# ---------------------------------------------------------------------------
# external process
# ---------------------------------------------------------------------------


class ExternalProcessOracle:
    """Line-protocol client for a long-running simulator process.

    Each request is one line ``"t x_1 ... x_d"``; the process must answer
    with one line holding a single finite float. Timeouts, malformed or
    non-finite replies, and process exit all raise :class:`OracleError`.
    """

    def __init__(self, command, timeout: float = 30.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      stderr=subprocess.PIPE, text=True, bufsize=1)

    def __call__(self, x, t: float) -> float:
        proc = self._proc
        if proc.poll() is not None:
            raise OracleError(f"oracle process exited with status {proc.returncode}")
        line = " ".join(repr(float(v)) for v in np.concatenate([[t], np.ravel(x)]))
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise OracleError(f"oracle process closed its input: {exc}") from exc
        ready, _, _ = select.select([proc.stdout], [], [], self.timeout)
        if not ready:
            self.close()
            raise OracleError(f"oracle process did not answer within {self.timeout} s")
        reply = proc.stdout.readline()
        if not reply:
            status = proc.wait(timeout=self.timeout)
            raise OracleError(f"oracle process exited with status {status} before replying")
        try:
            value = float(reply.strip())
        except ValueError:
            raise OracleError(f"malformed oracle reply {reply.strip()!r}") from None
        if not math.isfinite(value):
            raise OracleError(f"non-finite oracle reply {reply.strip()!r}")
        return value

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=1.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        for stream in (proc.stdout, proc.stderr):
            if stream and not stream.closed:
                stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_EXTERNAL: dict = {}


def external_oracle(spec: OracleSpec, x, t: float) -> float:
    """Query the simulator process configured in ``spec`` (one process per spec, reused)."""
    key = (spec.command, os.getpid())
    client = _EXTERNAL.get(key)
    if client is None or client._proc.poll() is not None:
        client = ExternalProcessOracle(spec.command, spec.timeout)
        _EXTERNAL[key] = client
    return client(x, t)


def make_oracle(spec: OracleSpec, rng: np.random.Generator):
    """Noisy oracle on unit-cube inputs: ``f(u, t) -> float``."""

    def oracle(u, t):
        return float(evaluate_oracle(spec, spec.to_native(u), t, rng))

    return oracle
