"""Exact Gaussian-process regression over joint (action, time) inputs.

The covariance is a product of squared-exponential kernels,

    k((x, t), (x', t')) = s * exp(-|x - x'|^2 / (2 theta_x^2)) * exp(-(t - t')^2 / (2 theta_t^2)),

with a zero-mean prior on the centered observations. Everything in this
module is immutable once built: conditioning returns a new ``FittedGP``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, optimize

__all__ = [
    "Hyperparameters",
    "Dataset",
    "PosteriorMoments",
    "FittedGP",
    "FactorizationError",
    "FitWarning",
    "DEFAULT_BOUNDS",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit_hyperparameters",
    "posterior",
    "condition",
    "posterior_input_gradient",
    "sample_posterior",
]

JITTER_START = 1e-10
JITTER_MAX = 1e-4

PARAM_NAMES = ("theta_x", "theta_t", "noise_variance", "output_scale")

DEFAULT_BOUNDS = {
    "theta_x": (1e-2, 10.0),
    "theta_t": (1e-2, 10.0),
    "noise_variance": (1e-8, 1.0),
    "output_scale": (1e-2, 1e2),
}


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after the maximum jitter."""


class FitWarning(UserWarning):
    """No hyperparameter start improved on its initial likelihood."""


@dataclass(frozen=True)
class Hyperparameters:
    theta_x: float
    theta_t: float
    noise_variance: float
    output_scale: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.theta_x <= 0 or self.theta_t <= 0:
            raise ValueError("length-scales must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(**{name: d[name] for name in PARAM_NAMES if name in d})


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``((x_i, t_i), y_i)`` ordered by strictly increasing time.

    Arrays are stored read-only; ``append`` returns a new dataset.
    """

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(-1)
        y = np.array(self.y, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size == t.size and t.size != 1 else X.reshape(1, -1)
        if X.shape[0] != t.size or t.size != y.size:
            if t.size == 0 and y.size == 0:
                X = X.reshape(0, X.shape[-1] if X.ndim == 2 else 0)
            else:
                raise ValueError(
                    f"inconsistent sizes: X {X.shape}, t {t.shape}, y {y.shape}"
                )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("observation times must be strictly increasing")
        for a in (X, t, y):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_records(cls, records: Sequence, dim: int | None = None) -> "Dataset":
        records = list(records)
        if not records:
            if dim is None:
                raise ValueError("dim is required for an empty record list")
            return cls.empty(dim)
        X = np.array([np.atleast_1d(np.asarray(r[0], dtype=float)) for r in records])
        return cls(X, [r[1] for r in records], [r[2] for r in records])

    def __len__(self) -> int:
        return self.t.size

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def last_time(self) -> float:
        return float(self.t[-1]) if self.n else -math.inf

    def append(self, x, t: float, y: float) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(
            np.vstack([self.X, x]), np.append(self.t, float(t)), np.append(self.y, float(y))
        )

    def records(self):
        return [(self.X[i].copy(), float(self.t[i]), float(self.y[i])) for i in range(self.n)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.y, other.y)
        )

    def to_dict(self) -> dict:
        return {"dim": self.dim, "X": self.X.tolist(), "t": self.t.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d: dict, dim: int | None = None) -> "Dataset":
        dim = d.get("dim", dim)
        if not d["t"]:
            return cls.empty(dim if dim is not None else 0)
        return cls(d["X"], d["t"], d["y"])


class PosteriorMoments(NamedTuple):
    mean: float
    variance: float


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.maximum(d2, 0.0)


def kernel_matrix(X1, t1, X2, t2, hyp: Hyperparameters) -> np.ndarray:
    """Prior covariance between two sets of (x, t) points."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (X1.shape[0],))
    t2 = np.broadcast_to(np.asarray(t2, dtype=float), (X2.shape[0],))
    dx2 = _sqdist(X1, X2)
    dt2 = (t1[:, None] - t2[None, :]) ** 2
    return hyp.output_scale * np.exp(
        -0.5 * dx2 / hyp.theta_x**2 - 0.5 * dt2 / hyp.theta_t**2
    )


def kernel_eval(a, b, hyp: Hyperparameters) -> float:
    """Covariance between two single points ``a = (x, t)`` and ``b = (x', t')``."""
    xa, ta = np.atleast_1d(np.asarray(a[0], dtype=float)), float(a[1])
    xb, tb = np.atleast_1d(np.asarray(b[0], dtype=float)), float(b[1])
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))
            and math.isfinite(ta) and math.isfinite(tb)):
        raise ValueError("kernel inputs must be finite")
    if xa.shape != xb.shape:
        raise ValueError(f"dimension mismatch: {xa.shape} vs {xb.shape}")
    r2 = float(np.sum((xa - xb) ** 2))
    return hyp.output_scale * math.exp(
        -0.5 * r2 / hyp.theta_x**2 - 0.5 * (ta - tb) ** 2 / hyp.theta_t**2
    )


def _cholesky(A: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A``, adding diagonal jitter on failure."""
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), 0.0
    try:
        return linalg.cholesky(A, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    eye = np.eye(n)
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            return linalg.cholesky(A + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            jitter *= 2.0
    with np.errstate(all="ignore"):
        eig = np.linalg.eigvalsh(A)
    cond = eig[-1] / eig[0] if eig[0] > 0 else math.inf
    raise FactorizationError(
        f"Cholesky failed with jitter up to {JITTER_MAX * scale:.3g}: "
        f"n={n}, min eigenvalue {eig[0]:.3g}, max eigenvalue {eig[-1]:.3g}, "
        f"condition number {cond:.3g}"
    )


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------


class FittedGP:
    """GP posterior conditioned on a dataset.

    Parameters
    ----------
    data : Dataset
        Conditioning observations.
    hyperparameters : Hyperparameters
        Kernel and noise parameters.
    mean_offset : float, optional
        Constant prior mean. Defaults to the sample mean of ``data.y``
        (zero for an empty dataset). Fantasy conditioning keeps the parent's
        offset so that a fantasy equal to the predicted mean is neutral.
    """

    __slots__ = ("_data", "_hyp", "_offset", "_L", "_alpha", "_jitter", "_cache")

    def __init__(self, data: Dataset, hyperparameters: Hyperparameters,
                 mean_offset: float | None = None):
        self._data = data
        self._hyp = hyperparameters
        if mean_offset is None:
            mean_offset = float(np.mean(data.y)) if data.n else 0.0
        self._offset = float(mean_offset)
        A = kernel_matrix(data.X, data.t, data.X, data.t, hyperparameters)
        A[np.diag_indices_from(A)] += hyperparameters.noise_variance
        L, jitter = _cholesky(A, hyperparameters.output_scale)
        self._set_factor(L, jitter)

    def _set_factor(self, L: np.ndarray, jitter: float) -> None:
        self._L = L
        self._L.setflags(write=False)
        self._jitter = jitter
        resid = self._data.y - self._offset
        if self._data.n:
            alpha = linalg.cho_solve((L, True), resid, check_finite=False)
        else:
            alpha = np.zeros(0)
        alpha.setflags(write=False)
        self._alpha = alpha
        self._cache = {}

    @classmethod
    def _from_parts(cls, data, hyp, offset, L, jitter) -> "FittedGP":
        gp = cls.__new__(cls)
        gp._data = data
        gp._hyp = hyp
        gp._offset = offset
        gp._set_factor(L, jitter)
        return gp

    # read-only views -------------------------------------------------------

    @property
    def data(self) -> Dataset:
        return self._data

    @property
    def hyperparameters(self) -> Hyperparameters:
        return self._hyp

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular ``L`` with ``L L^T = K_n + noise * I`` (+ jitter)."""
        return self._L

    @property
    def solved_targets(self) -> np.ndarray:
        """``(K_n + noise * I)^{-1} (y_n - mean_offset)``."""
        return self._alpha

    @property
    def mean_offset(self) -> float:
        return self._offset

    @property
    def jitter(self) -> float:
        return self._jitter

    @property
    def dim(self) -> int:
        return self._data.dim

    @property
    def n(self) -> int:
        return self._data.n

    # prediction ------------------------------------------------------------

    def cross_kernel(self, X, t) -> np.ndarray:
        """Prior covariance ``k(Z, (X, t))`` between training inputs and queries, shape (n, m)."""
        return kernel_matrix(self._data.X, self._data.t, X, t, self._hyp)

    def solve_lower(self, B: np.ndarray) -> np.ndarray:
        """``L^{-1} B``."""
        if self.n == 0:
            return np.zeros((0,) + B.shape[1:])
        return linalg.solve_triangular(self._L, B, lower=True, check_finite=False)

    def solve(self, B: np.ndarray) -> np.ndarray:
        """``(K_n + noise * I)^{-1} B``."""
        if self.n == 0:
            return np.zeros((0,) + B.shape[1:])
        return linalg.cho_solve((self._L, True), B, check_finite=False)

    def predict(self, X, t) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of ``X`` (time ``t`` scalar or per row)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s0 = self._hyp.output_scale
        if self.n == 0:
            m = X.shape[0]
            return np.full(m, self._offset), np.full(m, s0)
        k = self.cross_kernel(X, t)
        mean = self._offset + k.T @ self._alpha
        v = self.solve_lower(k)
        var = np.clip(s0 - np.sum(v * v, axis=0), 0.0, s0)
        return mean, var

    def predict_with_grad(self, X, t):
        """Posterior mean, variance and their gradients in ``x`` at fixed time.

        Returns
        -------
        mean, var : (m,) arrays
        dmean, dvar : (m, d) arrays
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m, d = X.shape
        s0 = self._hyp.output_scale
        if self.n == 0:
            return (np.full(m, self._offset), np.full(m, s0),
                    np.zeros((m, d)), np.zeros((m, d)))
        k = self.cross_kernel(X, t)  # (n, m)
        mean = self._offset + k.T @ self._alpha
        w = self.solve(k)  # (n, m)
        var_raw = s0 - np.sum(k * w, axis=0)
        var = np.clip(var_raw, 0.0, s0)
        # dk(z_i, x)/dx = k(z_i, x) (z_i - x) / theta_x^2
        diff = self._data.X[:, None, :] - X[None, :, :]  # (n, m, d)
        dk = k[:, :, None] * diff / self._hyp.theta_x**2
        dmean = np.einsum("n,nmd->md", self._alpha, dk)
        dvar = -2.0 * np.einsum("nm,nmd->md", w, dk)
        dvar[var_raw <= 0.0] = 0.0
        return mean, var, dmean, dvar

    def posterior(self, query) -> PosteriorMoments:
        x, t = query
        mean, var = self.predict(np.atleast_1d(np.asarray(x, dtype=float))[None, :], t)
        return PosteriorMoments(float(mean[0]), float(var[0]))

    def condition(self, point, y: float) -> "FittedGP":
        """Posterior after appending one observation, via a bordered Cholesky update."""
        x, t = point
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.n and float(t) <= self._data.last_time:
            raise ValueError(
                f"conditioning time {t} must follow the last observed time {self._data.last_time}"
            )
        data = self._data.append(x, t, y)
        hyp = self._hyp
        kqq = hyp.output_scale + hyp.noise_variance + self._jitter
        if self.n == 0:
            return FittedGP(data, hyp, self._offset)
        k = self.cross_kernel(x[None, :], t)[:, 0]
        ell = self.solve_lower(k)
        pivot = kqq - float(ell @ ell)
        if pivot <= 1e-12 * kqq:
            return FittedGP(data, hyp, self._offset)
        n = self.n
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self._L
        L[n, :n] = ell
        L[n, n] = math.sqrt(pivot)
        return FittedGP._from_parts(data, hyp, self._offset, L, self._jitter)

    def cache(self) -> dict:
        """Per-instance memo for derived quantities (e.g. max posterior mean)."""
        return self._cache

    def __repr__(self) -> str:
        return f"FittedGP(n={self.n}, d={self.dim}, {self._hyp})"


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


def posterior(gp: FittedGP, query) -> PosteriorMoments:
    """Posterior mean and variance at ``query = (x, t)``."""
    return gp.posterior(query)


def condition(gp: FittedGP, point, fantasized_y: float) -> FittedGP:
    return gp.condition(point, fantasized_y)


def posterior_input_gradient(gp: FittedGP, query) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the posterior mean and standard deviation in ``x`` at fixed ``t``.

    The standard-deviation gradient is the zero vector where the posterior
    variance vanishes.
    """
    x, t = query
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, var, dmean, dvar = gp.predict_with_grad(x[None, :], t)
    sd = math.sqrt(var[0])
    if sd > 0.0:
        dsd = dvar[0] / (2.0 * sd)
    else:
        dsd = np.zeros_like(x)
    return dmean[0], dsd


def sample_posterior(gp: FittedGP, query, gamma: float) -> float:
    """Reparameterized draw ``mu + sigma * gamma`` at ``query``."""
    mean, var = gp.posterior(query)
    return mean + math.sqrt(var) * float(gamma)


# ---------------------------------------------------------------------------
# marginal likelihood and fitting
# ---------------------------------------------------------------------------


def log_marginal_likelihood(data: Dataset, hyp: Hyperparameters,
                            mean_offset: float = 0.0) -> float:
    """Log evidence of ``data.y - mean_offset`` under the zero-mean GP prior."""
    if data.n == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    A = kernel_matrix(data.X, data.t, data.X, data.t, hyp)
    A[np.diag_indices_from(A)] += hyp.noise_variance
    L, _ = _cholesky(A, hyp.output_scale)
    r = data.y - mean_offset
    v = linalg.solve_triangular(L, r, lower=True, check_finite=False)
    return float(
        -0.5 * v @ v - np.sum(np.log(np.diag(L))) - 0.5 * data.n * math.log(2 * math.pi)
    )


class _LikelihoodObjective:
    """Negative log marginal likelihood and gradient over log-parameters."""

    def __init__(self, data: Dataset, offset: float, free: np.ndarray, fixed_log: np.ndarray):
        self.dx2 = _sqdist(data.X, data.X)
        self.dt2 = (data.t[:, None] - data.t[None, :]) ** 2
        self.r = data.y - offset
        self.n = data.n
        self.free = free
        self.fixed_log = fixed_log

    def full(self, z: np.ndarray) -> np.ndarray:
        p = self.fixed_log.copy()
        p[self.free] = z
        return p

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        lp = self.full(z)
        theta_x, theta_t, noise, scale = np.exp(lp)
        K = scale * np.exp(-0.5 * self.dx2 / theta_x**2 - 0.5 * self.dt2 / theta_t**2)
        A = K.copy()
        A[np.diag_indices_from(A)] += noise
        try:
            L, _ = _cholesky(A, scale)
        except FactorizationError:
            return 1e25, np.zeros(z.size)
        alpha = linalg.cho_solve((L, True), self.r, check_finite=False)
        Ainv = linalg.cho_solve((L, True), np.eye(self.n), check_finite=False)
        nll = (0.5 * self.r @ alpha + np.sum(np.log(np.diag(L)))
               + 0.5 * self.n * math.log(2 * math.pi))
        W = np.outer(alpha, alpha) - Ainv
        grad = np.array([
            0.5 * np.sum(W * K * self.dx2) / theta_x**2,
            0.5 * np.sum(W * K * self.dt2) / theta_t**2,
            0.5 * noise * np.trace(W),
            0.5 * np.sum(W * K),
        ])
        return float(nll), -grad[self.free]


def _normalize_bounds(bounds: dict | None) -> dict:
    merged = dict(DEFAULT_BOUNDS)
    if bounds:
        for key, value in bounds.items():
            if key not in merged:
                raise ValueError(f"unknown hyperparameter {key!r}")
            lo, hi = float(value[0]), float(value[1])
            if not (0 < lo <= hi) or not math.isfinite(hi):
                raise ValueError(f"invalid bounds for {key}: {value}")
            merged[key] = (lo, hi)
    return merged


def fit_hyperparameters(
    data: Dataset,
    bounds: dict | None = None,
    n_starts: int = 8,
    rng: np.random.Generator | None = None,
    init: Hyperparameters | None = None,
    center: bool = True,
    max_iterations: int = 200,
) -> Hyperparameters:
    """Maximize the log marginal likelihood from several starts.

    Starts are drawn log-uniformly inside ``bounds``; ``init`` (e.g. the
    previous estimate) replaces the first random start. Bounds with equal
    ends pin that parameter. Optimization runs in log-parameter space with
    L-BFGS-B and analytic gradients.
    """
    if data.n < 2:
        raise ValueError("need at least two observations to fit hyperparameters")
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    bnds = _normalize_bounds(bounds)
    log_lo = np.log([bnds[k][0] for k in PARAM_NAMES])
    log_hi = np.log([bnds[k][1] for k in PARAM_NAMES])
    free = log_hi > log_lo
    offset = float(np.mean(data.y)) if center else 0.0
    objective = _LikelihoodObjective(data, offset, free, log_lo.copy())

    starts = rng.uniform(log_lo, log_hi, size=(n_starts, 4))
    if init is not None:
        starts[0] = np.clip(np.log([getattr(init, k) for k in PARAM_NAMES]), log_lo, log_hi)

    best_z, best_f = None, math.inf
    improved = False
    for z0 in starts[:, free]:
        f0, _ = objective(z0)
        if f0 < best_f:
            best_z, best_f = z0, f0
        if not free.any():
            continue
        try:
            res = optimize.minimize(
                objective, z0, jac=True, method="L-BFGS-B",
                bounds=list(zip(log_lo[free], log_hi[free])),
                options={"maxiter": max_iterations},
            )
        except (FloatingPointError, ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and res.fun < f0:
            improved = True
            if res.fun < best_f:
                best_z, best_f = np.clip(res.x, log_lo[free], log_hi[free]), float(res.fun)
    if free.any() and not improved:
        warnings.warn("no hyperparameter start improved the marginal likelihood; "
                      "returning the best start", FitWarning, stacklevel=2)
    params = np.exp(objective.full(best_z))
    return Hyperparameters(*params)
