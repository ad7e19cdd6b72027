"""Maximization over the action cube.

All local searches use L-BFGS-B. Multiple starts are solved as one
separable problem (the objective is the sum over starts, so each block
of the joint gradient is that start's own gradient), which keeps every
evaluation vectorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .fantasy import FantasyGeometry
from .gp import FittedGP
from .values import TargetContext, ValueFunctionSpec, resolve_target, value_and_gradient

__all__ = [
    "OptimizerConfig",
    "OneShotState",
    "InnerResult",
    "multistart_maximize",
    "inner_value_maximize",
    "maximize_fantasies",
    "one_shot_maximize",
    "mc_lookahead_maximize",
    "subgradient_probe",
]

PREPASS_POINTS = 256


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for multistart bounded quasi-Newton ascent.

    ``start_sampler(rng, n, d)`` replaces the uniform start distribution;
    ``lower``/``upper`` shrink the box inside the unit cube.
    """

    n_starts: int = 16
    max_iterations: int = 100
    gradient_tolerance: float = 1e-6
    function_tolerance: float = 1e-12
    start_sampler: Callable | None = None
    lower: tuple | None = None
    upper: tuple | None = None

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (self.gradient_tolerance > 0 and self.function_tolerance > 0):
            raise ValueError("tolerances must be positive")
        for key in ("lower", "upper"):
            b = getattr(self, key)
            if b is not None:
                b = float(b) if np.ndim(b) == 0 else tuple(float(v) for v in np.ravel(b))
                object.__setattr__(self, key, b)

    def box(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.zeros(d) if self.lower is None else np.broadcast_to(np.asarray(self.lower, float), (d,)).copy()
        hi = np.ones(d) if self.upper is None else np.broadcast_to(np.asarray(self.upper, float), (d,)).copy()
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
            raise ValueError("optimizer box must lie inside [0, 1]^d")
        return lo, hi

    def sample_starts(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        lo, hi = self.box(d)
        if self.start_sampler is not None:
            X = np.asarray(self.start_sampler(rng, n, d), dtype=float).reshape(n, d)
        else:
            X = rng.uniform(size=(n, d))
        return np.clip(lo + X * (hi - lo) if self.start_sampler is None else X, lo, hi)

    def to_dict(self) -> dict:
        if self.start_sampler is not None:
            raise ValueError("a custom start_sampler cannot be serialized")
        return {
            "n_starts": self.n_starts,
            "max_iterations": self.max_iterations,
            "gradient_tolerance": self.gradient_tolerance,
            "function_tolerance": self.function_tolerance,
            "lower": list(self.lower) if isinstance(self.lower, tuple) else self.lower,
            "upper": list(self.upper) if isinstance(self.upper, tuple) else self.upper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        return cls(**d)


FIRST_STEP = 0.1
STEP_FLOOR = 1e-13


def _ascend_rows(fun, X0: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                 config: OptimizerConfig, max_backtracks: int = 40) -> np.ndarray:
    """Independent projected BFGS ascent from every row of ``X0``.

    ``fun(X, rows) -> (values, grads)`` evaluates the subset ``X`` of the
    batch whose row numbers are ``rows``. Each row keeps its own
    inverse-Hessian estimate, Armijo backtracking along the projected path
    and stopping test, so rows never influence each other. (A single
    quasi-Newton run on the summed objective shares curvature and line
    searches across rows and can throw a start out of the basin it began in.)
    Rows advance asynchronously: every round evaluates one trial point for
    each row that is still searching.
    """
    X = np.clip(np.array(X0, dtype=float), lo, hi)
    S, k = X.shape
    v, g = fun(X, np.arange(S))
    v, g = np.array(v, dtype=float), np.array(g, dtype=float).reshape(S, k)
    H = np.broadcast_to(np.eye(k), (S, k, k)).copy()
    fresh = np.ones(S, dtype=bool)  # H still the (unscaled) identity
    active = np.isfinite(v)
    searching = np.zeros(S, dtype=bool)
    p = np.zeros((S, k))
    alpha = np.ones(S)
    tries = np.zeros(S, dtype=int)
    iters = np.zeros(S, dtype=int)

    def give_up(rows):
        # a step that shrank to nothing means the row is done; otherwise the
        # row restarts once from steepest ascent, and a fresh row stalls
        tiny = alpha[rows] * np.max(np.abs(p[rows]), axis=1) < STEP_FLOOR
        searching[rows] = False
        active[rows[tiny | fresh[rows]]] = False
        H[rows] = np.eye(k)
        fresh[rows] = True

    while True:
        # start a new iteration for active rows that are not mid-search
        new = np.flatnonzero(active & ~searching)
        if new.size:
            pinned = ((X[new] <= lo) & (g[new] < 0)) | ((X[new] >= hi) & (g[new] > 0))
            pg = np.where(pinned, 0.0, g[new])
            done = (np.max(np.abs(pg), axis=1) <= config.gradient_tolerance) \
                | (iters[new] >= config.max_iterations)
            active[new[done]] = False
            go = ~done
            new, pinned, pg = new[go], pinned[go], pg[go]
            d = np.einsum("sij,sj->si", H[new], pg)
            d[pinned] = 0.0
            # a fresh row starts with a short steepest step so it stays in its basin
            scale = np.where(fresh[new], FIRST_STEP / np.linalg.norm(pg, axis=1), 1.0)
            p[new] = d * scale[:, None]
            alpha[new] = 1.0
            tries[new] = 0
            searching[new] = True
        rows = np.flatnonzero(searching)
        if not rows.size:
            break
        floor = alpha[rows] * np.max(np.abs(p[rows]), axis=1) < STEP_FLOOR
        give_up(rows[floor])
        rows = rows[~floor]
        if not rows.size:
            continue

        cand = np.clip(X[rows] + alpha[rows, None] * p[rows], lo, hi)
        vt, gt = fun(cand, rows)
        vt = np.asarray(vt, dtype=float)
        gt = np.asarray(gt, dtype=float).reshape(rows.size, k)
        gain = np.sum(g[rows] * (cand - X[rows]), axis=1)
        ok = np.isfinite(vt) & (gain > 0) & (vt >= v[rows] + 1e-4 * gain)

        bad = rows[~ok]
        alpha[bad] *= 0.5
        tries[bad] += 1
        give_up(bad[tries[bad] >= max_backtracks])

        good = rows[ok]
        if not good.size:
            continue
        s_vec = cand[ok] - X[good]
        y_vec = g[good] - gt[ok]  # gradient change of -f
        sy = np.sum(s_vec * y_vec, axis=1)
        small = vt[ok] - v[good] <= config.function_tolerance * np.maximum.reduce(
            [np.abs(v[good]), np.abs(vt[ok]), np.ones(good.size)])
        X[good], v[good], g[good] = cand[ok], vt[ok], gt[ok]
        searching[good] = False
        iters[good] += 1
        active[good[small]] = False
        upd = sy > 1e-12 * np.linalg.norm(s_vec, axis=1) * np.linalg.norm(y_vec, axis=1)
        u = good[upd]
        s_u, y_u, sy_u = s_vec[upd], y_vec[upd], sy[upd]
        first = fresh[u]
        H[u[first]] = np.eye(k) * (sy_u[first] / np.sum(y_u[first] ** 2, axis=1))[:, None, None]
        fresh[u] = False
        rho = 1.0 / sy_u
        Hy = np.einsum("sij,sj->si", H[u], y_u)
        coef = rho * rho * np.sum(y_u * Hy, axis=1) + rho
        H[u] += (coef[:, None, None] * s_u[:, :, None] * s_u[:, None, :]
                 - rho[:, None, None] * (Hy[:, :, None] * s_u[:, None, :]
                                         + s_u[:, :, None] * Hy[:, None, :]))
    return X


def _ascend_from(fun, X0, lo, hi, config, row_fun=None):
    """Ascend from every start and keep, per start, the better of start and finish.

    ``fun(X)`` must treat rows independently. ``row_fun(X, rows)``, when
    given, evaluates a subset of the rows of ``X0`` identified by number.
    """
    v0, g0 = fun(X0)
    v0 = np.asarray(v0, dtype=float)
    keep = np.isfinite(v0)
    if not keep.any():
        raise FloatingPointError("objective is non-finite at every start")
    X0k = X0[keep]
    if np.max(np.abs(np.asarray(g0)[keep])) < config.gradient_tolerance:
        return X0k, v0[keep], True
    if row_fun is None:
        sub = lambda X, rows: fun(X)
    else:
        orig = np.flatnonzero(keep)
        sub = lambda X, rows: row_fun(X, orig[rows])
    X1 = _ascend_rows(sub, X0k, lo, hi, config)
    v1, _ = fun(X1) if row_fun is None else row_fun(X1, np.flatnonzero(keep))
    v1 = np.asarray(v1, dtype=float)
    better = np.isfinite(v1) & (v1 >= v0[keep])
    X = np.where(better[:, None], X1, X0k)
    v = np.where(better, v1, v0[keep])
    return X, v, False


def multistart_maximize(objective, dim: int, config: OptimizerConfig | None = None,
                        rng: np.random.Generator | None = None,
                        starts: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Maximize a differentiable field on the (sub)cube from several starts.

    Parameters
    ----------
    objective : callable
        ``objective(X) -> (values, grads)`` for a batch ``X`` of shape (S, d).
    dim : int
        Dimension of the action space.
    config : OptimizerConfig
    rng : numpy.random.Generator
        Source of start points.
    starts : array, optional
        Explicit start points; overrides sampling.

    Returns
    -------
    argmax : (d,) array
    max : float

    Notes
    -----
    When the gradient is below tolerance at every start, the first start
    is returned unchanged, so a flat objective yields a draw from the start
    distribution. Ties between starts go to the lowest start index.
    """
    config = config or OptimizerConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = config.box(dim)
    if starts is None:
        starts = config.sample_starts(rng, config.n_starts, dim)
    starts = np.clip(np.atleast_2d(np.asarray(starts, dtype=float)), lo, hi)

    def fun(X):
        v, g = objective(X)
        return np.asarray(v, dtype=float).reshape(-1), np.asarray(g, dtype=float).reshape(X.shape)

    X, v, flat = _ascend_from(fun, starts, lo, hi, config)
    if flat:
        return X[0].copy(), float(v[0])
    best = int(np.argmax(v))
    return X[best].copy(), float(v[best])


@dataclass
class InnerResult:
    maximizers: np.ndarray  # (S, N, d)
    values: np.ndarray  # (S, N)
    grad_outer: np.ndarray  # (S, N, d)


def _prepass_points(rng: np.random.Generator, d: int, lo, hi) -> np.ndarray:
    if d == 1:
        C = np.linspace(0.0, 1.0, PREPASS_POINTS)[:, None]
    else:
        seed = int(rng.integers(2**32))
        C = qmc.Sobol(d, scramble=True, seed=seed).random(PREPASS_POINTS)
    return lo + C * (hi - lo)


def maximize_fantasies(geometry: FantasyGeometry, T: float, gamma, vspec: ValueFunctionSpec,
                       xi: float, config: OptimizerConfig, rng: np.random.Generator,
                       starts: np.ndarray | None = None,
                       candidates: np.ndarray | None = None) -> InnerResult:
    """Maximize every fantasy's horizon value for every outer point at once.

    Each fantasy starts from the shared random ``starts`` (R, d) plus the best
    point of a shared candidate prepass. The per-fantasy winner is the best
    of its starts, lowest index first.
    """
    gamma = np.asarray(gamma, dtype=float)
    N = gamma.size
    S = geometry.n_outer
    d = geometry.Q.shape[1]
    lo, hi = config.box(d)
    if starts is None:
        starts = config.sample_starts(rng, config.n_starts, d)
    if candidates is None:
        candidates = _prepass_points(rng, d, lo, hi)
    cand_vals = geometry.candidate_values(candidates, T, gamma, vspec, xi)  # (S, N, K)
    best_cand = candidates[np.argmax(cand_vals, axis=2)]  # (S, N, d)
    R = starts.shape[0] + 1
    P0 = np.empty((S, N, R, d))
    P0[:, :, 0, :] = best_cand
    P0[:, :, 1:, :] = starts[None, None, :, :]
    gamma_rep = np.repeat(gamma, R)

    def fun(Z):
        P = Z.reshape(S, N * R, d)
        v, _, gp_ = geometry.terms(P, T, gamma_rep, vspec, xi)
        return v.reshape(-1), gp_.reshape(-1, d)

    singles = [geometry] if S == 1 else [
        FantasyGeometry(geometry.gp, geometry.Q[s], geometry.t_next, geometry.observation_noise)
        for s in range(S)]

    def row_fun(Z, rows):
        # row r belongs to outer point r // (N R) and base sample (r // R) % N
        outer = rows // (N * R)
        v = np.empty(rows.size)
        g = np.empty((rows.size, d))
        for s in np.unique(outer):
            m = outer == s
            vs, _, gs = singles[s].terms(Z[m][None], T, gamma_rep[rows[m] % (N * R)][None],
                                                vspec, xi)
            v[m], g[m] = vs[0], gs[0]
        return v, g

    Z0 = P0.reshape(-1, d)
    Z, v, _ = _ascend_from(fun, Z0, lo, hi, config, row_fun)
    if Z.shape[0] != Z0.shape[0]:
        raise FloatingPointError("non-finite fantasy values at inner starts")
    v = v.reshape(S, N, R)
    idx = np.argmax(v, axis=2)  # (S, N)
    P = Z.reshape(S, N, R, d)
    best = np.take_along_axis(P, idx[:, :, None, None], axis=2)[:, :, 0, :]
    values, grad_q, _ = geometry.terms(best, T, gamma, vspec, xi)
    return InnerResult(best, values, grad_q)


def inner_value_maximize(fantasy_gp: FittedGP, T: float, vspec: ValueFunctionSpec,
                         config: OptimizerConfig | None = None, rng=None,
                         ctx: TargetContext | None = None) -> tuple[np.ndarray, float]:
    """Maximize the horizon value function of one (fantasy) GP."""
    if ctx is None:
        ctx = resolve_target(vspec, fantasy_gp, t=T, rng=rng)

    def objective(X):
        return value_and_gradient(fantasy_gp, X, T, vspec, ctx)

    return multistart_maximize(objective, fantasy_gp.dim, config, rng)


@dataclass
class OneShotState:
    outer_point: np.ndarray  # (d,)
    fantasy_points: np.ndarray  # (N, d)
    base_samples: np.ndarray  # (N,)

    def __post_init__(self):
        if np.any(self.outer_point < 0) or np.any(self.outer_point > 1) \
                or np.any(self.fantasy_points < 0) or np.any(self.fantasy_points > 1):
            raise ValueError("one-shot points must lie in the unit cube")

    @property
    def joint_dimension(self) -> int:
        return self.outer_point.size + self.fantasy_points.size


def _base_samples(spec, rng) -> np.ndarray:
    if spec.base_samples is not None:
        return np.asarray(spec.base_samples, dtype=float)
    return rng.standard_normal(spec.mc_samples)


def one_shot_maximize(gp: FittedGP, t_next: float, T: float, vspec: ValueFunctionSpec,
                      spec, config: OptimizerConfig | None = None, rng=None,
                      ctx: TargetContext | None = None):
    """Jointly ascend the outer point and one inner maximizer per fantasy.

    The objective ``(1/N) sum_j value_j(x'_j | fantasy_j(x, gamma_j))`` is
    deterministic once the base samples are fixed. Fantasy points are
    initialized from the best point of a 256-point prepass.

    Returns
    -------
    x_next : (d,) array
    state : OneShotState
    value : float
    """
    config = config or OptimizerConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    if ctx is None:
        ctx = resolve_target(vspec, gp, t=T, rng=rng)
    xi = ctx.resolved_target
    gamma = _base_samples(spec, rng)
    N = gamma.size
    d = gp.dim
    lo, hi = config.box(d)
    starts = config.sample_starts(rng, config.n_starts, d)
    candidates = _prepass_points(rng, d, lo, hi)
    noise = spec.fantasy_observation_noise

    geom0 = FantasyGeometry(gp, starts, t_next, noise)
    cand_vals = geom0.candidate_values(candidates, T, gamma, vspec, xi)
    fantasy0 = candidates[np.argmax(cand_vals, axis=2)]  # (S, N, d)
    S = starts.shape[0]
    Z0 = np.concatenate([starts, fantasy0.reshape(S, N * d)], axis=1)

    def fun(Z):
        Q = Z[:, :d]
        P = Z[:, d:].reshape(-1, N, d)
        geom = FantasyGeometry(gp, Q, t_next, noise)
        v, gq, gp_ = geom.terms(P, T, gamma, vspec, xi)
        value = v.mean(axis=1)
        grad = np.concatenate([gq.mean(axis=1), gp_.reshape(-1, N * d) / N], axis=1)
        return value, grad

    lo_j = np.tile(lo, N + 1)
    hi_j = np.tile(hi, N + 1)
    Z, v, flat = _ascend_from(fun, Z0, lo_j, hi_j, config)
    best = 0 if flat else int(np.argmax(v))
    x_next = Z[best, :d].copy()
    state = OneShotState(x_next, Z[best, d:].reshape(N, d).copy(), gamma.copy())
    return x_next, state, float(v[best])


def mc_lookahead_maximize(gp: FittedGP, t_next: float, T: float, vspec: ValueFunctionSpec,
                          spec, config: OptimizerConfig | None = None, rng=None,
                          ctx: TargetContext | None = None):
    """Ascend the Monte Carlo two-step value with envelope gradients.

    Base samples, inner starts and prepass candidates are drawn once, so
    the objective seen by the outer optimizer is deterministic.
    """
    config = config or OptimizerConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    if ctx is None:
        ctx = resolve_target(vspec, gp, t=T, rng=rng)
    xi = ctx.resolved_target
    gamma = _base_samples(spec, rng)
    d = gp.dim
    lo, hi = config.box(d)
    outer_starts = config.sample_starts(rng, config.n_starts, d)
    inner_starts = config.sample_starts(rng, config.n_starts, d)
    candidates = _prepass_points(rng, d, lo, hi)
    noise = spec.fantasy_observation_noise

    def objective(Q):
        geom = FantasyGeometry(gp, Q, t_next, noise)
        res = maximize_fantasies(geom, T, gamma, vspec, xi, config, rng,
                                 starts=inner_starts, candidates=candidates)
        return res.values.mean(axis=1), res.grad_outer.mean(axis=1)

    return multistart_maximize(objective, d, config, rng, starts=outer_starts)


def subgradient_probe(f, x, h: float = 2.0**-26) -> np.ndarray:
    """A member of the subdifferential of a piecewise-smooth ``f`` at ``x``.

    ``f`` may be a plain callable, or a sequence of branch callables whose
    pointwise maximum is the function. For a branch list, the derivative of
    the lowest-index active branch is returned. Kinks of a plain callable
    (e.g. ``|x|`` at 0) resolve to the right-hand branch, i.e. one-sided
    forward differences. The default step is a power of two so that
    offsets from dyadic points are exact.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if isinstance(f, (list, tuple)):
        vals = [float(g(x)) for g in f]
        top = max(vals)
        active = next(i for i, v in enumerate(vals) if v == top)
        return _right_derivative(f[active], x, h)
    return _right_derivative(f, x, h)


def _right_derivative(f, x: np.ndarray, h: float) -> np.ndarray:
    # second-order one-sided difference: exact for quadratics, O(h^2) otherwise
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        f0 = float(f(x))
        f1 = float(f(x + e))
        f2 = float(f(x + 2 * e))
        g[i] = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
    return g
