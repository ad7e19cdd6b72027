"""Myopic acquisitions and the two-step lookahead acquisition.

The lookahead value at a candidate ``x`` is the average, over fantasy
observations ``y_j = mu_n(x, t_next) + s(x) gamma_j``, of the maximized
horizon value function of the fantasy posterior. Base samples ``gamma_j``
are held fixed (common random numbers) so the estimate is a deterministic,
differentiable function of ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fantasy import FantasyGeometry
from .gp import Dataset, FittedGP, kernel_matrix
from .optimize import OptimizerConfig, maximize_fantasies
from .values import (
    DEFAULT_BETA,
    TargetContext,
    ValueFunctionSpec,
    max_posterior_mean,
    resolve_target,
    value_and_gradient,
)

__all__ = [
    "ACQUISITION_KINDS",
    "MYOPIC_KINDS",
    "AcquisitionSpec",
    "FantasyBatch",
    "myopic_context",
    "myopic_values",
    "myopic_acquisition",
    "two_step_acquisition_mc",
    "two_step_gradient_mc",
    "two_step_ley",
    "two_step_ley_gradient_dense",
    "knowledge_gradient",
]

MYOPIC_KINDS = ("ei", "pi", "ucb", "eimumax", "pimumax", "mumax", "random")
ACQUISITION_KINDS = MYOPIC_KINDS + ("two_step", "kg")
DEFAULT_MC_SAMPLES = 32


@dataclass(frozen=True)
class AcquisitionSpec:
    """Which acquisition to maximize at each decision.

    ``value_function`` is the horizon value function of the two-step
    lookahead (``kind="two_step"``). ``base_samples`` pins the standard-normal
    draws behind the fantasies; when absent they are drawn from the caller's
    generator once per decision.
    """

    kind: str
    value_function: ValueFunctionSpec | None = None
    mc_samples: int = DEFAULT_MC_SAMPLES
    base_samples: tuple | None = None
    fantasy_observation_noise: bool = True
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in ACQUISITION_KINDS:
            raise ValueError(f"unknown acquisition kind {self.kind!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.base_samples is not None:
            bs = tuple(float(b) for b in np.ravel(self.base_samples))
            if len(bs) != self.mc_samples:
                raise ValueError("base_samples length must equal mc_samples")
            if not all(math.isfinite(b) for b in bs):
                raise ValueError("base_samples must be finite")
            object.__setattr__(self, "base_samples", bs)
        if kind == "two_step":
            if self.value_function is None:
                object.__setattr__(self, "value_function", ValueFunctionSpec.identity())
        elif self.value_function is not None and kind != "kg":
            raise ValueError("value_function only applies to lookahead acquisitions")
        if kind == "kg":
            object.__setattr__(self, "value_function", ValueFunctionSpec.identity())
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")

    @property
    def is_myopic(self) -> bool:
        return self.kind in MYOPIC_KINDS

    @property
    def is_lookahead(self) -> bool:
        return not self.is_myopic

    def with_base_samples(self, samples) -> "AcquisitionSpec":
        samples = np.asarray(samples, dtype=float).ravel()
        return AcquisitionSpec(self.kind, self.value_function, samples.size, tuple(samples),
                               self.fantasy_observation_noise, self.beta)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "value_function": self.value_function.to_dict() if self.value_function else None,
            "mc_samples": self.mc_samples,
            "base_samples": list(self.base_samples) if self.base_samples is not None else None,
            "fantasy_observation_noise": self.fantasy_observation_noise,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionSpec":
        vf = d.get("value_function")
        bs = d.get("base_samples")
        return cls(
            d["kind"],
            ValueFunctionSpec.from_dict(vf) if vf else None,
            int(d.get("mc_samples", DEFAULT_MC_SAMPLES)),
            tuple(bs) if bs is not None else None,
            bool(d.get("fantasy_observation_noise", True)),
            float(d.get("beta", DEFAULT_BETA)),
        )


# ---------------------------------------------------------------------------
# myopic
# ---------------------------------------------------------------------------


def _myopic_value_spec(spec: AcquisitionSpec) -> ValueFunctionSpec:
    kind = spec.kind
    if kind == "ei":
        return ValueFunctionSpec.ei("best_observed")
    if kind == "pi":
        return ValueFunctionSpec.pi("best_observed")
    if kind == "eimumax":
        return ValueFunctionSpec.ei("posterior_mean_max")
    if kind == "pimumax":
        return ValueFunctionSpec.pi("posterior_mean_max")
    if kind == "ucb":
        return ValueFunctionSpec.ucb(spec.beta)
    return ValueFunctionSpec.identity()


def myopic_context(gp: FittedGP, t: float, spec: AcquisitionSpec,
                   data: Dataset | None = None, rng=None) -> TargetContext:
    """Resolve the improvement target of a myopic acquisition at time ``t``."""
    if not spec.is_myopic:
        raise ValueError(f"{spec.kind!r} is not a myopic acquisition")
    return resolve_target(_myopic_value_spec(spec), gp, data, t, rng)


def myopic_values(gp: FittedGP, X, t: float, spec: AcquisitionSpec,
                  ctx: TargetContext) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized myopic acquisition and its x-gradient at time ``t``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.kind == "random":
        return np.zeros(X.shape[0]), np.zeros_like(X)
    return value_and_gradient(gp, X, t, _myopic_value_spec(spec), ctx)


def myopic_acquisition(gp: FittedGP, x, t: float, spec: AcquisitionSpec,
                       data: Dataset | None = None, rng=None) -> float:
    """Myopic acquisition at ``(x, t)``.

    EI and PI improve on the best observation; the ``mumax`` variants on the
    maximum of the current posterior mean at ``t``. ``random`` is identically
    zero since its decisions come from the start sampler.
    """
    ctx = myopic_context(gp, t, spec, data, rng)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(myopic_values(gp, x[None, :], t, spec, ctx)[0][0])


# ---------------------------------------------------------------------------
# two-step lookahead
# ---------------------------------------------------------------------------


@dataclass
class FantasyBatch:
    """Fantasy models behind one two-step estimate, in base-sample order."""

    fantasy_models: list
    inner_maximizers: np.ndarray  # (N, d)
    inner_values: np.ndarray  # (N,)
    observations: np.ndarray  # (N,)
    base_samples: np.ndarray  # (N,)
    target: float = 0.0
    gradients: np.ndarray = field(default=None, repr=False)  # (N, d)

    def __len__(self) -> int:
        return len(self.inner_values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.inner_values))

    @property
    def stderr(self) -> float:
        n = len(self.inner_values)
        if n < 2:
            return math.inf
        return float(np.std(self.inner_values, ddof=1) / math.sqrt(n))


def _base_samples(spec: AcquisitionSpec, rng) -> np.ndarray:
    if spec.base_samples is not None:
        return np.asarray(spec.base_samples, dtype=float)
    return rng.standard_normal(spec.mc_samples)


def _check_times(gp: FittedGP, t_next: float, T: float) -> None:
    if not t_next <= T:
        raise ValueError("t_next must not exceed the horizon T")
    if gp.n and not t_next > gp.data.last_time:
        raise ValueError("t_next must follow the last observed time")


def _two_step_core(gp, x, t_next, T, vspec, spec, rng, config, ctx):
    _check_times(gp, t_next, T)
    rng = np.random.default_rng(0) if rng is None else rng
    config = config or OptimizerConfig()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    gamma = _base_samples(spec, rng)
    if ctx is None:
        ctx = resolve_target(vspec, gp, t=T, rng=rng)
    geom = FantasyGeometry(gp, x[None, :], t_next, spec.fantasy_observation_noise)
    try:
        res = maximize_fantasies(geom, T, gamma, vspec, ctx.resolved_target, config, rng)
    except FloatingPointError:
        # one retry from fresh starts before giving up
        res = maximize_fantasies(geom, T, gamma, vspec, ctx.resolved_target, config, rng)
    if not np.all(np.isfinite(res.values)):
        raise FloatingPointError("non-finite inner value after retry")
    return geom, gamma, res, ctx


def two_step_acquisition_mc(gp: FittedGP, x, t_next: float, T: float, vspec: ValueFunctionSpec,
                            spec: AcquisitionSpec, rng=None, config: OptimizerConfig | None = None,
                            ctx: TargetContext | None = None):
    """Monte Carlo two-step lookahead value at ``x`` observed at ``t_next``.

    Parameters
    ----------
    gp : FittedGP
        Current posterior.
    x : array_like, shape (d,)
    t_next, T : float
        Time of the next observation and the horizon.
    vspec : ValueFunctionSpec
        Horizon value function.
    spec : AcquisitionSpec
        Supplies the sample count, base samples and fantasy noise mode.
    rng : numpy.random.Generator
        Source of base samples (if not pinned) and inner starts. Reusing a
        generator seeded identically reproduces the estimate bit for bit.

    Returns
    -------
    value : float
    batch : FantasyBatch
    """
    geom, gamma, res, ctx = _two_step_core(gp, x, t_next, T, vspec, spec, rng, config, ctx)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    ys = geom.fantasy_observations(gamma)[0]
    models = [gp.condition((x, t_next), float(y)) for y in ys]
    batch = FantasyBatch(models, res.maximizers[0], res.values[0], ys, gamma,
                         ctx.resolved_target, res.grad_outer[0])
    return float(np.mean(res.values[0])), batch


def two_step_gradient_mc(gp: FittedGP, x, t_next: float, T: float, vspec: ValueFunctionSpec,
                         spec: AcquisitionSpec, rng=None, config: OptimizerConfig | None = None,
                         ctx: TargetContext | None = None) -> np.ndarray:
    """Envelope-gradient estimate of the two-step value at ``x``.

    Each fantasy's inner maximizer is held fixed and the fantasy value is
    differentiated through the reparameterized observation and the
    conditioned posterior. Pass a generator in the same state as for the
    value call to share base samples and inner starts.
    """
    _, _, res, _ = _two_step_core(gp, x, t_next, T, vspec, spec, rng, config, ctx)
    return res.grad_outer[0].mean(axis=0)


def two_step_ley(gp: FittedGP, x, t_next: float, T: float, spec: AcquisitionSpec,
                 rng=None, config: OptimizerConfig | None = None) -> float:
    """Two-step expected maximized posterior mean (identity value function)."""
    return two_step_acquisition_mc(gp, x, t_next, T, ValueFunctionSpec.identity(),
                                   spec, rng, config)[0]


def two_step_ley_gradient_dense(gp: FittedGP, x, t_next: float, batch: FantasyBatch,
                                T: float, observation_noise: bool = True) -> np.ndarray:
    """Gradient of the identity-value estimate through explicit (n+1)-matrix algebra.

    For each fantasy ``j`` with inner maximizer ``p_j``,
    ``mu_j = m + k^T K^{-1} (y_aug - m)`` where ``K`` is the bordered
    covariance including ``(x, t_next)``. Differentiating in ``x`` gives

        dk^T a - k^T K^{-1} dK a + k^T K^{-1} e_{n+1} dy_j

    with ``a = K^{-1}(y_aug - m)`` and ``dy_j`` the derivative of the
    reparameterized fantasy observation. Dense solves only; used to
    cross-check :func:`two_step_gradient_mc`.
    """
    hyp = gp.hyperparameters
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    n = gp.n
    m0 = gp.mean_offset
    Z = np.vstack([gp.data.X, x[None, :]])
    tz = np.append(gp.data.t, t_next)
    K = kernel_matrix(Z, tz, Z, tz, hyp) + hyp.noise_variance * np.eye(n + 1)
    Kn = K[:n, :n]
    kq = K[:n, n]
    # moments of the reparameterized observation and their x-derivatives
    if n:
        wq = np.linalg.solve(Kn, kq)
        mean_q = m0 + kq @ np.linalg.solve(Kn, gp.data.y - m0)
    else:
        wq = np.zeros(0)
        mean_q = m0
    var_q = max(hyp.output_scale - kq @ wq, 0.0)
    dkq = kq[:, None] * (gp.data.X - x[None, :]) / hyp.theta_x**2  # (n, d)
    dmean_q = dkq.T @ (np.linalg.solve(Kn, gp.data.y - m0) if n else np.zeros(0))
    dvar_q = -2.0 * dkq.T @ wq
    Dq = var_q + hyp.noise_variance
    if observation_noise:
        s = math.sqrt(Dq)
        ds = 0.5 * dvar_q / s if s > 0 else np.zeros(d)
    else:
        s = math.sqrt(var_q)
        ds = 0.5 * dvar_q / s if s > 0 else np.zeros(d)

    grads = np.empty((len(batch), d))
    for j in range(len(batch)):
        p = batch.inner_maximizers[j]
        y_aug = np.append(gp.data.y, mean_q + s * batch.base_samples[j]) - m0
        k = kernel_matrix(Z, tz, p[None, :], np.array([T]), hyp)[:, 0]
        a = np.linalg.solve(K, y_aug)
        b = np.linalg.solve(K, k)
        dy = dmean_q + ds * batch.base_samples[j]
        g = np.zeros(d)
        # only the last entry of k depends on x
        dk_last = k[n] * (p - x) / hyp.theta_x**2
        g += dk_last * a[n]
        # dK has nonzeros only in row/column n (off the diagonal)
        # b^T dK a = b_n (dkq . a_:n) + a_n (dkq . b_:n)
        g -= b[n] * (dkq.T @ a[:n]) + a[n] * (dkq.T @ b[:n])
        g += b[n] * dy
        grads[j] = g
    return grads.mean(axis=0)


def knowledge_gradient(gp: FittedGP, x, t_next: float, T: float, spec: AcquisitionSpec,
                       rng=None, config: OptimizerConfig | None = None) -> float:
    """Knowledge gradient: two-step expected max mean minus the current max mean at ``T``.

    The subtrahend is computed once per posterior and memoized on ``gp``.
    """
    _, current = max_posterior_mean(gp, T)
    return two_step_ley(gp, x, t_next, T, spec, rng, config) - current
