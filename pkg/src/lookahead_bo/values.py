"""Value functions evaluated on the GP posterior at the horizon.

Each value function maps posterior moments ``(mu, sigma)`` at a point to a
scalar utility: the posterior mean itself, the probability of improvement
``Phi(z)``, the expected improvement ``z sigma Phi(z) + sigma phi(z)``, or the
upper confidence bound ``mu + sqrt(beta) sigma``, with ``z = (mu - xi) / sigma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .gp import Dataset, FittedGP

__all__ = [
    "ValueFunctionSpec",
    "TargetContext",
    "resolve_target",
    "value_from_moments",
    "value_partials",
    "value_and_gradient",
    "evaluate_value",
    "value_gradient",
]

KINDS = ("identity", "pi", "ei", "ucb")
TARGET_POLICIES = ("fixed", "best_observed", "posterior_mean_max")
DEFAULT_BETA = 2.0
TARGET_STARTS = 32

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _npdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


@dataclass(frozen=True)
class ValueFunctionSpec:
    """Which utility to take at the horizon and its parameters.

    ``target_policy`` (PI/EI only) decides where the target ``xi`` comes
    from: a fixed number, the best observation so far, or the maximum of
    the posterior mean at the resolution time.
    """

    kind: str = "identity"
    target_policy: str | None = None
    xi: float | None = None
    beta: float | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown value-function kind {self.kind!r}")
        if kind == "ucb":
            if self.beta is None or not self.beta >= 0:
                raise ValueError("UCB value function needs beta >= 0")
        elif self.beta is not None:
            raise ValueError("beta only applies to UCB")
        if kind in ("pi", "ei"):
            if self.target_policy not in TARGET_POLICIES:
                raise ValueError(
                    f"PI/EI need target_policy in {TARGET_POLICIES}, got {self.target_policy!r}"
                )
            if self.target_policy == "fixed" and (self.xi is None or not math.isfinite(self.xi)):
                raise ValueError("fixed target needs a finite xi")
        elif self.target_policy is not None:
            raise ValueError("target_policy only applies to PI/EI")

    @classmethod
    def identity(cls) -> "ValueFunctionSpec":
        return cls("identity")

    @classmethod
    def ucb(cls, beta: float = DEFAULT_BETA) -> "ValueFunctionSpec":
        return cls("ucb", beta=float(beta))

    @classmethod
    def ei(cls, target="posterior_mean_max") -> "ValueFunctionSpec":
        if isinstance(target, (int, float)):
            return cls("ei", "fixed", xi=float(target))
        return cls("ei", target)

    @classmethod
    def pi(cls, target="posterior_mean_max") -> "ValueFunctionSpec":
        if isinstance(target, (int, float)):
            return cls("pi", "fixed", xi=float(target))
        return cls("pi", target)

    @property
    def needs_sigma(self) -> bool:
        return self.kind != "identity"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "target_policy": self.target_policy,
                "xi": self.xi, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueFunctionSpec":
        return cls(d["kind"], d.get("target_policy"), d.get("xi"), d.get("beta"))


@dataclass(frozen=True)
class TargetContext:
    resolved_target: float
    resolution_time: float

    def __post_init__(self):
        if not math.isfinite(self.resolved_target):
            raise ValueError("resolved target must be finite")


def max_posterior_mean(gp: FittedGP, t: float, rng=None, config=None) -> tuple[np.ndarray, float]:
    """Maximizer and maximum of ``mu(., t)`` over the unit cube (memoized on ``gp``)."""
    from .optimize import OptimizerConfig, multistart_maximize

    key = ("max_mean", float(t), config)
    memo = gp.cache()
    if key in memo:
        return memo[key]
    if gp.n == 0:
        # constant prior mean
        result = (np.full(gp.dim, 0.5), gp.mean_offset)
    else:
        config = config or OptimizerConfig(n_starts=TARGET_STARTS)
        rng = np.random.default_rng(0) if rng is None else rng

        def objective(X):
            mean, _, dmean, _ = gp.predict_with_grad(X, t)
            return mean, dmean

        result = multistart_maximize(objective, gp.dim, config, rng)
    memo[key] = result
    return result


def resolve_target(spec: ValueFunctionSpec, gp: FittedGP, data: Dataset | None = None,
                   t: float = 0.0, rng=None) -> TargetContext:
    """Resolve the improvement target ``xi`` for ``spec`` at time ``t``.

    Identity and UCB carry no target; they resolve to 0.
    """
    if spec.kind not in ("pi", "ei"):
        return TargetContext(0.0, float(t))
    if spec.target_policy == "fixed":
        return TargetContext(float(spec.xi), float(t))
    if spec.target_policy == "best_observed":
        data = gp.data if data is None else data
        if data.n == 0:
            raise ValueError("best-observed target needs at least one observation")
        return TargetContext(float(np.max(data.y)), float(t))
    _, best = max_posterior_mean(gp, t, rng)
    return TargetContext(float(best), float(t))


def value_partials(mu, sigma, spec: ValueFunctionSpec, xi: float = 0.0):
    """Value and its partial derivatives with respect to ``mu`` and ``sigma``.

    At ``sigma == 0`` PI and EI take their limits: EI -> max(mu - xi, 0) and
    PI -> 1{mu > xi} with value 0.5 on the tie.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    kind = spec.kind
    if kind == "identity":
        return mu.copy(), np.ones_like(mu), np.zeros_like(mu)
    if kind == "ucb":
        rb = math.sqrt(spec.beta)
        return mu + rb * sigma, np.ones_like(mu), np.full_like(mu, rb)

    pos = sigma > 0.0
    safe = np.where(pos, sigma, 1.0)
    diff = mu - xi
    z = np.where(pos, diff / safe, 0.0)
    cdf = ndtr(z)
    pdf = _npdf(z)
    if kind == "ei":
        value = np.where(pos, diff * cdf + sigma * pdf, np.maximum(diff, 0.0))
        d_mu = np.where(pos, cdf, (diff >= 0.0).astype(float))
        d_sigma = np.where(pos, pdf, np.where(diff == 0.0, _INV_SQRT_2PI, 0.0))
        return value, d_mu, d_sigma
    # pi
    value = np.where(pos, cdf, np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0)))
    d_mu = np.where(pos, pdf / safe, 0.0)
    d_sigma = np.where(pos, -pdf * z / safe, 0.0)
    return value, d_mu, d_sigma


def value_from_moments(mu, sigma, spec: ValueFunctionSpec, xi: float = 0.0):
    return value_partials(mu, sigma, spec, xi)[0]


def value_and_gradient(gp: FittedGP, X, T: float, spec: ValueFunctionSpec,
                       ctx: TargetContext | None = None):
    """Vectorized value and x-gradient at each row of ``X`` at time ``T``."""
    xi = ctx.resolved_target if ctx is not None else 0.0
    mean, var, dmean, dvar = gp.predict_with_grad(X, T)
    sd = np.sqrt(var)
    v, d_mu, d_sigma = value_partials(mean, sd, spec, xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        dsd = np.where(sd[:, None] > 0.0, dvar / (2.0 * sd[:, None]), 0.0)
    grad = d_mu[:, None] * dmean + d_sigma[:, None] * dsd
    return v, grad


def evaluate_value(gp: FittedGP, x, T: float, spec: ValueFunctionSpec,
                   ctx: TargetContext | None = None) -> float:
    """Value function at a single point ``x`` and horizon ``T``."""
    xi = ctx.resolved_target if ctx is not None else 0.0
    mean, var = gp.posterior((x, T))
    return float(value_from_moments(mean, math.sqrt(var), spec, xi))


def value_gradient(gp: FittedGP, x, T: float, spec: ValueFunctionSpec,
                   ctx: TargetContext | None = None) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, grad = value_and_gradient(gp, x[None, :], T, spec, ctx)
    return grad[0]
