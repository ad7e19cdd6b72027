"""Closed-form fantasy posteriors at the horizon, batched over outer points.

Conditioning the GP on one fantasy observation ``y = mu_n(q) + s(q) gamma``
at the outer point ``q = (x, t_next)`` moves the horizon posterior at
``p = (x~, T)`` to

    mu_1(p)      = mu_n(p) + c_n(p, q) * c(q) * gamma
    sigma_1^2(p) = sigma_n^2(p) - c_n(p, q)^2 / D(q)

where ``c_n`` is the posterior covariance, ``D = sigma_n^2(q) + noise`` and
``c = s / D``. With observation noise in the fantasy, ``s = sqrt(D)``;
otherwise ``s = sigma_n(q)``. This is the rank-one update written out
per query point, so fantasies never need a refactorization.
"""

from __future__ import annotations

import numpy as np

from .gp import FittedGP, kernel_matrix
from .values import ValueFunctionSpec, value_partials

__all__ = ["FantasyGeometry"]

_TINY = 1e-300


class FantasyGeometry:
    """Posterior quantities at a batch of outer points ``Q`` (S, d) at ``t_next``."""

    def __init__(self, gp: FittedGP, Q, t_next: float, observation_noise: bool = True):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        self.gp = gp
        self.Q = Q
        self.t_next = float(t_next)
        self.observation_noise = observation_noise
        hyp = gp.hyperparameters
        s0 = hyp.output_scale
        self.kq = gp.cross_kernel(Q, t_next)  # (n, S)
        self.wq = gp.solve(self.kq)  # (n, S)
        var_raw = s0 - np.sum(self.kq * self.wq, axis=0)
        var_q = np.clip(var_raw, 0.0, s0)
        D = var_q + hyp.noise_variance
        pos = D > _TINY
        self.inv_D = np.where(pos, 1.0 / np.where(pos, D, 1.0), 0.0)
        if observation_noise:
            self.coef = np.sqrt(self.inv_D)
        else:
            self.coef = np.sqrt(var_q) * self.inv_D
        self.var_q = var_q

        # gradients with respect to the outer point
        diff = gp.data.X[:, None, :] - Q[None, :, :]  # (n, S, d)
        self.dkq = self.kq[:, :, None] * diff / hyp.theta_x**2
        dvar_q = -2.0 * np.einsum("ns,nsd->sd", self.wq, self.dkq)
        dvar_q[var_raw <= 0.0] = 0.0
        self.dD = dvar_q
        if observation_noise:
            self.dcoef = -0.5 * (self.inv_D**1.5)[:, None] * dvar_q
        else:
            sd = np.sqrt(var_q)
            with np.errstate(divide="ignore", invalid="ignore"):
                factor = np.where(sd > 0, 0.5 / np.where(sd > 0, sd, 1.0) * self.inv_D, 0.0)
            self.dcoef = dvar_q * (factor - sd * self.inv_D**2)[:, None]

    @property
    def n_outer(self) -> int:
        return self.Q.shape[0]

    def fantasy_observations(self, gamma) -> np.ndarray:
        """Fantasized ``y`` for each outer point and base sample, shape (S, N)."""
        gamma = np.asarray(gamma, dtype=float)
        mean_q, _ = self.gp.predict(self.Q, self.t_next)
        s = self.coef / np.where(self.inv_D > 0, self.inv_D, 1.0)
        s = np.where(self.inv_D > 0, s, 0.0)
        return mean_q[:, None] + s[:, None] * gamma[None, :]

    def terms(self, P, T: float, gamma, vspec: ValueFunctionSpec, xi: float = 0.0,
              grad: bool = True):
        """Fantasy value at inner points ``P`` (S, M, d) for per-point base samples.

        ``gamma`` has shape (M,) or (S, M). Returns the values (S, M) and,
        with ``grad``, their gradients with respect to the outer point
        (S, M, d) and with respect to the inner point (S, M, d).
        """
        gp = self.gp
        hyp = gp.hyperparameters
        s0 = hyp.output_scale
        P = np.asarray(P, dtype=float)
        S, M, d = P.shape
        n = gp.n
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (S, M))
        Pf = P.reshape(S * M, d)

        kp = gp.cross_kernel(Pf, T)  # (n, SM)
        mean_p = gp.mean_offset + kp.T @ gp.solved_targets
        wp = gp.solve(kp)
        var_p_raw = s0 - np.sum(kp * wp, axis=0)
        var_p = np.clip(var_p_raw, 0.0, s0).reshape(S, M)
        mean_p = mean_p.reshape(S, M)

        dq = P - self.Q[:, None, :]
        kpq = s0 * np.exp(
            -0.5 * np.sum(dq * dq, axis=2) / hyp.theta_x**2
            - 0.5 * (float(T) - self.t_next) ** 2 / hyp.theta_t**2
        )  # (S, M)
        wp3 = wp.reshape(n, S, M)
        cn = kpq - np.einsum("nsm,ns->sm", wp3, self.kq)

        coef = self.coef[:, None]
        inv_D = self.inv_D[:, None]
        mu1 = mean_p + cn * coef * gamma
        var1_raw = var_p - cn * cn * inv_D
        var1 = np.maximum(var1_raw, 0.0)
        sd1 = np.sqrt(var1)
        value, d_mu, d_sd = value_partials(mu1, sd1, vspec, xi)
        if not grad:
            return value

        theta2 = hyp.theta_x**2
        dkp = (kp[:, :, None] * (gp.data.X[:, None, :] - Pf[None, :, :]) / theta2)  # (n, SM, d)
        dmean_p = np.einsum("n,nkd->kd", gp.solved_targets, dkp).reshape(S, M, d)
        dvar_p = (-2.0 * np.einsum("nk,nkd->kd", wp, dkp)).reshape(S, M, d)
        dkp4 = dkp.reshape(n, S, M, d)

        # derivatives of the prior cross-covariance k(p, q_s)
        dkpq_dp = -kpq[:, :, None] * dq / theta2
        dkpq_dq = -dkpq_dp

        dcn_dp = dkpq_dp - np.einsum("ns,nsmd->smd", self.wq, dkp4)
        dcn_dq = dkpq_dq - np.einsum("nsm,nsd->smd", wp3, self.dkq)

        g = gamma[:, :, None]
        cn3 = cn[:, :, None]
        coef3 = coef[:, :, None]
        invD3 = inv_D[:, :, None]

        dmu1_dp = dmean_p + dcn_dp * coef3 * g
        dmu1_dq = g * (dcn_dq * coef3 + cn3 * self.dcoef[:, None, :])

        dvar1_dp = dvar_p - 2.0 * cn3 * dcn_dp * invD3
        dvar1_dq = -2.0 * cn3 * dcn_dq * invD3 + (cn * cn * inv_D * inv_D)[:, :, None] * self.dD[:, None, :]

        active = (var1_raw > 0.0)[:, :, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            half_inv_sd = np.where(active, 0.5 / np.where(active, sd1[:, :, None], 1.0), 0.0)
        dsd_dp = dvar1_dp * half_inv_sd
        dsd_dq = dvar1_dq * half_inv_sd

        dmu3 = d_mu[:, :, None]
        dsd3 = d_sd[:, :, None]
        grad_q = dmu3 * dmu1_dq + dsd3 * dsd_dq
        grad_p = dmu3 * dmu1_dp + dsd3 * dsd_dp
        return value, grad_q, grad_p

    def candidate_values(self, C, T: float, gamma, vspec: ValueFunctionSpec,
                         xi: float = 0.0) -> np.ndarray:
        """Fantasy values on a shared candidate set ``C`` (K, d), shape (S, N, K)."""
        gp = self.gp
        hyp = gp.hyperparameters
        C = np.atleast_2d(np.asarray(C, dtype=float))
        gamma = np.asarray(gamma, dtype=float)
        kc = gp.cross_kernel(C, T)
        mean_c = gp.mean_offset + kc.T @ gp.solved_targets
        wc = gp.solve(kc)
        var_c = np.clip(hyp.output_scale - np.sum(kc * wc, axis=0), 0.0, hyp.output_scale)
        kcq = kernel_matrix(C, T, self.Q, self.t_next, hyp)  # (K, S)
        cn = (kcq - wc.T @ self.kq).T  # (S, K)
        mu1 = mean_c[None, None, :] + (cn * self.coef[:, None])[:, None, :] * gamma[None, :, None]
        if not vspec.needs_sigma:
            sd1 = np.zeros_like(mu1)
        else:
            var1 = np.maximum(var_c[None, :] - cn * cn * self.inv_D[:, None], 0.0)
            sd1 = np.broadcast_to(np.sqrt(var1)[:, None, :], mu1.shape)
        return value_partials(mu1, sd1, vspec, xi)[0]
