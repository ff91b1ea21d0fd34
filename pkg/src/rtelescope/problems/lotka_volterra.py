"""Variational inference of Lotka-Volterra parameters.

Level ``i`` of the gradient sequence solves the ODE with RK4 on ``2**i + 1``
grid points and linearly interpolates to the observation times. The negative
ELBO and its gradient with respect to the 12 variational parameters are
propagated in forward mode. The fast path runs the ODE through a jitted
packed-dual RK4 kernel that mirrors :func:`rk4_solve` applied to
:func:`lv_rhs` on Dual states, and applies the remaining chain rule by hand;
the reference path uses :class:`Dual` throughout.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .base import GradientSequence
from .dual import Dual, log, reflect, sigmoid, softplus, softplus_inverse
from .rk4 import interpolate, rk4_solve

PARAM_NAMES = ("u1_0", "u2_0", "A", "B", "C", "D")
TRUE_LOW = np.array([1.0, 0.4, 0.8, 0.4, 1.5, 0.4])
TRUE_HIGH = np.array([1.5, 0.6, 1.2, 0.6, 2.0, 0.6])
PRIOR_MEAN = 0.5 * (TRUE_LOW + TRUE_HIGH)
PRIOR_STD = (TRUE_HIGH - TRUE_LOW) / math.sqrt(12.0)
INIT_STD = 0.1
OBS_STD = 0.1
T_SPAN = (0.0, 5.0)
OBS_TIMES = np.linspace(T_SPAN[0], T_SPAN[1], 5)
GROUND_TRUTH_STEPS = 10000
BLOWUP_LIMIT = 1e8
BLOWUP_LOGLIK = -1e8


def _part(x, k):
    return x.component(k) if isinstance(x, Dual) else np.asarray(x)[..., k]


def _join(a, b):
    if isinstance(a, Dual):
        return Dual.stack([a, b], axis=-1)
    return np.stack([a, b], axis=-1)


def lv_rhs(u, lam):
    """Predator-prey vector field ``(A u1 - B u1 u2, C u1 u2 - D u2)``.

    ``u`` has last axis ``(u1, u2)``; ``lam`` has last axis
    ``(u1_0, u2_0, A, B, C, D)``. Arrays and Duals both work.
    """
    u1, u2 = _part(u, 0), _part(u, 1)
    a, b, c, d = (_part(lam, k) for k in (2, 3, 4, 5))
    p = u1 * u2
    return _join(a * u1 - b * p, c * p - d * u2)


def solve_at_observations(lam, steps: int, obs_times=OBS_TIMES):
    """Generic path: RK4 on ``steps`` grid points, interpolated to ``obs_times``.

    Returns an array or Dual with shape ``(n_obs,) + lam.shape[:-1] + (2,)``.
    """
    u0 = _join(_part(lam, 0), _part(lam, 1))
    times, traj = rk4_solve(lambda t, u: lv_rhs(u, lam), u0, T_SPAN, steps, check_finite=False)
    return interpolate(times, traj, obs_times)


# jitted packed-dual kernel -------------------------------------------------
# A packed dual is a length-7 vector: value then d/d(lambda_0..lambda_5).


@njit(cache=True)
def _rhs_packed(u, p, out):
    u1 = u[0, 0]
    u2 = u[1, 0]
    a = p[2, 0]
    b = p[3, 0]
    c = p[4, 0]
    d = p[5, 0]
    prod = u1 * u2
    out[0, 0] = a * u1 - b * prod
    out[1, 0] = c * prod - d * u2
    for k in range(1, u.shape[1]):
        dprod = u[0, k] * u2 + u1 * u[1, k]
        out[0, k] = p[2, k] * u1 + a * u[0, k] - p[3, k] * prod - b * dprod
        out[1, k] = p[4, k] * prod + c * dprod - p[5, k] * u2 - d * u[1, k]


@njit(cache=True)
def _lv_observe_packed(lam, steps, t0, t1, obs_lo, obs_w):
    n, _ = lam.shape
    nobs = obs_lo.shape[0]
    width = 7
    h = (t1 - t0) / (steps - 1)
    out = np.zeros((n, nobs, 2, width))
    blown = np.zeros(n, dtype=np.bool_)
    p = np.zeros((6, width))
    u = np.zeros((2, width))
    tmp = np.zeros((2, width))
    k1 = np.zeros((2, width))
    k2 = np.zeros((2, width))
    k3 = np.zeros((2, width))
    k4 = np.zeros((2, width))
    prev = np.zeros((2, width))
    for s in range(n):
        p[:, :] = 0.0
        for j in range(6):
            p[j, 0] = lam[s, j]
            p[j, j + 1] = 1.0
        u[:, :] = 0.0
        u[0, :] = p[0, :]
        u[1, :] = p[1, :]
        o = 0
        for g in range(1, steps):
            prev[:, :] = u
            _rhs_packed(u, p, k1)
            for i in range(2):
                for k in range(width):
                    tmp[i, k] = u[i, k] + 0.5 * h * k1[i, k]
            _rhs_packed(tmp, p, k2)
            for i in range(2):
                for k in range(width):
                    tmp[i, k] = u[i, k] + 0.5 * h * k2[i, k]
            _rhs_packed(tmp, p, k3)
            for i in range(2):
                for k in range(width):
                    tmp[i, k] = u[i, k] + h * k3[i, k]
            _rhs_packed(tmp, p, k4)
            for i in range(2):
                for k in range(width):
                    u[i, k] = u[i, k] + (h / 6.0) * (k1[i, k] + 2.0 * k2[i, k] + 2.0 * k3[i, k] + k4[i, k])
            if not (abs(u[0, 0]) < 1e8 and abs(u[1, 0]) < 1e8):
                blown[s] = True
                break
            # observations bracketed by grid points g-1 and g
            while o < nobs and obs_lo[o] == g - 1:
                w = obs_w[o]
                for i in range(2):
                    for k in range(width):
                        if w == 0.0:
                            out[s, o, i, k] = prev[i, k]
                        elif w == 1.0:
                            out[s, o, i, k] = u[i, k]
                        else:
                            out[s, o, i, k] = (1.0 - w) * prev[i, k] + w * u[i, k]
                o += 1
    return out, blown


def _bracket(steps: int, obs_times):
    """Left grid index and interpolation weight for each observation time."""
    h = (T_SPAN[1] - T_SPAN[0]) / (steps - 1)
    times = T_SPAN[0] + h * np.arange(steps)
    lo = np.searchsorted(times, obs_times, side="right") - 1
    lo = np.clip(lo, 0, steps - 2)
    w = (np.asarray(obs_times) - times[lo]) / (times[lo + 1] - times[lo])
    return lo.astype(np.int64), w


def observe_with_sensitivities(lam_values, steps: int, obs_times=OBS_TIMES):
    """Fast path: states at ``obs_times`` and their derivatives w.r.t. lambda.

    Returns ``(values, jac, blown)`` with shapes ``(n, n_obs, 2)``,
    ``(n, n_obs, 2, 6)`` and ``(n,)``. Rows flagged in ``blown`` exceeded
    ``BLOWUP_LIMIT`` and carry no usable values.
    """
    lam_values = np.ascontiguousarray(lam_values, dtype=float)
    lo, w = _bracket(steps, obs_times)
    packed, blown = _lv_observe_packed(lam_values, int(steps), T_SPAN[0], T_SPAN[1], lo, w)
    return packed[..., 0], packed[..., 1:], blown


def gaussian_kl(mu_q, sd_q, mu_p, sd_p):
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    ratio = sd_q / sd_p
    diff = (mu_q - mu_p) / sd_p
    terms = -log(ratio) + 0.5 * (ratio * ratio + diff * diff) - 0.5
    return terms.sum(axis=-1)


class LotkaVolterraVIProblem(GradientSequence):
    """Negative-ELBO gradient sequence for Lotka-Volterra parameter inference.

    The dataset (true parameters and five noisy observations of both species)
    is generated from ``seed``. Parameters ``theta = (mu_raw, sd_raw)`` map
    through softplus to the variational mean and standard deviation; samples
    are ``|mu + sd * eps|``.
    """

    reuse = False

    def __init__(self, seed: int = 0, horizon: int = 8, batch_size: int = 64,
                 eval_batch_size: int = 512, include_likelihood: bool = True):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.seed = int(seed)
        self.horizon = int(horizon)
        self.batch_size = int(batch_size)
        self.eval_batch_size = int(eval_batch_size)
        self.include_likelihood = include_likelihood
        self.dim = 12
        self.costs = np.array([2.0**i + 1.0 for i in range(1, self.horizon + 1)])
        rng = np.random.default_rng(self.seed)
        self.true_params = rng.uniform(TRUE_LOW, TRUE_HIGH)
        clean = solve_at_observations(self.true_params, GROUND_TRUTH_STEPS)
        self.clean_observations = np.asarray(clean)
        self.observations = self.clean_observations + OBS_STD * rng.standard_normal(clean.shape)
        self.prior_mean = PRIOR_MEAN.copy()
        self.prior_std = PRIOR_STD.copy()

    def steps_at(self, i: int) -> int:
        self._check_level(i)
        return 2**i + 1

    def initial_theta(self) -> np.ndarray:
        return np.concatenate([softplus_inverse(self.prior_mean),
                               softplus_inverse(np.full(6, INIT_STD))])

    def sample_noise(self, rng, batch_size: int | None = None) -> np.ndarray:
        return rng.standard_normal((batch_size or self.batch_size, 6))

    def eval_noise(self, rng) -> np.ndarray:
        return self.sample_noise(rng, self.eval_batch_size)

    def grad(self, theta, i, noise=None):
        return self.negative_elbo(theta, i, noise)[1]

    def loss(self, theta, i, noise=None):
        return self.negative_elbo(theta, i, noise)[0]

    def negative_elbo(self, theta, i, noise, method: str = "kernel"):
        """Monte-Carlo negative ELBO and its gradient at level ``i``.

        ``noise`` holds the standard-normal draws, one row per sample.
        ``method="kernel"`` applies the chain rule by hand around the jitted
        ODE kernel; ``method="dual"`` propagates Duals end to end through the
        generic RK4. Both give the same numbers.
        """
        self._check_level(i)
        if noise is None:
            raise ValueError("LotkaVolterraVIProblem needs a noise batch")
        eps = np.asarray(noise, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if method == "kernel":
            return self._negative_elbo_kernel(theta, self.steps_at(i), eps)
        if method != "dual":
            raise ValueError(f"unknown method {method!r}")
        th = Dual.variables(theta)
        mu = softplus(th.take(slice(0, 6)))
        sd = softplus(th.take(slice(6, 12)))
        # lam: values (n, 6), tangents w.r.t. theta (n, 6, 12)
        lam = reflect(mu + sd * eps)
        total = gaussian_kl(mu, sd, self.prior_mean, self.prior_std)
        if self.include_likelihood:
            total = total - self._expected_loglik_dual(lam, self.steps_at(i))
        return float(total.value), np.array(total.tangent)

    def _negative_elbo_kernel(self, theta, steps, eps):
        mu_raw, sd_raw = theta[:6], theta[6:]
        mu, sd = np.logaddexp(0.0, mu_raw), np.logaddexp(0.0, sd_raw)
        dmu, dsd = sigmoid(mu_raw), sigmoid(sd_raw)
        ratio = sd / self.prior_std
        diff = (mu - self.prior_mean) / self.prior_std
        loss = float(np.sum(-np.log(ratio) + 0.5 * (ratio * ratio + diff * diff) - 0.5))
        g_mu = diff / self.prior_std
        g_sd = -1.0 / sd + ratio / self.prior_std
        if self.include_likelihood:
            x = mu + sd * eps
            sign = np.where(x >= 0.0, 1.0, -1.0)
            n = x.shape[0]
            vals, jac, blown = observe_with_sensitivities(np.abs(x), steps)
            keep = ~blown
            resid = (vals[keep] - self.observations[None]) / OBS_STD
            m = resid.shape[1] * resid.shape[2]
            const = -math.log(OBS_STD * math.sqrt(2.0 * math.pi)) * m
            ll = np.full(n, BLOWUP_LOGLIK)
            ll[keep] = -0.5 * np.sum(resid * resid, axis=(1, 2)) + const
            loss -= float(ll.sum() / n)
            # d(-mean loglik)/d lambda per sample; blown samples contribute nothing
            g_lam = np.zeros((n, 6))
            g_lam[keep] = (resid.reshape(-1, m, 1) / OBS_STD * jac[keep].reshape(-1, m, 6)).sum(axis=1) / n
            g_lam *= sign
            g_mu = g_mu + g_lam.sum(axis=0)
            g_sd = g_sd + (g_lam * eps).sum(axis=0)
        return loss, np.concatenate([g_mu * dmu, g_sd * dsd])

    def _expected_loglik_dual(self, lam: Dual, steps: int) -> Dual:
        n = lam.shape[0]
        with np.errstate(over="ignore", invalid="ignore"):
            u_obs = solve_at_observations(lam, steps)
        u = Dual(np.moveaxis(u_obs.value, 0, 1), np.moveaxis(u_obs.tangent, 0, 1))
        vals = u.value
        blown = ~np.all(np.isfinite(vals) & (np.abs(vals) < BLOWUP_LIMIT), axis=(1, 2))
        if np.any(blown):
            u = Dual(np.where(blown[:, None, None], 0.0, u.value),
                     np.where(blown[:, None, None, None], 0.0, u.tangent))
        resid = (u - self.observations[None]) / OBS_STD
        const = -math.log(OBS_STD * math.sqrt(2.0 * math.pi))
        ll = (resid * resid).sum(axis=(1, 2)) * -0.5 + const * resid.shape[1] * resid.shape[2]
        if np.any(blown):
            ll.data[blown, 0] = BLOWUP_LOGLIK
            ll.data[blown, 1:] = 0.0
        return ll.sum() * (1.0 / n)

    def export_dataset(self) -> str:
        """Plain-text record of the generated dataset."""
        lines = [f"seed {self.seed}",
                 "true_params " + " ".join(f"{name}={v:.17g}" for name, v in zip(PARAM_NAMES, self.true_params)),
                 "obs_std " + f"{OBS_STD:.17g}",
                 "t,u1,u2"]
        for t, y in zip(OBS_TIMES, self.observations):
            lines.append(f"{t:.17g},{y[0]:.17g},{y[1]:.17g}")
        return "\n".join(lines) + "\n"
