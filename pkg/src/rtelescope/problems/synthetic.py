"""Quadratic problems whose gradient levels converge at a prescribed rate.

Level ``i`` returns ``G_i(theta) = A (theta - theta_star) - T_i`` with tail
``T_i = sum_{m > i} psi_m u_m`` over unit vectors ``u_m``, so that
``G_H`` is the exact gradient of ``0.5 (theta - theta_star)^T A (theta - theta_star)``
and ``||G_i - G_{i-1}|| = psi_i`` for ``i >= 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import special

from ..telescope_core import DifferenceSequence
from .base import GradientSequence

HARMONIC_DIRECT_LIMIT = 10_000_000


def decay_profile(mode: str, p: float, c: float, horizon: int) -> np.ndarray:
    """``psi_n`` for ``n = 1..horizon``: ``c n^-p`` or ``c p^n``."""
    n = np.arange(1, horizon + 1, dtype=float)
    if mode == "polynomial":
        if not p > 0:
            raise ValueError("polynomial decay needs p > 0")
        return c * n**-p
    if mode == "geometric":
        if not 0 < p < 1:
            raise ValueError("geometric decay needs 0 < p < 1")
        return c * p**n
    raise ValueError(f"unknown decay mode {mode!r}")


def generalized_harmonic(horizon, order: float) -> float:
    """``sum_{n=1}^{H} n^-order``; ``horizon=None`` or ``inf`` gives the limit.

    The infinite limit exists only for ``order > 1`` and equals the Riemann
    zeta function.
    """
    if horizon is None or horizon == math.inf:
        if order <= 1:
            raise ValueError(f"harmonic series of order {order} diverges")
        return float(special.zeta(order))
    H = int(horizon)
    if H < 1:
        raise ValueError("horizon must be >= 1")
    if H <= HARMONIC_DIRECT_LIMIT:
        # smallest terms first
        n = np.arange(H, 0, -1, dtype=float)
        return float(np.sum(n**-order))
    if order > 1:
        return float(special.zeta(order) - special.zeta(order, H + 1))
    if order == 1:
        return float(special.digamma(H + 1) + np.euler_gamma)
    raise ValueError(f"horizon {H} too large for direct summation at order {order}")


def decay_bounds(mode: str, p: float, c: float, horizon):
    """Upper bounds ``(expected_compute, expected_squared_norm)`` for RT-SS.

    Polynomial decay with ``q ~ n^-(p + 1/2)``: ``Z^2`` and ``c^2 Z^2`` with
    ``Z`` the generalized harmonic number of order ``p - 1/2``. Geometric
    decay with ``q ~ p^n``: ``(1 - p)^-2`` and ``c^2 (1 - p)^-2``.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    if mode == "polynomial":
        if not p > 0:
            raise ValueError("polynomial decay needs p > 0")
        z2 = generalized_harmonic(horizon, p - 0.5) ** 2
    elif mode == "geometric":
        if not 0 < p < 1:
            raise ValueError("geometric decay needs 0 < p < 1")
        z2 = (1.0 - p) ** -2
    else:
        raise ValueError(f"unknown decay mode {mode!r}")
    return z2, c * c * z2


def level_costs(schedule: str, horizon: int) -> np.ndarray:
    i = np.arange(1, horizon + 1, dtype=float)
    if schedule == "linear":
        return i
    if schedule == "doubling":
        return 2.0**i
    raise ValueError(f"unknown cost schedule {schedule!r}")


class SyntheticDecayProblem(GradientSequence):
    """Seeded quadratic with gradient levels converging at rate ``psi``.

    Parameters
    ----------
    mode : {"polynomial", "geometric"}
    p, c : float
        Decay parameters of ``psi_n``.
    dim, horizon : int
    seed : int
        Seeds the curvature ``A`` (eigenvalues in ``[0.5, 2]``), ``theta_star``
        and the directions ``u_m``.
    cost_schedule : {"linear", "doubling"}
        ``C(i) = i`` or ``C(i) = 2^i``.
    reuse : bool
    """

    def __init__(self, mode="geometric", p=0.5, c=1.0, dim=4, horizon=30, seed=0,
                 cost_schedule="linear", reuse=True):
        if horizon < 1 or dim < 1:
            raise ValueError("horizon and dim must be >= 1")
        self.mode = mode
        self.p = float(p)
        self.c = float(c)
        self.dim = int(dim)
        self.horizon = int(horizon)
        self.seed = seed
        self.reuse = bool(reuse)
        self.costs = level_costs(cost_schedule, self.horizon)
        self.psi = decay_profile(mode, self.p, self.c, self.horizon)

        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
        eig = rng.uniform(0.5, 2.0, self.dim)
        self.A = (basis * eig) @ basis.T
        self.theta_star = rng.standard_normal(self.dim)
        u = rng.standard_normal((self.horizon, self.dim))
        self.directions = u / np.linalg.norm(u, axis=1, keepdims=True)
        # tails[i] = T_i for i = 0..H, T_H = 0
        steps = self.psi[:, None] * self.directions
        self.tails = np.zeros((self.horizon + 1, self.dim))
        self.tails[:-1] = np.cumsum(steps[::-1], axis=0)[::-1]

    def initial_theta(self) -> np.ndarray:
        return np.zeros(self.dim)

    def grad(self, theta, i, noise=None) -> np.ndarray:
        self._check_level(i)
        theta = np.asarray(theta, dtype=float)
        return self.A @ (theta - self.theta_star) - self.tails[i]

    def loss(self, theta, i, noise=None) -> float:
        """Loss whose gradient is level ``i``; level ``H`` has minimum 0."""
        self._check_level(i)
        r = np.asarray(theta, dtype=float) - self.theta_star
        return float(0.5 * r @ self.A @ r - np.asarray(theta) @ self.tails[i])

    def limit_loss(self, theta) -> float:
        return self.loss(theta, self.horizon)

    def gradients(self, theta) -> np.ndarray:
        """All levels ``G_1..G_H`` stacked as rows."""
        theta = np.asarray(theta, dtype=float)
        return (self.A @ (theta - self.theta_star))[None, :] - self.tails[1:]

    def deltas(self, theta) -> DifferenceSequence:
        return DifferenceSequence.from_partial_sums(self.gradients(theta))


@njit(cache=True)
def _ogd_kernel(A, theta_star, tails, draws, inv_q, costs, rate0, radius, theta0):
    # single-sample estimate: Delta_N / q(N); Delta_1 = G_1
    d = theta0.size
    steps = draws.size
    theta = theta0.copy()
    spent = np.empty(steps)
    regret = np.empty(steps)
    total = 0.0
    for t in range(steps):
        N = draws[t]
        r = theta - theta_star
        g = np.empty(d)
        if N == 1:
            g[:] = (A @ r - tails[1]) * inv_q[0]
        else:
            g[:] = (tails[N - 1] - tails[N]) * inv_q[N - 1]
        theta = theta - rate0 / np.sqrt(t + 1.0) * g
        norm = np.sqrt(np.sum(theta * theta))
        if norm > radius:
            theta = theta * (radius / norm)
        total += costs[N - 1]
        spent[t] = total
        r = theta - theta_star
        regret[t] = 0.5 * (r @ (A @ r))
    return spent, regret


@dataclass(frozen=True)
class RegretTrace:
    budget: np.ndarray
    regret: np.ndarray


def online_gradient_descent_regret(problem: SyntheticDecayProblem, q, budget: float,
                                   seed: int = 0, radius: float | None = None,
                                   squared_norm_bound: float | None = None) -> RegretTrace:
    """Projected online gradient descent driven by RT-SS estimates.

    Step size ``D / (sqrt(t) * G2)`` with ``D`` the diameter of the ball of
    ``radius`` about the origin and ``G2`` the squared-norm bound of the
    estimator (defaults to the decay-rate bound). Returns the instantaneous
    regret of the limit loss after each step, against cumulative compute.
    """
    probs = np.asarray(getattr(q, "probs", q), dtype=float)
    if probs.size != problem.horizon or np.any(probs <= 0):
        raise ValueError("q must be strictly positive over the problem horizon")
    if radius is None:
        radius = 2.0 * float(np.linalg.norm(problem.theta_star)) + 1.0
    if radius < np.linalg.norm(problem.theta_star):
        raise ValueError("projection ball must contain the minimiser")
    if squared_norm_bound is None:
        squared_norm_bound = decay_bounds(problem.mode, problem.p, problem.c, problem.horizon)[1]
    rng = np.random.default_rng(seed)
    mean_cost = float(probs @ problem.costs)
    # enough draws to exhaust the budget with overwhelming probability
    steps = int(budget / mean_cost * 1.2) + 1000
    draws = np.searchsorted(np.cumsum(probs), rng.random(steps) * probs.sum(), side="right") + 1
    rate0 = 2.0 * radius / squared_norm_bound
    spent, regret = _ogd_kernel(problem.A, problem.theta_star, problem.tails,
                                draws.astype(np.int64), 1.0 / probs, problem.costs,
                                rate0, radius, problem.initial_theta())
    keep = spent <= budget
    if keep.all():
        raise RuntimeError("draw buffer exhausted before the budget")
    return RegretTrace(spent[keep], regret[keep])


def regret_slope(traces, budget: float, decades: float = 2.0, bins: int = 40) -> float:
    """Log-log slope of seed-averaged regret against compute.

    Regret is averaged within log-spaced budget bins over the final
    ``decades`` of ``budget`` and across traces, then fitted by least squares.
    """
    edges = np.geomspace(budget / 10**decades, budget, bins + 1)
    centers, means = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        vals = [tr.regret[(tr.budget >= lo) & (tr.budget < hi)] for tr in traces]
        vals = np.concatenate(vals)
        if vals.size:
            centers.append(np.sqrt(lo * hi))
            means.append(vals.mean())
    slope, _ = np.polyfit(np.log(centers), np.log(means), 1)
    return float(slope)
