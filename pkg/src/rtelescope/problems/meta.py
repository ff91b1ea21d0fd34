"""Learning-rate meta-optimization on an unrolled quadratic inner loop.

The inner loop runs gradient descent on ``f(w) = 0.5 sum_k a_k (w_k - b_k)^2``
from ``w0`` with rates ``eta_t = eta0 (1 + t / tau)^-decay``. Level ``i``
unrolls ``2^i + 1`` inner steps and reports the evaluation loss
``0.5 sum_k c_k (w_k - e_k)^2``. The meta-parameters are ``(eta0, decay)``.

Each coordinate contracts as ``w_T - b = prod_t (1 - eta_t a) (w0 - b)``, which
gives an exact closed form for the meta-gradient.
"""

from __future__ import annotations

import numpy as np

from . import dual
from .base import GradientSequence
from .dual import Dual


class InnerDivergence(FloatingPointError):
    """The inner learning rate exceeds the stability bound ``2 / max(a)``."""


class QuadraticMetaProblem(GradientSequence):
    """Meta-gradient sequence over inner-loop lengths ``2^i + 1``.

    Parameters
    ----------
    dim : int
        Inner problem dimension.
    horizon : int
    tau : float
        Time scale of the rate decay.
    seed : int
        Seeds curvatures ``a`` in ``[0.5, 2]``, evaluation weights ``c``, the
        training centre, the evaluation centre (a perturbation of the
        training centre) and ``w0``.
    curvature, train_center, eval_center, eval_weight, w0 : array, optional
        Override the seeded values.
    """

    reuse = True

    def __init__(self, dim=5, horizon=10, tau=16.0, seed=0, curvature=None,
                 train_center=None, eval_center=None, eval_weight=None, w0=None,
                 initial=(0.1, 1.5)):
        rng = np.random.default_rng(seed)
        self.horizon = int(horizon)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.tau = float(tau)
        self.dim = 2
        self.inner_dim = int(dim)
        draws = {
            "a": rng.uniform(0.5, 2.0, dim),
            "c": rng.uniform(0.5, 2.0, dim),
            "b": rng.standard_normal(dim),
            "e": 0.5 * rng.standard_normal(dim),
            "w0": 2.0 * rng.standard_normal(dim),
        }
        draws["e"] = draws["e"] + draws["b"]
        self.a = np.asarray(draws["a"] if curvature is None else curvature, dtype=float)
        self.c = np.asarray(draws["c"] if eval_weight is None else eval_weight, dtype=float)
        self.b = np.asarray(draws["b"] if train_center is None else train_center, dtype=float)
        self.e = np.asarray(draws["e"] if eval_center is None else eval_center, dtype=float)
        self.w0 = np.asarray(draws["w0"] if w0 is None else w0, dtype=float)
        if np.any(self.a <= 0):
            raise ValueError("inner curvatures must be positive")
        self.inner_dim = self.a.size
        self.costs = np.array([2.0**i + 1.0 for i in range(1, self.horizon + 1)])
        self._initial = np.array(initial, dtype=float)

    def inner_steps(self, i: int) -> int:
        self._check_level(i)
        return 2**i + 1

    def initial_theta(self) -> np.ndarray:
        return self._initial.copy()

    def _schedule(self, steps: int):
        t = np.arange(steps, dtype=float)
        return np.log1p(t / self.tau)

    def rates(self, theta, steps: int) -> np.ndarray:
        eta0, decay = (float(v) for v in theta)
        return eta0 * np.exp(-decay * self._schedule(steps))

    def _check_rates(self, theta, steps):
        eta0 = float(theta[0])
        if not eta0 > 0:
            raise ValueError(f"inner rate must be positive, got {eta0}")
        top = float(np.max(self.rates(theta, steps))) * float(np.max(self.a))
        if not top < 2.0:
            raise InnerDivergence(
                f"inner rate reaches {top / np.max(self.a):.6g}, above the stability bound "
                f"{2.0 / np.max(self.a):.6g}"
            )

    def unroll(self, theta, i: int) -> Dual:
        """Evaluation loss after level ``i`` as a Dual in ``(eta0, decay)``."""
        steps = self.inner_steps(i)
        theta = np.asarray(theta, dtype=float)
        self._check_rates(theta, steps)
        th = Dual.variables(theta)
        eta0, decay = th.take(0), th.take(1)
        sched = self._schedule(steps)
        w = Dual.constant(self.w0, 2)
        for t in range(steps):
            rate = eta0 * dual.exp(decay * -sched[t])
            w = w - rate * ((w - self.b) * self.a)
        r = w - self.e
        return (r * r * self.c).sum() * 0.5

    def grad(self, theta, i, noise=None) -> np.ndarray:
        return np.array(self.unroll(theta, i).tangent)

    def loss(self, theta, i, noise=None) -> float:
        return float(closed_form_meta(self, theta, self.inner_steps(i))[0])


def closed_form_meta(problem: QuadraticMetaProblem, theta, steps: int):
    """Evaluation loss and its gradient after ``steps`` inner steps, in closed form.

    Uses ``w_T = b + prod_t f_t (w0 - b)`` with ``f_t = 1 - eta_t a`` and the
    product rule over prefix and suffix products, so zero factors are exact.
    """
    theta = np.asarray(theta, dtype=float)
    problem._check_rates(theta, steps)
    sched = problem._schedule(steps)
    rates = problem.rates(theta, steps)
    f = 1.0 - rates[:, None] * problem.a[None, :]  # (T, k)
    ones = np.ones((1, problem.inner_dim))
    prefix = np.cumprod(np.vstack([ones, f[:-1]]), axis=0)
    suffix = np.cumprod(np.vstack([ones, f[::-1][:-1]]), axis=0)[::-1]
    others = prefix * suffix  # prod over s != t
    P = prefix[-1] * f[-1]
    # d f_t / d eta0 and d f_t / d decay
    df_deta = -(rates / theta[0])[:, None] * problem.a[None, :]
    df_ddecay = (rates * sched)[:, None] * problem.a[None, :]
    dP = np.stack([np.sum(others * df_deta, axis=0), np.sum(others * df_ddecay, axis=0)])
    w = problem.b + P * (problem.w0 - problem.b)
    r = w - problem.e
    loss = 0.5 * np.sum(problem.c * r * r)
    grad = dP @ (problem.c * r * (problem.w0 - problem.b))
    return float(loss), grad
