from __future__ import annotations

import abc

import numpy as np


class GradientSequence(abc.ABC):
    """A sequence of gradient approximations ``G_1(theta) .. G_H(theta)``.

    Subclasses set ``horizon``, ``dim``, ``costs`` (``costs[i - 1]`` is the
    cost of level ``i``, nondecreasing) and ``reuse``, which says whether
    evaluating level ``i`` already does the work of every lower level, as with
    an unrolled loop of fixed step size.

    Stochastic problems draw their randomness through :meth:`sample_noise` so
    that one draw can be shared by every level evaluated within a step.
    """

    horizon: int
    dim: int
    costs: np.ndarray
    reuse: bool = False

    @abc.abstractmethod
    def grad(self, theta, i, noise=None) -> np.ndarray:
        """Gradient of level ``i`` (1-based)."""

    @abc.abstractmethod
    def loss(self, theta, i, noise=None) -> float:
        """Loss of level ``i``, used for evaluation."""

    @abc.abstractmethod
    def initial_theta(self) -> np.ndarray:
        ...

    def sample_noise(self, rng):
        return None

    def eval_noise(self, rng):
        return self.sample_noise(rng)

    def cost(self, i: int) -> float:
        self._check_level(i)
        return float(self.costs[i - 1])

    def _check_level(self, i: int) -> None:
        if not 1 <= i <= self.horizon:
            raise IndexError(f"level {i} outside 1..{self.horizon}")
