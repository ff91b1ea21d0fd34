"""Randomized telescope estimators.

An estimator of ``Y_H = sum_n Delta_n`` draws a truncation ``N ~ q`` and
returns ``sum_{n <= N} Delta_n W(n, N)``. It is unbiased whenever
``sum_{N >= n} W(n, N) q(N) = 1`` for every ``n``.

Indices in the public API are 1-based, as in the estimator's definition;
arrays are stored 0-based.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

PROB_SUM_TOL = 1e-12
UNBIASED_TOL = 1e-10
MAX_ENUMERATION_HORIZON = 20


class WeightKind(str, enum.Enum):
    SINGLE_SAMPLE = "ss"
    RUSSIAN_ROULETTE = "rr"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class TruncationDistribution:
    """Probability vector over truncation indices ``1..H``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float).ravel()
        if p.size == 0:
            raise ValueError("truncation distribution needs at least one entry")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def horizon(self) -> int:
        return self.probs.size

    @property
    def tail(self) -> np.ndarray:
        """``Q(n) = P(N >= n)`` for ``n = 1..H``."""
        return np.cumsum(self.probs[::-1])[::-1]

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    @classmethod
    def normalized(cls, weights) -> "TruncationDistribution":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum())

    @classmethod
    def geometric(cls, p: float, horizon: int) -> "TruncationDistribution":
        """``q(n) proportional to p**n``."""
        if not 0 < p < 1:
            raise ValueError("geometric ratio must lie in (0, 1)")
        n = np.arange(1, horizon + 1)
        return cls.normalized(p**n)

    @classmethod
    def polynomial(cls, power: float, horizon: int) -> "TruncationDistribution":
        """``q(n) proportional to n**-power``."""
        n = np.arange(1, horizon + 1, dtype=float)
        return cls.normalized(n**-power)

    @classmethod
    def uniform(cls, horizon: int) -> "TruncationDistribution":
        return cls(np.full(horizon, 1.0 / horizon))

    @classmethod
    def point_mass(cls, n: int, horizon: int) -> "TruncationDistribution":
        p = np.zeros(horizon)
        p[n - 1] = 1.0
        return cls(p)


@dataclass(frozen=True)
class WeightScheme:
    """The weight function ``W(n, N)``, stored as a dense ``H x H`` matrix.

    ``matrix[n - 1, N - 1]`` is ``W(n, N)``; entries with ``N < n`` are never
    used.
    """

    kind: WeightKind
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("weight matrix must be square")
        m = np.triu(m)
        m.setflags(write=False)
        object.__setattr__(self, "kind", WeightKind(self.kind))
        object.__setattr__(self, "matrix", m)

    @property
    def horizon(self) -> int:
        return self.matrix.shape[0]

    def weight(self, n: int, N: int) -> float:
        if n > N:
            return 0.0
        return float(self.matrix[n - 1, N - 1])

    @classmethod
    def explicit(cls, matrix) -> "WeightScheme":
        return cls(WeightKind.EXPLICIT, matrix)


def _check_support(kind: WeightKind, q: TruncationDistribution) -> None:
    p = q.probs
    if kind is WeightKind.SINGLE_SAMPLE:
        zero = np.flatnonzero(p <= 0.0)
        if zero.size:
            n = zero[0] + 1
            raise ValueError(
                f"single-sample weights need q(n) > 0 for every n; q({n}) = 0 so term {n} "
                "is never sampled and the estimator cannot be unbiased"
            )
    else:
        tail = q.tail
        zero = np.flatnonzero(tail <= 0.0)
        if zero.size:
            raise ValueError(
                f"q has a zero tail from n = {zero[0] + 1}; terms beyond it are never "
                "reached and the estimator cannot be unbiased"
            )


def make_weight_scheme(kind, q: TruncationDistribution) -> WeightScheme:
    """Build single-sample or Russian-roulette weights for ``q``.

    Single sample: ``W(n, N) = 1 / q(N)`` if ``n == N``.
    Russian roulette: ``W(n, N) = 1 / P(N >= n)`` for ``n <= N``.

    Raises ``ValueError`` when ``q`` leaves some term unreachable.
    """
    kind = WeightKind(kind)
    if kind is WeightKind.EXPLICIT:
        raise ValueError("explicit weights are built with WeightScheme.explicit")
    _check_support(kind, q)
    H = q.horizon
    if kind is WeightKind.SINGLE_SAMPLE:
        matrix = np.diag(1.0 / q.probs)
    else:
        # 1 - sum_{n' < n} q(n'), accumulated left to right
        survive = 1.0 - np.concatenate([[0.0], np.cumsum(q.probs)[:-1]])
        matrix = np.triu(np.broadcast_to((1.0 / survive)[:, None], (H, H)))
    return WeightScheme(kind, matrix)


def validate_unbiasedness_constraint(W: WeightScheme, q: TruncationDistribution):
    """Check ``sum_{N >= n} W(n, N) q(N) = 1`` for all ``n``.

    Returns ``(ok, residual)`` where ``residual`` is the largest absolute
    deviation from 1.
    """
    if W.horizon != q.horizon:
        raise ValueError(f"horizon mismatch: W has {W.horizon}, q has {q.horizon}")
    sums = W.matrix @ q.probs
    residual = float(np.max(np.abs(sums - 1.0)))
    return residual <= UNBIASED_TOL, residual


def sample_truncation(q: TruncationDistribution, rng: np.random.Generator) -> int:
    """Draw ``N ~ q`` by inverse CDF: the first ``n`` with ``u < cdf(n)``."""
    cdf = q.cdf()
    u = rng.random() * cdf[-1]
    return int(np.searchsorted(cdf, u, side="right")) + 1


@dataclass(frozen=True)
class DifferenceSequence:
    """Backward differences ``Delta_1..Delta_H`` with ``Delta_1 = Y_1``."""

    terms: np.ndarray

    def __post_init__(self):
        t = np.array(self.terms, dtype=float)
        if t.ndim == 1:
            t = t[:, None]
        if t.ndim != 2 or t.shape[0] == 0:
            raise ValueError("terms must be a nonempty (H, d) array")
        t.setflags(write=False)
        object.__setattr__(self, "terms", t)

    @classmethod
    def from_partial_sums(cls, values) -> "DifferenceSequence":
        y = np.array(values, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        return cls(np.diff(y, axis=0, prepend=np.zeros((1, y.shape[1]))))

    @property
    def horizon(self) -> int:
        return self.terms.shape[0]

    @property
    def dim(self) -> int:
        return self.terms.shape[1]

    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.terms, axis=0)

    def total(self) -> np.ndarray:
        return self.terms.sum(axis=0)


@dataclass(frozen=True)
class RtSample:
    truncation_index: int
    estimate: np.ndarray
    compute_charged: float


def draw_cost(W: WeightScheme, N: int, costs, reuse: bool) -> float:
    """Compute spent on one estimate truncated at ``N``.

    With reuse, evaluating level ``N`` covers all lower levels: ``C(N)``.
    Without it, level ``n`` is evaluated whenever it enters a weighted
    difference, i.e. ``W(n, N) != 0`` or ``W(n + 1, N) != 0``.
    """
    costs = np.asarray(costs, dtype=float)
    if reuse:
        return float(costs[N - 1])
    col = W.matrix[:N, N - 1] != 0.0
    needed = col.copy()
    needed[:-1] |= col[1:]
    return float(costs[:N][needed].sum())


def _check_shapes(deltas: DifferenceSequence, W: WeightScheme, q: TruncationDistribution):
    if not deltas.horizon == W.horizon == q.horizon:
        raise ValueError(
            f"horizon mismatch: deltas {deltas.horizon}, W {W.horizon}, q {q.horizon}"
        )


def estimate_at(deltas: DifferenceSequence, W: WeightScheme, N: int) -> np.ndarray:
    return W.matrix[:N, N - 1] @ deltas.terms[:N]


def rt_estimate(deltas: DifferenceSequence, W: WeightScheme, q: TruncationDistribution,
                rng: np.random.Generator, costs=None, reuse: bool = True) -> RtSample:
    """One randomized-telescope draw.

    ``costs`` defaults to ``C(n) = n``.
    """
    _check_shapes(deltas, W, q)
    if costs is None:
        costs = np.arange(1, q.horizon + 1, dtype=float)
    N = sample_truncation(q, rng)
    return RtSample(N, estimate_at(deltas, W, N), draw_cost(W, N, costs, reuse))


@dataclass(frozen=True)
class ExactMoments:
    mean: np.ndarray
    expected_squared_norm: float
    expected_compute: float
    costs: np.ndarray
    reuse: bool

    @property
    def variance(self) -> float:
        """Trace of the covariance, ``E||G||^2 - ||E G||^2``."""
        return self.expected_squared_norm - float(self.mean @ self.mean)


def enumerate_exact_moments(deltas: DifferenceSequence, W: WeightScheme,
                            q: TruncationDistribution, costs=None,
                            reuse: bool = True) -> ExactMoments:
    """Exact mean, second moment and expected compute by summing over ``N``."""
    _check_shapes(deltas, W, q)
    H = q.horizon
    if H > MAX_ENUMERATION_HORIZON:
        raise ValueError(f"enumeration limited to H <= {MAX_ENUMERATION_HORIZON}, got {H}")
    costs = np.arange(1, H + 1, dtype=float) if costs is None else np.asarray(costs, dtype=float)
    mean = np.zeros(deltas.dim)
    second = 0.0
    compute = 0.0
    for N in range(1, H + 1):
        pN = q.probs[N - 1]
        if pN == 0.0:
            continue
        est = estimate_at(deltas, W, N)
        mean += pN * est
        second += pN * float(est @ est)
        compute += pN * draw_cost(W, N, costs, reuse)
    return ExactMoments(mean, second, compute, costs, reuse)
