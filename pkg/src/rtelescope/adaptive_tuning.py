"""Online tuning of randomized telescope estimators.

The tuner keeps exponential moving averages of squared distances between the
base gradient levels, picks a subsequence of levels, and sets the sampling
distribution, weights and learning rate so as to maximise the relative
optimization efficiency ``1 / (E[compute] * E||G||^2)``.

Squared-norm formulas: with ``d_i`` the squared distance between consecutive
levels of the chosen subsequence (level 0 is the zero gradient),

* single sample: ``E||G||^2 = sum_i d_i / q(i)``
* Russian roulette, independent differences: ``E||G||^2 = sum_i d_i / Q(i)``

where ``Q(i) = P(N >= i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .telescope_core import (
    TruncationDistribution,
    WeightKind,
    WeightScheme,
    make_weight_scheme,
)

Q_FLOOR = 1e-6


@dataclass(frozen=True)
class SquaredDistanceTable:
    """EMA estimates ``values[i, j] ~ E||G_i - G_j||^2`` for levels ``0..H``.

    ``initialized[i, j]`` is false until the pair has been observed once; the
    first observation is stored as is.
    """

    values: np.ndarray
    decay: float
    initialized: np.ndarray

    @classmethod
    def empty(cls, horizon: int, decay: float = 0.9) -> "SquaredDistanceTable":
        if not 0.0 < decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
        n = horizon + 1
        init = np.eye(n, dtype=bool)
        return cls(np.zeros((n, n)), float(decay), init)

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def consecutive(self, subsequence) -> np.ndarray:
        """``d_i = values[S[i-1], S[i]]`` with ``S[0] = 0``."""
        s = np.concatenate([[0], np.asarray(list(subsequence), dtype=int)])
        return self.values[s[:-1], s[1:]]


def update_distances(table: SquaredDistanceTable, gradients) -> SquaredDistanceTable:
    """Fold one set of gradients ``G_1..G_H`` into the table.

    Returns a new table; ``table`` is left untouched.
    """
    g = np.asarray(gradients, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[0] != table.horizon:
        raise ValueError(f"expected {table.horizon} gradients, got {g.shape[0]}")
    levels = np.vstack([np.zeros((1, g.shape[1])), g])
    # direct differences; the Gram expansion loses precision for close levels
    diff = levels[:, None, :] - levels[None, :, :]
    fresh = np.einsum("ijk,ijk->ij", diff, diff)
    a = table.decay
    values = np.where(table.initialized, a * table.values + (1.0 - a) * fresh, fresh)
    np.fill_diagonal(values, 0.0)
    return replace(table, values=values, initialized=np.ones_like(table.initialized))


def optimal_q_ss(delta_norms, costs, floor: float = Q_FLOOR) -> TruncationDistribution:
    """Single-sample optimum ``q(n) proportional to sqrt(E||Delta_n||^2 / C(n))``.

    Entries are floored at ``floor`` after normalising, then renormalised, so
    that no term becomes unreachable when its estimate is zero.
    """
    d = np.asarray(delta_norms, dtype=float)
    c = np.asarray(costs, dtype=float)
    if d.shape != c.shape:
        raise ValueError("delta_norms and costs must have the same length")
    if np.any(d < 0) or np.any(c <= 0):
        raise ValueError("need nonnegative norms and positive costs")
    if not np.any(d > 0):
        raise ValueError("all squared norms are zero; no optimal q exists")
    q = np.sqrt(d / c)
    q = np.maximum(q / q.sum(), floor)
    return TruncationDistribution(q / q.sum())


def _monotone_tail(d, inc):
    """Minimise ``(sum inc_i Q_i) * (sum d_i / Q_i)`` over nonincreasing ``Q``.

    Pool-adjacent-violators on the unconstrained optimum
    ``sqrt(d_i / inc_i)``: a pooled block behaves like one term with summed
    ``d`` and ``inc``.
    """
    blocks = []  # [sum_d, sum_inc, length]
    for di, ci in zip(d, inc):
        blocks.append([di, ci, 1])
        while len(blocks) > 1 and (
            blocks[-1][0] / blocks[-1][1] > blocks[-2][0] / blocks[-2][1]
        ):
            bd, bc, bn = blocks.pop()
            blocks[-1][0] += bd
            blocks[-1][1] += bc
            blocks[-1][2] += bn
    out = []
    for bd, bc, bn in blocks:
        out.extend([np.sqrt(bd / bc)] * bn)
    return np.array(out)


def optimal_q_rr(delta_norms, costs, floor: float = Q_FLOOR) -> TruncationDistribution:
    """Russian-roulette optimum under independent differences.

    The tail probabilities follow ``Q(i) proportional to
    sqrt(E||Delta_i||^2 / (C(i) - C(i-1)))`` with ``C(0) = 0``, restricted to
    nonincreasing ``Q`` and scaled so ``Q(1) = 1``. Tails are floored at
    ``floor`` and ``q(i) = Q(i) - Q(i+1)``.
    """
    d = np.asarray(delta_norms, dtype=float)
    c = np.asarray(costs, dtype=float)
    if d.shape != c.shape:
        raise ValueError("delta_norms and costs must have the same length")
    if np.any(d < 0):
        raise ValueError("squared norms must be nonnegative")
    inc = np.diff(c, prepend=0.0)
    if np.any(inc <= 0):
        raise ValueError("costs must be positive and strictly increasing")
    if not np.any(d > 0):
        raise ValueError("all squared norms are zero; no optimal q exists")
    Q = _monotone_tail(d, inc)
    Q = np.maximum(Q / Q[0], floor)
    Q[0] = 1.0
    q = Q - np.append(Q[1:], 0.0)
    return TruncationDistribution(q / q.sum())


def truncation_costs(level_costs, kind, reuse: bool) -> np.ndarray:
    """Expected-compute contribution of each truncation index.

    ``level_costs[i]`` is the cost of the ``i``-th level of the subsequence.
    With reuse every draw costs its top level. Without reuse a single-sample
    draw evaluates levels ``N`` and ``N - 1``; a Russian-roulette draw
    evaluates every level up to ``N``.
    """
    c = np.asarray(level_costs, dtype=float)
    kind = WeightKind(kind)
    if reuse:
        return c.copy()
    if kind is WeightKind.SINGLE_SAMPLE:
        return c + np.concatenate([[0.0], c[:-1]])
    return np.cumsum(c)


@dataclass(frozen=True)
class SubsequenceSelection:
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise ValueError("subsequence must be nonempty")
        if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 1:
            raise ValueError(f"subsequence must be strictly increasing positive levels: {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    @property
    def last(self) -> int:
        return self.indices[-1]


@dataclass(frozen=True)
class EstimatorStats:
    expected_compute: float
    expected_squared_norm: float

    @property
    def roe(self) -> float:
        return 1.0 / (self.expected_compute * self.expected_squared_norm)


@dataclass(frozen=True)
class TunedEstimator:
    subsequence: SubsequenceSelection
    q: TruncationDistribution
    weights: WeightScheme
    stats: EstimatorStats
    learning_rate: float


def _subsequence_costs(costs, S) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    return costs[np.asarray(list(S), dtype=int) - 1]


def compute_and_variance(table: SquaredDistanceTable, costs, S, kind,
                         q: TruncationDistribution, reuse: bool = True) -> EstimatorStats:
    """Expected compute and squared norm of an estimator over subsequence ``S``.

    ``costs`` are the base-level costs ``C(1..H)``.
    """
    kind = WeightKind(kind)
    S = tuple(S)
    if q.horizon != len(S):
        raise ValueError(f"q has {q.horizon} entries for a subsequence of length {len(S)}")
    d = table.consecutive(S)
    compute = float(q.probs @ truncation_costs(_subsequence_costs(costs, S), kind, reuse))
    if kind is WeightKind.SINGLE_SAMPLE:
        denom = q.probs
    elif kind is WeightKind.RUSSIAN_ROULETTE:
        denom = q.tail
    else:
        raise ValueError("compute_and_variance needs single-sample or Russian-roulette weights")
    bad = (denom <= 0) & (d > 0)
    if np.any(bad):
        raise ValueError(f"zero probability on positions {np.flatnonzero(bad) + 1} with positive squared distance")
    active = d > 0
    sq_norm = float(np.sum(d[active] / denom[active]))
    return EstimatorStats(compute, sq_norm)


def optimal_q(table: SquaredDistanceTable, costs, S, kind, reuse: bool = True,
              floor: float = Q_FLOOR) -> TruncationDistribution:
    """Closed-form q for ``kind`` over ``S`` using the per-truncation costs."""
    kind = WeightKind(kind)
    d = table.consecutive(S)
    tc = truncation_costs(_subsequence_costs(costs, S), kind, reuse)
    if kind is WeightKind.SINGLE_SAMPLE:
        return optimal_q_ss(d, tc, floor)
    if kind is WeightKind.RUSSIAN_ROULETTE:
        return optimal_q_rr(d, tc, floor)
    raise ValueError("optimal q needs single-sample or Russian-roulette weights")


def sequence_cost(table: SquaredDistanceTable, costs, S, kind, reuse: bool = True,
                  floor: float = Q_FLOOR) -> float:
    """Inverse ROE of the optimally weighted estimator over ``S``; lower is better.

    A subsequence whose squared distances are all zero costs 0.
    """
    if not np.any(table.consecutive(S) > 0):
        return 0.0
    q = optimal_q(table, costs, S, kind, reuse, floor)
    stats = compute_and_variance(table, costs, S, kind, q, reuse)
    return stats.expected_compute * stats.expected_squared_norm


def greedy_subsequence_select(table: SquaredDistanceTable, costs, kind="ss",
                              reuse: bool = True, floor: float = Q_FLOOR) -> SubsequenceSelection:
    """Greedy search over subsequences ending at the top level.

    Runs greedy adding from ``[H]`` and greedy removal from ``[1..H]``; each
    scan takes the first improving move in increasing index order and starts
    over. The cheaper finalist wins, ``[H]``-side on ties.
    """
    H = table.horizon

    def cost(S):
        return sequence_cost(table, costs, S, kind, reuse, floor)

    plus = [H]
    best_plus = cost(plus)
    improved = True
    while improved:
        improved = False
        for i in range(1, H):
            if i in plus:
                continue
            trial = sorted(plus + [i])
            c = cost(trial)
            if c < best_plus:
                plus, best_plus, improved = trial, c, True
                break

    minus = list(range(1, H + 1))
    best_minus = cost(minus)
    improved = True
    while improved:
        improved = False
        for i in minus[:-1]:
            trial = [j for j in minus if j != i]
            c = cost(trial)
            if c < best_minus:
                minus, best_minus, improved = trial, c, True
                break

    return SubsequenceSelection(minus if best_minus < best_plus else plus)


def scale_learning_rate(reference_rate: float, reference_squared_norm: float,
                        estimator_squared_norm: float) -> float:
    """``reference_rate * reference_squared_norm / estimator_squared_norm``.

    Noisier estimators get proportionally smaller steps.
    """
    if reference_rate <= 0 or reference_squared_norm <= 0 or estimator_squared_norm <= 0:
        raise ValueError("learning-rate scaling needs positive inputs")
    return reference_rate * reference_squared_norm / estimator_squared_norm


def build_estimator(table: SquaredDistanceTable, costs, S, kind, reference_rate: float,
                    reuse: bool = True, floor: float = Q_FLOOR) -> TunedEstimator:
    """Fully specified estimator over ``S`` from the current table."""
    kind = WeightKind(kind)
    S = SubsequenceSelection(S)
    H = table.horizon
    d = table.consecutive(S)
    if len(S) == 1 or not np.any(d > 0):
        # untruncated estimator; nothing to randomize
        if not np.any(d > 0):
            S = SubsequenceSelection([H])
        q = TruncationDistribution([1.0])
        W = make_weight_scheme(kind, q)
        stats = EstimatorStats(float(np.asarray(costs, dtype=float)[S.last - 1]),
                               float(table.values[0, S.last]))
        return TunedEstimator(S, q, W, stats, float(reference_rate))
    q = optimal_q(table, costs, S, kind, reuse, floor)
    W = make_weight_scheme(kind, q)
    stats = compute_and_variance(table, costs, S, kind, q, reuse)
    ref = float(table.values[0, H])
    if ref > 0 and stats.expected_squared_norm > 0:
        lr = scale_learning_rate(reference_rate, ref, stats.expected_squared_norm)
    else:
        lr = float(reference_rate)
    return TunedEstimator(S, q, W, stats, lr)


def tune(theta, table: SquaredDistanceTable, problem, reference_rate: float, kind="ss",
         noise=None, floor: float = Q_FLOOR):
    """Evaluate every base level at ``theta``, update the table, re-fit the estimator.

    Returns ``(new_table, TunedEstimator)``.
    """
    H = table.horizon
    grads = np.array([problem.grad(theta, i, noise) for i in range(1, H + 1)])
    table = update_distances(table, grads)
    S = greedy_subsequence_select(table, problem.costs, kind, problem.reuse, floor)
    est = build_estimator(table, problem.costs, S, kind, reference_rate, problem.reuse, floor)
    return table, est
