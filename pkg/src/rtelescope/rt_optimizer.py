"""Budgeted SGD driven by randomized telescope gradient estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .adaptive_tuning import (
    Q_FLOOR,
    EstimatorStats,
    SquaredDistanceTable,
    SubsequenceSelection,
    TunedEstimator,
    tune,
)
from .telescope_core import (
    TruncationDistribution,
    WeightKind,
    make_weight_scheme,
    sample_truncation,
)


@dataclass(frozen=True)
class BudgetLedger:
    spent: float = 0.0
    next_tune: float = 0.0
    tuning_frequency: int = 5

    def charge(self, amount: float) -> "BudgetLedger":
        if amount < 0:
            raise ValueError("cannot charge a negative amount")
        return replace(self, spent=self.spent + amount)


def tuning_cost(costs, reuse: bool) -> float:
    """Compute for evaluating every base level once."""
    costs = np.asarray(costs, dtype=float)
    return float(costs[-1]) if reuse else float(costs.sum())


def charge_tuning(ledger: BudgetLedger, costs, horizon: int, reuse: bool) -> BudgetLedger:
    """Charge one tuning pass and push ``next_tune`` out by ``K * C(H)``."""
    costs = np.asarray(costs, dtype=float)[:horizon]
    return replace(
        ledger,
        spent=ledger.spent + tuning_cost(costs, reuse),
        next_tune=ledger.next_tune + ledger.tuning_frequency * float(costs[horizon - 1]),
    )


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for :func:`run`.

    ``estimator`` is ``"ss"`` or ``"rr"`` (adaptive), ``"untruncated"``, or
    ``"fixed:<n>"`` for a deterministic truncation at base level ``n``.
    ``eval_every`` defaults to the cost of one full-horizon gradient.
    """

    reference_rate: float
    estimator: str = "ss"
    ema_decay: float = 0.9
    tuning_frequency: int = 5
    horizon: int | None = None
    seed: int = 0
    eval_every: float | None = None
    q_floor: float = Q_FLOOR

    def __post_init__(self):
        if not self.reference_rate > 0:
            raise ValueError("reference_rate must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if int(self.tuning_frequency) != self.tuning_frequency or self.tuning_frequency < 1:
            raise ValueError("tuning_frequency must be a positive integer")
        parse_estimator(self.estimator)

    @property
    def adaptive(self) -> bool:
        return parse_estimator(self.estimator)[0] in ("ss", "rr")


def parse_estimator(name: str):
    """Split an estimator name into ``(kind, level)``."""
    name = name.strip().lower()
    if name in ("ss", "rr"):
        return name, None
    if name == "untruncated":
        return name, None
    if name.startswith("fixed:"):
        try:
            level = int(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad fixed truncation {name!r}") from None
        if level < 1:
            raise ValueError("fixed truncation level must be >= 1")
        return "fixed", level
    raise ValueError(f"unknown estimator {name!r}")


@dataclass(frozen=True)
class TraceRecord:
    """One optimizer step, or one evaluation when ``is_eval`` is set.

    Evaluation records carry ``truncation_drawn = 0`` and the budget spent
    when the evaluation happened; step records carry ``eval_loss = nan``.
    """

    step: int
    budget_spent: float
    truncation_drawn: int
    learning_rate: float
    eval_loss: float = math.nan
    grad_evals: int = 0
    is_eval: bool = False


def _static_estimator(level: int, costs, rate: float) -> TunedEstimator:
    q = TruncationDistribution([1.0])
    W = make_weight_scheme(WeightKind.SINGLE_SAMPLE, q)
    stats = EstimatorStats(float(costs[level - 1]), math.nan)
    return TunedEstimator(SubsequenceSelection([level]), q, W, stats, rate)


def estimate_gradient(problem, theta, est: TunedEstimator, N: int, noise=None):
    """``sum_{n <= N} (G_{S[n]} - G_{S[n-1]}) W(n, N)``, evaluating only needed levels.

    Returns ``(gradient, levels_evaluated)``.
    """
    S = est.subsequence.indices
    col = est.weights.matrix[:N, N - 1]
    cache = {}

    def level(n):
        if n == 0:
            return 0.0
        if n not in cache:
            cache[n] = np.asarray(problem.grad(theta, S[n - 1], noise), dtype=float)
        return cache[n]

    g = np.zeros(problem.dim)
    for n in range(1, N + 1):
        w = col[n - 1]
        if w != 0.0:
            g = g + w * (level(n) - level(n - 1))
    return g, sorted(cache)


def run(problem, config: OptimizerConfig, budget_limit: float, eval_hook=None, theta0=None):
    """Optimize ``problem`` until at least ``budget_limit`` compute units are spent.

    Emits a :class:`TraceRecord` per step and per evaluation.
    ``eval_hook(theta)`` runs at the start, each time another ``eval_every``
    units have been spent, and once at the end; its compute is not charged.
    If the parameters stop being finite the run ends early with an
    evaluation record whose loss is ``inf``.
    """
    H = problem.horizon if config.horizon is None else int(config.horizon)
    if not 1 <= H <= problem.horizon:
        raise ValueError(f"horizon {H} outside 1..{problem.horizon}")
    costs = np.asarray(problem.costs, dtype=float)[:H]
    reuse = bool(problem.reuse)
    kind, level = parse_estimator(config.estimator)
    if kind == "fixed" and level > H:
        raise ValueError(f"fixed truncation {level} beyond horizon {H}")
    if not budget_limit > 0 or budget_limit < tuning_cost(costs, reuse):
        raise ValueError("budget smaller than one tune")

    rng = np.random.default_rng(config.seed)
    theta = np.array(problem.initial_theta() if theta0 is None else theta0, dtype=float)
    ledger = BudgetLedger(tuning_frequency=int(config.tuning_frequency))
    eval_every = float(costs[-1]) if config.eval_every is None else float(config.eval_every)
    if not eval_every > 0:
        raise ValueError("eval_every must be positive")
    next_eval = 0.0
    grad_evals = 0
    step = 0
    trace = []

    if kind == "untruncated":
        est = _static_estimator(H, costs, config.reference_rate)
    elif kind == "fixed":
        est = _static_estimator(level, costs, config.reference_rate)
    else:
        est = None
        table = SquaredDistanceTable.empty(H, config.ema_decay)
        view = _Truncated(problem, H)

    def evaluate(loss=None):
        rate = math.nan if est is None else est.learning_rate
        value = float(eval_hook(theta)) if loss is None else loss
        trace.append(TraceRecord(step, ledger.spent, 0, rate, value, grad_evals, True))

    while ledger.spent < budget_limit:
        if eval_hook is not None and ledger.spent >= next_eval:
            evaluate()
            next_eval = (math.floor(ledger.spent / eval_every) + 1) * eval_every
        if kind in ("ss", "rr") and ledger.spent >= ledger.next_tune:
            noise = problem.sample_noise(rng)
            table, est = tune(theta, table, view, config.reference_rate, kind, noise,
                              config.q_floor)
            grad_evals += H
            ledger = charge_tuning(ledger, costs, H, reuse)
        noise = problem.sample_noise(rng)
        N = sample_truncation(est.q, rng)
        g, levels = estimate_gradient(problem, theta, est, N, noise)
        grad_evals += len(levels)
        theta = theta - est.learning_rate * g
        S = est.subsequence.indices
        if reuse:
            charge = float(costs[S[N - 1] - 1])
        else:
            charge = float(sum(costs[S[n - 1] - 1] for n in levels))
        ledger = ledger.charge(charge)
        step += 1
        trace.append(TraceRecord(step, ledger.spent, N, est.learning_rate, math.nan, grad_evals))
        if not np.all(np.isfinite(theta)):
            if eval_hook is not None:
                evaluate(math.inf)
            return trace
    if eval_hook is not None:
        evaluate()
    return trace


class _Truncated:
    """View of a problem restricted to its first ``horizon`` levels."""

    def __init__(self, problem, horizon):
        self._p = problem
        self.horizon = horizon
        self.costs = np.asarray(problem.costs, dtype=float)[:horizon]
        self.reuse = problem.reuse
        self.dim = problem.dim

    def grad(self, theta, i, noise=None):
        return self._p.grad(theta, i, noise)
