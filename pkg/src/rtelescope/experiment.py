"""Experiment grids over (problem, estimator, seed) with CSV output.

Configs are flat ``key = value`` text files; ``#`` starts a comment. Later
assignments, including command-line overrides, win.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .problems.lotka_volterra import LotkaVolterraVIProblem
from .problems.meta import QuadraticMetaProblem
from .problems.synthetic import SyntheticDecayProblem
from .rt_optimizer import OptimizerConfig, parse_estimator, run

PROBLEMS = ("synthetic", "lotka_volterra", "quadratic_meta")
TRACE_COLUMNS = ("step", "budget_spent", "truncation_drawn", "learning_rate", "eval_loss",
                 "grad_evals")
SUMMARY_COLUMNS = ("estimator", "budget_checkpoint", "mean_loss", "std_loss")
CHECKPOINT_FRACTIONS = tuple(2.0**-k for k in range(6, -1, -1))
GRID_MANTISSAS = (1.0, 2.2, 5.5)
GRID_EXPONENTS = (0, 1, 2, 3, 5)


class ConfigError(ValueError):
    pass


def default_rate_grid():
    """All ``a * 10^-b`` for the default mantissas and exponents, ascending."""
    return sorted(a * 10.0**-b for a in GRID_MANTISSAS for b in GRID_EXPONENTS)


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _names(text):
    return tuple(v.strip().lower() for v in str(text).split(",") if v.strip())


def _optional_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _optional_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an experiment grid.

    ``reference_rate = None`` selects the problem default; ``data_seed = None``
    ties the problem instance to each run's seed. ``eval_every = None``
    evaluates every ``budget_limit / 128`` units.
    """

    problem: str = "synthetic"
    estimators: tuple = ("untruncated", "fixed:4", "fixed:6", "ss")
    seeds: tuple = (0, 1, 2, 3, 4)
    budget_limit: float = 1e5
    reference_rate: float | None = None
    tuning_frequency: int = 5
    ema_decay: float = 0.9
    horizon: int | None = None
    eval_every: float | None = None
    q_floor: float = 1e-6
    data_seed: int | None = None
    output_dir: str = "results"
    # grid search
    grid_rates: tuple = ()
    grid_budget: float | None = None
    # synthetic
    decay_mode: str = "geometric"
    decay_p: float = 0.5
    decay_c: float = 1.0
    dim: int = 4
    cost_schedule: str = "linear"
    reuse: bool = True
    # lotka_volterra
    batch_size: int = 64
    eval_batch_size: int = 512
    # quadratic_meta
    tau: float = 16.0

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if not self.estimators:
            raise ConfigError("estimators must not be empty")
        for name in self.estimators:
            try:
                parse_estimator(name)
            except ValueError as exc:
                raise ConfigError(f"estimators: {exc}") from None
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.budget_limit >= 0:
            raise ConfigError("budget_limit must be nonnegative")
        if self.reference_rate is not None and not self.reference_rate > 0:
            raise ConfigError("reference_rate must be positive")


_PARSERS = {
    "problem": lambda v: str(v).strip().lower(),
    "estimators": _names,
    "seeds": _ints,
    "budget_limit": float,
    "reference_rate": _optional_float,
    "tuning_frequency": int,
    "ema_decay": float,
    "horizon": _optional_int,
    "eval_every": _optional_float,
    "q_floor": float,
    "data_seed": _optional_int,
    "output_dir": lambda v: str(v).strip(),
    "grid_rates": _floats,
    "grid_budget": _optional_float,
    "decay_mode": lambda v: str(v).strip().lower(),
    "decay_p": float,
    "decay_c": float,
    "dim": int,
    "cost_schedule": lambda v: str(v).strip().lower(),
    "reuse": _bool,
    "batch_size": int,
    "eval_batch_size": int,
    "tau": float,
}
assert set(_PARSERS) == {f.name for f in fields(ExperimentConfig)}

DEFAULT_RATES = {"synthetic": 0.1, "lotka_volterra": 0.01, "quadratic_meta": 1e-3}
DEFAULT_HORIZONS = {"synthetic": 30, "lotka_volterra": 8, "quadratic_meta": 10}


def parse_assignments(lines, source="config"):
    """Parse ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r} ({source}:{lineno})")
        out[key] = value
    return out


def build_config(assignments: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for key, raw in assignments.items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _PARSERS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    return replace(base or ExperimentConfig(), **values)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides in order."""
    assignments = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            assignments.update(parse_assignments(fh, source=str(path)))
    assignments.update(parse_assignments(overrides, source="--set"))
    return build_config(assignments)


def format_number(x) -> str:
    """17 significant digits in positional notation; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return np.format_float_positional(x, precision=17, unique=False, fractional=False, trim="-")


def make_problem(cfg: ExperimentConfig, seed: int):
    data_seed = seed if cfg.data_seed is None else cfg.data_seed
    H = cfg.horizon or DEFAULT_HORIZONS[cfg.problem]
    if cfg.problem == "synthetic":
        return SyntheticDecayProblem(cfg.decay_mode, cfg.decay_p, cfg.decay_c, cfg.dim, H,
                                     data_seed, cfg.cost_schedule, cfg.reuse)
    if cfg.problem == "lotka_volterra":
        return LotkaVolterraVIProblem(data_seed, H, cfg.batch_size, cfg.eval_batch_size)
    return QuadraticMetaProblem(horizon=H, tau=cfg.tau, seed=data_seed)


def make_eval_hook(problem, seed: int):
    """Full-horizon loss; stochastic problems use one fixed evaluation batch per seed."""
    noise = problem.eval_noise(np.random.default_rng([seed, 1]))
    H = problem.horizon

    def hook(theta):
        try:
            value = problem.loss(theta, H, noise)
        except (FloatingPointError, ValueError):
            return math.inf
        return value if math.isfinite(value) else math.inf

    return hook


def run_single(cfg: ExperimentConfig, estimator: str, seed: int, reference_rate=None,
               budget=None, problem=None):
    """Trace of one (estimator, seed) run.

    ``problem`` replaces the instance built from ``cfg`` when given.
    """
    problem = make_problem(cfg, seed) if problem is None else problem
    rate = reference_rate or cfg.reference_rate or DEFAULT_RATES[cfg.problem]
    budget = cfg.budget_limit if budget is None else budget
    opt = OptimizerConfig(
        reference_rate=rate,
        estimator=estimator,
        ema_decay=cfg.ema_decay,
        tuning_frequency=cfg.tuning_frequency,
        horizon=problem.horizon,
        seed=seed,
        eval_every=cfg.eval_every or budget / 128.0,
        q_floor=cfg.q_floor,
    )
    return run(problem, opt, budget, make_eval_hook(problem, seed))


def trace_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in trace:
        writer.writerow([format_number(r.step), format_number(r.budget_spent),
                         format_number(r.truncation_drawn), format_number(r.learning_rate),
                         format_number(r.eval_loss), format_number(r.grad_evals)])
    return buf.getvalue()


def read_trace_csv(path):
    """Columns of a trace CSV as float arrays."""
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in TRACE_COLUMNS}


def loss_at(budget_spent, eval_loss, checkpoint: float) -> float:
    """Evaluation loss when ``checkpoint`` units had first been spent.

    Takes the first evaluation at or beyond the checkpoint, or the last
    evaluation if the run ended before reaching it.
    """
    budget_spent = np.asarray(budget_spent, dtype=float)
    eval_loss = np.asarray(eval_loss, dtype=float)
    mask = ~np.isnan(eval_loss)
    b, v = budget_spent[mask], eval_loss[mask]
    if b.size == 0:
        return math.nan
    idx = np.flatnonzero(b >= checkpoint)
    return float(v[idx[0]] if idx.size else v[-1])


def summarize(traces: dict, budget_limit: float):
    """Rows ``(estimator, checkpoint, mean, std)`` across seeds.

    ``traces`` maps estimator name to a list of ``(budget_spent, eval_loss)``
    array pairs, one per seed. Standard deviations are population (ddof=0).
    """
    rows = []
    for est, runs in traces.items():
        for frac in CHECKPOINT_FRACTIONS:
            c = budget_limit * frac
            losses = np.array([loss_at(b, v, c) for b, v in runs])
            if np.all(np.isfinite(losses)):
                mean, std = float(np.mean(losses)), float(np.std(losses))
            else:
                mean, std = math.inf, math.nan
            rows.append((est, c, mean, std))
    return rows


def summary_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for est, c, mean, std in rows:
        writer.writerow([est, format_number(c), format_number(mean), format_number(std)])
    return buf.getvalue()


def estimator_tag(name: str) -> str:
    return name.replace(":", "")


def trace_filename(problem: str, estimator: str, seed: int) -> str:
    return f"{problem}__{estimator_tag(estimator)}__seed{seed}.csv"


def summary_filename(problem: str) -> str:
    return f"{problem}__summary.csv"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def run_experiment(cfg: ExperimentConfig, output_dir=None, reference_rate=None, progress=None):
    """Run every (estimator, seed) pair and write trace and summary CSVs.

    Returns the list of written paths, summary last.
    """
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    paths = []
    collected = {}
    for est in cfg.estimators:
        collected[est] = []
        for seed in cfg.seeds:
            trace = run_single(cfg, est, seed, reference_rate)
            path = os.path.join(out, trace_filename(cfg.problem, est, seed))
            _write(path, trace_csv(trace))
            paths.append(path)
            # re-read so the summary is computed from exactly what was written
            cols = read_trace_csv(path)
            collected[est].append((cols["budget_spent"], cols["eval_loss"]))
            if progress is not None:
                progress(est, seed, trace)
    path = os.path.join(out, summary_filename(cfg.problem))
    _write(path, summary_csv(summarize(collected, cfg.budget_limit)))
    paths.append(path)
    return paths


def grid_search_reference_rate(cfg: ExperimentConfig, candidates=None, budget=None,
                               seed=None, problem=None):
    """Best reference rate for the untruncated estimator over ``candidates``.

    Each candidate runs for ``budget`` units (default: ``grid_budget`` or a
    sixteenth of ``budget_limit``); the lowest final evaluation loss wins and
    ties go to the smaller rate. Non-finite final losses count as divergence.

    ``problem`` overrides the instance built from ``cfg``.

    Returns ``(best_rate, {rate: final_loss})``.
    """
    rates = candidates if candidates is not None else (cfg.grid_rates or default_rate_grid())
    rates = sorted(float(r) for r in rates)
    if not rates:
        raise ValueError("no candidate rates")
    budget = budget or cfg.grid_budget or cfg.budget_limit / 16.0
    seed = cfg.seeds[0] if seed is None else seed
    results = {}
    for rate in rates:
        trace = run_single(cfg, "untruncated", seed, reference_rate=rate, budget=budget,
                           problem=problem)
        results[rate] = trace[-1].eval_loss
    finite = [(loss, rate) for rate, loss in results.items() if math.isfinite(loss)]
    if not finite:
        raise RuntimeError("every candidate learning rate diverged")
    best = min(finite)[1]  # ascending rate breaks ties
    return best, results
