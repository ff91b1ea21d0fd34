"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines are written straight to the terminal) or directly
with ``python3 tests/test_acceptance.py``.
"""

import hashlib
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import enumerate_grid, exact_second_moment, grid_minimum  # noqa: E402

from rtelescope.adaptive_tuning import optimal_q_rr, optimal_q_ss  # noqa: E402
from rtelescope.experiment import (  # noqa: E402
    ExperimentConfig,
    grid_search_reference_rate,
    loss_at,
    run_experiment,
    run_single,
)
from rtelescope.problems.dual import Dual  # noqa: E402
from rtelescope.problems.lotka_volterra import (  # noqa: E402
    PRIOR_MEAN,
    LotkaVolterraVIProblem,
    solve_at_observations,
)
from rtelescope.problems.meta import QuadraticMetaProblem, closed_form_meta  # noqa: E402
from rtelescope.problems.synthetic import (  # noqa: E402
    SyntheticDecayProblem,
    decay_bounds,
    online_gradient_descent_regret,
    regret_slope,
)
from rtelescope.telescope_core import (  # noqa: E402
    DifferenceSequence,
    TruncationDistribution,
    WeightKind,
    draw_cost,
    enumerate_exact_moments,
    estimate_at,
    make_weight_scheme,
    rt_estimate,
)

SS, RR = WeightKind.SINGLE_SAMPLE, WeightKind.RUSSIAN_ROULETTE

# zeta(3/2)^2 from 10^6 partial-sum terms plus the midpoint integral tail 2 / sqrt(N + 1/2)
ZETA_1_5_SQUARED = 6.824504962419626
PRINTED_ZETA_SQUARED = 6.823

LV_BUDGET = 5e5
LV_ESTIMATORS = ("untruncated", "fixed:4", "fixed:6", "ss")


def _line(name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} {name}: {detail}"


def _exact_moments(deltas, W, q, costs, reuse):
    """Sum over every truncation ``N``: ``(mean, E||G||^2, E[C])``."""
    mean, second, compute = 0.0, 0.0, 0.0
    for N in range(1, q.horizon + 1):
        est = estimate_at(deltas, W, N)
        p = q.probs[N - 1]
        mean = mean + p * est
        second += p * float(est @ est)
        compute += p * draw_cost(W, N, costs, reuse)
    return mean, second, compute


# -- criteria ---------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        h = int(rng.integers(1, 9))
        deltas = DifferenceSequence(rng.standard_normal((h, int(rng.integers(1, 4)))))
        q = TruncationDistribution.normalized(rng.uniform(0.05, 1.0, h))
        for kind in (SS, RR):
            m = enumerate_exact_moments(deltas, make_weight_scheme(kind, q), q)
            worst = max(worst, float(np.max(np.abs(m.mean - deltas.total()))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    return ok, f"unbiasedness, max |E[G] - sum| = {worst:.2e} (tol 1e-12), {elapsed:.2f} s (< 1 s)"


def criterion_2():
    t0 = time.perf_counter()
    problem = SyntheticDecayProblem("geometric", p=0.5, c=1.0, horizon=30, seed=0)
    deltas = problem.deltas(problem.theta_star)
    q = TruncationDistribution.geometric(0.5, 30)
    W = make_weight_scheme(SS, q)
    costs = problem.costs
    _, second, compute = _exact_moments(deltas, W, q, costs, problem.reuse)
    # single-sample moments directly from their definition
    norms2 = np.sum(deltas.terms**2, axis=1)
    direct_ok = (math.isclose(second, float(np.sum(norms2 / q.probs)), rel_tol=1e-12)
                 and math.isclose(compute, float(q.probs @ costs), rel_tol=1e-12))
    bound_c, bound_g = decay_bounds("geometric", 0.5, 1.0, 30)
    rng = np.random.default_rng(7)
    n = 100_000
    sq, cost = np.empty(n), np.empty(n)
    for k in range(n):
        s = rt_estimate(deltas, W, q, rng, costs, problem.reuse)
        sq[k] = s.estimate @ s.estimate
        cost[k] = s.compute_charged
    z_sq = abs(sq.mean() - second) / (sq.std(ddof=1) / math.sqrt(n))
    z_c = abs(cost.mean() - compute) / (cost.std(ddof=1) / math.sqrt(n))
    elapsed = time.perf_counter() - t0
    ok = (compute <= bound_c and second <= bound_g and direct_ok and z_sq <= 4 and z_c <= 4
          and elapsed < 5.0)
    return ok, (f"geometric bounds, E[C] = {compute:.4f} <= {bound_c:g}, "
                f"E||G||^2 = {second:.4f} <= {bound_g:g}, Monte-Carlo z = {z_c:.2f}, {z_sq:.2f} "
                f"(<= 4), {elapsed:.2f} s (< 5 s)")


def criterion_3():
    t0 = time.perf_counter()
    problem = SyntheticDecayProblem("polynomial", p=2.0, c=1.0, horizon=1000, seed=0)
    deltas = problem.deltas(problem.theta_star)
    n = np.arange(1, 1001, dtype=float)
    q = TruncationDistribution.normalized(n**-2.5)
    W = make_weight_scheme(SS, q)
    _, second, compute = _exact_moments(deltas, W, q, problem.costs, problem.reuse)
    bound = decay_bounds("polynomial", 2.0, 1.0, 1000)[0]
    limit = decay_bounds("polynomial", 2.0, 1.0, math.inf)[0]
    ladder = [decay_bounds("polynomial", 2.0, 1.0, h)[0] for h in (1e3, 1e4, 1e5, 1e6)]
    gaps = [limit - b for b in ladder]
    approaches = all(g > 0 for g in gaps) and all(b < a for a, b in zip(gaps, gaps[1:]))
    oracle_ok = math.isclose(limit, ZETA_1_5_SQUARED, rel_tol=1e-9)
    elapsed = time.perf_counter() - t0
    ok = compute <= bound and second <= bound and approaches and oracle_ok and elapsed < 5.0
    return ok, (f"polynomial bounds, E[C] = {compute:.4f}, E||G||^2 = {second:.4f} <= "
                f"{bound:.4f}; limit {limit:.6f} vs oracle {ZETA_1_5_SQUARED:.6f} "
                f"(printed approximation {PRINTED_ZETA_SQUARED}), {elapsed:.2f} s (< 5 s)")


def criterion_4():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = {"ss": 0.0, "rr": 0.0}
    for _ in range(50):
        h = int(rng.integers(2, 4))
        sigma = rng.uniform(0.1, 2.0, h)
        costs = np.cumsum(rng.uniform(0.2, 2.0, h))
        for kind, correlated, fit in (("ss", True, optimal_q_ss), ("rr", False, optimal_q_rr)):
            q = fit(sigma**2, costs, floor=0.0)
            second, compute = enumerate_grid(sigma, kind, costs, correlated, q.probs[None, :])
            closed = float(second[0] * compute[0])
            best = grid_minimum(sigma, kind, costs, correlated, resolution=0.01)
            worst[kind] = max(worst[kind], abs(closed - best) / best)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed < 30.0
    return ok, (f"closed-form q vs simplex grid, max relative gap SS {worst['ss']:.2e}, "
                f"RR {worst['rr']:.2e} (tol 1e-3), {elapsed:.1f} s (< 30 s)")


def _variance_ordering():
    rng = np.random.default_rng(505)
    out = {"correlated": [], "independent": []}
    for _ in range(50):
        h = int(rng.integers(2, 6))
        sigma = rng.uniform(0.1, 2.0, h)
        q = rng.dirichlet(np.ones(h))
        for key, correlated in (("correlated", True), ("independent", False)):
            var_ss = exact_second_moment(sigma, "ss", q, correlated)[2]
            var_rr = exact_second_moment(sigma, "rr", q, correlated)[2]
            out[key].append((var_ss, var_rr))
    return out


def criterion_5():
    t0 = time.perf_counter()
    pairs = _variance_ordering()
    bad_a = sum(ss > rr + 1e-10 for ss, rr in pairs["correlated"])
    bad_b = sum(rr > ss + 1e-10 for ss, rr in pairs["independent"])
    elapsed = time.perf_counter() - t0
    # smallest counterexample to the correlated ordering, by hand
    ss_ce = exact_second_moment([1.0, 0.1], "ss", [0.5, 0.5], True)[2]
    rr_ce = exact_second_moment([1.0, 0.1], "rr", [0.5, 0.5], True)[2]
    a = (bad_a == 0 and elapsed < 10.0,
         f"Var(SS) <= Var(RR) under perfect correlation, violated in {bad_a}/50 instances "
         f"(e.g. sigma = [1, 0.1], q = [0.5, 0.5]: {ss_ce:.2f} vs {rr_ce:.2f}), "
         f"{elapsed:.2f} s (< 10 s)")
    b = (bad_b == 0 and elapsed < 10.0,
         f"Var(RR) <= Var(SS) under independence, violated in {bad_b}/50 instances, "
         f"{elapsed:.2f} s (< 10 s)")
    return a, b


def criterion_6():
    t0 = time.perf_counter()
    q = TruncationDistribution.geometric(0.5, 30)
    traces = []
    for seed in range(5):
        problem = SyntheticDecayProblem("geometric", p=0.5, c=1.0, horizon=30, seed=seed)
        traces.append(online_gradient_descent_regret(problem, q, 1e6, seed=seed))
    slope = regret_slope(traces, 1e6, decades=2)
    elapsed = time.perf_counter() - t0
    ok = abs(slope + 0.5) <= 0.15 and elapsed < 120.0
    return ok, f"regret slope {slope:.3f} (target -0.5 +/- 0.15), {elapsed:.1f} s (< 120 s)"


def _lv_protocol(rate, budget=LV_BUDGET):
    cfg = ExperimentConfig(problem="lotka_volterra", estimators=LV_ESTIMATORS, budget_limit=budget,
                           reference_rate=rate, horizon=8, batch_size=64)
    runs = {}
    for est in LV_ESTIMATORS:
        runs[est] = []
        for seed in cfg.seeds:
            trace = run_single(cfg, est, seed)
            evals = [(r.budget_spent, r.eval_loss) for r in trace if r.is_eval]
            runs[est].append(tuple(np.array(v) for v in zip(*evals)))
    return runs


def _first_reach(budget, loss, level):
    hit = np.flatnonzero(loss <= level)
    return float(budget[hit[0]]) if hit.size else math.inf


def _lv_verdicts(runs, budget=LV_BUDGET):
    final = {est: np.array([loss_at(b, v, budget) for b, v in rs]) for est, rs in runs.items()}
    with np.errstate(invalid="ignore"):
        untr_mean, untr_std = float(np.mean(final["untruncated"])), float(np.std(final["untruncated"]))
        h4_mean, ss_mean = float(np.mean(final["fixed:4"])), float(np.mean(final["ss"]))
    target = untr_mean + untr_std
    a = bool(h4_mean > untr_mean)
    b = bool(math.isfinite(target) and ss_mean <= target)
    faster = sum(_first_reach(*rs, target) < _first_reach(*ru, target)
                 for rs, ru in zip(runs["ss"], runs["untruncated"])) if math.isfinite(target) else 0
    c = faster >= 3
    detail = (f"final mean -ELBO untruncated {untr_mean:.4f} (std {untr_std:.4f}), H=4 "
              f"{h4_mean:.4f}, SS {ss_mean:.4f}; (a) {'ok' if a else 'no'}, (b) "
              f"{'ok' if b else 'no'}, (c) SS faster in {faster}/5 seeds")
    return a and b and c, detail


def criterion_7():
    t0 = time.perf_counter()
    ok, detail = _lv_verdicts(_lv_protocol(0.01))
    elapsed = time.perf_counter() - t0
    return ok and elapsed < 900.0, f"Lotka-Volterra at rate 0.01, {detail}, {elapsed:.0f} s"


def criterion_7_grid():
    """Same protocol with the reference rate picked by the default grid search."""
    t0 = time.perf_counter()
    cfg = ExperimentConfig(problem="lotka_volterra", budget_limit=LV_BUDGET, horizon=8)
    rate, _ = grid_search_reference_rate(cfg)
    ok, detail = _lv_verdicts(_lv_protocol(rate))
    elapsed = time.perf_counter() - t0
    return ok and elapsed < 900.0, f"Lotka-Volterra at grid-searched rate {rate:g}, {detail}, {elapsed:.0f} s"


def criterion_8():
    t0 = time.perf_counter()
    worst = {}
    # RK4 trajectory sensitivities, h = 1e-5, tol 1e-5
    rng = np.random.default_rng(8)
    err = 0.0
    for lam0 in (PRIOR_MEAN, PRIOR_MEAN * rng.uniform(0.8, 1.2, 6)):
        out = solve_at_observations(Dual.variables(lam0), 257)
        for k in range(6):
            e = np.eye(6)[k] * 1e-5
            fd = (solve_at_observations(lam0 + e, 257)[-1]
                  - solve_at_observations(lam0 - e, 257)[-1]) / 2e-5
            err = max(err, float(np.max(np.abs(out.tangent[-1][:, k] - fd) / np.abs(fd))))
    worst["rk4"] = (err, 1e-5)
    # ELBO with shared noise, batch 4, level 4, tol 1e-4 per coordinate
    err = 0.0
    for seed in range(3):
        p = LotkaVolterraVIProblem(seed=seed)
        r = np.random.default_rng(seed)
        theta = p.initial_theta() + 0.1 * r.standard_normal(12)
        noise = p.sample_noise(r, 4)
        g = p.grad(theta, 4, noise)
        for k in range(12):
            e = np.eye(12)[k] * 1e-5
            fd = (p.loss(theta + e, 4, noise) - p.loss(theta - e, 4, noise)) / 2e-5
            err = max(err, abs(fd - g[k]) / abs(g[k]))
    worst["elbo"] = (err, 1e-4)
    # meta toy: scalar contraction with a hand derivative, tol 1e-8
    a, b, w0, eta = 1.3, 0.2, 1.5, 0.4
    p = QuadraticMetaProblem(dim=1, curvature=[a], train_center=[b], eval_center=[b],
                             eval_weight=[1.0], w0=[w0])
    T = p.inner_steps(2)
    hand = 0.5 * (w0 - b) ** 2 * 2 * T * (1 - eta * a) ** (2 * T - 1) * (-a)
    g = p.grad([eta, 0.0], 2)
    err = abs(g[0] - hand) / abs(hand)
    # and against Richardson-extrapolated central differences on the general toy
    for seed in range(3):
        pm = QuadraticMetaProblem(seed=seed)
        th = np.array([0.15, 1.2])
        g = pm.grad(th, 4)
        _, ref = closed_form_meta(pm, th, pm.inner_steps(4))
        err = max(err, float(np.max(np.abs(g - ref) / np.abs(ref))))

        def central(h):
            return np.array([(pm.loss(th + e, 4) - pm.loss(th - e, 4)) / (2 * h)
                             for e in np.eye(2) * h])

        fd = (4 * central(5e-4) - central(1e-3)) / 3
        err = max(err, float(np.max(np.abs(g - fd) / np.abs(g))))
    worst["meta"] = (err, 1e-8)
    elapsed = time.perf_counter() - t0
    ok = all(e <= tol for e, tol in worst.values()) and elapsed < 60.0
    parts = ", ".join(f"{k} {e:.1e} (tol {tol:g})" for k, (e, tol) in worst.items())
    return ok, f"gradient checks, {parts}, {elapsed:.1f} s (< 60 s)"


def _digests(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as fh:
            out[name] = hashlib.sha256(fh.read()).hexdigest()
    return out


def criterion_9():
    configs = [
        ExperimentConfig(problem="synthetic", estimators=("untruncated", "fixed:4", "ss", "rr"),
                         seeds=(0, 1), budget_limit=3000.0, horizon=16),
        ExperimentConfig(problem="lotka_volterra", estimators=("fixed:4", "ss"), seeds=(0, 1),
                         budget_limit=1500.0, batch_size=8, eval_batch_size=32),
        ExperimentConfig(problem="quadratic_meta", estimators=("untruncated", "rr"), seeds=(0,),
                         budget_limit=20000.0),
    ]
    same, files = True, 0
    with tempfile.TemporaryDirectory() as tmp:
        for i, cfg in enumerate(configs):
            a, b = os.path.join(tmp, f"{i}a"), os.path.join(tmp, f"{i}b")
            run_experiment(cfg, a)
            run_experiment(cfg, b)
            da, db = _digests(a), _digests(b)
            same &= da == db
            files += len(da)
    return same, f"determinism, {files} CSVs byte-identical across reruns"


# -- pytest entry points ----------------------------------------------------------

@pytest.fixture
def report(capsys):
    def emit(name, result):
        ok, detail = result
        with capsys.disabled():
            print("\n" + _line(name, ok, detail), flush=True)
        assert ok, detail
    return emit


def test_criterion_1_unbiasedness(report):
    report("criterion 1", criterion_1())


def test_criterion_2_geometric_bounds(report):
    report("criterion 2", criterion_2())


def test_criterion_3_polynomial_bounds(report):
    report("criterion 3", criterion_3())


def test_criterion_4_closed_form_optimality(report):
    report("criterion 4", criterion_4())


def test_criterion_5a_variance_correlated(report):
    report("criterion 5a", criterion_5()[0])


def test_criterion_5b_variance_independent(report):
    report("criterion 5b", criterion_5()[1])


def test_criterion_6_regret_slope(report):
    report("criterion 6", criterion_6())


@pytest.mark.slow
def test_criterion_7_lotka_volterra(report):
    report("criterion 7", criterion_7())


@pytest.mark.slow
def test_criterion_7_lotka_volterra_grid_searched_rate(report):
    report("criterion 7 (grid-searched rate)", criterion_7_grid())


def test_criterion_8_gradients(report):
    report("criterion 8", criterion_8())


def test_criterion_9_determinism(report):
    report("criterion 9", criterion_9())


if __name__ == "__main__":
    checks = [("criterion 1", criterion_1), ("criterion 2", criterion_2),
              ("criterion 3", criterion_3), ("criterion 4", criterion_4)]
    failed = 0
    for name, fn in checks:
        ok, detail = fn()
        failed += not ok
        print(_line(name, ok, detail), flush=True)
    (ok_a, da), (ok_b, db) = criterion_5()
    print(_line("criterion 5a", ok_a, da), flush=True)
    print(_line("criterion 5b", ok_b, db), flush=True)
    failed += (not ok_a) + (not ok_b)
    for name, fn in [("criterion 6", criterion_6), ("criterion 7", criterion_7),
                     ("criterion 7 (grid-searched rate)", criterion_7_grid),
                     ("criterion 8", criterion_8), ("criterion 9", criterion_9)]:
        ok, detail = fn()
        failed += not ok
        print(_line(name, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
