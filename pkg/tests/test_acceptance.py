"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Experiment-level criteria run the default configuration with 20 replicates
and master seed 0. Thread counts only change speed, never results.
"""

import math
import time

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import acceptance_line, ao_of, constant_population, sample_valid_config, small_config
from strategic_select import cli
from strategic_select import experiments as ex
from strategic_select.estimators import cohort_means, mslr_fit, naive_ols_fit, two_sls_fit
from strategic_select.model import EnvironmentSpec, default_config, default_population, save_config
from strategic_select.simulator import run_experiment, run_round
from strategic_select.welfare import (
    conditional_improvement,
    empirical_reduction_probability,
    improved_chance_check,
    lambda_multi,
    lambda_single,
    reduction_bound,
    unit_sphere_grid,
)

SEED = 0
THREADS = 4


def pooled(*stderrs):
    return math.sqrt(sum(s * s for s in stderrs))


def sign_test(wins, n):
    """One-sided p-value of ``wins`` successes out of ``n`` under a fair coin."""
    return stats.binomtest(wins, n, 0.5, alternative="greater").pvalue


def rows_by(rows, *keys):
    return {tuple(r[k] for k in keys): r for r in rows}


# 1. single-DM utility ordering


def test_criterion_1_table1_ordering():
    start = time.perf_counter()
    res = ex.run_table1(default_config(1), SEED)
    elapsed = time.perf_counter() - start
    q = {r["candidate"]: r for r in res["rows"]}
    ao = q["AO"]
    gaps = {k: ao["utility"] - q[k]["utility"] for k in ("OLS", "STAR")}
    ordered = all(gaps[k] > 2 * pooled(ao["stderr"], q[k]["stderr"]) for k in gaps)
    magnitudes = (abs(ao["utility"] - 2.53) <= 0.15 and abs(q["OLS"]["utility"] - 2.51) <= 0.15
                  and abs(q["STAR"]["utility"] - 2.51) <= 0.15)
    detail = (f"Q(AO)={ao['utility']:.3f}±{ao['stderr']:.3f} Q(OLS)={q['OLS']['utility']:.3f}"
              f"±{q['OLS']['stderr']:.3f} Q(STAR)={q['STAR']['utility']:.3f}±{q['STAR']['stderr']:.3f}"
              f" runtime {elapsed:.0f}s")
    assert acceptance_line(1, ordered and magnitudes and elapsed < 120, detail)


# 2. two-DM utility grid


def test_criterion_2_table2_dominance():
    start = time.perf_counter()
    res = ex.run_table2(default_config(2), SEED)
    elapsed = time.perf_counter() - start
    cells = rows_by(res["rows"], "theta1", "theta2")
    dominant, margins = True, []
    for b in ex.CANDIDATES:
        ao = cells[("AO", b)]
        for a in ("OLS", "STAR"):
            other = cells[(a, b)]
            margin = (ao["utility"] - other["utility"]) / pooled(ao["stderr"], other["stderr"])
            margins.append(margin)
            dominant &= margin > 1.0
    in_range = all(2.35 <= r["utility"] <= 2.75 for r in res["rows"])
    spread = [r["utility"] for r in res["rows"]]
    detail = (f"min AO-column margin {min(margins):.1f} stderr, utilities {min(spread):.3f}..{max(spread):.3f}"
              f" runtime {elapsed:.0f}s")
    assert acceptance_line(2, dominant and in_range and elapsed < 180, detail)


# 3. estimation error versus rounds


def test_criterion_3_error_trend():
    res = ex.run_estimation_error(default_config(1), SEED, threads=THREADS)
    rows = rows_by([r for r in res["rows"] if r["quantity"] == "error"], "method", "T")
    mslr, ols, tsls = rows[("MSLR", 100)], rows[("OLS", 100)], rows[("2SLS", 100)]
    per = res["per_replicate"]
    err = {T: np.linalg.norm(per[("single", 1, "MSLR", T)], axis=1) for T in (20, 100)}
    wins = int(np.sum(err[100] < err[20]))
    p = sign_test(wins, err[100].size)
    ok = (mslr["mean"] < 0.25 * ols["mean"] and p < 0.05
          and ols["mean"] > 3 * ols["stderr"] and tsls["mean"] > 3 * tsls["stderr"])
    detail = (f"T=100 errors MSLR {mslr['mean']:.4f} OLS {ols['mean']:.4f}±{ols['stderr']:.4f} "
              f"2SLS {tsls['mean']:.4f}±{tsls['stderr']:.4f}; T=100 beats T=20 in {wins}/20 (p={p:.1e})")
    assert acceptance_line(3, ok, detail)


# 4. cooperation between two DMs


def test_criterion_4_cooperation_bias():
    res = ex.run_estimation_error(default_config(2), SEED, t_grid=(100,), threads=THREADS)
    rows = rows_by([r for r in res["rows"] if r["method"] == "MSLR" and r["quantity"] == "bias_HS_GPA"],
                   "scenario", "dm")

    def covers(r):
        return r["ci_low"] <= 0.0 <= r["ci_high"]

    sync_ok = all(covers(rows[("synchronous", d)]) for d in (1, 2))
    async_ok = any(not covers(rows[("asynchronous", d)]) for d in (1, 2))
    detail = "; ".join(f"{s[:5]} DM{d} [{rows[(s, d)]['ci_low']:+.4f}, {rows[(s, d)]['ci_high']:+.4f}]"
                       for s in ("synchronous", "asynchronous") for d in (1, 2))
    assert acceptance_line(4, sync_ok and async_ok, detail)


# 5. benefit of a full coalition


def test_criterion_5_coalition_benefit():
    res = ex.run_coalition(default_config(3), SEED, threads=THREADS)
    partial, full = res["partial"], res["full"]
    n = partial.shape[0]
    ok, parts = True, []
    for i in range(3):
        wins = int(np.sum(full[:, i] < partial[:, i]))
        p = sign_test(wins, n)
        ok &= full[:, i].mean() < partial[:, i].mean() and wins > n / 2 and p < 0.05
        parts.append(f"DM{i + 1} full<partial {wins}/{n} (p={p:.2f})")
    assert acceptance_line(5, ok, "; ".join(parts))


# 6. admitted-fraction sweep


def test_criterion_6_rho_sweep():
    res = ex.run_rho_sweep(default_config(1), SEED, threads=THREADS)
    rows = rows_by(res["rows"], "method", "rho")
    lo, hi = rows[("2SLS", 0.25)], rows[("2SLS", 1.0)]
    tsls_ok = lo["mean"] - hi["mean"] > 3 * pooled(lo["stderr"], hi["stderr"])
    mslr = [rows[("MSLR", rho)] for rho in (0.25, 0.5, 0.75, 1.0)]
    top = max(mslr, key=lambda r: r["mean"])
    bottom = min(mslr, key=lambda r: r["mean"])
    spread = top["mean"] - bottom["mean"]
    mslr_ok = spread < 2 * pooled(top["stderr"], bottom["stderr"])
    detail = (f"2SLS {lo['mean']:.4f}±{lo['stderr']:.4f} at rho=0.25 vs {hi['mean']:.4f}±{hi['stderr']:.4f}"
              f" at 1; MSLR spread {spread:.4f} vs 2x pooled stderr "
              f"{2 * pooled(top['stderr'], bottom['stderr']):.4f}")
    assert acceptance_line(6, tsls_ok and mslr_ok, detail)


# 7. exactness oracles


@settings(max_examples=20)
@given(star=st.tuples(st.floats(-2, 2), st.floats(-2, 2)), seed=st.integers(0, 2**31))
def noiseless_recovery(star, seed):
    config = default_config(1)
    config = config.replace(population=constant_population(config, agents_per_round=200),
                            environments=(config.environments[0].replace(theta_star=star),))
    sched = ex.build_schedule(config, 40, seed, 0)
    logs = run_experiment(config.simulation, sched, seed)
    for est in (mslr_fit(logs, 1, sched), naive_ols_fit(logs, 1), two_sls_fit(logs, 1, [1.0])):
        assert np.max(np.abs(est.coefficients - np.asarray(star))) < 1e-6


def cooperative_pair(n, seed, agents=100_000):
    config = default_config(n)
    pop = config.population.replace(agents_per_round=agents)
    rng = np.random.default_rng(seed)
    thetas = rng.multivariate_normal((1.0, 1.0), np.diag((10.0, 1.0)), size=n)
    scales = rng.uniform(0.5, 2.0, size=(n, 1))
    first = run_round(pop, config.environments, thetas, rng, round_index=1)
    second = run_round(pop, config.environments, scales * thetas, rng, round_index=2)
    return config, first, second


@settings(max_examples=8)
@given(n=st.sampled_from((1, 2)), seed=st.integers(0, 2**31))
def population_identity(n, seed):
    config, a, b = cooperative_pair(n, seed)
    for env in range(1, n + 1):
        star = np.asarray(config.environments[env - 1].theta_star)
        c1, x1, y1 = cohort_means(a, env)
        c2, x2, y2 = cohort_means(b, env)
        gap = (y2 - y1) - (x2 - x1) @ star
        o1 = a.outcome[a.complied(env)] - a.covariates[a.complied(env)] @ star
        o2 = b.outcome[b.complied(env)] - b.covariates[b.complied(env)] @ star
        se = math.sqrt(o1.var(ddof=1) / c1 + o2.var(ddof=1) / c2)
        assert abs(gap) < 4 * se


def ks_critical(n1, n2, alpha=0.01):
    return math.sqrt(-0.5 * math.log(alpha / 2)) * math.sqrt((n1 + n2) / (n1 * n2))


def test_criterion_7_exactness_oracles():
    outcome = {}
    for name, check in (("a", noiseless_recovery), ("b", population_identity)):
        try:
            check()
            outcome[name] = True
        except AssertionError:
            outcome[name] = False
    worst = 0.0
    ks_ok = True
    for seed in (1, 2, 3):
        config, a, b = cooperative_pair(2, seed)
        for env in (1, 2):
            b1, b2 = a.baseline[a.complied(env)], b.baseline[b.complied(env)]
            crit = ks_critical(len(b1), len(b2))
            for j in range(b1.shape[1]):
                ratio = stats.ks_2samp(b1[:, j], b2[:, j]).statistic / crit
                worst = max(worst, ratio)
                ks_ok &= ratio < 1.0
    outcome["c"] = ks_ok
    detail = ", ".join(f"({k}) {'ok' if v else 'failed'}" for k, v in outcome.items())
    detail += f"; largest KS statistic {worst:.2f} of the 1% critical value"
    assert acceptance_line(7, all(outcome.values()), detail)


# 8. welfare bounds


def test_criterion_8_welfare_bounds():
    rng = np.random.default_rng(8)
    violations, worst = 0, -math.inf
    for _ in range(50):
        c = sample_valid_config(rng)
        star, ao = c["stars"][0], c["aos"][0]
        m = c["effort"].shape[0]
        pop = default_population(1).replace(
            baseline_dists=tuple(tuple((0.0, 1.0) for _ in range(m)) for _ in range(2)),
            effort_matrix=tuple(tuple(float(v) for v in row) for row in c["effort"]))
        env = EnvironmentSpec(theta_star=tuple(float(v) for v in star), gamma=float(c["gammas"][0]))
        lam = lambda_multi(c["published"], c["gammas"], ao, star, c["effort"])
        for M in (0.01, 0.05, 0.1):
            p, se = empirical_reduction_probability(
                pop, env, star, ao, M, 20_000, rng, rivals=c["published"][1:], rival_gammas=c["gammas"][1:])
            bound = reduction_bound(M, 1.0, lam, 1.0, ao, star)[0]
            worst = max(worst, p - bound - 3 * se)
            violations += p > bound + 3 * se
    negative = 0
    for _ in range(1000):
        c = sample_valid_config(rng)
        ao, star = c["aos"][0], c["stars"][0]
        negative += lambda_single(ao, star, c["effort"], c["gammas"][0]) < 0
        negative += lambda_multi(c["published"], c["gammas"], ao, star, c["effort"]) < 0
    effort = np.diag([2.0, 1.0])
    star1, star2 = np.array([0.4, 0.9]), np.array([0.6, 0.7])
    ao1, ao2 = ao_of(effort, star1), ao_of(effort, star2)
    example = all(improved_chance_check([star1, rival], [1.0, 1.0], ao1, star1, effort) for rival in (star2, ao2))
    detail = (f"{violations}/150 bound violations (max excess {worst:+.4f}), {negative} negative gaps in 1000"
              f" configurations, worked example {'holds' if example else 'fails'}")
    assert acceptance_line(8, violations == 0 and negative == 0 and example, detail)


# 9. dominant strategy


def test_criterion_9_dominant_strategy():
    rng = np.random.default_rng(9)
    ok, checked = True, 0
    for m in (2, 3):
        grid = unit_sphere_grid(m, 1000)
        effort = rng.normal(size=(m, m)) + 2.0 * np.eye(m)
        star = rng.normal(size=m)
        gammas = rng.uniform(0.1, 2.0, size=3)
        slope = rng.normal(size=m)
        winners = set()
        for _ in range(10):
            rivals = rng.normal(size=(2, m))
            offset = float(np.tanh(rivals).sum())
            q = [grid[k] @ slope + offset + conditional_improvement(np.vstack([grid[k], rivals]), gammas, effort, star)
                 for k in range(len(grid))]
            winners.add(int(np.argmax(q)))
            checked += 1
        ok &= len(winners) == 1
    assert acceptance_line(9, ok, f"one grid argmax across {checked} rival draws in m=2 and m=3")


# 10. determinism


def test_criterion_10_determinism(tmp_path):
    identical = []
    for command, n in cli.DEFAULT_N.items():
        cfg = tmp_path / f"{command}.yaml"
        save_config(small_config(n, replicates=3), cfg)
        outputs = []
        for run, threads in (("a", "1"), ("b", "1"), ("c", "3")):
            out = tmp_path / run
            code = cli.main([command, "--config", str(cfg), "--seed", "11", "--out", str(out), "--threads", threads])
            assert code == 0
            outputs.append((out / f"{command}.csv").read_bytes())
        identical.append(outputs[0] == outputs[1] == outputs[2])
    ok = all(identical)
    detail = f"{sum(identical)}/{len(identical)} commands byte-identical across reruns and 1 or 3 threads"
    assert acceptance_line(10, ok, detail)
