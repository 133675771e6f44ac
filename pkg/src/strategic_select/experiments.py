"""Replicated experiments behind the CLI commands.

Each ``run_*`` function returns plain rows (lists of dicts) ready for CSV
output plus, where useful, per-replicate arrays. All randomness flows from
``derive_seed(seed, label, replicate, ...)`` so that a replicate's result is
a pure function of the master seed and its index, whatever the thread count.
Where two scenarios are compared, they share agent draws and the parameter
draws of every DM whose schedule is unchanged.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .estimators import kappa_fit, mslr_fit, naive_ols_fit, two_sls_fit
from .model import Config
from .protocol import (
    DeploymentSchedule,
    compose_multi_dm,
    gaussian_sampler,
    schedule_block,
    schedule_fixed,
    schedule_interleaved,
    uniform_scale_sampler,
)
from .simulator import derive_seed, measured_utility, parallel_map, run_experiment
from .welfare import build_welfare_report, rescale_theta

__all__ = [
    "ExperimentError",
    "summarize",
    "build_schedule",
    "estimate_candidates",
    "run_table1",
    "run_table2",
    "run_estimation_error",
    "run_rho_sweep",
    "run_coalition",
    "run_sensitivity",
    "run_welfare",
]


CANDIDATES = ("AO", "OLS", "STAR")


class ExperimentError(RuntimeError):
    """An experiment phase failed; the message names the phase and replicate."""


class DegenerateCIWarning(UserWarning):
    """Confidence interval requested from a single replicate."""


def summarize(values: Sequence[float], level: float = 0.95) -> dict:
    """Mean, standard error and Student-t confidence interval."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n == 0:
        raise ExperimentError("no values to summarize")
    mean = float(np.mean(v))
    if n < 2:
        warnings.warn("one replicate: confidence interval is degenerate", DegenerateCIWarning, stacklevel=2)
        return {"mean": mean, "stderr": math.nan, "ci_low": math.nan, "ci_high": math.nan, "n": n}
    se = float(np.std(v, ddof=1) / math.sqrt(n))
    half = float(stats.t.ppf(0.5 + level / 2.0, n - 1)) * se
    return {"mean": mean, "stderr": se, "ci_low": mean - half, "ci_high": mean + half, "n": n}


def _samplers(config: Config, dm: int):
    sched = config.schedule
    return (
        gaussian_sampler(sched.theta_means[dm], sched.theta_cov[dm]),
        uniform_scale_sampler(sched.scale_low, sched.scale_high),
    )


def build_schedule(config: Config, T: int, seed: int, replicate: int, *, etas: Sequence[int] | None = None,
                   mode: str | None = None, coalition: Sequence[int] | None = None,
                   layout: str | None = None) -> DeploymentSchedule:
    """Joint schedule for every DM of ``config``.

    Each DM draws from its own stream keyed by its index and lag, so
    scenarios that change one DM's lag leave the other DMs' draws intact.
    """
    n = config.n
    etas = tuple(config.schedule.eta) if etas is None else tuple(etas)
    layout = layout or config.schedule.mode
    singles = []
    for dm in range(n):
        sampler, scaler = _samplers(config, dm)
        rng = np.random.default_rng(derive_seed(seed, "schedule", replicate, dm, etas[dm]))
        make = schedule_interleaved if layout == "interleaved" else schedule_block
        singles.append(make(T, etas[dm], sampler, scaler, rng))
    if n == 1:
        return singles[0]
    if mode is None:
        mode = "synchronous" if len(set(etas)) == 1 else "asynchronous"
    return compose_multi_dm(singles, mode, coalition)


def _fixed_schedule(thetas: np.ndarray, rounds: int) -> DeploymentSchedule:
    singles = [schedule_fixed(rounds, th) for th in thetas]
    if len(singles) == 1:
        return singles[0]
    return compose_multi_dm(singles, "asynchronous")


@dataclass(frozen=True)
class Candidates:
    """Estimated parameters of one DM in one replicate."""

    star: np.ndarray
    ols: np.ndarray
    two_sls: np.ndarray | None
    ao: np.ndarray
    kappa: np.ndarray

    def rescaled(self) -> dict:
        tau = float(np.linalg.norm(self.star))
        return {
            "AO": rescale_theta(self.ao, tau, "ao"),
            "OLS": rescale_theta(self.ols, tau, "ols"),
            "STAR": self.star.copy(),
        }


def _probe_kappa(config: Config, seed: int, replicate: int, dm: int, fixed: np.ndarray,
                 rounds: int, threads: int) -> np.ndarray:
    """Fit the utility slope of DM ``dm`` from fresh probes, rivals held at ``fixed``."""
    sampler, _ = _samplers(config, dm)
    rng = np.random.default_rng(derive_seed(seed, "probe-schedule", replicate, dm))
    thetas = np.repeat(fixed[None, :, :], rounds, axis=0)
    for t in range(rounds):
        thetas[t, dm] = sampler(rng)
    sched = DeploymentSchedule(thetas, ((),) * config.n, (1,) * config.n, "probe", (), ())
    logs = run_experiment(config.simulation, sched, derive_seed(seed, "probe", replicate, dm), threads=threads)
    q = np.array([measured_utility([lg], dm + 1)[0] for lg in logs])
    rivals = np.delete(thetas, dm, axis=1)
    kappa, _ = kappa_fit(thetas[:, dm], q, rivals)
    return kappa


def estimate_candidates(config: Config, seed: int, replicate: int, *, threads: int = 1,
                        with_two_sls: bool = False) -> list[Candidates]:
    """Estimation and probe phases for every DM of one replicate."""
    exp = config.experiment
    sim = config.simulation
    try:
        sched = build_schedule(config, exp.rounds, seed, replicate)
        logs = run_experiment(sim, sched, derive_seed(seed, "estimate", replicate), threads=threads)
        stars, olss, tsls = [], [], []
        for i in range(1, config.n + 1):
            stars.append(mslr_fit(logs, i, sched, min_cell=exp.min_cell).coefficients)
            olss.append(naive_ols_fit(logs, i).coefficients)
            tsls.append(two_sls_fit(logs, i, sim.gammas).coefficients if with_two_sls else None)
        fixed = np.array(stars)
        out = []
        for dm in range(config.n):
            kappa = _probe_kappa(config, seed, replicate, dm, fixed, exp.probe_rounds, threads)
            ao = kappa / np.linalg.norm(kappa)
            out.append(Candidates(stars[dm], olss[dm], tsls[dm], ao, kappa))
        return out
    except (ValueError, ArithmeticError) as exc:
        raise ExperimentError(f"estimation phase, replicate {replicate}: {exc}") from exc


def _evaluate(config: Config, thetas: np.ndarray, seed: int, replicate: int, threads: int,
              env: int = 1) -> tuple[float, int]:
    rounds = config.experiment.eval_rounds
    logs = run_experiment(config.simulation, _fixed_schedule(thetas, rounds),
                          derive_seed(seed, "evaluate", replicate), threads=threads)
    mean, _, count = measured_utility(logs, env)
    return mean, count


def _table1_replicate(config: Config, seed: int, r: int, threads: int) -> dict:
    cand = estimate_candidates(config, seed, r, threads=threads)[0]
    out = {}
    for name, theta in cand.rescaled().items():
        out[name] = _evaluate(config, theta[None, :], seed, r, threads)
    return {"utility": out, "candidates": cand}


def run_table1(config: Config, seed: int, *, replicates: int | None = None, threads: int = 1) -> dict:
    """Measured utility of the three candidate parameters for a single DM.

    Every candidate is evaluated on the same simulated evaluation cohorts of
    a replicate. Reported utility is the replicate mean, with the standard
    error across replicates.
    """
    if config.n != 1:
        raise ExperimentError(f"table1 needs exactly one environment, config has {config.n}")
    R = replicates or config.experiment.replicates
    reps = parallel_map(lambda r: _table1_replicate(config, seed, r, 1), range(R), threads)
    rows = []
    per_rep = {}
    for name in CANDIDATES:
        vals = [rep["utility"][name][0] for rep in reps]
        per_rep[name] = np.array(vals)
        s = summarize(vals)
        rows.append({
            "candidate": name,
            "utility": s["mean"],
            "stderr": s["stderr"],
            "n_complied": sum(rep["utility"][name][1] for rep in reps),
        })
    return {"rows": rows, "per_replicate": per_rep, "candidates": [rep["candidates"] for rep in reps]}


def _table2_replicate(config: Config, seed: int, r: int, threads: int, env: int) -> dict:
    cands = estimate_candidates(config, seed, r, threads=threads)
    opts = [c.rescaled() for c in cands]
    grid = {}
    for a in CANDIDATES:
        for b in CANDIDATES:
            thetas = np.array([opts[0][a], opts[1][b]])
            grid[(a, b)] = _evaluate(config, thetas, seed, r, threads, env=env)
    return grid


def run_table2(config: Config, seed: int, *, replicates: int | None = None, threads: int = 1,
               env: int = 1) -> dict:
    """Utility of DM ``env`` (1 by default) over the 3 x 3 grid of both DMs' candidates.

    Rows are keyed by the candidate of DM 1 (``theta1``) and of DM 2
    (``theta2``) whichever DM's utility is reported.
    """
    if config.n != 2:
        raise ExperimentError(f"table2 needs exactly two environments, config has {config.n}")
    if env not in (1, 2):
        raise ExperimentError(f"env must be 1 or 2, got {env}")
    R = replicates or config.experiment.replicates
    reps = parallel_map(lambda r: _table2_replicate(config, seed, r, 1, env), range(R), threads)
    rows = []
    per_rep = {}
    for b in CANDIDATES:
        for a in CANDIDATES:
            vals = [rep[(a, b)][0] for rep in reps]
            per_rep[(a, b)] = np.array(vals)
            s = summarize(vals)
            rows.append({
                "theta1": a,
                "theta2": b,
                "utility": s["mean"],
                "stderr": s["stderr"],
                "n_complied": sum(rep[(a, b)][1] for rep in reps),
            })
    return {"rows": rows, "per_replicate": per_rep}


def _errors_for(logs, sched, config: Config, T: int, require_coalition: bool) -> dict:
    """Estimates of every DM from the first ``T`` rounds."""
    sim = config.simulation
    sub = logs[:T]
    out = {}
    for i in range(1, config.n + 1):
        star = sim.theta_stars[i - 1]
        ests = {
            "MSLR": mslr_fit(sub, i, sched, require_coalition=require_coalition, upto=T,
                             min_cell=config.experiment.min_cell).coefficients,
            "OLS": naive_ols_fit(sub, i).coefficients,
            "2SLS": two_sls_fit(sub, i, sim.gammas).coefficients,
        }
        out[i] = {k: v - star for k, v in ests.items()}
    return out


def _scenarios(config: Config) -> list[tuple[str, tuple, bool]]:
    exp = config.experiment
    n = config.n
    if n == 1:
        return [("single", tuple(config.schedule.eta), True)]
    async_etas = tuple(exp.async_eta[i % len(exp.async_eta)] for i in range(n))
    return [("synchronous", (exp.sync_eta,) * n, True), ("asynchronous", async_etas, False)]


def run_estimation_error(config: Config, seed: int, *, t_grid: Sequence[int] | None = None,
                         replicates: int | None = None, threads: int = 1) -> dict:
    """Estimation error and per-coordinate bias versus the number of rounds.

    One schedule of ``max(t_grid)`` rounds is simulated per replicate and
    scenario; smaller horizons use its prefix. With several DMs a
    synchronous and an asynchronous schedule are compared, and in the
    asynchronous case each DM pairs rounds by its own batches.
    """
    exp = config.experiment
    t_grid = tuple(sorted(t_grid or exp.t_grid))
    R = replicates or exp.replicates
    T_max = t_grid[-1]
    names = list(exp.coord_names)
    scenarios = _scenarios(config)

    def replicate(r: int) -> dict:
        res = {}
        for label, etas, coalition in scenarios:
            try:
                sched = build_schedule(config, T_max, seed, r, etas=etas)
                logs = run_experiment(config.simulation, sched, derive_seed(seed, "estimate", r))
                res[label] = {T: _errors_for(logs, sched, config, T, coalition) for T in t_grid}
            except (ValueError, ArithmeticError) as exc:
                raise ExperimentError(f"estimation-error {label}, replicate {r}: {exc}") from exc
        return res

    reps = parallel_map(replicate, range(R), threads)
    rows = []
    per_rep = {}
    for label, _, _ in scenarios:
        for i in range(1, config.n + 1):
            for method in ("MSLR", "OLS", "2SLS"):
                for T in t_grid:
                    dev = np.array([rep[label][T][i][method] for rep in reps])
                    err = np.linalg.norm(dev, axis=1)
                    per_rep[(label, i, method, T)] = dev
                    quantities = [("error", err)] + [(f"bias_{nm}", dev[:, j]) for j, nm in enumerate(names)]
                    for q, vals in quantities:
                        with warnings.catch_warnings():
                            if R < 2:
                                warnings.simplefilter("ignore", DegenerateCIWarning)
                            s = summarize(vals)
                        rows.append({"scenario": label, "dm": i, "method": method, "T": T, "quantity": q, **s})
    if R < 2:
        warnings.warn("one replicate: confidence intervals are degenerate", DegenerateCIWarning, stacklevel=2)
    return {"rows": rows, "per_replicate": per_rep}


def run_rho_sweep(config: Config, seed: int, *, rho_grid: Sequence[float] | None = None,
                  replicates: int | None = None, threads: int = 1) -> dict:
    """Estimation error of each method as the admitted fraction varies.

    With ``rho_sweep_fixed_enrolment`` the cohort is enlarged to
    ``ceil(N rho_0 / rho)`` so the expected number of enrolled agents per
    round stays at the configured ``N rho_0``; the comparison across
    ``rho`` then reflects selection rather than sample size.
    """
    if config.n != 1:
        raise ExperimentError(f"rho-sweep needs exactly one environment, config has {config.n}")
    exp = config.experiment
    rho_grid = tuple(rho_grid or exp.rho_grid)
    R = replicates or exp.replicates
    base_env = config.environments[0]
    target = config.population.agents_per_round * base_env.rho

    def variant(rho: float) -> Config:
        pop = config.population
        if exp.rho_sweep_fixed_enrolment:
            pop = pop.replace(agents_per_round=int(math.ceil(target / rho - 1e-9)))
        return config.replace(population=pop, environments=(base_env.replace(rho=rho),))

    variants = [variant(rho) for rho in rho_grid]
    T = exp.rounds

    def replicate(r: int) -> list:
        out = []
        for cfg in variants:
            try:
                sched = build_schedule(cfg, T, seed, r)
                logs = run_experiment(cfg.simulation, sched, derive_seed(seed, "estimate", r))
                out.append(_errors_for(logs, sched, cfg, T, True)[1])
            except (ValueError, ArithmeticError) as exc:
                raise ExperimentError(f"rho-sweep rho={cfg.environments[0].rho}, replicate {r}: {exc}") from exc
        return out

    reps = parallel_map(replicate, range(R), threads)
    rows = []
    per_rep = {}
    for k, rho in enumerate(rho_grid):
        for method in ("MSLR", "OLS", "2SLS"):
            err = np.array([np.linalg.norm(rep[k][method]) for rep in reps])
            per_rep[(method, rho)] = err
            rows.append({"method": method, "rho": rho,
                         "agents_per_round": variants[k].population.agents_per_round, **summarize(err)})
    return {"rows": rows, "per_replicate": per_rep}


def run_coalition(config: Config, seed: int, *, replicates: int | None = None, threads: int = 1) -> dict:
    """MSLR error per DM when two of three DMs cooperate versus all three.

    Partial cooperation: DMs 1 and 2 share lag ``sync_eta`` while DM 3 uses
    ``async_eta[1]``. Full cooperation: all share ``sync_eta``. Each DM
    pairs rounds by its own batches in both scenarios.
    """
    if config.n != 3:
        raise ExperimentError(f"coalition needs exactly three environments, config has {config.n}")
    exp = config.experiment
    R = replicates or exp.replicates
    T = exp.rounds
    sync, lag = exp.sync_eta, exp.async_eta[-1]
    scenarios = {
        "partial": ((sync, sync, lag), "asynchronous", (0, 1)),
        "full": ((sync, sync, sync), "synchronous", None),
    }

    def replicate(r: int) -> dict:
        out = {}
        for label, (etas, mode, coalition) in scenarios.items():
            try:
                sched = build_schedule(config, T, seed, r, etas=etas, mode=mode, coalition=coalition)
                logs = run_experiment(config.simulation, sched, derive_seed(seed, "estimate", r))
                errs = []
                for i in range(1, 4):
                    est = mslr_fit(logs, i, sched, require_coalition=False, min_cell=exp.min_cell)
                    errs.append(float(np.linalg.norm(est.coefficients - config.simulation.theta_stars[i - 1])))
                out[label] = np.array(errs)
            except (ValueError, ArithmeticError) as exc:
                raise ExperimentError(f"coalition {label}, replicate {r}: {exc}") from exc
        return out

    reps = parallel_map(replicate, range(R), threads)
    partial = np.array([rep["partial"] for rep in reps])
    full = np.array([rep["full"] for rep in reps])
    rows = []
    for label, arr in (("partial", partial), ("full", full)):
        for i in range(3):
            wins = int(np.sum(full[:, i] < partial[:, i]))
            rows.append({"scenario": label, "dm": i + 1, **summarize(arr[:, i]),
                         "full_better": wins if label == "full" else ""})
    return {"rows": rows, "partial": partial, "full": full}


def _sensitivity_replicate(config: Config, seed: int, r: int) -> dict:
    cands = estimate_candidates(config, seed, r, with_two_sls=True)[0]
    star = config.simulation.theta_stars[0]
    q = {name: _evaluate(config, th[None, :], seed, r, 1)[0] for name, th in cands.rescaled().items()}
    return {
        "gap_AO_OLS": q["AO"] - q["OLS"],
        "gap_AO_STAR": q["AO"] - q["STAR"],
        "error_MSLR": float(np.linalg.norm(cands.star - star)),
        "error_OLS": float(np.linalg.norm(cands.ols - star)),
        "error_2SLS": float(np.linalg.norm(cands.two_sls - star)),
    }


def run_sensitivity(config: Config, seed: int, *, alpha_grid: Sequence[float] | None = None,
                    replicates: int | None = None, threads: int = 1) -> dict:
    """Utility gaps and estimation errors as each modelling knob is turned up.

    ``alpha1`` mixes in a logistic squashing of the covariates and
    ``alpha2`` perturbs each agent's effort conversion. One knob moves at a
    time while the other stays at zero.
    """
    if config.n != 1:
        raise ExperimentError(f"sensitivity needs exactly one environment, config has {config.n}")
    exp = config.experiment
    grid = tuple(alpha_grid or exp.alpha_grid)
    R = replicates or exp.replicates
    jobs = [(knob, a, r) for knob in ("alpha1", "alpha2") for a in grid for r in range(R)]

    def job(spec):
        knob, a, r = spec
        pop = config.population.replace(**{"alpha1": 0.0, "alpha2": 0.0, knob: a})
        try:
            return _sensitivity_replicate(config.replace(population=pop), seed, r)
        except (ValueError, ArithmeticError) as exc:
            raise ExperimentError(f"sensitivity {knob}={a}, replicate {r}: {exc}") from exc

    results = parallel_map(job, jobs, threads)
    rows = []
    metrics = ("gap_AO_OLS", "gap_AO_STAR", "error_MSLR", "error_OLS", "error_2SLS")
    for knob in ("alpha1", "alpha2"):
        for a in grid:
            chunk = [res for (k, aa, _), res in zip(jobs, results) if k == knob and aa == a]
            for metric in metrics:
                rows.append({"knob": knob, "alpha": a, "metric": metric,
                             **summarize([c[metric] for c in chunk])})
    return {"rows": rows}


def run_welfare(config: Config, seed: int, *, threads: int = 1) -> dict:
    """Regulator report per environment from one estimation replicate.

    The optimal direction comes from the probe fit; alignment, incentive
    gap and reduction bounds are evaluated against the MSLR estimate.
    """
    exp = config.experiment
    cands = estimate_candidates(config, seed, 0, threads=threads)
    effort = config.population.effort
    gammas = config.simulation.gammas
    deployed = [c.star for c in cands]
    reports = []
    rows = []
    for i, c in enumerate(cands):
        thetas = list(deployed)
        thetas[i] = c.star
        rep = build_welfare_report(c.ao, c.star, effort, gammas, i, thetas, m_grid=exp.bound_m_grid,
                                   lipschitz=exp.lipschitz, sigma=exp.bound_sigma)
        reports.append(rep)
        row = {"env": i + 1}
        row.update({f"theta_ao_{j + 1}": float(v) for j, v in enumerate(rep.theta_ao)})
        row.update({f"theta_star_hat_{j + 1}": float(v) for j, v in enumerate(c.star)})
        row.update({"cosine": rep.cosine_alignment, "regulation_ok": int(rep.regulation_ok),
                    "lambda": rep.lam, "improved_chance_ok": int(rep.improved_chance_ok)})
        row.update({f"bound_M{M:g}": b for M, b in rep.bound_curve})
        rows.append(row)
    return {"rows": rows, "reports": reports}
