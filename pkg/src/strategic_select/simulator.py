"""Round loop: publish parameters, agents respond, DMs select, agents enroll.

Every round draws from its own generator seeded by ``(master seed, stream,
round index)``, so a round's log does not depend on which worker ran it or
in what order.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .agents import perturb_effort_cohort, realize_covariates, sample_baseline_cohort
from .model import EnvironmentSpec, PopulationSpec, RoundLog, SimulationConfig
from .protocol import DeploymentSchedule
from .selection import ranking_select, sample_compliance_cohort, top_rho_select

__all__ = [
    "SimulationError",
    "derive_seed",
    "round_rng",
    "parallel_map",
    "run_round",
    "run_experiment",
    "measured_utility",
    "measured_cbp_cpi",
]

T = TypeVar("T")
R = TypeVar("R")


class SimulationError(ValueError):
    """A simulation request cannot be carried out."""


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    value = int(part)
    if value < 0:
        raise ValueError("seed components must be nonnegative")
    return value


def derive_seed(seed: int, *parts) -> int:
    """Deterministic 64-bit child seed from a master seed and labels.

    String labels are hashed with CRC-32 so that the result is stable across
    interpreter runs.
    """
    ss = np.random.SeedSequence([_key(seed)] + [_key(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def round_rng(seed: int, round_index: int, stream=0) -> np.random.Generator:
    """Generator for one round of one stream."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), _key(stream), _key(round_index)]))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` on a thread pool, results in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_round(population: PopulationSpec, envs: Sequence[EnvironmentSpec], thetas,
              rng: np.random.Generator, *, round_index: int = 0, batch_label: str | None = None,
              oracle: bool = False, clip_ranges=None) -> RoundLog:
    """Simulate one cohort facing the published parameters.

    Parameters
    ----------
    population : PopulationSpec
    envs : sequence of EnvironmentSpec
    thetas : array_like, shape (n, m)
        Parameter published by each DM.
    rng : numpy.random.Generator
        Consumed in a fixed order: types, baselines, outcome noise, effort
        perturbation (only when ``alpha2 > 0``), ranking draws (only for
        ``ranking_cdf`` environments), compliance.
    round_index : int
        Stored in the log.
    batch_label : str, optional
    oracle : bool
        Also record the counterfactual outcome of every agent in every
        environment.
    clip_ranges : sequence of (float, float), optional
        Per-coordinate bounds applied to the realised covariates.

    Returns
    -------
    RoundLog
    """
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    n = len(envs)
    m = population.m
    if th.shape != (n, m):
        raise SimulationError(f"expected parameters of shape ({n}, {m}), got {th.shape}")
    N = population.agents_per_round
    gammas = np.array([e.gamma for e in envs], dtype=float)
    stars = np.array([e.theta_star for e in envs], dtype=float)
    effort = population.effort

    groups = rng.choice(population.n_groups, size=N, p=np.asarray(population.group_probs))
    baseline = sample_baseline_cohort(groups, population, rng)
    noise = population.noise_means[groups] + population.noise_stds[groups] * rng.standard_normal((N, n))

    pull = gammas @ th
    if population.alpha2 > 0.0:
        agent_effort = perturb_effort_cohort(effort, population.alpha2, groups, population, rng)
        action = np.einsum("nmd,m->nd", agent_effort, pull)
    else:
        agent_effort = effort
        action = np.broadcast_to(effort.T @ pull, (N, population.d)).copy()
    scale = population.pooled_baseline_std() if population.alpha1 > 0.0 else None
    x = realize_covariates(baseline, action, agent_effort, population.alpha1, scale)
    if clip_ranges is not None:
        bounds = np.asarray(clip_ranges, dtype=float)
        x = np.clip(x, bounds[:, 0], bounds[:, 1])

    predictions = x @ th.T
    selected = np.empty((N, n), dtype=bool)
    for i, env in enumerate(envs):
        if env.selection_mode == "top_rho":
            selected[:, i] = top_rho_select(predictions[:, i], env.rho)
        else:
            selected[:, i] = ranking_select(predictions[:, i], rng)
    z = sample_compliance_cohort(selected, gammas, rng)

    y_all = x @ stars.T + noise
    outcome = np.full(N, math.nan)
    enrolled = z > 0
    outcome[enrolled] = y_all[enrolled, z[enrolled] - 1]
    return RoundLog(
        round=int(round_index),
        thetas=th.copy(),
        group=groups,
        baseline=baseline,
        action=action,
        covariates=x,
        predictions=predictions,
        selected=selected,
        compliance=z,
        outcome=outcome,
        batch_label=batch_label,
        oracle_outcomes=y_all if oracle else None,
    )


def run_experiment(config: SimulationConfig, schedule: DeploymentSchedule, seed: int, *,
                   rounds: int | None = None, stream=0, oracle: bool = False,
                   threads: int = 1) -> list[RoundLog]:
    """Simulate the first ``rounds`` rounds of a schedule.

    Parameters
    ----------
    config : SimulationConfig
    schedule : DeploymentSchedule
        Must provide one parameter per environment.
    seed : int
        Master seed; round ``t`` uses ``round_rng(seed, t, stream)``.
    rounds : int, optional
        Defaults to the schedule length. ``0`` yields an empty list.
    stream : int or str
        Extra label separating independent uses of one master seed.
    oracle : bool
    threads : int
        Worker count; results are identical for any value.
    """
    total = schedule.T if rounds is None else int(rounds)
    if total < 0 or total > schedule.T:
        raise SimulationError(f"cannot run {total} rounds of a {schedule.T}-round schedule")
    if schedule.n != config.n or schedule.m != config.m:
        raise SimulationError(
            f"schedule has {schedule.n} DMs of dimension {schedule.m}; config needs {config.n} x {config.m}"
        )
    labels = schedule.batch_labels()

    def one(t: int) -> RoundLog:
        return run_round(
            config.population, config.environments, schedule.theta(t), round_rng(seed, t, stream),
            round_index=t, batch_label=labels.get(t), oracle=oracle, clip_ranges=config.clip_ranges,
        )

    return parallel_map(one, range(1, total + 1), threads)


def _complied(logs: Iterable[RoundLog], env: int):
    xs, bs, ys = [], [], []
    for log in logs:
        mask = log.compliance == env
        xs.append(log.covariates[mask])
        bs.append(log.baseline[mask])
        ys.append(log.outcome[mask])
    if not ys:
        raise SimulationError("no logs given")
    y = np.concatenate(ys)
    if y.size == 0:
        raise SimulationError(f"no agent enrolled in environment {env}")
    return np.concatenate(xs), np.concatenate(bs), y


def _mean_stderr(v: np.ndarray) -> tuple[float, float]:
    if v.size == 1:
        return float(v[0]), 0.0
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size))


def measured_utility(logs: Sequence[RoundLog], env: int) -> tuple[float, float, int]:
    """Mean outcome of agents enrolled in 1-based environment ``env``.

    Returns
    -------
    mean, stderr, count
    """
    _, _, y = _complied(logs, env)
    mean, se = _mean_stderr(y)
    return mean, se, int(y.size)


def measured_cbp_cpi(logs: Sequence[RoundLog], env: int, theta_star) -> tuple[float, float]:
    """Split the measured utility into base performance and improvement.

    The improvement of an agent is ``(x - b)' theta*``, which equals
    ``(E a)' theta*`` when covariates are linear in effort. The base part is
    the remainder ``b' theta* + o``, recovered from the logged outcome.
    """
    x, b, y = _complied(logs, env)
    star = np.asarray(theta_star, dtype=float)
    cpi = (x - b) @ star
    cbp = y - cpi
    return float(np.mean(cbp)), float(np.mean(cpi))
