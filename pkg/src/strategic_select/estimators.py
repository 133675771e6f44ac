"""Estimators of the causal parameters from selectively observed logs.

Environments are addressed by their 1-based compliance code, as in
``RoundLog.compliance``.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import Estimate, RoundLog
from .numerics import InsufficientDataError, NumericsError, SingularMatrixError, ols_fit
from .protocol import DeploymentSchedule

__all__ = [
    "EstimationError",
    "InsufficientBatchesError",
    "RankDeficiencyError",
    "BatchDroppedWarning",
    "cohort_means",
    "mslr_from_pairs",
    "mslr_fit",
    "naive_ols_fit",
    "omega_fit",
    "two_sls_fit",
    "kappa_fit",
    "ResultRecord",
    "append_result",
]

RANK_RTOL = 1e-10


class EstimationError(ValueError):
    """An estimator cannot be computed from the data supplied."""


class InsufficientBatchesError(EstimationError):
    """Fewer usable batches than coefficients."""


class RankDeficiencyError(EstimationError):
    """The regressors do not span the required space.

    Attributes
    ----------
    direction : ndarray
        Unit vector (in regressor coordinates) along which the design has no
        variation.
    """

    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(f"{message}; deficient direction {np.array2string(direction, precision=4)}")
        self.direction = direction


class BatchDroppedWarning(UserWarning):
    """A batch had too few enrolled agents in one of its rounds."""


def cohort_means(log: RoundLog, env: int) -> tuple[int, np.ndarray, float]:
    """Count, mean covariates and mean outcome of agents enrolled in ``env``."""
    mask = log.compliance == env
    count = int(mask.sum())
    if count == 0:
        return 0, np.full(log.covariates.shape[1], np.nan), float("nan")
    return count, log.covariates[mask].mean(axis=0), float(log.outcome[mask].mean())


def _by_round(logs: Sequence[RoundLog]) -> dict[int, RoundLog]:
    table = {log.round: log for log in logs}
    if len(table) != len(logs):
        raise EstimationError("duplicate round indices in logs")
    return table


def _bootstrap(dx: np.ndarray, dy: np.ndarray, n_boot: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    draws = []
    k = dx.shape[0]
    for _ in range(n_boot):
        idx = rng.integers(0, k, size=k)
        try:
            draws.append(ols_fit(dx[idx], dy[idx]))
        except NumericsError:
            continue
    if len(draws) < 2:
        return np.full(dx.shape[1], np.nan)
    return np.std(np.array(draws), axis=0, ddof=1)


def mslr_from_pairs(logs: Sequence[RoundLog] | Mapping[int, RoundLog], env: int,
                    pairs: Sequence[tuple[int, int]], *, min_cell: int = 5,
                    bootstrap: int = 0, seed: int = 0) -> Estimate:
    """Mean-shift regression over explicit round pairs.

    For each pair ``(t1, t2)`` the enrolled-cohort mean outcome and mean
    covariates of round ``t2`` minus those of round ``t1`` form one
    observation. Outcome differences are regressed on covariate differences
    without an intercept.

    Parameters
    ----------
    logs : sequence of RoundLog or mapping round -> RoundLog
    env : int
        1-based environment.
    pairs : sequence of (int, int)
    min_cell : int
        Pairs where either round has fewer enrolled agents are dropped with a
        :class:`BatchDroppedWarning`.
    bootstrap : int
        Number of batch resamples for standard errors; 0 skips them.
    seed : int
        Bootstrap seed.

    Returns
    -------
    Estimate
    """
    table = logs if isinstance(logs, Mapping) else _by_round(logs)
    dx, dy = [], []
    used = 0
    dropped = []
    for t1, t2 in pairs:
        if t1 not in table or t2 not in table:
            raise EstimationError(f"pair ({t1}, {t2}) refers to rounds missing from the logs")
        c1, x1, y1 = cohort_means(table[t1], env)
        c2, x2, y2 = cohort_means(table[t2], env)
        if min(c1, c2) < max(min_cell, 1):
            dropped.append((t1, t2))
            continue
        dx.append(x2 - x1)
        dy.append(y2 - y1)
        used += c1 + c2
    if dropped:
        warnings.warn(
            f"environment {env}: dropped {len(dropped)} batches with fewer than {min_cell} enrolled agents",
            BatchDroppedWarning,
            stacklevel=2,
        )
    m = next(iter(table.values())).covariates.shape[1] if table else 0
    if len(dx) < max(m, 1):
        raise InsufficientBatchesError(f"environment {env}: {len(dx)} usable batches, need at least {m}")
    dx_arr, dy_arr = np.array(dx), np.array(dy)
    try:
        coef = ols_fit(dx_arr, dy_arr)
    except SingularMatrixError as exc:
        raise EstimationError(f"environment {env}: covariate shifts do not span the space ({exc})") from exc
    resid = dy_arr - dx_arr @ coef
    stderr = _bootstrap(dx_arr, dy_arr, bootstrap, seed) if bootstrap > 0 else None
    return Estimate(coef, None, used, len(dx), float(np.linalg.norm(resid)), stderr)


def mslr_fit(logs: Sequence[RoundLog], env: int, schedule: DeploymentSchedule, *,
             require_coalition: bool = True, upto: int | None = None, min_cell: int = 5,
             bootstrap: int = 0, seed: int = 0) -> Estimate:
    """Mean-shift regression using the batches of a deployment schedule.

    With ``require_coalition`` (the default) only pairs where every
    coalition DM scaled its parameter are used; an environment outside the
    coalition, or a schedule without coalition pairs, is an error. Setting
    it to False uses the environment's own batches regardless of what the
    other DMs did; the pairs then lose their exogeneity guarantee whenever a
    rival changes its parameter between the two rounds.
    """
    dm = env - 1
    if not 0 <= dm < schedule.n:
        raise EstimationError(f"environment {env} not in a schedule of {schedule.n} DMs")
    if require_coalition:
        if dm not in schedule.coalition:
            raise InsufficientBatchesError(f"environment {env} is not part of the coalition")
        if schedule.coalition != tuple(range(schedule.n)):
            raise InsufficientBatchesError("coalition does not include every DM; no valid pairs")
        pairs = schedule.coalition_pairs(upto)
    else:
        pairs = schedule.pairs(dm, upto)
    if not pairs:
        raise InsufficientBatchesError(f"environment {env}: schedule has no usable batch pairs")
    return mslr_from_pairs(logs, env, pairs, min_cell=min_cell, bootstrap=bootstrap, seed=seed)


def naive_ols_fit(logs: Sequence[RoundLog], env: int) -> Estimate:
    """Regression of enrolled outcomes on enrolled covariates, with intercept."""
    xs, ys = [], []
    for log in logs:
        mask = log.compliance == env
        xs.append(log.covariates[mask])
        ys.append(log.outcome[mask])
    if not xs:
        raise InsufficientDataError("no logs given")
    x, y = np.concatenate(xs), np.concatenate(ys)
    if y.size < x.shape[1] + 1:
        raise InsufficientDataError(f"environment {env}: {y.size} enrolled agents, need {x.shape[1] + 1}")
    coef = ols_fit(x, y, with_intercept=True)
    resid = y - x @ coef[:-1] - coef[-1]
    return Estimate(coef[:-1], float(coef[-1]), int(y.size), None, float(np.linalg.norm(resid)))


def _pull(log: RoundLog, gammas: np.ndarray) -> np.ndarray:
    return gammas @ log.thetas


def _check_rank(design: np.ndarray, what: str) -> None:
    _, s, vt = np.linalg.svd(design, full_matrices=False)
    if s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficiencyError(f"{what} is rank deficient", vt[-1])


def omega_fit(logs: Sequence[RoundLog], gammas) -> tuple[np.ndarray, np.ndarray]:
    """Regress per-round covariate means on the preference-weighted parameters.

    Returns
    -------
    omega : ndarray, shape (m, m)
        Estimated map from ``sum_i gamma_i theta_i`` to the mean covariate
        shift, so that ``x_bar ~ b_bar + omega @ pull``.
    b_bar : ndarray, shape (m,)
        Estimated mean baseline.

    Raises
    ------
    RankDeficiencyError
        When the deployed parameters, with the constant, do not span
        ``m + 1`` dimensions (for example when every preference is zero).
    """
    g = np.asarray(gammas, dtype=float)
    if not logs:
        raise InsufficientDataError("no logs given")
    pulls = np.array([_pull(log, g) for log in logs])
    means = np.array([log.covariates.mean(axis=0) for log in logs])
    m = pulls.shape[1]
    if pulls.shape[0] < m + 1:
        raise InsufficientDataError(f"{pulls.shape[0]} rounds, need at least {m + 1}")
    design = np.column_stack([pulls, np.ones(pulls.shape[0])])
    _check_rank(design, "deployed parameters (with constant)")
    coef = ols_fit(pulls, means, with_intercept=True)
    return coef[:m].T.copy(), coef[m].copy()


def two_sls_fit(logs: Sequence[RoundLog], env: int, gammas) -> Estimate:
    """Two-stage regression with the deployed parameters as instruments.

    Stage one predicts each round's mean covariates from
    :func:`omega_fit`; stage two regresses enrolled outcomes on their round's
    predicted covariates, with intercept.
    """
    g = np.asarray(gammas, dtype=float)
    omega, b_bar = omega_fit(logs, g)
    rows, ys = [], []
    for log in logs:
        mask = log.compliance == env
        c = int(mask.sum())
        if c == 0:
            continue
        xhat = b_bar + omega @ _pull(log, g)
        rows.append(np.broadcast_to(xhat, (c, xhat.shape[0])))
        ys.append(log.outcome[mask])
    if not ys:
        raise InsufficientDataError(f"environment {env}: no enrolled agents")
    xh, y = np.concatenate(rows), np.concatenate(ys)
    try:
        coef = ols_fit(xh, y, with_intercept=True)
    except SingularMatrixError as exc:
        raise EstimationError(f"environment {env}: predicted covariates are degenerate ({exc})") from exc
    resid = y - xh @ coef[:-1] - coef[-1]
    return Estimate(coef[:-1], float(coef[-1]), int(y.size), None, float(np.linalg.norm(resid)))


def kappa_fit(thetas, q, rival_thetas=None) -> tuple[np.ndarray, float]:
    """Linear fit of measured utility against the DM's own parameter.

    Parameters
    ----------
    thetas : array_like, shape (S, m)
        Parameters the DM deployed.
    q : array_like, shape (S,)
        Measured utility at each.
    rival_thetas : array_like, shape (S, ...), optional
        Rival parameters in force at each sample. They must all be equal.

    Returns
    -------
    kappa : ndarray, shape (m,)
        Slope, the un-normalised direction of the optimal parameter.
    zeta : float
        Intercept.
    """
    th = np.asarray(thetas, dtype=float)
    qv = np.asarray(q, dtype=float)
    if th.ndim != 2 or qv.shape != (th.shape[0],):
        raise EstimationError(f"thetas {th.shape} and q {qv.shape} do not line up")
    m = th.shape[1]
    distinct = np.unique(th, axis=0).shape[0]
    if distinct < m + 1:
        raise InsufficientDataError(f"{distinct} distinct parameters, need at least {m + 1}")
    if rival_thetas is not None:
        riv = np.asarray(rival_thetas, dtype=float).reshape(th.shape[0], -1)
        if riv.size and np.any(riv != riv[0]):
            raise EstimationError("rival parameters must be held fixed across samples")
    try:
        coef = ols_fit(th, qv, with_intercept=True)
    except SingularMatrixError as exc:
        raise EstimationError(f"probe parameters are degenerate ({exc})") from exc
    return coef[:m].copy(), float(coef[m])


@dataclass(frozen=True)
class ResultRecord:
    """One estimator output for the results CSV."""

    method: str
    env: int
    coefficients: tuple
    stderr: tuple | None
    sample_size: int
    batch_count: int | None

    @classmethod
    def from_estimate(cls, method: str, env: int, est: Estimate) -> "ResultRecord":
        se = None if est.stderr is None else tuple(float(v) for v in est.stderr)
        return cls(method, env, tuple(float(v) for v in est.coefficients), se,
                   est.sample_size, est.batch_count)


def append_result(path, record: ResultRecord) -> None:
    """Append a record, writing the header if the file is new or empty."""
    m = len(record.coefficients)
    header = (["method", "env"] + [f"coef_{j + 1}" for j in range(m)]
              + [f"stderr_{j + 1}" for j in range(m)] + ["sample_size", "batch_count"])
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    if not new:
        with open(path, newline="") as fh:
            existing = next(csv.reader(fh))
        if existing != header:
            raise EstimationError(f"{path}: header {existing} does not match {header}")
    se = record.stderr if record.stderr is not None else ("",) * m
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow([record.method, record.env] + [repr(v) for v in record.coefficients]
                   + [repr(v) if v != "" else "" for v in se]
                   + [record.sample_size, "" if record.batch_count is None else record.batch_count])
