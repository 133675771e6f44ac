"""Agent behaviour: baselines, best response, effort conversion, covariates.

Scalar functions mirror the single-agent model. The ``*_cohort`` variants
apply the same maps to a whole round at once and are what the simulator uses.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .model import PopulationSpec

__all__ = [
    "DimensionError",
    "incentive",
    "best_response",
    "agent_utility",
    "sample_baseline",
    "sample_baseline_cohort",
    "perturbation_std",
    "perturb_effort",
    "perturb_effort_cohort",
    "logistic",
    "realize_covariates",
]

PERTURB_FRACTION = 0.2
PERTURB_FLOOR = 0.1


class DimensionError(ValueError):
    """Shapes of parameters, preferences or effort matrix disagree."""


def incentive(thetas, gammas) -> np.ndarray:
    """Preference-weighted parameter sum ``sum_i gamma_i theta_i``."""
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    g = np.asarray(gammas, dtype=float).ravel()
    if th.shape[0] != g.shape[0] or th.shape[0] < 1:
        raise DimensionError(f"{th.shape[0]} parameter vectors but {g.shape[0]} preferences")
    if np.any(g < 0):
        raise ValueError("preferences must be nonnegative")
    return g @ th


def best_response(thetas: Sequence, gammas: Sequence[float], effort) -> np.ndarray:
    """Utility-maximising action ``E' sum_i gamma_i theta_i``.

    Parameters
    ----------
    thetas : sequence of array_like, each of length m
    gammas : sequence of float
    effort : array_like, shape (m, d)

    Returns
    -------
    ndarray, shape (d,)

    Examples
    --------
    >>> best_response([[1.0, 0.5]], [1.0], [[10.0, 0.0], [0.0, 1.0]])
    array([10. ,  0.5])
    """
    e = np.asarray(effort, dtype=float)
    s = incentive(thetas, gammas)
    if e.ndim != 2 or e.shape[0] != s.shape[0]:
        raise DimensionError(f"effort matrix shape {e.shape} incompatible with parameters of length {s.shape[0]}")
    return e.T @ s


def agent_utility(action, thetas, gammas, baseline, effort) -> float:
    """Preference-weighted predicted score minus quadratic effort cost."""
    a = np.asarray(action, dtype=float)
    b = np.asarray(baseline, dtype=float)
    e = np.asarray(effort, dtype=float)
    s = incentive(thetas, gammas)
    if e.shape != (b.shape[0], a.shape[0]) or s.shape[0] != b.shape[0]:
        raise DimensionError(
            f"shapes disagree: action {a.shape}, baseline {b.shape}, effort {e.shape}, theta {s.shape}"
        )
    return float((b + e @ a) @ s - 0.5 * a @ a)


def sample_baseline(group: int, population: PopulationSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one baseline vector for an agent of the given type."""
    mu = population.baseline_means[group]
    sd = population.baseline_stds[group]
    return rng.normal(mu, sd)


def sample_baseline_cohort(groups: np.ndarray, population: PopulationSpec,
                           rng: np.random.Generator) -> np.ndarray:
    """Baselines for a cohort, shape (N, m)."""
    mu = population.baseline_means[groups]
    sd = population.baseline_stds[groups]
    return mu + sd * rng.standard_normal(mu.shape)


def perturbation_std(effort, group: int, population: PopulationSpec) -> np.ndarray:
    """Entrywise std of the random effort matrix for one type.

    20% of each entry's magnitude with a floor of 0.1, times the type's
    ``effort_noise_scale``.
    """
    e = np.asarray(effort, dtype=float)
    base = np.maximum(PERTURB_FRACTION * np.abs(e), PERTURB_FLOOR)
    return population.effort_noise_scale[group] * base


def perturb_effort(effort, alpha2: float, group: int, population: PopulationSpec,
                   rng: np.random.Generator) -> np.ndarray:
    """Mix the effort matrix with a random draw centred on it.

    Returns ``(1 - alpha2) E + alpha2 E_rand``. With ``alpha2 == 0`` the input
    is returned unchanged and no random numbers are consumed.
    """
    e = np.asarray(effort, dtype=float)
    if not 0.0 <= alpha2 <= 1.0:
        raise ValueError("alpha2 must lie in [0, 1]")
    if alpha2 == 0.0:
        return e.copy()
    e_rand = e + perturbation_std(e, group, population) * rng.standard_normal(e.shape)
    return (1.0 - alpha2) * e + alpha2 * e_rand


def perturb_effort_cohort(effort, alpha2: float, groups: np.ndarray, population: PopulationSpec,
                          rng: np.random.Generator) -> np.ndarray:
    """Per-agent effort matrices, shape (N, m, d)."""
    e = np.asarray(effort, dtype=float)
    base = np.maximum(PERTURB_FRACTION * np.abs(e), PERTURB_FLOOR)
    scale = np.asarray(population.effort_noise_scale, dtype=float)[groups]
    noise = rng.standard_normal((groups.shape[0],) + e.shape)
    return e + alpha2 * scale[:, None, None] * base * noise


def logistic(z):
    """Numerically stable logistic function."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def realize_covariates(baseline, action, effort, alpha1: float, scale=None) -> np.ndarray:
    """Covariates after effort, with the optional logistic squashing.

    Parameters
    ----------
    baseline : array_like, shape (m,) or (N, m)
    action : array_like, shape (d,) or (N, d)
    effort : array_like, shape (m, d) or (N, m, d)
    alpha1 : float
        Mix weight of the squashed part.
    scale : array_like, shape (m,), optional
        Per-coordinate squashing scale; required when ``alpha1 > 0``.

    Returns
    -------
    ndarray
        ``(1 - alpha1) l + alpha1 s * logistic(l / s)`` with ``l = b + E a``.
    """
    b = np.asarray(baseline, dtype=float)
    a = np.asarray(action, dtype=float)
    e = np.asarray(effort, dtype=float)
    if not 0.0 <= alpha1 <= 1.0:
        raise ValueError("alpha1 must lie in [0, 1]")
    linear = b + np.einsum("...md,...d->...m", e, a)
    if alpha1 == 0.0:
        return linear
    if scale is None:
        raise ValueError("a squashing scale is required when alpha1 > 0")
    s = np.asarray(scale, dtype=float)
    return (1.0 - alpha1) * linear + alpha1 * s * logistic(linear / s)
