"""Selection rules of the decision makers and agents' compliance choice."""

from __future__ import annotations

import warnings

import numpy as np

from .numerics import empirical_cdf

__all__ = [
    "ComplianceFallbackWarning",
    "ranking_prob",
    "top_rho_select",
    "ranking_select",
    "sample_compliance",
    "sample_compliance_cohort",
]


# Guards the comparison k / n >= 1 - rho against representation error in 1 - rho.
_RANK_EPS = 1e-9


class ComplianceFallbackWarning(UserWarning):
    """Every admitting environment has zero preference; choice made uniformly."""


def ranking_prob(score, population_scores):
    """Admission probability under ranking selection.

    The fraction of the cohort scoring at most ``score``.
    """
    return empirical_cdf(population_scores, score)


def top_rho_select(scores, rho: float) -> np.ndarray:
    """Deterministically admit the top ``rho`` fraction of a cohort.

    An agent is admitted when the share of the cohort scoring strictly below
    it is at least ``1 - rho``. Tied agents share that share, so ties are
    treated identically whatever their index.

    Parameters
    ----------
    scores : array_like, shape (N,)
    rho : float in (0, 1]

    Returns
    -------
    ndarray of bool, shape (N,)

    Examples
    --------
    >>> top_rho_select([1.0, 2.0, 3.0, 4.0], 0.5)
    array([False, False,  True,  True])
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    below = np.searchsorted(np.sort(s), s, side="left")
    return below >= s.size * (1.0 - rho) - _RANK_EPS


def ranking_select(scores, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli admission with probability equal to the cohort CDF of the score."""
    s = np.asarray(scores, dtype=float)
    p = empirical_cdf(s, s)
    return rng.random(s.size) < p


def sample_compliance(selected, gammas, rng: np.random.Generator) -> int:
    """Pick the environment an admitted agent enrolls in.

    Parameters
    ----------
    selected : array_like of bool, shape (n,)
    gammas : array_like, shape (n,)
    rng : numpy.random.Generator

    Returns
    -------
    int
        0 when no environment admitted the agent, otherwise a 1-based index
        drawn with probability proportional to the preference weights of the
        admitting environments.
    """
    w = np.asarray(selected, dtype=bool)
    g = np.asarray(gammas, dtype=float)
    if w.shape != g.shape:
        raise ValueError(f"{w.size} selection flags but {g.size} preferences")
    return int(sample_compliance_cohort(w[None, :], g, rng)[0])


def sample_compliance_cohort(selected: np.ndarray, gammas, rng: np.random.Generator) -> np.ndarray:
    """Vectorised compliance for a cohort.

    One uniform draw per agent is consumed whether or not it was admitted,
    keeping the random stream aligned across scenarios.
    """
    w = np.asarray(selected, dtype=bool)
    g = np.asarray(gammas, dtype=float)
    weights = w * g[None, :]
    total = weights.sum(axis=1)
    admitted = w.any(axis=1)
    fallback = admitted & (total <= 0.0)
    if np.any(fallback):
        warnings.warn(
            f"{int(fallback.sum())} agents admitted only by zero-preference environments; "
            "choosing uniformly among admitters",
            ComplianceFallbackWarning,
            stacklevel=2,
        )
        weights = np.where(fallback[:, None], w.astype(float), weights)
        total = weights.sum(axis=1)
    u = rng.random(w.shape[0])
    safe = np.where(total > 0, total, 1.0)
    cum = np.cumsum(weights, axis=1) / safe[:, None]
    choice = (u[:, None] >= cum).sum(axis=1)
    # u < 1 so choice lands on an admitted column; clamp guards rounding in cum
    choice = np.minimum(choice, w.shape[1] - 1)
    # rounding could land on a zero-weight column right after the last positive one
    bad = admitted & ~w[np.arange(w.shape[0]), choice]
    if np.any(bad):
        last = w.shape[1] - 1 - np.argmax(weights[:, ::-1] > 0, axis=1)
        choice = np.where(bad, last, choice)
    return np.where(admitted, choice + 1, 0)
