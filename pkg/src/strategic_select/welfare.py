"""Regulator-facing quantities: optimal parameters, regulation checks, bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agents import best_response
from .model import EnvironmentSpec, PopulationSpec
from .numerics import std_normal_cdf

__all__ = [
    "DegenerateDirectionError",
    "theta_ao_closed_form",
    "rescale_theta",
    "regulation_check",
    "conditional_improvement",
    "lambda_single",
    "lambda_multi",
    "reduction_bound",
    "improved_chance_check",
    "admission_clamp",
    "empirical_reduction_probability",
    "unit_sphere_grid",
    "WelfareReport",
    "build_welfare_report",
]


class DegenerateDirectionError(ValueError):
    """A direction is requested from a zero vector."""


def _gram(effort) -> np.ndarray:
    e = np.asarray(effort, dtype=float)
    return e @ e.T


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateDirectionError(f"{what} is the zero vector")
    return v / norm


def theta_ao_closed_form(alpha, gamma: float, effort, theta_star) -> np.ndarray:
    """Unit vector along ``alpha + gamma E E' theta*``.

    Examples
    --------
    >>> theta_ao_closed_form([0.0, 0.0], 1.0, np.eye(2), [3.0, 4.0])
    array([0.6, 0.8])
    """
    a = np.asarray(alpha, dtype=float)
    star = np.asarray(theta_star, dtype=float)
    return _unit(a + gamma * _gram(effort) @ star, "alpha + gamma E E' theta*")


def rescale_theta(theta, tau: float, mode: str = "ao") -> np.ndarray:
    """Bring a parameter to the common norm ``tau`` used for comparisons.

    ``mode="ao"`` rescales to norm ``tau`` exactly. ``mode="ols"`` only
    shrinks vectors longer than ``tau`` and never enlarges.
    """
    th = np.asarray(theta, dtype=float)
    if tau <= 0:
        raise ValueError("tau must be positive")
    norm = float(np.linalg.norm(th))
    if norm == 0.0:
        raise DegenerateDirectionError("cannot rescale the zero vector")
    if mode == "ao":
        return th * (tau / norm)
    if mode == "ols":
        return th * (tau / norm) if norm > tau else th.copy()
    raise ValueError(f"unknown rescale mode {mode!r}")


def regulation_check(theta, effort, theta_star) -> tuple[float, bool]:
    """Cosine between ``theta`` and ``E E' theta*``; passes iff strictly positive."""
    th = _unit(np.asarray(theta, dtype=float), "theta")
    target = _unit(_gram(effort) @ np.asarray(theta_star, dtype=float), "E E' theta*")
    cos = float(np.clip(th @ target, -1.0, 1.0))
    return cos, cos > 0.0


def conditional_improvement(thetas, gammas, effort, theta_star_i) -> float:
    """Mean outcome gain from effort, ``(sum_j gamma_j theta_j)' E E' theta*_i``."""
    pull = np.asarray(gammas, dtype=float) @ np.atleast_2d(np.asarray(thetas, dtype=float))
    return float(pull @ _gram(effort) @ np.asarray(theta_star_i, dtype=float))


def lambda_single(theta_ao, theta_star, effort, gamma: float) -> float:
    """Incentive gap ``gamma (ao' G ao - star' G star)`` with ``G = E E'``."""
    ao = np.asarray(theta_ao, dtype=float)
    star = np.asarray(theta_star, dtype=float)
    g = _gram(effort)
    return float(gamma * (ao @ g @ ao - star @ g @ star))


def lambda_multi(rival_thetas, gammas, theta_ao_i, theta_star_i, effort, i: int = 0) -> float:
    """Incentive gap of DM ``i`` with rivals' parameters held fixed.

    Parameters
    ----------
    rival_thetas : sequence of array_like
        Parameters of every DM; entry ``i`` is ignored.
    gammas : sequence of float
        Preferences of every DM.
    theta_ao_i, theta_star_i : array_like
    effort : array_like
    i : int
        0-based index of the DM of interest.
    """
    e = np.asarray(effort, dtype=float)
    others = [np.asarray(t, dtype=float) for t in rival_thetas]
    ao = np.asarray(theta_ao_i, dtype=float)
    star = np.asarray(theta_star_i, dtype=float)
    with_ao = list(others)
    with_ao[i] = ao
    with_star = list(others)
    with_star[i] = star
    a_ao = best_response(with_ao, gammas, e)
    a_star = best_response(with_star, gammas, e)
    return float(a_ao @ e.T @ ao - a_star @ e.T @ star)


def reduction_bound(M: float, L: float, lam: float, sigma: float, theta_ao, theta_star) -> tuple[float, bool]:
    """Gaussian bound on the chance that switching to ``theta_ao`` costs more than ``M``.

    Returns
    -------
    bound : float
        ``Phi((-M / L - lam) / (sigma |theta_ao - theta_star|))``.
    degenerate : bool
        True when the two parameters coincide, in which case no reduction is
        possible and the bound is 0.
    """
    if M <= 0 or L <= 0 or sigma <= 0:
        raise ValueError("M, L and sigma must be positive")
    gap = float(np.linalg.norm(np.asarray(theta_ao, dtype=float) - np.asarray(theta_star, dtype=float)))
    if gap == 0.0:
        return 0.0, True
    return std_normal_cdf((-M / L - lam) / (sigma * gap)), False


def improved_chance_check(rival_thetas, gammas, theta_ao_i, theta_star_i, effort, i: int = 0) -> bool:
    """True iff moving DM ``i`` to ``theta_ao_i`` raises every rival's predictions.

    Checks ``gamma_i (theta_ao_i - theta*_i)' E E' theta_j >= 0`` for all
    ``j != i``.
    """
    g = _gram(effort)
    diff = np.asarray(theta_ao_i, dtype=float) - np.asarray(theta_star_i, dtype=float)
    gam = np.asarray(gammas, dtype=float)
    for j, th in enumerate(rival_thetas):
        if j == i:
            continue
        if gam[i] * diff @ g @ np.asarray(th, dtype=float) < 0.0:
            return False
    return True


def admission_clamp(yhat, lipschitz: float, centre: float) -> np.ndarray:
    """Piecewise-linear admission chance ``clamp(L (yhat - c), 0, 1)``."""
    return np.clip(lipschitz * (np.asarray(yhat, dtype=float) - centre), 0.0, 1.0)


def empirical_reduction_probability(population: PopulationSpec, env: EnvironmentSpec, theta_a, theta_b,
                                    M: float, n_samples: int, rng: np.random.Generator, *,
                                    sigma: float = 1.0, lipschitz: float = 1.0,
                                    rivals: Sequence | None = None, rival_gammas: Sequence[float] | None = None,
                                    ) -> tuple[float, float]:
    """Monte Carlo estimate of ``P(xi(theta_a) - xi(theta_b) > M)``.

    Baselines are drawn from N(0, sigma^2 I). Each agent best responds to
    the published parameter (plus fixed rivals, if given), and its
    admission chance is :func:`admission_clamp` of its prediction. The
    clamp is centred on the median prediction under ``theta_a`` and the same
    centre is used for both parameters.

    Returns
    -------
    estimate, stderr
    """
    if n_samples < 100:
        raise ValueError("at least 100 samples are required")
    e = population.effort
    ta = np.asarray(theta_a, dtype=float)
    tb = np.asarray(theta_b, dtype=float)
    rivals = [] if rivals is None else [np.asarray(r, dtype=float) for r in rivals]
    rg = [] if rival_gammas is None else list(rival_gammas)
    gam = [env.gamma] + rg

    def predictions(theta: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = best_response([theta] + rivals, gam, e)
        return (b + e @ a) @ theta

    b = sigma * rng.standard_normal((n_samples, population.m))
    ya, yb = predictions(ta, b), predictions(tb, b)
    centre = float(np.median(ya))
    drop = admission_clamp(ya, lipschitz, centre) - admission_clamp(yb, lipschitz, centre)
    p = float(np.mean(drop > M))
    return p, math.sqrt(p * (1.0 - p) / n_samples)


def unit_sphere_grid(m: int, n: int = 1000) -> np.ndarray:
    """Near-uniform points on the unit sphere of R^m (m = 2 or 3).

    Circle points are equally spaced in angle; sphere points follow the
    golden-angle spiral.
    """
    k = np.arange(n)
    if m == 2:
        ang = 2.0 * math.pi * k / n
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if m == 3:
        z = 1.0 - (2.0 * k + 1.0) / n
        r = np.sqrt(1.0 - z * z)
        phi = math.pi * (3.0 - math.sqrt(5.0)) * k
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    raise ValueError("grid available for m = 2 or 3 only")


@dataclass(frozen=True)
class WelfareReport:
    """Regulator summary for one environment."""

    theta_ao: np.ndarray
    cosine_alignment: float
    regulation_ok: bool
    lam: float
    bound_curve: tuple = field(default_factory=tuple)
    improved_chance_ok: bool = True

    def to_dict(self) -> dict:
        return {
            "theta_ao": [float(v) for v in self.theta_ao],
            "cosine_alignment": self.cosine_alignment,
            "regulation_ok": self.regulation_ok,
            "lambda": self.lam,
            "bound_curve": [{"M": m, "bound": b} for m, b in self.bound_curve],
            "improved_chance_ok": self.improved_chance_ok,
        }


def build_welfare_report(theta_ao, theta_star, effort, gammas, i: int = 0, thetas=None, *,
                         m_grid: Sequence[float] = (0.01, 0.05, 0.1), lipschitz: float = 1.0,
                         sigma: float = 1.0) -> WelfareReport:
    """Assemble the regulator summary for DM ``i``.

    ``theta_ao`` is normalised before use. ``thetas`` holds every DM's
    deployed parameter; it defaults to ``theta_star`` for DM ``i`` alone.
    """
    ao = _unit(np.asarray(theta_ao, dtype=float), "theta_ao")
    star = np.asarray(theta_star, dtype=float)
    gam = np.asarray(gammas, dtype=float)
    all_thetas = [star] if thetas is None else [np.asarray(t, dtype=float) for t in thetas]
    cos, ok = regulation_check(ao, effort, star)
    lam = lambda_multi(all_thetas, gam, ao, star, effort, i) if len(all_thetas) > 1 else lambda_single(
        ao, star, effort, float(gam[i]))
    curve = tuple((float(M), reduction_bound(M, lipschitz, lam, sigma, ao, star)[0]) for M in m_grid)
    chance = improved_chance_check(all_thetas, gam, ao, star, effort, i)
    return WelfareReport(ao, cos, ok, lam, curve, chance)
