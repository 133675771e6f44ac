import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import ao_of, sample_valid_config
from strategic_select.model import EnvironmentSpec, default_population
from strategic_select.numerics import std_normal_cdf
from strategic_select.welfare import (
    DegenerateDirectionError,
    WelfareReport,
    admission_clamp,
    build_welfare_report,
    conditional_improvement,
    empirical_reduction_probability,
    improved_chance_check,
    lambda_multi,
    lambda_single,
    reduction_bound,
    regulation_check,
    rescale_theta,
    theta_ao_closed_form,
    unit_sphere_grid,
)

vec2 = st.tuples(st.floats(-5, 5), st.floats(-5, 5)).map(np.array)
E_EXAMPLE = np.diag([2.0, 1.0])
STAR1, STAR2 = np.array([0.4, 0.9]), np.array([0.6, 0.7])


def angle(u, v):
    c = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.acos(max(-1.0, min(1.0, c)))


# optimal direction


def test_ao_pure_incentive():
    star = np.array([3.0, -4.0])
    np.testing.assert_allclose(theta_ao_closed_form([0.0, 0.0], 1.0, np.eye(2), star), star / 5.0)


def test_ao_pure_selection():
    np.testing.assert_allclose(theta_ao_closed_form([1.0, 1.0], 0.0, np.eye(2), [5.0, 0.0]),
                               np.ones(2) / math.sqrt(2))


@given(star=vec2, k=st.floats(0.01, 10), gamma=st.floats(0.0, 5))
def test_ao_aligned_selection_term(star, k, gamma):
    g = E_EXAMPLE @ E_EXAMPLE.T @ star
    if np.linalg.norm(g) < 1e-6:
        return
    alpha = (k - gamma) * g
    np.testing.assert_allclose(theta_ao_closed_form(alpha, gamma, E_EXAMPLE, star), g / np.linalg.norm(g),
                               atol=1e-9)


def test_ao_zero_direction():
    with pytest.raises(DegenerateDirectionError):
        theta_ao_closed_form([1.0, 0.0], 1.0, np.eye(2), [-1.0, 0.0])


@given(alpha=vec2, star=vec2, gamma=st.floats(0, 5))
def test_ao_unit_norm(alpha, star, gamma):
    try:
        ao = theta_ao_closed_form(alpha, gamma, E_EXAMPLE, star)
    except DegenerateDirectionError:
        return
    assert math.isclose(np.linalg.norm(ao), 1.0, rel_tol=1e-12)


def test_ao_matches_grid_argmax_of_improvement():
    rng = np.random.default_rng(0)
    for m, tol in ((2, 2 * math.pi / 1000), (3, 0.12)):
        grid = unit_sphere_grid(m, 1000)
        for _ in range(20):
            effort = rng.normal(size=(m, m)) + 2.0 * np.eye(m)
            star = rng.normal(size=m)
            gamma, k = rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)
            alpha = (k - gamma) * effort @ effort.T @ star
            cpi = [conditional_improvement([th], [gamma], effort, star) for th in grid]
            best = grid[int(np.argmax(cpi))]
            assert angle(best, theta_ao_closed_form(alpha, gamma, effort, star)) <= tol


def test_unit_sphere_grid():
    for m in (2, 3):
        g = unit_sphere_grid(m, 1000)
        assert g.shape == (1000, m)
        np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0)
    with pytest.raises(ValueError):
        unit_sphere_grid(4)


# dominant strategy


def test_argmax_independent_of_rivals():
    rng = np.random.default_rng(1)
    effort = np.array([[10.0, 0.0], [0.0, 1.0]])
    gammas = np.array([1.0, 0.7, 1.3])
    star_i = np.array([0.0, 0.5])
    slope = np.array([0.3, -0.2])
    grid = unit_sphere_grid(2, 1000)
    winners = set()
    for _ in range(10):
        rivals = rng.normal(size=(2, 2))
        offset = float(np.sin(rivals).sum())
        q = [grid[k] @ slope + offset + conditional_improvement(np.vstack([grid[k], rivals]), gammas, effort, star_i)
             for k in range(len(grid))]
        winners.add(int(np.argmax(q)))
    assert len(winners) == 1


# rescaling


def test_rescale_ao_mode():
    assert math.isclose(np.linalg.norm(rescale_theta([0.6, 0.8], 2.0)), 2.0)


def test_rescale_ols_never_enlarges():
    th = np.array([0.3, 0.4])
    np.testing.assert_array_equal(rescale_theta(th, 1.0, "ols"), th)


def test_rescale_ols_shrinks():
    assert math.isclose(np.linalg.norm(rescale_theta([0.0, 3.0], 1.0, "ols")), 1.0)


def test_rescale_errors():
    with pytest.raises(DegenerateDirectionError):
        rescale_theta([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        rescale_theta([1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        rescale_theta([1.0, 0.0], 1.0, "other")


# regulation


def test_regulation_aligned():
    target = E_EXAMPLE @ E_EXAMPLE.T @ STAR1
    cos, ok = regulation_check(target, E_EXAMPLE, STAR1)
    assert math.isclose(cos, 1.0) and ok


def test_regulation_opposed():
    target = E_EXAMPLE @ E_EXAMPLE.T @ STAR1
    cos, ok = regulation_check(-target, E_EXAMPLE, STAR1)
    assert math.isclose(cos, -1.0) and not ok


def test_regulation_orthogonal_fails():
    cos, ok = regulation_check([0.0, 1.0], np.eye(2), [1.0, 0.0])
    assert cos == 0.0 and not ok


def test_regulation_zero_vector():
    with pytest.raises(DegenerateDirectionError):
        regulation_check([0.0, 0.0], np.eye(2), [1.0, 0.0])


# incentive gap


def test_lambda_single_examples():
    assert lambda_single(STAR1, STAR1, E_EXAMPLE, 1.0) == 0.0
    assert math.isclose(lambda_single([1.0, 0.0], [0.0, 0.5], np.eye(2), 1.0), 0.75)
    assert lambda_single([1.0, 0.0], [0.0, 0.5], np.eye(2), 0.0) == 0.0


def test_lambda_multi_reduces_to_single():
    ao = ao_of(E_EXAMPLE, STAR1)
    single = lambda_single(ao, STAR1, E_EXAMPLE, 0.8)
    assert math.isclose(lambda_multi([STAR1], [0.8], ao, STAR1, E_EXAMPLE), single)
    # a rival without interest leaves the gap unchanged
    assert math.isclose(lambda_multi([STAR1, STAR2], [0.8, 0.0], ao, STAR1, E_EXAMPLE), single)


def test_lambda_multi_uses_index():
    ao2 = ao_of(E_EXAMPLE, STAR2)
    a = lambda_multi([STAR1, STAR2], [1.0, 1.0], ao2, STAR2, E_EXAMPLE, i=1)
    b = lambda_multi([STAR2, STAR1], [1.0, 1.0], ao2, STAR2, E_EXAMPLE, i=0)
    assert math.isclose(a, b)


def test_lambda_nonnegative_under_conditions():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        c = sample_valid_config(rng)
        ao, star = c["aos"][0], c["stars"][0]
        assert lambda_single(ao, star, c["effort"], c["gammas"][0]) >= -1e-12
        assert lambda_multi(c["published"], c["gammas"], ao, star, c["effort"]) >= -1e-12


def test_lambda_can_be_negative_outside_conditions():
    # |theta*| > 1 breaks the first condition
    star = np.array([3.0, 0.0])
    assert lambda_single([0.0, 1.0], star, np.eye(2), 1.0) < 0


# probability bound


def test_bound_examples():
    assert reduction_bound(100.0, 1.0, 0.0, 1.0, [1.0, 0.0], [0.0, 0.0])[0] < 1e-12
    assert reduction_bound(1e-300, 1.0, 0.0, 1.0, [1.0, 0.0], [0.0, 0.0])[0] == pytest.approx(0.5)
    value, degenerate = reduction_bound(1.0, 1.0, 0.75, 1.0, [0.5, 0.0], [0.0, 0.0])
    assert not degenerate
    assert value == pytest.approx(std_normal_cdf(-3.5), rel=1e-12)
    assert value == pytest.approx(2.326e-4, rel=1e-3)


def test_bound_degenerate():
    assert reduction_bound(0.1, 1.0, 0.0, 1.0, STAR1, STAR1) == (0.0, True)


def test_bound_rejects_bad_inputs():
    for args in ((0.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 0.0)):
        with pytest.raises(ValueError):
            reduction_bound(args[0], args[1], 0.0, args[2], [1.0, 0.0], [0.0, 0.0])


def test_bound_monotone_on_lattice():
    ms = np.linspace(0.01, 3.0, 30)
    lams = np.linspace(-2.0, 2.0, 21)
    table = np.array([[reduction_bound(M, 1.5, lam, 0.7, [1.0, 0.0], [0.2, 0.3])[0] for lam in lams] for M in ms])
    assert np.all((table >= 0.0) & (table <= 1.0))
    assert np.all(np.diff(table, axis=0) <= 0.0)
    assert np.all(np.diff(table, axis=1) <= 0.0)


# improved chance


def test_improved_chance_trivial():
    assert improved_chance_check([STAR1, STAR2], [1.0, 1.0], STAR1, STAR1, E_EXAMPLE)


def test_improved_chance_worked_example():
    ao1, ao2 = ao_of(E_EXAMPLE, STAR1), ao_of(E_EXAMPLE, STAR2)
    for rival in (STAR2, ao2):
        assert improved_chance_check([STAR1, rival], [1.0, 1.0], ao1, STAR1, E_EXAMPLE)


def test_improved_chance_adversarial_rival():
    ao1 = ao_of(E_EXAMPLE, STAR1)
    rival = -(E_EXAMPLE @ E_EXAMPLE.T @ (ao1 - STAR1))
    assert not improved_chance_check([STAR1, rival], [1.0, 1.0], ao1, STAR1, E_EXAMPLE)


# empirical reduction probability


def make_population(effort):
    m = effort.shape[0]
    pop = default_population(1)
    return pop.replace(
        baseline_dists=tuple(tuple((0.0, 1.0) for _ in range(m)) for _ in range(pop.n_groups)),
        effort_matrix=tuple(tuple(float(v) for v in row) for row in effort),
    )


def make_env(star, gamma):
    return EnvironmentSpec(theta_star=tuple(float(v) for v in star), gamma=float(gamma))


def test_clamp_shape():
    np.testing.assert_allclose(admission_clamp([-1.0, 0.0, 0.25, 2.0], 2.0, 0.0), [0.0, 0.0, 0.5, 1.0])


def test_empirical_identical_parameters():
    pop, env = make_population(E_EXAMPLE), make_env(STAR1, 1.0)
    p, se = empirical_reduction_probability(pop, env, STAR1, STAR1, 0.01, 1000, np.random.default_rng(0))
    assert p == 0.0 and se == 0.0


def test_empirical_huge_margin():
    pop, env = make_population(E_EXAMPLE), make_env(STAR1, 1.0)
    p, _ = empirical_reduction_probability(pop, env, STAR1, ao_of(E_EXAMPLE, STAR1), 2.0, 1000,
                                           np.random.default_rng(0))
    assert p == 0.0


def test_empirical_needs_samples():
    pop, env = make_population(E_EXAMPLE), make_env(STAR1, 1.0)
    with pytest.raises(ValueError):
        empirical_reduction_probability(pop, env, STAR1, STAR1, 0.01, 99, np.random.default_rng(0))


def test_empirical_detects_reductions():
    # moving away from a good parameter must cost some agents
    pop, env = make_population(np.eye(2)), make_env([0.0, 0.5], 1.0)
    p, se = empirical_reduction_probability(pop, env, [0.0, 1.0], [1.0, 0.0], 0.01, 5000,
                                            np.random.default_rng(0))
    assert p > 10 * se > 0


def test_empirical_within_bound():
    rng = np.random.default_rng(3)
    for _ in range(10):
        c = sample_valid_config(rng)
        star, ao = c["stars"][0], c["aos"][0]
        lam = lambda_multi(c["published"], c["gammas"], ao, star, c["effort"])
        pop, env = make_population(c["effort"]), make_env(star, c["gammas"][0])
        for M in (0.01, 0.1):
            p, se = empirical_reduction_probability(
                pop, env, star, ao, M, 5000, rng, rivals=c["published"][1:], rival_gammas=c["gammas"][1:])
            assert p <= reduction_bound(M, 1.0, lam, 1.0, ao, star)[0] + 3 * se


# report


def test_report_fields():
    rep = build_welfare_report(2.0 * ao_of(E_EXAMPLE, STAR1), STAR1, E_EXAMPLE, [1.0, 1.0], 0, [STAR1, STAR2])
    assert isinstance(rep, WelfareReport)
    assert math.isclose(np.linalg.norm(rep.theta_ao), 1.0)
    assert rep.regulation_ok and rep.improved_chance_ok
    assert rep.lam >= 0.0
    bounds = [b for _, b in rep.bound_curve]
    assert all(0.0 <= b <= 1.0 for b in bounds)
    assert all(x >= y for x, y in zip(bounds, bounds[1:]))
    d = rep.to_dict()
    assert set(d) == {"theta_ao", "cosine_alignment", "regulation_ok", "lambda", "bound_curve",
                      "improved_chance_ok"}
    assert [row["M"] for row in d["bound_curve"]] == [0.01, 0.05, 0.1]


def test_report_single_dm_uses_single_gap():
    ao = ao_of(np.eye(2), [0.0, 0.5])
    rep = build_welfare_report(ao, [0.0, 0.5], np.eye(2), [1.0])
    assert math.isclose(rep.lam, 0.75)
