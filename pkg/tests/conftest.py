import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from strategic_select.model import default_config

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# one line per acceptance criterion, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def acceptance_line(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def config1():
    return default_config(1)


@pytest.fixture
def config2():
    return default_config(2)


def quiet_population(config, **overrides):
    """Population with no confounding: equal group noise, tiny baseline spread."""
    pop = config.population
    noise = tuple(tuple((0.0, 0.0) for _ in range(config.n)) for _ in range(pop.n_groups))
    base = tuple(tuple((mean, 1e-9) for mean, _ in g) for g in pop.baseline_dists)
    return pop.replace(noise_dists=noise, baseline_dists=base, **overrides)


def small_config(n, *, agents=300, rounds=40, replicates=3):
    """Default configuration shrunk so whole experiments run in about a second."""
    config = default_config(n)
    exp = config.experiment.replace(rounds=rounds, probe_rounds=30, eval_rounds=10, replicates=replicates,
                                    t_grid=(20, rounds), bootstrap=0)
    return config.replace(population=config.population.replace(agents_per_round=agents), experiment=exp)


def constant_population(config, **overrides):
    """Confounder-free population: one baseline value, no outcome noise."""
    pop = quiet_population(config)
    base = tuple(tuple((mean, 1e-9) for mean in (900.0, 2.0)) for _ in range(pop.n_groups))
    return pop.replace(baseline_dists=base, **overrides)


def ao_of(effort, star):
    g = effort @ effort.T @ star
    return g / np.linalg.norm(g)


def sample_valid_config(rng, n=None):
    """Draw a configuration meeting the bounded-reduction conditions, by rejection.

    Conditions: |theta*_i| <= 1 for the focal DM (index 0), every optimal
    parameter along E E' theta*_j with positive preference, and each rival's
    published parameter (its theta* or its optimum) non-negatively aligned
    with E E' (ao_i - theta*_i).
    """
    while True:
        n = n or int(rng.integers(1, 4))
        m = int(rng.integers(2, 4))
        effort = rng.normal(size=(m, m)) + 2.0 * np.eye(m)
        stars = rng.normal(size=(n, m))
        stars[0] *= rng.uniform(0.05, 1.0) / np.linalg.norm(stars[0])
        gammas = rng.uniform(0.1, 2.0, size=n)
        if np.linalg.matrix_rank(effort) < m:
            continue
        aos = np.array([ao_of(effort, s) for s in stars])
        published = np.array([aos[j] if rng.random() < 0.5 else stars[j] for j in range(n)])
        g = effort @ effort.T
        if all(published[j] @ g @ (aos[0] - stars[0]) >= 0.0 for j in range(1, n)):
            return dict(effort=effort, stars=stars, gammas=gammas, aos=aos, published=published)
