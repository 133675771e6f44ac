"""Domain types, configuration validation and round-log persistence."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import yaml

__all__ = [
    "ConfigError",
    "DataFormatError",
    "SELECTION_MODES",
    "PopulationSpec",
    "EnvironmentSpec",
    "ScheduleSpec",
    "ExperimentSpec",
    "SimulationConfig",
    "Config",
    "AgentRecord",
    "RoundLog",
    "Estimate",
    "validate_config",
    "validate_full",
    "default_population",
    "default_config",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "config_hash",
    "round_log_columns",
    "write_round_logs",
    "read_round_logs",
]

SELECTION_MODES = ("top_rho", "ranking_cdf")


class ConfigError(ValueError):
    """Invalid configuration.

    Parameters
    ----------
    problems : list of (str, str)
        ``(field path, message)`` for every violated invariant.
    """

    def __init__(self, problems: Sequence[tuple[str, str]]):
        self.problems = list(problems)
        lines = "; ".join(f"{p}: {m}" for p, m in self.problems)
        super().__init__(f"invalid configuration: {lines}")


class DataFormatError(ValueError):
    """A persisted file does not match the expected schema."""


@dataclass(frozen=True)
class PopulationSpec:
    """Agent population: private types, baselines, noise and effort conversion.

    Attributes
    ----------
    group_probs : tuple of float
        Probability of each private type.
    baseline_dists : tuple
        ``baseline_dists[g][j] = (mean, std)`` of baseline coordinate ``j``
        for type ``g``.
    noise_dists : tuple
        ``noise_dists[g][i] = (mean, std)`` of the outcome noise in
        environment ``i`` for type ``g``.
    effort_matrix : tuple
        Rows of the m x d effort conversion matrix.
    alpha1, alpha2 : float
        Nonlinearity and effort-perturbation knobs in [0, 1].
    agents_per_round : int
        Cohort size of every round.
    effort_noise_scale : tuple of float
        Per-type multiplier on the effort perturbation std.
    """

    group_probs: tuple
    baseline_dists: tuple
    noise_dists: tuple
    effort_matrix: tuple
    alpha1: float = 0.0
    alpha2: float = 0.0
    agents_per_round: int = 1000
    effort_noise_scale: tuple = (1.25, 0.75)

    @property
    def n_groups(self) -> int:
        return len(self.group_probs)

    @property
    def m(self) -> int:
        return len(self.effort_matrix)

    @property
    def d(self) -> int:
        return len(self.effort_matrix[0])

    @property
    def effort(self) -> np.ndarray:
        return np.array(self.effort_matrix, dtype=float)

    @property
    def baseline_means(self) -> np.ndarray:
        return np.array([[mu for mu, _ in row] for row in self.baseline_dists])

    @property
    def baseline_stds(self) -> np.ndarray:
        return np.array([[sd for _, sd in row] for row in self.baseline_dists])

    @property
    def noise_means(self) -> np.ndarray:
        return np.array([[mu for mu, _ in row] for row in self.noise_dists])

    @property
    def noise_stds(self) -> np.ndarray:
        return np.array([[sd for _, sd in row] for row in self.noise_dists])

    def mixture_baseline_mean(self) -> np.ndarray:
        """Type-unconditional mean of the baseline vector."""
        return np.asarray(self.group_probs) @ self.baseline_means

    def pooled_baseline_std(self) -> np.ndarray:
        """Type-unconditional std of each baseline coordinate."""
        p = np.asarray(self.group_probs)
        mu, sd = self.baseline_means, self.baseline_stds
        second = p @ (sd**2 + mu**2)
        return np.sqrt(second - (p @ mu) ** 2)

    def replace(self, **changes) -> "PopulationSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EnvironmentSpec:
    """One decision maker.

    Attributes
    ----------
    theta_star : tuple of float
        True causal parameter of the environment's outcome.
    gamma : float
        Agents' preference weight for this environment.
    selection_mode : {"top_rho", "ranking_cdf"}
    rho : float
        Admitted fraction for ``top_rho``.
    """

    theta_star: tuple
    gamma: float
    selection_mode: str = "top_rho"
    rho: float = 0.5

    def replace(self, **changes) -> "EnvironmentSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ScheduleSpec:
    """How decision parameters are drawn and paired.

    ``theta_means[i]`` and ``theta_cov[i]`` define the fresh-draw sampler
    of DM ``i``; ``theta_cov`` rows are covariance matrices. Scales are drawn
    uniformly from ``[scale_low, scale_high]``.
    """

    mode: str = "interleaved"
    eta: tuple = (1,)
    theta_means: tuple = ((1.0, 1.0),)
    theta_cov: tuple = (((10.0, 0.0), (0.0, 1.0)),)
    scale_low: float = 0.5
    scale_high: float = 2.0

    def replace(self, **changes) -> "ScheduleSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ExperimentSpec:
    """Harness settings shared by the CLI commands."""

    rounds: int = 100
    probe_rounds: int = 100
    eval_rounds: int = 50
    replicates: int = 20
    t_grid: tuple = (20, 40, 60, 80, 100)
    rho_grid: tuple = (0.25, 0.5, 0.75, 1.0)
    alpha_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    min_cell: int = 5
    bootstrap: int = 200
    sync_eta: int = 2
    async_eta: tuple = (2, 3)
    rho_sweep_fixed_enrolment: bool = True
    lipschitz: float = 1.0
    bound_sigma: float = 1.0
    bound_m_grid: tuple = (0.01, 0.05, 0.1)
    normalize_covariates: bool = False
    display_ranges: tuple = ((400.0, 1600.0), (0.0, 4.0))
    coord_names: tuple = ("SAT", "HS_GPA")

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SimulationConfig:
    """Validated population plus environments.

    ``clip_ranges``, when set, bounds each realised covariate to a
    ``(low, high)`` range before predictions and outcomes are computed.
    """

    population: PopulationSpec
    environments: tuple
    clip_ranges: tuple | None = None

    @property
    def n(self) -> int:
        return len(self.environments)

    @property
    def m(self) -> int:
        return self.population.m

    @property
    def gammas(self) -> np.ndarray:
        return np.array([e.gamma for e in self.environments], dtype=float)

    @property
    def theta_stars(self) -> np.ndarray:
        return np.array([e.theta_star for e in self.environments], dtype=float)


@dataclass(frozen=True)
class Config:
    """Complete configuration file contents."""

    population: PopulationSpec
    environments: tuple
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    @property
    def simulation(self) -> SimulationConfig:
        clip = tuple(self.experiment.display_ranges) if self.experiment.normalize_covariates else None
        return SimulationConfig(self.population, tuple(self.environments), clip)

    @property
    def n(self) -> int:
        return len(self.environments)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)


def _finite(x) -> bool:
    try:
        return math.isfinite(float(x))
    except (TypeError, ValueError):
        return False


def _check_population(pop: PopulationSpec, n_envs: int, problems: list) -> None:
    p = "population"
    probs = pop.group_probs
    if len(probs) < 1:
        problems.append((f"{p}.group_probs", "at least one private type required"))
    elif any(not _finite(v) or v < 0 for v in probs):
        problems.append((f"{p}.group_probs", "probabilities must be finite and >= 0"))
    elif abs(sum(probs) - 1.0) > 1e-9:
        problems.append((f"{p}.group_probs", f"must sum to 1, got {sum(probs):.12g}"))

    if len(pop.effort_matrix) == 0 or len(pop.effort_matrix[0]) == 0:
        problems.append((f"{p}.effort_matrix", "must be a non-empty matrix"))
        return
    m = len(pop.effort_matrix)
    d = len(pop.effort_matrix[0])
    for r, row in enumerate(pop.effort_matrix):
        if len(row) != d:
            problems.append((f"{p}.effort_matrix[{r}]", f"expected {d} columns, got {len(row)}"))
        elif not all(_finite(v) for v in row):
            problems.append((f"{p}.effort_matrix[{r}]", "entries must be finite"))

    if len(pop.baseline_dists) != len(probs):
        problems.append((f"{p}.baseline", f"expected {len(probs)} groups, got {len(pop.baseline_dists)}"))
    for g, row in enumerate(pop.baseline_dists):
        if len(row) != m:
            problems.append((f"{p}.baseline[{g}]", f"expected {m} coordinates (effort rows), got {len(row)}"))
        for j, (mu, sd) in enumerate(row):
            if not _finite(mu):
                problems.append((f"{p}.baseline[{g}][{j}].mean", "must be finite"))
            if not _finite(sd) or sd <= 0:
                problems.append((f"{p}.baseline[{g}][{j}].std", "must be finite and > 0"))

    if len(pop.noise_dists) != len(probs):
        problems.append((f"{p}.noise", f"expected {len(probs)} groups, got {len(pop.noise_dists)}"))
    for g, row in enumerate(pop.noise_dists):
        if len(row) != n_envs:
            problems.append((f"{p}.noise[{g}]", f"expected {n_envs} environments, got {len(row)}"))
        for i, (mu, sd) in enumerate(row):
            if not _finite(mu):
                problems.append((f"{p}.noise[{g}][{i}].mean", "must be finite"))
            # a zero noise std gives deterministic outcomes and is allowed
            if not _finite(sd) or sd < 0:
                problems.append((f"{p}.noise[{g}][{i}].std", "must be finite and >= 0"))

    for name in ("alpha1", "alpha2"):
        v = getattr(pop, name)
        if not _finite(v) or not 0.0 <= v <= 1.0:
            problems.append((f"{p}.{name}", "must lie in [0, 1]"))
    if not isinstance(pop.agents_per_round, (int, np.integer)) or pop.agents_per_round < 1:
        problems.append((f"{p}.agents_per_round", "must be an integer >= 1"))
    if len(pop.effort_noise_scale) != len(probs):
        problems.append((f"{p}.effort_noise_scale", f"expected {len(probs)} entries"))
    elif any(not _finite(v) or v < 0 for v in pop.effort_noise_scale):
        problems.append((f"{p}.effort_noise_scale", "entries must be finite and >= 0"))


def _check_environments(envs: Sequence[EnvironmentSpec], m: int, problems: list) -> None:
    if len(envs) < 1:
        problems.append(("environments", "at least one environment required"))
    for i, env in enumerate(envs):
        p = f"environments[{i}]"
        if len(env.theta_star) != m:
            problems.append((f"{p}.theta_star", f"dimension {len(env.theta_star)} does not match effort rows m={m}"))
        elif not all(_finite(v) for v in env.theta_star):
            problems.append((f"{p}.theta_star", "entries must be finite"))
        if not _finite(env.gamma):
            problems.append((f"{p}.gamma", "must be finite"))
        elif env.gamma < 0:
            problems.append((f"{p}.gamma", f"negative preference {env.gamma} (must be >= 0)"))
        if env.selection_mode not in SELECTION_MODES:
            problems.append((f"{p}.selection_mode", f"must be one of {SELECTION_MODES}"))
        if not _finite(env.rho) or not 0.0 < env.rho <= 1.0:
            problems.append((f"{p}.rho", "must lie in (0, 1]"))


def validate_config(population: PopulationSpec, envs: Sequence[EnvironmentSpec]) -> SimulationConfig:
    """Check every invariant of a population and its environments.

    Raises
    ------
    ConfigError
        Listing each violation with its field path.
    """
    problems: list = []
    _check_population(population, len(envs), problems)
    m = len(population.effort_matrix)
    _check_environments(envs, m, problems)
    if problems:
        raise ConfigError(problems)
    return SimulationConfig(population, tuple(envs))


def _check_schedule(sched: ScheduleSpec, n: int, m: int, problems: list) -> None:
    p = "schedule"
    if sched.mode not in ("interleaved", "block"):
        problems.append((f"{p}.mode", "must be 'interleaved' or 'block'"))
    for key in ("eta", "theta_means", "theta_cov"):
        if len(getattr(sched, key)) != n:
            problems.append((f"{p}.{key}", f"expected one entry per environment ({n})"))
    if any(int(e) != e or e < 1 for e in sched.eta):
        problems.append((f"{p}.eta", "entries must be positive integers"))
    for i, mu in enumerate(sched.theta_means):
        if len(mu) != m:
            problems.append((f"{p}.theta_means[{i}]", f"expected length {m}"))
    for i, cov in enumerate(sched.theta_cov):
        arr = np.asarray(cov, dtype=float)
        if arr.shape != (m, m):
            problems.append((f"{p}.theta_cov[{i}]", f"expected {m}x{m} matrix"))
        elif not np.allclose(arr, arr.T) or np.min(np.linalg.eigvalsh(arr)) < 0:
            problems.append((f"{p}.theta_cov[{i}]", "must be symmetric positive semidefinite"))
    if not (0 < sched.scale_low <= sched.scale_high) or not _finite(sched.scale_high):
        problems.append((f"{p}.scale_low", "need 0 < scale_low <= scale_high < inf"))


def _check_experiment(exp: ExperimentSpec, m: int, problems: list) -> None:
    p = "experiment"
    for key in ("rounds", "probe_rounds", "eval_rounds", "replicates", "min_cell"):
        v = getattr(exp, key)
        if int(v) != v or v < 1:
            problems.append((f"{p}.{key}", "must be a positive integer"))
    if any(int(t) != t or t < 2 for t in exp.t_grid):
        problems.append((f"{p}.t_grid", "entries must be integers >= 2"))
    if any(not 0 < r <= 1 for r in exp.rho_grid):
        problems.append((f"{p}.rho_grid", "entries must lie in (0, 1]"))
    if any(not 0 <= a <= 1 for a in exp.alpha_grid):
        problems.append((f"{p}.alpha_grid", "entries must lie in [0, 1]"))
    if exp.bootstrap < 0:
        problems.append((f"{p}.bootstrap", "must be >= 0"))
    if len(exp.display_ranges) != m:
        problems.append((f"{p}.display_ranges", f"expected {m} ranges"))
    if len(exp.coord_names) != m:
        problems.append((f"{p}.coord_names", f"expected {m} names"))
    if exp.lipschitz <= 0 or exp.bound_sigma <= 0:
        problems.append((f"{p}.lipschitz", "lipschitz and bound_sigma must be > 0"))


def validate_full(config: Config) -> Config:
    """Validate every section of a configuration file."""
    problems: list = []
    _check_population(config.population, len(config.environments), problems)
    m = len(config.population.effort_matrix)
    _check_environments(config.environments, m, problems)
    _check_schedule(config.schedule, len(config.environments), m, problems)
    _check_experiment(config.experiment, m, problems)
    if problems:
        raise ConfigError(problems)
    return config


def default_population(n_envs: int = 1, **overrides) -> PopulationSpec:
    """Two-type population with the SAT / high-school GPA setup.

    Outcome noise has the same law in every environment.
    """
    pop = PopulationSpec(
        group_probs=(0.5, 0.5),
        baseline_dists=(((800.0, 200.0), (1.8, 0.5)), ((1000.0, 200.0), (2.2, 0.5))),
        noise_dists=(((0.5, 0.2),) * n_envs, ((1.5, 0.2),) * n_envs),
        effort_matrix=((10.0, 0.0), (0.0, 1.0)),
    )
    return pop.replace(**overrides) if overrides else pop


def default_config(n_envs: int = 1) -> Config:
    """Default configuration for ``n_envs`` decision makers.

    Every DM has theta* = (0, 0.5), gamma = 1/n and top-50% selection. DM
    ``i`` (1-based) samples fresh parameters from N((1, i), diag(10, 1)).
    """
    envs = tuple(EnvironmentSpec(theta_star=(0.0, 0.5), gamma=1.0 / n_envs) for _ in range(n_envs))
    sched = ScheduleSpec(
        eta=(1,) * n_envs,
        theta_means=tuple((1.0, float(i + 1)) for i in range(n_envs)),
        theta_cov=(((10.0, 0.0), (0.0, 1.0)),) * n_envs,
    )
    return validate_full(Config(default_population(n_envs), envs, sched, ExperimentSpec()))


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    return value


def config_to_dict(config: Config) -> dict:
    """Nested plain-Python representation suitable for YAML or JSON."""
    pop = config.population
    return {
        "population": {
            "group_probs": _plain(pop.group_probs),
            "baseline": _plain(pop.baseline_dists),
            "noise": _plain(pop.noise_dists),
            "effort_matrix": _plain(pop.effort_matrix),
            "alpha1": pop.alpha1,
            "alpha2": pop.alpha2,
            "agents_per_round": pop.agents_per_round,
            "effort_noise_scale": _plain(pop.effort_noise_scale),
        },
        "environments": [
            {
                "theta_star": _plain(e.theta_star),
                "gamma": e.gamma,
                "selection_mode": e.selection_mode,
                "rho": e.rho,
            }
            for e in config.environments
        ],
        "schedule": {k: _plain(v) for k, v in dataclasses.asdict(config.schedule).items()},
        "experiment": {k: _plain(v) for k, v in dataclasses.asdict(config.experiment).items()},
    }


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _section(raw: Mapping, name: str, cls, problems: list, renames: Mapping[str, str] | None = None) -> dict:
    data = dict(raw.get(name) or {})
    renames = renames or {}
    out = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        target = renames.get(key, key)
        if target not in known:
            problems.append((f"{name}.{key}", "unknown field"))
            continue
        out[target] = _freeze(value)
    return out


def _to_float_tree(value, path: str, problems: list):
    if isinstance(value, tuple):
        return tuple(_to_float_tree(v, f"{path}[{i}]", problems) for i, v in enumerate(value))
    try:
        return float(value)
    except (TypeError, ValueError):
        problems.append((path, f"expected a number, got {value!r}"))
        return math.nan


def config_from_dict(raw: Mapping, base: Config | None = None) -> Config:
    """Build and validate a :class:`Config` from nested mappings.

    Missing sections or fields fall back to ``base`` (the defaults for the
    number of environments given, when ``base`` is None).
    """
    problems: list = []
    if not isinstance(raw, Mapping):
        raise ConfigError([("<root>", "configuration must be a mapping")])
    for key in raw:
        if key not in ("population", "environments", "schedule", "experiment"):
            problems.append((str(key), "unknown section"))
    env_raw = raw.get("environments")
    if base is None:
        n = len(env_raw) if isinstance(env_raw, list) and env_raw else 1
        base = default_config(n)

    pop_fields = _section(
        raw, "population", PopulationSpec, problems,
        renames={"baseline": "baseline_dists", "noise": "noise_dists"},
    )
    for key in ("group_probs", "effort_noise_scale", "effort_matrix", "baseline_dists", "noise_dists"):
        if key in pop_fields:
            pop_fields[key] = _to_float_tree(pop_fields[key], f"population.{key}", problems)
    population = base.population.replace(**pop_fields)

    if isinstance(env_raw, list):
        envs = []
        for i, item in enumerate(env_raw):
            if not isinstance(item, Mapping):
                problems.append((f"environments[{i}]", "must be a mapping"))
                continue
            unknown = set(item) - {f.name for f in dataclasses.fields(EnvironmentSpec)}
            for key in sorted(unknown):
                problems.append((f"environments[{i}].{key}", "unknown field"))
            if "theta_star" not in item or "gamma" not in item:
                problems.append((f"environments[{i}]", "theta_star and gamma are required"))
                continue
            envs.append(EnvironmentSpec(
                theta_star=_to_float_tree(_freeze(item["theta_star"]), f"environments[{i}].theta_star", problems),
                gamma=item["gamma"],
                selection_mode=item.get("selection_mode", "top_rho"),
                rho=item.get("rho", 0.5),
            ))
        envs = tuple(envs)
    elif env_raw is None:
        envs = base.environments
    else:
        problems.append(("environments", "must be a list"))
        envs = base.environments

    schedule = base.schedule.replace(**_section(raw, "schedule", ScheduleSpec, problems))
    experiment = base.experiment.replace(**_section(raw, "experiment", ExperimentSpec, problems))
    if problems:
        raise ConfigError(problems)
    return validate_full(Config(population, envs, schedule, experiment))


def load_config(path) -> Config:
    """Read a YAML (or JSON, which YAML parses) configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([("<file>", f"cannot read {path}: {exc.strerror}")]) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"cannot parse {path}: {exc}")]) from exc
    return config_from_dict(raw or {})


def save_config(config: Config, path) -> None:
    """Write ``config`` as YAML; JSON if the suffix is ``.json``."""
    path = Path(path)
    data = config_to_dict(config)
    if path.suffix == ".json":
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(data, sort_keys=False))


def config_hash(config: Config) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class AgentRecord:
    """One agent of one round. ``outcome`` is None unless ``compliance > 0``."""

    group: int
    baseline: np.ndarray
    action: np.ndarray
    covariates: np.ndarray
    predictions: np.ndarray
    selected: np.ndarray
    compliance: int
    outcome: float | None


@dataclass(frozen=True, eq=False)
class RoundLog:
    """Everything observable about one round, stored column-wise.

    Attributes
    ----------
    round : int
        1-based round index.
    thetas : ndarray, shape (n, m)
        Parameter published by each DM.
    group : ndarray of int, shape (N,)
    baseline : ndarray, shape (N, m)
    action : ndarray, shape (N, d)
    covariates : ndarray, shape (N, m)
    predictions : ndarray, shape (N, n)
    selected : ndarray of bool, shape (N, n)
    compliance : ndarray of int, shape (N,)
        0 when the agent enrolls nowhere, else the 1-based environment.
    outcome : ndarray, shape (N,)
        NaN where ``compliance == 0``.
    batch_label : str or None
        Coalition pairing tag such as ``"b3:first"``.
    oracle_outcomes : ndarray, shape (N, n), optional
        Counterfactual outcome in every environment. Only populated on
        request and never read by estimators.
    """

    round: int
    thetas: np.ndarray
    group: np.ndarray
    baseline: np.ndarray
    action: np.ndarray
    covariates: np.ndarray
    predictions: np.ndarray
    selected: np.ndarray
    compliance: np.ndarray
    outcome: np.ndarray
    batch_label: str | None = None
    oracle_outcomes: np.ndarray | None = None

    @property
    def n_agents(self) -> int:
        return self.group.shape[0]

    @property
    def n_envs(self) -> int:
        return self.thetas.shape[0]

    def records(self) -> Iterator[AgentRecord]:
        for k in range(self.n_agents):
            z = int(self.compliance[k])
            yield AgentRecord(
                group=int(self.group[k]),
                baseline=self.baseline[k],
                action=self.action[k],
                covariates=self.covariates[k],
                predictions=self.predictions[k],
                selected=self.selected[k],
                compliance=z,
                outcome=float(self.outcome[k]) if z > 0 else None,
            )

    def complied(self, env: int) -> np.ndarray:
        """Boolean mask of agents enrolled in 1-based environment ``env``."""
        return self.compliance == env

    def check(self, agents_per_round: int | None = None) -> None:
        """Raise ``DataFormatError`` if a structural invariant fails."""
        n = self.n_agents
        if agents_per_round is not None and n != agents_per_round:
            raise DataFormatError(f"round {self.round}: {n} agents, expected {agents_per_round}")
        if self.predictions.shape[1] != self.n_envs or self.selected.shape[1] != self.n_envs:
            raise DataFormatError(f"round {self.round}: one prediction and flag per environment required")
        has_y = ~np.isnan(self.outcome)
        if np.any(has_y != (self.compliance > 0)):
            raise DataFormatError(f"round {self.round}: outcome present iff compliance > 0 violated")
        z = self.compliance
        enrolled = z > 0
        if np.any(~self.selected[enrolled, z[enrolled] - 1]):
            raise DataFormatError(f"round {self.round}: enrolled agent not selected by that environment")

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundLog):
            return NotImplemented
        if self.round != other.round or self.batch_label != other.batch_label:
            return False
        for name in ("thetas", "group", "baseline", "action", "covariates",
                     "predictions", "selected", "compliance"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        if not np.array_equal(self.outcome, other.outcome, equal_nan=True):
            return False
        if (self.oracle_outcomes is None) != (other.oracle_outcomes is None):
            return False
        return self.oracle_outcomes is None or np.array_equal(self.oracle_outcomes, other.oracle_outcomes)

    __hash__ = None


@dataclass(frozen=True)
class Estimate:
    """Estimated coefficient vector with diagnostics.

    Attributes
    ----------
    coefficients : ndarray, shape (m,)
    intercept : float or None
    sample_size : int
        Agent-level observations that entered the fit.
    batch_count : int or None
        Batches used (difference-based estimators only).
    residual_norm : float
        Euclidean norm of the fit residuals.
    stderr : ndarray or None
        Standard error per coefficient.
    """

    coefficients: np.ndarray
    intercept: float | None
    sample_size: int
    batch_count: int | None
    residual_norm: float
    stderr: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("estimate coefficients must be finite")


def round_log_columns(m: int, d: int, n: int) -> list[str]:
    """Header of the round-log CSV."""
    return (
        ["round", "agent", "group"]
        + [f"b_{j + 1}" for j in range(m)]
        + [f"a_{j + 1}" for j in range(d)]
        + [f"x_{j + 1}" for j in range(m)]
        + [f"yhat_{i + 1}" for i in range(n)]
        + [f"w_{i + 1}" for i in range(n)]
        + ["z", "y"]
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_round_logs(path, logs: Iterable[RoundLog], clip_ranges: Sequence[tuple] | None = None) -> None:
    """Write logs as one CSV with one row per agent and round.

    Floats use the shortest round-trip representation, so reading the file
    back reproduces every value bit for bit. ``clip_ranges`` clips the
    exported covariates to display ranges; clipped files are for reports
    only and do not round-trip.
    """
    logs = list(logs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not logs:
            writer.writerow(["round", "agent", "group", "z", "y"])
            return
        first = logs[0]
        m, d, n = first.baseline.shape[1], first.action.shape[1], first.n_envs
        writer.writerow(round_log_columns(m, d, n))
        for log in logs:
            x = log.covariates
            if clip_ranges is not None:
                lo = np.array([r[0] for r in clip_ranges])
                hi = np.array([r[1] for r in clip_ranges])
                x = np.clip(x, lo, hi)
            for k in range(log.n_agents):
                z = int(log.compliance[k])
                writer.writerow(
                    [log.round, k, int(log.group[k])]
                    + [_fmt(v) for v in log.baseline[k]]
                    + [_fmt(v) for v in log.action[k]]
                    + [_fmt(v) for v in x[k]]
                    + [_fmt(v) for v in log.predictions[k]]
                    + [int(w) for w in log.selected[k]]
                    + [z, _fmt(log.outcome[k]) if z > 0 else ""]
                )


def read_round_logs(path, thetas_by_round: Mapping[int, np.ndarray],
                    batch_labels: Mapping[int, str] | None = None) -> list[RoundLog]:
    """Read a round-log CSV written by :func:`write_round_logs`.

    The CSV holds agent rows only, so the published parameters (and optional
    batch tags) come from the deployment schedule.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DataFormatError(f"{path}: empty file") from exc
        rows = list(reader)
    if not rows:
        return []
    m = sum(h.startswith("b_") for h in header)
    d = sum(h.startswith("a_") for h in header)
    n = sum(h.startswith("w_") for h in header)
    expected = round_log_columns(m, d, n)
    if header != expected:
        missing = [c for c in expected if c not in header]
        raise DataFormatError(f"{path}: unexpected header; missing columns {missing}")
    batch_labels = batch_labels or {}
    by_round: dict[int, list] = {}
    for row in rows:
        by_round.setdefault(int(row[0]), []).append(row)
    logs = []
    for t in sorted(by_round):
        block = by_round[t]
        num = np.array([[float(v) if v != "" else math.nan for v in r[3:-2 - n]] for r in block])
        o = 0
        baseline = num[:, o:o + m]; o += m
        action = num[:, o:o + d]; o += d
        covariates = num[:, o:o + m]; o += m
        predictions = num[:, o:o + n]
        selected = np.array([[r[3 + 2 * m + d + n + i] == "1" for i in range(n)] for r in block], dtype=bool)
        if t not in thetas_by_round:
            raise DataFormatError(f"{path}: no published parameters for round {t}")
        logs.append(RoundLog(
            round=t,
            thetas=np.asarray(thetas_by_round[t], dtype=float),
            group=np.array([int(r[2]) for r in block]),
            baseline=baseline,
            action=action,
            covariates=covariates,
            predictions=predictions,
            selected=selected,
            compliance=np.array([int(r[-2]) for r in block]),
            outcome=np.array([float(r[-1]) if r[-1] != "" else math.nan for r in block]),
            batch_label=batch_labels.get(t),
        ))
    return logs
