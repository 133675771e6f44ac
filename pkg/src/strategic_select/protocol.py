"""Deployment schedules for the decision parameters.

Rounds are numbered from 1. A batch is a pair of rounds ``(first, second)``
in which a DM publishes ``theta_second = k * theta_first`` with ``k > 0``.
Two pairing layouts are provided:

* interleaved: batch ``k`` sits at ``t1 = k + floor((k - 1) / eta) * eta``
  and ``t2 = t1 + eta``;
* block: with ``block = floor(t / (eta + 1))``, even blocks draw fresh
  parameters and odd blocks scale the parameter of round ``t - eta``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import DataFormatError

__all__ = [
    "ProtocolError",
    "Batch",
    "DeploymentSchedule",
    "gaussian_sampler",
    "uniform_scale_sampler",
    "interleaved_pairs",
    "schedule_interleaved",
    "schedule_block",
    "schedule_fixed",
    "compose_multi_dm",
    "verify_cooperative",
    "write_schedule",
    "read_schedule",
]

RATIO_RTOL = 1e-9

Sampler = Callable[[np.random.Generator], np.ndarray]
ScaleSampler = Callable[[np.random.Generator], float]


class ProtocolError(ValueError):
    """Invalid schedule request or inconsistent schedule."""


@dataclass(frozen=True)
class Batch:
    """Round pair with ``theta[second] = scale * theta[first]``."""

    batch_id: int
    first: int
    second: int
    scale: float


@dataclass(frozen=True, eq=False)
class DeploymentSchedule:
    """Per-round, per-DM published parameters plus pairing metadata.

    Attributes
    ----------
    thetas : ndarray, shape (T, n, m)
        ``thetas[t - 1, i]`` is DM ``i``'s parameter in round ``t``.
    batches : tuple of tuple of Batch
        Batches of each DM.
    etas : tuple of int
        Pairing lag of each DM.
    mode : str
        ``"interleaved"``, ``"block"``, ``"fixed"``, ``"synchronous"`` or
        ``"asynchronous"``.
    coalition : tuple of int
        DMs (0-based) whose joint scaling defines coalition pairs.
    coalition_batches : tuple of Batch
        Round pairs where every coalition DM satisfies the scaling condition.
        ``scale`` is that of the first coalition DM.
    """

    thetas: np.ndarray
    batches: tuple
    etas: tuple
    mode: str
    coalition: tuple
    coalition_batches: tuple

    @property
    def T(self) -> int:
        return self.thetas.shape[0]

    @property
    def n(self) -> int:
        return self.thetas.shape[1]

    @property
    def m(self) -> int:
        return self.thetas.shape[2]

    def theta(self, t: int) -> np.ndarray:
        """Parameters of all DMs in 1-based round ``t``, shape (n, m)."""
        if not 1 <= t <= self.T:
            raise ProtocolError(f"round {t} outside schedule of {self.T} rounds")
        return self.thetas[t - 1]

    def pairs(self, dm: int, upto: int | None = None) -> list[tuple[int, int]]:
        """Batch round pairs of one DM, optionally restricted to rounds <= ``upto``."""
        upto = self.T if upto is None else upto
        return [(b.first, b.second) for b in self.batches[dm] if b.second <= upto]

    def coalition_pairs(self, upto: int | None = None) -> list[tuple[int, int]]:
        upto = self.T if upto is None else upto
        return [(b.first, b.second) for b in self.coalition_batches if b.second <= upto]

    def batch_labels(self) -> dict[int, str]:
        """Coalition tag per round, e.g. ``{1: "b1:first", 2: "b1:second"}``.

        A round belonging to two coalition batches (block layout) carries both
        tags joined by ``|``.
        """
        tags: dict[int, list[str]] = {}
        for b in self.coalition_batches:
            tags.setdefault(b.first, []).append(f"b{b.batch_id}:first")
            tags.setdefault(b.second, []).append(f"b{b.batch_id}:second")
        return {t: "|".join(v) for t, v in tags.items()}

    def prefix(self, T: int) -> "DeploymentSchedule":
        """The first ``T`` rounds, keeping batches that fit entirely."""
        keep = lambda bs: tuple(b for b in bs if b.second <= T)
        return DeploymentSchedule(
            thetas=self.thetas[:T],
            batches=tuple(keep(bs) for bs in self.batches),
            etas=self.etas,
            mode=self.mode,
            coalition=self.coalition,
            coalition_batches=keep(self.coalition_batches),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeploymentSchedule):
            return NotImplemented
        return (
            np.array_equal(self.thetas, other.thetas)
            and self.batches == other.batches
            and self.etas == other.etas
            and self.coalition == other.coalition
            and self.coalition_batches == other.coalition_batches
        )

    __hash__ = None


def gaussian_sampler(mean, cov) -> Sampler:
    """Fresh-parameter sampler drawing from N(mean, cov)."""
    mu = np.asarray(mean, dtype=float)
    c = np.asarray(cov, dtype=float)
    if c.ndim == 1:
        c = np.diag(c)
    # eigen square root tolerates singular (e.g. degenerate) covariances
    w, v = np.linalg.eigh(c)
    root = v * np.sqrt(np.clip(w, 0.0, None))

    def sample(rng: np.random.Generator) -> np.ndarray:
        return mu + root @ rng.standard_normal(mu.shape[0])

    return sample


def uniform_scale_sampler(low: float = 0.5, high: float = 2.0) -> ScaleSampler:
    if not 0 < low <= high:
        raise ValueError("scale bounds need 0 < low <= high")

    def sample(rng: np.random.Generator) -> float:
        return float(rng.uniform(low, high))

    return sample


def interleaved_pairs(T: int, eta: int) -> list[tuple[int, int]]:
    """Interleaved batches ``(t_first, t_first + eta)`` within ``T`` rounds.

    Batch ``k`` opens at ``k + floor((k - 1) / eta) eta``. Only whole blocks
    of ``2 eta`` rounds are used, so the labeled rounds always form a prefix
    of the schedule.

    Examples
    --------
    >>> interleaved_pairs(8, 2)
    [(1, 3), (2, 4), (5, 7), (6, 8)]
    >>> interleaved_pairs(10, 3)
    [(1, 4), (2, 5), (3, 6)]
    """
    count = eta * (T // (2 * eta))
    return [(k + ((k - 1) // eta) * eta, k + ((k - 1) // eta) * eta + eta) for k in range(1, count + 1)]


def _check_common(T: int, eta: int) -> None:
    if int(eta) != eta or eta < 1:
        raise ProtocolError(f"eta must be a positive integer, got {eta}")
    if T < 2:
        raise ProtocolError(f"at least 2 rounds are needed for a batch, got T={T}")


def _single(thetas: np.ndarray, batches: list[Batch], eta: int, mode: str) -> DeploymentSchedule:
    bt = tuple(batches)
    return DeploymentSchedule(
        thetas=thetas[:, None, :],
        batches=(bt,),
        etas=(int(eta),),
        mode=mode,
        coalition=(0,),
        coalition_batches=bt,
    )


def schedule_interleaved(T: int, eta: int, sampler: Sampler, scale_sampler: ScaleSampler,
                         rng: np.random.Generator) -> DeploymentSchedule:
    """Single-DM schedule with interleaved batches.

    Rounds are visited in order. A round that opens a batch (or belongs to
    none) gets a fresh draw; a round that closes a batch gets a fresh scale
    times its partner's parameter. Rounds after the last complete batch are
    fresh and unlabeled.
    """
    _check_common(T, eta)
    if T < 2 * eta:
        raise ProtocolError(f"T={T} rounds cannot hold a batch with eta={eta} (need T >= {2 * eta})")
    pairs = interleaved_pairs(T, eta)
    closes = {second: (bid, first) for bid, (first, second) in enumerate(pairs, start=1)}
    thetas: list[np.ndarray] = []
    batches = []
    for t in range(1, T + 1):
        if t in closes:
            bid, first = closes[t]
            k = scale_sampler(rng)
            thetas.append(k * thetas[first - 1])
            batches.append(Batch(bid, first, t, k))
        else:
            thetas.append(np.asarray(sampler(rng), dtype=float))
    batches.sort(key=lambda b: b.batch_id)
    return _single(np.array(thetas), batches, eta, "interleaved")


def schedule_block(T: int, eta: int, sampler: Sampler, scale_sampler: ScaleSampler,
                   rng: np.random.Generator) -> DeploymentSchedule:
    """Single-DM schedule following the block branching rule.

    A round in an odd block scales the parameter published ``eta`` rounds
    earlier, which may itself be a scaled round.
    """
    _check_common(T, eta)
    thetas: list[np.ndarray] = []
    batches = []
    for t in range(1, T + 1):
        block = t // (eta + 1)
        if block % 2 == 0:
            thetas.append(np.asarray(sampler(rng), dtype=float))
            continue
        partner = t - eta
        if partner < 1:
            warnings.warn(f"round {t} has no pairing target; sampling fresh", stacklevel=2)
            thetas.append(np.asarray(sampler(rng), dtype=float))
            continue
        k = scale_sampler(rng)
        thetas.append(k * thetas[partner - 1])
        batches.append(Batch(len(batches) + 1, partner, t, k))
    return _single(np.array(thetas), batches, eta, "block")


def schedule_fixed(T: int, theta) -> DeploymentSchedule:
    """Single-DM schedule publishing the same parameter every round."""
    th = np.asarray(theta, dtype=float)
    thetas = np.broadcast_to(th, (T, th.shape[0])).copy()
    return _single(thetas, [], 1, "fixed")


def verify_cooperative(schedule: DeploymentSchedule, t: int, t_prime: int,
                       dms: Sequence[int] | None = None) -> tuple[bool, np.ndarray]:
    """Test ``theta_t = k_i theta_t'`` with ``k_i > 0`` for each DM.

    Returns
    -------
    ok : bool
    k : ndarray, shape (n_checked,)
        Least-squares ratio ``<theta_t, theta_t'> / |theta_t'|^2`` per DM.

    Raises
    ------
    ProtocolError
        If a parameter in either round is the zero vector.
    """
    dms = range(schedule.n) if dms is None else dms
    a_all, b_all = schedule.theta(t), schedule.theta(t_prime)
    ok = True
    ks = []
    for i in dms:
        a, b = a_all[i], b_all[i]
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            raise ProtocolError(f"DM {i}: zero parameter vector makes the ratio undefined")
        k = float(a @ b) / (nb * nb)
        ks.append(k)
        if not (k > 0 and np.linalg.norm(a - k * b) <= RATIO_RTOL * na):
            ok = False
    return ok, np.array(ks)


def compose_multi_dm(schedules: Sequence[DeploymentSchedule], mode: str = "synchronous",
                     coalition: Sequence[int] | None = None) -> DeploymentSchedule:
    """Stack single-DM schedules into a joint schedule.

    Parameters
    ----------
    schedules : sequence of DeploymentSchedule
        One single-DM schedule per DM, all of the same length.
    mode : {"synchronous", "asynchronous"}
        Synchronous composition insists on identical lags and batch
        placements among coalition DMs.
    coalition : sequence of int, optional
        DMs whose joint scaling is checked; all DMs by default.
    """
    if not schedules:
        raise ProtocolError("no schedules to compose")
    if mode not in ("synchronous", "asynchronous"):
        raise ProtocolError(f"unknown composition mode {mode!r}")
    T = schedules[0].T
    if any(s.T != T for s in schedules):
        raise ProtocolError("all schedules must span the same number of rounds")
    if any(s.n != 1 for s in schedules):
        raise ProtocolError("compose_multi_dm expects single-DM schedules")
    members = tuple(range(len(schedules))) if coalition is None else tuple(coalition)
    if mode == "synchronous":
        etas = {schedules[i].etas[0] for i in members}
        if len(etas) > 1:
            raise ProtocolError(f"synchronous mode needs one eta across the coalition, got {sorted(etas)}")
        placements = {tuple(schedules[i].pairs(0)) for i in members}
        if len(placements) > 1:
            raise ProtocolError("synchronous mode needs identical batch placement across the coalition")
    joint = DeploymentSchedule(
        thetas=np.concatenate([s.thetas for s in schedules], axis=1),
        batches=tuple(s.batches[0] for s in schedules),
        etas=tuple(s.etas[0] for s in schedules),
        mode=mode,
        coalition=members,
        coalition_batches=(),
    )
    # candidate pairs come from the first member; verification covers the rest
    lead = members[0]
    common = []
    for b in joint.batches[lead]:
        ok, _ = verify_cooperative(joint, b.second, b.first, dms=members)
        if ok:
            common.append(Batch(len(common) + 1, b.first, b.second, b.scale))
    return DeploymentSchedule(
        thetas=joint.thetas,
        batches=joint.batches,
        etas=joint.etas,
        mode=mode,
        coalition=members,
        coalition_batches=tuple(common),
    )


def write_schedule(schedule: DeploymentSchedule, path) -> None:
    """Export as CSV with columns round, dm, theta_1..theta_m, batch, role, k.

    ``dm`` is 1-based. A round in several batches of the same DM gets one row
    per membership; a round in none gets one row with empty batch fields.
    """
    member: dict[tuple[int, int], list] = {}
    for i, bs in enumerate(schedule.batches):
        for b in bs:
            member.setdefault((b.first, i), []).append((b.batch_id, "first", ""))
            member.setdefault((b.second, i), []).append((b.batch_id, "second", repr(b.scale)))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "dm"] + [f"theta_{j + 1}" for j in range(schedule.m)] + ["batch", "role", "k"])
        for t in range(1, schedule.T + 1):
            for i in range(schedule.n):
                th = [repr(float(v)) for v in schedule.thetas[t - 1, i]]
                for entry in sorted(member.get((t, i), [("", "", "")]), key=str):
                    w.writerow([t, i + 1] + th + list(entry))


def read_schedule(path, etas: Sequence[int] | None = None, mode: str = "interleaved",
                  coalition: Sequence[int] | None = None) -> DeploymentSchedule:
    """Import a schedule CSV written by :func:`write_schedule`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty schedule file")
    header, body = rows[0], rows[1:]
    m = sum(h.startswith("theta_") for h in header)
    expected = ["round", "dm"] + [f"theta_{j + 1}" for j in range(m)] + ["batch", "role", "k"]
    if header != expected:
        raise DataFormatError(f"{path}: expected columns {expected}")
    T = max(int(r[0]) for r in body)
    n = max(int(r[1]) for r in body)
    thetas = np.full((T, n, m), math.nan)
    parts: dict[tuple[int, int], dict] = {}
    for r in body:
        t, i = int(r[0]), int(r[1]) - 1
        thetas[t - 1, i] = [float(v) for v in r[2:2 + m]]
        bid, role, k = r[2 + m], r[3 + m], r[4 + m]
        if bid:
            slot = parts.setdefault((i, int(bid)), {})
            slot[role] = t
            if role == "second":
                slot["k"] = float(k)
    if np.any(np.isnan(thetas)):
        raise DataFormatError(f"{path}: missing parameter rows")
    batches = []
    for i in range(n):
        bs = sorted(
            (Batch(bid, p["first"], p["second"], p["k"]) for (j, bid), p in parts.items() if j == i),
            key=lambda b: b.batch_id,
        )
        batches.append(tuple(bs))
    etas = tuple(etas) if etas is not None else tuple(
        (bs[0].second - bs[0].first) if bs else 1 for bs in batches
    )
    singles = [
        DeploymentSchedule(thetas[:, i:i + 1], (batches[i],), (etas[i],), mode, (0,), batches[i])
        for i in range(n)
    ]
    if n == 1:
        return singles[0]
    return compose_multi_dm(singles, "asynchronous", coalition)
