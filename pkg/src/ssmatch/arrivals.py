"""Arrival processes.

Every process is materialised into an integer array of resource types for a
given horizon and generator; :class:`ArrivalRun` wraps that array for
one-at-a-time consumption.  Materialising keeps the step-by-step and batch
paths bit-identical.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .instance import ArrivalRates, MatchingInstance

logger = logging.getLogger(__name__)


class ExhaustedError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator; the seed is recorded in every trace header."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class ArrivalEvent:
    t: int
    resource: int
    lambda_t: Optional[np.ndarray] = None


class ArrivalProcess:
    """Base class.  Subclasses implement :meth:`sample` and :meth:`rates_at`."""

    n: int

    def sample(self, T: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def rates_at(self, t: int) -> Optional[np.ndarray]:
        return None

    def horizon(self) -> Optional[int]:
        """Fixed number of events, or None when the process is unbounded."""
        return None

    def start(self, T: int, seed) -> "ArrivalRun":
        return ArrivalRun(self, self.sample(T, make_rng(seed)))


@dataclass
class ArrivalRun:
    process: ArrivalProcess
    sequence: np.ndarray
    position: int = 0

    def __len__(self):
        return len(self.sequence)


def next_arrival(run: ArrivalRun) -> ArrivalEvent:
    """Pop the next event from a started process."""
    if run.position >= len(run.sequence):
        raise ExhaustedError(f"arrival process exhausted after {run.position} events")
    run.position += 1
    t = run.position
    return ArrivalEvent(t, int(run.sequence[t - 1]), run.process.rates_at(t))


def stream(run: ArrivalRun):
    while run.position < len(run.sequence):
        yield next_arrival(run)


@dataclass
class Iid(ArrivalProcess):
    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam < 0) or abs(lam.sum() - 1.0) > 1e-9:
            raise ValueError("i.i.d. arrival probabilities must be a distribution")
        self.lam = lam / lam.sum()
        self.n = lam.size

    def sample(self, T, rng):
        return rng.choice(self.n, size=int(T), p=self.lam).astype(np.int64)

    def rates_at(self, t):
        return self.lam


@dataclass
class EmulatedOffline(ArrivalProcess):
    """Offline inventory interleaved with online arrivals.

    ``inventory[i]`` units of each offline type are spread over
    ``T = online_steps + sum(inventory)`` steps.  At each step the type
    (offline resource or the online pseudo-type) furthest behind its
    deterministic share ``lambda_bar_i * (t - 1)`` is served; ties go to the
    lowest offline index and the online pseudo-type comes last.  An online
    step samples from ``online_probs``.
    """

    inventory: dict
    online_probs: np.ndarray
    online_steps: int

    def __post_init__(self):
        self.online_probs = np.asarray(self.online_probs, dtype=float)
        self.n = self.online_probs.size
        self.inventory = {int(i): int(c) for i, c in sorted(self.inventory.items())}
        if any(c < 0 for c in self.inventory.values()):
            raise ValueError("offline inventory must be nonnegative")
        if any(self.online_probs[i] > 0 for i in self.inventory):
            raise ValueError("offline resources cannot carry online probability")
        if self.online_steps < 0:
            raise ValueError("online step count must be nonnegative")
        if self.online_steps > 0 and abs(self.online_probs.sum() - 1.0) > 1e-9:
            raise ValueError("online probabilities must sum to one")
        self.T = self.online_steps + sum(self.inventory.values())

    @classmethod
    def from_rates(cls, instance: MatchingInstance, rates: ArrivalRates) -> "EmulatedOffline":
        """Inventories ``round(lambda_i T)`` for offline types, the rest online."""
        lam, T = rates.lam, rates.horizon
        inv = {i: int(round(lam[i] * T)) for i in instance.offline}
        online = np.array([0.0 if c.value == "off" else lam[i] for i, c in enumerate(instance.classes)])
        mass = online.sum()
        probs = online / mass if mass > 0 else online
        return cls(inv, probs, T - sum(inv.values()))

    def horizon(self):
        return self.T

    @property
    def pseudo_types(self) -> list:
        """Offline indices followed by the online pseudo-type (None)."""
        return list(self.inventory) + [None]

    def shares(self) -> list:
        """Per pseudo-type share counts c with lambda_bar = c / T."""
        return list(self.inventory.values()) + [self.online_steps]

    def class_schedule(self) -> list:
        """Deterministic sequence of pseudo-types (offline index or None)."""
        keys = self.pseudo_types
        c = self.shares()
        A = [0] * len(keys)
        out = []
        T = self.T
        for t in range(1, T + 1):
            # exact integer deficits A_i T - c_i (t - 1)
            best, pick = None, None
            for k in range(len(keys)):
                if A[k] >= c[k]:
                    continue
                v = A[k] * T - c[k] * (t - 1)
                if best is None or v < best:
                    best, pick = v, k
            A[pick] += 1
            out.append(keys[pick])
        return out

    def sample(self, T, rng):
        if T > self.T:
            raise ExhaustedError(f"emulated process has only {self.T} steps")
        sched = self.class_schedule()[:T]
        n_online = sum(1 for k in sched if k is None)
        draws = rng.choice(self.n, size=n_online, p=self.online_probs) if n_online else np.zeros(0, dtype=np.int64)
        out = np.empty(T, dtype=np.int64)
        j = 0
        for t, k in enumerate(sched):
            if k is None:
                out[t] = draws[j]
                j += 1
            else:
                out[t] = k
        return out

    def rates_at(self, t):
        lam = self.online_probs * (self.online_steps / self.T)
        for i, c in self.inventory.items():
            lam[i] = c / self.T
        return lam

    def smoothing_window(self) -> float:
        shares = [c for c in self.shares() if c > 0]
        lam_min = min(shares) / self.T
        return (len(self.inventory) + 1) / lam_min


@dataclass
class LocallyPermuted(ArrivalProcess):
    """Base stream shuffled so that no item moves more than ``gamma`` places.

    Item ``j`` gets key ``j + U_j (gamma + 1)`` with ``U_j`` uniform on [0, 1);
    a stable sort by key can only swap items less than ``gamma + 1`` apart.
    """

    base: ArrivalProcess
    gamma: int

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.n = self.base.n

    def sample(self, T, rng):
        seq = self.base.sample(T, rng)
        if self.gamma == 0:
            return seq
        keys = np.arange(T) + rng.random(T) * (self.gamma + 1)
        return seq[np.argsort(keys, kind="stable")]

    def rates_at(self, t):
        return self.base.rates_at(t)

    def horizon(self):
        return self.base.horizon()

    def smoothing_window(self) -> float:
        return float(self.gamma)


@dataclass
class Scripted(ArrivalProcess):
    sequence: Sequence[int]
    n: int = 0

    def __post_init__(self):
        self.sequence = np.asarray(self.sequence, dtype=np.int64)
        if self.n == 0:
            self.n = int(self.sequence.max()) + 1 if self.sequence.size else 0
        if self.sequence.size and (self.sequence.min() < 0 or self.sequence.max() >= self.n):
            raise ValueError("scripted arrival outside resource range")

    @classmethod
    def from_file(cls, path, n: int = 0) -> "Scripted":
        lines = [ln.split("#")[0].strip() for ln in Path(path).read_text().splitlines()]
        return cls([int(ln) for ln in lines if ln], n)

    def sample(self, T, rng):
        if T > len(self.sequence):
            raise ExhaustedError(f"script holds only {len(self.sequence)} arrivals")
        return self.sequence[:T].copy()

    def horizon(self):
        return len(self.sequence)


@dataclass
class DiscrepancyReport:
    violations: list = field(default_factory=list)
    max_excess: float = 0.0
    min_excess: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def discrepancy_bounds_check(process: EmulatedOffline, sequence) -> DiscrepancyReport:
    """Check ``-n_off <= A_i^t - lambda_bar_i t <= 1`` along a full emulated run.

    Pseudo-types are the offline resources plus the online class.  Offline
    inventories must also be exhausted exactly at the horizon.
    """
    seq = np.asarray(sequence, dtype=np.int64)
    T = process.T
    rep = DiscrepancyReport()
    if len(seq) != T:
        rep.violations.append(f"run has {len(seq)} events, horizon is {T}")
        return rep
    n_off = len(process.inventory)
    off = list(process.inventory)
    shares = process.shares()
    is_off = np.zeros(process.n, dtype=bool)
    is_off[off] = True
    indicators = [seq == i for i in off] + [~is_off[seq]]
    t = np.arange(1, T + 1, dtype=np.int64)
    for k, ind in enumerate(indicators):
        # scaled by T to stay in integers
        excess = np.cumsum(ind, dtype=np.int64) * T - shares[k] * t
        hi, lo = int(excess.max(initial=0)), int(excess.min(initial=0))
        rep.max_excess = max(rep.max_excess, hi / T)
        rep.min_excess = min(rep.min_excess, lo / T)
        label = f"offline {off[k]}" if k < n_off else "online"
        if hi > T:
            rep.violations.append(f"{label}: excess {Fraction(hi, T)} above 1")
        if lo < -n_off * T:
            rep.violations.append(f"{label}: deficit {Fraction(-lo, T)} below -{n_off}")
        if k < n_off and int(ind.sum()) != shares[k]:
            rep.violations.append(f"{label}: {int(ind.sum())} arrivals, inventory {shares[k]}")
    return rep
