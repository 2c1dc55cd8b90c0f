"""Problem instances for online multiway matching.

A :class:`MatchingInstance` is the static description of a matching problem:
resource types partitioned into offline / online-queueable /
online-nonqueueable classes, a consumption matrix ``M`` (resources x
configurations) and a reward per configuration.  Arrival rates live apart
from the instance in :class:`ArrivalRates` so one instance can be paired with
several rate vectors.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ResourceClass(enum.Enum):
    OFFLINE = "off"
    ONLINE_QUEUEABLE = "onq"
    ONLINE_NONQUEUEABLE = "onnq"

    @property
    def online(self) -> bool:
        return self is not ResourceClass.OFFLINE


OFF = ResourceClass.OFFLINE
ONQ = ResourceClass.ONLINE_QUEUEABLE
ONNQ = ResourceClass.ONLINE_NONQUEUEABLE


class InstanceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatchingInstance:
    """Resource classes, consumption matrix and rewards.

    ``matrix[i, m]`` is the number of units of resource ``i`` used by
    configuration ``m``.  Entries are 0/1 except in bin-packing mode
    (``bin_size`` set), where a pattern may hold several items of one size.
    """

    classes: tuple[ResourceClass, ...]
    matrix: np.ndarray
    rewards: np.ndarray
    no_discard: bool = False
    bin_size: Optional[int] = None
    sizes: Optional[tuple[int, ...]] = None
    names: Optional[tuple[str, ...]] = None
    _discard: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        classes = tuple(c if isinstance(c, ResourceClass) else ResourceClass(c) for c in self.classes)
        mat = np.array(self.matrix, dtype=np.int64)
        if mat.ndim != 2:
            raise InstanceError("matrix must be 2-dimensional")
        rew = np.array(self.rewards, dtype=float).reshape(-1)
        mat.setflags(write=False)
        rew.setflags(write=False)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "rewards", rew)
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
        discard = {}
        if mat.shape[0] == len(classes):
            for m in range(mat.shape[1]):
                col = mat[:, m]
                if col.sum() == 1 and (self.bin_size is not None or rew[m] == 0.0):
                    i = int(np.argmax(col))
                    discard.setdefault(i, m)
        object.__setattr__(self, "_discard", discard)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    @property
    def binpacking(self) -> bool:
        return self.bin_size is not None

    @property
    def discard_index(self) -> dict[int, int]:
        """Resource -> column of its singleton discard configuration."""
        return dict(self._discard)

    def members(self, m: int) -> tuple[int, ...]:
        """Resources participating in configuration ``m`` (ascending)."""
        return tuple(int(i) for i in np.flatnonzero(self.matrix[:, m]))

    def length(self, m: int) -> int:
        """ell_m, the column sum of configuration ``m``."""
        return int(self.matrix[:, m].sum())

    def resources_of(self, cls: ResourceClass) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.classes) if c is cls)

    @property
    def offline(self) -> tuple[int, ...]:
        return self.resources_of(OFF)

    @property
    def nonqueueable(self) -> tuple[int, ...]:
        return self.resources_of(ONNQ)

    def has_nonqueueable(self, m: int) -> bool:
        return any(self.classes[i] is ONNQ for i in self.members(m))

    def to_dict(self) -> dict:
        out = {
            "classes": [c.value for c in self.classes],
            "matrix": self.matrix.tolist(),
            "rewards": [float(x) for x in self.rewards],
            "no_discard": bool(self.no_discard),
        }
        if self.bin_size is not None:
            out["bin_size"] = int(self.bin_size)
            out["sizes"] = list(self.sizes or ())
        if self.names is not None:
            out["names"] = list(self.names)
        return out

    def digest(self) -> str:
        """Short stable hash of the instance content, used in trace headers."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ArrivalRates:
    """Per-step arrival distribution and horizon.

    Offline entries hold deterministic injection rates (inventory / horizon),
    online entries hold sampling probabilities; the whole vector sums to one.
    """

    lam: np.ndarray
    horizon: int

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(-1)
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        if int(self.horizon) < 1:
            raise InstanceError("horizon must be a positive integer")
        object.__setattr__(self, "horizon", int(self.horizon))
        if np.any(lam < 0):
            raise InstanceError("arrival rates must be nonnegative")
        if abs(lam.sum() - 1.0) > 1e-9:
            raise InstanceError(f"arrival rates sum to {lam.sum():.12g}, expected 1")

    def online_mass(self, instance: MatchingInstance) -> float:
        return float(sum(self.lam[i] for i, c in enumerate(instance.classes) if c.online))


def validate(instance: MatchingInstance) -> list[str]:
    """Return the list of violated instance invariants (empty when valid)."""
    problems = []
    M, r = instance.matrix, instance.rewards
    n, d = M.shape
    if len(instance.classes) != n:
        problems.append(f"classes has {len(instance.classes)} entries for {n} resources")
        return problems
    if r.shape != (d,):
        problems.append(f"rewards has {r.size} entries for {d} configurations")
    if np.any(M < 0):
        problems.append("negative consumption entry")
    if not instance.binpacking and np.any(M > 1):
        problems.append("consumption entries must be 0/1 outside bin-packing mode")
    for m in range(d):
        if M[:, m].sum() < 1:
            problems.append(f"configuration {m} consumes no resources")
        nq = [i for i in instance.members(m) if instance.classes[i] is ONNQ]
        if len(nq) > 1:
            problems.append(f"configuration {m} has {len(nq)} online-nonqueueable resources")
        if any(M[i, m] > 1 for i in nq):
            problems.append(f"configuration {m} uses several units of a nonqueueable resource")
    if instance.binpacking:
        if instance.sizes is None or len(instance.sizes) != n:
            problems.append("bin-packing instance needs one size per resource")
        else:
            for m in range(d):
                vol = int(np.dot(instance.sizes, M[:, m]))
                if vol > instance.bin_size:
                    problems.append(f"pattern {m} overflows the bin ({vol} > {instance.bin_size})")
    if instance.no_discard:
        # Bin-packing patterns are implicitly downward closed: every partial
        # pattern is an open bin of that pattern.
        if not instance.binpacking:
            cols = {tuple(M[:, m]) for m in range(d)}
            for m in range(d):
                for i in instance.members(m):
                    sub = M[:, m].copy()
                    sub[i] -= 1
                    if sub.sum() > 0 and tuple(sub) not in cols:
                        problems.append(f"configuration set not downward closed at {m} minus resource {i}")
            for i in range(n):
                if not np.any(M[i] > 0):
                    problems.append(f"resource {i} appears in no configuration")
    else:
        disc = instance.discard_index
        for i in range(n):
            if i not in disc:
                problems.append(f"missing discard configuration for resource {i}")
    return problems


def require_valid(instance: MatchingInstance) -> None:
    problems = validate(instance)
    if problems:
        raise InstanceError("; ".join(problems))


def _patterns(B: int, sizes: Sequence[int]) -> list[tuple[int, ...]]:
    ranges = [range(B // s + 1) for s in sizes]
    out = [c for c in itertools.product(*ranges) if sum(k * s for k, s in zip(c, sizes)) == B]
    return sorted(out)


def binpacking_instance(B: int, sizes: Sequence[int], rejection_reward: Optional[float] = None) -> MatchingInstance:
    """Stochastic bin packing as a matching instance.

    One online-queueable resource per item size (ascending).  Configurations
    are the perfect-packing patterns (multisets of sizes summing exactly to
    ``B``), each with reward -1.  With ``rejection_reward`` given, a singleton
    configuration per size is appended with that reward; ``-1`` models an
    item packed alone in its own bin.
    """
    if int(B) < 1:
        raise InstanceError("bin size must be at least 1")
    B = int(B)
    sizes = sorted(int(s) for s in sizes)
    if len(set(sizes)) != len(sizes) or not sizes:
        raise InstanceError("item sizes must be distinct and nonempty")
    if sizes[0] < 1:
        raise InstanceError("item sizes must be positive")
    if sizes[-1] > B:
        raise InstanceError(f"item size {sizes[-1]} exceeds bin size {B}")
    pats = _patterns(B, sizes)
    if not pats:
        raise InstanceError(f"no multiset of {sizes} fills a bin of size {B}")
    cols = [list(p) for p in pats]
    rewards = [-1.0] * len(cols)
    if rejection_reward is not None:
        for k in range(len(sizes)):
            e = [0] * len(sizes)
            e[k] = 1
            if e not in cols:
                cols.append(e)
                rewards.append(float(rejection_reward))
    mat = np.array(cols, dtype=np.int64).T
    return MatchingInstance(
        classes=(ONQ,) * len(sizes),
        matrix=mat,
        rewards=np.array(rewards),
        no_discard=rejection_reward is None,
        bin_size=B,
        sizes=tuple(sizes),
        names=tuple(f"size{s}" for s in sizes),
    )


def instance_from_dict(doc: dict) -> tuple[MatchingInstance, Optional[ArrivalRates]]:
    try:
        inst = MatchingInstance(
            classes=tuple(ResourceClass(c) for c in doc["classes"]),
            matrix=np.array(doc["matrix"], dtype=np.int64),
            rewards=np.array(doc["rewards"], dtype=float),
            no_discard=bool(doc.get("no_discard", False)),
            bin_size=doc.get("bin_size"),
            sizes=doc.get("sizes"),
            names=doc.get("names"),
        )
    except KeyError as exc:
        raise InstanceError(f"instance document lacks field {exc}") from None
    rates = None
    if "lambda" in doc:
        rates = ArrivalRates(np.array(doc["lambda"], dtype=float), int(doc.get("horizon", 1)))
    return inst, rates


def load_instance(path) -> tuple[MatchingInstance, Optional[ArrivalRates]]:
    """Read a JSON instance file (see README for the schema)."""
    with open(path) as fh:
        return instance_from_dict(json.load(fh))


def dump_instance(path, instance: MatchingInstance, rates: Optional[ArrivalRates] = None, **extra) -> None:
    doc = instance.to_dict()
    if rates is not None:
        doc["lambda"] = [float(x) for x in rates.lam]
        doc["horizon"] = rates.horizon
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
