"""Comparison policies and waste metrics.

* Level-based Sum-of-Squares bin packing (plain, and with dead-end levels
  forbidden).
* The dynamic-programming optimum for the three-resource lower-bound
  instance (one queueable resource feeding two nonqueueable ones).
* A naive greedy that matches as soon as a configuration can be completed.
"""
from __future__ import annotations

import csv
import logging
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .arrivals import ArrivalProcess
from .instance import ONNQ, ONQ, MatchingInstance
from .trace import Trace

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# bin packing


@dataclass
class LevelState:
    """Open-bin counts by level for a bin of capacity ``B``."""

    B: int
    Q: list = field(default=None)
    bins_opened: int = 0
    bins_closed: int = 0
    volume_packed: int = 0

    def __post_init__(self):
        if self.Q is None:
            self.Q = [0] * self.B

    @classmethod
    def from_counts(cls, B: int, counts: dict) -> "LevelState":
        st = cls(B)
        for h, c in counts.items():
            if not 1 <= h < B:
                raise ValueError(f"level {h} outside 1..{B - 1}")
            st.Q[h] = int(c)
        return st

    def phi(self) -> int:
        return sum(q * q for q in self.Q[1:])

    def open_bins(self) -> int:
        return sum(self.Q[1:])


def dead_end_levels(B: int, sizes: Iterable[int], basic_levels: Optional[Iterable[int]] = None) -> set:
    """Levels in 1..B-1 from which no multiset of ``sizes`` fills the bin exactly.

    With ``basic_levels`` given only those levels are considered.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes:
        raise ValueError("sizes must be nonempty")
    fill = [False] * (B + 1)
    fill[0] = True
    for g in range(1, B + 1):
        fill[g] = any(s <= g and fill[g - s] for s in sizes)
    levels = range(1, B) if basic_levels is None else basic_levels
    return {h for h in levels if 1 <= h < B and not fill[B - h]}


def reachable_levels(B: int, sizes: Iterable[int]) -> set:
    """Levels in 1..B-1 that some packing sequence can produce."""
    sizes = list(sizes)
    reach = [False] * (B + 1)
    reach[0] = True
    for h in range(1, B + 1):
        reach[h] = any(s <= h and reach[h - s] for s in sizes)
    return {h for h in range(1, B) if reach[h]}


def csirik_place(state: LevelState, size: int, B: Optional[int] = None, forbid_dead_ends: bool = False, dead_ends: Iterable[int] = ()) -> int:
    """Place one item by the level Sum-of-Squares rule; returns the chosen level (0 = new bin).

    Minimises the resulting sum of squared level counts; ties go to the
    highest resulting level.  With ``forbid_dead_ends`` placements ending in
    a dead-end level are skipped, falling back to a new bin when nothing
    else is legal.
    """
    B = state.B if B is None else B
    if size > B or size < 1:
        raise ValueError(f"item size {size} does not fit a bin of size {B}")
    Q = state.Q
    dead = set(dead_ends) if forbid_dead_ends else set()
    best = None
    for h in [0] + [h for h in range(1, B - size + 1) if Q[h] > 0]:
        res = h + size
        if res in dead:
            continue
        d = 0
        if h > 0:
            d += -2 * Q[h] + 1
        if res < B:
            d += 2 * Q[res] + 1
        key = (d, -res)
        if best is None or key < best[0]:
            best = (key, h)
    h = 0 if best is None else best[1]
    if h == 0:
        state.bins_opened += 1
    else:
        Q[h] -= 1
    res = h + size
    if res < B:
        Q[res] += 1
    else:
        state.bins_closed += 1
    state.volume_packed += size
    return h


def level_waste(state: LevelState) -> int:
    """Unused space over open bins."""
    return sum(q * (state.B - h) for h, q in enumerate(state.Q) if h > 0)


def waste(obj, B: Optional[int] = None) -> float:
    """Waste of a level state or of a bin-packing :class:`SimState`."""
    if isinstance(obj, LevelState):
        return float(level_waste(obj))
    return obj.waste()


class PhysicalPlacement:
    """Explicit open bins for items committed to bin patterns.

    An item joins the oldest open bin of its pattern still lacking that size,
    otherwise it opens a new bin of the pattern.
    """

    def __init__(self, instance: MatchingInstance):
        if not instance.binpacking:
            raise ValueError("physical placement needs a bin-packing instance")
        self.instance = instance
        self.bins: dict = {}
        self.closed = 0

    def place(self, i: int, m: int) -> bool:
        """Place an item of resource ``i`` into pattern ``m``; True if a bin closed."""
        need = self.instance.matrix[:, m]
        if need[i] == 0:
            raise ValueError(f"pattern {m} has no slot for resource {i}")
        open_bins = self.bins.setdefault(m, [])
        for k, b in enumerate(open_bins):
            if b[i] < need[i]:
                b[i] += 1
                break
        else:
            k = len(open_bins)
            b = np.zeros(self.instance.n, dtype=np.int64)
            b[i] = 1
            open_bins.append(b)
        if np.array_equal(b, need):
            del open_bins[k]
            self.closed += 1
            return True
        return False

    def waste(self) -> int:
        B = self.instance.bin_size
        sizes = np.array(self.instance.sizes)
        return int(sum(B - int(sizes @ b) for bins in self.bins.values() for b in bins))


def simulate_csirik(
    B: int,
    sizes: Sequence[int],
    process: ArrivalProcess,
    T: int,
    seed: int,
    forbid_dead_ends: bool = False,
    record_every: Optional[int] = None,
) -> Trace:
    """Run the level SS heuristic; arrival ``i`` is an item of size ``sizes[i]``."""
    sizes = sorted(int(s) for s in sizes)
    record_every = record_every or max(1, T // 1000)
    dead = dead_end_levels(B, sizes) if forbid_dead_ends else set()
    st = LevelState(B)
    seq = process.start(T, seed).sequence if T > 0 else np.zeros(0, dtype=np.int64)
    cols = ["t", "arrival", "level", "waste", "bins_opened", "bins_closed", "open_bins", "volume", "phi"]
    cols += [f"Q_{h}" for h in range(1, B)]
    rows = []
    for t in range(T):
        i = int(seq[t])
        h = csirik_place(st, sizes[i], B, forbid_dead_ends, dead)
        if (t + 1) % record_every == 0 or t + 1 == T:
            rows.append([t + 1, i, h, level_waste(st), st.bins_opened, st.bins_closed, st.open_bins(), st.volume_packed, st.phi()] + st.Q[1:])
    header = {
        "seed": seed,
        "policy": "csirik_nodead" if forbid_dead_ends else "csirik",
        "bin_size": B,
        "sizes": sizes,
        "dead_ends": sorted(dead),
        "horizon": T,
        "record_every": record_every,
    }
    trace = Trace(header, cols, np.array(rows, dtype=float).reshape(len(rows), len(cols)))
    trace.extras["state"] = st
    return trace


# ---------------------------------------------------------------------------
# pool-based policies


@dataclass
class PoolState:
    """Arrived-but-unmatched units N_i and true match counts over all configurations."""

    instance: MatchingInstance
    N: list = None
    X: list = None
    A: list = None
    t: int = 0

    def __post_init__(self):
        n, d = self.instance.n, self.instance.d
        self.N = [0] * n if self.N is None else list(self.N)
        self.X = [0] * d if self.X is None else list(self.X)
        self.A = [0] * n if self.A is None else list(self.A)
        self._cols = [
            [(j, int(self.instance.matrix[j, m])) for j in self.instance.members(m)] for m in range(d)
        ]

    def completable(self, m: int) -> bool:
        return all(self.N[j] >= c for j, c in self._cols[m])

    def execute(self, m: int) -> None:
        for j, c in self._cols[m]:
            self.N[j] -= c
        self.X[m] += 1

    def true_reward(self) -> float:
        r = self.instance.rewards
        return float(sum(r[m] * x for m, x in enumerate(self.X) if x))


def naive_greedy_policy(instance: MatchingInstance, state: PoolState, i: int) -> int:
    """Complete the best positive-reward configuration containing ``i`` that the
    pool can fill right now; -1 means hold the unit.

    ``state.N`` already includes the arriving unit.
    """
    best = -1
    for m in range(instance.d):
        if instance.matrix[i, m] == 0 or instance.rewards[m] <= 0:
            continue
        if state.completable(m) and (best < 0 or instance.rewards[m] > instance.rewards[best]):
            best = m
    return best


@dataclass
class DpPolicyTable:
    """Backward-induction table for the lower-bound instance shape.

    ``match_b[t, q]`` says whether to match a type-b arrival at step ``t + 1``
    when ``q`` queueable units wait (likewise ``match_c``).  ``V`` holds the
    full value table when it is small, otherwise None; ``V0`` is always kept.
    """

    T: int
    q_cap: int
    resources: tuple
    configs: tuple
    rewards: tuple
    lam: np.ndarray
    V0: np.ndarray
    match_b: np.ndarray
    match_c: np.ndarray
    V: Optional[np.ndarray] = None

    def value(self, t: int, q: int):
        """V(t, q); a Fraction for exact tables, otherwise a float."""
        if self.V is None:
            if t != 0:
                raise ValueError("full value table was not stored")
            v = self.V0[q]
        else:
            v = self.V[t, q]
        return v if isinstance(v, Fraction) else float(v)


def lower_bound_shape(instance: MatchingInstance) -> tuple[tuple, tuple]:
    """Identify (a, b, c) resources and the two match configurations (m_b, m_c)."""
    if instance.n != 3:
        raise ValueError("DP baseline needs exactly three resource types")
    q = instance.resources_of(ONQ)
    nq = instance.nonqueueable
    if len(q) != 1 or len(nq) != 2:
        raise ValueError("DP baseline needs one queueable and two nonqueueable resources")
    a = q[0]
    pairs = {}
    for m in range(instance.d):
        mem = instance.members(m)
        if len(mem) == 1:
            if instance.rewards[m] != 0:
                raise ValueError("singleton configurations must be zero-reward discards")
            continue
        if len(mem) != 2 or a not in mem or any(instance.matrix[j, m] != 1 for j in mem):
            raise ValueError(f"configuration {m} does not pair the queueable resource with one other")
        other = mem[0] if mem[1] == a else mem[1]
        if other in pairs:
            raise ValueError(f"two configurations pair resource {a} with {other}")
        pairs[other] = m
    if set(pairs) != set(nq):
        raise ValueError("each nonqueueable resource needs exactly one match configuration")
    b, c = sorted(nq, key=lambda j: pairs[j])
    return (a, b, c), (pairs[b], pairs[c])


def dp_policy_build(
    instance: MatchingInstance,
    lam,
    T: int,
    q_cap: int = 256,
    keep_values: Optional[bool] = None,
    exact: bool = False,
) -> DpPolicyTable:
    """Optimal terminal-reward policy by backward induction over (t, q).

    A queueable arrival at the cap is dropped.  With ``exact`` the recursion
    runs on :class:`fractions.Fraction` values (small tables only).
    """
    (a, b, c), (mb, mc) = lower_bound_shape(instance)
    if q_cap < 0 or T < 0:
        raise ValueError("q_cap and T must be nonnegative")
    if exact:
        conv, dtype = Fraction, object
        lam = np.array([Fraction(x).limit_denominator(10**12) if isinstance(x, float) else Fraction(x) for x in lam], dtype=object)
    else:
        conv, dtype = float, float
        lam = np.asarray(lam, dtype=float)
    la, lb, lc = lam[a], lam[b], lam[c]
    rb, rc = conv(instance.rewards[mb]), conv(instance.rewards[mc])
    if keep_values is None:
        keep_values = exact or (T + 1) * (q_cap + 1) <= 2_000_000
    q = np.arange(q_cap + 1)
    up = np.minimum(q + 1, q_cap)
    down = np.maximum(q - 1, 0)
    has = q > 0
    V = np.full((T + 1, q_cap + 1), conv(0), dtype=dtype) if keep_values else None
    act_b = np.zeros((T, q_cap + 1), dtype=bool)
    act_c = np.zeros((T, q_cap + 1), dtype=bool)
    nxt = np.full(q_cap + 1, conv(0), dtype=dtype)
    for t in range(T - 1, -1, -1):
        take_b = rb + nxt[down]
        take_c = rc + nxt[down]
        mb_ = has & (take_b >= nxt).astype(bool)
        mc_ = has & (take_c >= nxt).astype(bool)
        act_b[t] = mb_
        act_c[t] = mc_
        cur = la * nxt[up] + lb * np.where(mb_, take_b, nxt) + lc * np.where(mc_, take_c, nxt)
        nxt = cur
        if V is not None:
            V[t] = cur
    return DpPolicyTable(T, q_cap, (a, b, c), (mb, mc), (rb, rc), lam.copy(), nxt.copy(), act_b, act_c, V)


def dump_dp_table(table: DpPolicyTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "q", "value", "match_b", "match_c"])
        for t in range(table.T + 1):
            for q in range(table.q_cap + 1):
                if table.V is not None:
                    v = repr(float(table.V[t, q]))
                else:
                    v = repr(float(table.V0[q])) if t == 0 else ""
                mb = int(table.match_b[t, q]) if t < table.T else ""
                mc = int(table.match_c[t, q]) if t < table.T else ""
                w.writerow([t, q, v, mb, mc])


def dp_policy(table: DpPolicyTable) -> Callable:
    """Pool policy driven by a DP table.  Queueable units beyond ``q_cap`` are dropped."""
    a, b, c = table.resources
    mb, mc = table.configs
    warned = [False]

    def policy(instance, state: PoolState, i: int) -> int:
        t = state.t - 1
        if i == a:
            if state.N[a] > table.q_cap:
                state.N[a] = table.q_cap
                if not warned[0]:
                    logger.warning("DP queue cap %d binds at step %d; extra units dropped", table.q_cap, state.t)
                    warned[0] = True
            return -1
        qn = min(state.N[a], table.q_cap)
        if t >= table.T:
            raise ValueError("simulation ran past the DP horizon")
        if i == b and qn > 0 and table.match_b[t, qn]:
            return mb
        if i == c and qn > 0 and table.match_c[t, qn]:
            return mc
        return -1

    policy.__name__ = "dp"
    return policy


def simulate_pool(
    instance: MatchingInstance,
    process: ArrivalProcess,
    policy: Callable,
    T: int,
    seed: int,
    record_every: Optional[int] = None,
    name: Optional[str] = None,
) -> Trace:
    """Simulation loop for policies acting on the physical pool of units.

    Each arrival joins the pool, the policy may complete one configuration
    containing it, and nonqueueable units left unmatched are lost.
    """
    record_every = record_every or max(1, T // 1000)
    st = PoolState(instance)
    nq = set(instance.nonqueueable)
    seq = process.start(T, seed).sequence if T > 0 else np.zeros(0, dtype=np.int64)
    n, d = instance.n, instance.d
    cols = ["t", "arrival", "committed_config", "true_reward", "virtual_reward", "hindsight_opt", "regret", "phi"]
    cols += [f"pool_{i}" for i in range(n)] + [f"A_{i}" for i in range(n)] + [f"X_{m}" for m in range(d)]
    cols += ["in_ball", "waste"]
    rows = []
    nan = float("nan")
    for t in range(T):
        i = int(seq[t])
        st.t = t + 1
        st.A[i] += 1
        st.N[i] += 1
        m = policy(instance, st, i)
        if m >= 0:
            if instance.matrix[i, m] == 0 or not st.completable(m):
                raise ValueError(f"policy chose configuration {m} that cannot be completed with resource {i}")
            st.execute(m)
        if i in nq:
            st.N[i] = 0
        if (t + 1) % record_every == 0 or t + 1 == T:
            rew = st.true_reward()
            rows.append([t + 1, i, m, rew, rew, nan, nan, 0.0] + st.N + st.A + st.X + [nan, nan])
    header = {
        "seed": seed,
        "instance": instance.digest(),
        "policy": name or getattr(policy, "__name__", "pool"),
        "horizon": T,
        "record_every": record_every,
    }
    trace = Trace(header, cols, np.array(rows, dtype=float).reshape(len(rows), len(cols)))
    trace.extras["state"] = st
    return trace
