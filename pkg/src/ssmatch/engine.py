"""Sum-of-Squares greedy commitment policy and its simulation loop.

State is kept per basic configuration ("slot") and per member resource.
For a slot with members ``i_1 < ... < i_l`` (this ascending order is the
fixed cyclic permutation used by the potential) we store

* ``vq``: virtual queues  Y - vX * M
* ``tq``: true queues     Y - X * M
* ``vX``, ``X``: virtual and true match counts.

With integer multiplicities the potential is taken over ``vq / M``.  To
stay in exact integer arithmetic everything is scaled by ``L``, the lcm of
all multiplicities, so ``u = (L / M) * vq`` is an integer and the stored
potential is ``L**2`` times the real one.  For 0/1 instances ``L = 1``.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .arrivals import ArrivalProcess
from .instance import ONNQ, OFF, MatchingInstance
from .spp import SppSolution
from .trace import Trace

logger = logging.getLogger(__name__)


class PolicyError(RuntimeError):
    pass


def phi_config(q: Sequence[float], sigma: Optional[Sequence[int]] = None) -> float:
    """Cyclic sum of squared consecutive differences of ``q`` along ``sigma``."""
    vals = [q[s] for s in (sigma if sigma is not None else range(len(q)))]
    if len(vals) < 2:
        return 0.0
    return float(sum((vals[k] - vals[k - 1]) ** 2 for k in range(len(vals))))


def _scaled(instance: MatchingInstance, m: int, q_m) -> tuple[list, list, int]:
    members = instance.members(m)
    mult = [int(instance.matrix[i, m]) for i in members]
    L = math.lcm(*mult)
    w = [L // k for k in mult]
    return [w[p] * q_m[i] for p, i in enumerate(members)], w, L


def virtual_feasible(instance: MatchingInstance, m: int, q_m, i: int) -> bool:
    """Whether committing ``i`` to ``m`` completes a virtual match.

    ``q_m`` is indexed by resource (entries outside the configuration are
    ignored).  A nonqueueable arrival always matches virtually; a
    configuration containing a nonqueueable resource never matches on any
    other arrival; otherwise every member needs ``M_im`` queued units.
    """
    members = instance.members(m)
    if i not in members:
        raise PolicyError(f"resource {i} is not part of configuration {m}")
    if instance.classes[i] is ONNQ:
        return True
    if instance.has_nonqueueable(m):
        return False
    return all(q_m[j] + (1 if j == i else 0) >= instance.matrix[j, m] for j in members)


def true_feasible(instance: MatchingInstance, m: int, Q_m, i: int, offline_used=None, offline_budget=None) -> bool:
    """Whether a true match can be executed at the commit of ``i`` to ``m``.

    Offline members are checked against the global remaining budget, online
    members against their true queue in ``m`` including the new unit.
    """
    members = instance.members(m)
    if i not in members:
        raise PolicyError(f"resource {i} is not part of configuration {m}")
    for j in members:
        need = int(instance.matrix[j, m])
        if instance.classes[j] is OFF:
            budget = offline_budget[j] if offline_budget is not None else 0
            used = offline_used[j] if offline_used is not None else 0
            if budget - used < need:
                return False
        elif Q_m[j] + (1 if j == i else 0) < need:
            return False
    return True


def delta_phi(instance: MatchingInstance, m: int, q_m, i: int) -> float:
    """Change of the configuration potential when ``i`` is committed to ``m``.

    Uses the closed form ``2 w (2 u_p - u_{p-1} - u_{p+1}) + 2 w**2`` on the
    scaled queues; a virtual match shifts every scaled queue by the same
    amount and so leaves the differences untouched.
    """
    members = instance.members(m)
    if i not in members:
        raise PolicyError(f"resource {i} is not part of configuration {m}")
    if len(members) == 1:
        return 0.0
    u, w, L = _scaled(instance, m, q_m)
    p = members.index(i)
    nxt = (p + 1) % len(members)
    d = 2 * w[p] * (2 * u[p] - u[p - 1] - u[nxt]) + 2 * w[p] ** 2
    return d / L**2


class SimState:
    """Queue bookkeeping for a fixed set of basic configurations."""

    def __init__(self, instance: MatchingInstance, slots: Sequence[int], offline_budget: Optional[dict] = None):
        self.instance = instance
        self.slots = [int(m) for m in slots]
        M = instance.matrix
        self.members = [instance.members(m) for m in self.slots]
        self.mult = [[int(M[i, m]) for i in mem] for m, mem in zip(self.slots, self.members)]
        self.L = math.lcm(*[k for row in self.mult for k in row]) if self.slots else 1
        self.weights = [[self.L // k for k in row] for row in self.mult]
        self.lens = [len(mem) for mem in self.members]
        self.reward = [float(instance.rewards[m]) for m in self.slots]
        self.onnq_pos = []
        self.offline_pos = []
        for mem in self.members:
            nq = [p for p, i in enumerate(mem) if instance.classes[i] is ONNQ]
            self.onnq_pos.append(nq[0] if nq else -1)
            self.offline_pos.append([p for p, i in enumerate(mem) if instance.classes[i] is OFF])
        self.cands = [[] for _ in range(instance.n)]
        for k, mem in enumerate(self.members):
            for p, i in enumerate(mem):
                self.cands[i].append((k, p))
        self.vq = [[0] * l for l in self.lens]
        self.tq = [[0] * l for l in self.lens]
        self.vqmin = [[0] * l for l in self.lens]
        self.vX = [0] * len(self.slots)
        self.X = [0] * len(self.slots)
        self.A = [0] * instance.n
        self.budget = {int(i): int(c) for i, c in (offline_budget or {}).items()}
        for i in instance.offline:
            self.budget.setdefault(i, 0)
        self.used = [0] * instance.n
        self.phi_scaled = 0
        self.t = 0

    @classmethod
    def for_solution(cls, instance: MatchingInstance, solution: SppSolution, offline_budget: Optional[dict] = None) -> "SimState":
        """State over the optimal basis; resources outside every basic
        configuration fall back to their discard column."""
        slots = list(solution.basis)
        covered = {i for m in slots for i in instance.members(m)}
        for i in range(instance.n):
            if i not in covered:
                m = instance.discard_index.get(i)
                if m is None:
                    raise PolicyError(f"resource {i} has no basic or discard configuration")
                logger.info("resource %d is in no basic configuration; it is discarded on arrival", i)
                slots.append(m)
        return cls(instance, slots, offline_budget)

    # -- derived quantities -------------------------------------------------

    def slot_of(self, m: int) -> int:
        return self.slots.index(m)

    def Y(self, k: int) -> list:
        return [q + self.vX[k] * c for q, c in zip(self.vq[k], self.mult[k])]

    def phi(self) -> float:
        return self.phi_scaled / self.L**2

    def phi_recomputed_scaled(self) -> int:
        tot = 0
        for k in range(len(self.slots)):
            if self.lens[k] < 2:
                continue
            u = [w * q for w, q in zip(self.weights[k], self.vq[k])]
            tot += sum((u[p] - u[p - 1]) ** 2 for p in range(len(u)))
        return tot

    def unmatched(self) -> list:
        """N_i: arrived units not consumed by any true match."""
        N = list(self.A)
        for k, m in enumerate(self.slots):
            for p, i in enumerate(self.members[k]):
                N[i] -= self.X[k] * self.mult[k][p]
        return N

    def true_reward(self) -> float:
        return float(sum(r * x for r, x in zip(self.reward, self.X)))

    def virtual_reward(self) -> float:
        return float(sum(r * x for r, x in zip(self.reward, self.vX)))

    def virtual_queue_totals(self) -> np.ndarray:
        out = np.zeros(self.instance.n)
        for k, mem in enumerate(self.members):
            for p, i in enumerate(mem):
                out[i] += self.vq[k][p]
        return out

    def waste(self) -> float:
        """Unused space of open bins under oldest-open-bin placement.

        Every item committed to pattern m joins the oldest open bin of m
        lacking that size, so the bins opened for m number
        ``max_i ceil(Y_im / M_im)`` of which ``X_m`` are complete.
        """
        inst = self.instance
        if not inst.binpacking:
            raise ValueError("waste is defined for bin-packing instances only")
        B = inst.bin_size
        total = 0
        for k, mem in enumerate(self.members):
            Y = self.Y(k)
            opened = max(-(-y // c) for y, c in zip(Y, self.mult[k]))
            vol = sum(inst.sizes[i] * q for i, q in zip(mem, self.tq[k]))
            total += B * (opened - self.X[k]) - vol
        return float(total)

    # -- policy and transition ---------------------------------------------

    def delta_scaled(self, k: int, p: int) -> int:
        l = self.lens[k]
        if l == 1:
            return 0
        w = self.weights[k]
        vq = self.vq[k]
        nxt = p + 1 if p + 1 < l else 0
        wp = w[p]
        return 2 * wp * (2 * wp * vq[p] - w[p - 1] * vq[p - 1] - w[nxt] * vq[nxt]) + 2 * wp * wp

    def choose(self, i: int) -> tuple[int, int, int]:
        """SS argmin over eligible slots: returns (slot, position, scaled delta).

        Ties go to the slot listed first, i.e. the lowest configuration
        index among basic columns.
        """
        best = None
        bk = bp = -1
        for k, p in self.cands[i]:
            d = self.delta_scaled(k, p)
            if best is None or d < best:
                best, bk, bp = d, k, p
        if best is None:
            raise PolicyError(f"no eligible configuration for resource {i}")
        return bk, bp, best

    def commit(self, i: int, k: int, p: int, delta: Optional[int] = None) -> tuple[bool, bool]:
        """Commit one unit of ``i`` to slot ``k``; returns (virtual, true) match flags."""
        if delta is None:
            delta = self.delta_scaled(k, p)
        vq = self.vq[k]
        tq = self.tq[k]
        mult = self.mult[k]
        vq[p] += 1
        tq[p] += 1
        self.A[i] += 1
        self.t += 1
        self.phi_scaled += delta
        nq = self.onnq_pos[k]
        if nq >= 0:
            fired = p == nq
        else:
            fired = True
            for j in range(self.lens[k]):
                if vq[j] < mult[j]:
                    fired = False
                    break
        if not fired:
            return False, False
        self.vX[k] += 1
        vmin = self.vqmin[k]
        for j in range(self.lens[k]):
            vq[j] -= mult[j]
            if vq[j] < vmin[j]:
                vmin[j] = vq[j]
        mem = self.members[k]
        off = self.offline_pos[k]
        for j in off:
            if self.budget[mem[j]] - self.used[mem[j]] < mult[j]:
                return True, False
        for j in range(self.lens[k]):
            if tq[j] < mult[j] and j not in off:
                return True, False
        self.X[k] += 1
        for j in range(self.lens[k]):
            if j in off:
                self.used[mem[j]] += mult[j]
            else:
                tq[j] -= mult[j]
        return True, True

    def step(self, i: int) -> int:
        """Run the SS policy on arrival ``i``; returns the committed configuration."""
        k, p, d = self.choose(i)
        self.commit(i, k, p, d)
        return self.slots[k]

    def preload(self, k: int, queues: Sequence[int]) -> None:
        """Seed slot ``k`` with queued units (test and drift-experiment helper)."""
        if len(queues) != self.lens[k]:
            raise ValueError("one queue length per member expected")
        for p, q in enumerate(queues):
            add = int(q) - self.vq[k][p]
            self.vq[k][p] += add
            self.tq[k][p] += add
            self.A[self.members[k][p]] += add
        self.phi_scaled = self.phi_recomputed_scaled()

    # -- invariants ---------------------------------------------------------

    def check_invariants(self) -> list[str]:
        bad = []
        inst = self.instance
        for k, mem in enumerate(self.members):
            m = self.slots[k]
            if self.X[k] > self.vX[k]:
                bad.append(f"config {m}: true matches {self.X[k]} exceed virtual {self.vX[k]}")
            has_nq = self.onnq_pos[k] >= 0
            for p, i in enumerate(mem):
                if self.tq[k][p] < self.vq[k][p]:
                    bad.append(f"config {m}: true queue below virtual queue for resource {i}")
                if inst.classes[i].online and self.tq[k][p] < 0:
                    bad.append(f"config {m}: negative true queue for resource {i}")
            if not has_nq:
                if any(q < 0 for q in self.vq[k]):
                    bad.append(f"config {m}: negative virtual queue without a nonqueueable member")
                if not any(q < c for q, c in zip(self.vq[k], self.mult[k])):
                    bad.append(f"config {m}: a full virtual match was left unexecuted")
            else:
                if self.vq[k][self.onnq_pos[k]] != 0:
                    bad.append(f"config {m}: nonqueueable virtual queue is nonzero")
        committed = [0] * inst.n
        for k, mem in enumerate(self.members):
            for p, i in enumerate(mem):
                committed[i] += self.vq[k][p] + self.vX[k] * self.mult[k][p]
        for i in range(inst.n):
            if inst.classes[i].online and committed[i] != self.A[i]:
                bad.append(f"resource {i}: {committed[i]} committed units for {self.A[i]} arrivals")
            if inst.classes[i] is OFF and self.used[i] > self.budget.get(i, 0):
                bad.append(f"offline resource {i}: consumption {self.used[i]} exceeds budget")
        if self.phi_scaled != self.phi_recomputed_scaled():
            bad.append("incremental potential drifted from recomputation")
        return bad


def ss_policy(instance: MatchingInstance, state: SimState, i: int) -> int:
    """Configuration chosen by the SS argmin for arrival ``i``."""
    k, _, _ = state.choose(i)
    return state.slots[k]


def apply_commit(instance: MatchingInstance, state: SimState, i: int, m: int) -> tuple[bool, bool]:
    if m not in state.slots:
        raise PolicyError(f"configuration {m} is not tracked by this state")
    k = state.slot_of(m)
    if i not in state.members[k]:
        raise PolicyError(f"resource {i} is not part of configuration {m}")
    return state.commit(i, k, state.members[k].index(i))


def trace_columns(state: SimState) -> list[str]:
    inst = state.instance
    cols = ["t", "arrival", "committed_config", "true_reward", "virtual_reward", "hindsight_opt", "regret", "phi"]
    pairs = [(i, m) for k, m in enumerate(state.slots) for i in state.members[k]]
    cols += [f"vq_{i}_{m}" for i, m in pairs]
    cols += [f"A_{i}" for i in range(inst.n)]
    cols += [f"X_{m}" for m in state.slots]
    cols += [f"vX_{m}" for m in state.slots]
    cols += [f"tq_{i}_{m}" for i, m in pairs]
    cols += [f"vqmin_{i}_{m}" for i, m in pairs]
    cols += ["in_ball", "waste"]
    return cols


def _row(state: SimState, arrival: int, config: int) -> list:
    nan = float("nan")
    row = [state.t, arrival, config, state.true_reward(), state.virtual_reward(), nan, nan, state.phi()]
    row += [q for qs in state.vq for q in qs]
    row += state.A
    row += state.X
    row += state.vX
    row += [q for qs in state.tq for q in qs]
    row += [q for qs in state.vqmin for q in qs]
    row += [nan, state.waste() if state.instance.binpacking else nan]
    return row


def default_record_every(T: int) -> int:
    return max(1, T // 1000)


def simulate(
    instance: MatchingInstance,
    process: ArrivalProcess,
    solution: SppSolution,
    T: int,
    seed: int,
    record_every: Optional[int] = None,
    policy: Optional[Callable[[MatchingInstance, SimState, int], int]] = None,
    offline_budget: Optional[dict] = None,
    debug: bool = False,
    keep_phi_path: bool = False,
    state: Optional[SimState] = None,
) -> Trace:
    """Run ``T`` arrivals through a commitment policy (SS by default).

    Rows are recorded every ``record_every`` steps and at ``T``.  Invariants
    are checked at every recorded row, or every step with ``debug``.  With
    ``keep_phi_path`` the scaled potential after every step is kept in
    ``trace.extras["phi_path"]`` (divide by ``trace.header["phi_scale"]``).
    """
    if record_every is None:
        record_every = default_record_every(T)
    if offline_budget is None and hasattr(process, "inventory"):
        offline_budget = process.inventory
    if state is None:
        state = SimState.for_solution(instance, solution, offline_budget)
    seq = process.start(T, seed).sequence if T > 0 else np.zeros(0, dtype=np.int64)
    header = {
        "seed": seed,
        "instance": instance.digest(),
        "basis": list(solution.basis),
        "slots": state.slots,
        "sigma": {str(m): list(mem) for m, mem in zip(state.slots, state.members)},
        "policy": "ss" if policy is None else getattr(policy, "__name__", "custom"),
        "horizon": T,
        "record_every": record_every,
        "phi_scale": state.L**2,
    }
    rows = []
    path = np.empty(T + 1, dtype=np.int64) if keep_phi_path else None
    if path is not None:
        path[0] = state.phi_scaled
    step = state.step
    for t in range(T):
        i = int(seq[t])
        if policy is None:
            m = step(i)
        else:
            m = policy(instance, state, i)
            k = state.slot_of(m) if m in state.slots else -1
            if k < 0 or i not in state.members[k]:
                raise PolicyError(f"policy returned configuration {m} without resource {i}")
            p = state.members[k].index(i)
            state.commit(i, k, p)
        if debug:
            problems = state.check_invariants()
            if problems:
                raise AssertionError(f"step {t + 1}: " + "; ".join(problems))
        if path is not None:
            path[t + 1] = state.phi_scaled
        if (t + 1) % record_every == 0 or t + 1 == T:
            if not debug:
                problems = state.check_invariants()
                if problems:
                    raise AssertionError(f"step {t + 1}: " + "; ".join(problems))
            rows.append(_row(state, i, m))
    columns = trace_columns(state)
    trace = Trace(header, columns, np.array(rows, dtype=float).reshape(len(rows), len(columns)))
    if path is not None:
        trace.extras["phi_path"] = path
    trace.extras["state"] = state
    return trace
