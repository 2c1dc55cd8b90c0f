"""Experiment presets, multi-seed runs, regret summaries and trace diagnostics."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines
from .arrivals import ArrivalProcess, EmulatedOffline, Iid, LocallyPermuted
from .engine import default_record_every, simulate
from .instance import (
    ONNQ,
    ONQ,
    ArrivalRates,
    MatchingInstance,
    binpacking_instance,
    instance_from_dict,
    load_instance,
    require_valid,
)
from .spp import SppSolution, estimate_epsilon0, hindsight_opt, solve_spp, tv_distance
from .trace import Trace

logger = logging.getLogger(__name__)

PRESETS = ("instance1_standin", "instance2_default", "instance2_proofrates", "binpack_eps8", "binpack_eps64")
WORKERS_ENV = "SSMATCH_WORKERS"


# ---------------------------------------------------------------------------
# presets


def lower_bound_instance() -> MatchingInstance:
    """One queueable resource shared by two nonqueueable ones (rewards 5 and 1)."""
    M = np.array([[1, 1, 1, 0, 0], [1, 0, 0, 1, 0], [0, 1, 0, 0, 1]])
    return MatchingInstance(("onq", "onnq", "onnq"), M, [5.0, 1.0, 0.0, 0.0, 0.0])


def binpack_rates(eps: float) -> np.ndarray:
    return np.array([0.75 - eps, 0.25 + eps])


@dataclass
class Preset:
    name: str
    instance: MatchingInstance
    rates: ArrivalRates
    policies: tuple
    note: str = ""


def load_preset(name: str, horizon: Optional[int] = None) -> Preset:
    if name == "instance1_standin":
        path = resources.files("ssmatch") / "data" / "instance1_standin.json"
        inst, rates = load_instance(path)
        T = horizon or rates.horizon
        return Preset(name, inst, ArrivalRates(rates.lam, T), ("ss", "greedy"), "stand-in five-type queueable instance")
    if name in ("instance2_default", "instance2_proofrates"):
        lam = [0.35, 0.30, 0.35] if name == "instance2_default" else [0.36, 0.30, 0.34]
        return Preset(name, lower_bound_instance(), ArrivalRates(lam, horizon or 100_000), ("ss", "dp", "greedy"))
    if name in ("binpack_eps8", "binpack_eps64"):
        eps = 1 / 8 if name == "binpack_eps8" else 1 / 64
        inst = binpacking_instance(9, [2, 3], rejection_reward=-1.0)
        return Preset(name, inst, ArrivalRates(binpack_rates(eps), horizon or 100_000), ("ss", "csirik", "csirik_nodead"), f"eps={eps}")
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    preset: Optional[str] = None
    instance_path: Optional[str] = None
    process: str = "iid"
    gamma: int = 0
    policies: Optional[Sequence[str]] = None
    horizon: int = 100_000
    seeds: Sequence[int] = (0,)
    record_every: Optional[int] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.preset is None and self.instance_path is None:
            raise ValueError("give a preset name or an instance file")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.process not in ("iid", "emulated", "permuted"):
            raise ValueError(f"unknown process kind {self.process!r}")


def resolve(config: ExperimentConfig) -> Preset:
    if config.preset is not None:
        return load_preset(config.preset, config.horizon)
    inst, rates = load_instance(config.instance_path)
    if rates is None:
        raise ValueError(f"{config.instance_path} has no 'lambda' field")
    return Preset(Path(config.instance_path).stem, inst, ArrivalRates(rates.lam, config.horizon), ("ss",))


def build_process(instance: MatchingInstance, rates: ArrivalRates, kind: str = "iid", gamma: int = 0) -> ArrivalProcess:
    if instance.offline or kind == "emulated":
        base = EmulatedOffline.from_rates(instance, rates)
    else:
        base = Iid(rates.lam)
    if kind == "permuted":
        return LocallyPermuted(base, gamma)
    return base


def _instance_header(instance: MatchingInstance, solution: SppSolution, eps0: float) -> dict:
    return {
        "instance_doc": instance.to_dict(),
        "lambda": [float(x) for x in solution.lam],
        "alpha": [float(x) for x in solution.alpha_star],
        "epsilon0": float(eps0),
    }


def attach_regret(trace: Trace, instance: MatchingInstance, solution: SppSolution, eps0: float) -> Trace:
    """Fill hindsight optimum, regret and ball membership at every recorded row."""
    A = np.stack([trace.column(f"A_{i}") for i in range(instance.n)], axis=1)
    t = trace.column("t")
    hopt = np.array([hindsight_opt(instance, a, solution) for a in A])
    trace.set_column("hindsight_opt", hopt)
    trace.set_column("regret", hopt - trace.column("true_reward"))
    inside = [eps0 > 0 and tv_distance(a / tt, solution.lam) <= eps0 for a, tt in zip(A, t)]
    trace.set_column("in_ball", np.array(inside, dtype=float))
    trace.header.update(_instance_header(instance, solution, eps0))
    return trace


@dataclass
class RunContext:
    instance: MatchingInstance
    rates: ArrivalRates
    solution: SppSolution
    eps0: float
    process: ArrivalProcess
    record_every: int
    dp_table: Optional[baselines.DpPolicyTable] = None


def run_policy(ctx: RunContext, policy: str, seed: int) -> Trace:
    inst, T = ctx.instance, ctx.rates.horizon
    if policy == "ss":
        tr = simulate(inst, ctx.process, ctx.solution, T, seed, ctx.record_every)
    elif policy == "greedy":
        tr = baselines.simulate_pool(inst, ctx.process, baselines.naive_greedy_policy, T, seed, ctx.record_every, "greedy")
    elif policy == "dp":
        table = ctx.dp_table or baselines.dp_policy_build(inst, ctx.rates.lam, T)
        tr = baselines.simulate_pool(inst, ctx.process, baselines.dp_policy(table), T, seed, ctx.record_every, "dp")
    elif policy in ("csirik", "csirik_nodead"):
        if not inst.binpacking:
            raise ValueError("level-based packing needs a bin-packing instance")
        tr = baselines.simulate_csirik(inst.bin_size, inst.sizes, ctx.process, T, seed, policy == "csirik_nodead", ctx.record_every)
        tr.header["instance"] = inst.digest()
        tr.header.update(_instance_header(inst, ctx.solution, ctx.eps0))
        return tr
    else:
        raise ValueError(f"unknown policy {policy!r}")
    tr.extras.pop("state", None)
    return attach_regret(tr, inst, ctx.solution, ctx.eps0)


def _run_one(args):
    ctx, policy, seed = args
    tr = run_policy(ctx, policy, seed)
    tr.extras.clear()
    return tr


def make_context(preset: Preset, process_kind: str = "iid", gamma: int = 0, record_every: Optional[int] = None) -> RunContext:
    inst, rates = preset.instance, preset.rates
    require_valid(inst)
    proc = build_process(inst, rates, process_kind, gamma)
    lam = proc.rates_at(1) if isinstance(proc, EmulatedOffline) else rates.lam
    sol = solve_spp(inst, lam)
    eps0 = estimate_epsilon0(inst, lam, sol)
    return RunContext(inst, rates, sol, eps0, proc, record_every or default_record_every(rates.horizon))


@dataclass
class ExperimentResult:
    traces: dict = field(default_factory=dict)
    summaries: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def summarize(traces: Sequence[Trace], seeds: Sequence[int]) -> Trace:
    """Per-t mean and std of regret (and waste where present) across seeds."""
    t = traces[0].column("t")
    cols = ["t", "mean_regret", "std_regret", "mean_waste", "std_waste"]
    R = np.stack([tr.column("regret") if tr.has("regret") else np.full(len(t), np.nan) for tr in traces], axis=1)
    W = np.stack([tr.column("waste") for tr in traces], axis=1)
    data = [t, R.mean(axis=1), R.std(axis=1), W.mean(axis=1), W.std(axis=1)]
    for k, s in enumerate(seeds):
        cols.append(f"regret_seed{s}")
        data.append(R[:, k])
    for k, s in enumerate(seeds):
        cols.append(f"waste_seed{s}")
        data.append(W[:, k])
    header = {k: traces[0].header[k] for k in ("policy", "horizon", "record_every") if k in traces[0].header}
    header["seeds"] = list(seeds)
    return Trace(header, cols, np.stack(data, axis=1))


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        logger.warning("ignoring non-integer %s", WORKERS_ENV)
        return 1


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Simulate every (policy, seed) pair, attach regret and aggregate."""
    preset = resolve(config)
    ctx = make_context(preset, config.process, config.gamma, config.record_every)
    policies = tuple(config.policies or preset.policies)
    if "dp" in policies:
        ctx.dp_table = baselines.dp_policy_build(ctx.instance, ctx.rates.lam, ctx.rates.horizon)
    jobs = [(ctx, p, s) for p in policies for s in config.seeds]
    nw = workers()
    if nw > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(nw) as ex:
            traces = list(ex.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    res = ExperimentResult()
    for (_, p, s), tr in zip(jobs, traces):
        res.traces[(p, s)] = tr
    for p in policies:
        res.summaries[p] = summarize([res.traces[(p, s)] for s in config.seeds], list(config.seeds))
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (p, s), tr in res.traces.items():
            path = out / f"trace_{p}_seed{s}.csv"
            tr.to_csv(path)
            res.files.append(path)
        for p, sm in res.summaries.items():
            path = out / f"summary_{p}.csv"
            sm.to_csv(path)
            res.files.append(path)
    return res


# ---------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class GrowthFit:
    slope_vs_logt: float
    intercept_logt: float
    r_squared: float
    slope_vs_t: float
    intercept_t: float
    r_squared_t: float


def _ols(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def regret_growth_fit(summary, y=None) -> GrowthFit:
    """Least-squares fits of mean regret against log t and against t.

    ``summary`` is a summary :class:`Trace`, or an array of t values with the
    regret series passed as ``y``.
    """
    if isinstance(summary, Trace):
        t, y = summary.column("t"), summary.column("mean_regret")
    else:
        t = np.asarray(summary, dtype=float)
        y = np.asarray(y, dtype=float)
    ok = np.isfinite(y) & (t > 0)
    t, y = t[ok], y[ok]
    if len(t) < 10:
        raise ValueError(f"need at least 10 recorded points, got {len(t)}")
    a, b, r2 = _ols(np.log(t), y)
    c, d, r2t = _ols(t, y)
    return GrowthFit(a, b, r2, c, d, r2t)


@dataclass
class DiagnosticsReport:
    results: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.results.append((name, bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(p for _, p, _ in self.results)

    def get(self, name: str) -> bool:
        return next(p for n, p, _ in self.results if n == name)

    def lines(self) -> list:
        out = [f"{'PASS' if p else 'FAIL'} {n}" + (f": {d}" if d else "") for n, p, d in self.results]
        return out + [f"note: {x}" for x in self.notes]


def _pairs(trace: Trace) -> list:
    out = []
    for c in trace.matching("vq_"):
        _, i, m = c.split("_")
        out.append((int(i), int(m)))
    return out


def diagnostics(trace: Trace, solution: Optional[SppSolution] = None, instance: Optional[MatchingInstance] = None, tol: float = 1e-6) -> DiagnosticsReport:
    """Evaluate the engine's sample-path properties on a stored SS trace.

    Everything needed comes from the trace columns and header, so re-running
    on a trace read back from CSV gives the same report.
    """
    rep = DiagnosticsReport()
    if instance is None:
        instance, _ = instance_from_dict(trace.header["instance_doc"])
    alpha = np.asarray(solution.alpha_star if solution is not None else trace.header["alpha"], dtype=float)
    if not trace.matching("vq_"):
        rep.notes.append("trace carries no virtual queues; only pool-level checks apply")
        return rep
    pairs = _pairs(trace)
    slots = sorted({m for _, m in pairs}, key=lambda m: trace.columns.index(f"vX_{m}"))
    X = {m: trace.column(f"X_{m}") for m in slots}
    vX = {m: trace.column(f"vX_{m}") for m in slots}

    rep.add("true_matches_below_virtual", all(np.all(X[m] <= vX[m]) for m in slots))

    online = [(i, m) for i, m in pairs if instance.classes[i].online]
    rep.add("true_queues_nonnegative", all(np.all(trace.column(f"tq_{i}_{m}") >= 0) for i, m in online))

    if all(c is ONQ for c in instance.classes):
        rep.add("queueable_virtual_equals_true", all(np.array_equal(X[m], vX[m]) for m in slots))

    # virtual/true gap bound
    ok = True
    worst = 0.0
    for m in slots:
        mem = [i for i, mm in pairs if mm == m]
        bound = np.full(len(trace), float(len(mem)))
        has_q = any(instance.classes[i] is ONQ for i in mem)
        has_nq = any(instance.classes[i] is ONNQ for i in mem)
        if has_q and has_nq:
            ex = np.stack([-trace.column(f"vqmin_{i}_{m}") for i in mem if instance.classes[i] is ONQ], axis=1)
            bound += np.maximum(ex, 0).max(axis=1)
        for i in mem:
            if not instance.classes[i].online:
                for i2, m2 in pairs:
                    if i2 == i:
                        bound += np.maximum(-trace.column(f"vq_{i2}_{m2}"), 0)
        gap = vX[m] - X[m]
        worst = max(worst, float((gap - bound).max()) if len(gap) else 0.0)
        ok &= bool(np.all(gap <= bound))
    rep.add("virtual_true_gap_bound", ok, f"max excess {worst:g}")

    # bounded variation of sqrt(phi) between recorded rows
    t = trace.column("t")
    root = np.sqrt(np.concatenate([[0.0], trace.column("phi")]))
    dt = np.diff(np.concatenate([[0.0], t]))
    jump = np.abs(np.diff(root))
    rep.add("bounded_variation", bool(np.all(jump <= math.sqrt(2) * dt + 1e-12)), f"max jump per step {float((jump / dt).max()) if len(dt) else 0:g}")

    # queue identity inside the certified ball
    inside = trace.column("in_ball") > 0.5
    hopt = trace.column("hindsight_opt")
    vrew = trace.column("virtual_reward")
    tot = np.zeros((len(trace), instance.n))
    basis = set(trace.header.get("basis", slots))
    for i, m in pairs:
        if m in basis:
            tot[:, i] += trace.column(f"vq_{i}_{m}")
    resid = np.abs(hopt - vrew - tot @ alpha)
    skipped = int((~inside).sum())
    if skipped:
        rep.notes.append(f"queue identity skipped at {skipped} rows outside the certified ball")
        logger.info("queue identity skipped at %d rows outside the certified ball", skipped)
    rep.add("queue_identity", bool(np.all(resid[inside] <= tol)), f"max residual {float(resid[inside].max()) if inside.any() else 0:g}")

    if not instance.no_discard and all(instance.rewards[m] == 0 for m in instance.discard_index.values()):
        reg = trace.column("regret")
        rep.add("regret_nonnegative_in_ball", bool(np.all(reg[inside] >= -tol)))
    return rep
