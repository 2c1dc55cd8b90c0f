"""Acceptance criteria, one test each.

Every test records a ``CRITERION k: PASS|FAIL`` line, printed in the
terminal summary, before asserting.
"""
from __future__ import annotations

import logging
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import linprog

from ssmatch.arrivals import EmulatedOffline, Iid, discrepancy_bounds_check, make_rng
from ssmatch.baselines import dp_policy_build
from ssmatch.engine import SimState, simulate
from ssmatch.harness import ExperimentConfig, load_preset, make_context, regret_growth_fit, run_experiment, run_policy
from ssmatch.instance import MatchingInstance, binpacking_instance
from ssmatch.spp import estimate_epsilon0, solve_spp

from oracles import brute_force_lp, expectimax


def record(log, k, name, passed, detail):
    line = f"CRITERION {k}: {'PASS' if passed else 'FAIL'} {name} ({detail})"
    print(line)
    log.append(line)


def at_t(trace, col, t):
    rows = np.flatnonzero(trace.column("t") == t)
    assert rows.size == 1, f"t={t} not recorded"
    return trace.column(col)[rows[0]]


# -- 1 ----------------------------------------------------------------------------


def lp_instances(count):
    """Seeded full-rank, feasible, bounded LPs with n <= 4, d <= 8."""
    out = []
    seed = 0
    while len(out) < count:
        rng = np.random.default_rng(seed)
        seed += 1
        n = int(rng.integers(1, 5))
        d = int(rng.integers(n, 9))
        M = rng.integers(0, 4, size=(n, d))
        r = rng.integers(-3, 6, size=d).astype(float)
        b = (M @ rng.integers(0, 4, size=d)).astype(float)
        if np.linalg.matrix_rank(M) < n or not b.any():
            continue
        if linprog(-r, A_eq=M, b_eq=b, bounds=(0, None), method="highs").status != 0:
            continue
        out.append((M, r, b))
    return out


def test_c1_lp_oracle(acceptance_log):
    cases = lp_instances(200)
    start = time.perf_counter()
    worst = 0.0
    for M, r, b in cases:
        inst = MatchingInstance(("onq",) * M.shape[0], M, r)
        sol = solve_spp(inst, b)
        worst = max(worst, abs(sol.opt_value - brute_force_lp(M, r, b)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 5
    record(acceptance_log, 1, "LP oracle equivalence", ok, f"200 instances, max gap {worst:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_c2_bin_packing_duals(acceptance_log):
    start = time.perf_counter()
    # size 7 fits no full pattern, so rejection singletons keep the LP feasible
    inst = binpacking_instance(10, [2, 6, 7], rejection_reward=-1.0)
    alpha = solve_spp(inst, [0.2, 0.4, 0.4]).alpha_star
    elapsed = time.perf_counter() - start
    ok = np.array_equal(alpha, [0.0, -1.0, -1.0]) and elapsed < 1
    record(acceptance_log, 2, "bin-packing dual values", ok, f"alpha={np.round(alpha, 12).tolist()}, {elapsed:.3f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------------


def test_c3_instance2_fluid(acceptance_log, inst2):
    x = solve_spp(inst2, load_preset("instance2_default").rates.lam).x_star
    err = float(np.abs(x[:2] - [0.30, 0.05]).max())
    ok = err <= 1e-9
    record(acceptance_log, 3, "instance 2 fluid solution", ok, f"x*=({x[0]:.12g}, {x[1]:.12g})")
    assert ok


# -- 4 ----------------------------------------------------------------------------


def test_c4_discrepancy(acceptance_log):
    start = time.perf_counter()
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n_off = 1 + seed % 3
        n_on = int(rng.integers(1, 4))
        inv = {i: int(rng.integers(0, 3000)) for i in range(n_off)}
        probs = np.concatenate([np.zeros(n_off), rng.dirichlet(np.ones(n_on))])
        steps = int(rng.integers(1, 10_001 - sum(inv.values())))
        proc = EmulatedOffline(inv, probs, steps)
        seq = proc.sample(proc.T, make_rng(seed))
        rep = discrepancy_bounds_check(proc, seq)
        exact = all(int((seq == i).sum()) == c for i, c in inv.items())
        bad += (not rep.ok) + (not exact)
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 10
    record(acceptance_log, 4, "emulated offline discrepancy", ok, f"100 runs, {bad} violations, {elapsed:.2f}s")
    assert ok


# -- 5 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_c5_queue_identity(acceptance_log):
    worst, rows, skipped = 0.0, 0, 0
    for name in ("instance2_default", "binpack_eps8"):
        ctx = make_context(load_preset(name, 10_000))
        for seed in range(20):
            tr = run_policy(ctx, "ss", seed)
            inside = tr.column("in_ball") > 0.5
            tot = np.zeros((len(tr), ctx.instance.n))
            for c in tr.matching("vq_"):
                _, i, m = c.split("_")
                if int(m) in ctx.solution.basis:
                    tot[:, int(i)] += tr.column(c)
            resid = np.abs(tr.column("hindsight_opt") - tr.column("virtual_reward") - tot @ ctx.solution.alpha_star)
            if inside.any():
                worst = max(worst, float(resid[inside].max()))
            rows += int(inside.sum())
            skipped += int((~inside).sum())
    ok = worst <= 1e-6 and rows > 0
    record(acceptance_log, 5, "queue identity in the certified ball", ok, f"{rows} rows checked, {skipped} outside ball, max residual {worst:.2e}")
    assert ok


# -- 6 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_bounded_regret(acceptance_log):
    start = time.perf_counter()
    T = 100_000
    res = run_experiment(ExperimentConfig(preset="instance1_standin", horizon=T, seeds=range(20), policies=["ss"]))
    sm = res.summaries["ss"]
    end, half = at_t(sm, "mean_regret", T), at_t(sm, "mean_regret", T // 2)
    fit = regret_growth_fit(sm)
    elapsed = time.perf_counter() - start
    ok = end <= 1.25 * half and fit.slope_vs_t <= 1e-4 and elapsed < 120
    record(
        acceptance_log, 6, "bounded regret, queueable stand-in", ok,
        f"regret(T)={end:.3f}, regret(T/2)={half:.3f}, ratio {end / half:.3f}, slope_vs_t {fit.slope_vs_t:.2e}, {elapsed:.1f}s",
    )
    assert ok


# -- 7 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_c7_logarithmic_regret(acceptance_log):
    start = time.perf_counter()
    T = 100_000
    res = run_experiment(ExperimentConfig(preset="instance2_default", horizon=T, seeds=range(50), policies=["ss"]))
    sm = res.summaries["ss"]
    fit = regret_growth_fit(sm)
    ratio = at_t(sm, "mean_regret", T) / at_t(sm, "mean_regret", 1000)
    elapsed = time.perf_counter() - start
    checks = {
        "r2>=0.8": fit.r_squared >= 0.8,
        "slope>0": fit.slope_vs_logt > 0,
        "slope_vs_t<=1e-4": fit.slope_vs_t <= 1e-4,
        "ratio in [1.2,2.5]": 1.2 <= ratio <= 2.5,
        "time<300s": elapsed < 300,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(
        acceptance_log, 7, "logarithmic regret, mixed instance", ok,
        f"r2 {fit.r_squared:.3f}, slope_vs_logt {fit.slope_vs_logt:.2f}, slope_vs_t {fit.slope_vs_t:.2e}, "
        f"ratio {ratio:.2f}, {elapsed:.1f}s" + (f"; failing: {', '.join(failed)}" if failed else ""),
    )
    assert ok, failed


# -- 8 ----------------------------------------------------------------------------


@pytest.mark.slow
def test_c8_waste_separation(acceptance_log):
    start = time.perf_counter()
    T = 100_000
    res = run_experiment(ExperimentConfig(preset="binpack_eps64", horizon=T, seeds=range(20)))
    w = {p: (at_t(sm, "mean_waste", T // 10), at_t(sm, "mean_waste", T)) for p, sm in res.summaries.items()}
    elapsed = time.perf_counter() - start
    ok = (
        w["csirik"][1] - w["csirik"][0] >= 3
        and w["ss"][1] <= 1.5 * w["ss"][0]
        and w["csirik_nodead"][1] <= 1.5 * w["csirik_nodead"][0]
        and elapsed < 180
    )
    detail = ", ".join(f"{p} {a:.2f}->{b:.2f}" for p, (a, b) in w.items())
    record(acceptance_log, 8, "bin-packing waste separation", ok, f"waste(T/10)->waste(T): {detail}, {elapsed:.1f}s")
    assert ok


# -- 9 and 10 -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def long_queueable_run():
    p = load_preset("instance1_standin")
    sol = solve_spp(p.instance, p.rates.lam)
    tr = simulate(p.instance, Iid(p.rates.lam), sol, 1_000_000, 0, keep_phi_path=True)
    root = np.sqrt(tr.extras["phi_path"] / tr.header["phi_scale"])
    return p, sol, root


@pytest.mark.slow
def test_c9_bounded_variation(acceptance_log, long_queueable_run):
    _, _, root = long_queueable_run
    jumps = np.abs(np.diff(root))
    bad = int((jumps > math.sqrt(2) + 1e-12).sum())
    record(acceptance_log, 9, "bounded variation of sqrt potential", bad == 0, f"{jumps.size} steps, {bad} violations, max {jumps.max():.6f}")
    assert bad == 0


def one_sided_upper(x):
    return float(x.mean() + 2.326 * x.std(ddof=1) / math.sqrt(x.size))


@pytest.mark.slow
def test_c10_negative_drift(acceptance_log, long_queueable_run):
    p, sol, root = long_queueable_run
    eps0 = estimate_epsilon0(p.instance, p.rates.lam, sol)
    thr = 4 * p.instance.n**2 / eps0
    inc = np.diff(root)
    events = inc[root[:-1] >= thr]
    if events.size >= 10_000:
        upper = one_sided_upper(events)
        ok = upper < 0
        detail = f"{events.size} events, upper 99% bound {upper:.3e}"
    else:
        ok = True
        note = f"vacuous: {events.size} events with sqrt(phi) >= {thr:.1f} (max {root.max():.1f})"
        logging.getLogger(__name__).info(note)
        detail = note
    # a started-high run makes the drift statement non-vacuous
    state = SimState.for_solution(p.instance, sol)
    state.preload(state.slot_of(0), [3000, 0, 0])
    tr = simulate(p.instance, Iid(p.rates.lam), sol, 50_000, 1, keep_phi_path=True, state=state)
    r2 = np.sqrt(tr.extras["phi_path"] / tr.header["phi_scale"])
    ev2 = np.diff(r2)[r2[:-1] >= thr]
    up2 = one_sided_upper(ev2)
    ok2 = ev2.size >= 10_000 and up2 < 0
    ok = ok and ok2
    record(acceptance_log, 10, "negative drift of sqrt potential", ok, f"{detail}; preloaded start: {ev2.size} events, mean {ev2.mean():.3e}, upper 99% bound {up2:.3e}")
    assert ok


# -- 11 ----------------------------------------------------------------------------


def test_c11_dp_oracle(acceptance_log, inst2):
    lam = [Fraction(7, 20), Fraction(3, 10), Fraction(7, 20)]
    cells = mismatches = 0
    for T in range(9):
        for cap in range(9):
            table = dp_policy_build(inst2, lam, T, q_cap=cap, exact=True)
            for t in range(T + 1):
                for q in range(cap + 1):
                    cells += 1
                    mismatches += table.value(t, q) != expectimax(lam, (5, 1), T - t, q, cap)
    ok = mismatches == 0
    record(acceptance_log, 11, "DP equals exhaustive enumeration", ok, f"{cells} cells, {mismatches} mismatches")
    assert ok


# -- 12 ----------------------------------------------------------------------------


def test_c12_determinism(acceptance_log, tmp_path):
    files = {}
    for k in range(2):
        out = tmp_path / f"run{k}"
        for preset in ("instance2_default", "binpack_eps8", "instance1_standin"):
            run_experiment(ExperimentConfig(preset=preset, horizon=5000, seeds=[0, 7], out_dir=str(out / preset)))
        files[k] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))}
    ok = files[0] == files[1] and len(files[0]) > 0
    record(acceptance_log, 12, "byte-identical traces", ok, f"{len(files[0])} files compared")
    assert ok
