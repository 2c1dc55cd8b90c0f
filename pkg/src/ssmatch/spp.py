"""Static planning LP, its dual, and the General Position Gap test.

The LP is ``max r.x  s.t.  M x = lam, x >= 0``.  It is solved with a dense
two-phase revised simplex using Bland's rule, which is plenty for instances
with a few dozen columns and gives a deterministic optimal basis.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .instance import MatchingInstance

logger = logging.getLogger(__name__)

TOL = 1e-9
STRICT_TOL = 1e-7
MAX_PIVOTS = 10_000


class SppError(RuntimeError):
    pass


class InfeasibleError(SppError):
    pass


class UnboundedError(SppError):
    pass


class SingularBasisError(SppError):
    pass


@dataclass(frozen=True, eq=False)
class LpResult:
    status: str
    x: Optional[np.ndarray]
    basis: tuple[int, ...]
    objective: float
    rows: tuple[int, ...] = ()


def _pivot_loop(A, b, c, basis, allowed, tol):
    """Primal simplex from a feasible basis; Bland's rule on entering and leaving."""
    basis = list(basis)
    m = A.shape[0]
    ftol = tol * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    dtol = tol * max(1.0, float(np.max(np.abs(c))) if c.size else 1.0)
    for _ in range(MAX_PIVOTS):
        B = A[:, basis]
        xb = np.linalg.solve(B, b)
        y = np.linalg.solve(B.T, c[basis])
        red = c - y @ A
        red[basis] = 0.0
        entering = next((j for j in allowed if red[j] > dtol), None)
        if entering is None:
            return "optimal", basis, xb
        u = np.linalg.solve(B, A[:, entering])
        rows = [k for k in range(m) if u[k] > tol]
        if not rows:
            return "unbounded", basis, xb
        ratios = [max(xb[k], 0.0) / u[k] for k in rows]
        best = min(ratios)
        ties = [k for k, q in zip(rows, ratios) if q <= best + ftol]
        leave = min(ties, key=lambda k: basis[k])
        basis[leave] = entering
    raise SppError("simplex did not terminate")


def solve_standard_form(M, r, b, tol: float = TOL) -> LpResult:
    """Maximise ``r.x`` subject to ``M x = b``, ``x >= 0``.

    Two-phase simplex.  A constraint row that is a linear combination of the
    others shows up as an artificial variable that cannot leave the basis;
    such rows are dropped and the reduced system is solved instead, so the
    returned basis has one column per kept row (``rows``).
    """
    M = np.asarray(M, dtype=float)
    r = np.asarray(r, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    if np.any(b < -tol * max(1.0, float(np.abs(b).max(initial=0.0)))):
        raise ValueError("right-hand side must be nonnegative")
    b = np.maximum(b, 0.0)
    rows = list(range(M.shape[0]))
    while True:
        res = _two_phase(M[rows], r, b[rows], tol)
        if isinstance(res, LpResult):
            return LpResult(res.status, res.x, res.basis, res.objective, tuple(rows))
        logger.debug("dropping redundant constraint row %d", rows[res])
        del rows[res]


def _two_phase(M, r, b, tol):
    """LpResult, or the index of a redundant row to drop."""
    n, d = M.shape
    if n == 0:
        if np.any(r > tol):
            return LpResult("unbounded", None, (), float("inf"))
        return LpResult("optimal", np.zeros(d), (), 0.0)
    A = np.hstack([M, np.eye(n)])
    c1 = np.concatenate([np.zeros(d), -np.ones(n)])
    _, basis, xb = _pivot_loop(A, b, c1, range(d, d + n), range(d + n), tol)
    art = float(sum(xb[k] for k in range(n) if basis[k] >= d))
    if art > tol * max(1.0, float(b.max(initial=0.0))):
        return LpResult("infeasible", None, (), float("nan"))
    # push zero-level artificials out of the basis with degenerate pivots
    for k in range(n):
        if basis[k] < d:
            continue
        g = np.linalg.solve(A[:, basis].T, np.eye(n)[k])
        for j in range(d):
            if j not in basis and abs(g @ A[:, j]) > 1e-7:
                basis[k] = j
                break
        else:
            return basis[k] - d
    c2 = np.concatenate([r, np.zeros(n)])
    status, basis, xb = _pivot_loop(A, b, c2, basis, range(d), tol)
    if status == "unbounded":
        return LpResult("unbounded", None, tuple(basis), float("inf"))
    x = np.zeros(d)
    for k, j in enumerate(basis):
        x[j] = max(xb[k], 0.0)
    return LpResult("optimal", x, tuple(basis), float(r @ x))


@dataclass(frozen=True, eq=False)
class SppSolution:
    """Optimal basic solution of the static planning LP."""

    x_star: np.ndarray
    basis: tuple[int, ...]
    alpha_star: np.ndarray
    opt_value: float
    lam: np.ndarray
    basis_inv: np.ndarray

    def basic_rates(self, lam_hat) -> np.ndarray:
        """Rates of the basic configurations at ``lam_hat`` under the fixed basis."""
        return self.basis_inv @ np.asarray(lam_hat, dtype=float)

    def basis_optimal_at(self, counts, tol: float = TOL) -> bool:
        """True when the fixed basis stays primal feasible (hence optimal) at ``counts``.

        The reduced costs do not depend on the right-hand side, so primal
        feasibility alone certifies optimality.
        """
        counts = np.asarray(counts, dtype=float)
        scale = max(1.0, float(np.max(np.abs(counts))))
        return bool(np.all(self.basis_inv @ counts >= -tol * scale))


def dual_from_basis(instance: MatchingInstance, basis: Sequence[int]) -> np.ndarray:
    """Dual prices solving ``M_B^T alpha = r_B``."""
    basis = list(basis)
    B = instance.matrix[:, basis].astype(float)
    if B.shape[0] != B.shape[1]:
        raise SingularBasisError(f"basis has {B.shape[1]} columns for {B.shape[0]} resources")
    if np.linalg.matrix_rank(B) < B.shape[0]:
        raise SingularBasisError(f"basis columns {basis} are linearly dependent")
    return np.linalg.solve(B.T, instance.rewards[basis])


def solve_spp(instance: MatchingInstance, lam, tol: float = TOL) -> SppSolution:
    """Solve the static planning LP at rate vector ``lam``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (instance.n,):
        raise ValueError(f"rate vector has shape {lam.shape}, expected ({instance.n},)")
    if np.any(lam < 0):
        raise ValueError("rates must be nonnegative")
    res = solve_standard_form(instance.matrix, instance.rewards, lam, tol)
    if res.status == "infeasible":
        raise InfeasibleError("static planning LP is infeasible for these rates")
    if res.status == "unbounded":
        raise UnboundedError("static planning LP is unbounded")
    if len(res.rows) < instance.n:
        raise SingularBasisError("consumption matrix is rank deficient")
    basis = tuple(sorted(res.basis))
    B = instance.matrix[:, list(basis)].astype(float)
    if np.linalg.cond(B) > 1e12:
        raise SingularBasisError("optimal basis is numerically singular")
    alpha = dual_from_basis(instance, basis)
    return SppSolution(
        x_star=res.x,
        basis=basis,
        alpha_star=alpha,
        opt_value=res.objective,
        lam=lam.copy(),
        basis_inv=np.linalg.inv(B),
    )


@dataclass(frozen=True)
class GpgReport:
    holds: bool
    epsilon_hat: float
    failing_direction: Optional[tuple[int, int]] = None


def _worst_shift(g: np.ndarray, lam: np.ndarray, eps: float) -> tuple[float, int, int]:
    """Smallest value of ``g . d`` over shifts d within TV radius eps of lam.

    Feasible shifts are ``d = p - q`` with ``p, q >= 0``, ``sum p = sum q <= eps``
    and ``q <= lam`` (so ``lam + d`` stays nonnegative).  Mass goes to the
    cheapest coordinate and is taken greedily from the most expensive ones;
    every marginal unit lowers the value, so the full radius is used.
    """
    to = int(np.argmin(g))
    gmin = g[to]
    budget = eps
    value = 0.0
    first_from = None
    for j in sorted(range(len(g)), key=lambda j: (-g[j], j)):
        if budget <= 0 or g[j] <= gmin:
            break
        take = min(budget, lam[j])
        if take <= 0:
            continue
        if first_from is None:
            first_from = j
        value += take * (gmin - g[j])
        budget -= take
    return value, to, (first_from if first_from is not None else to)


def _radius_for_row(g: np.ndarray, lam: np.ndarray, slack: float) -> float:
    """Largest eps with ``slack + worst_shift(g, lam, eps) >= 0``."""
    gmin = float(np.min(g))
    eps = 0.0
    for j in sorted(range(len(g)), key=lambda j: (-g[j], j)):
        rate = g[j] - gmin
        if rate <= 0:
            break
        if lam[j] <= 0:
            continue
        if slack - rate * lam[j] < 0:
            return eps + slack / rate
        slack -= rate * lam[j]
        eps += lam[j]
    return float("inf")


def _forced_zero(instance: MatchingInstance, lam: np.ndarray, m: int) -> bool:
    return all(lam[i] <= 0 for i in instance.members(m))


def _strict(instance, sol, lam):
    for k, m in enumerate(sol.basis):
        if sol.x_star[m] <= STRICT_TOL and not _forced_zero(instance, lam, m):
            return False, m
    return True, None


def gpg_radius(instance: MatchingInstance, lam, solution: Optional[SppSolution] = None) -> float:
    """Exact TV radius up to which the optimal basis stays feasible (0 if degenerate)."""
    lam = np.asarray(lam, dtype=float)
    sol = solution if solution is not None else solve_spp(instance, lam)
    ok, _ = _strict(instance, sol, lam)
    if not ok:
        return 0.0
    xb = sol.basic_rates(lam)
    radius = 1.0
    for k in range(len(sol.basis)):
        radius = min(radius, _radius_for_row(sol.basis_inv[k], lam, max(xb[k], 0.0)))
    return float(radius)


def check_gpg(instance: MatchingInstance, lam, epsilon: float, solution: Optional[SppSolution] = None) -> GpgReport:
    """Test the General Position Gap condition at TV radius ``epsilon``.

    Holds when every basic rate is strictly positive (coordinates forced to
    zero by ``lam`` excepted) and the basis stays primal feasible for every
    distribution in the TV ball intersected with the nonnegative orthant.
    Since the reduced costs do not move with ``lam``, the same alpha* is then
    optimal throughout the ball.  Dual uniqueness follows from strictness:
    complementary slackness makes all n basic dual constraints tight at any
    dual optimum, and the invertible basis pins alpha down.
    """
    lam = np.asarray(lam, dtype=float)
    sol = solution if solution is not None else solve_spp(instance, lam)
    radius = gpg_radius(instance, lam, sol)
    ok, bad = _strict(instance, sol, lam)
    if not ok:
        i = instance.members(bad)[0]
        return GpgReport(False, 0.0, (i, i))
    xb = sol.basic_rates(lam)
    scale = max(1.0, float(np.max(np.abs(lam))))
    for k in range(len(sol.basis)):
        worst, to, frm = _worst_shift(sol.basis_inv[k], lam, epsilon)
        if xb[k] + worst < -TOL * scale:
            return GpgReport(False, radius, (to, frm))
    return GpgReport(True, radius, None)


def estimate_epsilon0(instance: MatchingInstance, lam, solution: Optional[SppSolution] = None, precision: float = 1e-4) -> float:
    """Largest passing GPG radius in [0, 1], by bisection over :func:`check_gpg`."""
    lam = np.asarray(lam, dtype=float)
    sol = solution if solution is not None else solve_spp(instance, lam)
    if not check_gpg(instance, lam, 0.0, sol).holds:
        return 0.0
    if check_gpg(instance, lam, 1.0, sol).holds:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > precision:
        mid = 0.5 * (lo + hi)
        if check_gpg(instance, lam, mid, sol).holds:
            lo = mid
        else:
            hi = mid
    return lo


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def hindsight_opt(instance: MatchingInstance, counts, solution: Optional[SppSolution] = None) -> float:
    """LP value of the planning problem with the rates replaced by ``counts``.

    With ``solution`` given and its basis still feasible at ``counts``, the
    value is ``alpha* . counts`` without re-solving.
    """
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("arrival counts must be nonnegative")
    if not counts.any():
        return 0.0
    if solution is not None and solution.basis_optimal_at(counts):
        return float(solution.alpha_star @ counts)
    return solve_spp(instance, counts).opt_value
