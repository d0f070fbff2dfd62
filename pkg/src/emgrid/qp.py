"""Convex quadratic programming on the canonical form

    minimize   0.5 x'Px + q'x (+ const)
    subject to A x = b,   lb <= x <= ub,

solved by an over-relaxed operator-splitting iteration with diagonal
(Ruiz-style) equilibration, adaptive penalty rebalancing and an
active-set polish step that pushes KKT residuals to solver precision.
No external QP solver is used; the hot loop lives in a compiled kernel
with a pure-Python fallback (see emgrid._qp_backend).

A single convex quadratic cap constraint

    0.5 x'Cx + c'x + const <= level

is handled by a safeguarded secant/bisection search on its scalar
multiplier mu >= 0, which keeps every inner problem in the canonical
form above. QpSolver instances hold a reusable workspace (scaling,
factorizations, warm starts) for one problem structure; the consensus
loop re-solves the same structure with fresh linear data every round.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, lu_factor, lu_solve

from . import _qp_backend
from .errors import CapUnattainableError, InvalidInputError

_PSD_PROBES = 8
_PSD_TOL = 1e-8
_SIGMA = 1e-6
_ALPHA = 1.6
_CHECK_INTERVAL = 25
_RHO_CHECK_FROM = 200
_INFEAS_TOL = 1e-7
_MAX_RHO_UPDATES = 10
_FACTOR_CACHE = 24


def _dense(M) -> np.ndarray:
    if hasattr(M, "toarray"):
        M = M.toarray()
    return np.ascontiguousarray(np.asarray(M, dtype=float))


def _check_convex(P: np.ndarray, what: str):
    n = P.shape[0]
    if P.shape != (n, n):
        raise InvalidInputError(f"{what} matrix must be square")
    scale = max(1.0, np.max(np.abs(P)) if P.size else 0.0)
    if P.size and np.max(np.abs(P - P.T)) > 1e-9 * scale:
        raise InvalidInputError(f"{what} matrix must be symmetric")
    rng = np.random.default_rng(0)
    for _ in range(_PSD_PROBES):
        v = rng.standard_normal(n)
        if v @ P @ v < -_PSD_TOL * scale * (v @ v):
            raise InvalidInputError(f"{what} matrix failed a convexity probe")


@dataclass(frozen=True)
class QuadProgram:
    """Problem data in the canonical equality-plus-box form."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        P = _dense(self.P)
        P = 0.5 * (P + P.T)
        q = np.asarray(self.q, dtype=float)
        A = _dense(self.A) if np.size(self.A) else np.zeros((0, q.size))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        n = q.size
        if A.ndim != 2 or A.shape[1] != n or b.size != A.shape[0]:
            raise InvalidInputError("equality constraint dimensions are inconsistent")
        if lb.shape != (n,) or ub.shape != (n,):
            raise InvalidInputError("box bound dimensions are inconsistent")
        if np.any(lb > ub):
            raise InvalidInputError("box bounds must satisfy lb <= ub")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(q))):
            raise InvalidInputError("q and b must be finite")
        _check_convex(P, "cost")
        for name, val in (("P", P), ("q", q), ("A", A), ("b", b),
                          ("lb", lb), ("ub", ub)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)


@dataclass(frozen=True)
class QuadCap:
    """Convex quadratic upper-bound constraint value(x) <= level."""

    P: np.ndarray
    q: np.ndarray
    const: float
    level: float

    def __post_init__(self):
        P = _dense(self.P)
        P = 0.5 * (P + P.T)
        q = np.asarray(self.q, dtype=float)
        if q.shape != (P.shape[0],):
            raise InvalidInputError("cap dimensions are inconsistent")
        _check_convex(P, "cap")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)


@dataclass
class SolveStatus:
    status: str                 # optimal | infeasible | max-iterations
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False


def kkt_residuals(P, q, A, b, lb, ub, x, yeq, ybox) -> tuple[float, float]:
    """(primal, dual) KKT residuals of a candidate primal/dual pair.

    Primal folds in equality and box violation; dual folds in
    stationarity and box complementarity.
    """
    r_eq = np.max(np.abs(A @ x - b)) if b.size else 0.0
    r_box = max(np.max(np.maximum(lb - x, 0.0), initial=0.0),
                np.max(np.maximum(x - ub, 0.0), initial=0.0))
    stat = P @ x + q + ybox
    if b.size:
        stat = stat + A.T @ yeq
    r_stat = np.max(np.abs(stat), initial=0.0)
    # complementarity defect |y| * distance-to-active-bound; where the
    # relevant bound is infinite the dual itself must vanish, so the
    # defect is |y| (a unit distance), not |y| * inf
    up = ybox > 0.0
    dn = ybox < 0.0
    comp = 0.0
    if np.any(up):
        dist = np.where(np.isfinite(ub[up]), ub[up] - x[up], 1.0)
        comp = max(comp, np.max(np.abs(ybox[up] * dist)))
    if np.any(dn):
        dist = np.where(np.isfinite(lb[dn]), x[dn] - lb[dn], 1.0)
        comp = max(comp, np.max(np.abs(ybox[dn] * dist)))
    return max(r_eq, r_box), max(r_stat, comp)


def _interval_infeasible(A, b, lb, ub) -> bool:
    """Sufficient infeasibility test: equality rows versus box intervals."""
    if not b.size:
        return False
    with np.errstate(invalid="ignore"):  # 0 * inf rows are masked below
        lo_t = np.where(A > 0, A * lb[None, :], A * ub[None, :])
        hi_t = np.where(A > 0, A * ub[None, :], A * lb[None, :])
    lo_t = np.where(A == 0, 0.0, lo_t)
    hi_t = np.where(A == 0, 0.0, hi_t)
    lo = lo_t.sum(axis=1)
    hi = hi_t.sum(axis=1)
    slack = 1e-9 * np.maximum(1.0, np.abs(b))
    return bool(np.any(b < lo - slack) or np.any(b > hi + slack))


def _ruiz_scale(P, A, iters=10):
    n = P.shape[0]
    meq = A.shape[0]
    d = np.ones(n)
    e = np.ones(meq)
    Ps = P.copy()
    As = A.copy()
    for _ in range(iters):
        cn = np.max(np.abs(Ps), axis=0, initial=0.0)
        if meq:
            cn = np.maximum(cn, np.max(np.abs(As), axis=0, initial=0.0))
        cn[cn == 0.0] = 1.0
        dd = 1.0 / np.sqrt(cn)
        Ps = (dd[:, None] * Ps) * dd[None, :]
        d *= dd
        if meq:
            rn = np.max(np.abs(As * dd[None, :]), axis=1)
            rn[rn == 0.0] = 1.0
            ee = 1.0 / np.sqrt(rn)
            As = (ee[:, None] * As) * dd[None, :]
            e *= ee
        if np.max(np.abs(1.0 - dd), initial=0.0) < 1e-3:
            break
    return Ps, As, d, e


class QpSolver:
    """Workspace-holding solver; one instance per worker, warm-startable.

    setup() fixes the problem structure (P, A, optional cap quadratic);
    solve() accepts fresh vectors for that structure. Scaling and
    factorizations are reused across calls, and the last solution warm
    starts the next one.
    """

    def __init__(self, backend: str | None = None):
        self._kernel = _qp_backend.get_kernel(backend)
        self.backend = self._kernel.KERNEL_NAME
        self._s = None

    def setup(self, P, A, cap_P=None):
        """Fix the problem structure. `cap_P` may be one PSD matrix or a
        list of them; solve() then accepts matching multiplier(s)."""
        P = _dense(P)
        A = _dense(A) if np.size(A) else np.zeros((0, P.shape[0]))
        Ps, As, d, e = _ruiz_scale(P, A)
        s = {
            "P": P, "A": A, "Ps": Ps, "As": As, "d": d, "e": e,
            "AtA": As.T @ As if A.shape[0] else None,
            "factors": OrderedDict(), "rho": (100.0, 0.1), "warm": None,
        }
        if cap_P is None:
            caps = []
        elif isinstance(cap_P, (list, tuple)):
            caps = [_dense(c) for c in cap_P]
        else:
            caps = [_dense(cap_P)]
        s["capP"] = caps
        s["capPs"] = [(d[:, None] * c) * d[None, :] for c in caps]
        self._s = s
        return self

    def _effective(self, mu):
        """(P_eff, Ps_eff) for a multiplier tuple over the cap quadratics."""
        s = self._s
        P, Ps = s["P"], s["Ps"]
        for m, cP, cPs in zip(mu, s["capP"], s["capPs"]):
            if m != 0.0:
                P = P + m * cP
                Ps = Ps + m * cPs
        return P, Ps

    def clear_warm(self):
        if self._s is not None:
            self._s["warm"] = None

    def _factor(self, Ps_eff, mu, rho_eq, rho_box):
        s = self._s
        key = (mu, rho_eq, rho_box)
        entry = s["factors"].get(key)
        if entry is None:
            n = Ps_eff.shape[0]
            M = Ps_eff + (_SIGMA + rho_box) * np.eye(n)
            if s["AtA"] is not None:
                M = M + rho_eq * s["AtA"]
            entry = np.ascontiguousarray(cholesky(M, lower=True,
                                                  check_finite=False))
            while len(s["factors"]) >= _FACTOR_CACHE:
                s["factors"].popitem(last=False)
            s["factors"][key] = entry
        else:
            s["factors"].move_to_end(key)
        return entry

    def solve(self, q, b, lb, ub, tol=1e-8, max_iter=50_000, warm=True,
              mu=()) -> tuple[np.ndarray, SolveStatus]:
        """Solve with the stored structure; `mu` weighs the registered cap
        quadratics into the cost (the linear part of the caps must already
        be folded into q by the caller)."""
        if self._s is None:
            raise InvalidInputError("setup() must be called before solve()")
        s = self._s
        if np.isscalar(mu):
            mu = (float(mu),)
        else:
            mu = tuple(float(m) for m in mu)
        A = s["A"]
        P, Ps = self._effective(mu)
        q = np.asarray(q, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
        n = q.size
        meq = b.size

        if _interval_infeasible(A, b, lb, ub):
            return np.clip(np.zeros(n), lb, ub), SolveStatus(
                "infeasible", 0, np.inf, np.inf)

        d, e = s["d"], s["e"]
        qs = d * q
        bs = e * b
        lbs = lb / d
        ubs = ub / d

        if warm and s["warm"] is not None and s["warm"][0].size == n:
            x0, yeq0, ybox0 = s["warm"]
            xs = x0 / d
            yeqs = (yeq0 / e) if meq else np.zeros(0)
            yboxs = ybox0 * d
        else:
            xs = np.zeros(n)
            yeqs = np.zeros(meq)
            yboxs = np.zeros(n)
        zboxs = np.clip(xs, lbs, ubs)

        rho_eq, rho_box = s["rho"]
        eps_kernel = max(tol, 1e-6)
        total_it = 0
        rho_updates = 0
        best = None

        while total_it < max_iter:
            L = self._factor(Ps, mu, rho_eq, rho_box)
            rho_from = _RHO_CHECK_FROM if rho_updates < _MAX_RHO_UPDATES \
                else max_iter + 1
            flag, it, rp, rd, ratio = self._kernel.run(
                L, Ps, qs, s["As"], bs, lbs, ubs,
                xs, zboxs, yeqs, yboxs,
                _SIGMA, rho_eq, rho_box, _ALPHA,
                eps_kernel, max_iter - total_it, _CHECK_INTERVAL,
                rho_from, _INFEAS_TOL)
            total_it += it

            if flag == 3:
                s["rho"] = (100.0, 0.1)  # drop the diverged penalty state
                return np.clip(d * xs, lb, ub), SolveStatus(
                    "infeasible", total_it, rp, rd)
            if flag == 2:
                # rescale both penalties together, keeping the fixed
                # equality/box weighting ratio
                scale = min(max(ratio, 0.1), 10.0)
                rho_box = min(max(rho_box * scale, 1e-6), 1e3)
                rho_eq = min(rho_box * 1e3, 1e6)
                rho_updates += 1
                continue

            # candidate straight from the splitting iterate; polish only
            # when it does not already meet the tolerance
            x_c = np.clip(d * xs, lb, ub)
            yeq_c = e * yeqs if meq else np.zeros(0)
            ybox_c = yboxs / d
            res = kkt_residuals(P, q, A, b, lb, ub, x_c, yeq_c, ybox_c)
            if best is None or max(res) < max(best[3]):
                best = (x_c, yeq_c, ybox_c, res, False)

            if max(res) > tol:
                pol = self._polish(mu, q, b, lb, ub, x_c, ybox_c)
                if pol is not None:
                    x_p, yeq_p, ybox_p = pol
                    res_p = kkt_residuals(P, q, A, b, lb, ub, x_p, yeq_p,
                                          ybox_p)
                    if max(res_p) < max(best[3]):
                        best = (x_p, yeq_p, ybox_p, res_p, True)

            bx, byeq, bybox, bres, bpol = best
            if bres[0] <= tol and bres[1] <= tol:
                s["rho"] = (rho_eq, rho_box)
                s["warm"] = (bx.copy(), byeq.copy(), bybox.copy())
                return bx, SolveStatus("optimal", total_it, bres[0], bres[1],
                                       polished=bpol)
            if flag == 1 and total_it >= max_iter:
                break
            if eps_kernel <= 1e-13:
                break  # tolerance unreachable in double precision
            eps_kernel = max(eps_kernel * 0.01, 1e-13)

        s["rho"] = (100.0, 0.1)  # do not carry a stalled penalty state
        if best is None:
            best = (np.clip(d * xs, lb, ub),
                    e * yeqs if meq else np.zeros(0),
                    yboxs / d, (np.inf, np.inf), False)
        bx, byeq, bybox, bres, bpol = best
        return bx, SolveStatus("max-iterations", total_it, bres[0], bres[1],
                               polished=bpol)

    def _pol_factor(self, mu):
        """Cholesky of P_eff + reg*I, cached per multiplier tuple."""
        s = self._s
        entry = s["pol_factors"].get(mu)
        if entry is None:
            P, _ = self._effective(mu)
            n = P.shape[0]
            entry = cholesky(P + _POLISH_REG * np.eye(n), lower=True,
                             check_finite=False)
            if len(s["pol_factors"]) >= _FACTOR_CACHE:
                s["pol_factors"].clear()
            s["pol_factors"][mu] = entry
        return entry

    def _polish(self, mu, q, b, lb, ub, x, ybox):
        """Active-set refinement via a Schur complement on the active
        rows; returns None when the attempt fails."""
        P, _ = self._effective(mu)
        A = self._s["A"]
        lb0 = np.where(np.isfinite(lb), lb, 0.0)
        ub0 = np.where(np.isfinite(ub), ub, 0.0)
        low = ((ybox < -1e-12) | (x <= lb0 + 1e-8 * np.maximum(1.0, np.abs(lb0)))) \
            & np.isfinite(lb)
        upp = ((ybox > 1e-12) | (x >= ub0 - 1e-8 * np.maximum(1.0, np.abs(ub0)))) \
            & np.isfinite(ub)
        upp &= ~low
        iL = np.flatnonzero(low)
        iU = np.flatnonzero(upp)
        n = x.size
        meq = b.size
        mact = meq + iL.size + iU.size
        G = np.zeros((mact, n))
        h = np.empty(mact)
        if meq:
            G[:meq] = A
            h[:meq] = b
        G[np.arange(meq, meq + iL.size), iL] = 1.0
        h[meq:meq + iL.size] = lb[iL]
        G[np.arange(meq + iL.size, mact), iU] = 1.0
        h[meq + iL.size:] = ub[iU]

        # solve [P+reg, G'; G, -reg] via the Schur complement of the
        # regularized cost block, then refine against the true system
        try:
            L = self._pol_factor(mu)
        except Exception:
            return None
        from scipy.linalg import cho_solve, solve_triangular

        def ksolve(r1, r2):
            PiG = cho_solve((L, True), G.T, check_finite=False)
            Pir1 = cho_solve((L, True), r1, check_finite=False)
            S = G @ PiG + _POLISH_REG * np.eye(mact)
            try:
                y = np.linalg.solve(S, G @ Pir1 - r2)
            except np.linalg.LinAlgError:
                return None
            return Pir1 - PiG @ y, y

        out = ksolve(-q, h)
        if out is None:
            return None
        x_p, y_act = out
        for _ in range(2):  # refinement against the unregularized KKT
            r1 = -q - (P @ x_p + G.T @ y_act)
            r2 = h - G @ x_p
            cor = ksolve(r1, r2)
            if cor is None:
                break
            x_p = x_p + cor[0]
            y_act = y_act + cor[1]
        if not (np.all(np.isfinite(x_p)) and np.all(np.isfinite(y_act))):
            return None
        x_p = np.clip(x_p, lb, ub)
        yeq_p = y_act[:meq]
        ybox_p = np.zeros(n)
        ybox_p[iL] = y_act[meq:meq + iL.size]
        ybox_p[iU] = y_act[meq + iL.size:]
        return x_p, yeq_p, ybox_p

    def solve_capped(self, q, b, lb, ub, cap_q, cap_const, level,
                     tol=1e-8, max_iter=50_000, cap_tol=1e-8,
                     mu_max=1e8, max_outer=100, warm=True,
                     warm_mu: float = 0.0):
        """Minimize subject to the cap quadratic registered in setup().

        Safeguarded secant/bisection on the cap multiplier. The returned
        point is on the feasible side of the cap (value <= level +
        cap_tol); the complementary slackness defect |mu*(value-level)|
        is driven below max(tol, 1e-6*max(1, mu)), a scale-aware reading
        of the tolerance. Returns (x, mu, status) with cumulative inner
        iterations.
        """
        if self._s is None or len(self._s["capP"]) != 1:
            raise InvalidInputError("setup() with exactly one cap_P is required")
        cap_q = np.asarray(cap_q, dtype=float)
        capP = self._s["capP"][0]
        total = 0

        def inner(mu):
            nonlocal total
            x, stat = self.solve(q + mu * cap_q, b, lb, ub, tol=tol,
                                 max_iter=max_iter, warm=warm, mu=mu)
            total += stat.iterations
            v = float(0.5 * x @ capP @ x + cap_q @ x + cap_const)
            return x, stat, v

        x, mu, st = cap_search(inner, level, tol=tol, cap_tol=cap_tol,
                               mu_max=mu_max, max_outer=max_outer,
                               warm_mu=warm_mu)
        return x, mu, SolveStatus(st.status, total, st.primal_residual,
                                  st.dual_residual, st.polished)


def cap_search(inner, level, tol=1e-8, cap_tol=1e-8, mu_max=1e8,
               max_outer=100, warm_mu=0.0):
    """Safeguarded secant/bisection on a scalar cap multiplier.

    `inner(mu)` must return (x, status, cap_value) for the problem with
    the cap priced at mu; cap_value is nonincreasing in mu for convex
    data. Returns (x, mu, status) with the point on the feasible side
    (cap_value <= level + cap_tol) and a scale-aware complementary
    slackness defect |mu*(cap_value-level)| <= max(tol, 1e-6*max(1,mu)).
    """
    x0, st0, v0 = inner(0.0)
    if st0.status != "optimal":
        return x0, 0.0, st0
    if v0 <= level + cap_tol:
        return x0, 0.0, st0

    # bracket: lo violates, hi satisfies
    mu_lo, v_lo = 0.0, v0
    mu_hi = warm_mu if warm_mu > 0.0 else 1.0
    x_hi = st_hi = v_hi = None
    for _ in range(max_outer):
        x_hi, st_hi, v_hi = inner(mu_hi)
        if v_hi <= level:
            break
        mu_lo, v_lo = mu_hi, v_hi
        mu_hi *= 4.0
        if mu_hi > mu_max:
            raise CapUnattainableError("cap unattainable at tolerance")
    else:
        raise CapUnattainableError("cap unattainable at tolerance")

    for _ in range(max_outer):
        cs_tol = max(tol, 1e-6 * max(1.0, mu_hi))
        if v_hi <= level + cap_tol and mu_hi * (level - v_hi) <= cs_tol:
            break
        if mu_hi - mu_lo <= 1e-12 * max(1.0, mu_hi):
            break
        # secant proposal on cap_value(mu) - level, clipped into the bracket
        denom = v_hi - v_lo
        if denom != 0.0:
            mu_sec = mu_lo + (level - v_lo) * (mu_hi - mu_lo) / denom
        else:
            mu_sec = 0.5 * (mu_lo + mu_hi)
        width = mu_hi - mu_lo
        mu_mid = min(max(mu_sec, mu_lo + 0.1 * width), mu_hi - 0.1 * width)
        x_m, st_m, v_m = inner(mu_mid)
        if v_m <= level:
            mu_hi, x_hi, st_hi, v_hi = mu_mid, x_m, st_m, v_m
        else:
            mu_lo, v_lo = mu_mid, v_m

    return x_hi, mu_hi, st_hi


def solve_qp(qp: QuadProgram, tol: float = 1e-8, max_iter: int = 50_000,
             warm=None, backend: str | None = None):
    """One-shot solve of a QuadProgram; see QpSolver for reusable state.

    `warm` may carry a previous (x, yeq, ybox) triple. Deterministic:
    identical inputs produce identical outputs on one platform.
    """
    solver = QpSolver(backend=backend).setup(qp.P, qp.A)
    if warm is not None:
        solver._s["warm"] = tuple(np.asarray(w, dtype=float).copy()
                                  for w in warm)
    return solver.solve(qp.q, qp.b, qp.lb, qp.ub, tol=tol, max_iter=max_iter,
                        warm=warm is not None)


def solve_qp_with_cap(qp: QuadProgram, cap: QuadCap, tol: float = 1e-8,
                      cap_tol: float = 1e-8, mu_max: float = 1e8,
                      backend: str | None = None, warm_mu: float = 0.0):
    """Minimize qp subject to one convex quadratic cap; see
    QpSolver.solve_capped for the algorithm and guarantees."""
    solver = QpSolver(backend=backend).setup(qp.P, qp.A, cap_P=cap.P)
    return solver.solve_capped(qp.q, qp.b, qp.lb, qp.ub, cap.q, cap.const,
                               cap.level, tol=tol, cap_tol=cap_tol,
                               mu_max=mu_max, warm_mu=warm_mu)
