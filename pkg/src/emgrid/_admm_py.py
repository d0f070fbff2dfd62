"""Pure-Python ADMM iteration kernel.

Same contract as the compiled kernel in _admm_cy.pyx; used as the
fallback backend and as the reference in the kernel equivalence tests.
The driver in emgrid.qp owns scaling, factorization, polish and status
handling; this module only runs the splitting iteration.

Flags returned by run(): 0 converged, 1 iteration cap hit,
2 penalty rebalance suggested, 3 primal infeasibility certificate.
"""

import numpy as np
from scipy.linalg import solve_triangular

KERNEL_NAME = "python"


def _solve_chol(L, rhs):
    u = solve_triangular(L, rhs, lower=True, check_finite=False)
    return solve_triangular(L.T, u, lower=False, check_finite=False)


def run(L, P, q, Aeq, b, lb, ub, x, zbox, yeq, ybox,
        sigma, rho_eq, rho_box, alpha, eps, max_iter,
        check_interval, rho_check_from, infeas_tol):
    """Iterate the over-relaxed splitting scheme in place.

    `x`, `zbox`, `yeq`, `ybox` are updated in place so the caller can
    warm-start the next call. Returns (flag, iterations, primal
    residual, dual residual, penalty rebalance ratio).
    """
    meq = Aeq.shape[0]
    yeq_mark = yeq.copy()
    ybox_mark = ybox.copy()

    it = 0
    r_prim = np.inf
    r_dual = np.inf
    while it < max_iter:
        it += 1

        # proximal KKT solve
        rhs = sigma * x - q + (rho_box * zbox - ybox)
        if meq:
            rhs += Aeq.T @ (rho_eq * b - yeq)
        xt = _solve_chol(L, rhs)

        if meq:
            weq = Aeq @ xt
            yeq += rho_eq * (alpha * (weq - b))

        vbox = alpha * xt + (1.0 - alpha) * zbox
        znew = np.clip(vbox + ybox / rho_box, lb, ub)
        ybox += rho_box * (vbox - znew)
        zbox[:] = znew
        x[:] = alpha * xt + (1.0 - alpha) * x

        if it % check_interval and it != max_iter:
            continue

        # residuals on the (scaled) data
        Px = P @ x
        if meq:
            Aeqx = Aeq @ x
            Aty = Aeq.T @ yeq
            r_prim = max(np.max(np.abs(Aeqx - b)), np.max(np.abs(x - zbox)))
            r_dual = np.max(np.abs(Px + q + Aty + ybox))
        else:
            Aeqx = np.zeros(0)
            Aty = np.zeros_like(x)
            r_prim = np.max(np.abs(x - zbox))
            r_dual = np.max(np.abs(Px + q + ybox))
        if r_prim <= eps and r_dual <= eps:
            return 0, it, r_prim, r_dual, 1.0

        # primal infeasibility certificate from the dual drift
        dyeq = yeq - yeq_mark
        dybox = ybox - ybox_mark
        ny = max(np.max(np.abs(dyeq)) if meq else 0.0, np.max(np.abs(dybox)))
        if ny > 1e-12:
            thr = infeas_tol * ny
            stat = np.abs((Aeq.T @ dyeq if meq else 0.0) + dybox)
            if np.max(stat) <= thr:
                support = float(b @ dyeq) if meq else 0.0
                ok = True
                pos = dybox > thr
                neg = dybox < -thr
                if np.any(pos & np.isinf(ub)) or np.any(neg & np.isinf(lb)):
                    ok = False
                else:
                    support += float(np.sum(ub[pos] * dybox[pos]))
                    support += float(np.sum(lb[neg] * dybox[neg]))
                if ok and support <= -thr:
                    return 3, it, r_prim, r_dual, 1.0
        yeq_mark = yeq.copy()
        ybox_mark = ybox.copy()

        # penalty rebalance suggestion on normalized residuals
        if it >= rho_check_from:
            pscale = max(
                np.max(np.abs(Aeqx)) if meq else 0.0,
                np.max(np.abs(b)) if meq else 0.0,
                np.max(np.abs(x)), np.max(np.abs(zbox)), 1e-12)
            dscale = max(
                np.max(np.abs(Px)), np.max(np.abs(q)) if q.size else 0.0,
                np.max(np.abs(Aty)), np.max(np.abs(ybox)), 1e-12)
            ratio = np.sqrt((r_prim / pscale) / max(r_dual / dscale, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                return 2, it, r_prim, r_dual, float(ratio)

    return 1, it, r_prim, r_dual, 1.0
