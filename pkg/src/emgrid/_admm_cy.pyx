# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ADMM iteration kernel.

Mirrors emgrid._admm_py.run step for step; see that module for the
contract. The loop runs without the GIL and leans on BLAS level-2
routines, which is what makes the closed-loop simulations tractable.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, fabs, sqrt
from scipy.linalg.cython_blas cimport dgemv, dtrsv

KERNEL_NAME = "cython"


cdef inline double _maxabs(double* v, int n) nogil:
    cdef double m = 0.0
    cdef int i
    for i in range(n):
        if fabs(v[i]) > m:
            m = fabs(v[i])
    return m


def run(double[:, ::1] L, double[:, ::1] P, double[::1] q,
        double[:, ::1] Aeq, double[::1] b, double[::1] lb, double[::1] ub,
        double[::1] x, double[::1] zbox, double[::1] yeq, double[::1] ybox,
        double sigma, double rho_eq, double rho_box, double alpha,
        double eps, long max_iter, long check_interval, long rho_check_from,
        double infeas_tol):
    cdef int n = x.shape[0]
    cdef int meq = Aeq.shape[0]
    cdef int inc = 1
    cdef char tN = 78   # 'N'
    cdef char tT = 84   # 'T'
    cdef char uU = 85   # 'U'
    cdef double one = 1.0, zero = 0.0

    buf = np.empty((7, n))
    cdef double[:, ::1] wv = buf
    cdef double* rhs = &wv[0, 0]
    cdef double* xt = &wv[1, 0]
    cdef double* px = &wv[2, 0]
    cdef double* aty = &wv[3, 0]
    cdef double* dybox_mark = &wv[4, 0]
    cdef double* stat = &wv[5, 0]
    cdef double* unused = &wv[6, 0]

    mbuf = np.empty((4, max(meq, 1)))
    cdef double[:, ::1] mv = mbuf
    cdef double* weq = &mv[0, 0]
    cdef double* rb = &mv[1, 0]
    cdef double* aeqx = &mv[2, 0]
    cdef double* dyeq_mark = &mv[3, 0]

    cdef double* Lp = &L[0, 0]
    cdef double* Pp = &P[0, 0]
    cdef double* Ap = NULL
    if meq > 0:
        Ap = &Aeq[0, 0]

    cdef long it = 0
    cdef int flag = 1
    cdef int i
    cdef double r_prim = INFINITY, r_dual = INFINITY, ratio = 1.0
    cdef double vb, v, zn, ny, thr, support, d, pscale, dscale, rp2

    with nogil:
        for i in range(meq):
            rb[i] = rho_eq * b[i]
            dyeq_mark[i] = yeq[i]
        for i in range(n):
            dybox_mark[i] = ybox[i]

        while it < max_iter:
            it += 1

            for i in range(n):
                rhs[i] = sigma * x[i] - q[i] + rho_box * zbox[i] - ybox[i]
            if meq > 0:
                for i in range(meq):
                    weq[i] = rb[i] - yeq[i]
                dgemv(&tN, &n, &meq, &one, Ap, &n, weq, &inc, &one, rhs, &inc)

            for i in range(n):
                xt[i] = rhs[i]
            dtrsv(&uU, &tT, &tN, &n, Lp, &n, xt, &inc)
            dtrsv(&uU, &tN, &tN, &n, Lp, &n, xt, &inc)

            if meq > 0:
                dgemv(&tT, &n, &meq, &one, Ap, &n, xt, &inc, &zero, weq, &inc)
                for i in range(meq):
                    yeq[i] += rho_eq * alpha * (weq[i] - b[i])

            for i in range(n):
                vb = alpha * xt[i] + (1.0 - alpha) * zbox[i]
                v = vb + ybox[i] / rho_box
                zn = v
                if zn < lb[i]:
                    zn = lb[i]
                elif zn > ub[i]:
                    zn = ub[i]
                ybox[i] += rho_box * (vb - zn)
                zbox[i] = zn
                x[i] = alpha * xt[i] + (1.0 - alpha) * x[i]

            if it % check_interval != 0 and it != max_iter:
                continue

            # residuals
            dgemv(&tT, &n, &n, &one, Pp, &n, &x[0], &inc, &zero, px, &inc)
            if meq > 0:
                dgemv(&tT, &n, &meq, &one, Ap, &n, &x[0], &inc, &zero, aeqx, &inc)
                dgemv(&tN, &n, &meq, &one, Ap, &n, &yeq[0], &inc, &zero, aty, &inc)
            else:
                for i in range(n):
                    aty[i] = 0.0
            r_prim = 0.0
            for i in range(meq):
                if fabs(aeqx[i] - b[i]) > r_prim:
                    r_prim = fabs(aeqx[i] - b[i])
            for i in range(n):
                if fabs(x[i] - zbox[i]) > r_prim:
                    r_prim = fabs(x[i] - zbox[i])
            r_dual = 0.0
            for i in range(n):
                d = fabs(px[i] + q[i] + aty[i] + ybox[i])
                if d > r_dual:
                    r_dual = d
            if r_prim <= eps and r_dual <= eps:
                flag = 0
                break

            # primal infeasibility certificate
            ny = 0.0
            for i in range(meq):
                weq[i] = yeq[i] - dyeq_mark[i]
                if fabs(weq[i]) > ny:
                    ny = fabs(weq[i])
            for i in range(n):
                unused[i] = ybox[i] - dybox_mark[i]
                if fabs(unused[i]) > ny:
                    ny = fabs(unused[i])
            if ny > 1e-12:
                thr = infeas_tol * ny
                if meq > 0:
                    dgemv(&tN, &n, &meq, &one, Ap, &n, weq, &inc, &zero, stat, &inc)
                else:
                    for i in range(n):
                        stat[i] = 0.0
                for i in range(n):
                    stat[i] += unused[i]
                if _maxabs(stat, n) <= thr:
                    support = 0.0
                    for i in range(meq):
                        support += b[i] * weq[i]
                    for i in range(n):
                        if unused[i] > thr:
                            if ub[i] == INFINITY:
                                support = INFINITY
                                break
                            support += ub[i] * unused[i]
                        elif unused[i] < -thr:
                            if lb[i] == -INFINITY:
                                support = INFINITY
                                break
                            support += lb[i] * unused[i]
                    if support <= -thr:
                        flag = 3
                        break
            for i in range(meq):
                dyeq_mark[i] = yeq[i]
            for i in range(n):
                dybox_mark[i] = ybox[i]

            # penalty rebalance suggestion
            if it >= rho_check_from:
                pscale = 1e-12
                if meq > 0:
                    d = _maxabs(aeqx, meq)
                    if d > pscale:
                        pscale = d
                    d = _maxabs(&b[0], meq)
                    if d > pscale:
                        pscale = d
                d = _maxabs(&x[0], n)
                if d > pscale:
                    pscale = d
                d = _maxabs(&zbox[0], n)
                if d > pscale:
                    pscale = d
                dscale = 1e-12
                d = _maxabs(px, n)
                if d > dscale:
                    dscale = d
                if n > 0:
                    d = _maxabs(&q[0], n)
                    if d > dscale:
                        dscale = d
                d = _maxabs(aty, n)
                if d > dscale:
                    dscale = d
                d = _maxabs(&ybox[0], n)
                if d > dscale:
                    dscale = d
                rp2 = r_dual / dscale
                if rp2 < 1e-30:
                    rp2 = 1e-30
                ratio = sqrt((r_prim / pscale) / rp2)
                if ratio > 5.0 or ratio < 0.2:
                    flag = 2
                    break

    return flag, int(it), float(r_prim), float(r_dual), float(ratio)
