"""Islanded per-microgrid MPC: optimal operation with zero coupling power.

The switch states of the conventional generators are binary, which makes
this a small mixed-integer QP per microgrid. It is solved exactly by
best-first branch-and-bound on the switch variables: node bounds come
from the QP relaxation with switches in [0, 1] (the switched power box
is encoded with linear link rows, so the relaxation stays a QP), and
incumbents come from rounding the relaxed switches and re-solving with
them pinned. The optimal cost found here caps the microgrid's cost in
every interconnected solve, which is what guarantees that trading never
hurts a participant.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import assemble
from .errors import SolverFailureError
from .model import MicrogridSpec, Trajectory
from .qp import QpSolver

_INT_TOL = 1e-6


@dataclass(frozen=True)
class IslandedSolution:
    """Optimal islanded schedule, trajectory and cost of one microgrid."""

    delta_star: np.ndarray  # (n_conv, H+1) binary
    z_star: Trajectory      # coupling power identically zero
    v_star: float           # discounted horizon cost
    nodes: int              # branch-and-bound nodes explored


class _IslandedWorkspace:
    """Relaxed-switch QP template reused by all nodes of one instance."""

    def __init__(self, mg: MicrogridSpec, fc: assemble.MgForecast,
                 x0, gamma: float, Ts: float, backend=None):
        self.mg = mg
        self.fc = fc
        self.gamma = gamma
        self.x0 = np.asarray(x0, dtype=float)
        asm = assemble.QpAssembler()
        self.block = assemble.add_mg_block(
            asm, mg, fc, self.x0, gamma, Ts, islanded=True, delta_fixed=None)
        P, q, A, b, lb, ub, const = asm.build()
        self.pdiag = np.diag(P).copy()
        self.q = q
        self.b = b
        self.lb = lb
        self.ub = ub
        self.const = const
        self.solver = QpSolver(backend=backend).setup(P, A)

    def solve_bounds(self, dlo, dhi, tol, max_iter=50_000, strict=True):
        """Solve with switch variables boxed to [dlo, dhi] elementwise.

        Returns (cost, x) or None when infeasible. With dlo == dhi the
        link rows pin the conventional boxes exactly, so this doubles as
        the fixed-switch solve. With strict=False an unconverged solve
        is treated like an infeasible one (used for optional incumbent
        probes where giving up is harmless).
        """
        idx = self.block.idx_delta
        lb = self.lb.copy()
        ub = self.ub.copy()
        lb[idx] = dlo
        ub[idx] = dhi
        x, st = self.solver.solve(self.q, self.b, lb, ub, tol=tol,
                                  max_iter=max_iter)
        if st.status == "infeasible":
            return None
        if st.status != "optimal":
            if strict:
                raise SolverFailureError(
                    f"relaxation solve ended with {st.status}", st)
            return None
        cost = 0.5 * float(x @ (self.pdiag * x)) + float(self.q @ x) + self.const
        return cost, x

    def extract(self, x, delta) -> Trajectory:
        return assemble.extract_trajectory(
            self.block, self.mg, x, self.x0, delta)


def solve_fixed_binary(mg: MicrogridSpec, fc: assemble.MgForecast, x0,
                       delta: np.ndarray, gamma: float, Ts: float,
                       tol: float = 1e-8, backend=None):
    """Islanded solve with a fixed binary switch schedule.

    Returns (Trajectory, cost) or None when the power balance cannot be
    met under this schedule.
    """
    delta = np.asarray(delta, dtype=float)
    ws = _IslandedWorkspace(mg, fc, x0, gamma, Ts, backend=backend)
    out = ws.solve_bounds(delta, delta, tol)
    if out is None:
        return None
    cost, x = out
    return ws.extract(x, delta), cost


def solve_islanded(mg: MicrogridSpec, fc: assemble.MgForecast, x0,
                   gamma: float, Ts: float, tol: float = 1e-8,
                   max_nodes: int = 200_000, backend=None):
    """Globally optimal islanded MPC via branch-and-bound on the switches.

    Best-first on the relaxed-QP bound; branches on the most fractional
    switch (ties: lowest unit index, then earliest step); incumbents from
    rounding the relaxation at every explored node. Returns None when
    the microgrid is infeasible under every switch schedule.
    """
    T = fc.steps
    nc = mg.n_conv
    ws = _IslandedWorkspace(mg, fc, x0, gamma, Ts, backend=backend)

    if nc == 0:
        out = ws.solve_bounds(np.zeros((0, T)), np.zeros((0, T)), tol)
        if out is None:
            return None
        cost, x = out
        delta = np.zeros((0, T))
        return IslandedSolution(delta, ws.extract(x, delta), cost, nodes=1)

    incumbent = None  # (cost, delta, x)
    probed: set[bytes] = set()

    def offer(sched, max_iter=3_000):
        """Try a fully pinned schedule as incumbent; probes may give up.
        Repeated schedules are skipped via the probe cache."""
        nonlocal incumbent
        key = sched.astype(np.int8).tobytes()
        if key in probed:
            return
        probed.add(key)
        out = ws.solve_bounds(sched, sched, tol, max_iter=max_iter,
                              strict=False)
        if out is None:
            return
        cost, x = out
        if incumbent is None or cost < incumbent[0]:
            incumbent = (cost, sched.copy(), x.copy())

    root = (np.zeros((nc, T)), np.ones((nc, T)))
    counter = 0
    heap = []
    nodes = 0

    out = ws.solve_bounds(*root, tol)
    if out is None:
        return None  # relaxation covers every binary schedule
    nodes += 1
    heapq.heappush(heap, (out[0], counter, root, out))
    # all-on schedule: cheap feasible incumbent whenever one exists at
    # all, which makes bound pruning effective from the start
    offer(np.ones((nc, T)), max_iter=50_000)

    while heap:
        bound, _, (dlo, dhi), out = heapq.heappop(heap)
        if nodes > max_nodes:
            raise SolverFailureError("branch-and-bound node budget exhausted")
        if incumbent is not None and \
                bound - 1e-8 * max(1.0, abs(bound)) >= incumbent[0] - 1e-9:
            continue
        cost, x = out
        dval = x[ws.block.idx_delta]
        frac = np.abs(dval - np.round(dval))
        if frac.max(initial=0.0) <= _INT_TOL:
            d_int = np.round(dval)
            exact = ws.solve_bounds(d_int, d_int, tol)  # full budget
            if exact is not None and (incumbent is None
                                      or exact[0] < incumbent[0]):
                incumbent = (exact[0], d_int.copy(), exact[1].copy())
            continue
        # rounding heuristic for an incumbent
        d_round = np.where(dval >= 0.5, 1.0, 0.0)
        d_round = np.maximum(np.minimum(d_round, dhi), dlo)
        offer(d_round)
        # most fractional switch; ties by unit then step
        best = frac.max()
        cand = np.argwhere(frac >= best - 1e-12)
        c_br, t_br = min(map(tuple, cand))
        for val in (0.0, 1.0):
            lo2, hi2 = dlo.copy(), dhi.copy()
            lo2[c_br, t_br] = hi2[c_br, t_br] = val
            sub = ws.solve_bounds(lo2, hi2, tol)
            nodes += 1
            if sub is None:
                continue
            if incumbent is not None and \
                    sub[0] - 1e-8 * max(1.0, abs(sub[0])) >= incumbent[0] - 1e-9:
                continue
            counter += 1
            heapq.heappush(heap, (sub[0], counter, (lo2, hi2), sub))

    if incumbent is None:
        return None
    cost, delta, x = incumbent
    return IslandedSolution(delta_star=delta, z_star=ws.extract(x, delta),
                            v_star=cost, nodes=nodes)
