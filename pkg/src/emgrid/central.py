"""Centralized reference solvers for the interconnected problem.

solve_central_convex is the oracle the distributed algorithm must match:
switch states fixed to the islanded schedules, all microgrids and the
network solved as one QP, with each microgrid's discounted cost capped
at its islanded optimum. The caps are coordinated by cyclic per-cap
multiplier searches on a shared workspace (dual coordinate ascent; the
problem is convex with an attainable point, the stacked islanded
solution, so the passes converge).

solve_central_miqp_small is an exhaustive-enumeration oracle over joint
switch schedules. It exists to validate on tiny instances, not to scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import assemble
from .errors import InstanceTooLargeError, InternalError, SolverFailureError
from .islanded import IslandedSolution
from .model import Trajectory
from .qp import QpSolver, SolveStatus, cap_search
from .scenario import Instance


@dataclass(frozen=True)
class CentralSolution:
    """Joint solution of the interconnected problem."""

    trajectories: dict[int, Trajectory]
    angles: np.ndarray                       # (n, H+1) bus angles
    line_powers: dict[tuple[int, int], np.ndarray]  # edge -> (H+1,)
    mg_costs: dict[int, float]               # discounted V_j at the solution
    transmission_cost: float                 # discounted network cost
    total_cost: float                        # sum of the above
    cap_multipliers: dict[int, float]
    iterations: int


class _CentralWorkspace:
    def __init__(self, inst: Instance, delta: dict[int, np.ndarray],
                 with_caps: bool, backend=None):
        self.inst = inst
        T = inst.horizon + 1
        asm = assemble.QpAssembler()
        self.blocks = {}
        for mg in inst.specs:
            self.blocks[mg.id] = assemble.add_mg_block(
                asm, mg, inst.forecasts[mg.id], inst.x0[mg.id],
                inst.gamma, inst.Ts, islanded=False,
                delta_fixed=np.asarray(delta[mg.id], dtype=float))
        self.net = assemble.add_network_block(
            asm, inst.graph, inst.gamma, inst.horizon, self.blocks,
            gauge_node=inst.specs[0].id)
        P, q, A, b, lb, ub, const = asm.build()
        self.q, self.b, self.lb, self.ub, self.const = q, b, lb, ub, const
        self.pdiag = np.diag(P).copy()
        self.delta = {j: np.asarray(d, dtype=float).reshape(-1, T)
                      for j, d in delta.items()}

        self.caps = []
        if with_caps:
            for mg in inst.specs:
                cp, cq, cc = assemble.mg_cost_cap_arrays(
                    self.blocks[mg.id], mg, inst.forecasts[mg.id],
                    inst.gamma, self.delta[mg.id], asm.n)
                self.caps.append((mg.id, np.diag(cp), cq, cc))
        self.solver = QpSolver(backend=backend).setup(
            P, A, cap_P=[c[1] for c in self.caps] or None)

    def cap_value(self, k: int, x: np.ndarray) -> float:
        _, cP, cq, cc = self.caps[k]
        return float(0.5 * x @ cP @ x + cq @ x + cc)

    def extract(self, x: np.ndarray, iterations: int,
                mu: dict[int, float]) -> CentralSolution:
        inst = self.inst
        trajs = {}
        mg_costs = {}
        for mg in inst.specs:
            blk = self.blocks[mg.id]
            neigh = inst.graph.neighbors(mg.id)
            own = x[self.net.idx_theta[mg.id - 1]]
            reps = {m: x[self.net.idx_theta[m - 1]] for m in neigh}
            trajs[mg.id] = assemble.extract_trajectory(
                blk, mg, x, inst.x0[mg.id], self.delta[mg.id],
                own_angles=own, replica_angles=reps)
            mg_costs[mg.id] = assemble.trajectory_cost(
                mg, inst.forecasts[mg.id], trajs[mg.id], inst.gamma)
        lines = {}
        disc = assemble.discounts(inst.gamma, inst.horizon)
        lt = 0.0
        for k, e in enumerate(inst.graph.edges):
            flow = x[self.net.idx_line[k]]
            lines[(e.a, e.b)] = flow
            lt += float(np.sum(disc * 2.0 * e.cost_weight * flow * flow))
        total = sum(mg_costs.values()) + lt
        return CentralSolution(
            trajectories=trajs, angles=x[self.net.idx_theta],
            line_powers=lines, mg_costs=mg_costs, transmission_cost=lt,
            total_cost=total, cap_multipliers=mu, iterations=iterations)


def solve_central_convex(inst: Instance,
                         islanded: dict[int, IslandedSolution],
                         tol: float = 1e-8, cap_tol: float = 1e-8,
                         max_passes: int = 50,
                         backend=None) -> CentralSolution:
    """Interconnected convex solve with per-microgrid islanded-cost caps.

    Never infeasible when the islanded solutions exist (their stacked
    trajectories with equal angles satisfy every constraint); an
    infeasible inner status therefore raises InternalError.
    """
    delta = {j: sol.delta_star for j, sol in islanded.items()}
    ws = _CentralWorkspace(inst, delta, with_caps=True, backend=backend)
    levels = [islanded[jid].v_star for jid, *_ in ws.caps]
    ncaps = len(ws.caps)
    mu = np.zeros(ncaps)
    total_it = 0

    def run(mu_vec, q_extra):
        nonlocal total_it
        x, st = ws.solver.solve(ws.q + q_extra, ws.b, ws.lb, ws.ub,
                                tol=tol, mu=tuple(mu_vec))
        total_it += st.iterations
        if st.status == "infeasible":
            raise InternalError(
                "central interconnected problem reported infeasible "
                "despite existing islanded solutions")
        if st.status != "optimal":
            raise SolverFailureError(
                f"central solve ended with {st.status}", st)
        return x

    def q_extra_for(mu_vec):
        out = np.zeros_like(ws.q)
        for k in range(ncaps):
            if mu_vec[k] != 0.0:
                out += mu_vec[k] * ws.caps[k][2]
        return out

    x = run(mu, q_extra_for(mu))
    for _ in range(max_passes):
        moved = False
        for k in range(ncaps):
            vk = ws.cap_value(k, x)
            cs_tol = max(tol, 1e-6 * max(1.0, mu[k]))
            if vk <= levels[k] + cap_tol and mu[k] * (levels[k] - vk) <= cs_tol:
                continue

            def inner(m):
                trial = mu.copy()
                trial[k] = m
                xt = run(trial, q_extra_for(trial))
                return xt, SolveStatus("optimal", 0, 0.0, 0.0), \
                    ws.cap_value(k, xt)

            x, mu_k, _ = cap_search(inner, levels[k], tol=tol,
                                    cap_tol=cap_tol, warm_mu=mu[k])
            if abs(mu_k - mu[k]) > 1e-9 * max(1.0, mu_k):
                moved = True
            mu[k] = mu_k
        sat = all(ws.cap_value(k, x) <= levels[k] + cap_tol
                  for k in range(ncaps))
        if sat and not moved:
            break
    else:
        raise SolverFailureError("cap coordination did not settle")

    return ws.extract(x, total_it,
                      {ws.caps[k][0]: float(mu[k]) for k in range(ncaps)})


def stacked_islanded_feasibility(inst: Instance,
                                 islanded: dict[int, IslandedSolution],
                                 tol: float = 1e-9) -> float:
    """Largest constraint violation of the stacked islanded solution
    (equal angles, zero exchange) under the interconnected constraint
    set; small values certify the feasibility fallback."""
    worst = 0.0
    for mg in inst.specs:
        sol = islanded[mg.id]
        worst = max(worst, float(np.max(np.abs(sol.z_star.p_pcc),
                                        initial=0.0)))
        fc = inst.forecasts[mg.id]
        balance = sol.z_star.p.sum(axis=0) + sol.z_star.p_pcc + fc.load_sum
        worst = max(worst, float(np.max(np.abs(balance), initial=0.0)))
        cap_gap = assemble.trajectory_cost(mg, fc, sol.z_star, inst.gamma) \
            - sol.v_star
        worst = max(worst, cap_gap)
    for e in inst.graph.edges:
        # zero flow must satisfy the line boxes
        worst = max(worst, e.p_min, -e.p_max, 0.0)
    return worst


def solve_central_miqp_small(inst: Instance, limit: int = 4096,
                             islanded: dict[int, IslandedSolution] | None = None,
                             with_caps: bool = False, tol: float = 1e-8,
                             backend=None):
    """Joint mixed-integer optimum by exhaustive switch enumeration.

    Schedules are visited in lexicographic order (microgrid-major, then
    unit, then step) and only strict improvements replace the incumbent,
    so ties resolve to the lexicographically smallest schedule. Caps are
    off by default; pass with_caps=True (plus the islanded solutions) to
    bound each microgrid by its islanded cost as well.

    Returns (CentralSolution, schedule dict) for the best feasible leaf.
    """
    T = inst.horizon + 1
    nbits = sum(mg.n_conv * T for mg in inst.specs)
    if 2 ** nbits > limit:
        raise InstanceTooLargeError(
            f"{2 ** nbits} switch combinations exceed the limit of {limit}")
    if with_caps and islanded is None:
        raise InternalError("with_caps requires islanded solutions")

    best = None
    best_sched = None
    for bits in product((0.0, 1.0), repeat=nbits):
        delta = {}
        pos = 0
        for mg in inst.specs:
            cnt = mg.n_conv * T
            delta[mg.id] = np.asarray(bits[pos:pos + cnt]).reshape(
                mg.n_conv, T)
            pos += cnt
        ws = _CentralWorkspace(inst, delta, with_caps=with_caps,
                               backend=backend)
        qx = ws.q.copy()
        if with_caps:
            sol = _capped_leaf(ws, islanded, tol)
            if sol is None:
                continue
            x, its, mus = sol
        else:
            x, st = ws.solver.solve(ws.q, ws.b, ws.lb, ws.ub, tol=tol)
            if st.status != "optimal":
                continue
            its, mus = st.iterations, {}
        cost = 0.5 * float(x @ (ws.pdiag * x)) + float(qx @ x) + ws.const
        if best is None or cost < best[0]:
            best = (cost, ws, x, its, mus)
            best_sched = delta
    if best is None:
        return None
    _, ws, x, its, mus = best
    return ws.extract(x, its, mus), best_sched


def _capped_leaf(ws: _CentralWorkspace, islanded, tol):
    levels = [islanded[jid].v_star for jid, *_ in ws.caps]
    mu = np.zeros(len(ws.caps))
    total = 0

    def q_extra(mu_vec):
        out = np.zeros_like(ws.q)
        for k in range(len(ws.caps)):
            if mu_vec[k] != 0.0:
                out += mu_vec[k] * ws.caps[k][2]
        return out

    x, st = ws.solver.solve(ws.q + q_extra(mu), ws.b, ws.lb, ws.ub, tol=tol,
                            mu=tuple(mu))
    total += st.iterations
    if st.status != "optimal":
        return None
    for _ in range(50):
        moved = False
        for k in range(len(ws.caps)):
            vk = ws.cap_value(k, x)
            cs_tol = max(tol, 1e-6 * max(1.0, mu[k]))
            if vk <= levels[k] + 1e-8 and mu[k] * (levels[k] - vk) <= cs_tol:
                continue

            def inner(m):
                trial = mu.copy()
                trial[k] = m
                xt, stt = ws.solver.solve(ws.q + q_extra(trial), ws.b, ws.lb,
                                          ws.ub, tol=tol, mu=tuple(trial))
                if stt.status != "optimal":
                    raise SolverFailureError("leaf cap solve failed", stt)
                return xt, stt, ws.cap_value(k, xt)

            try:
                x, mu_k, _ = cap_search(inner, levels[k], tol=tol,
                                        warm_mu=mu[k])
            except SolverFailureError:
                return None
            if abs(mu_k - mu[k]) > 1e-9 * max(1.0, mu_k):
                moved = True
            mu[k] = mu_k
        if not moved and all(ws.cap_value(k, x) <= levels[k] + 1e-8
                             for k in range(len(ws.caps))):
            break
    return x, total, {ws.caps[k][0]: float(mu[k])
                      for k in range(len(ws.caps))}
