"""Builders translating microgrid and network structure into canonical QPs.

Every optimization in the package (islanded, central, per-agent
consensus subproblem) shares the same per-microgrid variable block:

    conv powers, storage powers, renewable powers, pcc split p+/p-,
    storage energies (as explicit variables tied by dynamics rows),
    and optionally relaxed switch variables with two slack channels
    linking them to the conventional power box.

The |p_pcc| trading fee is modeled exactly through the split
p_pcc = p+ - p- with fee a_abs * (p+ + p-): the fee weight is positive,
so no optimum holds both sides positive. All cost terms are squares of
single variables, so quadratic matrices are diagonal throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .model import DisturbanceSample, GridGraph, MicrogridSpec, Trajectory


@dataclass(frozen=True)
class MgForecast:
    """Horizon-stacked exogenous data of one microgrid: renewable
    availability (n_res, H+1) and per-step total load (H+1,)."""

    res_avail: np.ndarray
    load_sum: np.ndarray

    @property
    def steps(self) -> int:
        return self.load_sum.size


def mg_forecast_from_samples(mg: MicrogridSpec,
                             samples: list[DisturbanceSample]) -> MgForecast:
    T = len(samples)
    res = np.zeros((mg.n_res, T))
    load = np.zeros(T)
    for t, smp in enumerate(samples):
        r, l = smp.for_mg(mg.id)
        if r.shape != (mg.n_res,) or l.shape != (mg.loads,):
            raise InvalidInputError(
                f"sample {t} does not match microgrid {mg.id}")
        res[:, t] = r
        load[t] = l.sum()
    return MgForecast(res_avail=res, load_sum=load)


class QpAssembler:
    """Accumulates variables, diagonal cost, equality rows and boxes."""

    def __init__(self):
        self.pdiag: list[float] = []
        self.q: list[float] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.rows: list[tuple[np.ndarray, np.ndarray, float]] = []
        self.const = 0.0

    @property
    def n(self) -> int:
        return len(self.q)

    def add_var(self, lb: float, ub: float, pdiag: float = 0.0,
                q: float = 0.0) -> int:
        self.pdiag.append(pdiag)
        self.q.append(q)
        self.lb.append(lb)
        self.ub.append(ub)
        return len(self.q) - 1

    def add_vars(self, count: int, lb, ub) -> np.ndarray:
        start = self.n
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (count,))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (count,))
        for i in range(count):
            self.add_var(lb[i], ub[i])
        return np.arange(start, start + count)

    def add_eq(self, cols, coefs, rhs: float):
        self.rows.append((np.asarray(cols, dtype=int),
                          np.asarray(coefs, dtype=float), float(rhs)))

    def build(self):
        n = self.n
        P = np.diag(np.asarray(self.pdiag, dtype=float))
        q = np.asarray(self.q, dtype=float)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        A = np.zeros((len(self.rows), n))
        b = np.empty(len(self.rows))
        for i, (cols, coefs, rhs) in enumerate(self.rows):
            A[i, cols] = coefs
            b[i] = rhs
        return P, q, A, b, lb, ub, self.const


@dataclass(frozen=True)
class MgBlock:
    """Variable indices of one microgrid's block inside the assembled QP."""

    mg_id: int
    H: int
    idx_pc: np.ndarray    # (n_conv, H+1)
    idx_ps: np.ndarray    # (n_storage, H+1)
    idx_pr: np.ndarray    # (n_res, H+1)
    idx_pp: np.ndarray    # (H+1,)
    idx_pm: np.ndarray    # (H+1,)
    idx_x: np.ndarray     # (n_storage, H+1), energies at steps 1..H+1
    idx_delta: np.ndarray | None = None  # (n_conv, H+1) when switches relaxed

    def unit_powers(self, x: np.ndarray) -> np.ndarray:
        return np.vstack([x[self.idx_pc], x[self.idx_ps], x[self.idx_pr]]) \
            if self.idx_pc.size + self.idx_ps.size + self.idx_pr.size else \
            np.zeros((0, self.H + 1))

    def pcc_power(self, x: np.ndarray) -> np.ndarray:
        return x[self.idx_pp] - x[self.idx_pm]


def discounts(gamma: float, H: int) -> np.ndarray:
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError("discount factor must lie in (0, 1]")
    return gamma ** np.arange(H + 1)


def add_mg_block(asm: QpAssembler, mg: MicrogridSpec, fc: MgForecast,
                 x0: np.ndarray, gamma: float, Ts: float,
                 islanded: bool, delta_fixed: np.ndarray | None) -> MgBlock:
    """Append one microgrid's variables, costs and constraints.

    `delta_fixed` is an (n_conv, H+1) binary schedule; pass None to add
    relaxed switch variables in [0, 1] linked to the conventional power
    box through slack channels (used by the branch-and-bound relaxation).
    """
    T = fc.steps
    H = T - 1
    disc = discounts(gamma, H)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (mg.n_storage,):
        raise InvalidInputError("initial storage vector has wrong length")
    if delta_fixed is not None:
        delta_fixed = np.asarray(delta_fixed, dtype=float)
        if delta_fixed.shape != (mg.n_conv, T):
            raise InvalidInputError("fixed switch schedule has wrong shape")

    idx_pc = np.empty((mg.n_conv, T), dtype=int)
    idx_ps = np.empty((mg.n_storage, T), dtype=int)
    idx_pr = np.empty((mg.n_res, T), dtype=int)
    idx_x = np.empty((mg.n_storage, T), dtype=int)

    for c, u in enumerate(mg.conv):
        for t in range(T):
            if delta_fixed is not None:
                lo, hi = u.p_min * delta_fixed[c, t], u.p_max * delta_fixed[c, t]
            else:
                lo, hi = 0.0, u.p_max
            i = asm.add_var(lo, hi, pdiag=2.0 * u.a_quad * disc[t],
                            q=u.a_lin * disc[t])
            idx_pc[c, t] = i
            if delta_fixed is not None:
                asm.const += u.a * delta_fixed[c, t] * disc[t]
    for s, u in enumerate(mg.storage):
        for t in range(T):
            idx_ps[s, t] = asm.add_var(u.p_min, u.p_max,
                                       pdiag=2.0 * u.a_s * disc[t])
    for r, u in enumerate(mg.res):
        for t in range(T):
            w = fc.res_avail[r, t]
            idx_pr[r, t] = asm.add_var(0.0, min(u.p_max, w),
                                       pdiag=2.0 * u.a_r * disc[t],
                                       q=-2.0 * u.a_r * w * disc[t])
            asm.const += u.a_r * w * w * disc[t]
    pcc_ub = 0.0 if islanded else np.inf
    idx_pp = np.array([asm.add_var(0.0, pcc_ub,
                                   q=(mg.pcc.a_p + mg.pcc.a_abs) * disc[t])
                       for t in range(T)])
    idx_pm = np.array([asm.add_var(0.0, pcc_ub,
                                   q=(-mg.pcc.a_p + mg.pcc.a_abs) * disc[t])
                       for t in range(T)])
    for s, u in enumerate(mg.storage):
        for t in range(T):
            idx_x[s, t] = asm.add_var(u.x_min, u.x_max)

    idx_delta = None
    if delta_fixed is None:
        idx_delta = np.empty((mg.n_conv, T), dtype=int)
        for c, u in enumerate(mg.conv):
            for t in range(T):
                idx_delta[c, t] = asm.add_var(0.0, 1.0, q=u.a * disc[t])
        # link rows: p - p_min*delta = s1 >= 0 and p_max*delta - p = s2 >= 0
        for c, u in enumerate(mg.conv):
            for t in range(T):
                s1 = asm.add_var(0.0, np.inf)
                asm.add_eq([idx_pc[c, t], idx_delta[c, t], s1],
                           [1.0, -u.p_min, -1.0], 0.0)
                s2 = asm.add_var(0.0, np.inf)
                asm.add_eq([idx_pc[c, t], idx_delta[c, t], s2],
                           [1.0, -u.p_max, 1.0], 0.0)

    # power balance per step
    for t in range(T):
        cols = np.concatenate([idx_pc[:, t], idx_ps[:, t], idx_pr[:, t],
                               [idx_pp[t], idx_pm[t]]])
        coefs = np.concatenate([np.ones(mg.n_units), [1.0, -1.0]])
        asm.add_eq(cols, coefs, -fc.load_sum[t])

    # storage dynamics
    for s in range(mg.n_storage):
        for t in range(T):
            if t == 0:
                asm.add_eq([idx_x[s, 0], idx_ps[s, 0]], [1.0, Ts], x0[s])
            else:
                asm.add_eq([idx_x[s, t], idx_x[s, t - 1], idx_ps[s, t]],
                           [1.0, -1.0, Ts], 0.0)

    return MgBlock(mg_id=mg.id, H=H, idx_pc=idx_pc, idx_ps=idx_ps,
                   idx_pr=idx_pr, idx_pp=idx_pp, idx_pm=idx_pm, idx_x=idx_x,
                   idx_delta=idx_delta)


def mg_cost_cap_arrays(block: MgBlock, mg: MicrogridSpec, fc: MgForecast,
                       gamma: float, delta_star: np.ndarray, nvar: int):
    """Quadratic form of the microgrid's discounted horizon cost V_j over
    the full variable vector, for use as a cap. Returns (pdiag, q, const);
    value(x) = 0.5 x'diag(pdiag)x + q'x + const."""
    T = block.H + 1
    disc = discounts(gamma, block.H)
    pdiag = np.zeros(nvar)
    q = np.zeros(nvar)
    const = 0.0
    for c, u in enumerate(mg.conv):
        pdiag[block.idx_pc[c]] = 2.0 * u.a_quad * disc
        q[block.idx_pc[c]] = u.a_lin * disc
        const += float(np.sum(u.a * delta_star[c] * disc))
    for s, u in enumerate(mg.storage):
        pdiag[block.idx_ps[s]] = 2.0 * u.a_s * disc
    for r, u in enumerate(mg.res):
        w = fc.res_avail[r]
        pdiag[block.idx_pr[r]] = 2.0 * u.a_r * disc
        q[block.idx_pr[r]] = -2.0 * u.a_r * w * disc
        const += float(np.sum(u.a_r * w * w * disc))
    q[block.idx_pp] = (mg.pcc.a_p + mg.pcc.a_abs) * disc
    q[block.idx_pm] = (-mg.pcc.a_p + mg.pcc.a_abs) * disc
    return pdiag, q, const


@dataclass(frozen=True)
class NetworkBlock:
    """Bus-angle and line-power indices of the coupled (central) problem."""

    idx_theta: np.ndarray  # (n, H+1)
    idx_line: np.ndarray   # (n_edges, H+1)


def add_network_block(asm: QpAssembler, graph: GridGraph, gamma: float, H: int,
                      blocks: dict[int, MgBlock],
                      gauge_node: int = 1) -> NetworkBlock:
    """Append bus angles, line powers and the coupling rows of the
    interconnected problem: line flow definitions, line limits (as boxes)
    and per-node aggregation tying pcc power to incident line flows.

    DC flow fixes angles only up to a uniform shift; the gauge node's
    angle is pinned to zero.
    """
    T = H + 1
    disc = discounts(gamma, H)
    n = graph.n
    idx_theta = np.empty((n, T), dtype=int)
    for j in range(1, n + 1):
        for t in range(T):
            if j == gauge_node:
                idx_theta[j - 1, t] = asm.add_var(0.0, 0.0)
            else:
                idx_theta[j - 1, t] = asm.add_var(-np.inf, np.inf)
    idx_line = np.empty((len(graph.edges), T), dtype=int)
    for k, e in enumerate(graph.edges):
        for t in range(T):
            # each undirected line appears in both directions of the
            # transmission sum, hence the factor 2 on its weight
            idx_line[k, t] = asm.add_var(e.p_min, e.p_max,
                                         pdiag=4.0 * e.cost_weight * disc[t])
            asm.add_eq([idx_line[k, t], idx_theta[e.a - 1, t],
                        idx_theta[e.b - 1, t]],
                       [1.0, -e.susceptance, e.susceptance], 0.0)
    for j in range(1, n + 1):
        blk = blocks[j]
        for t in range(T):
            cols = [blk.idx_pp[t], blk.idx_pm[t]]
            coefs = [1.0, -1.0]
            for k, e in enumerate(graph.edges):
                if e.a == j:
                    cols.append(idx_line[k, t])
                    coefs.append(-1.0)
                elif e.b == j:
                    cols.append(idx_line[k, t])
                    coefs.append(1.0)
            asm.add_eq(cols, coefs, 0.0)
    return NetworkBlock(idx_theta=idx_theta, idx_line=idx_line)


@dataclass(frozen=True)
class AgentNetworkBlock:
    """Local angle section of one agent's consensus subproblem."""

    idx_own: np.ndarray          # (H+1,)
    idx_rep: dict[int, np.ndarray]   # neighbor id -> (H+1,)
    idx_line: dict[int, np.ndarray]  # neighbor id -> (H+1,)


def add_agent_network_block(asm: QpAssembler, graph: GridGraph, j: int,
                            gamma: float, H: int,
                            block: MgBlock) -> AgentNetworkBlock:
    """Append agent j's own angle, neighbor-angle replicas, local line
    powers with their limits, and the pcc aggregation row. The local
    transmission cost uses the per-direction weight; summed over agents
    this reproduces the network-wide double sum."""
    T = H + 1
    disc = discounts(gamma, H)
    idx_own = np.array([asm.add_var(-np.inf, np.inf) for _ in range(T)])
    idx_rep: dict[int, np.ndarray] = {}
    idx_line: dict[int, np.ndarray] = {}
    for m in graph.neighbors(j):
        e = graph.line(j, m)
        idx_rep[m] = np.array([asm.add_var(-np.inf, np.inf) for _ in range(T)])
        lidx = np.empty(T, dtype=int)
        for t in range(T):
            lidx[t] = asm.add_var(e.p_min if e.a == j else -e.p_max,
                                  e.p_max if e.a == j else -e.p_min,
                                  pdiag=2.0 * e.cost_weight * disc[t])
            asm.add_eq([lidx[t], idx_own[t], idx_rep[m][t]],
                       [1.0, -e.susceptance, e.susceptance], 0.0)
        idx_line[m] = lidx
    for t in range(T):
        cols = [block.idx_pp[t], block.idx_pm[t]]
        coefs = [1.0, -1.0]
        for m in graph.neighbors(j):
            cols.append(idx_line[m][t])
            coefs.append(-1.0)
        asm.add_eq(cols, coefs, 0.0)
    return AgentNetworkBlock(idx_own=idx_own, idx_rep=idx_rep,
                             idx_line=idx_line)


def extract_trajectory(block: MgBlock, mg: MicrogridSpec, x_sol: np.ndarray,
                       x0: np.ndarray, delta: np.ndarray,
                       own_angles=None, replica_angles=None) -> Trajectory:
    T = block.H + 1
    x_all = np.empty((mg.n_storage, T + 1))
    x_all[:, 0] = np.asarray(x0, dtype=float)
    if mg.n_storage:
        x_all[:, 1:] = x_sol[block.idx_x]
    return Trajectory(
        horizon=block.H,
        p=block.unit_powers(x_sol),
        p_pcc=block.pcc_power(x_sol),
        delta=np.asarray(delta, dtype=float).reshape(mg.n_conv, T),
        x=x_all,
        own_angles=None if own_angles is None else np.asarray(own_angles),
        replica_angles=replica_angles,
    )


def trajectory_cost(mg: MicrogridSpec, fc: MgForecast, traj: Trajectory,
                    gamma: float) -> float:
    """Discounted horizon cost V_j of a trajectory under a forecast."""
    disc = discounts(gamma, traj.horizon)
    total = 0.0
    i = 0
    for c, u in enumerate(mg.conv):
        p = traj.p[i]
        total += float(np.sum(disc * (u.a * traj.delta[c] + u.a_lin * p
                                      + u.a_quad * p * p)))
        i += 1
    for s, u in enumerate(mg.storage):
        p = traj.p[i]
        total += float(np.sum(disc * u.a_s * p * p))
        i += 1
    for r, u in enumerate(mg.res):
        p = traj.p[i]
        w = fc.res_avail[r]
        total += float(np.sum(disc * u.a_r * (p - w) ** 2))
        i += 1
    total += float(np.sum(disc * (mg.pcc.a_p * traj.p_pcc
                                  + mg.pcc.a_abs * np.abs(traj.p_pcc))))
    return total
