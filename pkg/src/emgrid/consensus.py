"""Consensus-based distributed solve of the interconnected problem.

Each microgrid runs one agent that owns its bus angle trajectory and a
local replica of every neighbor's angle. Consensus constraints tie each
replica to its owner's value; they are relaxed by Lagrange multipliers
and, for the accelerated augmented-Lagrangian method, by separable
proximal penalties anchored at the latest neighbor snapshots. One round
executes, for every agent: a local capped QP solve, an angle relaxation
step, one message to each neighbor carrying the agent's own angle and
its replica of the receiver's angle, a snapshot update and the dual
updates. The dual-decomposition baseline shares the round structure and
per-round communication pattern but performs plain dual ascent with a
diminishing step and no angle relaxation.

Rounds are bulk-synchronous and deterministic: agents solve in parallel
between barriers, messages travel over an in-process per-edge queue,
and results are identical for any worker count.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import assemble
from ._parallel import parallel_map
from .errors import InvalidInputError, ProtocolError, SolverFailureError
from .islanded import IslandedSolution
from .model import Trajectory
from .qp import QpSolver
from .scenario import Instance, SolverSettings


@dataclass
class AgentState:
    """Consensus state owned by one agent."""

    mg_id: int
    neighbors: tuple[int, ...]
    own: np.ndarray                    # own angle trajectory (H+1,)
    rep: dict[int, np.ndarray]         # replicas of neighbor angles
    snap_own: dict[int, np.ndarray]    # latest received neighbor angles
    snap_rep: dict[int, np.ndarray]    # latest received replicas of own angle
    lam: dict[int, np.ndarray]         # multiplier per replica constraint
    lam_own: np.ndarray                # aggregated multiplier on own angle
    nu: int = 0
    cap_mu: float = 0.0                # warm start for the cost-cap search
    z: np.ndarray | None = None        # last local QP solution
    theta_bar: tuple[np.ndarray, dict[int, np.ndarray]] | None = None

    @classmethod
    def zeros(cls, mg_id, neighbors, T):
        z = lambda: np.zeros(T)
        return cls(mg_id=mg_id, neighbors=tuple(neighbors), own=z(),
                   rep={m: z() for m in neighbors},
                   snap_own={m: z() for m in neighbors},
                   snap_rep={m: z() for m in neighbors},
                   lam={m: z() for m in neighbors}, lam_own=z())

    def shifted(self) -> "AgentState":
        """Warm start for the next MPC instant: shift one step, repeat last."""
        def sh(v):
            out = np.empty_like(v)
            out[:-1] = v[1:]
            out[-1] = v[-1]
            return out
        return AgentState(
            mg_id=self.mg_id, neighbors=self.neighbors, own=sh(self.own),
            rep={m: sh(v) for m, v in self.rep.items()},
            snap_own={m: sh(v) for m, v in self.snap_own.items()},
            snap_rep={m: sh(v) for m, v in self.snap_rep.items()},
            lam={m: sh(v) for m, v in self.lam.items()},
            lam_own=sh(self.lam_own), cap_mu=self.cap_mu)


@dataclass(frozen=True)
class ConsensusMessage:
    """One directed neighbor message: the sender's own angle trajectory
    and the sender's replica of the receiver's angle trajectory."""

    sender: int
    receiver: int
    round: int
    own_angles: np.ndarray
    replica_of_receiver: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.own_angles))
                and np.all(np.isfinite(self.replica_of_receiver))):
            raise ProtocolError(
                f"non-finite payload on edge ({self.sender},{self.receiver})")


class MessageBus:
    """In-process ordered per-edge queues with round monotonicity checks."""

    def __init__(self):
        self._q: dict[tuple[int, int], deque] = {}
        self._last: dict[tuple[int, int], int] = {}
        self.sent = 0

    def send(self, msg: ConsensusMessage):
        key = (msg.sender, msg.receiver)
        last = self._last.get(key)
        if last is not None and msg.round <= last:
            raise ProtocolError(
                f"non-monotone round {msg.round} on edge {key}")
        self._last[key] = msg.round
        self._q.setdefault(key, deque()).append(msg)
        self.sent += 1

    def receive(self, sender: int, receiver: int, round_: int) -> ConsensusMessage:
        key = (sender, receiver)
        q = self._q.get(key)
        if not q:
            raise ProtocolError(f"missing message for round {round_} "
                                f"on edge ({sender},{receiver})")
        msg = q.popleft()
        if msg.round != round_:
            raise ProtocolError(f"expected round {round_} on edge {key}, "
                                f"got {msg.round}")
        return msg


@dataclass
class RoundReport:
    """Per-round diagnostics; residual is max(primal, dual) per agent."""

    residuals: dict[int, float]
    primal: dict[int, float]
    dual: dict[int, float]
    objectives: dict[int, float]
    messages: int
    wall_time: float


@dataclass
class ConsensusResult:
    trajectories: dict[int, Trajectory]
    angles: np.ndarray                   # (n, H+1) owner angles
    mg_costs: dict[int, float]
    transmission_cost: float
    objective: float
    iterations: int
    converged: bool
    residual_trace: list[tuple[int, int, float, float, float]]
    message_count: int
    final_states: dict[int, AgentState]


class AgentRuntime:
    """One agent's QP template plus its consensus state.

    The template is built once per MPC instant; between rounds only the
    linear cost changes (multipliers and snapshots), so the solver
    workspace persists and warm starts every round.
    """

    def __init__(self, inst: Instance, j: int, islanded_j: IslandedSolution,
                 mode: str, rho: float, prox: float, qp_tol: float,
                 qp_max_iter: int, backend=None):
        if mode not in ("al", "dd"):
            raise InvalidInputError(f"unknown mode {mode!r}")
        self.mode = mode
        self._rho = rho
        self._prox = prox
        self.inst = inst
        self.mg = inst.mg(j)
        self.fc = inst.forecasts[j]
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        T = inst.horizon + 1
        asm = assemble.QpAssembler()
        self.block = assemble.add_mg_block(
            asm, self.mg, self.fc, inst.x0[j], inst.gamma, inst.Ts,
            islanded=False, delta_fixed=islanded_j.delta_star)
        self.net = assemble.add_agent_network_block(
            asm, inst.graph, j, inst.gamma, inst.horizon, self.block)
        P, q, A, b, lb, ub, const = asm.build()
        # separable penalty: the augmented method anchors replicas and the
        # own angle at neighbor snapshots; dual decomposition only keeps a
        # small proximal term so the angle part stays strictly convex
        n_j = len(self.net.idx_rep)
        w_own = rho * n_j if mode == "al" else prox
        w_rep = rho if mode == "al" else prox
        P[self.net.idx_own, self.net.idx_own] += w_own
        for m in self.net.idx_rep:
            idx = self.net.idx_rep[m]
            P[idx, idx] += w_rep
        self.q0, self.b, self.lb, self.ub, self.const = q, b, lb, ub, const
        self.delta = islanded_j.delta_star
        cp, cq, cc = assemble.mg_cost_cap_arrays(
            self.block, self.mg, self.fc, inst.gamma, self.delta, asm.n)
        self._cap_pd = cp
        self.cap_q = cq
        self.cap_const = cc
        self.cap_level = islanded_j.v_star
        self.solver = QpSolver(backend=backend).setup(P, A, cap_P=np.diag(cp))
        self.state = AgentState.zeros(j, sorted(self.net.idx_rep), T)

    def local_objective(self, x: np.ndarray) -> float:
        """f_j at a local solution: discounted microgrid cost plus the
        discounted local share of the transmission cost."""
        disc = assemble.discounts(self.inst.gamma, self.inst.horizon)
        cost = float(0.5 * x @ (self._cap_pd * x) + self.cap_q @ x
                     + self.cap_const)
        for m, idx in self.net.idx_line.items():
            e = self.inst.graph.line(self.state.mg_id, m)
            flow = x[idx]
            cost += float(np.sum(disc * e.cost_weight * flow * flow))
        return cost

    def solve_round(self):
        """Local capped subproblem with the current multipliers and
        snapshots; returns (z, theta_bar_own, theta_bar_rep, v_j)."""
        st = self.state
        q = self.q0.copy()
        if self.mode == "al":
            rho = self._rho
            acc = np.zeros_like(st.own)
            for m in st.neighbors:
                q[self.net.idx_rep[m]] += st.lam[m] - rho * st.snap_own[m]
                acc += st.snap_rep[m]
            q[self.net.idx_own] += -st.lam_own - rho * acc
        else:
            w = self._prox
            for m in st.neighbors:
                q[self.net.idx_rep[m]] += st.lam[m] - w * st.rep[m]
            q[self.net.idx_own] += -st.lam_own - w * st.own
        x, mu, stat = self.solver.solve_capped(
            q, self.b, self.lb, self.ub, self.cap_q, self.cap_const,
            self.cap_level, tol=self.qp_tol, max_iter=self.qp_max_iter,
            warm_mu=st.cap_mu)
        if stat.status != "optimal":
            raise SolverFailureError(
                f"agent {st.mg_id} local solve ended with {stat.status}", stat)
        st.cap_mu = mu
        own_bar = x[self.net.idx_own].copy()
        rep_bar = {m: x[self.net.idx_rep[m]].copy() for m in st.neighbors}
        return x, own_bar, rep_bar


def _build_agents(inst, islanded, mode, rho, prox, qp_tol, qp_max_iter,
                  backend, init_states=None):
    agents = []
    for mg in inst.specs:
        rt = AgentRuntime(inst, mg.id, islanded[mg.id], mode, rho, prox,
                          qp_tol, qp_max_iter, backend=backend)
        if init_states is not None and mg.id in init_states:
            s = init_states[mg.id]
            rt.state = AgentState(
                mg_id=mg.id, neighbors=rt.state.neighbors,
                own=s.own.copy(), rep={m: v.copy() for m, v in s.rep.items()},
                snap_own={m: v.copy() for m, v in s.snap_own.items()},
                snap_rep={m: v.copy() for m, v in s.snap_rep.items()},
                lam={m: v.copy() for m, v in s.lam.items()},
                lam_own=s.lam_own.copy(), cap_mu=s.cap_mu)
        agents.append(rt)
    return agents


def al_round(agents: list[AgentRuntime], bus: MessageBus, rho: float,
             tau: float) -> RoundReport:
    """One synchronous round of the accelerated distributed method:
    parallel local solves, angle relaxation by tau, neighbor exchange,
    snapshot update and dual updates scaled by rho*tau."""
    if not 0.0 < tau < 0.5:
        raise InvalidInputError("tau must lie in the open interval (0, 1/2)")
    if rho <= 0.0:
        raise InvalidInputError("rho must be positive")
    return _round(agents, bus, step=rho * tau, tau=tau)


def dd_round(agents: list[AgentRuntime], bus: MessageBus,
             alpha: float) -> RoundReport:
    """One synchronous round of dual decomposition: parallel local
    solves, direct angle update, neighbor exchange, subgradient dual
    step of size alpha."""
    return _round(agents, bus, step=alpha, tau=None)


def _round(agents, bus, step, tau):
    t0 = time.perf_counter()
    sols = parallel_map(lambda a: a.solve_round(), agents)

    primal = {}
    for rt, (x, own_bar, rep_bar) in zip(agents, sols):
        st = rt.state
        diff2 = float(np.sum((own_bar - st.own) ** 2))
        for m in st.neighbors:
            diff2 += float(np.sum((rep_bar[m] - st.rep[m]) ** 2))
        primal[st.mg_id] = float(np.sqrt(diff2))
        st.z = x
        st.theta_bar = (own_bar, rep_bar)
        if tau is None:  # dual decomposition: no relaxation
            st.own = own_bar.copy()
            st.rep = {m: rep_bar[m].copy() for m in st.neighbors}
        else:
            st.own = st.own + tau * (own_bar - st.own)
            st.rep = {m: st.rep[m] + tau * (rep_bar[m] - st.rep[m])
                      for m in st.neighbors}

    for rt in agents:
        st = rt.state
        for m in st.neighbors:
            bus.send(ConsensusMessage(
                sender=st.mg_id, receiver=m, round=st.nu,
                own_angles=st.own.copy(),
                replica_of_receiver=st.rep[m].copy()))

    dual = {}
    objectives = {}
    for rt in agents:
        st = rt.state
        for m in st.neighbors:
            msg = bus.receive(m, st.mg_id, st.nu)
            st.snap_own[m] = msg.own_angles
            st.snap_rep[m] = msg.replica_of_receiver
        viol2 = 0.0
        agg = np.zeros_like(st.own)
        for m in st.neighbors:
            gap = st.rep[m] - st.snap_own[m]
            viol2 += float(np.sum(gap * gap))
            st.lam[m] = st.lam[m] + step * gap
            agg += st.snap_rep[m] - st.own
        st.lam_own = st.lam_own + step * agg
        dual[st.mg_id] = float(np.sqrt(viol2))
        objectives[st.mg_id] = rt.local_objective(st.z)
        st.nu += 1

    eps = {j: max(primal[j], dual[j]) for j in primal}
    return RoundReport(residuals=eps, primal=primal, dual=dual,
                       objectives=objectives,
                       messages=sum(len(rt.state.neighbors) for rt in agents),
                       wall_time=time.perf_counter() - t0)


def _collapse(inst, agents, iterations, converged, trace, messages):
    T = inst.horizon + 1
    trajs = {}
    mg_costs = {}
    angles = np.zeros((inst.graph.n, T))
    for rt in agents:
        st = rt.state
        angles[st.mg_id - 1] = st.own
    for rt in agents:
        st = rt.state
        reps = {m: angles[m - 1].copy() for m in st.neighbors}
        trajs[st.mg_id] = assemble.extract_trajectory(
            rt.block, rt.mg, st.z, inst.x0[st.mg_id], rt.delta,
            own_angles=st.own, replica_angles=reps)
        mg_costs[st.mg_id] = assemble.trajectory_cost(
            rt.mg, rt.fc, trajs[st.mg_id], inst.gamma)
    disc = assemble.discounts(inst.gamma, inst.horizon)
    lt = 0.0
    for e in inst.graph.edges:
        flow = e.susceptance * (angles[e.a - 1] - angles[e.b - 1])
        lt += float(np.sum(disc * 2.0 * e.cost_weight * flow * flow))
    return ConsensusResult(
        trajectories=trajs, angles=angles, mg_costs=mg_costs,
        transmission_cost=lt, objective=sum(mg_costs.values()) + lt,
        iterations=iterations, converged=converged, residual_trace=trace,
        message_count=messages,
        final_states={rt.state.mg_id: rt.state for rt in agents})


def run_consensus_al(inst: Instance, islanded: dict[int, IslandedSolution],
                     settings: SolverSettings,
                     init_states: dict[int, AgentState] | None = None,
                     backend=None) -> ConsensusResult:
    """Accelerated distributed augmented-Lagrangian solve.

    Starts from zero multipliers, snapshots and angles (or from the
    supplied warm states when receding) and iterates rounds until every
    agent's residual is at or below eps_term, or nu_max rounds elapse
    (the result is then flagged non-converged).
    """
    agents = _build_agents(inst, islanded, "al", settings.rho,
                           settings.dd_prox, settings.qp_tol,
                           settings.qp_max_iter, backend, init_states)
    bus = MessageBus()
    trace = []
    converged = False
    nu = 0
    while nu < settings.nu_max:
        rep = al_round(agents, bus, settings.rho, settings.tau)
        for rt in agents:
            j = rt.state.mg_id
            trace.append((nu, j, rep.primal[j], rep.dual[j],
                          rep.objectives[j]))
        nu += 1
        if max(rep.residuals.values()) <= settings.eps_term:
            converged = True
            break
    return _collapse(inst, agents, nu, converged, trace, bus.sent)


def run_dual_decomposition(inst: Instance,
                           islanded: dict[int, IslandedSolution],
                           settings: SolverSettings,
                           init_states: dict[int, AgentState] | None = None,
                           backend=None) -> ConsensusResult:
    """Dual-decomposition baseline with diminishing step alpha0/sqrt(nu).

    Termination uses the consensus (dual) residual only; the primal
    column of the residual trace still reports the solution change for
    comparability.
    """
    agents = _build_agents(inst, islanded, "dd", settings.rho,
                           settings.dd_prox, settings.qp_tol,
                           settings.qp_max_iter, backend, init_states)
    bus = MessageBus()
    trace = []
    converged = False
    nu = 0
    while nu < settings.nu_max:
        alpha = settings.dd_alpha0 / np.sqrt(nu + 1.0)
        rep = dd_round(agents, bus, alpha)
        for rt in agents:
            j = rt.state.mg_id
            trace.append((nu, j, rep.primal[j], rep.dual[j],
                          rep.objectives[j]))
        nu += 1
        if max(rep.dual.values()) <= settings.eps_term:
            converged = True
            break
    return _collapse(inst, agents, nu, converged, trace, bus.sent)
