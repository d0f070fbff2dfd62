"""Domain model for networks of interconnected microgrids.

Units are fixed package-wide and converted at ingestion:
powers in kW, energies in kWh, time in hours, phase angles in rad,
line susceptances in kW/rad, cost weights in monetary units per the
matching power/energy unit.

Sign conventions: load power is nonpositive (demand), renewable
availability is nonnegative, storage power is positive when
discharging, and the coupling-point power balances the microgrid via

    p_pcc + sum(unit powers) + sum(load powers) = 0.

A microgrid exporting power therefore has negative p_pcc.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError


def _freeze(a):
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# unit specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConventionalGenSpec:
    """Dispatchable generator with an on/off switch and quadratic fuel cost."""

    p_min: float  # kW, lower output limit while switched on
    p_max: float  # kW, upper output limit while switched on
    a: float      # switch-on cost per step
    a_lin: float  # linear fuel cost, per kW
    a_quad: float  # quadratic fuel cost, per kW^2

    def __post_init__(self):
        if not 0.0 <= self.p_min <= self.p_max:
            raise InvalidInputError(
                f"conventional limits need 0 <= p_min <= p_max, got "
                f"[{self.p_min}, {self.p_max}]")
        if min(self.a, self.a_lin, self.a_quad) <= 0.0:
            raise InvalidInputError("conventional cost weights must be > 0")


@dataclass(frozen=True)
class StorageSpec:
    """Battery storage; positive power discharges, negative power charges."""

    x_min: float  # kWh
    x_max: float  # kWh
    p_min: float  # kW, typically negative (max charge rate)
    p_max: float  # kW
    a_s: float    # wear cost weight, per kW^2

    def __post_init__(self):
        if not (0.0 <= self.x_min <= self.x_max):
            raise InvalidInputError("storage energy bounds need 0 <= x_min <= x_max")
        if self.p_min > self.p_max:
            raise InvalidInputError("storage power bounds need p_min <= p_max")
        if self.a_s <= 0.0:
            raise InvalidInputError("storage wear weight must be > 0")


@dataclass(frozen=True)
class ResSpec:
    """Renewable unit; infeed is curtailable below the available power."""

    p_max: float  # kW, hardware limit
    a_r: float    # curtailment penalty weight, per kW^2

    def __post_init__(self):
        if self.p_max < 0.0:
            raise InvalidInputError("renewable p_max must be >= 0")
        if self.a_r <= 0.0:
            raise InvalidInputError("curtailment weight must be > 0")


@dataclass(frozen=True)
class PccSpec:
    """Trading terms at the point of common coupling."""

    a_p: float    # price per kW exchanged (signed term)
    a_abs: float  # trading fee per kW of |exchange|

    def __post_init__(self):
        if self.a_p <= 0.0 or self.a_abs <= 0.0:
            raise InvalidInputError("pcc weights must be > 0")


@dataclass(frozen=True)
class MicrogridSpec:
    """One microgrid: unit fleet, load channel count and trading terms.

    Unit powers are ordered conventionals, then storages, then renewables
    throughout the package; the coupling power comes last in stacked
    vectors, matching :func:`feasible_power_set` and :func:`mg_stage_cost`.
    """

    id: int
    conv: tuple[ConventionalGenSpec, ...]
    storage: tuple[StorageSpec, ...]
    res: tuple[ResSpec, ...]
    loads: int
    pcc: PccSpec

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(self.conv))
        object.__setattr__(self, "storage", tuple(self.storage))
        object.__setattr__(self, "res", tuple(self.res))
        if self.id < 1:
            raise InvalidInputError("microgrid ids are 1-based positive integers")
        if self.loads < 0:
            raise InvalidInputError("load count must be >= 0")

    @property
    def n_conv(self) -> int:
        return len(self.conv)

    @property
    def n_storage(self) -> int:
        return len(self.storage)

    @property
    def n_res(self) -> int:
        return len(self.res)

    @property
    def n_units(self) -> int:
        return self.n_conv + self.n_storage + self.n_res


@dataclass(frozen=True)
class LineSpec:
    """Transmission line between microgrids `a` and `b` (unordered pair)."""

    a: int
    b: int
    susceptance: float  # kW/rad
    p_min: float        # kW, must admit zero flow
    p_max: float        # kW
    cost_weight: float  # per kW^2, per direction of the double sum

    def __post_init__(self):
        if self.a == self.b:
            raise InvalidInputError("self-loop line")
        if self.a > self.b:
            object.__setattr__(self, "a", self.b)
            object.__setattr__(self, "b", self.a)
        if self.susceptance <= 0.0:
            raise InvalidInputError("nonpositive susceptance")
        if not (self.p_min <= 0.0 <= self.p_max):
            raise InvalidInputError("line limits must straddle zero flow")
        if self.cost_weight <= 0.0:
            raise InvalidInputError("line cost weight must be > 0")


@dataclass(frozen=True)
class GridGraph:
    """Undirected connected graph of microgrids with line data on edges."""

    n: int
    edges: tuple[LineSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        seen = set()
        for e in self.edges:
            if not (1 <= e.a <= self.n and 1 <= e.b <= self.n):
                raise InvalidInputError(f"edge ({e.a},{e.b}) references unknown node")
            key = (e.a, e.b)
            if key in seen:
                raise InvalidInputError(f"duplicate edge ({e.a},{e.b})")
            seen.add(key)
        if self.n >= 1 and not self._connected():
            raise InvalidInputError("grid graph must be connected")

    def _connected(self) -> bool:
        if self.n == 1:
            return True
        adj = {j: set() for j in range(1, self.n + 1)}
        for e in self.edges:
            adj[e.a].add(e.b)
            adj[e.b].add(e.a)
        stack, seen = [1], {1}
        while stack:
            j = stack.pop()
            for m in adj[j]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        return len(seen) == self.n

    def neighbors(self, j: int) -> tuple[int, ...]:
        """Neighbor ids of node `j`, ascending."""
        if not 1 <= j <= self.n:
            raise InvalidInputError(f"unknown node {j}")
        out = []
        for e in self.edges:
            if e.a == j:
                out.append(e.b)
            elif e.b == j:
                out.append(e.a)
        return tuple(sorted(out))

    def line(self, j: int, m: int) -> LineSpec:
        a, b = min(j, m), max(j, m)
        for e in self.edges:
            if (e.a, e.b) == (a, b):
                return e
        raise InvalidInputError(f"no line between {j} and {m}")


@dataclass(frozen=True)
class DisturbanceSample:
    """Exogenous inputs at one time instant for every microgrid.

    `res[j]` holds available renewable power per unit (>= 0) and
    `load[j]` the load powers (<= 0) of microgrid `j`.
    """

    res: dict[int, np.ndarray]
    load: dict[int, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "res", {j: _freeze(v) for j, v in self.res.items()})
        object.__setattr__(self, "load", {j: _freeze(v) for j, v in self.load.items()})
        for j, v in self.res.items():
            if np.any(v < 0.0):
                raise InvalidInputError(f"negative renewable availability at mg {j}")
        for j, v in self.load.items():
            if np.any(v > 0.0):
                raise InvalidInputError(f"positive load power at mg {j} (loads are <= 0)")

    def for_mg(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        return self.res.get(j, np.zeros(0)), self.load.get(j, np.zeros(0))


@dataclass(frozen=True)
class Trajectory:
    """Horizon-indexed decisions of one microgrid.

    `p` stacks unit powers (conv, storage, res order) as an
    (n_units, H+1) array; `x` holds storage energies including the
    measured initial state, shape (n_storage, H+2); `delta` is the
    binary switch schedule. Phase angles are present only for
    network-coupled solutions: `own_angles` is this microgrid's bus
    angle and `replica_angles` maps a neighbor id to the local copy
    of that neighbor's angle.
    """

    horizon: int
    p: np.ndarray
    p_pcc: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    own_angles: Optional[np.ndarray] = None
    replica_angles: Optional[dict[int, np.ndarray]] = None

    def __post_init__(self):
        T = self.horizon + 1
        object.__setattr__(self, "p", _freeze(self.p))
        object.__setattr__(self, "p_pcc", _freeze(self.p_pcc))
        object.__setattr__(self, "delta", _freeze(self.delta))
        object.__setattr__(self, "x", _freeze(self.x))
        if self.p.ndim != 2 or self.p.shape[1] != T:
            raise InvalidInputError("unit power array must be (n_units, H+1)")
        if self.p_pcc.shape != (T,):
            raise InvalidInputError("pcc power must be a length H+1 vector")
        if self.delta.ndim != 2 or self.delta.shape[1] != T:
            raise InvalidInputError("switch schedule must be (n_conv, H+1)")
        if self.x.ndim != 2 or (self.x.size and self.x.shape[1] != T + 1):
            raise InvalidInputError("storage energies must be (n_storage, H+2)")
        if self.delta.size and not np.all((self.delta == 0.0) | (self.delta == 1.0)):
            raise InvalidInputError("switch schedule must be binary")
        if self.own_angles is not None:
            object.__setattr__(self, "own_angles", _freeze(self.own_angles))
            if self.own_angles.shape != (T,):
                raise InvalidInputError("own angles must be a length H+1 vector")
        if self.replica_angles is not None:
            object.__setattr__(
                self, "replica_angles",
                {m: _freeze(v) for m, v in self.replica_angles.items()})


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def storage_step(x: float, p: float, Ts: float) -> float:
    """Advance a storage energy one step: discharging at p kW for Ts hours."""
    if Ts <= 0.0:
        raise InvalidInputError("sampling time must be > 0")
    return x - Ts * p


@dataclass(frozen=True)
class PowerSet:
    """Linear description of one microgrid's feasible powers at one step.

    Variables are stacked [conv..., storage..., res..., p_pcc]; the box is
    (lb, ub) and the single balance equality reads
    sum(variables) == balance_rhs (all coefficients are one).
    """

    lb: np.ndarray
    ub: np.ndarray
    balance_rhs: float

    def __post_init__(self):
        object.__setattr__(self, "lb", _freeze(self.lb))
        object.__setattr__(self, "ub", _freeze(self.ub))

    def contains(self, z: np.ndarray, tol: float = 1e-9) -> bool:
        z = np.asarray(z, dtype=float)
        if z.shape != self.lb.shape:
            raise InvalidInputError("dimension mismatch in feasibility check")
        return bool(
            np.all(z >= self.lb - tol)
            and np.all(z <= self.ub + tol)
            and abs(z.sum() - self.balance_rhs) <= tol * max(1.0, abs(self.balance_rhs))
        )


def feasible_power_set(mg: MicrogridSpec, w_hat: DisturbanceSample,
                       delta: np.ndarray) -> PowerSet:
    """Box-plus-balance description of feasible unit and coupling powers.

    `delta` fixes the conventional switches, scaling their output box;
    the renewable box is capped by the forecast availability; the balance
    right-hand side collects the (negated) load forecast.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (mg.n_conv,):
        raise InvalidInputError(
            f"switch vector has length {delta.shape}, expected ({mg.n_conv},)")
    res_avail, load = w_hat.for_mg(mg.id)
    if res_avail.shape != (mg.n_res,) or load.shape != (mg.loads,):
        raise InvalidInputError("disturbance sample does not match the microgrid")

    g = mg.n_units
    lb = np.empty(g + 1)
    ub = np.empty(g + 1)
    i = 0
    for c, u in enumerate(mg.conv):
        lb[i], ub[i] = u.p_min * delta[c], u.p_max * delta[c]
        i += 1
    for u in mg.storage:
        lb[i], ub[i] = u.p_min, u.p_max
        i += 1
    for r, u in enumerate(mg.res):
        lb[i], ub[i] = 0.0, min(u.p_max, res_avail[r])
        i += 1
    lb[g], ub[g] = -np.inf, np.inf  # p_pcc, constrained elsewhere
    return PowerSet(lb=lb, ub=ub, balance_rhs=-float(load.sum()))


def mg_stage_cost(mg: MicrogridSpec, z: np.ndarray, delta: np.ndarray,
                  w_hat: DisturbanceSample) -> float:
    """Single-step operating cost of one microgrid.

    `z` stacks [conv..., storage..., res..., p_pcc]. The conventional
    term adds the switch-on cost plus linear and quadratic fuel cost,
    renewables pay for curtailment below availability, storages pay
    quadratic wear, and the coupling term is a signed price plus a fee
    on the traded magnitude.
    """
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if z.shape != (mg.n_units + 1,) or delta.shape != (mg.n_conv,):
        raise InvalidInputError("inconsistent dimensions in stage cost")
    res_avail, _ = w_hat.for_mg(mg.id)

    cost = 0.0
    i = 0
    for c, u in enumerate(mg.conv):
        cost += u.a * delta[c] + u.a_lin * z[i] + u.a_quad * z[i] ** 2
        i += 1
    for u in mg.storage:
        cost += u.a_s * z[i] ** 2
        i += 1
    for r, u in enumerate(mg.res):
        cost += u.a_r * (z[i] - res_avail[r]) ** 2
        i += 1
    p_pcc = z[i]
    cost += mg.pcc.a_p * p_pcc + mg.pcc.a_abs * abs(p_pcc)
    return float(cost)


def mg_stage_cost_grad(mg: MicrogridSpec, z: np.ndarray, delta: np.ndarray,
                       w_hat: DisturbanceSample) -> np.ndarray:
    """Gradient of :func:`mg_stage_cost` in z.

    The trading-fee term is nonsmooth at p_pcc = 0; there the
    subgradient 0 is returned.
    """
    z = np.asarray(z, dtype=float)
    res_avail, _ = w_hat.for_mg(mg.id)
    g = np.empty(mg.n_units + 1)
    i = 0
    for u in mg.conv:
        g[i] = u.a_lin + 2.0 * u.a_quad * z[i]
        i += 1
    for u in mg.storage:
        g[i] = 2.0 * u.a_s * z[i]
        i += 1
    for r, u in enumerate(mg.res):
        g[i] = 2.0 * u.a_r * (z[i] - res_avail[r])
        i += 1
    g[i] = mg.pcc.a_p + mg.pcc.a_abs * np.sign(z[i])
    return g


def line_power(y: float, theta_j: float, theta_m: float) -> float:
    """DC power flow on one line; antisymmetric in the endpoint angles."""
    return y * (theta_j - theta_m)


def pcc_from_angles(graph: GridGraph, j: int, theta: np.ndarray) -> float:
    """Coupling power of node `j` implied by all bus angles at one step."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (graph.n,):
        raise InvalidInputError("need one angle per node")
    if not 1 <= j <= graph.n:
        raise InvalidInputError(f"unknown node {j}")
    total = 0.0
    for m in graph.neighbors(j):
        e = graph.line(j, m)
        total += line_power(e.susceptance, theta[j - 1], theta[m - 1])
    return total


def transmission_cost(graph: GridGraph, theta: np.ndarray) -> float:
    """Quadratic network transfer cost at one step.

    Each undirected line is counted once per direction, so a line with
    weight a contributes 2 * a * flow^2.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (graph.n,):
        raise InvalidInputError("need one angle per node")
    cost = 0.0
    for e in graph.edges:
        flow = line_power(e.susceptance, theta[e.a - 1], theta[e.b - 1])
        cost += 2.0 * e.cost_weight * flow ** 2
    return float(cost)


def transmission_cost_grad(graph: GridGraph, theta: np.ndarray) -> np.ndarray:
    """Gradient of :func:`transmission_cost` in the bus angles."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(graph.n)
    for e in graph.edges:
        flow = line_power(e.susceptance, theta[e.a - 1], theta[e.b - 1])
        d = 4.0 * e.cost_weight * flow * e.susceptance
        g[e.a - 1] += d
        g[e.b - 1] -= d
    return g


# ---------------------------------------------------------------------------
# scenario validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationIssue:
    where: str
    message: str

    def __str__(self):
        return f"{self.where}: {self.message}"


def validate_scenario(specs, graph, series=None, x0=None) -> list[ValidationIssue]:
    """Cross-check microgrid specs, grid graph and optional time series.

    Returns an empty list when everything is consistent; never raises for
    data problems. Individual spec constructors enforce their own field
    invariants, so this focuses on cross-object consistency.
    """
    issues: list[ValidationIssue] = []

    ids = [mg.id for mg in specs]
    if sorted(ids) != list(range(1, len(specs) + 1)):
        issues.append(ValidationIssue("microgrids", "ids must be exactly 1..n"))
    if graph.n != len(specs):
        issues.append(ValidationIssue(
            "grid", f"graph has {graph.n} nodes but {len(specs)} microgrids given"))

    by_id = {mg.id: mg for mg in specs}

    if x0 is not None:
        for j, vals in x0.items():
            mg = by_id.get(j)
            if mg is None:
                issues.append(ValidationIssue(f"initial_storage[{j}]", "unknown microgrid"))
                continue
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (mg.n_storage,):
                issues.append(ValidationIssue(
                    f"initial_storage[{j}]",
                    f"expected {mg.n_storage} values, got {vals.shape}"))
                continue
            for s, u in enumerate(mg.storage):
                if not (u.x_min - 1e-9 <= vals[s] <= u.x_max + 1e-9):
                    issues.append(ValidationIssue(
                        f"initial_storage[{j}][{s}]",
                        f"energy {vals[s]} outside [{u.x_min}, {u.x_max}]"))

    if series is not None:
        for k, sample in enumerate(series):
            for j, mg in by_id.items():
                res, load = sample.for_mg(j)
                if res.shape != (mg.n_res,):
                    issues.append(ValidationIssue(
                        f"series[{k}] mg {j}", "renewable channel count mismatch"))
                if load.shape != (mg.loads,):
                    issues.append(ValidationIssue(
                        f"series[{k}] mg {j}", "load channel count mismatch"))
    return issues
