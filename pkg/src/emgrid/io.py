"""Scenario and time-series file handling plus CSV result emission.

Scenario files are JSON with four sections: grid (nodes, edges), the
microgrid fleet, solver defaults and initial storage energies. Time
series are CSV with header time_index,mg_id,channel,value_kw where
channel is res:<i> or load:<i>; the table must be dense over the window,
renewable values nonnegative and load values nonpositive.

All emitted CSVs use 9 significant digits and '.' as decimal separator;
the only non-deterministic content is an optional timestamp isolated in
a leading comment line, which readers and comparisons skip.
"""

from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ScenarioValidationError
from .model import (ConventionalGenSpec, DisturbanceSample, GridGraph,
                    LineSpec, MicrogridSpec, PccSpec, ResSpec, StorageSpec,
                    ValidationIssue, validate_scenario)
from .scenario import Scenario, SolverSettings

_FMT = "%.9g"


def _num(x) -> str:
    return _FMT % float(x)


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise InvalidInputError(f"missing field {key!r} in {where}")
    return obj[key]


def load_scenario(path) -> Scenario:
    """Parse and fully validate a scenario file.

    Parse errors carry line/column; validation problems are collected
    and raised together as ScenarioValidationError.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as ex:
        raise InvalidInputError(
            f"{path}: parse error at line {ex.lineno}, column {ex.colno}: "
            f"{ex.msg}") from ex

    grid = _need(raw, "grid", "scenario")
    issues: list[ValidationIssue] = []

    edges = []
    node_count = int(_need(grid, "nodes", "grid"))
    for i, e in enumerate(_need(grid, "edges", "grid")):
        where = f"grid.edges[{i}]"
        try:
            edges.append(LineSpec(
                a=int(_need(e, "a", where)), b=int(_need(e, "b", where)),
                susceptance=float(_need(e, "susceptance", where)),
                p_min=float(_need(e, "p_min", where)),
                p_max=float(_need(e, "p_max", where)),
                cost_weight=float(_need(e, "cost_weight", where))))
        except InvalidInputError as ex:
            if "missing field" in str(ex):
                raise
            issues.append(ValidationIssue(where, str(ex)))
    for e in edges:
        if not (1 <= e.a <= node_count and 1 <= e.b <= node_count):
            issues.append(ValidationIssue(
                "grid", f"unknown node in edge ({e.a},{e.b})"))
    graph = None
    if not issues:
        try:
            graph = GridGraph(n=node_count, edges=tuple(edges))
        except InvalidInputError as ex:
            issues.append(ValidationIssue("grid", str(ex)))

    specs = []
    for i, m in enumerate(_need(raw, "microgrids", "scenario")):
        where = f"microgrids[{i}]"
        try:
            specs.append(MicrogridSpec(
                id=int(_need(m, "id", where)),
                conv=tuple(ConventionalGenSpec(
                    p_min=float(_need(u, "p_min", f"{where}.conv")),
                    p_max=float(_need(u, "p_max", f"{where}.conv")),
                    a=float(_need(u, "a", f"{where}.conv")),
                    a_lin=float(_need(u, "a_lin", f"{where}.conv")),
                    a_quad=float(_need(u, "a_quad", f"{where}.conv")))
                    for u in m.get("conv", [])),
                storage=tuple(StorageSpec(
                    x_min=float(_need(u, "x_min", f"{where}.storage")),
                    x_max=float(_need(u, "x_max", f"{where}.storage")),
                    p_min=float(_need(u, "p_min", f"{where}.storage")),
                    p_max=float(_need(u, "p_max", f"{where}.storage")),
                    a_s=float(_need(u, "a_s", f"{where}.storage")))
                    for u in m.get("storage", [])),
                res=tuple(ResSpec(
                    p_max=float(_need(u, "p_max", f"{where}.res")),
                    a_r=float(_need(u, "a_r", f"{where}.res")))
                    for u in m.get("res", [])),
                loads=int(m.get("loads", 0)),
                pcc=PccSpec(
                    a_p=float(_need(_need(m, "pcc", where), "a_p", where)),
                    a_abs=float(m["pcc"]["a_abs"]))))
        except InvalidInputError as ex:
            if "missing field" in str(ex):
                raise
            issues.append(ValidationIssue(where, str(ex)))

    solver = raw.get("solver", {})
    try:
        settings = SolverSettings(**{k: v for k, v in solver.items()})
    except (TypeError, InvalidInputError) as ex:
        issues.append(ValidationIssue("solver", str(ex)))
        settings = SolverSettings()

    x0 = {}
    for key, vals in raw.get("initial_storage", {}).items():
        x0[int(key)] = np.asarray(vals, dtype=float)

    if graph is not None and not issues:
        issues.extend(validate_scenario(specs, graph, x0=x0))
    if issues:
        raise ScenarioValidationError(issues)
    return Scenario(specs=tuple(specs), graph=graph, x0=x0,
                    settings=settings)


def write_scenario(path, scenario: Scenario):
    raw = {
        "grid": {
            "nodes": scenario.graph.n,
            "edges": [{"a": e.a, "b": e.b, "susceptance": e.susceptance,
                       "p_min": e.p_min, "p_max": e.p_max,
                       "cost_weight": e.cost_weight}
                      for e in scenario.graph.edges],
        },
        "microgrids": [
            {"id": mg.id,
             "conv": [{"p_min": u.p_min, "p_max": u.p_max, "a": u.a,
                       "a_lin": u.a_lin, "a_quad": u.a_quad}
                      for u in mg.conv],
             "storage": [{"x_min": u.x_min, "x_max": u.x_max,
                          "p_min": u.p_min, "p_max": u.p_max, "a_s": u.a_s}
                         for u in mg.storage],
             "res": [{"p_max": u.p_max, "a_r": u.a_r} for u in mg.res],
             "loads": mg.loads,
             "pcc": {"a_p": mg.pcc.a_p, "a_abs": mg.pcc.a_abs}}
            for mg in scenario.specs],
        "solver": {
            "rho": scenario.settings.rho, "tau": scenario.settings.tau,
            "eps_term": scenario.settings.eps_term,
            "nu_max": scenario.settings.nu_max,
            "gamma": scenario.settings.gamma, "Ts": scenario.settings.Ts,
            "H": scenario.settings.H,
            "dd_alpha0": scenario.settings.dd_alpha0,
            "dd_prox": scenario.settings.dd_prox,
        },
        "initial_storage": {str(j): list(map(float, v))
                            for j, v in scenario.x0.items()},
    }
    Path(path).write_text(json.dumps(raw, indent=2) + "\n")


def scenario_equal(a: Scenario, b: Scenario) -> bool:
    if a.specs != b.specs or a.graph != b.graph:
        return False
    if a.settings != b.settings:
        return False
    if sorted(a.x0) != sorted(b.x0):
        return False
    return all(np.array_equal(a.x0[j], b.x0[j]) for j in a.x0)


# ---------------------------------------------------------------------------
# time series
# ---------------------------------------------------------------------------

def load_series(path, specs) -> list[DisturbanceSample]:
    """Read a disturbance trace and validate density and sign conventions.

    All problems are collected and raised together so a broken file is
    diagnosed in one pass.
    """
    path = Path(path)
    by_id = {mg.id: mg for mg in specs}
    table: dict[int, dict[int, dict[str, float]]] = {}
    issues: list[ValidationIssue] = []
    with path.open(newline="") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != \
                ["time_index", "mg_id", "channel", "value_kw"]:
            raise InvalidInputError(
                f"{path}: expected header time_index,mg_id,channel,value_kw")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, j, ch, val = int(row[0]), int(row[1]), row[2].strip(), \
                    float(row[3])
            except (ValueError, IndexError):
                issues.append(ValidationIssue(f"line {lineno}", "bad row"))
                continue
            table.setdefault(t, {}).setdefault(j, {})[ch] = val

    if not table:
        raise InvalidInputError(f"{path}: empty series")
    steps = sorted(table)
    if steps != list(range(len(steps))):
        issues.append(ValidationIssue("series", "time_index not dense from 0"))

    samples = []
    for t in steps:
        res = {}
        load = {}
        for j, mg in by_id.items():
            chans = table.get(t, {}).get(j, {})
            rvals = np.zeros(mg.n_res)
            lvals = np.zeros(mg.loads)
            for i in range(mg.n_res):
                key = f"res:{i}"
                if key not in chans:
                    issues.append(ValidationIssue(
                        f"step {t} mg {j}", f"missing channel {key}"))
                    continue
                v = chans[key]
                if v < 0.0:
                    issues.append(ValidationIssue(
                        f"step {t} mg {j} {key}", "res sign (must be >= 0)"))
                rvals[i] = max(v, 0.0)
            for i in range(mg.loads):
                key = f"load:{i}"
                if key not in chans:
                    issues.append(ValidationIssue(
                        f"step {t} mg {j}", f"missing channel {key}"))
                    continue
                v = chans[key]
                if v > 0.0:
                    issues.append(ValidationIssue(
                        f"step {t} mg {j} {key}", "load sign (must be <= 0)"))
                lvals[i] = min(v, 0.0)
            res[j] = rvals
            load[j] = lvals
        samples.append(DisturbanceSample(res=res, load=load))
    if issues:
        raise ScenarioValidationError(issues)
    return samples


def write_series(path, specs, samples):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_index", "mg_id", "channel", "value_kw"])
        for t, smp in enumerate(samples):
            for mg in specs:
                res, load = smp.for_mg(mg.id)
                for i, v in enumerate(res):
                    w.writerow([t, mg.id, f"res:{i}", _num(v)])
                for i, v in enumerate(load):
                    w.writerow([t, mg.id, f"load:{i}", _num(v)])


# ---------------------------------------------------------------------------
# result emission
# ---------------------------------------------------------------------------

def _open_csv(path, stamp: bool):
    fh = Path(path).open("w", newline="")
    if stamp:
        fh.write("# generated %s\n"
                 % datetime.now(timezone.utc).isoformat(timespec="seconds"))
    return fh


def write_results_csv(path, result, stamp: bool = True):
    """Per-step unit records of one closed-loop run."""
    with _open_csv(path, stamp) as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mg", "unit", "planned_kw", "realized_kw",
                    "storage_kwh", "pcc_kw", "imbalance_kw"])
        for (k, j, unit, plan, real, energy, pcc, imb) in result.rows:
            w.writerow([k, j, unit, _num(plan), _num(real),
                        _num(energy) if energy != "" else "",
                        _num(pcc), _num(imb)])


def write_summary_csv(path, results, stamp: bool = True):
    """Controller comparison summary: KPI, costs, iteration statistics."""
    with _open_csv(path, stamp) as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "mg", "kpi_r_percent", "closed_loop_cost",
                    "iterations_avg", "iterations_max", "nonconverged_steps"])
        for r in results:
            its = r.iterations if r.iterations else [0]
            for j in r.mg_ids:
                w.writerow([r.controller, j, _num(r.kpi[j]), _num(r.cost[j]),
                            "", "", ""])
            w.writerow([r.controller, "overall", _num(r.kpi_overall),
                        _num(r.cost_overall),
                        _num(float(np.mean(its))), int(np.max(its)),
                        len(r.nonconverged_steps)])


def write_trace_csv(path, rows, stamp: bool = True, with_step: bool = False):
    """Residual trace: iteration, agent id, primal and dual residuals,
    local objective; a leading step column is added for closed-loop runs."""
    with _open_csv(path, stamp) as fh:
        w = csv.writer(fh)
        head = ["iteration", "mg", "primal_residual", "dual_residual",
                "local_objective"]
        if with_step:
            head = ["step"] + head
        w.writerow(head)
        for row in rows:
            if with_step:
                k, nu, j, pr, du, obj = row
                w.writerow([k, nu, j, _num(pr), _num(du), _num(obj)])
            else:
                nu, j, pr, du, obj = row
                w.writerow([nu, j, _num(pr), _num(du), _num(obj)])
