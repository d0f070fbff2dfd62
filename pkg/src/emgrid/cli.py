"""Command-line entry point.

Subcommands: validate (scenario lint), solve (one MPC instant),
simulate (closed loop), compare (all controllers side by side).
Exit codes: 0 success, 1 solver non-convergence, 2 input errors.
Worker count is capped by the EMGRID_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import io as eio
from ._parallel import parallel_map
from .central import solve_central_convex
from .consensus import run_consensus_al, run_dual_decomposition
from .errors import InvalidInputError, ScenarioValidationError, \
    SolverFailureError
from .islanded import solve_islanded
from .scenario import make_instance
from .simulate import CONTROLLERS, closed_loop_run, persistence_forecast


def _parser():
    p = argparse.ArgumentParser(
        prog="emgrid",
        description="Two-stage MPC energy management for interconnected "
                    "microgrids")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, series=True):
        sp.add_argument("--scenario", required=True, help="scenario JSON")
        if series:
            sp.add_argument("--series", required=True,
                            help="disturbance trace CSV")
        sp.add_argument("--rho", type=float, help="consensus penalty")
        sp.add_argument("--tau", type=float, help="consensus relaxation step")
        sp.add_argument("--eps-term", type=float, dest="eps_term",
                        help="consensus termination residual")
        sp.add_argument("--nu-max", type=int, dest="nu_max",
                        help="consensus iteration cap")
        sp.add_argument("--gamma", type=float, help="cost discount factor")

    sp = sub.add_parser("validate", help="lint a scenario (and series)")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--series")

    sp = sub.add_parser("solve", help="solve one MPC instant")
    common(sp)
    sp.add_argument("--controller", required=True, choices=CONTROLLERS)
    sp.add_argument("--step", type=int, default=1,
                    help="sampling instant (forecast uses step-1)")
    sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("simulate", help="closed-loop simulation")
    common(sp)
    sp.add_argument("--controller", required=True, choices=CONTROLLERS)
    sp.add_argument("--steps", type=int, required=True, help="steps M")
    sp.add_argument("--out", default=".", help="output directory")

    sp = sub.add_parser("compare", help="run every controller, summarize")
    common(sp)
    sp.add_argument("--steps", type=int, required=True, help="steps M")
    sp.add_argument("--out", default=".", help="output directory")
    return p


def _load(args, need_series=True):
    scenario = eio.load_scenario(args.scenario)
    overrides = {k: getattr(args, k) for k in
                 ("rho", "tau", "eps_term", "nu_max", "gamma")
                 if getattr(args, k, None) is not None}
    if overrides:
        scenario = scenario.with_settings(**overrides)
    series = None
    if need_series:
        series = eio.load_series(args.series, scenario.specs)
    return scenario, series


def _cmd_validate(args) -> int:
    try:
        scenario = eio.load_scenario(args.scenario)
        if args.series:
            eio.load_series(args.series, scenario.specs)
    except ScenarioValidationError as ex:
        for issue in ex.issues:
            print(f"violation: {issue}", file=sys.stderr)
        return 2
    print(f"ok: {len(scenario.specs)} microgrids, "
          f"{len(scenario.graph.edges)} lines")
    return 0


def _write_solution_csv(path, trajectories, islanded):
    with eio._open_csv(path, stamp=True) as fh:
        w = csv.writer(fh)
        w.writerow(["mg", "name", "h", "value"])
        for j in sorted(trajectories):
            traj = trajectories[j]
            nc = traj.delta.shape[0]
            ns = traj.x.shape[0]
            for h in range(traj.horizon + 1):
                for c in range(nc):
                    w.writerow([j, f"conv:{c}", h, eio._num(traj.p[c, h])])
                    w.writerow([j, f"delta:{c}", h,
                                eio._num(traj.delta[c, h])])
                for s in range(ns):
                    w.writerow([j, f"storage:{s}", h,
                                eio._num(traj.p[nc + s, h])])
                    w.writerow([j, f"x:{s}", h, eio._num(traj.x[s, h + 1])])
                for r in range(traj.p.shape[0] - nc - ns):
                    w.writerow([j, f"res:{r}", h,
                                eio._num(traj.p[nc + ns + r, h])])
                w.writerow([j, "pcc", h, eio._num(traj.p_pcc[h])])
            w.writerow([j, "islanded_cost", "", eio._num(islanded[j].v_star)])


def _cmd_solve(args) -> int:
    scenario, series = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    st = scenario.settings
    samples = persistence_forecast(series, args.step, st.H)
    inst = make_instance(scenario, samples)

    isl_list = parallel_map(
        lambda mg: solve_islanded(mg, inst.forecasts[mg.id],
                                  scenario.x0[mg.id], st.gamma, st.Ts,
                                  tol=st.qp_tol), scenario.specs)
    islanded = {}
    for mg, sol in zip(scenario.specs, isl_list):
        if sol is None:
            print(f"error: islanded problem infeasible for microgrid "
                  f"{mg.id}", file=sys.stderr)
            return 1
        islanded[mg.id] = sol

    converged = True
    if args.controller == "islanded":
        trajs = {j: islanded[j].z_star for j in islanded}
    elif args.controller == "central":
        cen = solve_central_convex(inst, islanded, tol=st.qp_tol)
        trajs = cen.trajectories
    else:
        runner = run_consensus_al if args.controller == "distributed" \
            else run_dual_decomposition
        res = runner(inst, islanded, st)
        trajs = res.trajectories
        converged = res.converged
        eio.write_trace_csv(out / f"trace_{args.controller}.csv",
                            res.residual_trace)
        print(f"{args.controller}: {res.iterations} iterations, "
              f"converged={res.converged}, objective={res.objective:.6g}")
    _write_solution_csv(out / f"solution_{args.controller}.csv", trajs,
                        islanded)
    return 0 if converged else 1


def _run_controller(scenario, series, controller, steps, out: Path):
    result = closed_loop_run(scenario, series, controller, steps)
    eio.write_results_csv(out / f"results_{controller}.csv", result)
    if result.residual_trace:
        eio.write_trace_csv(out / f"trace_{controller}.csv",
                            result.residual_trace, with_step=True)
    return result


def _cmd_simulate(args) -> int:
    scenario, series = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = _run_controller(scenario, series, args.controller, args.steps,
                             out)
    eio.write_summary_csv(out / f"summary_{args.controller}.csv", [result])
    print(f"{args.controller}: cost={result.cost_overall:.6g} "
          f"kpi={result.kpi_overall:.2f}%"
          + (f" nonconverged_steps={len(result.nonconverged_steps)}"
             if result.nonconverged_steps else ""))
    return 1 if result.nonconverged_steps else 0


def _cmd_compare(args) -> int:
    scenario, series = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = [_run_controller(scenario, series, c, args.steps, out)
               for c in CONTROLLERS]
    eio.write_summary_csv(out / "summary.csv", results)
    for r in results:
        its = r.iterations if r.iterations else [0]
        print(f"{r.controller:12s} cost={r.cost_overall:12.6g} "
              f"kpi={r.kpi_overall:6.2f}% iters_avg={np.mean(its):8.1f} "
              f"iters_max={np.max(its):5d}")
    return 1 if any(r.nonconverged_steps for r in results) else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "compare":
            return _cmd_compare(args)
    except ScenarioValidationError as ex:
        for issue in ex.issues:
            print(f"violation: {issue}", file=sys.stderr)
        return 2
    except InvalidInputError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2
    except SolverFailureError as ex:
        print(f"solver failure: {ex}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
