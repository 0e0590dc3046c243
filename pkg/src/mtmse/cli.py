"""Command line front end.

    mtmse validate SCENARIO
    mtmse solve SCENARIO --mode {static,finite,steady} [--out-dir DIR]
    mtmse simulate SCENARIO [--strategies mtmse,mmse,ckf] [--paths N] [--seed S]
    mtmse reproduce --name {two-agent,uav,platoon} [--lambda-grid 0.1,1,10]
    mtmse scenario NAME            # print a built-in scenario file

Exit codes: 0 success, 1 failed assumptions or solver error, 2 malformed input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines
from .estimator_static import GainSystemError, innovation_model, optimal_static_cost, solve_team_gains, team_cost
from .filter import ConvergenceError, centralized_model, gain_schedule, mmse_schedule, steady_state
from .graph import GraphError, build_info_structure, build_local_observation_model
from .model import DimensionError, validate
from .scenario import (
    BUILTIN,
    ScenarioError,
    gains_document,
    load_scenario,
    static_joint_model,
    two_agent_scenario,
    write_gains,
)

log = logging.getLogger("mtmse")

EXIT_OK, EXIT_INVALID, EXIT_INPUT = 0, 1, 2
STRATEGIES = ("mtmse", "mmse", "ckf")


def fmt(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return "" if value is None else str(value)


def write_csv(rows: list[dict], columns: list[str], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _info(scenario):
    system = scenario.system
    if system.n == 1 and (scenario.graph is None or scenario.graph.n == 1):
        return centralized_model(system)
    if scenario.graph is None:
        raise ScenarioError("a communication graph is required", "graph")
    if scenario.graph.n != system.n:
        raise ScenarioError(f"graph has {scenario.graph.n} nodes, system has {system.n} agents", "graph.n")
    info = build_info_structure(scenario.graph)
    return info, build_local_observation_model(info, system)


def _load_checked(path):
    scenario = load_scenario(path)
    report = validate(scenario.system, scenario.cost)
    return scenario, report


def cmd_validate(args) -> int:
    scenario, report = _load_checked(args.scenario)
    print(report.format())
    if scenario.graph is not None and scenario.system.n > 1:
        info, _ = _info(scenario)
        print(f"graph: strongly connected, weighted diameter {info.tau_star}")
    return EXIT_OK if report.passed else EXIT_INVALID


def _mmse_static(inn, cost):
    F = []
    for i in range(inn.n):
        S_ii = inn.sigma_hat[i][i]
        F.append(cost.L_blocks[i] @ np.linalg.solve(S_ii, inn.theta_hat[i].T).T)
    return F


def cmd_solve(args) -> int:
    scenario, report = _load_checked(args.scenario)
    if not report.passed:
        print(report.format(), file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cost, system = scenario.cost, scenario.system
    if args.mode == "static":
        joint = static_joint_model(scenario)
        inn = innovation_model(joint)
        gains = solve_team_gains(inn, cost)
        J = optimal_static_cost(inn, cost, inn.P0, gains)
        J_mmse = team_cost(_mmse_static(inn, cost), inn.sigma_hat, inn.theta_hat, cost, inn.P0)
        dims = {"F_shapes": [[list(f.shape) for f in gains.F]]}
        doc = gains_document("static", [], [gains.F], dims, {"x0_map": inn.x0_map.tolist(),
                                                              "y_maps": [m.tolist() for m in inn.y_maps]})
        rows = [{"J_star": J, "J_mmse": J_mmse, "residual": gains.residual}]
        columns = ["J_star", "J_mmse", "residual"]
    elif args.mode == "finite":
        info, lom = _info(scenario)
        T = args.horizon or scenario.horizon
        sched = gain_schedule(system, cost, info, lom, T)
        mm = mmse_schedule(system, cost, info, lom, T)
        dims = {"tau_star": info.tau_star, "entries": [[list(e) for e in ent] for ent in info.entries],
                "F_shapes": [[list(f.shape) for f in step] for step in sched.F]}
        doc = gains_document("finite", sched.K, sched.F, dims)
        cum, cum_m = np.cumsum(sched.step_cost), np.cumsum(mm.step_cost)
        rows = [{"t": t + 1, "J_step": sched.step_cost[t], "J_cumulative": cum[t],
                 "J_mmse_step": mm.step_cost[t], "J_mmse_cumulative": cum_m[t], "residual": sched.residuals[t]}
                for t in range(T)]
        columns = ["t", "J_step", "J_cumulative", "J_mmse_step", "J_mmse_cumulative", "residual"]
    else:
        info, lom = _info(scenario)
        ss = steady_state(system, cost, info, lom)
        dims = {"tau_star": info.tau_star, "entries": [[list(e) for e in ent] for ent in info.entries],
                "F_shapes": [[list(f.shape) for f in ss.F]]}
        doc = gains_document("steady", [ss.K], [ss.F], dims, {"P_bar": ss.P.tolist()})
        rows = [{"J_star": ss.J, "spectral_radius": ss.spectral_radius, "iterations": ss.iterations,
                 "P_bar_trace": float(np.trace(ss.P)), "residual": ss.residual}]
        columns = ["J_star", "spectral_radius", "iterations", "P_bar_trace", "residual"]
    write_gains(out / "gains.json", doc)
    sys.stdout.write(write_csv(rows, columns, out / "costs.csv"))
    return EXIT_OK


def _strategies(scenario, names, T, info, lom, iterations=None, step_size=None):
    exp = scenario.experiment
    made = []
    for name in names:
        if name == "mtmse":
            made.append(baselines.mtmse_strategy(scenario.system, scenario.cost, info, lom, T))
        elif name == "mmse":
            made.append(baselines.mmse_strategy(scenario.system, scenario.cost, info, lom, T))
        elif name == "ckf":
            if scenario.graph is None:
                raise ScenarioError("consensus filtering needs a graph", "graph")
            made.append(baselines.consensus_kf_strategy(
                scenario.system, scenario.cost, scenario.graph,
                iterations if iterations is not None else int(exp.get("consensus_iterations", 1)),
                step_size if step_size is not None else exp.get("step_size")))
        else:
            raise KeyError(name)
    return made


def _analytic(strategy, scenario, info, lom, T):
    if strategy.name == "mtmse":
        return float(strategy.schedule.step_cost[:T].sum())
    if strategy.name == "mmse":
        return baselines.mmse_cost(scenario.system, scenario.cost, info, lom, T, strategy.schedule)
    return None


def cmd_simulate(args) -> int:
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = [s for s in names if s not in STRATEGIES]
    if unknown or not names:
        print(f"unknown strategy: {', '.join(unknown) or '(none)'}; choose from {', '.join(STRATEGIES)}",
              file=sys.stderr)
        return EXIT_INPUT
    scenario, report = _load_checked(args.scenario)
    if not report.passed:
        print(report.format(), file=sys.stderr)
        return EXIT_INVALID
    exp = scenario.experiment
    paths = args.paths if args.paths is not None else int(exp.get("paths", 1000))
    seed = args.seed if args.seed is not None else int(exp.get("seed", 0))
    T = args.horizon or scenario.horizon
    info, lom = _info(scenario)
    strategies = _strategies(scenario, names, T, info, lom, args.consensus_iterations, args.step_size)
    results = baselines.monte_carlo(scenario.system, scenario.cost, strategies, T, paths, seed)
    rows = []
    for s in strategies:
        r = results[s.name]
        p = r.params
        rows.append({"name": s.name, "empirical_mean": r.mean_total, "std_error": r.std_error,
                     "analytic": _analytic(s, scenario, info, lom, T), "paths": paths, "seed": seed,
                     "consensus_iterations": p.get("consensus_iterations"), "step_size": p.get("step_size")})
    columns = ["name", "empirical_mean", "std_error", "analytic", "paths", "seed", "consensus_iterations", "step_size"]
    text = write_csv(rows, columns, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def two_agent_table(sigmas, lambdas) -> list[dict]:
    rows = []
    for sigma in sigmas:
        for lam in lambdas:
            sc = two_agent_scenario(sigma, lam)
            inn = innovation_model(static_joint_model(sc))
            gains = solve_team_gains(inn, sc.cost)
            J_lin = optimal_static_cost(inn, sc.cost, inn.P0, gains)
            J_mmse = team_cost(_mmse_static(inn, sc.cost), inn.sigma_hat, inn.theta_hat, sc.cost, inn.P0)
            rows.append({"sigma": sigma, "lambda": lam, "F": float(gains.F[0][0, 0]), "J_lin": J_lin,
                         "J_mmse": J_mmse, "delta": (J_mmse - J_lin) / J_lin})
    return rows


def filtering_table(name, grid, paths, seed, n_agents=4, iterations=1, step_size=None, T=None) -> list[dict]:
    """Relative improvements over MMSE and consensus filtering for each grid value.

    For ``uav`` the grid holds lambda / n^2, for ``platoon`` lambda itself.
    """
    rows = []
    for g in grid:
        if name == "uav":
            sc = BUILTIN["uav"](n_agents, g) if T is None else BUILTIN["uav"](n_agents, g, T)
        else:
            sc = BUILTIN["platoon"](g) if T is None else BUILTIN["platoon"](g, T)
        horizon = sc.horizon
        info, lom = _info(sc)
        mt, mm, ckf = _strategies(sc, STRATEGIES, horizon, info, lom, iterations, step_size)
        J_star = float(mt.schedule.step_cost.sum())
        J_mmse = baselines.mmse_cost(sc.system, sc.cost, info, lom, horizon, mm.schedule)
        res = baselines.monte_carlo(sc.system, sc.cost, [ckf], horizon, paths, seed)["ckf"]
        rows.append({"grid": g, "lambda": sc.cost_spec["lambda"], "J_star": J_star, "J_mmse": J_mmse,
                     "J_ckf": res.mean_total, "J_ckf_se": res.std_error,
                     "delta_mmse": (J_mmse - J_star) / J_star, "delta_ckf": (res.mean_total - J_star) / J_star,
                     "paths": paths, "seed": seed, "consensus_iterations": ckf.iterations,
                     "step_size": ckf.step_size})
    return rows


def cmd_reproduce(args) -> int:
    if args.name not in BUILTIN:
        print(f"unknown experiment {args.name!r}; choose from {', '.join(BUILTIN)}", file=sys.stderr)
        return EXIT_INPUT
    if args.name == "two-agent":
        lambdas = args.lambda_grid or [0.0, 1.0, 4.0, 100.0, 1e6]
        sigmas = args.sigma_grid or [0.25, 0.5, 1.0, 2.0, 4.0]
        rows = two_agent_table(sigmas, lambdas)
        columns = ["sigma", "lambda", "F", "J_lin", "J_mmse", "delta"]
    else:
        grid = args.lambda_grid or [0.1, 1.0, 10.0]
        rows = filtering_table(args.name, grid, args.paths or 1000, args.seed or 0, args.agents,
                               args.consensus_iterations if args.consensus_iterations is not None else 1,
                               args.step_size, args.horizon)
        first = "lambda_over_n2" if args.name == "uav" else "lambda_grid"
        for r in rows:
            r[first] = r.pop("grid")
        columns = [first, "lambda", "J_star", "J_mmse", "J_ckf", "J_ckf_se", "delta_mmse", "delta_ckf",
                   "paths", "seed", "consensus_iterations", "step_size"]
    text = write_csv(rows, columns, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_scenario(args) -> int:
    if args.name not in BUILTIN:
        print(f"unknown scenario {args.name!r}; choose from {', '.join(BUILTIN)}", file=sys.stderr)
        return EXIT_INPUT
    text = json.dumps(BUILTIN[args.name]().to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtmse", description="Team mean-squared error estimation and filtering")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check assumptions A1-A5 for a scenario")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="compute gains and optimal costs")
    s.add_argument("scenario")
    s.add_argument("--mode", choices=["static", "finite", "steady"], default="finite")
    s.add_argument("--out-dir", default=".")
    s.add_argument("--horizon", type=int, default=None)
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="Monte Carlo comparison of strategies")
    m.add_argument("scenario")
    m.add_argument("--strategies", default="mtmse,mmse,ckf")
    m.add_argument("--paths", type=int, default=None)
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--horizon", type=int, default=None)
    m.add_argument("--consensus-iterations", type=int, default=None)
    m.add_argument("--step-size", type=float, default=None)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reproduce", help="relative-improvement tables of the built-in experiments")
    r.add_argument("--name", required=True)
    r.add_argument("--lambda-grid", type=_parse_floats, default=None)
    r.add_argument("--sigma-grid", type=_parse_floats, default=None)
    r.add_argument("--paths", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--agents", type=int, default=4)
    r.add_argument("--horizon", type=int, default=None)
    r.add_argument("--consensus-iterations", type=int, default=None)
    r.add_argument("--step-size", type=float, default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_reproduce)

    e = sub.add_parser("scenario", help="print a built-in scenario as JSON")
    e.add_argument("name")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_scenario)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, DimensionError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GainSystemError, ConvergenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
