"""
Command-line front end.

Four workflows share one scenario format:

``lincov``
    Nominal trajectory and augmented covariance.
``mc``
    Nonlinear Monte Carlo ensemble statistics.
``validate``
    Both of the above plus the sigma-ratio comparison.
``plan``
    Chance-constrained RRT and an independent re-evaluation of its path.

Every command writes CSV and JSON artifacts into ``--out``. Identical inputs
give byte-identical files. Exit status is 0 on success, 1 when a tolerance
or constraint is violated and 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import lincov
from . import montecarlo as mc
from . import rrt
from .scenario import Scenario, ScenarioError, parse_scenario, parse_scenario_text, shipped_scenarios
from .simulation import SimulationError, simulate_nominal

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

# Below this ensemble size a warning about sampling error is printed.
FEW_RUNS = 30


class ConfigError(Exception):
    pass


class CommandFailed(Exception):
    pass


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _override(sc: Scenario, updates: dict[tuple[str, ...], object]) -> Scenario:
    """Apply dotted-path overrides and re-validate the whole scenario."""
    doc = sc.model_dump(mode="json")
    for path, value in updates.items():
        if value is None:
            continue
        node = doc
        for key in path[:-1]:
            if node.get(key) is None:
                raise ConfigError(f"{'.'.join(path[:-1])} is not configured in this scenario")
            node = node[key]
        node[path[-1]] = value
    return parse_scenario_text(json.dumps(doc), "command line")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _health(C_A=None, *, result=None) -> dict:
    ok, worst = lincov.covariance_health(C_A) if result is None else result
    return {"ok": ok, "worst_min_eig_over_trace": worst}


def _nominal(sc: Scenario):
    model = sc.model()
    sim = sc.simulation
    z0 = model.trim_state(sc.waypoint_array[0], sc.heading)
    try:
        nominal, done = simulate_nominal(model, z0, sc.initial_covariance.P0, sc.waypoint_array,
                                         dt=sim.dt, gps_every=sim.gps_every, denied=sc.denied,
                                         max_time=sim.max_time)
    except SimulationError as exc:
        raise CommandFailed(str(exc)) from exc
    if not done:
        raise CommandFailed(f"nominal did not reach the last waypoint within {sim.max_time:g} s")
    return model, nominal


def _lincov(sc: Scenario, model, nominal) -> lincov.LinCovSeries:
    return lincov.run(model, nominal, sc.initial_augmented(), stride=sc.simulation.output_stride)


def _ensemble(sc: Scenario, model, nominal, runs: int, seed: int) -> mc.EnsembleStats:
    if runs < 2:
        raise ConfigError("at least two Monte Carlo runs are needed")
    if runs < FEW_RUNS:
        _warn(f"{runs} runs; sample standard deviations carry roughly "
              f"{100.0 / np.sqrt(2.0 * (runs - 1)):.0f}% sampling error")
    ic = sc.initial_covariance
    config = mc.RunConfig(runs=runs, seed=seed, D0=ic.D0, P0=ic.P0, E0=ic.E0,
                          stride=sc.simulation.output_stride, batch=sc.monte_carlo.batch)
    try:
        return mc.run_ensemble(model, nominal, config, sc.denied)
    except mc.MonteCarloError as exc:
        raise CommandFailed(str(exc)) from exc


def _windows(t, mask) -> list[list[float]]:
    """Contiguous runs of ``mask`` as ``[start, end]`` times."""
    out = []
    idx = np.flatnonzero(mask)
    if idx.size:
        breaks = np.flatnonzero(np.diff(idx) > 1)
        for a, b in zip(np.r_[idx[0], idx[breaks + 1]], np.r_[idx[breaks], idx[-1]]):
            out.append([float(t[a]), float(t[b])])
    return out


def cmd_lincov(sc: Scenario, out: Path) -> int:
    model, nominal = _nominal(sc)
    series = _lincov(sc, model, nominal)
    lincov.write_csv(out / "lincov.csv", nominal, series)
    health = _health(series.C_A)
    sigma = series.dispersion_sigma()[-1]
    _write_json(out / "summary.json", {
        "scenario": sc.name,
        "duration": nominal.duration,
        "gps_updates": int(nominal.gps_update.sum()),
        "final_dispersion_3sigma": {n: 3 * float(s) for n, s in zip(lincov.STATE_NAMES, sigma)},
        "covariance_health": health,
    })
    print(f"lincov: {nominal.duration:.2f} s, final position 3-sigma "
          f"{3 * sigma[0]:.2f} m north, {3 * sigma[1]:.2f} m east")
    if not health["ok"]:
        print("covariance lost symmetry or definiteness", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_mc(sc: Scenario, out: Path) -> int:
    model, nominal = _nominal(sc)
    stats = _ensemble(sc, model, nominal, sc.monte_carlo.runs, sc.seed)
    header = (["time"] + [f"mean_{n}" for n in lincov.STATE_NAMES] + [f"std_{n}" for n in lincov.STATE_NAMES]
              + [f"mean_err_{n}" for n in lincov.NAV_NAMES] + [f"std_err_{n}" for n in lincov.NAV_NAMES])
    rows = np.column_stack([stats.t, stats.disp_mean, stats.disp_std, stats.est_mean, stats.est_std])
    lincov.write_table(out / "mc.csv", header, rows)
    _write_json(out / "summary.json", {
        "scenario": sc.name,
        "runs": stats.runs,
        "seed": sc.seed,
        "duration": nominal.duration,
    })
    print(f"mc: {stats.runs} runs over {nominal.duration:.2f} s")
    return EXIT_OK


def cmd_validate(sc: Scenario, out: Path) -> int:
    model, nominal = _nominal(sc)
    series = _lincov(sc, model, nominal)
    stats = _ensemble(sc, model, nominal, sc.monte_carlo.runs, sc.seed)
    settings = sc.monte_carlo
    idx = mc.output_indices(nominal.n_steps + 1, sc.simulation.output_stride)
    gps = nominal.gps_available(sc.denied)[idx]
    before, after = settings.exit_window
    excluded = mc.exit_windows(series.t, gps, before, after)
    report = mc.compare(series, stats, settings.tolerance, transient=settings.transient,
                        excluded=excluded, required_fraction=settings.required_fraction)
    health = _health(series.C_A)
    agreement = lincov.filter_agreement(series, settings.transient)
    lincov.write_csv(out / "lincov.csv", nominal, series)
    mc.write_comparison_csv(out / "comparison.csv", report)
    mc.write_summary_json(out / "summary.json", report, {
        "scenario": sc.name,
        "runs": stats.runs,
        "seed": sc.seed,
        "duration": nominal.duration,
        "transient": settings.transient,
        "excluded_windows": _windows(series.t, excluded),
        "covariance_health": health,
        "filter_agreement": {n: float(a) for n, a in zip(lincov.NAV_NAMES, agreement)},
    })
    for s in report.states:
        print(f"{s.name:12s} {100 * s.fraction:6.1f}% within {settings.tolerance:g}"
              f"  {'ok' if s.passed else 'FAIL'}")
    if not health["ok"]:
        print("covariance lost symmetry or definiteness", file=sys.stderr)
    passed = report.passed and health["ok"]
    print("validate: " + ("passed" if passed else "FAILED"))
    return EXIT_OK if passed else EXIT_FAILED


def cmd_plan(sc: Scenario, out: Path) -> int:
    ps = sc.planner
    if ps is None:
        raise ConfigError("scenario has no planner section")
    model = sc.model()
    sim = sc.simulation
    mission = rrt.Mission(model, sc.obstacles.build(), sc.denied, sim.dt, sim.gps_every)
    wp = sc.waypoint_array
    root = rrt.root_vertex(model, wp[0], sc.heading, sc.initial_covariance.P0, sc.initial_augmented())
    config = rrt.PlannerConfig(tuple(ps.bounds_min), tuple(ps.bounds_max), ps.threshold,
                               ps.iterations, ps.step, ps.goal_bias, ps.time_cap_factor)
    result = rrt.plan(mission, root, wp[-1], config, np.random.default_rng(sc.seed))

    doc = {
        "scenario": sc.name,
        "threshold": ps.threshold,
        "iterations": ps.iterations,
        "seed": sc.seed,
        "found": result.found,
        "goal": wp[-1].tolist(),
        "vertices": [v.position.tolist() for v in result.vertices],
        "edges": [{"parent": e.parent, "child": e.child, "dt": e.dt} for e in result.edges],
        "path": result.path,
        "tree_covariance_health": _health(result=result.covariance_health()),
    }
    status = EXIT_OK
    if not doc["tree_covariance_health"]["ok"]:
        print("tree covariance lost symmetry or definiteness", file=sys.stderr)
        status = EXIT_FAILED
    if result.found:
        ev = rrt.evaluate_path(mission, root, result.waypoints, ps.time_cap_factor)
        compliant = bool(np.all(ev.peak < ps.threshold))
        health = _health(ev.C_A)
        doc.update({
            "waypoints": result.waypoints.tolist(),
            "path_duration": ev.duration,
            "path_peak_probability": ev.peak.tolist(),
            "compliant": compliant,
            "path_covariance_health": health,
        })
        header = ["time", "north", "east"] + [f"p_obstacle_{i}" for i in range(len(mission.obstacles))]
        lincov.write_table(out / "path_probabilities.csv", header,
                           np.column_stack([ev.t, ev.positions, ev.series]))
        worst = float(ev.peak.max()) if ev.peak.size else 0.0
        print(f"plan: path of {len(result.path) - 1} edges, {ev.duration:.2f} s, "
              f"peak probability {worst:.3g} (threshold {ps.threshold:g})")
        if not compliant:
            print("selected path violates the collision threshold", file=sys.stderr)
            status = EXIT_FAILED
        if not health["ok"]:
            print("covariance lost symmetry or definiteness", file=sys.stderr)
            status = EXIT_FAILED
    else:
        print(f"plan: no path after {ps.iterations} iterations", file=sys.stderr)
        status = EXIT_FAILED
    _write_json(out / "plan.json", doc)
    return status


COMMANDS = {"lincov": cmd_lincov, "mc": cmd_mc, "validate": cmd_validate, "plan": cmd_plan}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clincov", description="Closed-loop linear covariance analysis and chance-constrained planning.",
        epilog="Shipped scenarios: " + ", ".join(shipped_scenarios()))
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"lincov": "nominal trajectory and LinCov covariance",
             "mc": "Monte Carlo ensemble statistics",
             "validate": "compare LinCov with Monte Carlo",
             "plan": "chance-constrained RRT"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--scenario", required=True, help="scenario JSON file or shipped scenario name")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="random seed (overrides the scenario)")
        if name in ("mc", "validate"):
            p.add_argument("--runs", type=int, help="Monte Carlo runs")
        if name == "validate":
            p.add_argument("--tolerance", type=float, help="allowed relative sigma mismatch")
        if name == "plan":
            p.add_argument("--threshold", type=float, help="collision-probability threshold")
            p.add_argument("--iterations", type=int, help="RRT iterations")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = parse_scenario(args.scenario)
        sc = _override(sc, {
            ("seed",): args.seed,
            ("monte_carlo", "runs"): getattr(args, "runs", None),
            ("monte_carlo", "tolerance"): getattr(args, "tolerance", None),
            ("planner", "threshold"): getattr(args, "threshold", None),
            ("planner", "iterations"): getattr(args, "iterations", None),
        })
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(sc.to_json())
        return COMMANDS[args.command](sc, out)
    except (ConfigError, ScenarioError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
