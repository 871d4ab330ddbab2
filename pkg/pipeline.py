#!/usr/bin/env python
"""
wisprkit - Main Entry Point

Commands:
    plan fit           - Fit the quadratic price model to a price CSV
    plan multiplicity  - Cost of carrying each capacity over 1..n_max parallel links
    plan redesign      - Min-cost, max-capacity or fixed-cost topology redesign
    paths              - Path-count CDF, optionally after cross/parallel augmentation
    sim                - Run a simulation experiment config
    synthesize         - Build a layered topology from site coordinates

Usage:
    uv run pipeline.py plan fit --prices samples/prices_sample.csv --out out/fit
    uv run pipeline.py plan multiplicity --model out/fit/price_model.json --capacities 1000,2000 --out out/mult
    uv run pipeline.py plan redesign --topology samples/tree64.json --model out/fit/price_model.json \\
        --mode max-capacity --candidates samples/tree64_candidates.csv --budget 50000 --out out/plan
    uv run pipeline.py paths --topology samples/tree64.json --cross 20 --seed 42 --out out/paths
    uv run pipeline.py sim samples/experiments/udp-experiment.json --out out/udp
    uv run pipeline.py sim samples/experiments/multihop-stripe.json --out out/multihop
    uv run pipeline.py synthesize --coordinates samples/coordinates_sample.csv --seed 7 --out out/synth

Every command writes manifest.json next to its outputs.
Exit codes: 0 success, 2 input/validation error, 3 infeasible plan, 4 I/O error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from netsim import export_metrics, load_experiment, port_weight_frame, run_experiment, sweep_frame
from path_analysis import (
    DEFAULT_CLUSTER_RADIUS_M,
    DEFAULT_FANOUT,
    DEFAULT_PATH_CAP,
    augment_topology,
    augmentation_report,
    cdf_from_counts,
    count_all_paths,
    load_coordinates,
    synthesis_summary,
    synthesize_topology,
    write_cdf_csv,
)
from price_planner import (
    DEFAULT_N_MAX,
    DISTRIBUTION_TIER,
    PlanError,
    PlanInfeasibleError,
    SpectrumBudget,
    cost_curve,
    fit_price_model,
    fixed_cost_max_capacity,
    load_candidate_links,
    load_price_model,
    load_price_points,
    max_capacity_redesign,
    min_cost_redesign,
    multiplicity_table,
    save_price_model,
    topology_cost,
    write_plan_result,
)
from topo_model import load_topology, save_topology
from utils.logger import get_logger, log_section, log_step_complete, log_step_header, log_timed
from utils.manifest import build_manifest, write_manifest

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

REDESIGN_MODES = ("min-cost", "max-capacity", "fixed-cost")
CURVE_POINTS = 50


def _config(args: argparse.Namespace) -> dict:
    """Resolved flags as JSON-friendly values, for the manifest."""
    config = {}
    for key, value in sorted(vars(args).items()):
        if key == "func":
            continue
        config[key] = str(value) if isinstance(value, Path) else value
    return config


def _finish(args: argparse.Namespace, command: str, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = build_manifest(
        command=command,
        config=_config(args),
        seed=getattr(args, "seed", None),
        inputs=[Path(p) for p in inputs],
        outputs=outputs,
        out_dir=args.out,
    )
    write_manifest(manifest, args.out)


def _write_json(data: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def _spectrum_budget(args: argparse.Namespace) -> SpectrumBudget:
    return SpectrumBudget(
        channels_20mhz=args.channels_20,
        channels_40mhz=args.channels_40,
        min_angular_separation=args.separation,
    )


# --- plan ---

def cmd_plan_fit(args: argparse.Namespace) -> None:
    """Fit cost = alpha*C^2 + beta*C + gamma and write the report."""
    log_step_header(logger, "PLAN: FIT PRICE MODEL")
    with log_timed(logger, "Price fit"):
        points = load_price_points(args.prices)
        model = fit_price_model(points)

    logger.info(f"  {len(points)} price points")
    logger.info(f"  alpha={model.alpha:.6g}  beta={model.beta:.6g}  gamma={model.gamma:.6g}  r²={model.r_squared:.4f}")

    lo, hi = model.capacity_range
    step = (hi - lo) / (CURVE_POINTS - 1)
    curve = cost_curve(model, [lo + i * step for i in range(CURVE_POINTS)])

    args.out.mkdir(parents=True, exist_ok=True)
    model_path = save_price_model(model, args.out / "price_model.json")
    report_path = _write_json(
        {
            "alpha": model.alpha,
            "beta": model.beta,
            "gamma": model.gamma,
            "r_squared": model.r_squared,
            "points": len(points),
            "capacity_range": list(model.capacity_range),
        },
        args.out / "fit_report.json",
    )
    curve_path = args.out / "cost_curve.csv"
    curve.write_csv(curve_path, float_precision=6)
    _finish(args, "plan fit", [args.prices], [model_path, report_path, curve_path])
    log_step_complete(logger, f"Price model written to {model_path}")


def _parse_capacities(raw: str) -> list[float]:
    try:
        capacities = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise PlanError(f"capacities must be comma-separated numbers, got '{raw}'") from None
    if not capacities:
        raise PlanError("no capacities given")
    return capacities


def cmd_plan_multiplicity(args: argparse.Namespace) -> None:
    log_step_header(logger, "PLAN: PARALLEL LINK MULTIPLICITY")
    model = load_price_model(args.model)
    capacities = _parse_capacities(args.capacities)
    with log_timed(logger, "Multiplicity table"):
        table = multiplicity_table(model, capacities, args.n_max)

    for capacity, n in table.filter(table["n"] == table["optimal_n"]).select("capacity_mbps", "n").iter_rows():
        logger.info(f"  {capacity:>8.0f} Mbps -> {n} parallel links")

    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "multiplicity.csv"
    table.write_csv(path, float_precision=6)
    _finish(args, "plan multiplicity", [args.model], [path])
    log_step_complete(logger, f"{table.height} rows written to {path}")


def cmd_plan_redesign(args: argparse.Namespace) -> None:
    """Run one of the three planners and write the plan plus the new topology."""
    log_step_header(logger, f"PLAN: REDESIGN ({args.mode})")
    topo = load_topology(args.topology)
    model = load_price_model(args.model)
    budget = _spectrum_budget(args)
    inputs = [args.topology, args.model]

    with log_timed(logger, "Redesign"):
        if args.mode == "min-cost":
            result = min_cost_redesign(model, topo, budget, args.n_max)
        else:
            if args.candidates is None:
                raise PlanError(f"--mode {args.mode} needs --candidates")
            candidates = load_candidate_links(args.candidates)
            inputs.append(args.candidates)
            if args.mode == "max-capacity":
                ceiling = args.budget if args.budget is not None else topology_cost(model, topo)
                result = max_capacity_redesign(model, topo, budget, ceiling, candidates, args.unit_capacity)
            else:
                result = fixed_cost_max_capacity(model, topo, budget, candidates, args.unit_capacity)

    log_section(logger, "Result")
    logger.info(f"  Capacity: {result.capacity_before:.1f} -> {result.capacity:.1f} Mbps")
    logger.info(f"  Cost:     {result.cost_before:,.2f} -> {result.total_cost:,.2f} USD")
    logger.info(f"  Links:    +{result.links_added} added, {result.links_replaced} replaced")

    args.out.mkdir(parents=True, exist_ok=True)
    plan_path = write_plan_result(result, model, args.out / "plan.json")
    topo_path = save_topology(result.topology, args.out / "topology.json")
    _finish(args, "plan redesign", inputs, [plan_path, topo_path])
    log_step_complete(logger, f"Plan written to {plan_path}")


# --- paths ---

def _augmentation(args: argparse.Namespace) -> tuple[str, int] | None:
    chosen = [(kind, getattr(args, kind)) for kind in ("cross", "parallel", "both") if getattr(args, kind) is not None]
    if len(chosen) > 1:
        raise PlanError("choose at most one of --cross, --parallel, --both")
    if chosen and chosen[0][1] < 0:
        raise PlanError(f"--{chosen[0][0]} needs a non-negative link count")
    return chosen[0] if chosen else None


def cmd_paths(args: argparse.Namespace) -> None:
    log_step_header(logger, "PATHS: EDGE-TO-GATEWAY PATH COUNTS")
    topo = load_topology(args.topology)
    augmentation = _augmentation(args)

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if augmentation is not None:
        kind, n = augmentation
        logger.info(f"  Augmenting with {n} {kind} links (seed {args.seed})")
        augmented = augment_topology(topo, kind, n, args.seed)
        with log_timed(logger, "Path counting"):
            report = augmentation_report(topo, augmented, args.cap, args.workers)
        counts = report.after
        report_path = args.out / "augmentation_report.csv"
        report.to_frame().write_csv(report_path)
        outputs += [report_path, save_topology(augmented, args.out / "topology.json")]
    else:
        with log_timed(logger, "Path counting"):
            counts = count_all_paths(topo, args.cap, args.workers)

    truncated = sum(1 for c in counts.values() if c.truncated)
    if truncated:
        logger.info(f"  {truncated} edge nodes exceed the cap of {args.cap} paths")
    cdf = cdf_from_counts(c.count for c in counts.values())
    cdf_path = write_cdf_csv(cdf, args.out / "path_cdf.csv")
    outputs.append(cdf_path)
    _finish(args, "paths", [args.topology], outputs)
    log_step_complete(logger, f"CDF over {len(counts)} edge nodes written to {cdf_path}")


# --- sim ---

def cmd_sim(args: argparse.Namespace) -> None:
    log_step_header(logger, "SIM: RUN EXPERIMENT")
    experiment = load_experiment(args.config)
    # Flags win over config keys
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        experiment = replace(experiment, **overrides)
    for path in experiment.referenced:
        if not path.exists():
            raise FileNotFoundError(f"{args.config} references missing file {path}")

    logger.info(f"  {experiment.name}: kind {experiment.kind}, seed {experiment.seed}")
    with log_timed(logger, "Simulation"):
        result = run_experiment(experiment, args.workers)

    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [export_metrics(result.metrics, args.out / "metrics.csv")]
    if result.sweep is not None:
        sweep_path = args.out / "goodput_sweep.csv"
        sweep_frame(result.sweep).write_csv(sweep_path, float_precision=6)
        outputs.append(sweep_path)
    weights_path = args.out / "port_weights.csv"
    port_weight_frame(result.port_weights).write_csv(weights_path, float_precision=6)
    outputs.append(weights_path)
    args.seed = experiment.seed
    _finish(args, "sim", [args.config, *experiment.referenced], outputs)
    log_step_complete(logger, f"{len(result.metrics)} runs written to {outputs[0]}")


# --- synthesize ---

def cmd_synthesize(args: argparse.Namespace) -> None:
    log_step_header(logger, "SYNTHESIZE: TOPOLOGY FROM COORDINATES")
    coordinates = load_coordinates(args.coordinates)
    with log_timed(logger, "Synthesis"):
        topo = synthesize_topology(coordinates, args.fanout, args.radius, args.seed)
    summary = synthesis_summary(topo)
    logger.info(f"  Depth histogram: {summary['depth_histogram']}")

    args.out.mkdir(parents=True, exist_ok=True)
    topo_path = save_topology(topo, args.out / "topology.json")
    summary_path = _write_json(summary, args.out / "synthesis_summary.json")
    _finish(args, "synthesize", [args.coordinates], [topo_path, summary_path])
    log_step_complete(logger, f"Topology written to {topo_path}")


# --- argument parsing ---

def _add_spectrum_flags(parser: argparse.ArgumentParser) -> None:
    defaults = SpectrumBudget()
    parser.add_argument("--channels-20", type=int, default=defaults.channels_20mhz,
                        help=f"Non-overlapping 20 MHz channels (default: {defaults.channels_20mhz})")
    parser.add_argument("--channels-40", type=int, default=defaults.channels_40mhz,
                        help=f"Non-overlapping 40 MHz channels (default: {defaults.channels_40mhz})")
    parser.add_argument("--separation", type=float, default=defaults.min_angular_separation,
                        help="Minimum angular separation in degrees for channel reuse")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wisprkit",
        description="Multipath backhaul planning, path analysis and simulation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  uv run pipeline.py plan fit --prices samples/prices_sample.csv --out out/fit
  uv run pipeline.py paths --topology samples/tree64.json --both 20 --seed 42 --out out/paths
  uv run pipeline.py sim samples/experiments/mirror-experiment.json --out out/mirror
        """,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    plan = commands.add_parser("plan", help="Price model and topology planning")
    plan_commands = plan.add_subparsers(dest="plan_command", required=True)

    fit = plan_commands.add_parser("fit", help="Fit the quadratic price model")
    fit.add_argument("--prices", type=Path, required=True, help="Price CSV (vendor,model,capacity_mbps,price_usd_pair)")
    fit.add_argument("--out", type=Path, required=True)
    fit.set_defaults(func=cmd_plan_fit)

    mult = plan_commands.add_parser("multiplicity", help="Cost per parallel-link multiplicity")
    mult.add_argument("--model", type=Path, required=True, help="price_model.json from 'plan fit'")
    mult.add_argument("--capacities", default="1000,2000,3000,4000,5000",
                      help="Comma-separated capacities in Mbps")
    mult.add_argument("--n-max", type=int, default=DEFAULT_N_MAX)
    mult.add_argument("--out", type=Path, required=True)
    mult.set_defaults(func=cmd_plan_multiplicity)

    redesign = plan_commands.add_parser("redesign", help="Redesign a topology under a budget")
    redesign.add_argument("--topology", type=Path, required=True)
    redesign.add_argument("--model", type=Path, required=True)
    redesign.add_argument("--mode", choices=REDESIGN_MODES, default="min-cost")
    redesign.add_argument("--candidates", type=Path, help="Candidate link CSV (a,b)")
    redesign.add_argument("--budget", type=float,
                          help="Cost ceiling in USD for max-capacity (default: current cost)")
    redesign.add_argument("--unit-capacity", type=float, default=DISTRIBUTION_TIER,
                          help="Capacity of each added link in Mbps")
    redesign.add_argument("--n-max", type=int, default=DEFAULT_N_MAX)
    _add_spectrum_flags(redesign)
    redesign.add_argument("--out", type=Path, required=True)
    redesign.set_defaults(func=cmd_plan_redesign)

    paths = commands.add_parser("paths", help="Path-count CDF over edge nodes")
    paths.add_argument("--topology", type=Path, required=True)
    paths.add_argument("--cross", type=int, help="Add N cross links")
    paths.add_argument("--parallel", type=int, help="Add N parallel links (tree only)")
    paths.add_argument("--both", type=int, help="Add N parallel then N cross links")
    paths.add_argument("--seed", type=int, default=0)
    paths.add_argument("--cap", type=int, default=DEFAULT_PATH_CAP, help="Path count cap per edge node")
    paths.add_argument("--workers", type=int, default=1, help="Processes used for counting")
    paths.add_argument("--out", type=Path, required=True)
    paths.set_defaults(func=cmd_paths)

    sim = commands.add_parser("sim", help="Run a simulation experiment")
    sim.add_argument("config", type=Path, help="Experiment config JSON")
    sim.add_argument("--seed", type=int, help="Base seed (overrides the config)")
    sim.add_argument("--iterations", type=int, help="Iterations (overrides the config)")
    sim.add_argument("--workers", type=int, default=1, help="Threads used for iterations")
    sim.add_argument("--out", type=Path, required=True)
    sim.set_defaults(func=cmd_sim)

    synth = commands.add_parser("synthesize", help="Synthesize a topology from coordinates")
    synth.add_argument("--coordinates", type=Path, required=True, help="CSV with id,lat,lon")
    synth.add_argument("--fanout", type=int, default=DEFAULT_FANOUT)
    synth.add_argument("--radius", type=float, default=DEFAULT_CLUSTER_RADIUS_M,
                       help="Cluster radius in meters")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)
    synth.set_defaults(func=cmd_synthesize)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PlanInfeasibleError as e:
        logger.error(f"Infeasible plan: {e}")
        return EXIT_INFEASIBLE
    except ValueError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INVALID
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
