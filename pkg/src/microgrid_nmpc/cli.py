from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .acpf import deviation_check
from .config import RunConfig, load_config
from .conic import dump_program
from .errors import ConfigError, MicrogridError
from .export import (
    read_setpoint_json,
    write_closed_loop_csv,
    write_deviation_json,
    write_plot_data,
    write_reference_summary,
    write_run_summary,
    write_solution_json,
)
from .grid import DemandSnapshot
from .nmpc import (
    PeriodicReference,
    build_subproblem,
    load_reference,
    reference_candidate,
    save_reference,
    solve_periodic_ocp,
    solve_subproblem,
)
from .scenario import (
    HOURS_PER_DAY,
    ScenarioTimeline,
    custom_timeline,
    make_nominal_profile,
    make_perturbed_profile,
    nominal_timeline,
)
from .simulate import closed_loop_simulate, device_bounds

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microgrid-nmpc", description="Microgrid dispatch by mixed-integer NMPC")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML config (default: configs/six_bus.toml)")
    common.add_argument("--out", type=Path, default=Path("outputs"), help="Output directory")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--seed", type=int, default=None, help="Scenario seed")
    common.add_argument("--dt", type=float, default=None, help="Interval length in hours (default 1)")
    common.add_argument("--horizon", type=int, default=None, help="Prediction horizon M (default 48)")
    common.add_argument("--gap", type=float, default=None, help="Relative optimality gap (default 1e-4)")
    common.add_argument("--steps", type=int, default=None, help="Closed-loop steps")
    common.add_argument("--scenario", choices=("nominal", "varying-solar", "custom-file"), default=None)
    common.add_argument("--reference", type=Path, default=None, help="Reuse a saved reference.json")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("periodic", parents=[common], help="Solve the periodic reference")
    p_nmpc = sub.add_parser("nmpc", parents=[common], help="Solve one NMPC subproblem")
    p_nmpc.add_argument("--step", type=int, default=0, help="Absolute step k, starting on the reference")
    p_pf = sub.add_parser("check-pf", parents=[common], help="Deviation check of a setpoint file")
    p_pf.add_argument("setpoint", type=Path, help="JSON with p_g, q_g, p_b, q_b and optional demand")
    p_pf.add_argument("--step", type=int, default=0, help="Nominal demand step when the file has no demand")
    sub.add_parser("simulate", parents=[common], help="Closed-loop simulation")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """CLI flags take precedence over the [run] table."""
    if args.dt is not None:
        n_per = int(round(HOURS_PER_DAY / args.dt)) if args.dt > 0 else 0
        if n_per < 1 or abs(n_per * args.dt - HOURS_PER_DAY) > 1e-9:
            raise ConfigError(f"--dt {args.dt} does not divide one day into whole intervals")
        cfg.nmpc.dt = args.dt
        cfg.n_per = n_per
    if args.horizon is not None:
        cfg.nmpc.horizon = args.horizon
    if args.gap is not None:
        cfg.nmpc.gap = args.gap
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    if args.scenario is not None:
        cfg.scenario = args.scenario
    cfg.nmpc.__post_init__()
    return cfg


def make_timeline(cfg: RunConfig) -> ScenarioTimeline:
    n = cfg.spec.n_buses
    if cfg.scenario == "varying-solar":
        return make_perturbed_profile(n, cfg.n_per, cfg.nmpc.dt, cfg.steps + cfg.nmpc.horizon, cfg.seed,
                                      cfg.profile, cfg.perturbation)
    if cfg.scenario == "custom-file":
        if cfg.demand_file is None:
            raise ConfigError("custom-file scenario needs run.demand_file in the config")
        return custom_timeline(cfg.demand_file, n, cfg.n_per)
    return nominal_timeline(make_nominal_profile(n, cfg.n_per, cfg.nmpc.dt, cfg.profile))


def get_reference(cfg: RunConfig, timeline: ScenarioTimeline, path: Optional[Path]) -> PeriodicReference:
    if path is not None:
        print(f">>> Loading reference {path}")
        return load_reference(path)
    print(f">>> Solving periodic problem (n_per={timeline.n_per}, dt={cfg.nmpc.dt} h)")
    return solve_periodic_ocp(cfg.spec, cfg.params, timeline.periodic_demand(), cfg.nmpc)


def cmd_periodic(cfg: RunConfig, args: argparse.Namespace) -> int:
    timeline = make_timeline(cfg)
    ref = get_reference(cfg, timeline, None)
    ref_path = save_reference(ref, args.out / "reference.json")
    summary = write_reference_summary(ref, cfg.params, args.out)
    print(f"✓ period cost {ref.objective:.4f}, {int(ref.switches().sum())} switches")
    print(f"Wrote reference: {ref_path.resolve()}")
    print(f"Wrote summary:   {summary.resolve()}")
    return 0


def cmd_nmpc(cfg: RunConfig, args: argparse.Namespace) -> int:
    timeline = make_timeline(cfg)
    ref = get_reference(cfg, timeline, args.reference)
    k = args.step
    x0 = ref.state_at(k)
    sub = build_subproblem(x0, k, timeline.forecast(k, cfg.nmpc.horizon), ref, cfg.spec, cfg.params, cfg.nmpc)
    sub.hint = reference_candidate(ref, x0, k, sub.encoding)
    dump = dump_program(sub.program, args.out / "subproblem.txt")
    print(f">>> Solving NMPC subproblem k={k}, M={cfg.nmpc.horizon}: {sub.program.n_vars} variables")
    sol = solve_subproblem(sub)
    out = write_solution_json(sub, sol, args.out)
    mark = "✓" if sol.ok else "✗"
    print(f"{mark} {sol.status.value}: objective {sol.objective:.4f}, {sol.nodes} nodes")
    print(f"Wrote program:  {dump.resolve()}")
    print(f"Wrote solution: {out.resolve()}")
    return 0 if sol.ok else 8


def cmd_check_pf(cfg: RunConfig, args: argparse.Namespace) -> int:
    y, demand, on = read_setpoint_json(args.setpoint)
    if on is None:
        on = (y.p_g != 0).astype(int)
    if demand is not None:
        d = DemandSnapshot(demand["p_d"], demand["q_d"])
    else:
        d = make_timeline(cfg).realized(args.step)
    result = deviation_check(y, d, cfg.spec, bounds=device_bounds(on, cfg.params), feas_tol=cfg.nmpc.feas_tol)
    out = write_deviation_json(result, args.out)
    print(f"✓ v_check = {result.v_check:.3e} ({result.starts_feasible}/{result.starts_tried} starts feasible)")
    print(f"Wrote: {out.resolve()}")
    return 0


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    timeline = make_timeline(cfg)
    ref = get_reference(cfg, timeline, args.reference)
    save_reference(ref, args.out / "reference.json")
    print(f">>> Closed loop: {cfg.steps} steps, scenario {timeline.kind}, M={cfg.nmpc.horizon}")
    record = closed_loop_simulate(cfg.spec, cfg.params, ref, timeline, cfg.steps, cfg.nmpc, dump_dir=args.out)
    csv_path = write_closed_loop_csv(record, cfg.params, args.out)
    plot_path = write_plot_data(record, cfg.params, cfg.nmpc.dt, args.out)
    summary_path = write_run_summary(record, cfg.params, args.out)
    print("\n" + "=" * 60)
    print(f"✓ total cost {record.cumulative_costs[-1]:.4f}, max distance {record.max_distance():.3e}")
    print(f"Wrote CSV:       {csv_path.resolve()}")
    print(f"Wrote plot data: {plot_path.resolve()}")
    print(f"Wrote summary:   {summary_path.resolve()}")
    print("=" * 60)
    return 0


HANDLERS = {
    "periodic": cmd_periodic,
    "nmpc": cmd_nmpc,
    "check-pf": cmd_check_pf,
    "simulate": cmd_simulate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    print(f"microgrid-nmpc {args.command}")
    print("=" * 60)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        args.out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, args)
    except MicrogridError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        dump = getattr(e, "dump_path", None)
        if dump is not None:
            print(f"diagnostic dump: {dump}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error[internal]: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
