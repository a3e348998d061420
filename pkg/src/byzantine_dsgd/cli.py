"""CLI interface for the Byzantine DSGD simulator."""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from byzantine_dsgd import __version__
from byzantine_dsgd.analysis import bound_curve, gen_gap
from byzantine_dsgd.config import config_hash, load_config, load_toml, output_root, run_dir
from byzantine_dsgd.engine import (
    apply_axis,
    build_problem,
    build_roles,
    default_perturb,
    first_draw_step,
    run,
    run_pair,
    sweep,
)
from byzantine_dsgd.errors import SimulationError
from byzantine_dsgd.metrics import configure_pushgateway, push_metrics, start_metrics_server
from byzantine_dsgd.models import AggregationSpec, BoundInputs, Command, RunConfig
from byzantine_dsgd.reporting import (
    write_bounds,
    write_gap,
    write_manifest,
    write_summary,
    write_trace,
)
from byzantine_dsgd.topology import (
    RoleAssignment,
    build_metropolis_weights,
    complete_graph,
    estimate_contraction,
    gen_erdos_renyi,
    ios_complete_reference,
    spectral_summary,
    uniform_weights,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# --flag -> BoundInputs field
BOUND_FLAGS = {
    "rho": "rho", "chi": "chi", "beta": "beta", "M": "M", "L": "L", "mu": "mu",
    "Z": "Z", "R": "honest_count", "B": "byz_count", "k0": "k0", "a": "a", "c1": "c1", "c2": "c2",
}


def _existing_path(value: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {value}")
    return path


def _k_range(value: str) -> List[float]:
    """``start:stop:step``, stop included."""
    try:
        start, stop, step = (float(v) for v in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {value!r}") from None
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError("need step > 0 and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(count)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdsgd", description="Byzantine-resilient DSGD simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level", default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level",
    )
    parser.add_argument("--metrics-port", type=int, help="Expose Prometheus metrics on this port")
    parser.add_argument(
        "--pushgateway", help="Push sweep metrics to this Pushgateway (default: $BDSGD_PUSHGATEWAY)"
    )
    subparsers = parser.add_subparsers(dest="kind", metavar="command")
    subparsers.required = True

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=_existing_path, required=True, help="TOML run config")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument(
            "--output-root", type=Path,
            help="Output root (default: $BDSGD_OUTPUT_ROOT or ./runs)",
        )

    run_parser = subparsers.add_parser("run", help="Run one simulation")
    with_config(run_parser)

    pair_parser = subparsers.add_parser("pair", help="Run a stability pair")
    with_config(pair_parser)
    pair_parser.add_argument("--agent", type=int, help="Honest agent whose sample is replaced")
    pair_parser.add_argument("--index", type=int, help="Replaced sample position (default 0)")
    pair_parser.add_argument(
        "--replacement-index", type=int, help="Test sample used as the replacement (default 0)"
    )

    sweep_parser = subparsers.add_parser("sweep", help="Sweep one config axis")
    with_config(sweep_parser)
    sweep_parser.add_argument(
        "--axis", required=True, choices=["rule", "attack", "honest_count", "Z", "seed"]
    )
    sweep_parser.add_argument("--values", default="", help="Comma-separated axis values")
    sweep_parser.add_argument("--mode", choices=["run", "pair"], default="run")
    sweep_parser.add_argument("--workers", type=int, default=1)

    bounds_parser = subparsers.add_parser("bounds", help="Evaluate a closed-form bound")
    bounds_parser.add_argument("--theorem", required=True, choices=["1", "2", "3", "4", "lemma3"])
    bounds_parser.add_argument("--inputs", type=_existing_path, help="TOML file of bound inputs")
    for flag in BOUND_FLAGS:
        kind = int if flag in ("Z", "R", "B") else float
        bounds_parser.add_argument(f"--{flag}", type=kind, default=None)
    bounds_parser.add_argument("--c", type=float, default=1.0, help="Consensus constant for lemma3")
    bounds_parser.add_argument("--k", type=float, action="append", help="Step; may repeat")
    bounds_parser.add_argument("--k-range", type=_k_range, help="start:stop:step")
    bounds_parser.add_argument("--out", type=Path, help="Also write the k,bound CSV here")

    check_parser = subparsers.add_parser("check", help="Estimate a rule's contraction constant")
    check_parser.add_argument("--rule", choices=["mean", "tm", "ios", "scc"], default="ios")
    check_parser.add_argument("--b", type=int)
    check_parser.add_argument("--q", type=int)
    check_parser.add_argument("--tau", type=float, default=1.0)
    check_parser.add_argument("--weights", choices=["metropolis", "uniform"], default="uniform")
    check_parser.add_argument("--trials", type=int, default=1000)
    check_parser.add_argument("--seed", type=int, default=0)
    check_parser.add_argument("--honest", type=int, default=8)
    check_parser.add_argument("--byzantine", type=int, default=2)
    check_parser.add_argument("--graph", choices=["erdos_renyi", "complete"], default="complete")
    check_parser.add_argument("--p", type=float, default=0.7)
    check_parser.add_argument("--dim", type=int, default=3)
    return parser


def _bound_inputs(args: argparse.Namespace) -> BoundInputs:
    data: Dict[str, object] = {}
    if args.inputs is not None:
        data.update(load_toml(args.inputs))
    for flag, field in BOUND_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            data[field] = value
    return BoundInputs.parse_obj(data)


def parse_args(argv: Optional[Sequence[str]] = None) -> Command:
    """Parse and validate a command line; usage errors exit with status 2."""
    parser = build_parser()
    args = parser.parse_args(argv)
    fields: Dict[str, object] = {
        "kind": args.kind,
        "log_level": args.log_level,
        "metrics_port": args.metrics_port,
        "pushgateway": args.pushgateway,
    }
    try:
        if args.kind in ("run", "pair", "sweep"):
            fields.update(config=args.config, output_root=args.output_root, seed=args.seed)
        if args.kind == "pair":
            fields.update(
                perturb_agent=args.agent,
                perturb_index=args.index,
                replacement_index=args.replacement_index,
            )
        if args.kind == "sweep":
            fields.update(
                axis=args.axis,
                values=[v.strip() for v in args.values.split(",") if v.strip()],
                mode=args.mode,
                workers=args.workers,
            )
        if args.kind == "bounds":
            ks = list(args.k or []) + list(args.k_range or [])
            if not ks:
                parser.error("bounds needs --k or --k-range")
            fields.update(
                theorem=args.theorem,
                bound_inputs=_bound_inputs(args),
                consensus_c=args.c,
                ks=ks,
                out=args.out,
            )
        if args.kind == "check":
            fields.update(
                aggregation=AggregationSpec(
                    rule=args.rule, b=args.b, q=args.q, tau=args.tau, weights=args.weights
                ),
                trials=args.trials,
                seed=args.seed,
                honest=args.honest,
                byzantine=args.byzantine,
                graph_kind=args.graph,
                p=args.p,
                dim=args.dim,
            )
        return Command(**fields)
    except ValidationError as e:
        parser.error(str(e))


def _resolve_config(cmd: Command) -> RunConfig:
    cfg = load_config(cmd.config)
    if cmd.seed is not None:
        cfg = RunConfig.parse_obj({**cfg.dict(), "seed": cmd.seed})
    return cfg


def _run_manifest_extra(cfg: RunConfig, problem) -> Dict[str, object]:
    extra: Dict[str, object] = {
        "config": cfg.dict(),
        "byzantine_ids": problem.roles.byzantine,
        "schedule": problem.schedule.dict(),
    }
    if problem.generator is not None:
        extra["generator"] = problem.generator.dict()
    if problem.victim is not None:
        extra["victim"] = problem.victim
    return extra


def _execute_run(cmd: Command) -> int:
    cfg = _resolve_config(cmd)
    problem = build_problem(cfg)
    trace = run(cfg, problem)
    out = run_dir(output_root(cmd.output_root), cfg)
    write_trace(trace, out / "trace.csv")
    write_gap(gen_gap([trace]), out / "gap.csv")
    write_manifest(
        out / "manifest.json", config_hash(cfg), cfg.seed, "run", _run_manifest_extra(cfg, problem)
    )
    print(f"wrote {out}")
    return 0


def _execute_pair(cmd: Command) -> int:
    cfg = _resolve_config(cmd)
    problem = build_problem(cfg)
    perturb = default_perturb(problem, cmd.perturb_agent, cmd.perturb_index, cmd.replacement_index)
    first, second, stab = run_pair(cfg, perturb, problem)
    out = run_dir(output_root(cmd.output_root), cfg)
    write_trace(first, out / "trace.csv", stab)
    write_trace(second, out / "trace_perturbed.csv", stab)
    write_gap(gen_gap([first]), out / "gap.csv")
    extra = _run_manifest_extra(cfg, problem)
    extra["perturb"] = perturb.dict()
    extra["first_draw_step"] = first_draw_step(
        cfg.seed, perturb.agent, perturb.index, cfg.data.Z, cfg.batch_size, cfg.steps
    )
    write_manifest(out / "manifest.json", config_hash(cfg), cfg.seed, "pair", extra)
    print(f"wrote {out}")
    return 0


def _execute_sweep(cmd: Command) -> int:
    cfg = _resolve_config(cmd)
    root = output_root(cmd.output_root)
    results = sweep(cfg, cmd.axis, cmd.values, mode=cmd.mode, workers=cmd.workers)
    for index, res in enumerate(results):
        if res.status != "ok" or res.trace is None:
            continue
        out = root / f"{res.config_hash}-s{res.seed}"
        stab = res.pair.stability if res.pair is not None else None
        write_trace(res.trace, out / "trace.csv", stab)
        write_gap(gen_gap([res.trace]), out / "gap.csv")
        run_cfg = apply_axis(cfg, cmd.axis, res.value, index)
        write_manifest(
            out / "manifest.json", res.config_hash, res.seed, f"sweep-{cmd.mode}",
            {
                "config": run_cfg.dict(),
                "byzantine_ids": build_roles(run_cfg).byzantine,
                "axis": cmd.axis,
                "value": res.value,
            },
        )
    summary_dir = run_dir(root, cfg) / f"sweep-{cmd.axis}"
    write_summary(results, summary_dir / "summary.csv")
    write_manifest(
        summary_dir / "manifest.json", config_hash(cfg), cfg.seed, "sweep",
        {
            "axis": cmd.axis,
            "values": cmd.values,
            "mode": cmd.mode,
            "runs": [
                {"value": r.value, "seed": r.seed, "status": r.status, "config_hash": r.config_hash}
                for r in results
            ],
        },
    )
    push_metrics(job_name="byzantine_dsgd_sweep", grouping_key={"axis": cmd.axis})
    failed = [r.value for r in results if r.status != "ok"]
    print(f"wrote {summary_dir}")
    if failed:
        print(f"failed values: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _execute_bounds(cmd: Command) -> int:
    rows = bound_curve(cmd.theorem, cmd.bound_inputs, cmd.ks, cmd.consensus_c)
    print("k,bound")
    for k, b in rows:
        print(f"{k!r},{b!r}")
    if cmd.out is not None:
        write_bounds(rows, cmd.out)
    return 0


def _execute_check(cmd: Command) -> int:
    n = cmd.honest + cmd.byzantine
    if cmd.graph_kind == "complete":
        g = complete_graph(n)
    else:
        g = gen_erdos_renyi(n, cmd.p, cmd.seed)
    roles = RoleAssignment.random(n, cmd.byzantine, cmd.seed)
    rule = cmd.aggregation
    if rule.weights == "uniform":
        W = uniform_weights(g, roles)
    else:
        W = build_metropolis_weights(g, roles)
    rho_hat = estimate_contraction(rule, g, roles, W, cmd.trials, cmd.seed, dim=cmd.dim)
    summary = spectral_summary(W)
    print(f"rule={rule.rule} honest={cmd.honest} byzantine={cmd.byzantine} graph={cmd.graph_kind}")
    print(f"rho_hat={rho_hat!r}")
    print(f"rho_star={summary.rho_star!r}")
    print(f"beta={summary.beta!r}")
    print(f"chi={summary.chi!r}")
    if rule.rule == "ios" and cmd.graph_kind == "complete":
        _, rho_ref, _ = ios_complete_reference(cmd.honest, cmd.byzantine)
        print(f"rho_reference={rho_ref!r}")
    print("PASS" if rho_hat < summary.rho_star else "FAIL")
    return 0


HANDLERS = {
    "run": _execute_run,
    "pair": _execute_pair,
    "sweep": _execute_sweep,
    "bounds": _execute_bounds,
    "check": _execute_check,
}


def execute(cmd: Command) -> int:
    """Run a validated command; returns the process exit code."""
    if cmd.metrics_port is not None:
        start_metrics_server(cmd.metrics_port)
    if cmd.pushgateway is not None:
        configure_pushgateway(cmd.pushgateway)
    return HANDLERS[cmd.kind](cmd)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cmd = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=getattr(logging, cmd.log_level), format=LOG_FORMAT)
    try:
        return execute(cmd)
    except SimulationError as e:
        print(f"error [{e.qualified_name}]: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"error [config.ValidationError]: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
