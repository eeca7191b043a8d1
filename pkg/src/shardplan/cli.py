"""Command-line front end: generate, calibrate, plan, simulate, compare.

Exit status: 0 on success, 2 for usage errors or unreadable input files,
3 parse error, 4 validation error, 5 model does not fit, 6 underdetermined
calibration, 1 anything else the planner refuses (e.g. search too large).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .costs import (
    Coefficients,
    CostOptions,
    DEFAULT_CHECKPOINT_FRACTION,
    dump_coefficients,
    dump_measurements,
    fit_coefficients,
    parse_coefficients,
    parse_measurements,
    synthesize_measurements,
)
from .errors import PlannerError
from .model import DeviceSpec, dump_device_spec, dump_model_spec, generate_family, parse_device_spec, parse_model_spec
from .scheduler import (
    DEFAULT_BATCH_CAP,
    GranularityPolicy,
    dump_plan,
    parse_plan,
    plan_report,
    schedule,
    schedule_baselines,
)
from .simulator import export_trace, simulate

logger = logging.getLogger("shardplan")

EXIT_USAGE = 2
GIB = 1 << 30


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write(path: str | None, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from None
    logger.info("wrote %s", path)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def _granularity(text: str) -> GranularityPolicy:
    """``none``, ``fixed:S`` or ``auto:BYTES[:S_MAX]``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "none" and not rest:
            return GranularityPolicy()
        if kind == "fixed":
            s = int(rest)
            if s < 1:
                raise ValueError
            return GranularityPolicy(fixed=s)
        if kind == "auto":
            budget, _, s_max = rest.partition(":")
            budget_bytes = float(budget)
            if budget_bytes <= 0:
                raise ValueError
            if s_max:
                if int(s_max) < 1:
                    raise ValueError
                return GranularityPolicy(surge_budget_bytes=budget_bytes, s_max=int(s_max))
            return GranularityPolicy(surge_budget_bytes=budget_bytes)
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"granularity must be none, fixed:S or auto:BYTES[:S_MAX], got {text!r}")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        v = 0
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        v = -1.0
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"expected a number in [0, 1], got {text!r}")
    return v


def _load_inputs(args):
    model = parse_model_spec(_read(args.model))
    device = parse_device_spec(_read(args.device))
    if getattr(args, "coeffs", None):
        coeffs = parse_coefficients(_read(args.coeffs))
    else:
        coeffs = Coefficients.from_device(model, device)
    return model, device, coeffs


def _cost_options(args) -> CostOptions:
    return CostOptions(
        checkpoint=args.checkpoint,
        checkpoint_activation_fraction=args.checkpoint_fraction,
        split_penalty_s=args.split_penalty,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_model(args) -> int:
    kind = args.kind.upper()
    if kind == "IC":
        if args.hidden is None:
            raise UsageError("ic needs --hidden with a comma-separated list of sizes")
        hidden = args.hidden
    else:
        if args.hidden is None or len(args.hidden) != 1:
            raise UsageError(f"{args.kind} needs --hidden with a single size")
        if args.layers is None:
            raise UsageError(f"{args.kind} needs --layers")
        hidden = args.hidden[0]
    model = generate_family(
        kind, args.layers, hidden, sequence_length=args.sequence_length, bytes_per_element=args.bytes_per_element
    )
    _write(args.out, dump_model_spec(model))
    return 0


def cmd_gen_device(args) -> int:
    device = DeviceSpec(
        n_workers=args.workers,
        mem_limit_bytes=int(args.mem_gib * GIB),
        alpha_s=args.alpha,
        beta_s_per_byte=1.0 / (args.bandwidth_gbps * 1e9),
        gamma_s_per_flop=1.0 / (args.tflops * 1e12),
        bytes_per_param_state=args.bytes_per_param_state,
        fixed_overhead_bytes=int(args.overhead_gib * GIB),
    )
    _write(args.out, dump_device_spec(device))
    return 0


def cmd_gen_measurements(args) -> int:
    model = parse_model_spec(_read(args.model))
    device = parse_device_spec(_read(args.device))
    coeffs = Coefficients.from_device(model, device)
    records = synthesize_measurements(
        model,
        device.n_workers,
        coeffs,
        batch_sizes=args.batch_sizes,
        slices=args.slices,
        noise=args.noise,
        seed=args.seed,
    )
    _write(args.out, dump_measurements(records))
    return 0


def cmd_calibrate(args) -> int:
    model = parse_model_spec(_read(args.model))
    if args.device:
        n_workers = parse_device_spec(_read(args.device)).n_workers
    elif args.workers:
        n_workers = args.workers
    else:
        raise UsageError("calibrate needs --device or --workers")
    records = parse_measurements(_read(args.measurements))
    pinned = {}
    if args.pin_alpha is not None:
        pinned["alpha_s"] = args.pin_alpha
    if args.pin_beta is not None:
        pinned["beta_s_per_byte"] = args.pin_beta
    coeffs = fit_coefficients(records, model, n_workers, pinned=pinned)
    _write(args.out, dump_coefficients(coeffs))
    return 0


def cmd_plan(args) -> int:
    model, device, coeffs = _load_inputs(args)
    options = _cost_options(args)
    plan = schedule(
        model,
        device,
        coeffs,
        granularity=args.granularity,
        batch_cap=args.batch_cap,
        growth=args.growth,
        options=options,
    )
    baselines = None
    if not args.no_baselines:
        baselines = schedule_baselines(
            model,
            device,
            coeffs,
            options=options,
            granularity=GranularityPolicy(overrides=plan.granularities()),
            batch_cap=args.batch_cap,
            growth=args.growth,
        )
    _write(args.out, dump_plan(plan, baselines))
    if baselines is not None:
        report = plan_report(plan, model, device, coeffs, baselines)
        _write(args.report, report.to_text())
    return 0


def cmd_simulate(args) -> int:
    model, device, coeffs = _load_inputs(args)
    plan = parse_plan(_read(args.plan))
    report = simulate(plan, model, device, coeffs, overlap=args.overlap)
    _write(args.out, export_trace(report))
    summary = report.to_dict()
    summary["planned_iter_time_s"] = plan.iter_time_s
    _write(args.report, json.dumps(summary, indent=2))
    return 0


def cmd_compare(args) -> int:
    device = parse_device_spec(_read(args.device))
    options = _cost_options(args)
    rows = []
    for path in args.models:
        model = parse_model_spec(_read(path))
        coeffs = Coefficients.from_device(model, device)
        plan = schedule(model, device, coeffs, granularity=args.granularity, batch_cap=args.batch_cap, options=options)
        baselines = schedule_baselines(
            model,
            device,
            coeffs,
            options=options,
            granularity=GranularityPolicy(overrides=plan.granularities()),
            batch_cap=args.batch_cap,
        )
        rows.append(plan_report(plan, model, device, coeffs, baselines))

    header = f"{'model':<24} {'label':<14} {'optimal':>12} {'all-ZDP':>12} {'all-DP':>12} {'vs ZDP':>8} {'vs DP':>8}"
    lines = [f"system throughput (samples/s) on {device.n_workers} workers", header]
    records = []
    for r in rows:
        cells = []
        for name in ("all_zdp", "all_dp"):
            t = r.system_throughput(r.baselines.get(name))
            cells.append("OOM" if t is None else f"{t:.6g}")
        ratios = [r.ratio(name) for name in ("all_zdp", "all_dp")]
        ratio_cells = ["-" if x is None else f"{x:.3f}x" for x in ratios]
        lines.append(
            f"{r.model_name:<24} {r.label:<14} {r.system_throughput(r.plan):>12.6g} "
            f"{cells[0]:>12} {cells[1]:>12} {ratio_cells[0]:>8} {ratio_cells[1]:>8}"
        )
        records.append(r.to_dict() | {"batch_size": r.plan.batch_size})
    _write(args.out, "\n".join(lines))
    if args.json:
        _write(args.json, json.dumps(records, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", action="store_true", help="activation checkpointing cost variant")
    p.add_argument(
        "--checkpoint-fraction",
        type=_fraction,
        default=DEFAULT_CHECKPOINT_FRACTION,
        help="share of activation memory kept under checkpointing (default %(default)s)",
    )
    p.add_argument("--split-penalty", type=float, default=0.0, help="seconds charged per extra slice")
    p.add_argument(
        "--granularity",
        type=_granularity,
        default=GranularityPolicy(),
        help="slice policy: none, fixed:S or auto:BYTES[:S_MAX] (default none)",
    )
    p.add_argument("--batch-cap", type=_positive_int, default=DEFAULT_BATCH_CAP)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardplan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a synthetic model spec (nd, ws, ic)")
    p.add_argument("kind", choices=["nd", "ws", "ic"])
    p.add_argument("--layers", type=_positive_int)
    p.add_argument("--hidden", type=_int_list, help="hidden size; ic takes a comma-separated list (one per stage)")
    p.add_argument("--sequence-length", type=_positive_int, default=512)
    p.add_argument("--bytes-per-element", type=int, default=4, choices=[2, 4, 8])
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-device", help="write a device spec")
    p.add_argument("--workers", type=_positive_int, default=8)
    p.add_argument("--mem-gib", type=float, default=8.0)
    p.add_argument("--alpha", type=float, default=1e-5, help="per-step latency, seconds")
    p.add_argument("--bandwidth-gbps", type=float, default=10.0, help="link bandwidth, GB/s")
    p.add_argument("--tflops", type=float, default=20.0, help="sustained compute, TFLOP/s")
    p.add_argument("--bytes-per-param-state", type=_positive_int, default=16)
    p.add_argument("--overhead-gib", type=float, default=0.0)
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_gen_device)

    p = sub.add_parser("gen-measurements", help="synthesize operator timings from the cost model")
    p.add_argument("--model", required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 2, 4])
    p.add_argument("--slices", type=_positive_int, default=4)
    p.add_argument("--noise", type=float, default=0.0, help="relative std of multiplicative noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_gen_measurements)

    p = sub.add_parser("calibrate", help="fit cost coefficients to measurements")
    p.add_argument("--model", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--device", help="device spec (for the worker count)")
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--pin-alpha", type=float)
    p.add_argument("--pin-beta", type=float)
    p.add_argument("--out", "-o")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("plan", help="search the throughput-optimal plan and batch size")
    p.add_argument("--model", required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--coeffs", help="coefficients file (default: derived from the device spec)")
    _add_cost_flags(p)
    p.add_argument("--growth", choices=["linear", "geometric"], default="linear")
    p.add_argument("--no-baselines", action="store_true", help="skip the all-DP/all-ZDP comparison")
    p.add_argument("--out", "-o", help="plan file (default stdout)")
    p.add_argument("--report", help="human-readable report (default stdout)")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="simulate one iteration of a plan")
    p.add_argument("--model", required=True)
    p.add_argument("--device", required=True)
    p.add_argument("--coeffs")
    p.add_argument("--plan", required=True)
    p.add_argument("--overlap", action="store_true", help="prefetch gathers one step ahead of compute")
    p.add_argument("--out", "-o", help="CSV trace (default stdout)")
    p.add_argument("--report", help="JSON summary (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="tabulate optimal vs all-ZDP vs all-DP across models")
    p.add_argument("models", nargs="+")
    p.add_argument("--device", required=True)
    _add_cost_flags(p)
    p.add_argument("--out", "-o")
    p.add_argument("--json", help="also write per-model records as JSON")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
