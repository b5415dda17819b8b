"""Command-line harness: run scenarios, sweeps, ad-hoc solver problems and the DDS service."""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from app.config import (
    ScenarioConfig,
    apply_overrides,
    catalog,
    load_scenario,
    parse_override,
    resolve_seed,
    validate_config,
)
from app.errors import ConfigurationError, Infeasible
from app.services import experiments
from app.services.solver import problem_from_json, solution_to_json, solve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORTED = 3


def _load(args) -> tuple[ScenarioConfig, str]:
    if args.config:
        cfg = load_scenario(args.config)
        name = Path(args.config).stem
    else:
        preset = catalog.get_preset(args.preset)
        if preset is None:
            raise ConfigurationError(f"unknown preset: {args.preset}")
        cfg, name = preset.cfg, preset.id
    cfg = resolve_seed(apply_overrides(cfg, args.set))
    violations = validate_config(cfg)
    if violations:
        raise ConfigurationError(f"{len(violations)} invalid setting(s)", violations)
    return cfg, name


def _report_config_error(exc: ConfigurationError) -> int:
    print(f"error: {exc}", file=sys.stderr)
    for violation in exc.violations:
        print(f"  {violation}", file=sys.stderr)
    return EXIT_INVALID


def cmd_run(args) -> int:
    try:
        cfg, name = _load(args)
    except ConfigurationError as exc:
        return _report_config_error(exc)
    out_dir = Path(args.out) if args.out else Path("runs") / name
    summary, _ = experiments.run_scenario(cfg, out_dir, emit=tuple(args.emit))
    print(json.dumps({"jct": summary["jct"], "aborted": summary["aborted"], "out": str(out_dir)}))
    return EXIT_ABORTED if summary["aborted"] else EXIT_OK


def _parse_values(raw: str) -> list:
    values = []
    for item in raw.split(","):
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return values


def cmd_sweep(args) -> int:
    try:
        cfg, name = _load(args)
    except ConfigurationError as exc:
        return _report_config_error(exc)
    preset = catalog.get_preset(args.preset) if args.preset else None
    if args.axis:
        spec = experiments.SweepSpec(axis=args.axis, values=_parse_values(args.values))
    elif preset is not None and preset.sweep:
        spec = experiments.SweepSpec.from_dict(preset.sweep)
    else:
        print("error: --axis and --values are required for this preset", file=sys.stderr)
        return EXIT_INVALID
    if args.policies:
        spec.series = "policy"
        spec.series_values = args.policies.split(",")
    if args.repeat is not None:
        spec.repeat = args.repeat
    try:
        rows = experiments.sweep(cfg, spec, workers=args.workers)
    except ConfigurationError as exc:
        return _report_config_error(exc)
    out = Path(args.out) if args.out else Path("runs") / f"{name}-sweep.csv"
    experiments.write_sweep(out, rows)
    print(f"{'axis':>12} {'series':>20} {'mean':>12} {'std':>10} {'speedup':>8}")
    for row in rows:
        print(f"{row.axis_value!s:>12} {row.series_value!s:>20} {row.mean:12.1f} {row.std:10.1f} {row.speedup:8.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_presets(args) -> int:
    rows = experiments.list_presets(catalog)
    width = max(len(pid) for pid, _ in rows)
    for pid, description in rows:
        print(f"{pid:<{width}}  {description}")
    return EXIT_OK


def cmd_solve(args) -> int:
    with open(args.problem, "r", encoding="utf-8") as f:
        problem = problem_from_json(json.load(f))
    try:
        solution = solve(problem)
    except Infeasible as exc:
        print(json.dumps({"error": str(exc), "nearest": list(exc.nearest) if exc.nearest else None}))
        return EXIT_INVALID
    print(json.dumps(solution_to_json(solution)))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        _load(args)
    except ConfigurationError as exc:
        return _report_config_error(exc)
    print("ok")
    return EXIT_OK


def cmd_dds_serve(args) -> int:
    from app.database import init_db
    from app.main import configure
    from app.services.wire import serve

    try:
        cfg, _ = _load(args)
    except ConfigurationError as exc:
        return _report_config_error(exc)
    init_db()
    state = configure(cfg, job=args.job, persist=not args.no_persist)
    try:
        asyncio.run(serve(state.dds.handle, args.host, args.port))
    except KeyboardInterrupt:
        logger.info("dds service stopped")
    return EXIT_OK


def _add_source(parser: argparse.ArgumentParser, required: bool = True):
    source = parser.add_mutually_exclusive_group(required=required)
    source.add_argument("--preset", help="preset id from config/config.yaml")
    source.add_argument("--config", help="scenario JSON file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. detection.lambda=1.5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antdt", description=__doc__)
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario")
    _add_source(run)
    run.add_argument("--out", help="output directory (default runs/<name>)")
    run.add_argument("--emit", action="append", default=[], choices=[experiments.FIG_TRACE])
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="compare policies over an axis")
    _add_source(sweep)
    sweep.add_argument("--axis", help="dotted key to vary")
    sweep.add_argument("--values", default="", help="comma-separated axis values")
    sweep.add_argument("--policies", help="comma-separated policies")
    sweep.add_argument("--repeat", type=int, default=None, help="seeds per cell (default 3)")
    sweep.add_argument("--workers", type=int, default=None, help="process pool size")
    sweep.add_argument("--out", help="CSV path")
    sweep.set_defaults(func=cmd_sweep)

    presets = sub.add_parser("presets", help="list shipped presets")
    presets.set_defaults(func=cmd_presets)

    solve_cmd = sub.add_parser("solve", help="solve a batch allocation problem file")
    solve_cmd.add_argument("problem", help="JSON problem file")
    solve_cmd.set_defaults(func=cmd_solve)

    validate = sub.add_parser("validate", help="check a scenario without running it")
    _add_source(validate)
    validate.set_defaults(func=cmd_validate)

    serve = sub.add_parser("dds-serve", help="run the shard ledger as a TCP service")
    _add_source(serve)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=7070)
    serve.add_argument("--job", default="default")
    serve.add_argument("--no-persist", action="store_true")
    serve.set_defaults(func=cmd_dds_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "set", None):
        try:
            for item in args.set:
                parse_override(item)
        except ConfigurationError as exc:
            return _report_config_error(exc)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
