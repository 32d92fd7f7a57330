"""Command-line front end.

Every subcommand writes its outputs plus ``manifest.json`` into
``--out-dir``. ``eigenliquidity --manifest OUT/manifest.json`` replays a run
with the recorded arguments. Exit codes: 0 success, 1 numerical failure,
2 input error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationConfig, CalibrationError, run_box2_pipeline
from .cost import eigencost, schedule_cost
from .elm import check_no_manipulation, liquidity_spectrum, model_from_correlation, model_invariants
from .errors import ConfigError, EigenLiquidityError, InputError
from .fileio import (
    RunManifest,
    align_to_model,
    read_correlation,
    read_json,
    read_market_series,
    read_model,
    read_schedule,
    read_targets,
    write_csv,
    write_json,
    write_market_series,
    write_matrix,
    write_model,
    write_schedule,
)
from .kernel import DecayKernel, TimeGrid
from .optimizer import (
    optimal_portfolio_schedule,
    profile_cost_comparison,
    solve_general_kkt,
    solve_optimal_profile,
    standard_profiles,
    synchronous_cost,
)
from .synthgen import bias_cost_ratio_report, build_world, default_market_risk, generate_market

log = logging.getLogger("eigenliquidity")

# arguments that describe how a run was invoked rather than what it computes
_META_KEYS = {"command", "handler", "config", "manifest", "verbose"}


class _Run:
    """Collects inputs, outputs and resolved config for the manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out_dir)
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.resolved: dict = {}

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs[name] = str(path)
        return path

    def input(self, key: str, path) -> Path:
        if path is None:
            raise InputError(f"missing required option --{key.replace('_', '-')}")
        self.inputs[key] = str(path)
        return Path(path)


# ---------------------------------------------------------------- helpers


def _kernel(args, fallback: DecayKernel | None = None) -> DecayKernel:
    base = fallback or DecayKernel(0.2, 90.0)
    alpha = base.alpha if args.alpha is None else args.alpha
    tau0 = base.tau0 if args.tau0 is None else args.tau0
    return DecayKernel(alpha, tau0)


def _grid(args) -> TimeGrid:
    return TimeGrid(args.horizon_seconds, args.n_bins)


def _load_model(run: _Run, args):
    if getattr(args, "model", None):
        return read_model(run.input("model", args.model))
    if getattr(args, "correlation", None):
        rho, ids = read_correlation(run.input("correlation", args.correlation))
        if args.liquidity is None:
            raise InputError("a correlation input needs --liquidity (uniform mode liquidity in $)")
        return model_from_correlation(rho, 1.0 / args.liquidity, instrument_ids=ids)
    raise InputError("missing required option --model (or --correlation with --liquidity)")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_simulate(run: _Run, args):
    doc = {}
    if args.world:
        doc = read_json(run.input("world", args.world))
        if not isinstance(doc, dict):
            raise ConfigError("world config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    for key in ("n_assets", "n_days", "noise_share"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    world = build_world(doc)
    run.resolved = world.to_dict()
    run.args.seed = world.seed
    series = generate_market(world)
    write_market_series(run.output("market.csv"), series)
    run.outputs["market.json"] = str(run.out / "market.json")
    write_model(run.output("truth_model.json"), world.model)
    log.info("simulated %d instruments x %d bins", series.n_assets, series.length)


def cmd_calibrate(run: _Run, args):
    series = read_market_series(run.input("input", args.input), args.series_manifest)
    cfg = CalibrationConfig(
        bin_seconds=args.bin_seconds,
        session_seconds=args.session_seconds,
        max_lag=args.max_lag,
        eigen_floor=args.eigen_floor,
        ridge=args.ridge,
        kernel_source=args.kernel_source,
        force_negative=args.force_negative,
    )
    run.resolved = cfg.to_dict()
    try:
        report = run_box2_pipeline(series, cfg)
    except CalibrationError as exc:
        write_json(run.output("calibration_report.partial.json"),
                   {"failed_step": exc.step, "error": str(exc.cause), **exc.partial.to_dict()})
        raise
    write_json(run.output("calibration_report.json"), report.to_dict())
    kf = report.kernel_fit
    fitted = kf.kernel(kf.lags)
    write_csv(run.output("kernel_table.csv"), ["lag_seconds", "phi_table", "phi_fit", "derivative_table"],
              zip(kf.lags.tolist(), kf.phi_table.tolist(), fitted.tolist(), kf.derivative.tolist()))
    mode_rows = [[m["mode"], m["eigenvalue"], _blank(m["liquidity_g"]), _blank(m["numerator"]),
                  _blank(m["denominator"]), m["status"]] for m in report.to_dict()["modes"]]
    write_csv(run.output("modes.csv"),
              ["mode", "eigenvalue", "liquidity_g", "numerator", "denominator", "status"], mode_rows)
    model = report.model()
    write_model(run.output("model.json"), model)
    _write_spectrum(run.output("liquidity_spectrum.csv"), model)


def _blank(value):
    return "" if value is None else value


def _write_spectrum(path, model):
    rows = [[a, lam, g, "inf" if np.isinf(liq) else liq]
            for a, (lam, g, liq) in enumerate(liquidity_spectrum(model))]
    write_csv(path, ["mode", "eigenvalue", "liquidity_g", "mode_liquidity_dollars"], rows)


def cmd_optimize(run: _Run, args):
    model = _load_model(run, args)
    if args.alpha is not None or args.tau0 is not None:
        model = model.__class__(model.eigen, model.liquidities, _kernel(args, model.kernel),
                                model.volatilities, model.instrument_ids)
    ids, values = read_targets(run.input("targets", args.targets))
    targets = align_to_model(ids, values, model, fill=0.0)
    grid = _grid(args)
    profile = solve_optimal_profile(model.kernel, grid)
    if args.general:
        schedule = solve_general_kkt(targets, model, grid)
    else:
        schedule = optimal_portfolio_schedule(targets, model, grid, profile)
    run.resolved = {"kernel": model.kernel.to_dict(), "grid": grid.to_dict(), "general": args.general}
    write_schedule(run.output("schedule.csv"), schedule)
    run.outputs["schedule.grid.json"] = str(run.out / "schedule.grid.json")
    write_json(run.output("optimize_summary.json"), {
        "cost": schedule_cost(schedule, model),
        "closed_form_cost": synchronous_cost(targets, model, profile),
        "profile_norm": profile.norm,
        "targets": dict(zip(model.instrument_ids, targets.tolist())),
    })


def cmd_compare_profiles(run: _Run, args):
    kernel = _kernel(args)
    grid = _grid(args)
    run.resolved = {"kernel": kernel.to_dict(), "grid": grid.to_dict(),
                    "midday_window_seconds": args.midday_window}
    rows = profile_cost_comparison(standard_profiles(grid, args.midday_window), kernel, grid)
    write_csv(run.output("profile_costs.csv"), ["profile", "kernel_norm", "relative_cost"],
              [[name, norm, rel] for name, norm, rel in rows])
    for name, _, rel in rows:
        print(f"{name:20s} {100 * rel:+7.2f}%")


def cmd_cost(run: _Run, args):
    model = _load_model(run, args)
    schedule = read_schedule(run.input("schedule", args.schedule))
    if schedule.instrument_ids is not None and tuple(schedule.instrument_ids) != model.instrument_ids:
        rates = align_to_model(schedule.instrument_ids, list(schedule.rates), model, "schedule columns")
        schedule = schedule.__class__(schedule.grid, rates, instrument_ids=model.instrument_ids)
    total = schedule_cost(schedule, model)
    doc = {"cost": total, "totals": dict(zip(model.instrument_ids, schedule.totals.tolist()))}
    if np.all(model.liquidities >= 0):
        doc["per_mode_cost"] = eigencost(schedule, model).per_mode.tolist()
    if args.notional is not None:
        doc["cost_bps"] = total / args.notional * 1e4
    write_json(run.output("cost.json"), doc)
    print(f"cost {total!r}")


def cmd_bias_sweep(run: _Run, args):
    seed = 0 if args.seed is None else args.seed
    run.args.seed = seed
    if args.model or args.correlation:
        model = _load_model(run, args)
    else:
        world = build_world({"n_assets": args.n_assets, "seed": seed, "top_ratio": args.top_ratio})
        model = world.model
    if args.market_risk:
        ids, values = read_targets(run.input("market_risk", args.market_risk))
        qm = align_to_model(ids, values, model, "market risk volumes")
    else:
        qm = default_market_risk(model.n, np.random.SeedSequence(seed, spawn_key=(2000,)))
    grid = _grid(args)
    norm = solve_optimal_profile(model.kernel, grid).norm
    betas, parts = _floats(args.betas), _floats(args.participations)
    run.resolved = {"model": model.to_dict(), "market_risk": qm.tolist(), "profile_norm": norm}
    rows = bias_cost_ratio_report(model, qm, betas, parts, norm, args.draws, seed, args.relative_volatility)
    header = list(rows[0])
    write_csv(run.output("bias_sweep.csv"), header, [[r[h] for h in header] for r in rows])


def cmd_check_model(run: _Run, args):
    model = _load_model(run, args)
    checks = model_invariants(model)
    report = check_no_manipulation(model).to_dict()
    write_json(run.output("check.json"), {"checks": checks, "manipulation": report})
    write_matrix(run.output("impact_matrix.csv"),
                 (model.eigen.vectors * model.impact_eigenvalues) @ model.eigen.vectors.T,
                 model.instrument_ids)
    _write_spectrum(run.output("liquidity_spectrum.csv"), model)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    failed = [k for k, ok in checks.items() if not ok]
    if failed:
        raise ConfigError(f"model fails checks: {', '.join(failed)}")


# ---------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--out-dir", default="out", help="directory for outputs and manifest.json")
    p.add_argument("--config", default=None, help="JSON file of option defaults for this subcommand")
    p.add_argument("-v", "--verbose", action="store_true")


def _kernel_flags(p):
    p.add_argument("--alpha", type=float, default=None, help="kernel exponent (default 0.2)")
    p.add_argument("--tau0", type=float, default=None, help="kernel time offset in seconds (default 90)")


def _grid_flags(p):
    p.add_argument("--horizon-seconds", type=float, default=8 * 3600.0)
    p.add_argument("--n-bins", type=int, default=96)


def _model_flags(p):
    p.add_argument("--model", default=None, help="model JSON")
    p.add_argument("--correlation", default=None, help="correlation CSV/JSON (uniform liquidity model)")
    p.add_argument("--liquidity", type=float, default=None, help="uniform mode liquidity 1/g in $")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eigenliquidity", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--manifest", default=None, help="replay the run recorded in a manifest")
    parser.add_argument("--out-dir", dest="replay_out_dir", default=None,
                        help="with --manifest: write the replay elsewhere")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="generate a synthetic market")
    _common(p)
    p.add_argument("--world", default=None, help="world config JSON")
    p.add_argument("--n-assets", type=int, default=None)
    p.add_argument("--n-days", type=int, default=None)
    p.add_argument("--noise-share", type=float, default=None)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit the model to a market series")
    _common(p)
    p.add_argument("--input", default=None, help="long-format market CSV")
    p.add_argument("--series-manifest", default=None, help="series manifest JSON (default: CSV name .json)")
    p.add_argument("--bin-seconds", type=float, default=None)
    p.add_argument("--session-seconds", type=float, default=8 * 3600.0)
    p.add_argument("--max-lag", type=int, default=60)
    p.add_argument("--eigen-floor", type=float, default=1e-4, help="relative to the top eigenvalue")
    p.add_argument("--ridge", type=float, default=1e-6)
    p.add_argument("--kernel-source", choices=("fit", "table"), default="fit")
    p.add_argument("--force-negative", action="store_true")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("optimize", help="optimal schedule for target positions")
    _common(p)
    _model_flags(p)
    _kernel_flags(p)
    _grid_flags(p)
    p.add_argument("--targets", default=None, help="CSV with header instrument,target ($ risk)")
    p.add_argument("--general", action="store_true", help="solve the full KKT system")
    p.set_defaults(handler=cmd_optimize)

    p = sub.add_parser("compare-profiles", help="relative cost of standard profiles")
    _common(p)
    _kernel_flags(p)
    _grid_flags(p)
    p.add_argument("--midday-window", type=float, default=7200.0, help="seconds")
    p.set_defaults(handler=cmd_compare_profiles)

    p = sub.add_parser("cost", help="expected cost of a schedule")
    _common(p)
    _model_flags(p)
    p.add_argument("--schedule", default=None, help="schedule CSV with .grid.json sidecar")
    p.add_argument("--notional", type=float, default=None, help="traded notional in $, for bps")
    p.set_defaults(handler=cmd_cost)

    p = sub.add_parser("bias-sweep", help="cost of biased random orders")
    _common(p)
    _model_flags(p)
    _grid_flags(p)
    p.add_argument("--n-assets", type=int, default=10)
    p.add_argument("--top-ratio", type=float, default=None)
    p.add_argument("--market-risk", default=None, help="CSV instrument,target of daily risk volumes")
    p.add_argument("--betas", default="-1,-0.5,0,0.5,1")
    p.add_argument("--participations", default="0.01,0.05,0.1")
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--relative-volatility", type=float, default=0.02)
    p.set_defaults(handler=cmd_bias_sweep)

    p = sub.add_parser("check-model", help="validate a model file")
    _common(p)
    _model_flags(p)
    p.set_defaults(handler=cmd_check_model)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise ConfigError(f"unknown subcommand {name!r}")


def _apply_defaults(parser, command: str, values: dict, source: str):
    sub = _subparser(parser, command)
    dests = {a.dest for a in sub._actions}
    unknown = set(values) - dests
    if unknown:
        raise ConfigError(f"{source}: unknown options {sorted(unknown)}")
    sub.set_defaults(**values)


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.manifest:
        man = RunManifest.from_dict(read_json(args.manifest))
        _apply_defaults(parser, man.subcommand, man.arguments, args.manifest)
        args = parser.parse_args([man.subcommand])
        if parser.parse_args(argv).replay_out_dir:
            args.out_dir = parser.parse_args(argv).replay_out_dir
        return args
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise InputError("no subcommand given")
    if args.config:
        cfg = read_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        _apply_defaults(parser, args.command, {k.replace("-", "_"): v for k, v in cfg.items()},
                        args.config)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else argv)
    except EigenLiquidityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # argparse usage errors
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args)
    status = 0
    try:
        args.handler(run, args)
    except EigenLiquidityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    arguments = {k: v for k, v in vars(args).items() if k not in _META_KEYS and k != "replay_out_dir"}
    manifest = RunManifest(
        subcommand=args.command,
        arguments=arguments,
        seed=args.seed,
        version=__version__,
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        inputs=run.inputs,
        outputs=run.outputs,
        resolved_config=run.resolved,
    )
    try:
        write_json(run.out / "manifest.json", {**manifest.to_dict(), "exit_code": status})
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        status = status or 2
    return status


if __name__ == "__main__":
    sys.exit(main())
