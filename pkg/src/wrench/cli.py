"""``wrench`` command line: one binary, one role per invocation.

Exit codes: 0 success, 2 configuration error, 3 run failure, 4 verification
failure. Diagnostics go to stderr (level from ``WRENCH_LOG_LEVEL``); reports
go to stdout or files.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from . import __version__
from .kvfile import KVError, as_bool, read_kv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_VERIFY = 4

log = logging.getLogger("wrench")


class ConfigError(Exception):
    pass


class RunFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value file; flags override it")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan; no traffic, no files")
    p.add_argument("--seed", type=int, help="seed for all generated traffic and fault sequences")


def _add_transport(p: argparse.ArgumentParser, kinds=("loopback", "loopback-faulty", "tcp")) -> None:
    p.add_argument("--transport", choices=kinds, default=kinds[0] if len(kinds) == 1 else "loopback")
    p.add_argument("--endpoint", help="host:port for tcp")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="wrench", description="Market-data style pub/sub load generator, latency logger and QoS verifier.")
    ap.add_argument("--version", action="version", version=f"wrench {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("publish", help="pace a workload or replay a snapshot")
    _add_common(p)
    src = p.add_argument_group("source (workload spec, rate profile, or snapshot)")
    src.add_argument("--workload", metavar="SPEC", help="workload spec file")
    src.add_argument("--profile", metavar="CSV", help="rate profile; with --workload it replaces the workload's profile")
    src.add_argument("--snapshot", metavar="FILE", help="replay a recorded snapshot instead")
    p.add_argument("--scale", type=float, help="multiply every rate by this factor")
    p.add_argument("--scale-durations", action="store_true", help="scale segment lengths as well as rates")
    p.add_argument("--duration", type=int, metavar="S", help="run only the first S seconds of the profile")
    p.add_argument("--time-scale", type=float, default=1.0, help="snapshot replay speed-up (2 = twice as fast)")
    p.add_argument("--no-restamp", action="store_true", help="replay frames byte-for-byte, keeping old send_ts_ns")
    _add_transport(p)
    p.add_argument("--drop", type=float, default=0.0, help="loopback-faulty drop probability")
    p.add_argument("--dup", type=float, default=0.0, help="loopback-faulty duplicate probability")
    p.add_argument("--reorder", type=float, default=0.0, help="loopback-faulty reorder probability")
    p.add_argument("--reorder-window", type=int, default=2)
    p.add_argument("--workers", type=int, help="publisher workers, one stream each (default: cores - 1)")
    p.add_argument("--stream-base", type=int, default=0, help="first stream id")
    p.add_argument("--spin-threshold-us", type=float, default=100.0)
    p.add_argument("--burst-cap-ms", type=float, default=1.0)
    p.add_argument("--log", default="run.wrll", help="latency log (loopback runs host the subscriber in-process)")
    p.add_argument("--manifest", help="manifest path (default: next to the log)")
    p.add_argument("--rates", help="per-second achieved-rate CSV (default: next to the manifest)")
    p.add_argument("--check-filler", action="store_true", help="subscriber re-checks every filler byte")
    p.add_argument("--live", action="store_true", help="print t,sent,rate to stderr once a second")

    p = sub.add_parser("subscribe", help="receive over tcp and log latencies")
    _add_common(p)
    _add_transport(p, ("tcp",))
    p.add_argument("--log", default="run.wrll")
    p.add_argument("--connections", type=int, default=1, help="publisher connections to wait for")
    p.add_argument("--idle-timeout", type=float, help="give up after this many idle seconds")
    p.add_argument("--check-filler", action="store_true")
    p.add_argument("--live", action="store_true", help="print t,received,rate to stderr once a second")

    p = sub.add_parser("record", help="capture a tcp feed into a snapshot file")
    _add_common(p)
    _add_transport(p, ("tcp",))
    p.add_argument("--out", default="capture.wrsn")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--connections", type=int, default=1)

    p = sub.add_parser("verify", help="QoS verdicts for a latency log")
    _add_common(p)
    p.add_argument("--log", required=False, default="run.wrll")
    p.add_argument("--manifest", help="publisher manifest (default: next to the log, if present)")
    p.add_argument("--slo-ms", type=float, default=20.0, help="latency objective in ms")
    p.add_argument("--slo-percentile", type=float, default=99.0, help="percentile the objective applies to")
    p.add_argument("--csv", metavar="FILE", help="also write the report as CSV")

    p = sub.add_parser("convert", help="binary latency log to CSV (or back)")
    _add_common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from-csv", action="store_true", help="read --log as CSV and write a binary log")

    p = sub.add_parser("report", help="latency quantile summary")
    _add_common(p)
    p.add_argument("--log", default="run.wrll")
    p.add_argument("--group-by", choices=("none", "stream", "payload_band"), default="none")
    p.add_argument("--csv", metavar="FILE", help="write the summary as CSV (ns) instead of a table (us)")

    p = sub.add_parser("gen-profile", help="emit example rate profiles")
    _add_common(p)
    p.add_argument("kind", choices=("snapshot60", "illustrative-day", "flat", "ramp"))
    p.add_argument("--rate", type=float, default=100_000.0, help="flat rate, or ramp/day peak")
    p.add_argument("--seconds", type=int, default=60, help="flat length, or ramp length")
    p.add_argument("--scale", type=float, help="multiply every rate by this factor")
    p.add_argument("--out", help="file to write (default: stdout)")

    p = sub.add_parser("scenario", help="run a committed benchmark scenario")
    _add_common(p)
    p.add_argument("name", nargs="?", help="scenario name or .conf path; omit to list")
    p.add_argument("--run-dir", help="artifact directory (default: runs/<name>-<time>)")
    p.add_argument("--factor", type=float, help="fix the rate factor instead of probing")
    p.add_argument("--transport", choices=("loopback", "loopback-faulty", "tcp"))
    return ap


# ---------------------------------------------------------------------------
# config files


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Load ``--config`` into the chosen subcommand's defaults."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(list(argv))
    if not known.config:
        return
    try:
        kv = read_kv(known.config)
    except (OSError, KVError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from None
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    cmd = next((a for a in argv if a in sub.choices), None)
    if cmd is None:
        raise ConfigError("--config needs a subcommand")
    sp = sub.choices[cmd]
    actions = {a.dest: a for a in sp._actions}
    defaults: Dict[str, object] = {}
    for key, value in kv.items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in ("help", "config"):
            raise ConfigError(f"{known.config}: '{key}' is not an option of '{cmd}'")
        try:
            if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                v: object = as_bool(value)
            elif act.type is not None:
                v = act.type(value)
            else:
                v = value
        except (TypeError, ValueError):
            raise ConfigError(f"{known.config}: bad value for '{key}': {value!r}") from None
        if act.choices is not None and v not in act.choices:
            raise ConfigError(f"{known.config}: '{key}' must be one of {', '.join(map(str, act.choices))}")
        defaults[dest] = v
    sp.set_defaults(**defaults)
    for act in sp._actions:
        if act.dest in defaults:
            act.required = False


# ---------------------------------------------------------------------------
# validation helpers


def _readable(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise ConfigError(f"{what} {path!r} does not exist")
    if not os.access(path, os.R_OK):
        raise ConfigError(f"{what} {path!r} is not readable")
    return path


def _writable(path: str, what: str) -> str:
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise ConfigError(f"{what} {path!r}: directory {d!r} does not exist")
    if not os.access(d, os.W_OK):
        raise ConfigError(f"{what} {path!r}: directory {d!r} is not writable")
    return path


def _endpoint(args) -> str:
    from .transport import parse_endpoint

    if not args.endpoint:
        raise ConfigError("--transport tcp needs --endpoint host:port")
    try:
        parse_endpoint(args.endpoint)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return args.endpoint


def _positive(value, flag: str, allow_none: bool = True):
    if value is None and allow_none:
        return
    if value is None or value <= 0:
        raise ConfigError(f"{flag} must be > 0")


# ---------------------------------------------------------------------------
# subcommands


def _build_workload(args):
    from .workload import (
        WorkloadError,
        WorkloadSpec,
        load_rate_profile,
        load_workload_spec,
        scale_profile,
        truncate_profile,
    )

    try:
        if args.workload:
            spec = load_workload_spec(_readable(args.workload, "workload spec"))
            if args.profile:
                spec = spec.with_profile(load_rate_profile(_readable(args.profile, "rate profile")))
        else:
            spec = WorkloadSpec(load_rate_profile(_readable(args.profile, "rate profile")))
        if args.seed is not None:
            import dataclasses

            spec = dataclasses.replace(spec, seed=args.seed)
        if args.scale is not None:
            spec = spec.with_profile(scale_profile(spec.profile, args.scale, durations=args.scale_durations))
        if args.duration is not None:
            spec = spec.with_profile(truncate_profile(spec.profile, args.duration))
        spec.profile.expected_total()
    except (WorkloadError, OverflowError, KVError) as exc:
        raise ConfigError(str(exc)) from None
    return spec


def cmd_publish(args) -> int:
    from .engine import PublisherOptions, default_workers, plan_streams, run_loopback, run_publisher, snapshot_info
    from .manifest import manifest_path_for
    from .transport import FaultParams, TransportConfig, TransportError, make_transport

    sources = [s for s in (args.workload or args.profile, args.snapshot) if s]
    if len(sources) != 1:
        raise ConfigError("publish needs exactly one source: --workload/--profile or --snapshot")
    if args.snapshot and (args.scale is not None or args.duration is not None):
        raise ConfigError("--scale and --duration apply to workloads; use --time-scale for snapshots")
    _positive(args.time_scale, "--time-scale")
    _positive(args.workers, "--workers")
    if args.burst_cap_ms < 0 or args.spin_threshold_us < 0:
        raise ConfigError("--burst-cap-ms and --spin-threshold-us must be >= 0")
    try:
        fault = FaultParams(args.drop, args.dup, args.reorder, args.reorder_window, args.seed or 0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.transport != "loopback-faulty" and (args.drop or args.dup or args.reorder):
        raise ConfigError("--drop/--dup/--reorder need --transport loopback-faulty")
    endpoint = _endpoint(args) if args.transport == "tcp" else None

    if args.snapshot:
        try:
            info = snapshot_info(_readable(args.snapshot, "snapshot"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        workers = 1
        plan_text = f"replay {info.frames} frames over {info.duration_ns / 1e9 / args.time_scale:.3f} s"
        source = args.snapshot
    else:
        spec = _build_workload(args)
        workers = args.workers or default_workers()
        plan = plan_streams(spec, workers, args.stream_base)
        plan_text = (
            f"{len(plan)} stream(s) x {plan[0][2]} notifications over {spec.profile.total_duration} s "
            f"(total {sum(p[2] for p in plan)})"
        )
        source = spec

    in_process = args.transport != "tcp"
    manifest_path = args.manifest or manifest_path_for(args.log)
    rates_path = args.rates or os.path.splitext(manifest_path)[0] + ".rates.csv"
    if in_process:
        _writable(args.log, "log")
    _writable(manifest_path, "manifest")
    if args.dry_run:
        print(f"dry run: {plan_text}; transport {args.transport}" + (f" {endpoint}" if endpoint else ""))
        return EXIT_OK

    opts = PublisherOptions(
        spin_threshold_us=args.spin_threshold_us,
        burst_cap_ms=args.burst_cap_ms,
        stream_base=args.stream_base,
        restamp=not args.no_restamp,
        time_scale=args.time_scale,
        live=args.live,
    )
    config = TransportConfig(args.transport, endpoint, fault)
    name = args.snapshot or args.workload or args.profile
    if in_process:
        run = run_loopback(source, args.log, config, workers, opts, check_filler=args.check_filler, source_name=name)
        manifest = run.manifest
        if manifest_path != run.manifest_path:
            manifest.write(manifest_path)
        if rates_path != run.rates_path:
            os.replace(run.rates_path, rates_path)
        sub = run.subscriber
        log.info("subscriber logged %d records (%d corrupt) to %s", sub.logged, sub.corrupt, args.log)
        if sub.aborted:
            raise RunFailure(f"subscriber failed: {sub.error}")
    else:
        transport = make_transport(config, workers)
        try:
            manifest, _ = run_publisher(source, transport, workers, opts, manifest_path, rates_path, name)
        except (OSError, TransportError) as exc:
            raise RunFailure(f"cannot publish to {endpoint}: {exc}") from None
    print(f"sent {manifest.sent_total} of {manifest.intended_total} in {manifest.elapsed_s:.3f} s "
          f"(scheduled {manifest.scheduled_s:.3f} s, slippage {100 * manifest.slippage:.4f}%)")
    print(f"manifest {manifest_path}")
    if not manifest.completed:
        raise RunFailure("publisher did not complete its schedule")
    return EXIT_OK


def cmd_subscribe(args) -> int:
    from .engine import run_subscriber
    from .transport import TcpTransport

    endpoint = _endpoint(args)
    _positive(args.connections, "--connections", allow_none=False)
    _writable(args.log, "log")
    if args.dry_run:
        print(f"dry run: listen on {endpoint} for {args.connections} connection(s); log to {args.log}")
        return EXIT_OK
    transport = TcpTransport(endpoint, expected_connections=args.connections, idle_timeout=args.idle_timeout)
    try:
        transport.bind()
    except OSError as exc:
        raise RunFailure(f"cannot listen on {endpoint}: {exc}") from None
    log.info("listening on %s:%d", *transport.address)
    stats = run_subscriber(transport, args.log, check_filler=args.check_filler, live=args.live)
    transport.close()
    print(f"received {stats.received} frames, logged {stats.logged}, corrupt {stats.corrupt} -> {args.log}")
    if stats.aborted:
        raise RunFailure(stats.error or "subscription aborted")
    return EXIT_OK


def cmd_record(args) -> int:
    from .engine import record_snapshot
    from .transport import TcpTransport

    endpoint = _endpoint(args)
    _writable(args.out, "snapshot")
    _positive(args.duration, "--duration")
    if args.dry_run:
        print(f"dry run: capture from {endpoint} into {args.out}")
        return EXIT_OK
    transport = TcpTransport(endpoint, expected_connections=args.connections)
    try:
        transport.bind()
    except OSError as exc:
        raise RunFailure(f"cannot listen on {endpoint}: {exc}") from None
    try:
        info = record_snapshot(transport.subscribe(), args.out, args.duration)
    except Exception as exc:  # transport or disk failure
        raise RunFailure(f"capture failed: {exc}") from None
    finally:
        transport.close()
    print(f"captured {info.frames} frames spanning {info.duration_ns / 1e9:.3f} s -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .latlog import LogError, log_info
    from .manifest import RunManifest, manifest_path_for
    from .verify import VerifyError, verify_log

    _readable(args.log, "log")
    mpath = args.manifest or manifest_path_for(args.log)
    if args.manifest:
        _readable(mpath, "manifest")
    manifest = None
    if os.path.exists(mpath):
        try:
            manifest = RunManifest.read(mpath)
        except (KVError, ValueError) as exc:
            raise ConfigError(f"bad manifest {mpath}: {exc}") from None
    if not 0 < args.slo_percentile < 100:
        raise ConfigError("--slo-percentile must be in (0, 100)")
    _positive(args.slo_ms, "--slo-ms")
    try:
        info = log_info(args.log)
    except LogError as exc:
        raise ConfigError(str(exc)) from None
    if args.dry_run:
        print(f"dry run: verify {info.records} records" + (f" against {mpath}" if manifest else " (no manifest)"))
        return EXIT_OK
    try:
        report = verify_log(args.log, manifest, slo_ns=int(args.slo_ms * 1e6), slo_percentile=args.slo_percentile / 100)
    except (VerifyError, LogError) as exc:
        raise RunFailure(str(exc)) from None
    sys.stdout.write(report.to_table())
    if manifest is None:
        print("no manifest: completeness unknown, gaps counted below each stream's highest sequence")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_convert(args) -> int:
    from .latlog import LogError, convert_from_csv, convert_to_csv

    _readable(args.log, "input")
    _writable(args.out, "output")
    if args.dry_run:
        print(f"dry run: convert {args.log} -> {args.out}")
        return EXIT_OK
    try:
        n = convert_from_csv(args.log, args.out) if args.from_csv else convert_to_csv(args.log, args.out)
    except (LogError, ValueError) as exc:
        raise RunFailure(str(exc)) from None
    print(f"{n} rows")
    return EXIT_OK


def cmd_report(args) -> int:
    from .latlog import LogError, format_summary, summarize, summary_to_csv

    _readable(args.log, "log")
    if args.csv:
        _writable(args.csv, "csv")
    if args.dry_run:
        print(f"dry run: summarize {args.log} by {args.group_by}")
        return EXIT_OK
    try:
        rows = summarize(args.log, args.group_by)
    except LogError as exc:
        raise RunFailure(str(exc)) from None
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(summary_to_csv(rows))
        print(f"{len(rows)} group(s) -> {args.csv}")
    else:
        sys.stdout.write(format_summary(rows))
    return EXIT_OK


def cmd_gen_profile(args) -> int:
    from .workload import (
        RateProfile,
        RateSegment,
        WorkloadError,
        format_rate_profile,
        illustrative_daily_profile,
        scale_profile,
        snapshot_profile,
    )

    try:
        if args.kind == "snapshot60":
            prof = snapshot_profile()
            note = "flat 60 s at the reference snapshot mean rate (18,023,662 notifications / 60 s)"
        elif args.kind == "illustrative-day":
            prof = illustrative_daily_profile(args.rate)
            note = ("ILLUSTRATIVE ONLY: a 24 h trading-day shape (overnight trough, open spike,\n"
                    "midday plateau, close spike) in 15 min segments. Not measured data.")
        elif args.kind == "flat":
            prof = RateProfile((RateSegment(args.seconds, args.rate),))
            note = f"flat {args.seconds} s at {args.rate:g} msg/s"
        else:
            steps = args.seconds
            prof = RateProfile(tuple(RateSegment(1, args.rate * (i + 1) / steps) for i in range(steps)))
            note = f"{steps} s ramp to {args.rate:g} msg/s in 1 s steps"
        if args.scale is not None:
            prof = scale_profile(prof, args.scale)
            note += f"; rates scaled by {args.scale:g}"
    except WorkloadError as exc:
        raise ConfigError(str(exc)) from None
    text = format_rate_profile(prof, note)
    if args.dry_run:
        print(f"dry run: {len(prof.segments)} segment(s), {prof.expected_total()} notifications")
        return EXIT_OK
    if args.out:
        _writable(args.out, "profile")
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_scenario(args) -> int:
    from .scenarios import ScenarioError, list_scenarios, load_scenario, run_scenario
    from .workload import WorkloadError

    if not args.name:
        for name in list_scenarios():
            print(f"{name:14s} {load_scenario(name).description}")
        return EXIT_OK
    try:
        sc = load_scenario(args.name)
    except (ScenarioError, WorkloadError, KVError) as exc:
        raise ConfigError(str(exc)) from None
    if args.dry_run:
        print(f"dry run: scenario {sc.name}: {sc.description}; {sc.workload.profile.expected_total()} notifications")
        return EXIT_OK
    try:
        res = run_scenario(args.name, args.run_dir, args.seed, args.factor, args.transport)
    except ScenarioError as exc:
        raise RunFailure(str(exc)) from None
    with open(os.path.join(res.run_dir, "report.txt"), encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    print(f"artifacts in {res.run_dir}")
    return EXIT_OK if res.passed else EXIT_VERIFY


COMMANDS = {
    "publish": cmd_publish,
    "subscribe": cmd_subscribe,
    "record": cmd_record,
    "verify": cmd_verify,
    "convert": cmd_convert,
    "report": cmd_report,
    "gen-profile": cmd_gen_profile,
    "scenario": cmd_scenario,
}


def _setup_logging() -> None:
    level = os.environ.get("WRENCH_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="wrench %(levelname)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"wrench: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"wrench: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except KeyboardInterrupt:
        print("wrench: interrupted", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
