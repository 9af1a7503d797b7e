"""netmgr: single command-line entry point for network lifecycle, benchmarks,
the trading-day case study, and report audits.

Exit codes: 0 success, 1 validation error, 2 execution failure, 64 usage.
Human-readable summaries go to stdout, logs to stderr, machine output
(CSV/JSON) only to the paths given via flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dsl, node, tes
from .executor import make_executor
from .genesis import GenesisFormatError, HashMismatch, InvalidConfig
from .manager import (
    BenchResult,
    ManagerError,
    NetworkManager,
    NodeDefaults,
    PhaseTiming,
    ValidationFailed,
    bench,
)
from .protocol import AdminError, AdminTimeout, AdminUnreachable
from .wrapper import LocalNodeLauncher, NodeWrapper, RecoveryFailed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_EXECUTION = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="network definition file (JSON DSL)")
    parser.add_argument("--workspace", default="testnets", help="workspace root directory")
    parser.add_argument("--executor", choices=("local", "ssh"), default="local")
    parser.add_argument("--force", action="store_true", help="overwrite/recreate existing state")
    parser.add_argument("--parallel", action="store_true", help="run per-node steps of a phase concurrently")
    parser.add_argument("--csv", help="write raw phase timings CSV (phase,node_count,rep,duration_seconds)")
    parser.add_argument("--json", dest="json_out", help="write machine-readable JSON report")
    parser.add_argument("--block-interval", type=float, default=NodeDefaults.block_interval)
    parser.add_argument("--max-block-txs", type=int, default=NodeDefaults.max_block_txs)
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="netmgr", description="Manage private blockchain test networks")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name, help_text in [
        ("validate", "parse and consistency-check a network definition"),
        ("clients-create", "create client data directories"),
        ("miners-create", "create miner data directories"),
        ("blockchain-make", "produce the genesis document from the DSL"),
        ("blockchain-create", "initialize miner-side chain stores"),
        ("distribute-clients", "copy the genesis file to every client"),
        ("distribute-miners", "copy the genesis file to every miner"),
        ("create", "run all creation phases in order"),
        ("start-miners", "launch miner node processes"),
        ("start-clients", "launch client node processes"),
        ("connect", "connect every client to every miner (star)"),
        ("stop", "stop all nodes (graceful, then kill)"),
        ("delete", "remove all per-node directories"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))

    bench_parser = sub.add_parser("bench", help="measure lifecycle phases across network sizes")
    _add_common(bench_parser)
    bench_parser.add_argument("--counts", default="2,5,10,20", help="comma-separated prosumer counts")
    bench_parser.add_argument("--reps", type=int, default=5, help="repetitions per count")
    bench_parser.add_argument("--summary", help="write mean/stddev summary CSV (one row per phase)")
    bench_parser.add_argument("--no-warmup", action="store_true", help="skip the untimed warmup repetition")

    tes_parser = sub.add_parser("run-tes", help="run a simulated trading day on the network")
    _add_common(tes_parser)
    tes_parser.add_argument("--seed", type=int, required=True)
    tes_parser.add_argument("--intervals", type=int, default=tes.DEFAULT_INTERVALS)
    tes_parser.add_argument("--fault", help="inject a fault: interval:node:mode")
    tes_parser.add_argument("--report", default="dayreport.json", help="day report output path")
    tes_parser.add_argument("--keep-network", action="store_true", help="leave nodes running afterwards")

    audit_parser = sub.add_parser("audit", help="verify a day report against a node's chain")
    _add_common(audit_parser)
    audit_parser.add_argument("--report", required=True, help="day report file to audit")
    audit_parser.add_argument("--node", help="node whose chain to audit against (default: first miner)")

    return parser


def _load_config(path: str) -> dsl.NetworkConfig:
    return dsl.load_config(path)


def _manager(args, config: dsl.NetworkConfig) -> NetworkManager:
    return NetworkManager(
        config,
        args.workspace,
        executor=make_executor(args.executor),
        force=args.force,
        parallel=args.parallel,
        node_defaults=NodeDefaults(block_interval=args.block_interval, max_block_txs=args.max_block_txs),
    )


def _print_timings(timings: list[PhaseTiming]) -> None:
    for timing in timings:
        print(f"{timing.phase:<22} {timing.duration:9.4f}s  ({timing.node_count} nodes)")


def _write_timings_csv(timings: list[PhaseTiming], path: str) -> None:
    lines = ["phase,node_count,rep,duration_seconds"]
    lines += [f"{t.phase},{t.node_count},0,{t.duration:.6f}" for t in timings]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(payload, path: str) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_validate(args) -> int:
    config = _load_config(args.config)
    report = dsl.validate(config)
    for issue in report.errors:
        print(f"error {issue.code}: {issue.message}")
    for issue in report.warnings:
        print(f"warning {issue.code}: {issue.message}")
    if args.json_out:
        _write_json(
            {
                "errors": [{"code": i.code, "message": i.message, "nodes": list(i.nodes)} for i in report.errors],
                "warnings": [{"code": i.code, "message": i.message} for i in report.warnings],
            },
            args.json_out,
        )
    if report.ok:
        print(f"configuration {config.configuration_name!r} is deployable "
              f"({len(config.clients)} clients, {len(config.miners)} miners)")
        return EXIT_OK
    return EXIT_VALIDATION


def _cmd_lifecycle(args) -> int:
    config = _load_config(args.config)
    manager = _manager(args, config)
    command = args.command
    if command == "create":
        timings = manager.network_create()
    elif command == "clients-create":
        timings = [manager.clients_create()]
    elif command == "miners-create":
        timings = [manager.miners_create()]
    elif command == "blockchain-make":
        timings = [manager.blockchain_make()]
    elif command == "blockchain-create":
        timings = [manager.blockchain_create()]
    elif command == "distribute-clients":
        timings = [manager.distribute("clients")]
    elif command == "distribute-miners":
        timings = [manager.distribute("miners")]
    elif command == "start-miners":
        timings = [manager.start("miners")]
    elif command == "start-clients":
        timings = [manager.start("clients")]
    elif command == "connect":
        timings = [manager.network_connect()]
    elif command == "stop":
        timings = [manager.network_stop()]
    elif command == "delete":
        timings = [manager.network_delete()]
    else:  # pragma: no cover - parser restricts commands
        raise ValueError(command)
    _print_timings(timings)
    if args.csv:
        _write_timings_csv(timings, args.csv)
    if args.json_out:
        _write_json([t.__dict__ for t in timings], args.json_out)
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = _load_config(args.config)
    counts = [int(part) for part in args.counts.split(",") if part.strip()]
    result: BenchResult = bench(
        config,
        counts,
        args.reps,
        args.workspace,
        executor=make_executor(args.executor),
        node_defaults=NodeDefaults(block_interval=args.block_interval, max_block_txs=args.max_block_txs),
        warmup=not args.no_warmup,
    )
    summary = result.summary()
    print(f"bench: counts={counts} reps={args.reps}")
    for phase in result.phases():
        cells = "  ".join(
            f"{count}p {summary[phase][count][0]:.3f}±{summary[phase][count][1]:.3f}"
            for count in counts
            if count in summary.get(phase, {})
        )
        print(f"{phase:<22} {cells}")
    if args.csv:
        Path(args.csv).write_text(result.to_raw_csv(), encoding="utf-8")
    if args.summary:
        Path(args.summary).write_text(result.to_summary_csv(), encoding="utf-8")
    if args.json_out:
        _write_json(
            {
                "counts": counts,
                "repetitions": args.reps,
                "rows": [row.__dict__ for row in result.rows],
                "failures": result.failures,
            },
            args.json_out,
        )
    if not result.ok:
        print(f"bench finished with {len(result.failures)} failed repetition(s); results are partial")
        return EXIT_EXECUTION
    return EXIT_OK


def _parse_fault(spec: str | None) -> tuple[int, str, str] | None:
    if spec is None:
        return None
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValidationFailed(f"--fault must be interval:node:mode, got {spec!r}")
    interval, node_name, mode = parts
    return int(interval), node_name, mode


def _cmd_run_tes(args) -> int:
    config = _load_config(args.config)
    manager = _manager(args, config)
    fault = _parse_fault(args.fault)

    if not manager.genesis_path().exists():
        _print_timings(manager.network_create())
    _print_timings([manager.start("miners"), manager.start("clients"), manager.network_connect()])

    launcher = LocalNodeLauncher(python_cmd=manager.python_cmd)
    wrappers: dict[str, NodeWrapper] = {}
    try:
        for client in config.clients:
            wrappers[client.name] = NodeWrapper(
                manager.node_dir(client.name), poll_period=0.2, launcher=launcher
            ).attach()
        report = tes.run_day(wrappers, config, args.seed, intervals=args.intervals, fault=fault)
    finally:
        for wrapper in wrappers.values():
            wrapper.close()
        if not args.keep_network:
            try:
                manager.network_stop()
            except ManagerError:
                pass

    tes.write_report(report, args.report)
    print(f"day report written to {args.report}")

    blocks = node.load_blocks(manager.node_dir(config.miners[0].name))
    findings = tes.audit_report(report, blocks)
    failed = [f for f in findings if not f.ok]
    for finding in findings:
        print(f"interval {finding.interval:>2}: {'pass' if finding.ok else 'FAIL'} ({finding.reason})")
    bad_intervals = [o for o in report["outcomes"] if o["status"] != "ok"]
    if failed or bad_intervals:
        print(f"trading day completed with {len(bad_intervals)} failed interval(s), {len(failed)} audit failure(s)")
        return EXIT_EXECUTION
    print(f"trading day complete: {args.intervals} intervals committed and audited")
    return EXIT_OK


def _cmd_audit(args) -> int:
    config = _load_config(args.config)
    manager = _manager(args, config)
    report = tes.read_report(args.report)
    node_name = args.node or config.miners[0].name
    dsl.node_lookup(config, node_name)
    blocks = node.load_blocks(manager.node_dir(node_name))
    findings = tes.audit_report(report, blocks)
    for finding in findings:
        print(f"interval {finding.interval:>2}: {'pass' if finding.ok else 'FAIL'} ({finding.reason})")
    if args.json_out:
        _write_json([finding.__dict__ for finding in findings], args.json_out)
    return EXIT_OK if all(f.ok for f in findings) else EXIT_EXECUTION


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "run-tes":
            return _cmd_run_tes(args)
        if args.command == "audit":
            return _cmd_audit(args)
        return _cmd_lifecycle(args)
    except (dsl.ConfigParseError, dsl.ConfigSchemaError, InvalidConfig, ValidationFailed) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (
        ManagerError,
        tes.TesError,
        AdminError,
        AdminTimeout,
        AdminUnreachable,
        RecoveryFailed,
        GenesisFormatError,
        HashMismatch,
        dsl.NodeNotFound,
        OSError,
    ) as exc:
        print(f"execution failure: {exc}", file=sys.stderr)
        return EXIT_EXECUTION


if __name__ == "__main__":
    sys.exit(main())
