"""Stateless network lifecycle driver.

Every command is a pure function of (network document, workspace
contents, command): there is no daemon and no database, so the manager
can be killed between any two phases and re-run. Effects on hosts go
exclusively through an Executor (run a command, copy a file); node
control beyond that uses the nodes' admin protocol.

Phase names mirror the canonical benchmark vocabulary: ClientsCreate,
MinersCreate, BlockchainMake, BlockchainCreate, DistributeToClients,
DistributeToMiners, FullNetworkCreated, MinerStart, ClientsStart,
NetworkConnect, NetworkStop, NetworkDelete.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import socket
import statistics
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .dsl import NetworkConfig, NodeSpec, validate
from .executor import Executor, LocalExecutor
from .genesis import derive_account, make_genesis, write_genesis
from .protocol import AdminClient, AdminError, AdminTimeout, AdminUnreachable

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    CLIENTS_CREATE = "ClientsCreate"
    MINERS_CREATE = "MinersCreate"
    BLOCKCHAIN_MAKE = "BlockchainMake"
    BLOCKCHAIN_CREATE = "BlockchainCreate"
    DISTRIBUTE_TO_CLIENTS = "DistributeToClients"
    DISTRIBUTE_TO_MINERS = "DistributeToMiners"
    FULL_NETWORK_CREATED = "FullNetworkCreated"
    MINER_START = "MinerStart"
    CLIENTS_START = "ClientsStart"
    NETWORK_CONNECT = "NetworkConnect"
    NETWORK_STOP = "NetworkStop"
    NETWORK_DELETE = "NetworkDelete"


@dataclass(frozen=True)
class PhaseTiming:
    phase: str
    duration: float
    node_count: int


class ManagerError(RuntimeError):
    exit_code = 2


class ValidationFailed(ManagerError):
    exit_code = 1


class AlreadyExists(ManagerError):
    pass


class AlreadyRunning(ManagerError):
    pass


class NotCreated(ManagerError):
    pass


class NotRunning(ManagerError):
    pass


class MissingGenesis(ManagerError):
    pass


class ExecutorFailure(ManagerError):
    def __init__(self, host: str, message: str):
        super().__init__(f"host {host!r}: {message}")
        self.host = host


class DistributeHashMismatch(ManagerError):
    def __init__(self, node: str, message: str):
        super().__init__(f"node {node!r}: {message}")
        self.node = node


@dataclass
class NodeDefaults:
    """Runtime knobs stamped into node.json at create time (not part of the DSL)."""

    block_interval: float = 0.25
    max_block_txs: int = 64


START_TIMEOUT = 15.0
STOP_GRACE = 5.0  # seconds before escalating admin stop to kill -9


class NetworkManager:
    def __init__(
        self,
        config: NetworkConfig,
        workspace: str | Path,
        executor: Executor | None = None,
        force: bool = False,
        parallel: bool = False,
        node_defaults: NodeDefaults | None = None,
        python_cmd: str | None = None,
    ):
        self.config = config
        self.workspace = Path(workspace).resolve()
        self.executor = executor or LocalExecutor()
        self.force = force
        self.parallel = parallel
        self.node_defaults = node_defaults or NodeDefaults()
        self.python_cmd = python_cmd or sys.executable

    # -- workspace layout (derivable purely from config + root) -----------

    def config_dir(self) -> Path:
        return self.workspace / self.config.configuration_name

    def node_dir(self, name: str) -> Path:
        path = (self.config_dir() / name).resolve()
        if self.workspace not in path.parents:
            raise ManagerError(f"node directory {path} escapes workspace {self.workspace}")
        return path

    def genesis_path(self) -> Path:
        return self.config_dir() / "genesis.json"

    @property
    def node_count(self) -> int:
        return len(self.config.all_nodes())

    def ensure_valid(self) -> None:
        report = validate(self.config)
        if not report.ok:
            lines = "; ".join(f"{e.code}: {e.message}" for e in report.errors)
            raise ValidationFailed(f"configuration has validation errors: {lines}")

    # -- executor helpers ---------------------------------------------------

    def _run(self, host: str, command: str) -> str:
        result = self.executor.run(host, command)
        if result.status != 0:
            raise ExecutorFailure(host, f"command {command!r} exited {result.status}: {result.output.strip()}")
        return result.output

    def _probe(self, host: str, command: str) -> bool:
        return self.executor.run(host, command).status == 0

    def _put_json(self, host: str, payload: dict, remote_path: Path) -> None:
        with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as tmp:
            tmp.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
            tmp_path = tmp.name
        try:
            self.executor.put_file(host, tmp_path, remote_path)
        finally:
            Path(tmp_path).unlink(missing_ok=True)

    def _each(self, nodes: Sequence[NodeSpec], fn: Callable[[NodeSpec], None]) -> None:
        if self.parallel and len(nodes) > 1:
            with ThreadPoolExecutor(max_workers=min(16, len(nodes))) as pool:
                for future in [pool.submit(fn, node) for node in nodes]:
                    future.result()
        else:
            for node in nodes:
                fn(node)

    def _timed(self, phase: Phase, body: Callable[[], None]) -> PhaseTiming:
        started = time.perf_counter()
        body()
        timing = PhaseTiming(phase.value, time.perf_counter() - started, self.node_count)
        logger.info("%s: %.4fs (%d nodes)", timing.phase, timing.duration, timing.node_count)
        return timing

    def admin(self, node: NodeSpec, timeout: float = 3.0) -> AdminClient:
        return AdminClient(node.host, node.admin_port, timeout=timeout)

    # -- create phases ------------------------------------------------------

    def _create_one(self, node: NodeSpec) -> None:
        directory = self.node_dir(node.name)
        quoted = shlex.quote(str(directory))
        if self._probe(node.host, f"test -d {quoted}"):
            if not self.force:
                raise AlreadyExists(f"node {node.name!r}: {directory} already exists (use force to recreate)")
            self._run(node.host, f"rm -rf {quoted}")
        self._run(node.host, f"mkdir -p {quoted}")
        identity = {
            "configurationName": self.config.configuration_name,
            "name": node.name,
            "role": node.role,
            "host": node.host,
            "blockchainPort": node.blockchain_port,
            "adminPort": node.admin_port,
            "wrapperPort": node.wrapper_port,
            "account": derive_account(self.config.configuration_name, node.name),
            "blockIntervalSeconds": self.node_defaults.block_interval,
            "maxBlockTxs": self.node_defaults.max_block_txs,
        }
        self._put_json(node.host, identity, directory / "node.json")

    def clients_create(self) -> PhaseTiming:
        self.ensure_valid()
        return self._timed(Phase.CLIENTS_CREATE, lambda: self._each(self.config.clients, self._create_one))

    def miners_create(self) -> PhaseTiming:
        self.ensure_valid()
        return self._timed(Phase.MINERS_CREATE, lambda: self._each(self.config.miners, self._create_one))

    def blockchain_make(self) -> PhaseTiming:
        """Produce the genesis document from the network document (idempotent)."""
        self.ensure_valid()

        def body() -> None:
            doc = make_genesis(self.config)
            self.config_dir().mkdir(parents=True, exist_ok=True)
            write_genesis(doc, self.genesis_path())
            logger.info("genesis written: hash=%s", doc.genesis_hash)

        return self._timed(Phase.BLOCKCHAIN_MAKE, body)

    def blockchain_create(self) -> PhaseTiming:
        """Initialize the miner-side canonical chain stores from the genesis document."""
        if not self.genesis_path().exists():
            raise MissingGenesis(f"{self.genesis_path()} missing: run blockchain-make first")
        genesis_hash = json.loads(self.genesis_path().read_text(encoding="utf-8"))["genesisHash"]

        def init_one(node: NodeSpec) -> None:
            directory = self.node_dir(node.name)
            if not self._probe(node.host, f"test -d {shlex.quote(str(directory))}"):
                raise NotCreated(f"miner {node.name!r}: {directory} missing (run miners-create first)")
            blocks = directory / "blocks.log"
            if self._probe(node.host, f"test -e {shlex.quote(str(blocks))}"):
                if not self.force:
                    raise AlreadyExists(f"miner {node.name!r}: chain store already initialized")
                self._run(node.host, f"rm -f {shlex.quote(str(blocks))}")
            self._run(node.host, f"touch {shlex.quote(str(blocks))}")
            self._put_json(node.host, {"genesisHash": genesis_hash}, directory / "meta.json")
            self._put_json(node.host, {"transactions": []}, directory / "mempool.json")

        return self._timed(Phase.BLOCKCHAIN_CREATE, lambda: self._each(self.config.miners, init_one))

    def distribute(self, targets: str) -> PhaseTiming:
        """Copy the genesis file to every target node, digest-verified after copy."""
        nodes, phase = self._select_targets(targets, Phase.DISTRIBUTE_TO_CLIENTS, Phase.DISTRIBUTE_TO_MINERS)
        if not self.genesis_path().exists():
            raise MissingGenesis(f"{self.genesis_path()} missing: run blockchain-make first")
        source_digest = hashlib.sha256(self.genesis_path().read_bytes()).hexdigest()

        def copy_one(node: NodeSpec) -> None:
            directory = self.node_dir(node.name)
            if not self._probe(node.host, f"test -d {shlex.quote(str(directory))}"):
                raise NotCreated(f"node {node.name!r}: {directory} missing (create it first)")
            destination = directory / "genesis.json"
            self.executor.put_file(node.host, self.genesis_path(), destination)
            output = self._run(node.host, f"sha256sum {shlex.quote(str(destination))}")
            copied_digest = output.split()[0] if output.split() else ""
            if copied_digest != source_digest:
                raise DistributeHashMismatch(
                    node.name, f"copied genesis digest {copied_digest} != source {source_digest}"
                )

        return self._timed(phase, lambda: self._each(nodes, copy_one))

    def network_create(self) -> list[PhaseTiming]:
        """Run the six creation phases in order; the total is FullNetworkCreated."""
        timings: list[PhaseTiming] = []
        started = time.perf_counter()
        timings.append(self.clients_create())
        timings.append(self.miners_create())
        timings.append(self.blockchain_make())
        timings.append(self.blockchain_create())
        timings.append(self.distribute("clients"))
        timings.append(self.distribute("miners"))
        total = PhaseTiming(Phase.FULL_NETWORK_CREATED.value, time.perf_counter() - started, self.node_count)
        logger.info("%s: %.4fs (%d nodes)", total.phase, total.duration, total.node_count)
        timings.append(total)
        return timings

    # -- start / connect / stop / delete -----------------------------------

    def _select_targets(self, targets: str, client_phase: Phase, miner_phase: Phase) -> tuple[Sequence[NodeSpec], Phase]:
        if targets == "clients":
            return self.config.clients, client_phase
        if targets == "miners":
            return self.config.miners, miner_phase
        raise ValueError(f"targets must be 'clients' or 'miners', got {targets!r}")

    def start(self, targets: str) -> PhaseTiming:
        nodes, phase = self._select_targets(targets, Phase.CLIENTS_START, Phase.MINER_START)

        def start_one(node: NodeSpec) -> None:
            directory = self.node_dir(node.name)
            quoted = shlex.quote(str(directory))
            if not self._probe(node.host, f"test -f {shlex.quote(str(directory / 'genesis.json'))}"):
                raise NotCreated(f"node {node.name!r}: not created/distributed (no genesis in {directory})")
            client = self.admin(node, timeout=0.5)
            if client.is_up(timeout=0.5):
                if not self.force:
                    raise AlreadyRunning(f"node {node.name!r} is already running")
                self._kill_node(node)
            command = (
                f"nohup {shlex.quote(self.python_cmd)} -m chainyard.node --data-dir {quoted} "
                f">> {shlex.quote(str(directory / 'node.log'))} 2>&1 & echo $! > {shlex.quote(str(directory / 'node.pid'))}"
            )
            self._run(node.host, command)
            deadline = time.monotonic() + START_TIMEOUT
            while time.monotonic() < deadline:
                if client.is_up(timeout=0.5):
                    return
                time.sleep(0.02)
            raise ExecutorFailure(node.host, f"node {node.name!r} did not become ready within {START_TIMEOUT}s")

        return self._timed(phase, lambda: self._each(nodes, start_one))

    def network_connect(self) -> PhaseTiming:
        """Form the star: every client peers with every miner."""
        down = [n.name for n in self.config.all_nodes() if not self.admin(n).is_up(timeout=0.5)]
        if down:
            raise NotRunning(f"cannot connect: nodes not running: {', '.join(sorted(down))}")

        def connect_one(client_spec: NodeSpec) -> None:
            admin = self.admin(client_spec, timeout=5.0)
            for miner in self.config.miners:
                try:
                    admin.add_peer(miner.host, miner.blockchain_port)
                except (AdminError, AdminTimeout, AdminUnreachable) as exc:
                    raise ExecutorFailure(client_spec.host, f"connect {client_spec.name} -> {miner.name}: {exc}")

        return self._timed(Phase.NETWORK_CONNECT, lambda: self._each(self.config.clients, connect_one))

    def _read_pid(self, node: NodeSpec) -> int | None:
        pid_path = self.node_dir(node.name) / "node.pid"
        result = self.executor.run(node.host, f"cat {shlex.quote(str(pid_path))} 2>/dev/null")
        try:
            return int(result.output.strip())
        except ValueError:
            return None

    def _pid_alive(self, node: NodeSpec, pid: int) -> bool:
        # kill -0 counts zombies as alive; in containers nothing reaps
        # reparented children promptly, so check the process state instead.
        result = self.executor.run(node.host, f"ps -o state= -p {pid} 2>/dev/null")
        state = result.output.strip()
        return result.status == 0 and bool(state) and not state.startswith("Z")

    def _kill_node(self, node: NodeSpec) -> None:
        pid = self._read_pid(node)
        if pid is not None and self._pid_alive(node, pid):
            self.executor.run(node.host, f"kill -9 {pid} 2>/dev/null")
            deadline = time.monotonic() + 2.0
            while time.monotonic() < deadline and self._pid_alive(node, pid):
                time.sleep(0.02)

    def _stop_one(self, node: NodeSpec) -> None:
        started = time.perf_counter()
        pid = self._read_pid(node)
        escalated = False
        try:
            self.admin(node, timeout=2.0).stop()
        except (AdminError, AdminTimeout, AdminUnreachable):
            pass
        deadline = time.monotonic() + STOP_GRACE
        while pid is not None and self._pid_alive(node, pid):
            if time.monotonic() > deadline:
                self.executor.run(node.host, f"kill -9 {pid} 2>/dev/null")
                escalated = True
                break
            time.sleep(0.02)
        if escalated:
            deadline = time.monotonic() + 2.0
            while pid is not None and self._pid_alive(node, pid) and time.monotonic() < deadline:
                time.sleep(0.02)
        # The stop anomaly reported at larger network sizes makes per-node
        # latencies worth keeping around for later investigation.
        logger.info(
            "stop %s: %.3fs%s", node.name, time.perf_counter() - started, " (escalated to kill)" if escalated else ""
        )

    def network_stop(self) -> PhaseTiming:
        running = [n for n in self.config.all_nodes() if self._node_running(n)]
        if not running:
            raise NotRunning("no nodes of this network are running")
        return self._timed(Phase.NETWORK_STOP, lambda: self._each(running, self._stop_one))

    def _node_running(self, node: NodeSpec) -> bool:
        pid = self._read_pid(node)
        if pid is not None and self._pid_alive(node, pid):
            return True
        return self.admin(node).is_up(timeout=0.3)

    def network_delete(self) -> PhaseTiming:
        if not self.config_dir().exists():
            raise NotCreated(f"{self.config_dir()} does not exist")
        alive = [n.name for n in self.config.all_nodes() if self._node_running(n)]
        if alive and not self.force:
            raise ManagerError(f"refusing to delete while nodes run: {', '.join(sorted(alive))} (stop first)")

        def body() -> None:
            for node in self.config.all_nodes():
                if self.force:
                    self._kill_node(node)
                self._run(node.host, f"rm -rf {shlex.quote(str(self.node_dir(node.name)))}")
            self._run("localhost", f"rm -rf {shlex.quote(str(self.config_dir()))}")

        return self._timed(Phase.NETWORK_DELETE, body)

    def network_status(self) -> dict[str, dict | None]:
        out: dict[str, dict | None] = {}
        for node in self.config.all_nodes():
            try:
                out[node.name] = self.admin(node).status(timeout=1.0)
            except (AdminError, AdminTimeout, AdminUnreachable):
                out[node.name] = None
        return out


# -- benchmarking ------------------------------------------------------------


@dataclass
class BenchRow:
    phase: str
    node_count: int
    prosumers: int
    rep: int
    duration: float


@dataclass
class BenchResult:
    prosumer_counts: list[int]
    repetitions: int
    rows: list[BenchRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def durations(self, phase: str, prosumers: int) -> list[float]:
        return [r.duration for r in self.rows if r.phase == phase and r.prosumers == prosumers]

    def phases(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.phase not in seen:
                seen.append(row.phase)
        return seen

    def summary(self) -> dict[str, dict[int, tuple[float, float]]]:
        """phase -> prosumer count -> (mean, stddev) over repetitions."""
        out: dict[str, dict[int, tuple[float, float]]] = {}
        for phase in self.phases():
            out[phase] = {}
            for count in self.prosumer_counts:
                values = self.durations(phase, count)
                if not values:
                    continue
                mean = statistics.fmean(values)
                std = statistics.stdev(values) if len(values) > 1 else 0.0
                out[phase][count] = (mean, std)
        return out

    def medians(self) -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = {}
        for phase in self.phases():
            out[phase] = {
                count: statistics.median(values)
                for count in self.prosumer_counts
                if (values := self.durations(phase, count))
            }
        return out

    def to_raw_csv(self) -> str:
        lines = ["phase,node_count,rep,duration_seconds"]
        for row in self.rows:
            lines.append(f"{row.phase},{row.node_count},{row.rep},{row.duration:.6f}")
        return "\n".join(lines) + "\n"

    def to_summary_csv(self) -> str:
        """Benchmark-table layout: one row per phase, avg/stddev per prosumer count."""
        header = ["phase"]
        for count in self.prosumer_counts:
            header += [f"avg_{count}p", f"stddev_{count}p"]
        lines = [",".join(header)]
        summary = self.summary()
        for phase in self.phases():
            cells = [phase]
            for count in self.prosumer_counts:
                mean, std = summary.get(phase, {}).get(count, (float("nan"), float("nan")))
                cells += [f"{mean:.6f}", f"{std:.6f}"]
            lines.append(",".join(cells))
        if self.failures:
            lines.append("# failures: " + "; ".join(self.failures))
        return "\n".join(lines) + "\n"


def allocate_ports(count: int) -> list[int]:
    """Reserve distinct free TCP ports by binding and releasing them."""
    sockets = []
    ports = []
    try:
        for _ in range(count):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(("127.0.0.1", 0))
            sockets.append(sock)
            ports.append(sock.getsockname()[1])
    finally:
        for sock in sockets:
            sock.close()
    return ports


def make_bench_config(template: NetworkConfig, prosumers: int, suffix: str | None = None) -> NetworkConfig:
    """Instantiate a config with the requested prosumer count + 1 dso + 1 miner.

    Genesis parameters come from the template; hosts are localhost and
    ports are freshly allocated so repeated runs never collide.
    """
    name = f"{template.configuration_name}-{suffix or f'p{prosumers}'}"
    ports = iter(allocate_ports(prosumers * 3 + 3 + 2))
    clients = [
        NodeSpec(
            name=f"prosumer{i + 1}",
            role="prosumer",
            host="127.0.0.1",
            blockchain_port=next(ports),
            admin_port=next(ports),
            wrapper_port=next(ports),
        )
        for i in range(prosumers)
    ]
    clients.append(
        NodeSpec(
            name="dso1",
            role="dso",
            host="127.0.0.1",
            blockchain_port=next(ports),
            admin_port=next(ports),
            wrapper_port=next(ports),
        )
    )
    miners = [
        NodeSpec(
            name="miner1",
            role="miner",
            host="127.0.0.1",
            blockchain_port=next(ports),
            admin_port=next(ports),
        )
    ]
    return NetworkConfig(
        configuration_name=name,
        configuration_version=template.configuration_version,
        genesis=template.genesis,
        clients=tuple(clients),
        miners=tuple(miners),
    )


def bench(
    template: NetworkConfig,
    prosumer_counts: Iterable[int],
    repetitions: int,
    workspace: str | Path,
    executor: Executor | None = None,
    node_defaults: NodeDefaults | None = None,
    warmup: bool = True,
) -> BenchResult:
    """Run the full lifecycle repeatedly per prosumer count and collect timings.

    A warmup repetition (not recorded) precedes the measured ones so cold
    interpreter/bytecode caches do not skew the first sample.
    """
    counts = list(prosumer_counts)
    result = BenchResult(prosumer_counts=counts, repetitions=repetitions)
    for count in counts:
        config = make_bench_config(template, count)
        manager = NetworkManager(
            config, workspace, executor=executor, node_defaults=node_defaults, force=False
        )
        reps = ([-1] if warmup else []) + list(range(repetitions))
        for rep in reps:
            try:
                timings = list(manager.network_create())
                timings.append(manager.start("miners"))
                timings.append(manager.start("clients"))
                timings.append(manager.network_connect())
                timings.append(manager.network_stop())
                timings.append(manager.network_delete())
                if rep >= 0:
                    result.rows.extend(
                        BenchRow(t.phase, t.node_count, count, rep, t.duration) for t in timings
                    )
            except ManagerError as exc:
                result.failures.append(f"count={count} rep={rep}: {exc}")
                logger.error("bench repetition failed (count=%d rep=%d): %s", count, rep, exc)
                _cleanup_best_effort(manager)
    return result


def _cleanup_best_effort(manager: NetworkManager) -> None:
    cleanup = NetworkManager(
        manager.config,
        manager.workspace,
        executor=manager.executor,
        force=True,
        node_defaults=manager.node_defaults,
    )
    try:
        cleanup.network_stop()
    except ManagerError:
        pass
    try:
        cleanup.network_delete()
    except ManagerError:
        pass
