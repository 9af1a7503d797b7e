"""Wrapper half of an actor: supervises one node, observes it, recovers it.

The wrapper polls its node's admin endpoint, turns chain progress into
events (new block, transaction mined/stalled, node unresponsive), and
dispatches them to subscribers through a single ordered queue.
Subscriptions never expire implicitly: an idle subscription still
receives the next matching event, however long it sat quiet.

Transactions are journaled (write-ahead) before submission so that a
restarted wrapper or node never loses them: recovery restarts the node
process from its data directory and resubmits everything still pending.
The node de-duplicates by tx id, so resubmission is idempotent.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import signal
import socketserver
import subprocess
import sys
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from queue import Empty, Queue
from typing import Callable, Iterable

from .canonical import sha256_hex
from .chain import DEFAULT_TX_COST, Transaction, make_transaction
from .genesis import read_genesis
from .node import NodeIdentity, NodePaths
from .protocol import AdminClient, AdminError, AdminTimeout, AdminUnreachable, framed_request, recv_framed, send_framed

logger = logging.getLogger(__name__)

NEW_BLOCK = "new_block"
TX_MINED = "transaction_mined"
TX_STALLED = "transaction_stalled"
NODE_UNRESPONSIVE = "node_unresponsive"
RECOVERY_FAILED = "recovery_failed"

CALLBACK_WARN_SECONDS = 0.5


class BindFailure(OSError):
    pass


class PeerUnreachable(ConnectionError):
    pass


class RecoveryFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeEvent:
    kind: str
    observed_at: float
    height: int | None = None
    tx_id: str | None = None
    blocks_waited: int | None = None
    consecutive_timeouts: int | None = None


@dataclass
class Subscription:
    sub_id: str
    matches: Callable[[str], bool]
    callback: Callable[[NodeEvent], None]


@dataclass
class JournalEntry:
    tx: dict
    submitted_at: float
    status: str = "pending"  # pending | mined | failed
    resubmissions: int = 0
    mined_height: int | None = None
    # runtime-only stall bookkeeping
    submit_height: int = 0
    blocks_waited: int = 0
    stall_reported: bool = False

    def describe(self) -> str:
        if self.resubmissions and self.status == "pending":
            return f"resubmitted({self.resubmissions})"
        return self.status


class TxJournal:
    """Append-only write-ahead journal of this wrapper's transactions."""

    def __init__(self, path: Path):
        self.path = path
        self.entries: dict[str, JournalEntry] = {}
        self._lock = threading.Lock()
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                self._fold(record)

    def _fold(self, record: dict) -> None:
        kind = record.get("event")
        tx_id = record.get("txId")
        if kind == "submitted" and tx_id not in self.entries:
            self.entries[tx_id] = JournalEntry(tx=record["tx"], submitted_at=record.get("at", 0.0))
        elif tx_id in self.entries:
            entry = self.entries[tx_id]
            if kind == "mined":
                entry.status = "mined"
                entry.mined_height = record.get("height")
            elif kind == "resubmitted":
                entry.resubmissions += 1
                entry.status = "pending"
            elif kind == "failed":
                entry.status = "failed"

    def _append(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            handle.flush()
            os.fsync(handle.fileno())

    def record_submitted(self, tx: Transaction, submit_height: int) -> bool:
        """Journal a transaction before it goes to the node. False if already present."""
        with self._lock:
            if tx.tx_id in self.entries:
                return False
            now = time.time()
            entry = JournalEntry(tx=tx.to_dict(), submitted_at=now, submit_height=submit_height)
            self.entries[tx.tx_id] = entry
            self._append({"event": "submitted", "txId": tx.tx_id, "tx": tx.to_dict(), "at": now})
            return True

    def mark_mined(self, tx_id: str, height: int) -> None:
        with self._lock:
            entry = self.entries.get(tx_id)
            if entry is None or entry.status == "mined":
                return
            entry.status = "mined"
            entry.mined_height = height
            self._append({"event": "mined", "txId": tx_id, "height": height, "at": time.time()})

    def mark_resubmitted(self, tx_id: str, submit_height: int) -> None:
        with self._lock:
            entry = self.entries.get(tx_id)
            if entry is None:
                return
            entry.resubmissions += 1
            entry.status = "pending"
            entry.submit_height = submit_height
            entry.blocks_waited = 0
            entry.stall_reported = False
            self._append({"event": "resubmitted", "txId": tx_id, "at": time.time()})

    def mark_failed(self, tx_id: str, error: str) -> None:
        with self._lock:
            entry = self.entries.get(tx_id)
            if entry is None:
                return
            entry.status = "failed"
            self._append({"event": "failed", "txId": tx_id, "error": error, "at": time.time()})

    def pending(self) -> list[tuple[str, JournalEntry]]:
        with self._lock:
            items = [(tx_id, e) for tx_id, e in self.entries.items() if e.status == "pending"]
        return sorted(items, key=lambda item: item[1].submitted_at)


@dataclass
class RecoveryReport:
    restarted: bool
    resubmitted: int
    attempts: int


@dataclass
class OffchainReceipt:
    msg_id: str
    duplicate: bool
    attempts: int


class LocalNodeLauncher:
    """Starts and kills node processes on this machine."""

    def __init__(self, python_cmd: str | None = None):
        self.python_cmd = python_cmd or sys.executable
        self._procs: list[subprocess.Popen] = []

    def start(self, data_dir: Path) -> int:
        log_path = data_dir / "node.log"
        with log_path.open("a") as log_handle:
            proc = subprocess.Popen(
                [self.python_cmd, "-m", "chainyard.node", "--data-dir", str(data_dir)],
                stdout=log_handle,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        self._procs.append(proc)
        return proc.pid

    def is_alive(self, pid: int) -> bool:
        for proc in self._procs:
            if proc.pid == pid:
                return proc.poll() is None
        # Not our child: consult /proc directly; zombies count as dead.
        try:
            stat = Path(f"/proc/{pid}/stat").read_text()
            state = stat.rsplit(")", 1)[1].split()[0]
            return state != "Z"
        except (OSError, IndexError):
            return False

    def kill(self, pid: int) -> None:
        try:
            os.kill(pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        for proc in self._procs:
            if proc.pid == pid:
                proc.wait(timeout=5)

    def reap(self) -> None:
        for proc in self._procs:
            proc.poll()


class _OffchainServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class NodeWrapper:
    """Role-agnostic wrapper over one node's data directory.

    attach() starts the monitor loop and (when the node declares a
    wrapper port) the off-chain listener; close() tears both down.
    """

    def __init__(
        self,
        data_dir: str | Path,
        poll_period: float = 0.5,
        admin_timeout: float = 0.4,
        stall_threshold: int = 3,
        unresponsive_threshold: int = 3,
        auto_recover: bool = True,
        max_restarts: int = 5,
        backoff_base: float = 0.2,
        ready_timeout: float = 8.0,
        launcher: LocalNodeLauncher | None = None,
        offchain_retries: int = 2,
    ):
        self.paths = NodePaths(Path(data_dir))
        self.identity = NodeIdentity.load(self.paths.node_json)
        self.expected_genesis_hash = read_genesis(self.paths.genesis).genesis_hash
        self.account = self.identity.account
        self.name = self.identity.name
        self.admin = AdminClient(self.identity.host, self.identity.admin_port, timeout=admin_timeout)
        self.journal = TxJournal(self.paths.wrapper_journal)
        self.poll_period = poll_period
        self.stall_threshold = stall_threshold
        self.unresponsive_threshold = unresponsive_threshold
        self.auto_recover = auto_recover
        self.max_restarts = max_restarts
        self.backoff_base = backoff_base
        self.ready_timeout = ready_timeout
        self.launcher = launcher or LocalNodeLauncher()
        self.offchain_retries = offchain_retries

        self.recovery_count = 0
        self.recovery_reports: list[RecoveryReport] = []

        self._subs: list[Subscription] = []
        self._subs_lock = threading.Lock()
        self._events: Queue[NodeEvent | None] = Queue()
        self._submit_lock = threading.Lock()
        self._recover_lock = threading.Lock()
        self._recovering = False
        self._stopping = threading.Event()
        self._attached = False
        self._last_height: int | None = None
        self._consecutive_timeouts = 0
        self._unresponsive_reported = False
        self._threads: list[threading.Thread] = []
        self._offchain_server: _OffchainServer | None = None
        self._offchain_handlers: list[Callable[[dict], None]] = []
        self._seen_msg_ids: set[str] = set()
        self._seen_lock = threading.Lock()

    # -- lifecycle -----------------------------------------------------------

    def attach(self) -> "NodeWrapper":
        if self._attached:
            return self
        if self.identity.wrapper_port is not None:
            try:
                self._offchain_server = _OffchainServer(
                    (self.identity.host, self.identity.wrapper_port), self._offchain_handler()
                )
            except OSError as exc:
                raise BindFailure(f"{self.name}: cannot bind wrapper port {self.identity.wrapper_port}: {exc}") from exc
            listener = threading.Thread(target=self._offchain_server.serve_forever, args=(0.1,), daemon=True)
            listener.start()
            self._threads.append(listener)
        dispatcher = threading.Thread(target=self._dispatch_loop, daemon=True)
        dispatcher.start()
        monitor = threading.Thread(target=self._monitor_loop, daemon=True)
        monitor.start()
        self._threads.extend([dispatcher, monitor])
        self._attached = True
        try:
            status = self.admin.status()
            self._last_height = status["height"]
            logger.info("%s wrapper attached: height=%d fault=%s", self.name, status["height"], status["fault"])
        except (AdminTimeout, AdminUnreachable):
            logger.info("%s wrapper attached with node down; supervision begins", self.name)
        return self

    def close(self) -> None:
        self._stopping.set()
        self._events.put(None)
        if self._offchain_server is not None:
            self._offchain_server.shutdown()
            self._offchain_server.server_close()
            self._offchain_server = None
        self._attached = False

    def __enter__(self) -> "NodeWrapper":
        return self.attach()

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- observer ---------------------------------------------------------------

    def subscribe(
        self,
        event_filter: Callable[[str], bool] | Iterable[str] | str | None,
        callback: Callable[[NodeEvent], None],
    ) -> Subscription:
        """Register a callback for matching events. Subscriptions never expire."""
        if event_filter is None:
            matches: Callable[[str], bool] = lambda _kind: True
        elif callable(event_filter):
            matches = event_filter
        elif isinstance(event_filter, str):
            wanted = {event_filter}
            matches = lambda kind: kind in wanted
        else:
            wanted = set(event_filter)
            matches = lambda kind: kind in wanted
        sub = Subscription(uuid.uuid4().hex, matches, callback)
        with self._subs_lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._subs_lock:
            self._subs = [s for s in self._subs if s.sub_id != sub.sub_id]

    def _emit(self, event: NodeEvent) -> None:
        self._events.put(event)

    def _dispatch_loop(self) -> None:
        while True:
            try:
                event = self._events.get(timeout=0.5)
            except Empty:
                if self._stopping.is_set():
                    return
                continue
            if event is None:
                return
            if self.auto_recover and event.kind in (TX_STALLED, NODE_UNRESPONSIVE):
                self._schedule_recovery(event)
            with self._subs_lock:
                subs = list(self._subs)
            for sub in subs:
                if not sub.matches(event.kind):
                    continue
                started = time.monotonic()
                try:
                    sub.callback(event)
                except Exception:  # subscriber bugs must not kill the dispatcher
                    logger.exception("%s: subscriber callback raised for %s", self.name, event.kind)
                elapsed = time.monotonic() - started
                if elapsed > CALLBACK_WARN_SECONDS:
                    logger.warning(
                        "%s: callback for %s took %.2fs; callbacks must be non-blocking", self.name, event.kind, elapsed
                    )

    # -- monitor -------------------------------------------------------------------

    def _monitor_loop(self) -> None:
        while not self._stopping.is_set():
            if self._recovering:
                self._stopping.wait(self.poll_period)
                continue
            cycle_started = time.monotonic()
            self._poll_once()
            remaining = self.poll_period - (time.monotonic() - cycle_started)
            if remaining > 0:
                self._stopping.wait(remaining)

    def _poll_once(self) -> None:
        try:
            status = self.admin.status()
        except (AdminTimeout, AdminUnreachable):
            self._consecutive_timeouts += 1
            if self._consecutive_timeouts >= self.unresponsive_threshold and not self._unresponsive_reported:
                self._unresponsive_reported = True
                self._emit(
                    NodeEvent(
                        NODE_UNRESPONSIVE,
                        time.time(),
                        consecutive_timeouts=self._consecutive_timeouts,
                    )
                )
            return
        self._consecutive_timeouts = 0
        self._unresponsive_reported = False
        height = status["height"]
        if self._last_height is None:
            self._last_height = height
            return
        for observed in range(self._last_height + 1, height + 1):
            self._emit(NodeEvent(NEW_BLOCK, time.time(), height=observed))
            self._check_pending(observed)
        self._last_height = height

    def _check_pending(self, observed_height: int) -> None:
        for tx_id, entry in self.journal.pending():
            try:
                info = self.admin.get_transaction(tx_id)
            except (AdminTimeout, AdminUnreachable):
                return
            if info["status"] == "mined":
                self.journal.mark_mined(tx_id, info["height"])
                self._emit(NodeEvent(TX_MINED, time.time(), tx_id=tx_id, height=info["height"]))
                continue
            if observed_height <= entry.submit_height:
                continue
            entry.blocks_waited += 1
            if entry.blocks_waited == self.stall_threshold and not entry.stall_reported:
                entry.stall_reported = True
                self._emit(
                    NodeEvent(TX_STALLED, time.time(), tx_id=tx_id, blocks_waited=entry.blocks_waited)
                )

    # -- transactions ------------------------------------------------------------------

    def submit(
        self,
        recipient: str,
        value: int,
        payload_hash: str | None = None,
        cost: int = DEFAULT_TX_COST,
    ) -> str:
        """Build, journal (write-ahead), and submit a transaction from this node's account."""
        with self._submit_lock:
            nonce = self.admin.get_nonce(self.account)
            tx = make_transaction(self.account, recipient, value, nonce, cost, payload_hash)
            return self._journal_and_send(tx)

    def submit_transaction(self, tx: Transaction) -> str:
        """Submit a caller-built transaction; duplicate tx ids collapse to one journal entry."""
        with self._submit_lock:
            return self._journal_and_send(tx)

    def _journal_and_send(self, tx: Transaction) -> str:
        try:
            submit_height = self.admin.block_number()
        except (AdminTimeout, AdminUnreachable):
            submit_height = self._last_height or 0
        fresh = self.journal.record_submitted(tx, submit_height)
        if not fresh:
            return tx.tx_id
        try:
            self.admin.submit_tx(tx.to_dict())
        except AdminError as exc:
            # Semantic rejection by the node: the transaction can never apply.
            self.journal.mark_failed(tx.tx_id, str(exc))
            raise
        except (AdminTimeout, AdminUnreachable) as exc:
            # Transport failure: the journal already holds the transaction, so
            # stall detection and recovery will resubmit it once the node heals.
            logger.warning("%s: submit of %s did not reach the node (%s); journaled", self.name, tx.tx_id[:12], exc)
        return tx.tx_id

    def submit_with_privacy(
        self,
        payload: bytes,
        recipient: str,
        value: int,
        endpoints: Iterable[tuple[str, int]],
        cost: int = DEFAULT_TX_COST,
    ) -> tuple[str, list[str]]:
        """Commit digest(payload) on-chain; ship the payload itself off-chain.

        The chain carries only the 32-byte digest; each endpoint receives
        the full payload and can verify it against the mined transaction.
        """
        payload_hash = sha256_hex(payload)
        tx_id = self.submit(recipient, value, payload_hash=payload_hash, cost=cost)
        message_ids = []
        for endpoint in endpoints:
            receipt = self.send_offchain(
                endpoint,
                payload,
                kind="payload",
                extra={"txId": tx_id, "payloadHash": payload_hash},
            )
            message_ids.append(receipt.msg_id)
        return tx_id, message_ids

    def verify_offchain_payload(self, tx_id: str, payload: bytes) -> tuple[bool, str]:
        """Check a received payload against the on-chain commitment for tx_id."""
        info = self.admin.get_transaction(tx_id)
        if info["status"] == "unknown":
            return False, "transaction unknown to node"
        expected = (info.get("tx") or {}).get("payloadHash")
        actual = sha256_hex(payload)
        if expected != actual:
            return False, f"payload digest {actual} != on-chain commitment {expected}"
        if info["status"] != "mined":
            return False, "commitment not mined yet"
        return True, "ok"

    # -- recovery ------------------------------------------------------------------------

    def _schedule_recovery(self, trigger: NodeEvent) -> None:
        if self._recovering:
            return
        logger.warning("%s: %s triggered automatic recovery", self.name, trigger.kind)
        thread = threading.Thread(target=self._recover_guarded, daemon=True)
        thread.start()

    def _recover_guarded(self) -> None:
        try:
            self.recover()
        except RecoveryFailed as exc:
            logger.error("%s: automatic recovery gave up: %s", self.name, exc)

    def recover(self) -> RecoveryReport:
        """Restart the node from its data directory and resubmit pending txs."""
        with self._recover_lock:
            self._recovering = True
            try:
                return self._recover_inner()
            finally:
                self._recovering = False

    def _recover_inner(self) -> RecoveryReport:
        self._stop_node_process()
        attempts = 0
        while attempts < self.max_restarts and not self._stopping.is_set():
            attempts += 1
            if attempts > 1:
                time.sleep(self.backoff_base * (2 ** (attempts - 2)))
            pid = self.launcher.start(self.paths.root)
            if not self._await_ready(deadline=self.ready_timeout):
                logger.warning("%s: restart attempt %d did not become ready", self.name, attempts)
                if self.launcher.is_alive(pid):
                    self.launcher.kill(pid)
                continue
            try:
                status = self.admin.status()
            except (AdminTimeout, AdminUnreachable):
                continue
            if status["genesisHash"] != self.expected_genesis_hash:
                self._emit(NodeEvent(RECOVERY_FAILED, time.time()))
                raise RecoveryFailed(
                    f"{self.name}: restarted node reports genesis {status['genesisHash']}, "
                    f"expected {self.expected_genesis_hash}"
                )
            resubmitted = self._resubmit_pending()
            self._consecutive_timeouts = 0
            self._unresponsive_reported = False
            self._last_height = status["height"]
            report = RecoveryReport(restarted=True, resubmitted=resubmitted, attempts=attempts)
            self.recovery_count += 1
            self.recovery_reports.append(report)
            logger.info("%s: recovered after %d attempt(s), resubmitted %d tx", self.name, attempts, resubmitted)
            return report
        self._emit(NodeEvent(RECOVERY_FAILED, time.time()))
        raise RecoveryFailed(f"{self.name}: node refused to restart after {attempts} attempts")

    def _stop_node_process(self) -> None:
        pid = self._read_pid()
        try:
            self.admin.stop(timeout=1.0)
        except (AdminError, AdminTimeout, AdminUnreachable):
            pass
        if pid is None:
            return
        deadline = time.monotonic() + 3.0
        while self.launcher.is_alive(pid):
            if time.monotonic() > deadline:
                self.launcher.kill(pid)
                break
            time.sleep(0.02)
        deadline = time.monotonic() + 3.0
        while self.launcher.is_alive(pid) and time.monotonic() < deadline:
            time.sleep(0.02)

    def _read_pid(self) -> int | None:
        try:
            return int(self.paths.pid.read_text(encoding="utf-8").strip())
        except (OSError, ValueError):
            return None

    def _await_ready(self, deadline: float) -> bool:
        limit = time.monotonic() + deadline
        while time.monotonic() < limit:
            if self.admin.is_up(timeout=0.3):
                return True
            time.sleep(0.05)
        return False

    def _resubmit_pending(self) -> int:
        count = 0
        current_height = self.admin.block_number()
        for tx_id, entry in self.journal.pending():
            try:
                self.admin.submit_tx(dict(entry.tx))
                self.journal.mark_resubmitted(tx_id, current_height)
                count += 1
            except AdminError as exc:
                self.journal.mark_failed(tx_id, str(exc))
        return count

    # -- off-chain channel ------------------------------------------------------------------

    def on_message(self, handler: Callable[[dict], None]) -> None:
        """Register a handler for inbound off-chain messages (called once per msg id)."""
        self._offchain_handlers.append(handler)

    def send_offchain(
        self,
        endpoint: tuple[str, int],
        payload: bytes,
        kind: str = "data",
        extra: dict | None = None,
        msg_id: str | None = None,
    ) -> OffchainReceipt:
        """At-least-once delivery with receiver-side de-duplication by message id."""
        message = {
            "msgId": msg_id or uuid.uuid4().hex,
            "kind": kind,
            "payload": base64.b64encode(payload).decode("ascii"),
            "from": {"name": self.name, "host": self.identity.host, "port": self.identity.wrapper_port},
        }
        if extra:
            message.update(extra)
        host, port = endpoint
        last_error: Exception | None = None
        for attempt in range(1, self.offchain_retries + 2):
            try:
                ack = framed_request(host, port, message, timeout=3.0)
                return OffchainReceipt(message["msgId"], bool(ack.get("duplicate")), attempt)
            except OSError as exc:
                last_error = exc
                time.sleep(0.05 * attempt)
        raise PeerUnreachable(f"{self.name}: wrapper peer {host}:{port} unreachable: {last_error}")

    def _offchain_handler(self):
        wrapper = self

        class OffchainHandler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                try:
                    message = recv_framed(self.request)
                except (OSError, ValueError):
                    return
                msg_id = message.get("msgId")
                with wrapper._seen_lock:
                    duplicate = msg_id in wrapper._seen_msg_ids
                    if not duplicate and msg_id:
                        wrapper._seen_msg_ids.add(msg_id)
                if not duplicate:
                    decoded = dict(message)
                    try:
                        decoded["payload"] = base64.b64decode(message.get("payload", ""))
                    except (ValueError, TypeError):
                        decoded["payload"] = b""
                    for handler in list(wrapper._offchain_handlers):
                        try:
                            handler(decoded)
                        except Exception:
                            logger.exception("%s: off-chain handler raised", wrapper.name)
                try:
                    send_framed(self.request, {"ok": True, "duplicate": duplicate})
                except OSError:
                    pass

        return OffchainHandler
