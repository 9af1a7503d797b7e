"""Simulated blockchain node: ledger, mempool, mining, peers, admin wire.

A node runs from a data directory prepared by the manager:

    node.json      identity and runtime knobs
    genesis.json   canonical genesis document (hash-verified on load)
    meta.json      genesis hash stamped at first init (mismatch detection)
    blocks.log     append-only canonical-JSON block per line
    mempool.json   pending transaction journal
    peers.json     known peer endpoints, re-joined on restart
    node.pid       pid of the running process

Runnable standalone: ``python -m chainyard.node --data-dir DIR``.

Fault modes replicate failure behaviors seen in real deployments:
``stall_mempool`` keeps mining blocks but never includes (or forwards)
pending transactions; ``unresponsive`` makes every admin request hang
until the client gives up.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import socketserver
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import chain as chainmod
from .chain import Block, Chain, Transaction, compute_tx_id
from .genesis import GenesisDocument, read_genesis
from .protocol import framed_request, recv_framed, send_framed

logger = logging.getLogger(__name__)

FAULT_MODES = ("none", "stall_mempool", "unresponsive")
UNRESPONSIVE_HANG_SECONDS = 600.0
SYNC_BATCH = 500

DEFAULT_BLOCK_INTERVAL = 0.25
DEFAULT_MAX_BLOCK_TXS = chainmod.DEFAULT_MAX_BLOCK_TXS


class PortInUse(OSError):
    pass


class GenesisMismatch(RuntimeError):
    """Data directory was initialized from a different genesis document."""


@dataclass(frozen=True)
class NodePaths:
    root: Path

    @property
    def node_json(self) -> Path:
        return self.root / "node.json"

    @property
    def genesis(self) -> Path:
        return self.root / "genesis.json"

    @property
    def meta(self) -> Path:
        return self.root / "meta.json"

    @property
    def blocks(self) -> Path:
        return self.root / "blocks.log"

    @property
    def mempool(self) -> Path:
        return self.root / "mempool.json"

    @property
    def peers(self) -> Path:
        return self.root / "peers.json"

    @property
    def pid(self) -> Path:
        return self.root / "node.pid"

    @property
    def log(self) -> Path:
        return self.root / "node.log"

    @property
    def wrapper_journal(self) -> Path:
        return self.root / "wrapper-journal.log"


@dataclass(frozen=True)
class NodeIdentity:
    configuration_name: str
    name: str
    role: str
    host: str
    blockchain_port: int
    admin_port: int
    wrapper_port: int | None
    account: str
    block_interval: float
    max_block_txs: int

    @staticmethod
    def load(path: Path) -> "NodeIdentity":
        data = json.loads(path.read_text(encoding="utf-8"))
        return NodeIdentity(
            configuration_name=data["configurationName"],
            name=data["name"],
            role=data["role"],
            host=data["host"],
            blockchain_port=data["blockchainPort"],
            admin_port=data["adminPort"],
            wrapper_port=data.get("wrapperPort"),
            account=data["account"],
            block_interval=data.get("blockIntervalSeconds", DEFAULT_BLOCK_INTERVAL),
            max_block_txs=data.get("maxBlockTxs", DEFAULT_MAX_BLOCK_TXS),
        )

    def dump(self) -> dict:
        return {
            "configurationName": self.configuration_name,
            "name": self.name,
            "role": self.role,
            "host": self.host,
            "blockchainPort": self.blockchain_port,
            "adminPort": self.admin_port,
            "wrapperPort": self.wrapper_port,
            "account": self.account,
            "blockIntervalSeconds": self.block_interval,
            "maxBlockTxs": self.max_block_txs,
        }


def load_blocks(data_dir: str | Path) -> list[Block]:
    """Read the persisted chain (genesis block + block log) from a data directory."""
    paths = NodePaths(Path(data_dir))
    doc = read_genesis(paths.genesis)
    blocks = [chainmod.genesis_block(doc)]
    if paths.blocks.exists():
        with paths.blocks.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    blocks.append(Block.from_dict(json.loads(line)))
    return blocks


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class NodeRuntime:
    """One node: chain state plus admin/peer servers and the mining loop."""

    def __init__(self, data_dir: str | Path):
        self.paths = NodePaths(Path(data_dir))
        if not self.paths.node_json.exists():
            raise FileNotFoundError(f"{self.paths.node_json}: node identity missing (was the node created?)")
        self.identity = NodeIdentity.load(self.paths.node_json)
        self.genesis_doc: GenesisDocument = read_genesis(self.paths.genesis)
        self._check_meta()

        self._lock = threading.RLock()
        self.chain = Chain(self.genesis_doc)
        self.peers: set[tuple[str, int]] = set()
        self.fault = "none"
        self.mining_enabled = self.identity.role == "miner"
        self.stop_event = threading.Event()

        self._blocks_handle = None
        self._outbox: list[tuple[tuple[str, int] | None, dict]] = []
        self._outbox_cond = threading.Condition()
        self._threads: list[threading.Thread] = []
        self._admin_server: _Server | None = None
        self._peer_server: _Server | None = None
        self._serving = False

        self._replay()
        self._load_mempool()
        self._load_peers()

    # -- persistence ------------------------------------------------------

    def _check_meta(self) -> None:
        if self.paths.meta.exists():
            meta = json.loads(self.paths.meta.read_text(encoding="utf-8"))
            stored = meta.get("genesisHash")
            if stored != self.genesis_doc.genesis_hash:
                raise GenesisMismatch(
                    f"data directory was initialized with genesis {stored}, "
                    f"got {self.genesis_doc.genesis_hash}"
                )
        else:
            self.paths.meta.write_text(
                json.dumps({"genesisHash": self.genesis_doc.genesis_hash}) + "\n", encoding="utf-8"
            )

    def _replay(self) -> None:
        if not self.paths.blocks.exists():
            self.paths.blocks.touch()
            return
        with self.paths.blocks.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                block = Block.from_dict(json.loads(line))
                status, detail = self.chain.receive_block(block)
                if status != "accepted":
                    raise GenesisMismatch(
                        f"{self.paths.blocks}:{lineno}: persisted block rejected ({status}: {detail})"
                    )
        logger.info("%s: replayed chain to height %d", self.identity.name, self.chain.height)

    def _load_mempool(self) -> None:
        if not self.paths.mempool.exists():
            return
        data = json.loads(self.paths.mempool.read_text(encoding="utf-8") or "{}")
        for tx_dict in data.get("transactions", []):
            try:
                self.chain.submit_transaction(Transaction.from_dict(tx_dict))
            except (chainmod.TxError, KeyError, TypeError):
                pass  # journal entries already mined or invalidated are dropped

    def _load_peers(self) -> None:
        if self.paths.peers.exists():
            data = json.loads(self.paths.peers.read_text(encoding="utf-8") or "[]")
            self.peers = {(host, port) for host, port in data}

    def _persist_block(self, block: Block) -> None:
        if self._blocks_handle is None:
            self._blocks_handle = self.paths.blocks.open("a", encoding="utf-8")
        self._blocks_handle.write(json.dumps(block.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
        self._blocks_handle.flush()

    def _persist_mempool(self) -> None:
        payload = {"transactions": [tx.to_dict() for tx in self.chain.mempool.values()]}
        tmp = self.paths.mempool.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload), encoding="utf-8")
        tmp.replace(self.paths.mempool)

    def _persist_peers(self) -> None:
        tmp = self.paths.peers.with_suffix(".tmp")
        tmp.write_text(json.dumps(sorted([h, p] for h, p in self.peers)), encoding="utf-8")
        tmp.replace(self.paths.peers)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        try:
            self._admin_server = _Server((self.identity.host, self.identity.admin_port), self._admin_handler())
            self._peer_server = _Server((self.identity.host, self.identity.blockchain_port), self._peer_handler())
        except OSError as exc:
            for server in (self._admin_server, self._peer_server):
                if server is not None:
                    server.server_close()
            raise PortInUse(f"{self.identity.name}: {exc}") from exc
        self._serving = True
        for server in (self._admin_server, self._peer_server):
            thread = threading.Thread(target=server.serve_forever, args=(0.1,), daemon=True)
            thread.start()
            self._threads.append(thread)
        worker = threading.Thread(target=self._broadcast_loop, daemon=True)
        worker.start()
        self._threads.append(worker)
        if self.identity.role == "miner":
            miner = threading.Thread(target=self._mine_loop, daemon=True)
            miner.start()
            self._threads.append(miner)
        greeter = threading.Thread(target=self._greet_known_peers, daemon=True)
        greeter.start()
        self._threads.append(greeter)
        logger.info(
            "%s (%s) up: admin=%s:%d chain=%s:%d height=%d",
            self.identity.name,
            self.identity.role,
            self.identity.host,
            self.identity.admin_port,
            self.identity.host,
            self.identity.blockchain_port,
            self.chain.height,
        )

    def shutdown(self) -> None:
        logger.info("%s: shutting down", self.identity.name)
        self.stop_event.set()
        with self._outbox_cond:
            self._outbox_cond.notify_all()
        for server in (self._admin_server, self._peer_server):
            if server is not None:
                if self._serving:
                    server.shutdown()
                server.server_close()
        self._serving = False
        self._admin_server = None
        self._peer_server = None
        with self._lock:
            self._persist_mempool()
            if self._blocks_handle is not None:
                self._blocks_handle.close()
                self._blocks_handle = None
        logger.info("%s: stopped at height %d", self.identity.name, self.chain.height)

    def run_until_stopped(self) -> None:
        self.start()
        try:
            while not self.stop_event.wait(0.2):
                pass
        finally:
            self.shutdown()

    def request_stop(self) -> None:
        self.stop_event.set()

    # -- endpoint identity --------------------------------------------------

    @property
    def endpoint(self) -> dict:
        return {"host": self.identity.host, "port": self.identity.blockchain_port}

    # -- mining --------------------------------------------------------------

    def _mine_loop(self) -> None:
        interval = max(self.identity.block_interval, 0.01)
        while not self.stop_event.is_set():
            if not self.mining_enabled:
                self.stop_event.wait(0.05)
                continue
            started = time.monotonic()
            with self._lock:
                height = self.chain.height + 1
                parent = self.chain.tip.block_hash
                stall = self.fault == "stall_mempool"
                txs = () if stall else self.chain.assemble_candidate(self.identity.max_block_txs)
            block = chainmod.mine_candidate(
                height,
                parent,
                self.identity.account,
                txs,
                self.chain.target_bits,
                int(time.time()),
                should_abort=self.stop_event.is_set,
            )
            if block is None:
                break
            with self._lock:
                status, detail = self.chain.receive_block(block)
                if status == "accepted":
                    self._persist_block(block)
                    if block.transactions:
                        self._persist_mempool()
            if status == "accepted":
                logger.debug("%s mined block %d (%d txs)", self.identity.name, block.height, len(block.transactions))
                self._enqueue(None, {"kind": "new_block", "from": self.endpoint, "block": block.to_dict()})
            else:
                logger.warning("%s: mined block rejected: %s %s", self.identity.name, status, detail)
            remaining = interval - (time.monotonic() - started)
            if remaining > 0:
                self.stop_event.wait(remaining)

    # -- gossip ----------------------------------------------------------------

    def _enqueue(self, exclude: tuple[str, int] | None, message: dict) -> None:
        with self._outbox_cond:
            self._outbox.append((exclude, message))
            self._outbox_cond.notify()

    def _broadcast_loop(self) -> None:
        while True:
            with self._outbox_cond:
                while not self._outbox and not self.stop_event.is_set():
                    self._outbox_cond.wait(0.2)
                if self.stop_event.is_set() and not self._outbox:
                    return
                exclude, message = self._outbox.pop(0)
            with self._lock:
                targets = sorted(self.peers)
            for target in targets:
                if target == exclude:
                    continue
                try:
                    framed_request(target[0], target[1], message, timeout=2.0)
                except OSError as exc:
                    logger.debug("%s: peer %s unreachable during broadcast: %s", self.identity.name, target, exc)

    def _greet_known_peers(self) -> None:
        with self._lock:
            targets = sorted(self.peers)
        for host, port in targets:
            if self.stop_event.is_set():
                return
            try:
                self._handshake(host, port)
            except OSError as exc:
                logger.debug("%s: persisted peer %s:%d not reachable yet: %s", self.identity.name, host, port, exc)

    def _handshake(self, host: str, port: int) -> None:
        """Hello exchange: register the peer, catch up if behind, share mempool."""
        with self._lock:
            my_height = self.chain.height
        ack = framed_request(host, port, {"kind": "hello", "from": self.endpoint, "height": my_height}, timeout=3.0)
        with self._lock:
            self.peers.add((host, port))
            self._persist_peers()
        if ack.get("height", 0) > my_height:
            self._sync_from(host, port)
        if self.fault != "stall_mempool":
            with self._lock:
                pending = list(self.chain.mempool.values())
            for tx in pending:
                self._enqueue(None, {"kind": "new_tx", "from": self.endpoint, "tx": tx.to_dict()})

    def _sync_from(self, host: str, port: int) -> None:
        while not self.stop_event.is_set():
            with self._lock:
                next_height = self.chain.height + 1
            reply = framed_request(host, port, {"kind": "get_blocks", "fromHeight": next_height}, timeout=5.0)
            batch = reply.get("blocks", [])
            if not batch:
                return
            for block_dict in batch:
                block = Block.from_dict(block_dict)
                with self._lock:
                    status, _ = self.chain.receive_block(block)
                    if status == "accepted":
                        self._persist_block(block)
                        if block.transactions:
                            self._persist_mempool()
                if status not in ("accepted", "duplicate"):
                    return
            if len(batch) < SYNC_BATCH:
                return

    # -- admin protocol -----------------------------------------------------------

    def _admin_handler(self):
        runtime = self

        class AdminHandler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                line = self.rfile.readline()
                if not line:
                    return
                if runtime.fault == "unresponsive":
                    # Replicate a wedged client: accept the request, never answer.
                    runtime.stop_event.wait(UNRESPONSIVE_HANG_SECONDS)
                    return
                try:
                    request = json.loads(line.decode("utf-8"))
                    op = request.get("op")
                    params = request.get("params") or {}
                    if not isinstance(op, str):
                        raise ValueError("request must carry a string 'op'")
                    result = runtime._dispatch_admin(op, params)
                    response = {"ok": True, "result": result}
                except chainmod.TxError as exc:
                    response = {"ok": False, "error": {"code": exc.code, "message": str(exc)}}
                except _AdminFault as exc:
                    response = {"ok": False, "error": {"code": exc.code, "message": str(exc)}}
                except (ValueError, KeyError, TypeError) as exc:
                    response = {"ok": False, "error": {"code": "MalformedRequest", "message": str(exc)}}
                except Exception as exc:  # a bad request must never take the node down
                    logger.exception("%s: admin request failed", runtime.identity.name)
                    response = {"ok": False, "error": {"code": "InternalError", "message": str(exc)}}
                self.wfile.write((json.dumps(response) + "\n").encode("utf-8"))

        return AdminHandler

    def _dispatch_admin(self, op: str, params: dict):
        if op == "status":
            with self._lock:
                return {
                    "name": self.identity.name,
                    "role": self.identity.role,
                    "height": self.chain.height,
                    "pending": len(self.chain.mempool),
                    "peers": len(self.peers),
                    "fault": self.fault,
                    "mining": self.mining_enabled,
                    "genesisHash": self.genesis_doc.genesis_hash,
                    "account": self.identity.account,
                }
        if op == "block_number":
            with self._lock:
                return self.chain.height
        if op == "get_balance":
            with self._lock:
                return self.chain.balance_of(params["account"])
        if op == "get_nonce":
            with self._lock:
                return self.chain.next_nonce_for(params["account"])
        if op == "pending_count":
            with self._lock:
                return len(self.chain.mempool)
        if op == "get_transaction":
            with self._lock:
                status, height, tx = self.chain.transaction_status(params["txId"])
                return {"status": status, "height": height, "tx": tx.to_dict() if tx else None}
        if op == "submit_tx":
            return self._admin_submit(params["tx"])
        if op == "add_peer":
            return self._admin_add_peer(params["host"], params["port"])
        if op == "set_fault":
            mode = params["mode"]
            if mode not in FAULT_MODES:
                raise ValueError(f"unknown fault mode {mode!r}")
            self.fault = mode
            logger.info("%s: fault mode set to %s", self.identity.name, mode)
            return mode
        if op == "set_mining":
            if self.identity.role != "miner":
                raise _AdminFault("NotMiner", f"{self.identity.name} is not a miner")
            self.mining_enabled = bool(params["enabled"])
            return self.mining_enabled
        if op == "stop":
            threading.Thread(target=self._delayed_stop, daemon=True).start()
            return "stopping"
        raise ValueError(f"unknown op {op!r}")

    def _delayed_stop(self) -> None:
        time.sleep(0.05)  # let the stop response flush first
        self.request_stop()

    def _admin_submit(self, tx_dict: dict) -> str:
        tx = Transaction.from_dict(tx_dict)
        if compute_tx_id(tx.sender, tx.recipient, tx.value, tx.nonce, tx.cost, tx.payload_hash) != tx.tx_id:
            raise chainmod.TxError(f"tx id {tx.tx_id[:12]} does not match its fields")
        with self._lock:
            known = tx.tx_id in self.chain.mempool or tx.tx_id in self.chain.applied
            tx_id = self.chain.submit_transaction(tx)
            if not known:
                self._persist_mempool()
        if not known and self.fault != "stall_mempool":
            self._enqueue(None, {"kind": "new_tx", "from": self.endpoint, "tx": tx.to_dict()})
        return tx_id

    def _admin_add_peer(self, host: str, port: int) -> int:
        if (host, port) == (self.identity.host, self.identity.blockchain_port):
            raise ValueError("a node cannot peer with itself")
        try:
            self._handshake(host, port)
        except OSError as exc:
            raise _AdminFault("ConnectionRefused", f"peer {host}:{port} not reachable: {exc}") from exc
        with self._lock:
            return len(self.peers)

    # -- peer protocol -------------------------------------------------------------

    def _peer_handler(self):
        runtime = self

        class PeerHandler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                try:
                    message = recv_framed(self.request)
                    reply = runtime._dispatch_peer(message)
                    send_framed(self.request, reply)
                except Exception as exc:  # malformed peers must not kill the session loop
                    logger.debug("%s: peer session error: %s", runtime.identity.name, exc)

        return PeerHandler

    def _dispatch_peer(self, message: dict) -> dict:
        kind = message.get("kind")
        sender = message.get("from") or {}
        source = (sender.get("host"), sender.get("port")) if sender else None
        if kind == "hello":
            with self._lock:
                if source and source[0] is not None:
                    self.peers.add((source[0], source[1]))
                    self._persist_peers()
                return {"kind": "hello_ack", "height": self.chain.height}
        if kind == "get_tip":
            with self._lock:
                return {"kind": "tip", "height": self.chain.height, "blockHash": self.chain.tip.block_hash}
        if kind == "get_blocks":
            start = int(message.get("fromHeight", 1))
            with self._lock:
                batch = [b.to_dict() for b in self.chain.blocks[start : start + SYNC_BATCH]]
            return {"kind": "blocks", "blocks": batch}
        if kind == "new_block":
            return self._peer_new_block(message, source)
        if kind == "new_tx":
            return self._peer_new_tx(message, source)
        return {"kind": "error", "message": f"unknown message kind {kind!r}"}

    def _peer_new_block(self, message: dict, source: tuple[str, int] | None) -> dict:
        block = Block.from_dict(message["block"])
        with self._lock:
            status, detail = self.chain.receive_block(block)
            if status == "accepted":
                self._persist_block(block)
                if block.transactions:
                    self._persist_mempool()
        if status == "accepted":
            # Forward exactly once: only the first acceptance reaches this path.
            self._enqueue(source, {"kind": "new_block", "from": self.endpoint, "block": message["block"]})
        elif status == "BadParent" and source and block.height > self.chain.height + 1:
            threading.Thread(target=self._sync_from, args=source, daemon=True).start()
        return {"kind": "ok", "status": status, "detail": detail}

    def _peer_new_tx(self, message: dict, source: tuple[str, int] | None) -> dict:
        tx = Transaction.from_dict(message["tx"])
        try:
            with self._lock:
                known = tx.tx_id in self.chain.mempool or tx.tx_id in self.chain.applied
                self.chain.submit_transaction(tx)
                if not known:
                    self._persist_mempool()
        except chainmod.TxError as exc:
            return {"kind": "ok", "status": "rejected", "detail": str(exc)}
        if not known and self.fault != "stall_mempool":
            self._enqueue(source, {"kind": "new_tx", "from": self.endpoint, "tx": message["tx"]})
        return {"kind": "ok", "status": "accepted" if not known else "duplicate"}


class _AdminFault(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="chainyard-node", description="Run a simulated blockchain node")
    parser.add_argument("--data-dir", required=True, help="node data directory prepared by the manager")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    data_dir = Path(args.data_dir)
    try:
        runtime = NodeRuntime(data_dir)
    except GenesisMismatch as exc:
        logger.error("genesis mismatch: %s", exc)
        return 3
    except (OSError, ValueError) as exc:
        logger.error("cannot initialize node: %s", exc)
        return 1

    paths = NodePaths(data_dir)
    paths.pid.write_text(str(os.getpid()), encoding="utf-8")

    def _on_signal(signum, _frame):
        logger.info("signal %d: stopping", signum)
        runtime.request_stop()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)

    try:
        runtime.run_until_stopped()
    except PortInUse as exc:
        logger.error("%s", exc)
        return 4
    finally:
        try:
            paths.pid.unlink(missing_ok=True)
        except OSError:
            pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
