from __future__ import annotations

import json
import threading
import time

import pytest

from chainyard.canonical import sha256_hex
from chainyard.chain import make_transaction
from chainyard.dsl import GenesisParams, NetworkConfig
from chainyard.genesis import make_genesis, write_genesis
from chainyard.manager import make_bench_config
from chainyard.protocol import AdminClient, AdminError
from chainyard.wrapper import (
    NEW_BLOCK,
    NODE_UNRESPONSIVE,
    TX_MINED,
    TX_STALLED,
    BindFailure,
    NodeWrapper,
    PeerUnreachable,
    RecoveryFailed,
)
from conftest import wait_until


@pytest.fixture
def wrapped(live_network):
    """A started 1-prosumer network plus attached wrappers, all torn down."""
    wrappers = []

    def launch(prosumers=1, block_interval=0.15, auto_recover=True, poll=0.1, **wrapper_kwargs):
        manager, config = live_network(prosumers=prosumers, block_interval=block_interval)
        built = {}
        for client in config.clients:
            wrapper = NodeWrapper(
                manager.node_dir(client.name),
                poll_period=poll,
                auto_recover=auto_recover,
                **wrapper_kwargs,
            ).attach()
            wrappers.append(wrapper)
            built[client.name] = wrapper
        return manager, config, built

    yield launch
    for wrapper in wrappers:
        wrapper.close()


class Collector:
    def __init__(self):
        self.events = []
        self._cond = threading.Condition()

    def __call__(self, event):
        with self._cond:
            self.events.append(event)
            self._cond.notify_all()

    def wait_for(self, predicate, timeout=15.0):
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                matches = [e for e in self.events if predicate(e)]
                if matches:
                    return matches[0]
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise AssertionError(f"no matching event; saw {[e.kind for e in self.events]}")
                self._cond.wait(remaining)


def test_attach_reports_snapshot_and_duplicate_bind_fails(wrapped):
    manager, config, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    assert wrapper.admin.is_up()
    with pytest.raises(BindFailure):
        NodeWrapper(manager.node_dir("prosumer1")).attach()


def test_attach_with_node_down_supervises_from_cold(live_network):
    manager, config = live_network(prosumers=1, block_interval=0.1)
    manager.network_stop()
    wrapper = NodeWrapper(manager.node_dir("prosumer1"), poll_period=0.1).attach()
    try:
        unresponsive = Collector()
        wrapper.subscribe(NODE_UNRESPONSIVE, unresponsive)
        event = unresponsive.wait_for(lambda e: True, timeout=15)
        assert event.consecutive_timeouts >= 3
        wait_until(lambda: wrapper.recovery_count == 1, timeout=20, message="cold supervision restarts the node")
        assert wrapper.admin.is_up()
    finally:
        wrapper.close()


def test_new_block_events_arrive_in_height_order(wrapped):
    _, _, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    collector = Collector()
    wrapper.subscribe(NEW_BLOCK, collector)
    collector.wait_for(lambda e: e.height is not None and len(collector.events) >= 4)
    heights = [e.height for e in collector.events]
    assert heights == sorted(heights)
    assert heights == list(range(heights[0], heights[0] + len(heights)))


def test_multiple_subscribers_and_unsubscribe(wrapped):
    _, _, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    first, second = Collector(), Collector()
    sub1 = wrapper.subscribe(NEW_BLOCK, first)
    wrapper.subscribe(NEW_BLOCK, second)
    first.wait_for(lambda e: True)
    second.wait_for(lambda e: True)

    wrapper.unsubscribe(sub1)
    seen = len(first.events)
    second.wait_for(lambda e: len(second.events) >= seen + 3)
    assert len(first.events) == seen  # no calls after unsubscribe


def test_submit_mined_event_and_journal(wrapped):
    _, config, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    collector = Collector()
    wrapper.subscribe(TX_MINED, collector)
    recipient = wrappers["dso1"].account
    tx_id = wrapper.submit(recipient, 42)
    event = collector.wait_for(lambda e: e.tx_id == tx_id)
    assert event.height >= 1
    entry = wrapper.journal.entries[tx_id]
    assert entry.status == "mined"
    assert entry.resubmissions == 0
    assert entry.describe() == "mined"


def test_journal_is_write_ahead(wrapped):
    manager, config, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    manager.network_stop()  # node down: the submit cannot reach it
    tx = make_transaction(wrapper.account, wrappers["dso1"].account, 1, nonce=0)
    assert wrapper.submit_transaction(tx) == tx.tx_id
    entry = wrapper.journal.entries[tx.tx_id]
    assert entry.status == "pending"
    journal_lines = wrapper.paths.wrapper_journal.read_text().splitlines()
    assert any(json.loads(line)["txId"] == tx.tx_id for line in journal_lines)


def test_duplicate_submit_single_journal_entry(wrapped):
    _, _, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    tx = make_transaction(wrapper.account, wrappers["dso1"].account, 5, nonce=0)
    first = wrapper.submit_transaction(tx)
    second = wrapper.submit_transaction(tx)
    assert first == second
    assert len([e for e in wrapper.journal.entries if e == tx.tx_id]) == 1


def test_semantic_rejection_marks_journal_failed(wrapped):
    _, _, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    with pytest.raises(AdminError):
        wrapper.submit(wrappers["dso1"].account, 10**12)  # far beyond balance
    failed = [e for e in wrapper.journal.entries.values() if e.status == "failed"]
    assert len(failed) == 1


def test_stall_detected_after_exactly_three_blocks_and_recovered(wrapped):
    manager, config, wrappers = wrapped(block_interval=0.2)
    wrapper = wrappers["prosumer1"]
    stalled, mined = Collector(), Collector()
    wrapper.subscribe(TX_STALLED, stalled)
    wrapper.subscribe(TX_MINED, mined)

    wrapper.admin.set_fault("stall_mempool")
    tx_id = wrapper.submit(wrappers["dso1"].account, 3)
    event = stalled.wait_for(lambda e: e.tx_id == tx_id, timeout=20)
    assert event.blocks_waited == 3

    mined.wait_for(lambda e: e.tx_id == tx_id, timeout=30)
    entry = wrapper.journal.entries[tx_id]
    assert entry.status == "mined"
    assert entry.resubmissions == 1
    assert wrapper.recovery_count == 1
    assert wrapper.admin.status()["fault"] == "none"  # restart cleared the fault


def test_unresponsive_node_is_replaced_with_chain_preserved(wrapped):
    manager, config, wrappers = wrapped(block_interval=0.1)
    wrapper = wrappers["prosumer1"]
    unresponsive = Collector()
    wrapper.subscribe(NODE_UNRESPONSIVE, unresponsive)

    wait_until(lambda: wrapper.admin.is_up(), message="node up")
    height_before = wrapper.admin.block_number()
    old_pid = int(wrapper.paths.pid.read_text())
    wrapper.admin.set_fault("unresponsive")

    event = unresponsive.wait_for(lambda e: True, timeout=20)
    assert event.consecutive_timeouts >= 3
    wait_until(lambda: wrapper.recovery_count == 1, timeout=30, message="automatic recovery")
    status = wait_until(lambda: wrapper.admin.is_up() and wrapper.admin.status(), timeout=10, message="node healthy")
    assert status["height"] >= height_before
    assert int(wrapper.paths.pid.read_text()) != old_pid


def test_recovery_failed_after_max_restarts(wrapped):
    manager, config, wrappers = wrapped(auto_recover=False)
    wrapper = wrappers["prosumer1"]
    wrapper.max_restarts = 2
    wrapper.ready_timeout = 1.0
    wrapper.backoff_base = 0.05
    # poison the data directory: a different (valid) genesis makes every restart exit
    other = make_bench_config(NetworkConfig("other", "1", GenesisParams(5, 16, 21000, 7), (), ()), 1, suffix="x")
    write_genesis(make_genesis(other), wrapper.paths.genesis)
    with pytest.raises(RecoveryFailed):
        wrapper.recover()
    assert wrapper.recovery_count == 0


def test_manual_recover_resubmits_pending(wrapped):
    manager, config, wrappers = wrapped(auto_recover=False, block_interval=0.1)
    wrapper = wrappers["prosumer1"]
    wrapper.admin.set_fault("stall_mempool")
    tx_id = wrapper.submit(wrappers["dso1"].account, 2)
    report = wrapper.recover()
    assert report.restarted
    assert report.resubmitted == 1
    wait_until(
        lambda: wrapper.admin.get_transaction(tx_id)["status"] == "mined", timeout=20, message="tx mined after recover"
    )


def test_offchain_delivery_and_dedup(wrapped):
    _, config, wrappers = wrapped()
    sender, receiver = wrappers["prosumer1"], wrappers["dso1"]
    inbox = []
    receiver.on_message(inbox.append)
    dso_spec = next(c for c in config.clients if c.role == "dso")
    endpoint = (dso_spec.host, dso_spec.wrapper_port)

    receipt = sender.send_offchain(endpoint, b"hello grid", kind="greeting")
    assert not receipt.duplicate
    wait_until(lambda: len(inbox) == 1, message="message delivered")
    assert inbox[0]["payload"] == b"hello grid"
    assert inbox[0]["kind"] == "greeting"

    duplicate = sender.send_offchain(endpoint, b"hello grid", kind="greeting", msg_id=receipt.msg_id)
    assert duplicate.duplicate
    time.sleep(0.2)
    assert len(inbox) == 1  # one logical delivery


def test_offchain_dead_peer(wrapped):
    _, _, wrappers = wrapped()
    wrapper = wrappers["prosumer1"]
    wrapper.offchain_retries = 0
    with pytest.raises(PeerUnreachable):
        wrapper.send_offchain(("127.0.0.1", 1), b"x")


@pytest.mark.parametrize("payload", [b"secret meter readings", b""])
def test_submit_with_privacy_commits_digest_only(wrapped, payload):
    _, config, wrappers = wrapped()
    sender, receiver = wrappers["prosumer1"], wrappers["dso1"]
    got = []
    receiver.on_message(got.append)
    dso_spec = next(c for c in config.clients if c.role == "dso")

    tx_id, msg_ids = sender.submit_with_privacy(
        payload, receiver.account, value=1, endpoints=[(dso_spec.host, dso_spec.wrapper_port)]
    )
    assert len(msg_ids) == 1
    wait_until(lambda: got, message="payload delivered off-chain")
    assert got[0]["payload"] == payload
    assert got[0]["txId"] == tx_id

    wait_until(lambda: sender.admin.get_transaction(tx_id)["status"] == "mined", message="commitment mined")
    on_chain = receiver.admin.get_transaction(tx_id)["tx"]
    assert on_chain["payloadHash"] == sha256_hex(payload)
    assert "payload" not in on_chain  # only the 32-byte digest travels on-chain

    ok, reason = receiver.verify_offchain_payload(tx_id, payload)
    assert ok, reason
    tampered_ok, tampered_reason = receiver.verify_offchain_payload(tx_id, payload + b"!")
    assert not tampered_ok
    assert "digest" in tampered_reason


def test_idle_subscription_still_fires(wrapped):
    manager, config, wrappers = wrapped(block_interval=0.1)
    wrapper = wrappers["prosumer1"]
    collector = Collector()
    wrapper.subscribe(NEW_BLOCK, collector)
    collector.wait_for(lambda e: True)

    miner = config.miners[0]
    miner_admin = AdminClient(miner.host, miner.admin_port)
    miner_admin.set_mining(False)
    time.sleep(1.0)  # drain in-flight blocks
    idle_count = len(collector.events)
    time.sleep(5.0)  # idle period: no events at all
    assert len(collector.events) == idle_count

    miner_admin.set_mining(True)
    collector.wait_for(lambda e: len(collector.events) > idle_count, timeout=10)
