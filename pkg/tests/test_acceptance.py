"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. The benchmark-shape criterion runs the full lifecycle matrix and
is the slow one; the whole suite stays inside its stated budgets.
"""

from __future__ import annotations

import random
import statistics
import time
from contextlib import contextmanager

import pytest

from chainyard.chain import Chain, audit_chain, make_transaction
from chainyard.dsl import GenesisParams, NetworkConfig, validate
from chainyard.genesis import derive_account, make_genesis
from chainyard.manager import NetworkManager, NodeDefaults, bench, make_bench_config
from chainyard.node import load_blocks
from chainyard.protocol import AdminClient
from chainyard.tes import audit_report, generate_day, run_day, stable_report_view
from chainyard.wrapper import NEW_BLOCK, TX_STALLED, NodeWrapper
from conftest import (
    BENCH_TEMPLATE,
    inject_port_collisions,
    random_valid_config,
    wait_until,
)
from test_tes import max_uniform_quantity


@contextmanager
def criterion(number: int, description: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\n[FAIL] criterion {number}: {description}")
        raise
    print(f"\n[PASS] criterion {number}: {description} ({time.monotonic() - started:.1f}s)")


def test_criterion_1_validation_corpus():
    with criterion(1, "200-config validation corpus: exact conflict counts and reserved-id warnings"):
        rng = random.Random(20260810)
        started = time.monotonic()
        for index in range(200):
            k = index % 6
            config = random_valid_config(rng, clients=rng.randint(8, 12), miners=2)
            if index % 2 == 0:
                config = NetworkConfig(
                    config.configuration_name,
                    config.configuration_version,
                    GenesisParams(rng.randint(1, 4), config.genesis.difficulty,
                                  config.genesis.gas_limit, config.genesis.balance),
                    config.clients,
                    config.miners,
                )
            broken = inject_port_collisions(config, k, rng)
            report = validate(broken)
            conflicts = [e for e in report.errors if e.code == "PORT_CONFLICT"]
            assert len(conflicts) == k, f"config {index}: expected {k} conflicts, got {len(conflicts)}"
            reserved = [w for w in report.warnings if w.code == "CHAIN_ID_RESERVED"]
            if broken.genesis.chain_id in range(1, 5):
                assert reserved, f"config {index}: reserved chain id must warn"
            else:
                assert not reserved
        elapsed = time.monotonic() - started
        assert elapsed < 5.0, f"corpus took {elapsed:.2f}s, budget is 5s"


def test_criterion_2_lifecycle_scaling_shape(tmp_path):
    with criterion(2, "phase timings: linear client-bound phases (R^2 >= 0.95), static miner phases (<= 2x)"):
        counts = [2, 5, 10, 20]
        started = time.monotonic()
        result = bench(
            BENCH_TEMPLATE,
            counts,
            repetitions=5,
            workspace=tmp_path / "bench-ws",
            node_defaults=NodeDefaults(block_interval=0.25),
            warmup=True,
        )
        elapsed = time.monotonic() - started
        assert result.ok, f"bench failures: {result.failures}"
        assert elapsed < 600, f"bench took {elapsed:.0f}s, budget is 10 minutes"

        medians = result.medians()
        client_counts = [count + 1 for count in counts]  # prosumers + 1 dso

        linear_phases = ["ClientsCreate", "DistributeToClients", "ClientsStart", "NetworkConnect"]
        for phase in linear_phases:
            values = [medians[phase][count] for count in counts]
            r_squared = statistics.correlation(client_counts, values) ** 2
            print(f"  {phase}: medians={[f'{v:.3f}' for v in values]} R^2={r_squared:.4f}")
            assert r_squared >= 0.95, f"{phase} not linear enough: R^2={r_squared:.3f} over {values}"

        static_phases = ["MinersCreate", "BlockchainMake", "BlockchainCreate", "DistributeToMiners", "MinerStart"]
        for phase in static_phases:
            values = [medians[phase][count] for count in counts]
            ratio = max(values) / min(values)
            print(f"  {phase}: medians={[f'{v:.4f}' for v in values]} ratio={ratio:.2f}")
            assert ratio <= 2.0, f"{phase} varied {ratio:.2f}x across counts: {values}"


@pytest.mark.parametrize("n_clients", [2, 20])
def test_criterion_3_star_topology(tmp_path, n_clients):
    with criterion(3, f"star topology after connect: miner peers == {n_clients}, client peers == 1"):
        config = make_bench_config(BENCH_TEMPLATE, n_clients - 1, suffix=f"star{n_clients}")
        manager = NetworkManager(config, tmp_path / "ws", node_defaults=NodeDefaults(block_interval=0.3))
        try:
            manager.network_create()
            manager.start("miners")
            manager.start("clients")
            manager.network_connect()
            status = manager.network_status()
            assert status["miner1"]["peers"] == n_clients
            for client in config.clients:
                assert status[client.name]["peers"] == 1, client.name
        finally:
            cleanup = NetworkManager(config, tmp_path / "ws", force=True)
            try:
                cleanup.network_stop()
            except Exception:
                pass
            cleanup.network_delete()


def test_criterion_4_chain_correctness_oracle():
    with criterion(4, "1000 random txs: conservation per block, chain audit, replay-oracle equivalence"):
        rng = random.Random(404)
        config = random_valid_config(rng, clients=4, miners=1)  # 5 accounts
        config = NetworkConfig(
            config.configuration_name,
            config.configuration_version,
            GenesisParams(chain_id=77, difficulty=400, gas_limit=21000, balance=5000),
            config.clients,
            config.miners,
        )
        doc = make_genesis(config)
        chain = Chain(doc)
        accounts = sorted(doc.allocations)
        total = chain.total_balance()

        submitted = 0
        while submitted < 1000:
            for _ in range(rng.randint(1, 64)):
                if submitted >= 1000:
                    break
                sender = rng.choice(accounts)
                spendable = chain.balance_of(sender) - chain.pending_spend(sender)
                if spendable <= 0:
                    continue
                recipient = rng.choice([a for a in accounts if a != sender])
                tx = make_transaction(sender, recipient, rng.randint(0, spendable), chain.next_nonce_for(sender))
                chain.submit_transaction(tx)
                submitted += 1
            chain.mine_next(accounts[0], timestamp=submitted)
            assert chain.total_balance() == total, f"conservation broke at height {chain.height}"
        while chain.mempool:
            chain.mine_next(accounts[0], timestamp=submitted)
            assert chain.total_balance() == total

        assert submitted == 1000
        assert len(chain.applied) == 1000
        assert audit_chain(chain.blocks, doc) == []

        # independent single-threaded replay
        balances = dict(doc.allocations)
        nonces: dict[str, int] = {}
        for block in chain.blocks[1:]:
            for tx in block.transactions:
                assert tx.nonce == nonces.get(tx.sender, 0)
                balances[tx.sender] -= tx.value
                balances[tx.recipient] = balances.get(tx.recipient, 0) + tx.value
                nonces[tx.sender] = tx.nonce + 1
        assert balances == chain.balances
        assert nonces == chain.next_nonce


def test_criterion_5_fault_recovery_and_no_false_positives(live_network):
    with criterion(5, "stall fault: stalled after exactly 3 blocks, auto-recovery, mined <= 10s; none-mode clean"):
        # Part A: stall on a client's node.
        manager, config = live_network(prosumers=1, block_interval=0.2)
        dso_account = derive_account(config.configuration_name, "dso1")
        wrapper = NodeWrapper(manager.node_dir("prosumer1"), poll_period=0.1).attach()
        try:
            stalled_events = []
            wrapper.subscribe(TX_STALLED, stalled_events.append)
            wrapper.admin.set_fault("stall_mempool")
            tx_id = wrapper.submit(dso_account, 5)

            wait_until(lambda: stalled_events, timeout=20, message="stall detection")
            assert stalled_events[0].tx_id == tx_id
            assert stalled_events[0].blocks_waited == 3, "stall must fire after exactly 3 fault-era blocks"

            wait_until(lambda: wrapper.recovery_count == 1, timeout=30, message="automatic recovery")
            restart_at = time.monotonic()
            entry = wrapper.journal.entries[tx_id]
            wait_until(
                lambda: entry.status == "mined",
                timeout=10,
                message="tx mined (and journal updated) within 10s of restart",
            )
            assert time.monotonic() - restart_at <= 10.0
            assert wrapper.admin.get_transaction(tx_id)["status"] == "mined"
            assert entry.resubmissions == 1, "journal must show resubmitted(1)"
            assert len(stalled_events) == 1
        finally:
            wrapper.close()

        # Part B: fault mode none, 100-block run, zero recoveries, zero stalls.
        manager_b, config_b = live_network(prosumers=1, block_interval=0.08)
        dso_account_b = derive_account(config_b.configuration_name, "dso1")
        wrapper_b = NodeWrapper(manager_b.node_dir("prosumer1"), poll_period=0.1).attach()
        try:
            stalled_b = []
            wrapper_b.subscribe(TX_STALLED, stalled_b.append)
            start_height = wrapper_b.admin.block_number()
            tx_id = wrapper_b.submit(dso_account_b, 5)
            wait_until(
                lambda: wrapper_b.admin.block_number() >= start_height + 100,
                timeout=60,
                message="100-block run",
            )
            assert wrapper_b.admin.get_transaction(tx_id)["status"] == "mined"
            assert wrapper_b.recovery_count == 0, "no recoveries may fire without a fault"
            assert stalled_b == []
        finally:
            wrapper_b.close()


def test_criterion_6_subscription_survives_long_idle(live_network):
    with criterion(6, "subscription idle >= 60s still receives the next new-block event"):
        manager, config = live_network(prosumers=1, block_interval=0.1)
        miner = config.miners[0]
        miner_admin = AdminClient(miner.host, miner.admin_port)
        wrapper = NodeWrapper(manager.node_dir("prosumer1"), poll_period=0.25).attach()
        try:
            events = []
            wrapper.subscribe(NEW_BLOCK, events.append)
            wait_until(lambda: events, timeout=10, message="subscription live before idle")

            miner_admin.set_mining(False)
            time.sleep(1.5)  # drain blocks already in flight
            idle_baseline = len(events)
            time.sleep(61.0)
            assert len(events) == idle_baseline, "no events may arrive while mining is paused"

            miner_admin.set_mining(True)
            wait_until(
                lambda: len(events) > idle_baseline,
                timeout=15,
                message="event delivery after 60s idle",
            )
        finally:
            wrapper.close()


def test_criterion_7_tes_day(live_network):
    with criterion(7, "24-interval trading day: balanced optimal clearings, 24 audited commitments, tamper detection"):
        started = time.monotonic()
        manager, config = live_network(prosumers=5, block_interval=0.1)
        wrappers = {}
        try:
            for client in config.clients:
                wrappers[client.name] = NodeWrapper(
                    manager.node_dir(client.name), poll_period=0.1
                ).attach()
            seed = 2026
            report = run_day(wrappers, config, seed=seed, intervals=24)
        finally:
            for wrapper in wrappers.values():
                wrapper.close()

        assert all(o["status"] == "ok" for o in report["outcomes"]), "every interval must commit"
        book = generate_day(seed, config, intervals=24)
        for outcome in report["outcomes"]:
            result = outcome["result"]
            sold = sum(t["quantity"] for t in result["trades"])
            bought = sum(t["quantity"] for t in result["trades"])
            assert sold == bought  # supply/demand balance, exactly
            orders = book[outcome["interval"]]
            offers = [o for o in orders if o.side == "offer"]
            bids = [o for o in orders if o.side == "bid"]
            assert sold == max_uniform_quantity(offers, bids), f"interval {outcome['interval']} not optimal"
            if result["trades"]:
                assert len({t["unitPrice"] for t in result["trades"]}) == 1

        manager.network_stop()
        blocks = load_blocks(manager.node_dir(config.miners[0].name))
        findings = audit_report(report, blocks)
        assert len(findings) == 24
        assert all(f.ok for f in findings), [f for f in findings if not f.ok]

        # alter one byte of one off-chain result: exactly that interval fails
        tampered_interval = 11
        report["outcomes"][tampered_interval]["result"]["clearingPrice"] = (
            (report["outcomes"][tampered_interval]["result"]["clearingPrice"] or 0) + 1
        )
        tampered_findings = audit_report(report, blocks)
        for finding in tampered_findings:
            assert finding.ok == (finding.interval != tampered_interval)

        elapsed = time.monotonic() - started
        assert elapsed < 120, f"trading day took {elapsed:.0f}s, budget is 2 minutes"


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "byte-identical genesis across runs; seed-identical day reports up to timestamps"):
        config = make_bench_config(BENCH_TEMPLATE, 2, suffix="det")

        # blockchain-make determinism across two fresh workspaces
        manager_a = NetworkManager(config, tmp_path / "ws-a")
        manager_b = NetworkManager(config, tmp_path / "ws-b")
        manager_a.blockchain_make()
        manager_b.blockchain_make()
        assert manager_a.genesis_path().read_bytes() == manager_b.genesis_path().read_bytes()

        # two full day runs, same seed, fresh network each time
        views = []
        for attempt in range(2):
            manager = NetworkManager(
                config, tmp_path / f"ws-day{attempt}", node_defaults=NodeDefaults(block_interval=0.1)
            )
            wrappers = {}
            try:
                manager.network_create()
                manager.start("miners")
                manager.start("clients")
                manager.network_connect()
                for client in config.clients:
                    wrappers[client.name] = NodeWrapper(
                        manager.node_dir(client.name), poll_period=0.1
                    ).attach()
                report = run_day(wrappers, config, seed=31337, intervals=24)
            finally:
                for wrapper in wrappers.values():
                    wrapper.close()
                cleanup = NetworkManager(config, tmp_path / f"ws-day{attempt}", force=True)
                try:
                    cleanup.network_stop()
                except Exception:
                    pass
                cleanup.network_delete()
            assert all(o["status"] == "ok" for o in report["outcomes"])
            views.append(stable_report_view(report))

        assert views[0] == views[1], "same seed must reproduce the day report up to timestamps"
