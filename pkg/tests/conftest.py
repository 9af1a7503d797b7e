from __future__ import annotations

import json
import random
import time

import pytest

from chainyard.dsl import GenesisParams, NetworkConfig, NodeSpec, parse_config
from chainyard.manager import NetworkManager, NodeDefaults, make_bench_config

SAMPLE_DOC = {
    "configurationName": "net",
    "configurationVersion": "1",
    "chainID": 5871,
    "difficulty": 400,
    "gasLimit": 21000,
    "balance": 1000,
    "clients": [
        {"name": "dso1", "role": "dso", "host": "10.0.0.1", "blockchainPort": 30303, "adminPort": 30403, "wrapperPort": 30503},
        {"name": "prosumer1", "role": "prosumer", "host": "10.0.0.2", "blockchainPort": 30303, "adminPort": 30403, "wrapperPort": 30503},
        {"name": "prosumer2", "role": "prosumer", "host": "10.0.0.3", "blockchainPort": 30303, "adminPort": 30403, "wrapperPort": 30503},
    ],
    "miners": [
        {"name": "miner1", "host": "10.0.0.4", "blockchainPort": 30303, "adminPort": 30403},
    ],
}


def sample_doc(**overrides) -> dict:
    doc = json.loads(json.dumps(SAMPLE_DOC))
    doc.update(overrides)
    return doc


@pytest.fixture
def sample_config() -> NetworkConfig:
    return parse_config(json.dumps(SAMPLE_DOC))


def random_valid_config(rng: random.Random, clients: int = 3, miners: int = 1) -> NetworkConfig:
    """A structurally valid config with unique names and collision-free ports."""
    hosts = [f"host{rng.randint(1, 6)}" for _ in range(clients + miners)]
    # ports below 40000 so injected collisions (40000+) never clash by accident
    ports = rng.sample(range(1024, 40000), (clients + miners) * 3)
    port_iter = iter(ports)
    client_specs = []
    for i in range(clients):
        role = "dso" if i == 0 else "prosumer"
        client_specs.append(
            NodeSpec(
                name=f"c{i}",
                role=role,
                host=hosts[i],
                blockchain_port=next(port_iter),
                admin_port=next(port_iter),
                wrapper_port=next(port_iter),
            )
        )
    miner_specs = []
    for i in range(miners):
        miner_specs.append(
            NodeSpec(
                name=f"m{i}",
                role="miner",
                host=hosts[clients + i],
                blockchain_port=next(port_iter),
                admin_port=next(port_iter),
            )
        )
    return NetworkConfig(
        configuration_name=f"rand{rng.randint(0, 10 ** 9)}",
        configuration_version="1",
        genesis=GenesisParams(
            chain_id=rng.randint(5, 100000),
            difficulty=rng.randint(1, 5000),
            gas_limit=rng.randint(21000, 100000),
            balance=rng.randint(0, 10 ** 6),
        ),
        clients=tuple(client_specs),
        miners=tuple(miner_specs),
    )


def inject_port_collisions(config: NetworkConfig, k: int, rng: random.Random) -> NetworkConfig:
    """Force exactly k PORT_CONFLICT violations between k disjoint node pairs."""
    nodes = list(config.all_nodes())
    assert 2 * k <= len(nodes), "not enough nodes for disjoint collision pairs"
    order = rng.sample(range(len(nodes)), 2 * k)
    updated = {node.name: node for node in nodes}
    for pair_index in range(k):
        a = nodes[order[2 * pair_index]]
        b = nodes[order[2 * pair_index + 1]]
        shared_host = f"clash{pair_index}"  # unique host per pair: no cross-pair conflicts
        shared_port = 40000 + pair_index
        updated[a.name] = NodeSpec(a.name, a.role, shared_host, shared_port, a.admin_port, a.wrapper_port)
        updated[b.name] = NodeSpec(b.name, b.role, shared_host, shared_port, b.admin_port, b.wrapper_port)
    clients = tuple(updated[c.name] for c in config.clients)
    miners = tuple(updated[m.name] for m in config.miners)
    return NetworkConfig(config.configuration_name, config.configuration_version, config.genesis, clients, miners)


def wait_until(condition, timeout: float = 10.0, interval: float = 0.02, message: str = "condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = condition()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out after {timeout}s waiting for {message}")


# -- live-network helpers ----------------------------------------------------


BENCH_TEMPLATE = NetworkConfig(
    configuration_name="testnet",
    configuration_version="1",
    genesis=GenesisParams(chain_id=5871, difficulty=400, gas_limit=21000, balance=100000),
    clients=(),
    miners=(),
)


@pytest.fixture
def live_network(tmp_path, request):
    """Factory: create+start+connect a local network; guaranteed teardown."""
    managers: list[NetworkManager] = []

    def launch(prosumers: int = 1, block_interval: float = 0.15, connect: bool = True, template=BENCH_TEMPLATE):
        config = make_bench_config(template, prosumers, suffix=f"live{len(managers)}")
        manager = NetworkManager(
            config,
            tmp_path / "ws",
            node_defaults=NodeDefaults(block_interval=block_interval),
        )
        managers.append(manager)
        manager.network_create()
        manager.start("miners")
        manager.start("clients")
        if connect:
            manager.network_connect()
        return manager, config

    yield launch

    for manager in managers:
        cleanup = NetworkManager(manager.config, manager.workspace, force=True, node_defaults=manager.node_defaults)
        try:
            cleanup.network_stop()
        except Exception:
            pass
        try:
            cleanup.network_delete()
        except Exception:
            pass
