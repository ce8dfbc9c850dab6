"""Federation drivers.

The simulated driver executes all nodes in one process in lockstep round
phases over virtual time: begin (drain control traffic), train-and-send,
two receive passes (the second collects replies), finish (aggregate,
evaluate, report), end (rotate). A barrier after every round advances all
clocks past the longest in-flight delivery, so causality never depends on
host scheduling and a fixed seed reproduces the run exactly.

The TCP driver runs the controller in-process on a real socket and spawns
one OS process per node (``dflshield node ...``); nodes pace themselves on
wall time and the controller supervises completion.
"""

from __future__ import annotations

import subprocess
import sys
import socket
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import protocol
from .adversary import (
    AttackOutcome,
    AttackPlan,
    CaptureLog,
    EavesdropTap,
    EclipseAttack,
    run_eavesdrop,
    run_network_map,
    topology_recall,
)
from .controller import ControllerCore, DeployAborted, aggregate_run
from .crypto import load_public_pem
from .data import Dataset, load_dataset_csv, load_digits_small, make_blobs
from .fabric import FabricConfig, PeerAddress, SimulatedNetwork, StatsBook, TcpEndpoint, VirtualClock
from .model import ModelArchitecture, ModelParams, init_params
from .mtd import AddressPools
from .node import Node, NodeConfig, WallClock
from .scenario import ScenarioConfig, SecuritySetting, TrainSpec

CONTROLLER_SIM_ADDR = PeerAddress("10.255.0.1", 9000)
_NODE_PORT_BASE = 9100
_ROTATION_PORT_BASE = 20000


@dataclass
class RunResult:
    scenario: ScenarioConfig
    rows: list[dict]
    aggregates: dict
    events_by_node: dict[int, dict[str, int]]
    warnings: list[str]
    elapsed_s: float
    aborted: bool = False
    abort_reason: str = ""
    attack_outcome: AttackOutcome | None = None
    attack_extra: dict = field(default_factory=dict)
    capture: CaptureLog | None = None
    event_log: list[dict] = field(default_factory=list)
    stats: StatsBook | None = None
    controller: ControllerCore | None = None
    nodes: list[Node] = field(default_factory=list)

    def total_event(self, name: str) -> int:
        return sum(ev.get(name, 0) for ev in self.events_by_node.values())

    def final_f1_mean(self) -> float:
        if not self.rows:
            return 0.0
        last = max(r["round"] for r in self.rows)
        vals = [r["f1"] for r in self.rows if r["round"] == last]
        return sum(vals) / len(vals)

    def total_bytes(self) -> int:
        return sum(r["bytes_sent"] for r in self.rows)

    def control_overhead_pct(self) -> float:
        sent = sum(r["bytes_sent"] for r in self.rows)
        ctrl = sum(r["ctrl_overhead_pct"] / 100.0 * r["bytes_sent"] for r in self.rows)
        return 100.0 * ctrl / sent if sent else 0.0


class FederationHandle:
    """Deploy handle: ``wait()`` runs to completion, ``ledger`` exposes results."""

    def __init__(self, scenario: ScenarioConfig, denied_credentials: frozenset[str] = frozenset()):
        scenario.validate()
        self.scenario = scenario
        self._denied = denied_credentials
        self._result: RunResult | None = None

    def wait(self) -> RunResult:
        if self._result is None:
            if self.scenario.fabric.backend == "sim":
                self._result = run_simulated(self.scenario, denied_credentials=self._denied)
            else:
                raise RuntimeError("TCP runs go through the harness (run_tcp), which owns the process lifecycle")
        return self._result

    @property
    def ledger(self):
        return self.wait().controller.ledger


# ---------------------------------------------------------------------------
# shared materialization


def build_dataset(train: TrainSpec, seed: int) -> Dataset:
    if train.dataset == "blobs":
        ds = make_blobs(train.samples, train.classes, train.features, seed=seed, spread=train.spread)
    elif train.dataset == "digits":
        ds = load_digits_small()
    else:
        ds = load_dataset_csv(train.dataset)
    ds.split_ratio = train.split_ratio
    return ds


def architecture_for(train: TrainSpec, dataset: Dataset) -> ModelArchitecture:
    return ModelArchitecture((dataset.num_features, *train.hidden, dataset.num_classes), train.activation)


def node_materials(scenario: ScenarioConfig, node_id: int) -> tuple[Dataset, ModelParams]:
    """Deterministic shard and initial parameters for one node."""
    dataset = build_dataset(scenario.train, scenario.seed)
    arch = architecture_for(scenario.train, dataset)
    shard = dataset.shard(node_id, scenario.nodes, scenario.seed)
    params = init_params(arch, np.random.default_rng((scenario.seed, node_id, 1)))
    return shard, params


def _node_config(
    scenario: ScenarioConfig,
    node_id: int,
    controller_addr: PeerAddress,
    rotation_pools: AddressPools | None,
) -> NodeConfig:
    return NodeConfig(
        node_id=node_id,
        role=scenario.role_of(node_id),
        security=scenario.security,
        train=scenario.train.train_config(scenario.rounds),
        controller_addr=controller_addr,
        credential=protocol.derive_credential(scenario.name, scenario.seed, node_id),
        receive_timeout_ms=scenario.receive_timeout_ms,
        sim_latency_ms=scenario.fabric.sim_latency_ms,
        sim_jitter_ms=scenario.fabric.sim_jitter_ms,
        key_renewal_interval=scenario.key_renewal_interval,
        mtd_sample_size=scenario.mtd_sample_size,
        mtd_rotation_interval=scenario.mtd_rotation_interval,
        rotation_pools=rotation_pools,
        # Twice the mean latency, but never below the channel's truncation
        # bound, or a notice straggler could outlive the old binding.
        grace_ms=max(
            2.0 * scenario.fabric.sim_latency_ms,
            scenario.fabric.sim_latency_ms + 8.0 * scenario.fabric.sim_jitter_ms + 2.0,
        ),
        rng_seed=scenario.seed,
    )


def _split_seed(scenario: ScenarioConfig, node_id: int) -> int:
    return scenario.seed * 100003 + node_id


# ---------------------------------------------------------------------------
# simulated driver


def run_simulated(
    scenario: ScenarioConfig,
    denied_credentials: frozenset[str] = frozenset(),
) -> RunResult:
    scenario.validate()
    t0 = time.monotonic()
    fabric_cfg = replace(scenario.fabric, backend="sim", seed=scenario.seed)
    net = SimulatedNetwork(fabric_cfg)
    barrier_margin = fabric_cfg.sim_latency_ms + 8.0 * fabric_cfg.sim_jitter_ms + 1.0

    controller_clock = VirtualClock()
    controller = ControllerCore(scenario, controller_clock, denied_credentials=denied_credentials)
    controller.endpoint = net.bind(CONTROLLER_SIM_ADDR, protocol.CONTROLLER_ID, controller_clock)

    dataset = build_dataset(scenario.train, scenario.seed)
    arch = architecture_for(scenario.train, dataset)

    nodes: list[Node] = []
    for i in range(scenario.nodes):
        clock = VirtualClock()
        addr = PeerAddress(f"10.{1 + i // 250}.{(i % 250) + 1}.1", _NODE_PORT_BASE + i)
        endpoint = net.bind(addr, i, clock)
        pools = AddressPools(
            ips=(addr.ip,),
            ports=tuple(
                range(
                    _ROTATION_PORT_BASE + i * scenario.mtd_ports_per_node,
                    _ROTATION_PORT_BASE + (i + 1) * scenario.mtd_ports_per_node,
                )
            ),
        )
        shard = dataset.shard(i, scenario.nodes, scenario.seed)
        params = init_params(arch, np.random.default_rng((scenario.seed, i, 1)))
        node = Node(
            cfg=_node_config(scenario, i, CONTROLLER_SIM_ADDR, pools),
            endpoint=endpoint,
            clock=clock,
            stats=net.stats,
            dataset=shard,
            init_params=params,
            controller_public=controller.keypair.public_key,
            split_seed=_split_seed(scenario, i),
        )
        nodes.append(node)

    plan: AttackPlan | None = None
    tap: EavesdropTap | None = None
    eclipse: EclipseAttack | None = None
    if scenario.attack is not None:
        start, end = scenario.attack.window(scenario.rounds)
        plan = AttackPlan(
            kind=scenario.attack.kind,
            attacker_ids=tuple(protocol.ATTACKER_ID_BASE + k for k in range(scenario.attack.attackers)),
            target_id=scenario.attack.target,
            start_round=start,
            end_round=end,
        )
        if plan.kind in ("eavesdrop", "network_map"):
            tap = run_eavesdrop(plan, net)
        elif plan.kind == "eclipse":
            att_clock = VirtualClock()
            att_ep = net.bind(PeerAddress("10.250.0.1", 9500), plan.attacker_ids[0], att_clock)
            eclipse = EclipseAttack(
                plan=plan,
                net=net,
                security=scenario.security,
                target_addr=nodes[plan.target_id].endpoint.address,
                controller_addr=CONTROLLER_SIM_ADDR,
                attacker_endpoint=att_ep,
                clock=att_clock,
                seed=scenario.seed,
            )

    def pump_controller() -> None:
        for d in controller.endpoint.poll(float("inf")):
            controller.handle_delivery(d)

    def drain(node: Node) -> None:
        for d in node.endpoint.poll(float("inf")):
            node.handle_delivery(d)

    def all_clocks() -> list:
        clocks = [n.clock for n in nodes] + [controller_clock]
        if eclipse is not None:
            clocks.append(eclipse.clock)
        return clocks

    def barrier() -> None:
        top = max(c.now() for c in all_clocks()) + barrier_margin
        for c in all_clocks():
            c.set_at_least(top)

    # --- join: authenticate every node, then hand out start bundles. One
    # retry covers a lost request or response before a node is written off.
    for attempt in (0, 1):
        for node in nodes:
            if node.token is None and not node.events.get("auth_denied"):
                node.request_auth()
        barrier()
        pump_controller()
        barrier()
        for node in nodes:
            drain(node)
        if all(n.token is not None for n in nodes):
            break

    live = [n for n in nodes if n.token is not None]
    for node in nodes:
        if node.token is None:
            node.endpoint.close()
    if len(live) < 2:
        return RunResult(
            scenario=scenario,
            rows=[],
            aggregates={},
            events_by_node={},
            warnings=list(controller.warnings),
            elapsed_s=time.monotonic() - t0,
            aborted=True,
            abort_reason=f"only {len(live)} nodes authenticated",
            controller=controller,
            event_log=net.event_log,
            stats=net.stats,
        )

    controller.start_all()
    barrier()
    for node in live:
        drain(node)
    barrier()
    stragglers = [n for n in live if not n.started]
    for node in stragglers:
        controller.warnings.append(f"node {node.node_id} never received its start bundle")
        node.endpoint.close()
    live = [n for n in live if n.started]
    if len(live) < 2:
        return RunResult(
            scenario=scenario,
            rows=[],
            aggregates={},
            events_by_node={},
            warnings=list(controller.warnings),
            elapsed_s=time.monotonic() - t0,
            aborted=True,
            abort_reason=f"only {len(live)} nodes received start bundles",
            controller=controller,
            event_log=net.event_log,
            stats=net.stats,
        )

    target_node = nodes[plan.target_id] if plan is not None and plan.kind == "eclipse" else None
    if target_node is not None and target_node not in live:
        target_node = None  # target never joined; nothing to isolate

    for r in range(scenario.rounds):
        if eclipse is not None and target_node is not None:
            eclipse.on_round_start(r, target_node.endpoint.address)
        for node in live:
            node.begin_round(r)
        pump_controller()
        for node in live:
            node.train_and_send(r)
        if eclipse is not None:
            eclipse.pump()
        for node in live:
            node.receive_pass()
        if eclipse is not None:
            eclipse.pump()
        for node in live:
            node.receive_pass()
        for node in live:
            node.finish_round(r)
        pump_controller()
        # Rotations happen at one shared instant: without this barrier,
        # fan-out differences skew per-node deadlines enough that a peer's
        # rendezvous notice can chase an already-expired grace window.
        barrier()
        for node in live:
            node.end_round(r)
        if eclipse is not None and target_node is not None:
            eclipse.on_round_end(r, target_node.records[-1].params_received)
        if scenario.pubkey_renewal_interval and (r + 1) % scenario.pubkey_renewal_interval == 0 and r + 1 < scenario.rounds:
            controller.request_rekey()
            barrier()
            for node in live:
                drain(node)
            barrier()
            pump_controller()
            barrier()
            for node in live:
                drain(node)
        barrier()

    for node in live:
        node.send_done()
    barrier()
    pump_controller()

    attack_outcome = None
    attack_extra: dict = {}
    capture = None
    if eclipse is not None:
        attack_outcome = eclipse.finalize()
        capture = eclipse.capture
        mapped = run_network_map(plan, eclipse.capture)
        attack_outcome.topology_recall = topology_recall(mapped.edges, controller.topology.edges)
    elif tap is not None:
        capture = tap.capture
        mapped = run_network_map(plan, tap.capture)
        recall = topology_recall(mapped.edges, controller.topology.edges)
        attack_extra = {"topology_recall": recall, "roles": mapped.roles, "frequency_sum": sum(mapped.frequency.values())}
        recovered = len(tap.capture.recovered_params)
        attack_outcome = AttackOutcome(
            kind=plan.kind,
            target_id=plan.target_id,
            window_rounds=plan.window_rounds,
            plaintext_param_sets_recovered=recovered,
            topology_recall=recall,
            success=(recovered >= 1) if plan.kind == "eavesdrop" else recall >= 0.9,
        )

    rows = controller.ledger.rows()
    return RunResult(
        scenario=scenario,
        rows=rows,
        aggregates=aggregate_run(rows),
        events_by_node=dict(controller.ledger.events_by_node),
        warnings=list(controller.warnings),
        elapsed_s=time.monotonic() - t0,
        attack_outcome=attack_outcome,
        attack_extra=attack_extra,
        capture=capture,
        event_log=net.event_log,
        stats=net.stats,
        controller=controller,
        nodes=nodes,
    )


# ---------------------------------------------------------------------------
# TCP driver


def free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_node_tcp(
    scenario: ScenarioConfig,
    node_id: int,
    listen: PeerAddress,
    controller_addr: PeerAddress,
    controller_public_pem: bytes,
    rotation_base: int,
) -> int:
    """Run one participant over real sockets; returns a process exit code."""
    import psutil

    clock = WallClock()
    stats = StatsBook()
    fabric_cfg = replace(scenario.fabric, backend="tcp", seed=scenario.seed)
    endpoint = TcpEndpoint(listen, node_id, fabric_cfg, stats)
    shard, params = node_materials(scenario, node_id)
    pools = AddressPools(
        ips=("127.0.0.1",),
        ports=tuple(
            range(
                rotation_base + node_id * scenario.mtd_ports_per_node,
                rotation_base + (node_id + 1) * scenario.mtd_ports_per_node,
            )
        ),
    )
    cfg = _node_config(scenario, node_id, controller_addr, pools)
    if cfg.receive_timeout_ms == 0:
        cfg.receive_timeout_ms = 300.0
    cfg.grace_ms = 2000.0
    node = Node(
        cfg=cfg,
        endpoint=endpoint,
        clock=clock,
        stats=stats,
        dataset=shard,
        init_params=params,
        controller_public=load_public_pem(controller_public_pem),
        split_seed=_split_seed(scenario, node_id),
    )
    try:
        node.authenticate_blocking()
        node.wait_for_start()
        proc = psutil.Process()
        proc.cpu_percent(None)  # prime the counter
        for r in range(scenario.rounds):
            node.run_round(r)
            node.set_resources(r, proc.cpu_percent(None), psutil.virtual_memory().percent)
        node.send_done()
        time.sleep(0.2)  # let the last frame flush before teardown
        return 0
    finally:
        endpoint.close()


def run_tcp(
    scenario: ScenarioConfig,
    config_path: Path,
    out_dir: Path,
    budget_s: float = 300.0,
    denied_credentials: frozenset[str] = frozenset(),
) -> RunResult:
    """Supervise a TCP deployment: controller in-process, one process per node."""
    t0 = time.monotonic()
    out_dir.mkdir(parents=True, exist_ok=True)
    clock = WallClock()
    controller = ControllerCore(scenario, clock, denied_credentials=denied_credentials)
    fabric_cfg = replace(scenario.fabric, backend="tcp", seed=scenario.seed)
    controller_addr = PeerAddress("127.0.0.1", free_port())
    stats = StatsBook()
    controller.endpoint = TcpEndpoint(controller_addr, protocol.CONTROLLER_ID, fabric_cfg, stats)
    key_path = out_dir / "controller_key.pem"
    key_path.write_bytes(controller.keypair.public_pem())

    ports = [free_port() for _ in range(scenario.nodes)]
    rotation_base = 21000 + (free_port() % 200) * 64
    procs: list[subprocess.Popen] = []
    logs = []
    for i in range(scenario.nodes):
        log = open(out_dir / f"node_{i}.log", "w")
        logs.append(log)
        procs.append(
            subprocess.Popen(
                [
                    sys.executable,
                    "-m",
                    "dflshield",
                    "node",
                    "--config",
                    str(config_path),
                    "--node-id",
                    str(i),
                    "--listen",
                    f"127.0.0.1:{ports[i]}",
                    "--controller",
                    str(controller_addr),
                    "--controller-key",
                    str(key_path),
                    "--rotation-base",
                    str(rotation_base),
                ],
                stdout=log,
                stderr=subprocess.STDOUT,
            )
        )

    started = False
    deadline = time.monotonic() + budget_s
    auth_grace_end = time.monotonic() + 20.0
    try:
        while time.monotonic() < deadline:
            d = controller.endpoint.recv_frame(100.0)
            if d is not None:
                controller.handle_delivery(d)
            authed = controller.registry.authenticated_nodes()
            if not started and (len(authed) == scenario.nodes or (time.monotonic() > auth_grace_end and len(authed) >= 2)):
                controller.start_all()
                started = True
            if started and controller.done_nodes >= set(authed):
                break
            if not started and time.monotonic() > auth_grace_end and len(authed) < 2:
                rows = controller.ledger.rows()
                return RunResult(
                    scenario=scenario,
                    rows=rows,
                    aggregates={},
                    events_by_node={},
                    warnings=list(controller.warnings),
                    elapsed_s=time.monotonic() - t0,
                    aborted=True,
                    abort_reason=f"only {len(authed)} nodes authenticated",
                    controller=controller,
                    stats=stats,
                )
    finally:
        for p in procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.terminate()
        for log in logs:
            log.close()
        controller.endpoint.close()

    rows = controller.ledger.rows()
    completed = started and controller.done_nodes >= set(controller.registry.authenticated_nodes())
    return RunResult(
        scenario=scenario,
        rows=rows,
        aggregates=aggregate_run(rows),
        events_by_node=dict(controller.ledger.events_by_node),
        warnings=list(controller.warnings),
        elapsed_s=time.monotonic() - t0,
        aborted=not completed,
        abort_reason="" if completed else "run did not complete within budget",
        controller=controller,
        stats=stats,
    )
