"""Trusted coordination service: auth, key distribution, topology, metrics sink.

The controller validates each joining node's credential, issues its token,
registers its public key (endorsed with a signed key record), generates
the seeded topology, and hands every participant a start bundle naming
its neighbors, the address book, and the peer keys. During the run it
collects per-round metrics reports into an append-only ledger. It is
trusted and out of band for the attacks: adversaries work on participant
links only.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field

from . import crypto, protocol
from .fabric import Delivery, Frame, FrameKind, PeerAddress, RoutingError
from .scenario import Role, ScenarioConfig, SecuritySetting


class ControllerError(Exception):
    pass


class DeployAborted(ControllerError):
    """Fewer than two nodes survived authentication."""


@dataclass(frozen=True)
class TopologyGraph:
    """Undirected, connected participant graph."""

    vertices: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    generator: str

    @classmethod
    def generate(cls, kind: str, n: int, p: float, seed: int) -> "TopologyGraph":
        rng = random.Random(seed)
        vertices = tuple(range(n))
        edges: set[tuple[int, int]] = set()
        if kind == "full":
            edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
        elif kind == "ring":
            edges = {(i, (i + 1) % n) if i < (i + 1) % n else ((i + 1) % n, i) for i in range(n)}
        elif kind == "random":
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < p:
                        edges.add((i, j))
        else:
            raise ControllerError(f"unknown topology generator {kind!r}")
        graph = cls(vertices, frozenset(edges), generator=kind)
        return graph._bridged() if not graph.is_connected() else graph

    def _bridged(self) -> "TopologyGraph":
        """Deterministically join components by linking their smallest members."""
        comps = self._components()
        extra = set(self.edges)
        reps = sorted(min(c) for c in comps)
        for a, b in zip(reps, reps[1:]):
            extra.add((min(a, b), max(a, b)))
        return TopologyGraph(self.vertices, frozenset(extra), self.generator)

    def _components(self) -> list[set[int]]:
        remaining = set(self.vertices)
        comps = []
        adj = {v: set(self.neighbors(v)) for v in self.vertices}
        while remaining:
            start = min(remaining)
            seen = {start}
            frontier = [start]
            while frontier:
                v = frontier.pop()
                for w in adj[v]:
                    if w not in seen:
                        seen.add(w)
                        frontier.append(w)
            comps.append(seen)
            remaining -= seen
        return comps

    def is_connected(self) -> bool:
        return len(self._components()) == 1

    def neighbors(self, v: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == v:
                out.append(b)
            elif b == v:
                out.append(a)
        return sorted(out)

    def mean_degree(self) -> float:
        return 2 * len(self.edges) / len(self.vertices) if self.vertices else 0.0


@dataclass
class RegistryRecord:
    node_id: int
    role: Role
    address: PeerAddress | None = None
    public_pem: bytes | None = None
    key_cert: str = ""
    authenticated: bool = False
    token_windows: list[tuple[float, float]] = field(default_factory=list)


class Registry:
    def __init__(self):
        self._records: dict[int, RegistryRecord] = {}

    def ensure(self, node_id: int, role: Role) -> RegistryRecord:
        if node_id not in self._records:
            self._records[node_id] = RegistryRecord(node_id=node_id, role=role)
        return self._records[node_id]

    def get(self, node_id: int) -> RegistryRecord | None:
        return self._records.get(node_id)

    def authenticated_nodes(self) -> list[int]:
        return sorted(nid for nid, r in self._records.items() if r.authenticated)

    def __len__(self) -> int:
        return len(self._records)


class RunLedger:
    """Append-only store of per-(node, round) results; first write wins."""

    def __init__(self):
        self._rows: dict[tuple[int, int], dict] = {}
        self.attack_rows: list[dict] = []
        self.events_by_node: dict[int, dict[str, int]] = {}

    def add_report(self, msg: dict) -> None:
        key = (int(msg["node_id"]), int(msg["round"]))
        if key in self._rows:
            return
        self._rows[key] = {
            "node": key[0],
            "round": key[1],
            "f1": float(msg["f1"]),
            "loss": float(msg["loss"]),
            "bytes_sent": int(msg["bytes_sent"]),
            "bytes_recv": int(msg["bytes_recv"]),
            "active_ms": float(msg["active_ms"]),
            "cpu_pct": 0.0,
            "ram_pct": 0.0,
            "net_bytes": int(msg["bytes_sent"]) + int(msg["bytes_recv"]),
            "throughput_mbps": 0.0,
            "latency_ms": 0.0,
            "loss_pct": 0.0,
            "ctrl_overhead_pct": 0.0,
        }

    def attach_done(self, node_id: int, records: list[dict], events: dict[str, int]) -> None:
        self.events_by_node[node_id] = dict(events)
        for rec in records:
            key = (node_id, int(rec["round"]))
            row = self._rows.get(key)
            if row is None:
                continue
            for col in ("net_bytes", "throughput_mbps", "latency_ms", "loss_pct", "ctrl_overhead_pct"):
                if col in rec:
                    row[col] = rec[col]
            for col in ("cpu_pct", "ram_pct"):
                if col in rec:
                    row[col] = rec[col]

    def rows(self) -> list[dict]:
        return [self._rows[k] for k in sorted(self._rows, key=lambda k: (k[1], k[0]))]

    def rounds_of(self, node_id: int) -> set[int]:
        return {r for (n, r) in self._rows if n == node_id}

    def __len__(self) -> int:
        return len(self._rows)


class ControllerCore:
    """Backend-agnostic controller logic driven by frame deliveries."""

    def __init__(
        self,
        scenario: ScenarioConfig,
        clock,
        keypair: crypto.KeyPair | None = None,
        denied_credentials: frozenset[str] = frozenset(),
    ):
        self.scenario = scenario
        self.clock = clock
        self.keypair = keypair if keypair is not None else crypto.generate_keypair()
        self.session = crypto.new_session_key()
        self.replay = crypto.ReplayCache()
        self.registry = Registry()
        self.ledger = RunLedger()
        self.topology = TopologyGraph.generate(
            scenario.topology, scenario.nodes, scenario.topology_p, scenario.seed
        )
        self.denied = denied_credentials
        self.done_nodes: set[int] = set()
        self.bundle_epoch = 1
        self.warnings: list[str] = []
        self.endpoint = None
        self._expected = {
            nid: protocol.derive_credential(scenario.name, scenario.seed, nid) for nid in range(scenario.nodes)
        }
        self._pending_rekey: set[int] = set()

    # -- timing ----------------------------------------------------------

    def round_estimate_ms(self) -> float:
        from .node import TRAIN_MS_PER_EPOCH  # local import; node depends on scenario only

        fan = max(1.0, self.topology.mean_degree())
        if self.scenario.security is SecuritySetting.ENCRYPTION_MTD:
            fan = max(1.0, fan / 2.0)
        lat = self.scenario.fabric.sim_latency_ms
        bound = lat + 8.0 * self.scenario.fabric.sim_jitter_ms
        timeout = self.scenario.receive_timeout_ms or max(5.0 * lat * fan, 2.0 * bound + 10.0)
        return TRAIN_MS_PER_EPOCH * self.scenario.train.local_epochs + timeout + 20.0

    def token_ttl_ms(self) -> float:
        return self.scenario.token_ttl_rounds * self.round_estimate_ms()

    # -- crypto plumbing ---------------------------------------------------

    @property
    def encrypted(self) -> bool:
        return self.scenario.security in (SecuritySetting.ENCRYPTION, SecuritySetting.ENCRYPTION_MTD)

    def _open(self, body: bytes) -> bytes | None:
        try:
            env = crypto.SecureEnvelope.decode(body)
            return crypto.open_envelope(env, self.keypair.private_key, self.replay)
        except crypto.CryptoError:
            self.warnings.append("undecryptable frame at controller")
            return None

    def _body_in(self, body: bytes) -> bytes | None:
        return self._open(body) if self.encrypted else body

    def _send(self, addr: PeerAddress, frame_kind: FrameKind, payload: bytes, node_id: int) -> None:
        if self.encrypted:
            rec = self.registry.get(node_id)
            if rec is None or rec.public_pem is None:
                self.warnings.append(f"no public key for node {node_id}; frame not sent")
                return
            body = crypto.seal(payload, crypto.load_public_pem(rec.public_pem), self.session, protocol.CONTROLLER_ID).encode()
        else:
            body = payload
        assert self.endpoint is not None, "controller endpoint not attached"
        try:
            self.endpoint.send_frame(addr, Frame(frame_kind, 0, body), dst_hint=node_id)
        except RoutingError:
            self.warnings.append(f"node {node_id} unreachable at {addr}")

    # -- frame dispatch ----------------------------------------------------

    def handle_delivery(self, d: Delivery) -> None:
        self.clock.set_at_least(d.recv_time)
        kind = d.frame.kind
        if kind == FrameKind.AUTH_REQUEST:
            self._on_auth_request(d)
        elif kind == FrameKind.METRICS_REPORT:
            self._on_metrics(d)
        elif kind == FrameKind.CONTROL:
            self._on_control(d)
        else:
            self.warnings.append(f"unexpected frame kind {kind.name} at controller")

    def _on_auth_request(self, d: Delivery) -> None:
        body = self._body_in(d.frame.body)
        if body is None:
            return
        try:
            msg = protocol.decode_json(body)
            node_id = int(msg["node"])
            credential = msg["credential"]
        except Exception:
            self.warnings.append("malformed auth request")
            return
        rec = self.registry.ensure(node_id, self.scenario.role_of(node_id))
        rec.address = d.src
        if self._expected.get(node_id) != credential or credential in self.denied:
            self.warnings.append(f"node {node_id} failed authentication")
            # A denied plaintext response: the requester may not share keys with us.
            assert self.endpoint is not None
            self.endpoint.send_frame(
                d.src, Frame(FrameKind.AUTH_RESPONSE, 0, protocol.auth_denied("bad-credential")), dst_hint=node_id
            )
            return
        pem_text = msg.get("public_key", "")
        if pem_text:
            rec.public_pem = pem_text.encode("ascii")
            rec.key_cert = crypto.sign_key_record(node_id, rec.public_pem, self.keypair)
        elif self.encrypted:
            self.warnings.append(f"node {node_id} quarantined: no public key under encryption")
            return
        now = self.clock.now()
        token = crypto.issue_token(node_id, rec.role.value, self.token_ttl_ms(), self.keypair, now=now)
        rec.token_windows.append((now, now + self.token_ttl_ms()))
        rec.authenticated = True
        self._send(d.src, FrameKind.AUTH_RESPONSE, protocol.auth_granted(token), node_id)

    def _on_metrics(self, d: Delivery) -> None:
        body = self._body_in(d.frame.body)
        if body is None:
            return
        try:
            msg = protocol.decode_json(body)
            self.ledger.add_report(msg)
        except Exception:
            self.warnings.append("malformed metrics report")

    def _on_control(self, d: Delivery) -> None:
        body = self._body_in(d.frame.body)
        if body is None:
            return
        try:
            msg = protocol.decode_json(body)
        except Exception:
            self.warnings.append("malformed control frame")
            return
        mtype = msg.get("type")
        if mtype == "done":
            node_id = int(msg["node"])
            self.ledger.attach_done(node_id, msg["records"], msg["events"])
            self.done_nodes.add(node_id)
        elif mtype == "pubkey":
            node_id = int(msg["node"])
            rec = self.registry.get(node_id)
            if rec is not None:
                rec.public_pem = msg["public_key"].encode("ascii")
                rec.key_cert = crypto.sign_key_record(node_id, rec.public_pem, self.keypair)
                self._pending_rekey.discard(node_id)
                if not self._pending_rekey:
                    self.broadcast_bundles()
        else:
            self.warnings.append(f"unexpected control type {mtype!r}")

    # -- deployment --------------------------------------------------------

    def key_bundle_for(self, node_id: int) -> tuple[dict[int, str], dict[int, str]]:
        """Peer public keys and their signed records, excluding the node itself."""
        keys: dict[int, str] = {}
        certs: dict[int, str] = {}
        for nid in self.registry.authenticated_nodes():
            rec = self.registry.get(nid)
            if nid == node_id or rec is None or rec.public_pem is None:
                continue
            keys[nid] = rec.public_pem.decode("ascii")
            certs[nid] = rec.key_cert
        return keys, certs

    def start_all(self) -> None:
        """Send every authenticated node its start bundle."""
        live = self.registry.authenticated_nodes()
        if len(live) < 2:
            raise DeployAborted(f"only {len(live)} nodes authenticated")
        addresses = {nid: str(self.registry.get(nid).address) for nid in live}
        for nid in live:
            rec = self.registry.get(nid)
            keys, certs = self.key_bundle_for(nid) if self.encrypted else ({}, {})
            neighbors = [v for v in self.topology.neighbors(nid) if v in set(live)]
            payload = protocol.start_bundle(
                node_id=nid,
                role=rec.role.value,
                neighbors=neighbors,
                addresses={k: v for k, v in addresses.items() if k != nid},
                peer_keys=keys,
                key_certs=certs,
                controller_key=self.keypair.public_pem().decode("ascii"),
                bundle_epoch=self.bundle_epoch,
            )
            self._send(rec.address, FrameKind.CONTROL, payload, nid)

    def request_rekey(self) -> None:
        """Push a public-key renewal: every node generates a fresh pair and reports it."""
        self.bundle_epoch += 1
        self._pending_rekey = set(self.registry.authenticated_nodes())
        for nid in self.registry.authenticated_nodes():
            rec = self.registry.get(nid)
            self._send(rec.address, FrameKind.CONTROL, protocol.rekey_request(self.bundle_epoch), nid)

    def broadcast_bundles(self) -> None:
        for nid in self.registry.authenticated_nodes():
            rec = self.registry.get(nid)
            keys, certs = self.key_bundle_for(nid)
            self._send(rec.address, FrameKind.CONTROL, protocol.bundle_update(keys, certs, self.bundle_epoch), nid)

    def token_valid_at(self, node_id: int, t: float) -> bool:
        rec = self.registry.get(node_id)
        if rec is None:
            return False
        return any(start <= t < end for start, end in rec.token_windows)


def aggregate_run(rows: list[dict]) -> dict:
    """Consolidated per-run aggregates in the results-table schema."""
    if not rows:
        return {"nodes": 0, "rounds": 0}
    last_round = max(r["round"] for r in rows)
    final = [r for r in rows if r["round"] == last_round]
    f1s = [r["f1"] for r in final]
    return {
        "nodes": len({r["node"] for r in rows}),
        "rounds": last_round + 1,
        "f1_mean": statistics.fmean(f1s),
        "f1_sd": statistics.pstdev(f1s) if len(f1s) > 1 else 0.0,
        "cpu_pct_mean": statistics.fmean(r["cpu_pct"] for r in rows),
        "ram_pct_mean": statistics.fmean(r["ram_pct"] for r in rows),
        "network_mb": sum(r["bytes_sent"] for r in rows) / 1e6,
        "throughput_mbps_mean": statistics.fmean(r["throughput_mbps"] for r in rows),
        "latency_ms_mean": statistics.fmean(r["latency_ms"] for r in rows),
        "loss_pct_mean": statistics.fmean(r["loss_pct"] for r in rows),
        "ctrl_overhead_pct": (
            100.0
            * sum(r.get("ctrl_overhead_pct", 0.0) / 100.0 * r["bytes_sent"] for r in rows)
            / max(1, sum(r["bytes_sent"] for r in rows))
        ),
    }


def deploy(scenario: ScenarioConfig, denied_credentials: frozenset[str] = frozenset()):
    """Deploy a scenario and return the running federation handle.

    The handle exposes ``wait()`` for completion and ``ledger`` access.
    Simulation runs execute synchronously inside ``wait()``.
    """
    from .runner import FederationHandle  # runtime wiring lives with the runners

    return FederationHandle(scenario, denied_credentials=denied_credentials)
