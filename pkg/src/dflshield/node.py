"""The federated participant cycle.

Each round a node trains locally, picks its exchange partners (every
neighbor, or a fresh random subset under MTD), ships its parameters to
them (plaintext in the baseline, sealed envelopes otherwise), listens
until the receive deadline, aggregates whatever arrived by federated
averaging, evaluates, reports metrics to the controller, and finally
rotates its listening address when MTD is active.

A node that receives parameters from a peer it did not select replies
with its own parameters for the round, so both sides of every sampled
link end up with each other's update; without this, random sampling would
regularly leave nodes with nothing to aggregate.

The same Node object runs under two drivers: the deterministic simulation
calls the phase methods in lockstep across all nodes, while the TCP
driver calls :meth:`run_round` on a thread per node and real time does
the pacing.
"""

from __future__ import annotations

import random
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import crypto, protocol
from .data import Dataset
from .fabric import (
    AddressInUseError,
    Delivery,
    Frame,
    FrameKind,
    PeerAddress,
    RoutingError,
)
from .fabric.stats import StatsBook
from .model import EvalReport, ModelParams, TrainConfig, aggregate_fedavg, evaluate, train_local
from .protocol import decode_model_payload, encode_model_payload
from .mtd import (
    AddressBook,
    AddressPools,
    EmptyPoolError,
    NeighborPool,
    RendezvousNotice,
    default_sample_size,
    mtd_rotate_address,
    mtd_select_neighbors,
)
from .scenario import Role, SecuritySetting

# Virtual per-operation costs (ms) charged on the simulated clock only.
TRAIN_MS_PER_EPOCH = 20.0
PROC_MS = 0.1
SEND_MS = 0.05
AGG_MS = 2.0
EVAL_MS = 2.0
ROTATE_MS = 1.0


class NodeError(Exception):
    pass


class AuthFailure(NodeError):
    """Terminal authentication failure; the node cannot join."""


class WallClock:
    """Real-time clock with the VirtualClock interface; charging is a no-op."""

    def now(self) -> float:
        return time.monotonic() * 1000.0

    def charge(self, ms: float) -> float:
        return self.now()

    def set_at_least(self, t: float) -> None:
        pass


def merge_intervals(intervals: list[tuple[float, float]]) -> tuple[tuple[float, float], ...]:
    if not intervals:
        return ()
    merged: list[list[float]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return tuple((s, e) for s, e in merged)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    neighbors_used: tuple[int, ...]
    params_sent: int
    params_received: int
    eval: EvalReport | None
    wall_time_ms: float
    active_intervals: tuple[tuple[float, float], ...]

    def active_ms(self) -> float:
        return sum(e - s for s, e in self.active_intervals)

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "neighbors_used": list(self.neighbors_used),
            "params_sent": self.params_sent,
            "params_received": self.params_received,
            "f1": self.eval.f1_macro if self.eval else None,
            "loss": self.eval.loss if self.eval else None,
            "wall_time_ms": self.wall_time_ms,
            "active_intervals": [[s, e] for s, e in self.active_intervals],
        }


def compute_activity_ratio(records: list[RoundRecord]) -> float:
    """Fraction of observed wall time spent in active intervals."""
    total = sum(r.wall_time_ms for r in records)
    if total <= 0:
        raise ValueError("total observed time must be positive")
    active = sum(r.active_ms() for r in records)
    return active / total


@dataclass
class NodeConfig:
    node_id: int
    role: Role
    security: SecuritySetting
    train: TrainConfig
    controller_addr: PeerAddress
    credential: str
    receive_timeout_ms: float = 0.0  # 0 -> auto from latency and fan-out
    sim_latency_ms: float = 5.0
    sim_jitter_ms: float = 1.0
    key_renewal_interval: int = 1
    token_refresh_fraction: float = 0.8
    mtd_sample_size: int = 0
    mtd_rotation_interval: int = 1
    rotation_pools: AddressPools | None = None
    grace_ms: float = 20.0
    rng_seed: int = 0

    @property
    def encrypted(self) -> bool:
        return self.security in (SecuritySetting.ENCRYPTION, SecuritySetting.ENCRYPTION_MTD)

    @property
    def mtd_active(self) -> bool:
        return self.security is SecuritySetting.ENCRYPTION_MTD

    def timeout_for(self, fan_out: int) -> float:
        """5x mean latency per expected partner, floored to a reply round trip."""
        if self.receive_timeout_ms > 0:
            return self.receive_timeout_ms
        bound = self.sim_latency_ms + 8.0 * self.sim_jitter_ms  # truncation cap of the channel
        return max(5.0 * self.sim_latency_ms * max(1, fan_out), 2.0 * bound + 10.0)


class Node:
    """One federation participant bound to a fabric endpoint."""

    def __init__(
        self,
        cfg: NodeConfig,
        endpoint,
        clock,
        stats: StatsBook,
        dataset: Dataset,
        init_params: ModelParams,
        controller_public,
        split_seed: int,
    ):
        self.cfg = cfg
        self.node_id = cfg.node_id
        self.endpoint = endpoint
        self.clock = clock
        self.stats = stats
        self.book = AddressBook(self_binding=endpoint.address)
        self.params = init_params
        self.train_split, self.test_split = dataset.split(split_seed)
        self.controller_public = controller_public
        self.events: Counter = Counter()
        self.records: list[RoundRecord] = []
        self.round_net: list[dict] = []

        self.keypair = crypto.generate_keypair() if cfg.encrypted else None
        self.session = crypto.new_session_key(epoch=0)
        self.replay = crypto.ReplayCache()
        self.peer_publics: dict[int, object] = {}
        self.bundle_epoch = 0
        self.token: crypto.AuthToken | None = None
        self.neighbors: list[int] = []
        self.started = False

        self._train_rng = np.random.default_rng((cfg.rng_seed, cfg.node_id))
        self._mtd_rng = random.Random((cfg.rng_seed << 16) ^ cfg.node_id)

        # Per-round scratch.
        self._r = -1
        self._received: dict[int, ModelParams] = {}
        self._sent_to: set[int] = set()
        self._selected: tuple[int, ...] = ()
        self._intervals: list[tuple[float, float]] = []
        self._round_start = 0.0
        self._deadline = 0.0
        self._active_at_report = 0.0
        self._round_eval: EvalReport | None = None
        self._forwarded: set[tuple[int, int]] = set()
        # Telemetry windows: round r spans mark r -> mark r+1, so join
        # traffic lands in round 0 and rotation/report traffic in its own
        # round. Mark 0 is the all-zero snapshot from construction time.
        self._marks: list[dict] = [self._stats_snapshot()]
        self._mark_times: list[float] = [clock.now()]
        self._resources: dict[int, tuple[float, float]] = {}

    # ------------------------------------------------------------------
    # crypto helpers

    def _seal_to(self, recipient_public, payload: bytes) -> bytes:
        env = crypto.seal(payload, recipient_public, self.session, self.node_id)
        return env.encode()

    def _open(self, body: bytes) -> bytes | None:
        """Decode+open an envelope; count and swallow failures."""
        try:
            env = crypto.SecureEnvelope.decode(body)
            assert self.keypair is not None
            return crypto.open_envelope(env, self.keypair.private_key, self.replay)
        except crypto.ReplayError:
            self.events["replay_rejected"] += 1
        except crypto.CryptoError:
            self.events["decrypt_failure"] += 1
        return None

    def _body_out(self, payload: bytes, recipient_public) -> bytes:
        return self._seal_to(recipient_public, payload) if self.cfg.encrypted else payload

    def _body_in(self, body: bytes) -> bytes | None:
        return self._open(body) if self.cfg.encrypted else body

    # ------------------------------------------------------------------
    # authentication

    def request_auth(self, renew: bool = False) -> None:
        pem = self.keypair.public_pem() if self.keypair else None
        payload = protocol.auth_request(self.node_id, self.cfg.credential, pem, renew=renew)
        body = self._body_out(payload, self.controller_public) if self.cfg.encrypted else payload
        frame = Frame(FrameKind.AUTH_REQUEST, correlation_id=0, body=body)
        self._send_raw(self.cfg.controller_addr, frame, protocol.CONTROLLER_ID)
        self.events["auth_requests"] += 1

    def authenticate_blocking(self, timeout_ms: float = 5000.0) -> crypto.AuthToken:
        """Send an auth request and wait for the verdict (TCP path)."""
        for attempt in (0, 1):
            self.request_auth()
            deadline = self.clock.now() + timeout_ms
            while self.clock.now() < deadline:
                d = self.endpoint.recv_frame(min(50.0, timeout_ms))
                if d is not None:
                    self.handle_delivery(d)
                if self.token is not None:
                    return self.token
                if self.events["auth_denied"]:
                    raise AuthFailure("credential rejected by controller")
            if attempt == 1:
                raise AuthFailure("no auth response from controller")
        raise AuthFailure("unreachable")

    def wait_for_start(self, timeout_ms: float = 10000.0) -> None:
        deadline = self.clock.now() + timeout_ms
        while not self.started and self.clock.now() < deadline:
            d = self.endpoint.recv_frame(50.0)
            if d is not None:
                self.handle_delivery(d)
        if not self.started:
            raise NodeError("start bundle never arrived")

    # ------------------------------------------------------------------
    # frame handling

    def _send_raw(self, addr: PeerAddress, frame: Frame, dst_hint: int) -> bool:
        try:
            self.endpoint.send_frame(addr, frame, dst_hint=dst_hint)
            self.clock.charge(SEND_MS)
            return True
        except RoutingError:
            self.events["routing_error"] += 1
            return False

    def _send_params_to(self, peer: int, round_index: int, addr: PeerAddress | None = None) -> None:
        payload = encode_model_payload(self.node_id, round_index, self.params)
        if self.cfg.encrypted:
            pub = self.peer_publics.get(peer)
            if pub is None:
                self.events["missing_peer_key"] += 1
                return
            body = self._seal_to(pub, payload)
        else:
            body = payload
        frame = Frame(FrameKind.MODEL_EXCHANGE, correlation_id=round_index, body=body)
        if addr is None:
            try:
                addr = self.book.lookup(peer)
            except KeyError:
                self.events["routing_error"] += 1
                return
        if self._send_raw(addr, frame, peer):
            self._sent_to.add(peer)

    def handle_delivery(self, d: Delivery) -> None:
        t = max(self.clock.now(), d.recv_time)
        self._intervals.append((t, t + PROC_MS))
        self.clock.set_at_least(t)
        self.clock.charge(PROC_MS)
        kind = d.frame.kind
        if kind == FrameKind.MODEL_EXCHANGE:
            self._on_model_exchange(d)
        elif kind == FrameKind.RENDEZVOUS_NOTICE:
            self._on_rendezvous(d)
        elif kind == FrameKind.AUTH_RESPONSE:
            self._on_auth_response(d)
        elif kind == FrameKind.CONTROL:
            self._on_control(d)
        else:
            self.events["unexpected_frame"] += 1

    def _on_model_exchange(self, d: Delivery) -> None:
        if self.cfg.role is Role.PROXY:
            self._proxy_forward(d)
            return
        if self.cfg.role is Role.IDLE:
            self.events["ignored_model_frame"] += 1
            return
        body = self._body_in(d.frame.body)
        if body is None:
            return
        try:
            sender, round_index, params = decode_model_payload(body)
        except ValueError:
            self.events["bad_payload"] += 1
            return
        if round_index != self._r:
            self.events["late_frame"] += 1
            return
        if sender == self.node_id or sender in self._received:
            self.events["duplicate_params"] += 1
            return
        self._received[sender] = params
        # Mutual exchange: answer peers that picked us but whom we did not
        # pick. The reply goes to the transport source address, which is the
        # sender's live binding even when our address book is stale.
        if sender in self.neighbors and sender not in self._sent_to:
            self._send_params_to(sender, round_index, addr=d.src)

    def _proxy_forward(self, d: Delivery) -> None:
        corr = d.frame.correlation_id
        key = (corr, hash(d.frame.body))
        if key in self._forwarded:
            return
        self._forwarded.add(key)
        for peer in self.neighbors:
            try:
                addr = self.book.lookup(peer)
            except KeyError:
                continue
            if addr == d.src:
                continue
            self._send_raw(addr, d.frame, peer)

    def _on_rendezvous(self, d: Delivery) -> None:
        body = self._open(d.frame.body) if self.cfg.encrypted else d.frame.body
        if body is None:
            return
        try:
            notice = RendezvousNotice.decode(body)
        except Exception:
            self.events["bad_payload"] += 1
            return
        if notice.node_id not in self.book.known_peers():
            self.events["unknown_peer_notice"] += 1
            return
        old_addr = self.book.lookup(notice.node_id)
        if not self.book.apply_rendezvous(notice):
            self.events["stale_notice"] += 1
            return
        self.events["rendezvous_applied"] += 1
        if hasattr(self.endpoint, "forget_peer"):
            self.endpoint.forget_peer(old_addr)
        # Re-establish the channel at the announced address.
        if notice.node_id in self.neighbors:
            pub = self.peer_publics.get(notice.node_id)
            if self.cfg.encrypted and pub is None:
                self.events["missing_peer_key"] += 1
                return
            hello = protocol.reconnect_hello(self.node_id, notice.effective_epoch)
            body_out = self._seal_to(pub, hello) if self.cfg.encrypted else hello
            frame = Frame(FrameKind.CONTROL, correlation_id=notice.effective_epoch, body=body_out)
            self._send_raw(notice.new_address, frame, notice.node_id)

    def _on_auth_response(self, d: Delivery) -> None:
        body = self._body_in(d.frame.body)
        if body is None:
            return
        try:
            msg = protocol.decode_json(body)
        except Exception:
            self.events["bad_payload"] += 1
            return
        if msg.get("type") == "auth-ok":
            try:
                self.token = crypto.verify_token(msg["token"], self.controller_public, now=self.clock.now())
                self.events["auth_granted"] += 1
            except crypto.TokenRejected:
                self.events["auth_bad_token"] += 1
        else:
            self.events["auth_denied"] += 1

    def _on_control(self, d: Delivery) -> None:
        body = self._body_in(d.frame.body)
        if body is None:
            return
        if body.startswith(protocol.RECONNECT_PREFIX):
            try:
                protocol.parse_reconnect(body)
                self.events["reconnect_received"] += 1
            except ValueError:
                self.events["bad_payload"] += 1
            return
        try:
            msg = protocol.decode_json(body)
        except Exception:
            self.events["bad_payload"] += 1
            return
        mtype = msg.get("type")
        if mtype == "start":
            self._apply_start(msg)
        elif mtype == "bundle":
            self._apply_bundle(msg)
        elif mtype == "rekey":
            self._on_rekey()
        else:
            self.events["unexpected_frame"] += 1

    def _apply_start(self, msg: dict) -> None:
        self.neighbors = sorted(int(n) for n in msg["neighbors"])
        for nid_text, addr_text in msg["addresses"].items():
            nid = int(nid_text)
            if nid != self.node_id:
                self.book.set_entry(nid, PeerAddress.parse(addr_text), epoch=0)
        if self.cfg.encrypted:
            for nid_text, pem in msg["peer_keys"].items():
                nid = int(nid_text)
                if nid == self.node_id:
                    continue
                record = msg["key_certs"].get(nid_text, "")
                try:
                    cert_node, cert_pem = crypto.verify_key_record(record, self.controller_public)
                except crypto.TokenRejected:
                    self.events["bad_key_cert"] += 1
                    continue
                if cert_node != nid or cert_pem != pem.encode("ascii"):
                    self.events["bad_key_cert"] += 1
                    continue
                self.peer_publics[nid] = crypto.load_public_pem(pem.encode("ascii"))
        self.bundle_epoch = int(msg["bundle_epoch"])
        self.started = True

    def _apply_bundle(self, msg: dict) -> None:
        if int(msg["bundle_epoch"]) <= self.bundle_epoch:
            self.events["stale_bundle"] += 1
            return
        for nid_text, pem in msg["peer_keys"].items():
            nid = int(nid_text)
            if nid != self.node_id:
                self.peer_publics[nid] = crypto.load_public_pem(pem.encode("ascii"))
        self.bundle_epoch = int(msg["bundle_epoch"])
        self.events["bundle_updated"] += 1

    def _on_rekey(self) -> None:
        if not self.cfg.encrypted:
            return
        self.keypair = crypto.generate_keypair()
        payload = protocol.pubkey_update(self.node_id, self.keypair.public_pem())
        body = self._body_out(payload, self.controller_public)
        self._send_raw(self.cfg.controller_addr, Frame(FrameKind.CONTROL, 0, body), protocol.CONTROLLER_ID)
        self.events["rekeyed"] += 1

    # ------------------------------------------------------------------
    # round phases

    def begin_round(self, round_index: int) -> None:
        self._r = round_index
        self._received.clear()
        self._sent_to.clear()
        self._selected = ()
        self._intervals = []
        self._round_start = self.clock.now()
        if round_index > 0:
            self._close_net_window()
        for d in self.endpoint.poll(self.clock.now()):
            self.handle_delivery(d)
        if self.token is not None and self.token.near_expiry(self.clock.now(), self.cfg.token_refresh_fraction):
            self.request_auth(renew=True)
            self.events["reauth_sent"] += 1

    def train_and_send(self, round_index: int) -> float:
        """Train, select partners, fan out parameters. Returns the receive deadline."""
        start = self.clock.now()
        if self.cfg.role is Role.TRAINER:
            self.params = train_local(self.params, self.train_split, self.cfg.train, self._train_rng)
            self.clock.charge(TRAIN_MS_PER_EPOCH * self.cfg.train.local_epochs)
        if self.cfg.role in (Role.TRAINER, Role.AGGREGATOR):
            if self.cfg.mtd_active and self.neighbors:
                n = self.cfg.mtd_sample_size or default_sample_size(len(self.neighbors))
                pool = NeighborPool(frozenset(self.neighbors), min(n, len(self.neighbors)))
                selected = sorted(mtd_select_neighbors(pool, self._mtd_rng))
            else:
                selected = list(self.neighbors)
            self._selected = tuple(selected)
            for peer in selected:
                self._send_params_to(peer, round_index)
        self._intervals.append((start, self.clock.now()))
        self._deadline = self.clock.now() + self.cfg.timeout_for(len(self._selected))
        return self._deadline

    def receive_pass(self, deadline: float | None = None) -> None:
        """Drain deliveries due by the deadline (simulation lockstep path)."""
        for d in self.endpoint.poll(self._deadline if deadline is None else deadline):
            self.handle_delivery(d)

    def finish_round(self, round_index: int) -> None:
        self.clock.set_at_least(self._deadline)
        work_start = self.clock.now()
        report: EvalReport | None = None
        if self.cfg.role in (Role.TRAINER, Role.AGGREGATOR):
            received = [self._received[k] for k in sorted(self._received)]
            if not received and self._selected:
                self.events["starvation"] += 1
            self.params = aggregate_fedavg(self.params, received)
            self.clock.charge(AGG_MS)
        report = evaluate(self.params, self.test_split)
        self.clock.charge(EVAL_MS)
        self._intervals.append((work_start, self.clock.now()))
        self._active_at_report = sum(e - s for s, e in merge_intervals(self._intervals))
        # Wire report carries the round's traffic so far; the window is
        # finalized (including this report and any rotation) at the next
        # round boundary and shipped with the done payload.
        net = self._net_delta(self._marks[-1], self._mark_times[-1])
        payload = protocol.metrics_report(
            self.node_id,
            round_index,
            report.f1_macro,
            report.loss,
            net["bytes_sent"],
            net["bytes_recv"],
            self._active_at_report,
        )
        body = self._body_out(payload, self.controller_public)
        self._send_raw(self.cfg.controller_addr, Frame(FrameKind.METRICS_REPORT, round_index, body), protocol.CONTROLLER_ID)
        self._round_eval = report

    def end_round(self, round_index: int) -> RoundRecord:
        """Renew the session key and rotate if due, then seal the round record."""
        if (round_index + 1) % self.cfg.key_renewal_interval == 0:
            self.session = crypto.renew_session(self.session, self.cfg.key_renewal_interval)
            self.events["session_renewed"] += 1
        if self.cfg.mtd_active and (round_index + 1) % self.cfg.mtd_rotation_interval == 0:
            self._rotate()
        record = RoundRecord(
            round_index=round_index,
            neighbors_used=self._selected,
            params_sent=len(self._sent_to),
            params_received=len(self._received),
            eval=self._round_eval,
            wall_time_ms=self.clock.now() - self._round_start,
            active_intervals=merge_intervals(self._intervals),
        )
        self.records.append(record)
        return record

    def _rotate(self) -> None:
        if self.cfg.rotation_pools is None:
            self.events["rotation_skipped"] += 1
            return
        start = self.clock.now()
        try:
            new_addr, notice, new_epoch = mtd_rotate_address(
                self.node_id, self.book, self.cfg.rotation_pools, self._mtd_rng, now_ms=start
            )
        except EmptyPoolError:
            self.events["rotation_skipped"] += 1
            return
        # Predictive notification: peers hear about the move first.
        self._broadcast_notice(notice)
        try:
            self.endpoint.rebind(new_addr, grace_ms=self.cfg.grace_ms)
        except AddressInUseError:
            self.events["rotation_conflict"] += 1
            corrective = RendezvousNotice(
                node_id=self.node_id,
                new_address=self.book.self_binding,
                effective_epoch=new_epoch + 1,
                switch_at=self.clock.now(),
            )
            self._broadcast_notice(corrective)
            self.book.self_epoch = new_epoch + 1
            return
        self.book.self_binding = new_addr
        self.book.self_epoch = new_epoch
        self.clock.charge(ROTATE_MS)
        self._intervals.append((start, self.clock.now()))
        self.events["rotations"] += 1

    def _broadcast_notice(self, notice: RendezvousNotice) -> None:
        for peer in self.neighbors:
            pub = self.peer_publics.get(peer)
            if pub is None:
                self.events["missing_peer_key"] += 1
                continue
            body = self._seal_to(pub, notice.encode())
            frame = Frame(FrameKind.RENDEZVOUS_NOTICE, notice.effective_epoch, body)
            try:
                addr = self.book.lookup(peer)
            except KeyError:
                self.events["routing_error"] += 1
                continue
            self._send_raw(addr, frame, peer)

    def set_resources(self, round_index: int, cpu_pct: float, ram_pct: float) -> None:
        self._resources[round_index] = (cpu_pct, ram_pct)

    def send_done(self) -> None:
        self._close_net_window()
        records = []
        for rec, net in zip(self.records, self.round_net):
            cpu, ram = self._resources.get(rec.round_index, (0.0, 0.0))
            records.append({**rec.to_dict(), **net, "cpu_pct": cpu, "ram_pct": ram})
        payload = protocol.done_report(self.node_id, records, dict(self.events))
        body = self._body_out(payload, self.controller_public)
        self._send_raw(self.cfg.controller_addr, Frame(FrameKind.CONTROL, 0, body), protocol.CONTROLLER_ID)

    # ------------------------------------------------------------------
    # blocking driver (TCP)

    def run_round(self, round_index: int) -> RoundRecord:
        """Full participant cycle for one round, pacing itself on real time."""
        self.begin_round(round_index)
        deadline = self.train_and_send(round_index)
        while self.clock.now() < deadline:
            d = self.endpoint.recv_frame(min(50.0, max(1.0, deadline - self.clock.now())))
            if d is not None:
                self.handle_delivery(d)
        self.finish_round(round_index)
        return self.end_round(round_index)

    # ------------------------------------------------------------------
    # telemetry

    def _stats_snapshot(self) -> dict:
        view = self.stats.node_view(self.node_id)
        return {
            "bytes_sent": view.bytes_sent,
            "bytes_received": view.bytes_received,
            "frames_sent": view.frames_sent,
            "frames_lost": view.frames_lost,
            "control_bytes": view.control_bytes,
            "lat_n": len(view.latency_samples),
            "lat_sum": sum(view.latency_samples),
        }

    def _close_net_window(self) -> None:
        """Finalize the telemetry window for the round that just ended."""
        if len(self.round_net) >= len(self.records) and self.records:
            return
        self.round_net.append(self._net_delta(self._marks[-1], self._mark_times[-1]))
        self._marks.append(self._stats_snapshot())
        self._mark_times.append(self.clock.now())

    def _net_delta(self, prev: dict, window_start: float) -> dict:
        now = self._stats_snapshot()
        sent = now["bytes_sent"] - prev["bytes_sent"]
        recv = now["bytes_received"] - prev["bytes_received"]
        frames = now["frames_sent"] - prev["frames_sent"]
        lost = now["frames_lost"] - prev["frames_lost"]
        ctrl = now["control_bytes"] - prev["control_bytes"]
        lat_n = now["lat_n"] - prev["lat_n"]
        lat_sum = now["lat_sum"] - prev["lat_sum"]
        elapsed_ms = max(1e-9, self.clock.now() - window_start)
        return {
            "bytes_sent": sent,
            "bytes_recv": recv,
            "net_bytes": sent + recv,
            "throughput_mbps": (sent + recv) * 8 / (elapsed_ms / 1000.0) / 1e6,
            "latency_ms": (lat_sum / lat_n) if lat_n else 0.0,
            "loss_pct": (100.0 * lost / frames) if frames else 0.0,
            "ctrl_overhead_pct": (100.0 * ctrl / sent) if sent else 0.0,
        }
