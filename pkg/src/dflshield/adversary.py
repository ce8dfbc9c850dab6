"""Attack implementations: eavesdropper, network mapper, eclipse attacker.

All three work at the fabric level. The eavesdropper is a pure tap and
never perturbs traffic. The network mapper post-processes a capture into
an inferred edge set, per-pair communication frequencies, and role
guesses. The eclipse attacker is granted interception hooks on the
target's links (standing in for routing-table manipulation): it absorbs
frames addressed to the target, redirects the target's outbound traffic
to itself, tries to deserialize every captured body, and mimics the
missing peers with crafted parameter frames to keep the victim engaged.

Interception is keyed by address. When the target rotates under MTD the
attacker's knowledge goes stale: the new binding is announced only inside
sealed rendezvous notices, so from the first rotation on the target's
traffic escapes and isolation fails for those rounds.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol
from .fabric import DROP, REDIRECT, Frame, FrameKind, PeerAddress, RoutingError, SimulatedNetwork
from .fabric.sim import VirtualClock
from .mtd import NeighborPool, mtd_select_neighbors
from .crypto import SecureEnvelope
from .scenario import SecuritySetting


@dataclass(frozen=True)
class AttackPlan:
    kind: str  # "eclipse" | "eavesdrop" | "network_map"
    attacker_ids: tuple[int, ...]
    target_id: int
    start_round: int
    end_round: int

    def active(self, round_index: int) -> bool:
        return self.start_round <= round_index < self.end_round

    @property
    def window_rounds(self) -> int:
        return max(0, self.end_round - self.start_round)


@dataclass
class CaptureLog:
    """Everything an attacker observed, plus what it inferred from it."""

    frames: list[dict] = field(default_factory=list)
    recovered_params: list[tuple[int, int, object]] = field(default_factory=list)  # (src, round, params)
    inferred_topology: set[tuple[int, int]] = field(default_factory=set)
    inferred_roles: dict[int, str] = field(default_factory=dict)
    activity_map: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    def observe(self, record: dict, frame: Frame) -> None:
        self.frames.append({**record, "body": frame.body})

    def try_recover(self, src: int, body: bytes) -> bool:
        """Attempt to parse a body as a plaintext parameter payload."""
        try:
            sender, round_index, params = protocol.decode_model_payload(body)
        except ValueError:
            return False
        self.recovered_params.append((sender, round_index, params))
        return True

    def tapped_bytes(self) -> int:
        return sum(rec["size"] for rec in self.frames)

    def export_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.frames:
                row = {k: v for k, v in rec.items() if k != "body"}
                row["body_hex"] = rec["body"].hex()
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class AttackOutcome:
    kind: str
    target_id: int
    window_rounds: int
    isolated_rounds: int = 0
    control_established: bool = False
    plaintext_param_sets_recovered: int = 0
    mimic_frames_sent: int = 0
    topology_recall: float | None = None
    success: bool = False

    def csv_row(self) -> list:
        return [
            self.kind,
            self.target_id,
            self.isolated_rounds,
            self.plaintext_param_sets_recovered,
            "true" if self.success else "false",
        ]


def _is_participant(node_id: int) -> bool:
    return 0 <= node_id < protocol.ATTACKER_ID_BASE and node_id != protocol.CONTROLLER_ID


class EavesdropTap:
    """Passive capture of participant-to-participant traffic.

    ``links`` restricts the tap to specific ordered (src, dst) pairs; empty
    means every participant link. Observation only: the callback appends to
    the capture and returns, so a tapped run and an untapped run with the
    same seed produce identical frame logs.
    """

    def __init__(self, plan: AttackPlan, links: frozenset[tuple[int, int]] = frozenset()):
        self.plan = plan
        self.links = links
        self.capture = CaptureLog()
        self.active = True

    def __call__(self, record: dict, frame: Frame) -> None:
        if not self.active or record.get("event") != "frame":
            return
        src, dst = record["src"], record["dst"]
        if not (_is_participant(src) and _is_participant(dst)):
            return
        if self.links and (src, dst) not in self.links:
            return
        self.capture.observe(record, frame)
        if frame.kind == FrameKind.MODEL_EXCHANGE:
            self.capture.try_recover(src, frame.body)


def run_eavesdrop(plan: AttackPlan, net: SimulatedNetwork, links: frozenset[tuple[int, int]] = frozenset()) -> EavesdropTap:
    """Attach a passive tap; the returned handle accumulates the capture."""
    tap = EavesdropTap(plan, links)
    net.add_tap(tap)
    return tap


@dataclass
class NetworkMapResult:
    edges: frozenset[tuple[int, int]]
    frequency: dict[tuple[int, int], float]
    roles: dict[int, str]
    activity_map: dict[int, list[tuple[float, float]]]


def run_network_map(plan: AttackPlan, capture: CaptureLog) -> NetworkMapResult:
    """Infer topology, per-pair traffic shares, and roles from a capture."""
    edges: set[tuple[int, int]] = set()
    pair_counts: dict[tuple[int, int], int] = {}
    sends: dict[int, int] = {}
    recvs: dict[int, int] = {}
    fan_out: dict[int, set[int]] = {}
    fan_in: dict[int, set[int]] = {}
    bodies_seen: dict[bytes, int] = {}
    forwarders: set[int] = set()
    send_times: dict[tuple[int, int], list[float]] = {}

    for rec in capture.frames:
        src, dst = rec["src"], rec["dst"]
        pair_counts[(src, dst)] = pair_counts.get((src, dst), 0) + 1
        if rec["kind"] == FrameKind.MODEL_EXCHANGE.name:
            edges.add((min(src, dst), max(src, dst)))
            sends[src] = sends.get(src, 0) + 1
            recvs[dst] = recvs.get(dst, 0) + 1
            fan_out.setdefault(src, set()).add(dst)
            fan_in.setdefault(dst, set()).add(src)
            body = rec["body"]
            prior = bodies_seen.get(body)
            if prior is not None and prior != src:
                forwarders.add(src)  # re-sent someone else's exact payload
            else:
                bodies_seen[body] = src
        send_times.setdefault((src, rec.get("corr", 0)), []).append(rec["t"])

    nodes = set(sends) | set(recvs) | {s for s, _ in pair_counts} | {d for _, d in pair_counts}
    roles: dict[int, str] = {}
    for v in sorted(nodes):
        out_n = len(fan_out.get(v, ()))
        in_n = len(fan_in.get(v, ()))
        if v in forwarders:
            roles[v] = "proxy"
        elif out_n == 0 and in_n == 0:
            roles[v] = "idle"
        elif in_n >= 2 and in_n > 1.5 * max(1, out_n):
            roles[v] = "aggregator"
        else:
            roles[v] = "trainer"

    activity: dict[int, list[tuple[float, float]]] = {}
    for (src, _), times in sorted(send_times.items()):
        activity.setdefault(src, []).append((min(times), max(times)))

    capture.inferred_topology = edges
    capture.inferred_roles = roles
    capture.activity_map = activity
    return NetworkMapResult(
        edges=frozenset(edges),
        frequency=dict(sorted(_normalize(pair_counts).items())),
        roles=roles,
        activity_map=activity,
    )


def _normalize(counts: dict[tuple[int, int], int]) -> dict[tuple[int, int], float]:
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items() if v > 0} if total else {}


def topology_recall(inferred: frozenset[tuple[int, int]], truth: frozenset[tuple[int, int]]) -> float:
    if not truth:
        return 1.0
    return len(set(inferred) & set(truth)) / len(truth)


class EclipseAttack:
    """Interception-based isolation of one target node.

    Phases follow the standard eclipse playbook: monitor the target's
    links, absorb everything addressed to it, redirect its outbound frames
    to the attacker, deserialize whatever was captured, and answer with
    crafted parameter frames impersonating the blocked peers.
    """

    def __init__(
        self,
        plan: AttackPlan,
        net: SimulatedNetwork,
        security: SecuritySetting,
        target_addr: PeerAddress,
        controller_addr: PeerAddress,
        attacker_endpoint,
        clock: VirtualClock,
        seed: int = 0,
    ):
        self.plan = plan
        self.net = net
        self.security = security
        self.known_addrs: set[PeerAddress] = {target_addr}
        self.controller_addr = controller_addr
        self.endpoint = attacker_endpoint
        self.clock = clock
        self.capture = CaptureLog()
        self.outcome = AttackOutcome(kind="eclipse", target_id=plan.target_id, window_rounds=plan.window_rounds)
        self._rng = random.Random(seed ^ 0xEC1)
        self._round = -1
        self._escaped_this_round = False
        self._mimic_queue: list[tuple[int, int]] = []  # (blocked honest sender, round)
        self._recovered_by_round: dict[int, int] = {}
        self._last_target_payload: bytes | None = None
        net.add_interceptor(self._intercept)

    # -- fabric hook -------------------------------------------------------

    def _intercept(self, src_id: int, src_addr: PeerAddress, dst_addr: PeerAddress, frame: Frame, t: float):
        if not self.plan.active(self._round):
            return None
        if src_id in self.plan.attacker_ids:
            return None
        if dst_addr == self.controller_addr or src_addr == self.controller_addr:
            return None  # controller links are out of attack scope
        if dst_addr in self.known_addrs:
            # Inbound to the target: absorb and remember whom to impersonate.
            self.capture.observe(
                {"t": t, "event": "frame", "src": src_id, "dst": self.plan.target_id, "kind": frame.kind.name,
                 "corr": frame.correlation_id, "size": frame.wire_size, "status": "absorbed"},
                frame,
            )
            if frame.kind == FrameKind.MODEL_EXCHANGE:
                if self.capture.try_recover(src_id, frame.body):
                    self._recovered_by_round[self._round] = self._recovered_by_round.get(self._round, 0) + 1
                self._mimic_queue.append((src_id, frame.correlation_id))
            return DROP
        if src_addr in self.known_addrs:
            # Outbound from the target: seize it.
            return REDIRECT(self.endpoint.address)
        return None

    # -- driver hooks --------------------------------------------------------

    def on_round_start(self, round_index: int, target_addr: PeerAddress) -> None:
        self._round = round_index
        self._escaped_this_round = target_addr not in self.known_addrs
        self._mimic_queue.clear()

    def pump(self) -> None:
        """Process seized traffic and send the mimicry replies."""
        if not self.plan.active(self._round):
            self.endpoint.poll(float("inf"))
            return
        for d in self.endpoint.poll(float("inf")):
            self.clock.set_at_least(d.recv_time)
            rec = {
                "t": d.recv_time, "event": "frame", "src": self.plan.target_id, "dst": self.plan.attacker_ids[0],
                "kind": d.frame.kind.name, "corr": d.frame.correlation_id, "size": d.frame.wire_size,
                "status": "seized",
            }
            self.capture.observe(rec, d.frame)
            if d.frame.kind == FrameKind.MODEL_EXCHANGE:
                if self.capture.try_recover(self.plan.target_id, d.frame.body):
                    self._recovered_by_round[self._round] = self._recovered_by_round.get(self._round, 0) + 1
                    self._last_target_payload = d.frame.body
        for sender, round_index in self._mimic_queue:
            self._send_mimic(sender, round_index)
        self._mimic_queue.clear()

    def _send_mimic(self, impersonated: int, round_index: int) -> None:
        """Mimic legitimate behavior toward the target on behalf of a blocked peer."""
        if self.security is SecuritySetting.BASELINE:
            if self._last_target_payload is None:
                return
            try:
                _, _, params = protocol.decode_model_payload(self._last_target_payload)
            except ValueError:
                return
            body = protocol.encode_model_payload(impersonated, round_index, params)
        else:
            # No keys, so forge something envelope-shaped; receivers must reject it.
            body = SecureEnvelope(
                sender_id=impersonated,
                epoch=0,
                nonce=self._rng.randbytes(12),
                wrapped_key=self._rng.randbytes(256),
                ciphertext=self._rng.randbytes(64),
            ).encode()
        frame = Frame(FrameKind.MODEL_EXCHANGE, round_index, body)
        target = next(iter(self.known_addrs))
        try:
            self.endpoint.send_frame(target, frame, dst_hint=self.plan.target_id)
            self.outcome.mimic_frames_sent += 1
        except RoutingError:
            pass  # target already rotated away

    def on_round_end(self, round_index: int, target_params_received: int) -> None:
        if not self.plan.active(round_index):
            return
        # Scored against the address the target held during the round; a
        # rotation at round end affects the next round, not this one.
        isolated = not self._escaped_this_round
        if isolated:
            self.outcome.isolated_rounds += 1
            if (
                self.security is SecuritySetting.BASELINE
                and self.outcome.mimic_frames_sent > 0
                and target_params_received > 0
            ):
                # Everything honest was absorbed, so whatever the target
                # aggregated came from us.
                self.outcome.control_established = True

    def finalize(self) -> AttackOutcome:
        self.outcome.plaintext_param_sets_recovered = len(self.capture.recovered_params)
        window = max(1, self.outcome.window_rounds)
        isolated_enough = self.outcome.isolated_rounds >= 0.8 * window
        if self.security is SecuritySetting.BASELINE:
            self.outcome.success = isolated_enough and self.outcome.plaintext_param_sets_recovered >= 1
        else:
            self.outcome.success = isolated_enough
        return self.outcome

    def recovered_in_round(self, round_index: int) -> int:
        return self._recovered_by_round.get(round_index, 0)


def run_eclipse_sampling(
    pool_size: int, attacker_adjacent: int, sample_size: int, trials: int, seed: int = 0
) -> float:
    """Fast Monte Carlo of the MTD neighbor draw against attacker coverage.

    Returns the empirical fraction of rounds whose entire sample falls on
    attacker-adjacent identities. Compare with
    :func:`dflshield.mtd.eclipse_evasion_probability`.
    """
    rng = random.Random(seed)
    pool = NeighborPool(frozenset(range(pool_size)), sample_size)
    attackers = set(range(attacker_adjacent))
    hits = 0
    for _ in range(trials):
        if mtd_select_neighbors(pool, rng) <= attackers:
            hits += 1
    return hits / trials
