"""Deterministic in-process network simulation.

One :class:`SimulatedNetwork` is the shared router for a whole scenario.
All randomness (latency jitter, frame loss) comes from a single seeded
generator consumed in send order, so a fixed seed reproduces the exact
same frame log, byte counts, and delivery schedule on every run.

Time is virtual, in milliseconds. Every endpoint carries its owner's
:class:`VirtualClock`; the scenario runner advances the clocks, the router
only reads them when a frame is sent. Measurement choice: all telemetry is
per ordered link (sender, receiver), not end-to-end.

Taps observe traffic without touching it. Interceptors may drop or
redirect a frame before the loss draw and are how attacker nodes are
granted control over a victim's links.
"""

from __future__ import annotations

import heapq
import random
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .frames import (
    AddressInUseError,
    ChannelClosedError,
    Delivery,
    Frame,
    FrameKind,
    FrameTooLargeError,
    PeerAddress,
    RoutingError,
)
from .stats import StatsBook

# Interceptor verdicts: None passes the frame through.
DROP = ("drop",)


def REDIRECT(addr: PeerAddress) -> tuple:
    return ("redirect", addr)


Interceptor = Callable[[int, PeerAddress, PeerAddress, Frame, float], Optional[tuple]]
Tap = Callable[[dict, Frame], None]


class VirtualClock:
    """Per-node virtual time in milliseconds."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def advance(self, ms: float) -> float:
        self._t += ms
        return self._t

    # Alias used by the node runtime; on a wall clock charging is a no-op,
    # on the virtual clock it consumes simulated time.
    charge = advance

    def set_at_least(self, t: float) -> None:
        if t > self._t:
            self._t = t


@dataclass(frozen=True)
class FabricConfig:
    backend: str = "sim"  # "sim" | "tcp"
    sim_latency_ms: float = 5.0
    sim_jitter_ms: float = 1.0
    sim_loss_rate: float = 0.0
    max_frame: int = 1 << 20
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("sim", "tcp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.sim_loss_rate < 1.0:
            raise ValueError("sim_loss_rate must lie in [0, 1)")
        if self.max_frame < 64:
            raise ValueError("max_frame too small")


class SimulatedNetwork:
    def __init__(self, config: FabricConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.stats = StatsBook()
        self.event_log: list[dict] = []
        self._bindings: dict[PeerAddress, "SimulatedEndpoint"] = {}
        self._grace: dict[PeerAddress, tuple["SimulatedEndpoint", float]] = {}
        self._taps: list[Tap] = []
        self._interceptors: list[Interceptor] = []
        self._pair_last: dict[tuple[int, int], float] = {}
        self._seq = 0
        self._lock = threading.Lock()

    # -- wiring ---------------------------------------------------------

    def bind(self, addr: PeerAddress, owner_id: int, clock: VirtualClock) -> "SimulatedEndpoint":
        with self._lock:
            if self._live_endpoint(addr, when=clock.now()) is not None:
                raise AddressInUseError(f"{addr} already bound")
            ep = SimulatedEndpoint(self, addr, owner_id, clock)
            self._bindings[addr] = ep
            self.event_log.append({"t": clock.now(), "event": "bind", "node": owner_id, "addr": str(addr)})
            return ep

    def _live_endpoint(self, addr: PeerAddress, when: float) -> Optional["SimulatedEndpoint"]:
        ep = self._bindings.get(addr)
        if ep is not None:
            return ep
        fwd = self._grace.get(addr)
        if fwd is not None and when <= fwd[1]:
            return fwd[0]
        return None

    def _release(self, addr: PeerAddress) -> None:
        self._bindings.pop(addr, None)

    def _rebind(self, ep: "SimulatedEndpoint", new_addr: PeerAddress, grace_ms: float) -> None:
        with self._lock:
            now = ep.clock.now()
            if self._live_endpoint(new_addr, when=now) is not None:
                raise AddressInUseError(f"{new_addr} already bound")
            old = ep.address
            del self._bindings[old]
            self._bindings[new_addr] = ep
            if grace_ms > 0:
                self._grace[old] = (ep, now + grace_ms)
            ep.address = new_addr
            self.event_log.append({"t": now, "event": "rebind", "node": ep.owner_id, "addr": str(new_addr)})

    def add_tap(self, tap: Tap) -> None:
        self._taps.append(tap)

    def add_interceptor(self, hook: Interceptor) -> None:
        self._interceptors.append(hook)

    def remove_interceptor(self, hook: Interceptor) -> None:
        self._interceptors.remove(hook)

    # -- data path ------------------------------------------------------

    def _send(self, src: "SimulatedEndpoint", to: PeerAddress, frame: Frame) -> None:
        if frame.wire_size > self.config.max_frame:
            raise FrameTooLargeError(f"{frame.wire_size} B exceeds max_frame {self.config.max_frame}")
        with self._lock:
            t = src.clock.now()
            verdict = None
            for hook in self._interceptors:
                verdict = hook(src.owner_id, src.address, to, frame, t)
                if verdict is not None:
                    break

            dst_addr = to
            status = "sent"
            if verdict is not None and verdict[0] == "drop":
                status = "blocked"
            elif verdict is not None and verdict[0] == "redirect":
                dst_addr = verdict[1]
                status = "redirected"

            target = self._live_endpoint(dst_addr, when=t) if status != "blocked" else None
            if status != "blocked" and target is None:
                self.event_log.append(
                    {
                        "t": t,
                        "event": "routing_error",
                        "src": src.owner_id,
                        "dst_addr": str(dst_addr),
                        "kind": frame.kind.name,
                        "corr": frame.correlation_id,
                    }
                )
                raise RoutingError(f"no endpoint at {dst_addr}")

            # Sender-side accounting is oblivious to interception.
            self.stats.on_sent(src.owner_id, self._addressee_id(to, t), frame.wire_size, frame.kind, t)

            delivered = False
            latency = 0.0
            if status != "blocked":
                if self.config.sim_loss_rate > 0 and self.rng.random() < self.config.sim_loss_rate:
                    status = "lost"
                    self.stats.on_lost(src.owner_id, self._addressee_id(to, t), t)
                else:
                    # Truncated normal: clipped below at 0.05 ms and above at
                    # mean + 8 jitter, so in-flight time is strictly bounded.
                    latency = min(
                        max(0.05, self.rng.gauss(self.config.sim_latency_ms, self.config.sim_jitter_ms)),
                        self.config.sim_latency_ms + 8.0 * self.config.sim_jitter_ms,
                    )
                    delivered = True

            record = {
                "t": t,
                "event": "frame",
                "src": src.owner_id,
                "dst": self._addressee_id(to, t),
                "src_addr": str(src.address),
                "dst_addr": str(to),
                "kind": frame.kind.name,
                "corr": frame.correlation_id,
                "size": frame.wire_size,
                "status": status,
            }
            self.event_log.append(record)
            for tap in self._taps:
                tap(record, frame)

            if delivered:
                assert target is not None
                pair = (src.owner_id, target.owner_id)
                arrive = t + latency
                floor = self._pair_last.get(pair)
                if floor is not None and arrive <= floor:
                    arrive = floor + 1e-6  # per-sender FIFO even under jitter
                self._pair_last[pair] = arrive
                self.stats.on_received(src.owner_id, target.owner_id, frame.wire_size, latency, arrive)
                self._seq += 1
                target._push(arrive, self._seq, Delivery(frame=frame, src=src.address, dst=dst_addr, recv_time=arrive))

    def _addressee_id(self, addr: PeerAddress, when: float) -> int:
        ep = self._live_endpoint(addr, when)
        return ep.owner_id if ep is not None else -1


class SimulatedEndpoint:
    """One node's attachment point; frames queue here until polled."""

    def __init__(self, net: SimulatedNetwork, addr: PeerAddress, owner_id: int, clock: VirtualClock):
        self.net = net
        self.address = addr
        self.owner_id = owner_id
        self.clock = clock
        self._inbox: list[tuple[float, int, Delivery]] = []
        self._closed = False

    def send_frame(self, to: PeerAddress, frame: Frame, dst_hint: int = -1) -> None:
        # dst_hint exists for signature parity with the TCP endpoint; the
        # router resolves the addressee itself.
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        self.net._send(self, to, frame)

    def poll(self, deadline: float) -> list[Delivery]:
        """All deliveries due at or before ``deadline``, in arrival order."""
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        out = []
        while self._inbox and self._inbox[0][0] <= deadline:
            out.append(heapq.heappop(self._inbox)[2])
        return out

    def recv_frame(self, timeout_ms: float) -> Delivery | None:
        """Virtual-time receive: waits at most ``timeout_ms`` of clock time."""
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        deadline = self.clock.now() + timeout_ms
        if self._inbox and self._inbox[0][0] <= deadline:
            item = heapq.heappop(self._inbox)
            self.clock.set_at_least(item[0])
            return item[2]
        self.clock.set_at_least(deadline)
        return None

    def pending(self) -> int:
        return len(self._inbox)

    def rebind(self, new_addr: PeerAddress, grace_ms: float = 0.0) -> None:
        if self._closed:
            raise ChannelClosedError("endpoint closed")
        self.net._rebind(self, new_addr, grace_ms)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.net._release(self.address)

    def _push(self, arrive: float, seq: int, delivery: Delivery) -> None:
        if not self._closed:
            heapq.heappush(self._inbox, (arrive, seq, delivery))
