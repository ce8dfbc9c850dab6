"""Per-link telemetry counters and derived network metrics.

Metrics are measured per ordered (sender, receiver) link, which is also
the granularity of the exported CSV. Control bytes are everything that is
not a model exchange.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .frames import FrameKind


@dataclass
class LinkStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_lost: int = 0
    latency_samples: list[float] = field(default_factory=list)
    control_bytes: int = 0

    def mean_latency_ms(self) -> float:
        return sum(self.latency_samples) / len(self.latency_samples) if self.latency_samples else 0.0


@dataclass(frozen=True)
class LinkMetrics:
    """Derived per-link view: throughput, latency, loss, and control overhead."""

    throughput_mbps: float
    mean_latency_ms: float
    packet_loss_pct: float
    control_overhead_pct: float


def derive_metrics(stats: LinkStats, elapsed_ms: float) -> LinkMetrics:
    """Zero denominators yield defined zeros rather than errors."""
    throughput = 0.0
    if elapsed_ms > 0:
        throughput = (stats.bytes_sent * 8) / (elapsed_ms / 1000.0) / 1e6
    loss = 100.0 * stats.frames_lost / stats.frames_sent if stats.frames_sent else 0.0
    overhead = 100.0 * stats.control_bytes / stats.bytes_sent if stats.bytes_sent else 0.0
    return LinkMetrics(
        throughput_mbps=throughput,
        mean_latency_ms=stats.mean_latency_ms(),
        packet_loss_pct=loss,
        control_overhead_pct=overhead,
    )


class StatsBook:
    """Thread-safe registry of LinkStats keyed by (src node, dst node)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._links: dict[tuple[int, int], LinkStats] = {}
        self.first_event_ms: float | None = None
        self.last_event_ms: float = 0.0

    def _touch(self, t: float) -> None:
        if self.first_event_ms is None or t < self.first_event_ms:
            self.first_event_ms = t
        if t > self.last_event_ms:
            self.last_event_ms = t

    def _get(self, src: int, dst: int) -> LinkStats:
        key = (src, dst)
        if key not in self._links:
            self._links[key] = LinkStats()
        return self._links[key]

    def on_sent(self, src: int, dst: int, wire_bytes: int, kind: FrameKind, t: float) -> None:
        with self._lock:
            s = self._get(src, dst)
            s.bytes_sent += wire_bytes
            s.frames_sent += 1
            if kind != FrameKind.MODEL_EXCHANGE:
                s.control_bytes += wire_bytes
            self._touch(t)

    def on_lost(self, src: int, dst: int, t: float) -> None:
        with self._lock:
            self._get(src, dst).frames_lost += 1
            self._touch(t)

    def on_received(self, src: int, dst: int, wire_bytes: int, latency_ms: float, t: float) -> None:
        with self._lock:
            s = self._get(src, dst)
            s.bytes_received += wire_bytes
            s.latency_samples.append(latency_ms)
            self._touch(t)

    def snapshot(self) -> dict[tuple[int, int], LinkStats]:
        """Deep copy of all per-link counters."""
        with self._lock:
            return {
                k: LinkStats(
                    bytes_sent=v.bytes_sent,
                    bytes_received=v.bytes_received,
                    frames_sent=v.frames_sent,
                    frames_lost=v.frames_lost,
                    latency_samples=list(v.latency_samples),
                    control_bytes=v.control_bytes,
                )
                for k, v in self._links.items()
            }

    def elapsed_ms(self) -> float:
        with self._lock:
            if self.first_event_ms is None:
                return 0.0
            return self.last_event_ms - self.first_event_ms

    def totals(self) -> LinkStats:
        """All links folded into one LinkStats."""
        agg = LinkStats()
        for s in self.snapshot().values():
            agg.bytes_sent += s.bytes_sent
            agg.bytes_received += s.bytes_received
            agg.frames_sent += s.frames_sent
            agg.frames_lost += s.frames_lost
            agg.latency_samples.extend(s.latency_samples)
            agg.control_bytes += s.control_bytes
        return agg

    def node_view(self, node_id: int) -> LinkStats:
        """Fold of every link where ``node_id`` is the sender, plus received bytes."""
        agg = LinkStats()
        for (src, dst), s in self.snapshot().items():
            if src == node_id:
                agg.bytes_sent += s.bytes_sent
                agg.frames_sent += s.frames_sent
                agg.frames_lost += s.frames_lost
                agg.control_bytes += s.control_bytes
            if dst == node_id:
                agg.bytes_received += s.bytes_received
                agg.latency_samples.extend(s.latency_samples)
        return agg

    def export_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["link", "src", "dst", "bytes_sent", "bytes_recv", "frames_lost", "mean_latency_ms", "control_bytes"]
            )
            for (src, dst), s in sorted(self.snapshot().items()):
                writer.writerow(
                    [
                        f"{src}->{dst}",
                        src,
                        dst,
                        s.bytes_sent,
                        s.bytes_received,
                        s.frames_lost,
                        f"{s.mean_latency_ms():.6f}",
                        s.control_bytes,
                    ]
                )


def communication_frequency(counts: dict[tuple[int, int], int]) -> dict[tuple[int, int], float]:
    """Share of total traffic per ordered pair; sums to 1 over pairs with traffic."""
    total = sum(counts.values())
    if total == 0:
        return {}
    return {pair: n / total for pair, n in counts.items() if n > 0}
