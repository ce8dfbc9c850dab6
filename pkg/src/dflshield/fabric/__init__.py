"""Framed peer-to-peer transport with simulated and TCP backends."""

from .frames import (
    AddressInUseError,
    ChannelClosedError,
    Delivery,
    FabricError,
    Frame,
    FrameKind,
    FrameTooLargeError,
    MalformedFrameError,
    PeerAddress,
    RoutingError,
)
from .sim import DROP, REDIRECT, FabricConfig, SimulatedEndpoint, SimulatedNetwork, VirtualClock
from .stats import LinkMetrics, LinkStats, StatsBook, communication_frequency, derive_metrics
from .tcp import TcpEndpoint

__all__ = [
    "AddressInUseError",
    "ChannelClosedError",
    "Delivery",
    "DROP",
    "FabricConfig",
    "FabricError",
    "Frame",
    "FrameKind",
    "FrameTooLargeError",
    "LinkMetrics",
    "LinkStats",
    "MalformedFrameError",
    "PeerAddress",
    "REDIRECT",
    "RoutingError",
    "SimulatedEndpoint",
    "SimulatedNetwork",
    "StatsBook",
    "TcpEndpoint",
    "VirtualClock",
    "communication_frequency",
    "derive_metrics",
]
