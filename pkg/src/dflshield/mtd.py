"""Moving target defense: random neighbor sampling and address rotation.

Two independent procedures shrink and shuffle the attack surface every
round. Neighbor sampling picks a uniform subset of the topology neighbors
to exchange with, so an observer never sees the full edge set in any one
round. Address rotation moves a node's listening endpoint to a fresh
ip:port drawn from its pool, announced to peers through an encrypted
rendezvous notice *before* the switch so nobody loses track.

Selection uses Python's stock ``random`` generator, one per node, seeded
from the scenario seed plus the node id for end-to-end reproducibility.
"""

from __future__ import annotations

import math
import random
import struct
import threading
from dataclasses import dataclass, field

from .fabric import PeerAddress


class MtdError(Exception):
    pass


class SampleSizeError(MtdError):
    """Requested more neighbors than the pool holds."""


class EmptyPoolError(MtdError):
    """No candidate address remains after excluding the current binding."""


@dataclass(frozen=True)
class NeighborPool:
    all_neighbors: frozenset[int]
    sample_size: int

    def __post_init__(self):
        object.__setattr__(self, "all_neighbors", frozenset(self.all_neighbors))
        if not self.all_neighbors:
            raise MtdError("neighbor pool is empty")
        if not 1 <= self.sample_size <= len(self.all_neighbors):
            raise SampleSizeError(
                f"sample size {self.sample_size} invalid for pool of {len(self.all_neighbors)}"
            )


def default_sample_size(pool_size: int) -> int:
    """Half the pool, rounded up."""
    return max(1, (pool_size + 1) // 2)


def mtd_select_neighbors(pool: NeighborPool, rng: random.Random) -> set[int]:
    """Draw ``sample_size`` distinct neighbors uniformly at random.

    Rejection-sampled one id at a time: repeatedly pick uniformly from the
    whole pool and keep new ids until the sample is full. Equivalent to
    uniform sampling without replacement.
    """
    candidates = sorted(pool.all_neighbors)
    chosen: set[int] = set()
    while len(chosen) < pool.sample_size:
        pick = candidates[rng.randrange(len(candidates))]
        if pick not in chosen:
            chosen.add(pick)
    return chosen


@dataclass(frozen=True)
class RendezvousNotice:
    """Pre-switch announcement of a node's next address.

    Body layout inside a RendezvousNotice frame (big-endian):
    node_id u32 | ipv4 4 bytes | port u16 | effective_epoch u32 |
    switch_at u64 (ms).
    """

    node_id: int
    new_address: PeerAddress
    effective_epoch: int
    switch_at: float

    def encode(self) -> bytes:
        return (
            struct.pack(">I", self.node_id)
            + self.new_address.packed()
            + struct.pack(">IQ", self.effective_epoch, int(self.switch_at))
        )

    @classmethod
    def decode(cls, blob: bytes) -> "RendezvousNotice":
        if len(blob) != 22:
            raise MtdError(f"rendezvous notice must be 22 bytes, got {len(blob)}")
        (node_id,) = struct.unpack(">I", blob[:4])
        addr = PeerAddress.unpack(blob[4:10])
        epoch, switch_at = struct.unpack(">IQ", blob[10:22])
        return cls(node_id=node_id, new_address=addr, effective_epoch=epoch, switch_at=float(switch_at))


class AddressBook:
    """Current ip:port per peer with per-entry epochs; updates are atomic.

    Lookups always return the highest-epoch entry; stale or replayed
    notices never roll an entry back.
    """

    def __init__(self, self_binding: PeerAddress, self_epoch: int = 0):
        self._lock = threading.Lock()
        self._entries: dict[int, tuple[PeerAddress, int]] = {}
        self.self_binding = self_binding
        self.self_epoch = self_epoch

    def set_entry(self, node_id: int, addr: PeerAddress, epoch: int = 0) -> None:
        with self._lock:
            self._entries[node_id] = (addr, epoch)

    def lookup(self, node_id: int) -> PeerAddress:
        with self._lock:
            if node_id not in self._entries:
                raise KeyError(f"unknown peer {node_id}")
            return self._entries[node_id][0]

    def epoch_of(self, node_id: int) -> int:
        with self._lock:
            return self._entries[node_id][1]

    def known_peers(self) -> list[int]:
        with self._lock:
            return sorted(self._entries)

    def apply_rendezvous(self, notice: RendezvousNotice) -> bool:
        """Adopt the announced address iff the notice epoch is newer.

        Returns True when the entry changed. Unknown peers are ignored
        (False) so a forged or misrouted notice cannot create entries.
        """
        with self._lock:
            current = self._entries.get(notice.node_id)
            if current is None:
                return False
            if notice.effective_epoch <= current[1]:
                return False
            self._entries[notice.node_id] = (notice.new_address, notice.effective_epoch)
            return True


@dataclass(frozen=True)
class AddressPools:
    """Candidate IPs and ports a node may rotate between."""

    ips: tuple[str, ...]
    ports: tuple[int, ...]

    def __post_init__(self):
        if not self.ips or not self.ports:
            raise EmptyPoolError("address pools must be non-empty")

    def candidates(self, exclude: PeerAddress) -> list[PeerAddress]:
        out = []
        for ip in self.ips:
            for port in self.ports:
                addr = PeerAddress(ip, port)
                if addr != exclude:
                    out.append(addr)
        return out


def mtd_rotate_address(
    node_id: int,
    book: AddressBook,
    pools: AddressPools,
    rng: random.Random,
    now_ms: float,
    forbidden: frozenset[PeerAddress] = frozenset(),
) -> tuple[PeerAddress, RendezvousNotice, int]:
    """Pick the next binding uniformly from the pool product, minus the current one.

    ``forbidden`` holds addresses that already failed to bind this round
    (in use by someone else); the caller retries with them excluded. The
    returned notice carries epoch ``current + 1`` and must be broadcast to
    the current neighbors *before* the caller rebinds.

    Raises:
        EmptyPoolError: nothing to rotate to; the caller should skip
            rotation for this round and log a warning event.
    """
    candidates = [a for a in pools.candidates(exclude=book.self_binding) if a not in forbidden]
    if not candidates:
        raise EmptyPoolError("no candidate addresses available")
    new_addr = candidates[rng.randrange(len(candidates))]
    new_epoch = book.self_epoch + 1
    notice = RendezvousNotice(
        node_id=node_id,
        new_address=new_addr,
        effective_epoch=new_epoch,
        switch_at=now_ms,
    )
    return new_addr, notice, new_epoch


def eclipse_evasion_probability(pool_size: int, attackers: int, sample_size: int) -> float:
    """Closed-form chance a uniform sample contains at least one honest node.

    With ``attackers`` compromised ids among ``pool_size`` candidates and a
    sample of ``sample_size``, the all-attacker probability is
    C(attackers, sample) / C(pool, sample), zero when the sample is larger
    than the attacker set.
    """
    if sample_size > attackers:
        return 1.0
    return 1.0 - math.comb(attackers, sample_size) / math.comb(pool_size, sample_size)
