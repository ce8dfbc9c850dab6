import math
import random

import pytest
from scipy import stats as scipy_stats

from dflshield.fabric import PeerAddress
from dflshield.mtd import (
    AddressBook,
    AddressPools,
    EmptyPoolError,
    MtdError,
    NeighborPool,
    RendezvousNotice,
    SampleSizeError,
    default_sample_size,
    eclipse_evasion_probability,
    mtd_rotate_address,
    mtd_select_neighbors,
)


class TestNeighborSelection:
    def test_sample_contract(self):
        pool = NeighborPool(frozenset(range(100, 107)), 3)
        chosen = mtd_select_neighbors(pool, random.Random(1))
        assert len(chosen) == 3
        assert chosen <= pool.all_neighbors

    def test_full_pool_selection(self):
        ids = frozenset({4, 9, 12})
        pool = NeighborPool(ids, 3)
        assert mtd_select_neighbors(pool, random.Random(0)) == set(ids)

    def test_oversized_sample_rejected(self):
        with pytest.raises(SampleSizeError):
            NeighborPool(frozenset({1, 2}), 3)
        with pytest.raises(MtdError):
            NeighborPool(frozenset(), 1)

    def test_attacker_avoidance_matches_combinatorics(self):
        # 10 candidates, 2 attacker-controlled, sample 3: the sample can
        # never be all-attacker, and it avoids attackers entirely with
        # probability C(8,3)/C(10,3) = 56/120.
        rng = random.Random(123)
        pool = NeighborPool(frozenset(range(10)), 3)
        attackers = {0, 1}
        trials = 100_000
        all_attacker = 0
        avoided = 0
        for _ in range(trials):
            sample = mtd_select_neighbors(pool, rng)
            if sample <= attackers:
                all_attacker += 1
            if not (sample & attackers):
                avoided += 1
        assert all_attacker == 0
        expected = math.comb(8, 3) / math.comb(10, 3)
        assert abs(avoided / trials - expected) <= 0.01

    def test_uniformity_chi_square(self):
        rng = random.Random(99)
        pool = NeighborPool(frozenset(range(10)), 3)
        counts = {i: 0 for i in range(10)}
        trials = 100_000
        for _ in range(trials):
            for member in mtd_select_neighbors(pool, rng):
                counts[member] += 1
        observed = [counts[i] for i in range(10)]
        expected = [trials * 3 / 10] * 10
        stat, p = scipy_stats.chisquare(observed, expected)
        assert p > 0.01

    def test_default_sample_size(self):
        assert default_sample_size(1) == 1
        assert default_sample_size(4) == 2
        assert default_sample_size(7) == 4


class TestEvasionProbability:
    def test_sample_bigger_than_attacker_set_always_escapes(self):
        assert eclipse_evasion_probability(7, 2, 3) == 1.0

    def test_closed_form(self):
        assert eclipse_evasion_probability(7, 3, 3) == pytest.approx(1 - 1 / 35)
        assert eclipse_evasion_probability(10, 2, 2) == pytest.approx(1 - math.comb(2, 2) / math.comb(10, 2))


def book_at(ip="10.9.9.1", port=7100) -> AddressBook:
    return AddressBook(self_binding=PeerAddress(ip, port))


class TestRotation:
    def test_forced_choice_with_two_ports(self):
        book = book_at(port=7100)
        pools = AddressPools(ips=("10.9.9.1",), ports=(7100, 7101))
        new_addr, notice, epoch = mtd_rotate_address(3, book, pools, random.Random(0), now_ms=5.0)
        assert new_addr == PeerAddress("10.9.9.1", 7101)
        assert notice.new_address == new_addr
        assert notice.node_id == 3
        assert epoch == 1

    def test_notice_epoch_is_current_plus_one(self):
        book = book_at()
        book.self_epoch = 6
        pools = AddressPools(ips=("10.9.9.1",), ports=(7100, 7101, 7102))
        _, notice, epoch = mtd_rotate_address(1, book, pools, random.Random(2), now_ms=0.0)
        assert notice.effective_epoch == 7 == epoch

    def test_never_returns_current_address(self):
        book = book_at(port=7105)
        pools = AddressPools(ips=("10.9.9.1",), ports=tuple(range(7100, 7110)))
        rng = random.Random(5)
        for _ in range(200):
            new_addr, _, _ = mtd_rotate_address(0, book, pools, rng, now_ms=0.0)
            assert new_addr.port != 7105

    def test_port_frequencies_uniform_over_sequence(self):
        # 1000 successive rotations over a 10-port pool: chi-square with
        # 9 degrees of freedom at alpha = 0.01.
        book = book_at(port=7100)
        pools = AddressPools(ips=("10.9.9.1",), ports=tuple(range(7100, 7110)))
        rng = random.Random(77)
        counts = {p: 0 for p in range(7100, 7110)}
        for _ in range(1000):
            new_addr, _, epoch = mtd_rotate_address(0, book, pools, rng, now_ms=0.0)
            counts[new_addr.port] += 1
            book.self_binding = new_addr
            book.self_epoch = epoch
        stat, p = scipy_stats.chisquare(list(counts.values()))
        assert p > 0.01

    def test_exhausted_pool_raises(self):
        book = book_at(port=7100)
        pools = AddressPools(ips=("10.9.9.1",), ports=(7100,))
        with pytest.raises(EmptyPoolError):
            mtd_rotate_address(0, book, pools, random.Random(0), now_ms=0.0)

    def test_forbidden_addresses_excluded(self):
        book = book_at(port=7100)
        pools = AddressPools(ips=("10.9.9.1",), ports=(7100, 7101, 7102))
        forbidden = frozenset({PeerAddress("10.9.9.1", 7101)})
        for seed in range(20):
            new_addr, _, _ = mtd_rotate_address(0, book, pools, random.Random(seed), 0.0, forbidden)
            assert new_addr.port == 7102


class TestAddressBook:
    def _notice(self, node=1, port=7200, epoch=1):
        return RendezvousNotice(node, PeerAddress("10.9.9.2", port), epoch, switch_at=0.0)

    def test_fresh_notice_applies(self):
        book = book_at()
        book.set_entry(1, PeerAddress("10.9.9.2", 7100), epoch=0)
        assert book.apply_rendezvous(self._notice(epoch=1))
        assert book.lookup(1).port == 7200
        assert book.epoch_of(1) == 1

    def test_stale_and_duplicate_notices_ignored(self):
        book = book_at()
        book.set_entry(1, PeerAddress("10.9.9.2", 7100), epoch=0)
        fresh = self._notice(port=7201, epoch=2)
        assert book.apply_rendezvous(fresh)
        assert not book.apply_rendezvous(fresh)  # duplicate
        assert not book.apply_rendezvous(self._notice(port=7205, epoch=1))  # older
        assert book.lookup(1).port == 7201

    def test_unknown_node_ignored(self):
        book = book_at()
        assert not book.apply_rendezvous(self._notice(node=42))
        assert 42 not in book.known_peers()

    def test_epoch_monotone_under_any_sequence(self):
        book = book_at()
        book.set_entry(1, PeerAddress("10.9.9.2", 7100), epoch=0)
        rng = random.Random(3)
        last_epoch = 0
        for _ in range(200):
            e = rng.randrange(0, 20)
            book.apply_rendezvous(self._notice(port=7100 + e, epoch=e))
            assert book.epoch_of(1) >= last_epoch
            last_epoch = book.epoch_of(1)

    def test_lookup_unknown_raises(self):
        with pytest.raises(KeyError):
            book_at().lookup(9)


class TestNoticeWire:
    def test_exact_22_byte_layout(self):
        notice = RendezvousNotice(0x0102, PeerAddress("10.1.2.3", 0x1F90), 7, switch_at=1000.0)
        blob = notice.encode()
        assert len(blob) == 22
        assert blob == bytes.fromhex("00000102" "0a010203" "1f90" "00000007" "00000000000003e8")
        assert RendezvousNotice.decode(blob) == notice

    def test_decode_rejects_wrong_length(self):
        with pytest.raises(MtdError):
            RendezvousNotice.decode(b"\x00" * 21)


def test_empty_pools_rejected():
    with pytest.raises(EmptyPoolError):
        AddressPools(ips=(), ports=(7100,))
