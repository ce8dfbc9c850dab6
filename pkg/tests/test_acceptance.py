"""Acceptance suite: one test per criterion, each printing a PASS line.

Thresholds and tolerances are pinned here and nowhere else. The 8-node
matrix and the eclipse runs come from session fixtures (conftest) so the
whole suite stays inside its runtime budgets.
"""

import math
import random
import secrets
import time

import numpy as np
import pytest
from scipy import stats as scipy_stats

from dflshield import crypto, model
from dflshield.adversary import run_eclipse_sampling
from dflshield.harness import write_report_csv
from dflshield.mtd import NeighborPool, mtd_rotate_address, mtd_select_neighbors
from dflshield.mtd import AddressBook, AddressPools
from dflshield.fabric import PeerAddress
from dflshield.runner import run_simulated
from dflshield.scenario import SETTING_ORDER, SecuritySetting

from conftest import bundled


def report(criterion: int, description: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {criterion} [{status}] {description}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {criterion} failed: {description} {detail}"


def final_f1(result) -> float:
    return result.final_f1_mean()


class TestCriterion1Convergence:
    def test_convergence_ordering(self, matrix8):
        base = final_f1(matrix8[SecuritySetting.BASELINE])
        enc = final_f1(matrix8[SecuritySetting.ENCRYPTION])
        mtd = final_f1(matrix8[SecuritySetting.ENCRYPTION_MTD])
        runtime = sum(r.elapsed_s for r in matrix8.values())
        ok = (
            base >= 0.90
            and abs(base - enc) <= 0.05
            and abs(base - mtd) <= 0.05
            and base >= enc >= mtd - 0.02
            and runtime < 120.0
        )
        report(
            1,
            "convergence ordering baseline >= encryption >= encryption_mtd - 0.02, baseline >= 0.90",
            ok,
            f"f1 base={base:.4f} enc={enc:.4f} mtd={mtd:.4f} runtime={runtime:.1f}s",
        )


class TestCriterion2Overhead:
    def test_bytes_and_control_overhead_strictly_increase(self, matrix8):
        totals = {s: matrix8[s].stats.totals() for s in SETTING_ORDER}
        sent = [totals[s].bytes_sent for s in SETTING_ORDER]
        ctrl = [100.0 * totals[s].control_bytes / totals[s].bytes_sent for s in SETTING_ORDER]
        ok = sent[0] < sent[1] < sent[2] and ctrl[0] < ctrl[1] < ctrl[2]
        report(
            2,
            "total fabric bytes and control overhead strictly increase across settings",
            ok,
            f"bytes={sent} ctrl%={[f'{c:.2f}' for c in ctrl]}",
        )


class TestCriterion3Eclipse:
    def test_eclipse_dichotomy(self, eclipse8):
        t0 = time.monotonic()
        base = eclipse8[SecuritySetting.BASELINE].attack_outcome
        enc = eclipse8[SecuritySetting.ENCRYPTION].attack_outcome
        mtd = eclipse8[SecuritySetting.ENCRYPTION_MTD].attack_outcome
        ok_base = (
            base.isolated_rounds == base.window_rounds
            and base.plaintext_param_sets_recovered >= base.isolated_rounds
            and base.success
        )
        ok_enc = enc.isolated_rounds == enc.window_rounds and enc.plaintext_param_sets_recovered == 0
        # Fast Monte Carlo of the sampling game at the worked sizes
        # (7 candidates, 3 attacker-adjacent, sample 3 -> 1/35).
        trials = 20_000
        rate = run_eclipse_sampling(pool_size=7, attacker_adjacent=3, sample_size=3, trials=trials, seed=42)
        expected = math.comb(3, 3) / math.comb(7, 3)
        ok_mtd = mtd.plaintext_param_sets_recovered == 0 and abs(rate - expected) <= 0.01
        runtime = sum(r.elapsed_s for r in eclipse8.values()) + (time.monotonic() - t0)
        ok = ok_base and ok_enc and ok_mtd and runtime < 180.0
        report(
            3,
            "eclipse dichotomy: plaintext capture only in baseline; MTD sampling rate matches closed form",
            ok,
            f"base(iso={base.isolated_rounds},rec={base.plaintext_param_sets_recovered},"
            f"success={base.success}) enc(iso={enc.isolated_rounds},rec={enc.plaintext_param_sets_recovered}) "
            f"mtd(rec={mtd.plaintext_param_sets_recovered},mc={rate:.4f} vs {expected:.4f}) "
            f"runtime={runtime:.1f}s",
        )


class TestCriterion4MtdUniformity:
    def test_chi_square_uniformity(self):
        t0 = time.monotonic()
        rng = random.Random(4242)
        pool = NeighborPool(frozenset(range(10)), 3)
        counts = [0] * 10
        draws = 100_000
        for _ in range(draws):
            for member in mtd_select_neighbors(pool, rng):
                counts[member] += 1
        _, p_select = scipy_stats.chisquare(counts, [draws * 3 / 10] * 10)

        book = AddressBook(self_binding=PeerAddress("10.4.4.4", 7100))
        pools = AddressPools(ips=("10.4.4.4",), ports=tuple(range(7100, 7110)))
        rot_counts = {p: 0 for p in range(7100, 7110)}
        rot_rng = random.Random(777)
        for _ in range(1000):
            new_addr, _, epoch = mtd_rotate_address(0, book, pools, rot_rng, now_ms=0.0)
            rot_counts[new_addr.port] += 1
            book.self_binding = new_addr
            book.self_epoch = epoch
        _, p_rotate = scipy_stats.chisquare(list(rot_counts.values()))
        runtime = time.monotonic() - t0
        ok = p_select > 0.01 and p_rotate > 0.01 and runtime < 30.0
        report(
            4,
            "chi-square uniformity of neighbor selection (100k draws) and port rotation (1000 rotations) at alpha=0.01",
            ok,
            f"p_select={p_select:.4f} p_rotate={p_rotate:.4f} runtime={runtime:.1f}s",
        )


class TestCriterion5Crypto:
    def test_soundness(self):
        t0 = time.monotonic()
        kp = crypto.generate_keypair()
        rng = np.random.default_rng(55)

        session = crypto.new_session_key()
        for i in range(10_000):
            payload = secrets.token_bytes(int(rng.integers(1, 256)))
            env = crypto.seal(payload, kp.public_key, session, sender_id=1)
            assert crypto.open_envelope(env, kp.private_key) == payload
        roundtrips_ok = True

        env = crypto.seal(b"authenticated payload for tampering", kp.public_key, session, sender_id=2)
        blob = env.encode()
        env_accepts = 0
        for _ in range(1000):
            flipped = bytearray(blob)
            bit = int(rng.integers(0, len(blob) * 8))
            flipped[bit // 8] ^= 1 << (bit % 8)
            try:
                out = crypto.open_envelope(crypto.SecureEnvelope.decode(bytes(flipped)), kp.private_key)
                if out != b"authenticated payload for tampering":
                    env_accepts += 1
            except crypto.CryptoError:
                pass

        token = crypto.issue_token(3, "trainer", ttl=1e9, signer=kp, now=0.0)
        raw = token.encode()
        token_accepts = 0
        for _ in range(1000):
            flipped = bytearray(raw)
            bit = int(rng.integers(0, len(raw) * 8))
            flipped[bit // 8] ^= 1 << (bit % 8)
            try:
                crypto.verify_token(flipped.decode("ascii", "strict"), kp.public_key, now=1.0)
                token_accepts += 1
            except (crypto.TokenRejected, UnicodeDecodeError):
                pass

        cache = crypto.ReplayCache()
        captured = [crypto.seal(b"replay %4d" % i, kp.public_key, session, sender_id=4) for i in range(1000)]
        for env in captured:
            crypto.open_envelope(env, kp.private_key, cache)
        replay_accepts = 0
        for env in captured:
            try:
                crypto.open_envelope(env, kp.private_key, cache)
                replay_accepts += 1
            except crypto.ReplayError:
                pass

        runtime = time.monotonic() - t0
        ok = roundtrips_ok and env_accepts == 0 and token_accepts == 0 and replay_accepts == 0 and runtime < 60.0
        report(
            5,
            "10k round-trips; 1000 envelope and 1000 token bit-flips rejected; 1000 replays rejected",
            ok,
            f"env_accepts={env_accepts} token_accepts={token_accepts} replay_accepts={replay_accepts} "
            f"runtime={runtime:.1f}s",
        )


class TestCriterion6Numerics:
    def test_fedavg_against_naive_mean(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for k in range(100):
            arch = model.ModelArchitecture((int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 4))))
            own = model.init_params(arch, np.random.default_rng(600 + k))
            received = [model.init_params(arch, np.random.default_rng(700 + 10 * k + j)) for j in range(int(rng.integers(1, 7)))]
            got = model.aggregate_fedavg(own, received).flat()
            naive = own.flat().copy()
            for p in received:
                naive = naive + p.flat()
            naive /= len(received) + 1
            denom = np.maximum(np.abs(naive), 1e-300)
            worst = max(worst, float(np.max(np.abs(got - naive) / denom)))
        ok_mean = worst < 1e-12

        rng = np.random.default_rng(66)
        eps = 1e-6
        worst_grad = 0.0
        for trial in range(20):
            sizes = (2, int(rng.integers(2, 5)), int(rng.integers(2, 4)))
            act = ["relu", "tanh", "sigmoid"][trial % 3]
            params = model.init_params(model.ModelArchitecture(sizes, act), rng)
            x = rng.normal(size=2)
            y = int(rng.integers(0, sizes[-1]))
            grads_w, grads_b = model.gradients(params, x, y)
            flat_grad = np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in zip(grads_w, grads_b)])
            base = params.flat()
            for j in range(base.size):
                bumped = base.copy()
                bumped[j] += eps
                up = model.example_loss(model.params_from_flat(params.arch, bumped), x, y)
                bumped[j] -= 2 * eps
                down = model.example_loss(model.params_from_flat(params.arch, bumped), x, y)
                numeric = (up - down) / (2 * eps)
                if abs(numeric) > 1e-7:
                    worst_grad = max(worst_grad, abs(flat_grad[j] - numeric) / abs(numeric))
        ok_grad = worst_grad < 1e-4
        report(
            6,
            "FedAvg matches naive mean to 1e-12 rel (100 cases); gradients match central differences to 1e-4 rel (20 models)",
            ok_mean and ok_grad,
            f"worst_mean_rel={worst:.2e} worst_grad_rel={worst_grad:.2e}",
        )


class TestCriterion7Rendezvous:
    def test_rotation_continuity(self):
        cfg = bundled("encryption-mtd-8")
        from dataclasses import replace
        from dflshield.fabric import FabricConfig

        cfg = replace(
            cfg,
            name="rendezvous-10",
            nodes=10,
            rounds=20,
            mtd_rotation_interval=1,
            fabric=replace(cfg.fabric, sim_loss_rate=0.0),
        )
        res = run_simulated(cfg)
        routing_errors = res.total_event("routing_error")
        starvations = res.total_event("starvation")
        rotations = res.total_event("rotations")
        ok = not res.aborted and routing_errors == 0 and starvations == 0 and rotations == 10 * 20
        report(
            7,
            "10-node 20-round encryption_mtd run with rotation every round: zero routing errors, zero starvation",
            ok,
            f"routing_errors={routing_errors} starvations={starvations} rotations={rotations}",
        )


class TestCriterion8Determinism:
    def test_rerun_byte_identical_reports(self, matrix8, tmp_path):
        cfg = bundled("baseline-8")
        rerun = run_simulated(cfg)
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        write_report_csv(a, cfg, matrix8[SecuritySetting.BASELINE])
        write_report_csv(b, cfg, rerun)
        identical = a.read_bytes() == b.read_bytes()
        # The attack appendix must be reproducible too.
        ecfg = bundled("eclipse-baseline-8")
        e1, e2 = run_simulated(ecfg), run_simulated(ecfg)
        ea, eb = tmp_path / "ea.csv", tmp_path / "eb.csv"
        write_report_csv(ea, ecfg, e1)
        write_report_csv(eb, ecfg, e2)
        identical_attack = ea.read_bytes() == eb.read_bytes()
        report(
            8,
            "same seed, same scenario: byte-identical run report CSVs",
            identical and identical_attack,
            f"plain={identical} with_attack={identical_attack}",
        )


class TestCriterion9Scale:
    @pytest.fixture(scope="class")
    def matrix50(self):
        runs = {}
        for name in ("baseline-50", "encryption-50", "encryption-mtd-50"):
            cfg = bundled(name)
            runs[cfg.security] = run_simulated(cfg)
        return runs

    def test_fifty_node_smoke(self, matrix50):
        base = matrix50[SecuritySetting.BASELINE]
        ok_time = base.elapsed_s < 600.0 and not base.aborted
        ok_rows = len(base.rows) == 50 * 10
        totals = {s: matrix50[s].stats.totals() for s in SETTING_ORDER}
        sent = [totals[s].bytes_sent for s in SETTING_ORDER]
        ctrl = [100.0 * totals[s].control_bytes / totals[s].bytes_sent for s in SETTING_ORDER]
        ok_order = sent[0] < sent[1] < sent[2] and ctrl[0] < ctrl[1] < ctrl[2]
        report(
            9,
            "50-node baseline completes 10 rounds under 10 minutes with overhead ordering preserved",
            ok_time and ok_rows and ok_order,
            f"baseline_elapsed={base.elapsed_s:.1f}s rows={len(base.rows)} bytes={sent}",
        )
