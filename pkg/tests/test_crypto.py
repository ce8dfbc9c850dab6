import secrets

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dflshield import crypto, model


@pytest.fixture(scope="module")
def keys():
    return crypto.generate_keypair(), crypto.generate_keypair()


def fresh_session(epoch=0):
    return crypto.new_session_key(epoch)


class TestEnvelope:
    def test_seal_open_roundtrip(self, keys):
        kp, _ = keys
        payload = b"model parameters go here"
        env = crypto.seal(payload, kp.public_key, fresh_session(), sender_id=7)
        assert crypto.open_envelope(env, kp.private_key) == payload

    def test_large_payload_roundtrip(self, keys):
        kp, _ = keys
        payload = secrets.token_bytes(1 << 20)
        env = crypto.seal(payload, kp.public_key, fresh_session(), sender_id=1)
        assert crypto.open_envelope(env, kp.private_key) == payload

    def test_wrong_private_key_fails_cleanly(self, keys):
        kp, other = keys
        env = crypto.seal(b"secret", kp.public_key, fresh_session(), sender_id=1)
        with pytest.raises(crypto.CryptoError):
            crypto.open_envelope(env, other.private_key)

    def test_empty_payload_rejected(self, keys):
        kp, _ = keys
        with pytest.raises(crypto.CryptoError):
            crypto.seal(b"", kp.public_key, fresh_session(), sender_id=1)

    def test_wire_layout_is_exact(self, keys):
        kp, _ = keys
        session = fresh_session(epoch=3)
        env = crypto.seal(b"x" * 10, kp.public_key, session, sender_id=0xAB)
        blob = env.encode()
        assert blob[0:2] == b"\xdf\x5e"
        assert blob[2] == 1  # version
        assert int.from_bytes(blob[3:7], "big") == 0xAB
        assert int.from_bytes(blob[7:11], "big") == 3
        assert blob[11] == len(env.nonce) == 12
        off = 12 + 12
        assert int.from_bytes(blob[off : off + 2], "big") == len(env.wrapped_key) == 256
        off += 2 + 256
        assert int.from_bytes(blob[off : off + 4], "big") == len(env.ciphertext)
        back = crypto.SecureEnvelope.decode(blob)
        assert back == env

    def test_decode_rejects_malformed(self):
        with pytest.raises(crypto.MalformedEnvelopeError):
            crypto.SecureEnvelope.decode(b"\x00\x01")
        with pytest.raises(crypto.MalformedEnvelopeError):
            crypto.SecureEnvelope.decode(b"\xff" * 40)

    def test_ciphertext_tamper_is_integrity_error(self, keys):
        kp, _ = keys
        env = crypto.seal(b"payload-bytes", kp.public_key, fresh_session(), sender_id=1)
        ct = bytearray(env.ciphertext)
        ct[0] ^= 0x01
        bad = crypto.SecureEnvelope(env.sender_id, env.epoch, env.nonce, env.wrapped_key, bytes(ct))
        with pytest.raises(crypto.IntegrityError):
            crypto.open_envelope(bad, kp.private_key)

    def test_wrapped_key_tamper_is_unwrap_error(self, keys):
        kp, _ = keys
        env = crypto.seal(b"payload-bytes", kp.public_key, fresh_session(), sender_id=1)
        wk = bytearray(env.wrapped_key)
        wk[10] ^= 0x80
        bad = crypto.SecureEnvelope(env.sender_id, env.epoch, env.nonce, bytes(wk), env.ciphertext)
        with pytest.raises(crypto.UnwrapError):
            crypto.open_envelope(bad, kp.private_key)

    def test_header_tamper_fails_authentication(self, keys):
        kp, _ = keys
        env = crypto.seal(b"payload-bytes", kp.public_key, fresh_session(), sender_id=1)
        spoofed = crypto.SecureEnvelope(2, env.epoch, env.nonce, env.wrapped_key, env.ciphertext)
        with pytest.raises(crypto.IntegrityError):
            crypto.open_envelope(spoofed, kp.private_key)

    def test_random_bitflips_never_accepted(self, keys):
        kp, _ = keys
        rng = np.random.default_rng(5)
        env = crypto.seal(b"some sensitive payload", kp.public_key, fresh_session(), sender_id=9)
        blob = env.encode()
        for _ in range(300):
            flipped = bytearray(blob)
            bit = int(rng.integers(0, len(blob) * 8))
            flipped[bit // 8] ^= 1 << (bit % 8)
            try:
                out = crypto.open_envelope(crypto.SecureEnvelope.decode(bytes(flipped)), kp.private_key)
            except crypto.CryptoError:
                continue
            # A flip inside the padding of a length field can survive decode;
            # the payload must still never change.
            assert out == b"some sensitive payload"

    def test_no_shared_16_byte_window_with_plaintext(self, keys):
        kp, _ = keys
        params = model.init_params(model.ModelArchitecture((4, 8, 3)), np.random.default_rng(0))
        plaintext = model.params_to_bytes(params)
        env_bytes = crypto.seal(plaintext, kp.public_key, fresh_session(), sender_id=1).encode()
        plain_windows = {plaintext[i : i + 16] for i in range(len(plaintext) - 15)}
        env_windows = {env_bytes[i : i + 16] for i in range(len(env_bytes) - 15)}
        assert not (plain_windows & env_windows)

    @given(st.binary(min_size=1, max_size=4096))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, payload):
        kp = _module_keypair()
        env = crypto.seal(payload, kp.public_key, fresh_session(), sender_id=2)
        assert crypto.open_envelope(env, kp.private_key) == payload


_CACHED = None


def _module_keypair():
    global _CACHED
    if _CACHED is None:
        _CACHED = crypto.generate_keypair()
    return _CACHED


class TestReplay:
    def test_replay_detected(self, keys):
        kp, _ = keys
        cache = crypto.ReplayCache()
        env = crypto.seal(b"once", kp.public_key, fresh_session(), sender_id=3)
        assert crypto.open_envelope(env, kp.private_key, cache) == b"once"
        with pytest.raises(crypto.ReplayError):
            crypto.open_envelope(env, kp.private_key, cache)

    def test_replayed_capture_batch_rejected(self, keys):
        kp, _ = keys
        cache = crypto.ReplayCache()
        session = fresh_session()
        captured = [crypto.seal(b"m%d" % i, kp.public_key, session, sender_id=4) for i in range(100)]
        for env in captured:
            crypto.open_envelope(env, kp.private_key, cache)
        accepted = 0
        for env in captured:
            try:
                crypto.open_envelope(env, kp.private_key, cache)
                accepted += 1
            except crypto.ReplayError:
                pass
        assert accepted == 0

    def test_stale_epoch_rejected_outside_window(self, keys):
        kp, _ = keys
        cache = crypto.ReplayCache()
        old = crypto.seal(b"old", kp.public_key, fresh_session(epoch=0), sender_id=5)
        crypto.open_envelope(old, kp.private_key, cache)
        for epoch in (1, 2, 3):
            crypto.open_envelope(
                crypto.seal(b"new", kp.public_key, fresh_session(epoch), sender_id=5), kp.private_key, cache
            )
        stale = crypto.seal(b"late", kp.public_key, fresh_session(epoch=1), sender_id=5)
        with pytest.raises(crypto.ReplayError):
            crypto.open_envelope(stale, kp.private_key, cache)

    def test_failed_decrypt_does_not_poison_cache(self, keys):
        kp, other = keys
        cache = crypto.ReplayCache()
        env = crypto.seal(b"msg", kp.public_key, fresh_session(), sender_id=6)
        with pytest.raises(crypto.UnwrapError):
            crypto.open_envelope(env, other.private_key, cache)
        assert crypto.open_envelope(env, kp.private_key, cache) == b"msg"


class TestSessionRenewal:
    def test_epoch_increments(self):
        s0 = fresh_session()
        s1 = crypto.renew_session(s0, policy_rounds=1)
        assert s1.epoch == 1

    def test_fresh_randomness(self):
        s0 = fresh_session()
        s1 = crypto.renew_session(s0)
        s2 = crypto.renew_session(s1)
        assert len({s0.key_bytes, s1.key_bytes, s2.key_bytes}) == 3

    def test_policy_must_be_positive(self):
        with pytest.raises(crypto.CryptoError):
            crypto.renew_session(fresh_session(), policy_rounds=0)

    def test_bad_key_length_rejected(self):
        with pytest.raises(crypto.CryptoError):
            crypto.SessionKey(b"short", 0)


class TestTokens:
    def test_issue_and_verify(self, keys):
        kp, _ = keys
        token = crypto.issue_token(5, "trainer", ttl=100.0, signer=kp, now=50.0)
        decoded = crypto.verify_token(token, kp.public_key, now=100.0)
        assert decoded.subject == 5
        assert decoded.claims["role"] == "trainer"
        assert decoded.expires_at == 150.0

    def test_three_base64url_segments(self, keys):
        kp, _ = keys
        token = crypto.issue_token(1, "trainer", 10.0, kp, now=0.0)
        parts = token.split(".")
        assert len(parts) == 3
        import base64 as b64
        import json

        header = json.loads(b64.urlsafe_b64decode(parts[0] + "=="))
        assert header == {"alg": "RS256", "typ": "JWT"}

    def test_expiry_is_strict(self, keys):
        kp, _ = keys
        token = crypto.issue_token(1, "trainer", ttl=10.0, signer=kp, now=0.0)
        assert crypto.verify_token(token, kp.public_key, now=9.999).subject == 1
        with pytest.raises(crypto.TokenRejected) as err:
            crypto.verify_token(token, kp.public_key, now=10.0)
        assert err.value.reason == "expired"

    def test_claim_tamper_breaks_signature(self, keys):
        kp, _ = keys
        token = crypto.issue_token(1, "trainer", 100.0, kp, now=0.0)
        head, claims, sig = token.split(".")
        forged = crypto._b64url(crypto._unb64url(claims).replace(b"trainer", b"aggregator"))
        with pytest.raises(crypto.TokenRejected) as err:
            crypto.verify_token(f"{head}.{forged}.{sig}", kp.public_key, now=1.0)
        assert err.value.reason == "bad-signature"

    def test_wrong_signer_rejected(self, keys):
        kp, other = keys
        token = crypto.issue_token(1, "trainer", 100.0, kp, now=0.0)
        with pytest.raises(crypto.TokenRejected) as err:
            crypto.verify_token(token, other.public_key, now=1.0)
        assert err.value.reason == "bad-signature"

    def test_malformed_rejected(self, keys):
        kp, _ = keys
        with pytest.raises(crypto.TokenRejected) as err:
            crypto.verify_token("only.two", kp.public_key, now=0.0)
        assert err.value.reason == "malformed"

    def test_bitflip_fuzz_never_accepted(self, keys):
        kp, _ = keys
        rng = np.random.default_rng(17)
        token = crypto.issue_token(9, "trainer", 1000.0, signer=kp, now=0.0)
        raw = token.encode()
        accepted = 0
        for _ in range(300):
            flipped = bytearray(raw)
            bit = int(rng.integers(0, len(raw) * 8))
            flipped[bit // 8] ^= 1 << (bit % 8)
            try:
                decoded = crypto.verify_token(flipped.decode("ascii", "strict"), kp.public_key, now=1.0)
            except (crypto.TokenRejected, UnicodeDecodeError):
                continue
            accepted += 1
        assert accepted == 0

    def test_near_expiry(self, keys):
        kp, _ = keys
        token = crypto.issue_token(1, "trainer", 100.0, kp, now=0.0)
        decoded = crypto.verify_token(token, kp.public_key, now=1.0)
        assert not decoded.near_expiry(now=79.0)
        assert decoded.near_expiry(now=80.0)

    def test_zero_ttl_rejected(self, keys):
        kp, _ = keys
        with pytest.raises(crypto.CryptoError):
            crypto.issue_token(1, "trainer", 0.0, kp, now=0.0)


class TestKeyRecords:
    def test_sign_verify_roundtrip(self, keys):
        kp, _ = keys
        record = crypto.sign_key_record(4, kp.public_pem(), kp)
        node, pem = crypto.verify_key_record(record, kp.public_key)
        assert node == 4 and pem == kp.public_pem()

    def test_tampered_record_rejected(self, keys):
        kp, other = keys
        record = crypto.sign_key_record(4, kp.public_pem(), kp)
        with pytest.raises(crypto.TokenRejected):
            crypto.verify_key_record(record, other.public_key)
        with pytest.raises(crypto.TokenRejected):
            crypto.verify_key_record("garbage", kp.public_key)


def test_private_key_never_in_wire_frames(keys=None):
    kp = _module_keypair()
    from cryptography.hazmat.primitives import serialization

    private_der = kp.private_key.private_bytes(
        serialization.Encoding.DER, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()
    )
    env = crypto.seal(b"payload", kp.public_key, fresh_session(), sender_id=1)
    assert private_der not in env.encode()
