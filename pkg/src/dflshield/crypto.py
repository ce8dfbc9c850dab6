"""Hybrid message protection and participant auth tokens.

Every protected payload rides in an envelope: the payload itself is
encrypted with an authenticated symmetric cipher (AES-256-GCM) under a
per-sender session key, and that session key is wrapped for the recipient
with RSA-OAEP. Session keys carry an epoch counter and are renewed on a
configurable round interval. Tokens are controller-signed and use standard
JWT framing (three base64url segments, RS256).

Envelope wire layout (big-endian):
    magic 0xDF5E u16 | version u8 | sender_id u32 | epoch u32 |
    nonce length u8 + nonce | wrapped key length u16 + bytes |
    ciphertext length u32 + bytes
"""

from __future__ import annotations

import base64
import json
import secrets
import struct
import threading
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

ENVELOPE_MAGIC = 0xDF5E
ENVELOPE_VERSION = 1
SESSION_KEY_BYTES = 32
_NONCE_BYTES = 12
_RSA_BITS = 2048

_OAEP = padding.OAEP(mgf=padding.MGF1(algorithm=hashes.SHA256()), algorithm=hashes.SHA256(), label=None)


class CryptoError(Exception):
    """Base class for envelope/token failures."""


class MalformedEnvelopeError(CryptoError):
    """Envelope bytes do not parse under the wire layout."""


class IntegrityError(CryptoError):
    """Authenticated decryption failed: ciphertext or header was altered."""


class UnwrapError(CryptoError):
    """Session key could not be unwrapped (wrong or tampered key material)."""


class ReplayError(CryptoError):
    """Envelope (sender, epoch, nonce) was already accepted, or the epoch is stale."""


class EntropyError(CryptoError):
    """The OS randomness source failed; this is a fatal configuration error."""


class TokenRejected(CryptoError):
    """Token failed verification; ``reason`` is one of expired / bad-signature / malformed."""

    def __init__(self, reason: str):
        super().__init__(f"token rejected: {reason}")
        self.reason = reason


@dataclass
class KeyPair:
    """RSA keypair. The private half never appears in any wire frame."""

    private_key: rsa.RSAPrivateKey = field(repr=False)
    public_key: rsa.RSAPublicKey = field(repr=False)
    created_at: float = field(default_factory=time.monotonic)

    def public_pem(self) -> bytes:
        return self.public_key.public_bytes(
            serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
        )


def generate_keypair() -> KeyPair:
    priv = rsa.generate_private_key(public_exponent=65537, key_size=_RSA_BITS)
    return KeyPair(private_key=priv, public_key=priv.public_key())


def load_public_pem(pem: bytes) -> rsa.RSAPublicKey:
    key = serialization.load_pem_public_key(pem)
    if not isinstance(key, rsa.RSAPublicKey):
        raise CryptoError("expected an RSA public key")
    return key


@dataclass(frozen=True)
class SessionKey:
    """Symmetric key for one sender, tagged with its renewal epoch."""

    key_bytes: bytes = field(repr=False)
    epoch: int = 0

    def __post_init__(self):
        if len(self.key_bytes) != SESSION_KEY_BYTES:
            raise CryptoError(f"session key must be {SESSION_KEY_BYTES} bytes")
        if self.epoch < 0:
            raise CryptoError("epoch must be non-negative")


def new_session_key(epoch: int = 0) -> SessionKey:
    return SessionKey(key_bytes=_random_bytes(SESSION_KEY_BYTES), epoch=epoch)


def renew_session(current: SessionKey, policy_rounds: int = 1) -> SessionKey:
    """Fresh random key bytes with the epoch bumped by one.

    ``policy_rounds`` is the renewal interval the caller is honouring; it
    must be >= 1. The schedule itself (renew when round % interval == 0)
    lives with the caller; this function only produces the successor key.
    """
    if policy_rounds < 1:
        raise CryptoError("renewal policy must be >= 1 round")
    return SessionKey(key_bytes=_random_bytes(SESSION_KEY_BYTES), epoch=current.epoch + 1)


def _random_bytes(n: int) -> bytes:
    try:
        return secrets.token_bytes(n)
    except Exception as exc:  # pragma: no cover - OS entropy failure
        raise EntropyError("entropy source failure") from exc


@dataclass(frozen=True)
class SecureEnvelope:
    """One protected wire unit: symmetric ciphertext plus the wrapped session key."""

    sender_id: int
    epoch: int
    nonce: bytes
    wrapped_key: bytes
    ciphertext: bytes

    def encode(self) -> bytes:
        head = struct.pack(">HBII", ENVELOPE_MAGIC, ENVELOPE_VERSION, self.sender_id, self.epoch)
        return (
            head
            + struct.pack(">B", len(self.nonce))
            + self.nonce
            + struct.pack(">H", len(self.wrapped_key))
            + self.wrapped_key
            + struct.pack(">I", len(self.ciphertext))
            + self.ciphertext
        )

    @classmethod
    def decode(cls, blob: bytes) -> "SecureEnvelope":
        try:
            magic, version, sender_id, epoch = struct.unpack_from(">HBII", blob, 0)
            if magic != ENVELOPE_MAGIC or version != ENVELOPE_VERSION:
                raise MalformedEnvelopeError("bad magic or version")
            off = 11
            (nlen,) = struct.unpack_from(">B", blob, off)
            off += 1
            nonce = blob[off : off + nlen]
            if len(nonce) != nlen:
                raise MalformedEnvelopeError("truncated nonce")
            off += nlen
            (wklen,) = struct.unpack_from(">H", blob, off)
            off += 2
            wrapped = blob[off : off + wklen]
            if len(wrapped) != wklen:
                raise MalformedEnvelopeError("truncated wrapped key")
            off += wklen
            (ctlen,) = struct.unpack_from(">I", blob, off)
            off += 4
            ct = blob[off : off + ctlen]
            if len(ct) != ctlen or off + ctlen != len(blob):
                raise MalformedEnvelopeError("bad ciphertext length")
            return cls(sender_id=sender_id, epoch=epoch, nonce=nonce, wrapped_key=wrapped, ciphertext=ct)
        except struct.error as exc:
            raise MalformedEnvelopeError("short envelope") from exc

    def _aad(self) -> bytes:
        return struct.pack(">HBII", ENVELOPE_MAGIC, ENVELOPE_VERSION, self.sender_id, self.epoch) + self.nonce


def seal(payload: bytes, recipient_public: rsa.RSAPublicKey, session: SessionKey, sender_id: int) -> SecureEnvelope:
    """Encrypt ``payload`` under the session key and wrap that key for the recipient.

    The envelope header (sender, epoch, nonce) is bound into the AEAD as
    associated data, so flipping any header or ciphertext bit fails
    authentication at :func:`open_envelope`.
    """
    if not payload:
        raise CryptoError("payload must be non-empty")
    nonce = _random_bytes(_NONCE_BYTES)
    env = SecureEnvelope(
        sender_id=sender_id,
        epoch=session.epoch,
        nonce=nonce,
        wrapped_key=recipient_public.encrypt(session.key_bytes, _OAEP),
        ciphertext=b"",
    )
    ct = AESGCM(session.key_bytes).encrypt(nonce, payload, env._aad())
    return SecureEnvelope(sender_id, session.epoch, nonce, env.wrapped_key, ct)


def open_envelope(
    env: SecureEnvelope,
    own_private: rsa.RSAPrivateKey,
    replay_cache: "ReplayCache | None" = None,
) -> bytes:
    """Unwrap the session key, verify integrity, and return the exact payload.

    The replay check runs first and the cache only records envelopes that
    decrypted successfully, so a forged envelope cannot poison the cache.
    """
    if replay_cache is not None:
        replay_cache.check(env)
    try:
        key = own_private.decrypt(env.wrapped_key, _OAEP)
    except Exception as exc:
        raise UnwrapError("cannot unwrap session key") from exc
    if len(key) != SESSION_KEY_BYTES:
        raise UnwrapError("unwrapped key has wrong length")
    try:
        payload = AESGCM(key).decrypt(env.nonce, env.ciphertext, env._aad())
    except Exception as exc:
        raise IntegrityError("envelope failed authentication") from exc
    if replay_cache is not None:
        replay_cache.record(env)
    return payload


class ReplayCache:
    """Per-sender (epoch, nonce) memory bounded to the two most recent epochs.

    Envelopes from epochs older than ``max_seen - 1`` are rejected outright,
    since their nonces have already been evicted. Safe for concurrent use by
    one receiver per peer link.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._seen: dict[int, dict[int, set[bytes]]] = {}

    def check(self, env: SecureEnvelope) -> None:
        with self._lock:
            epochs = self._seen.get(env.sender_id)
            if not epochs:
                return
            newest = max(epochs)
            if env.epoch < newest - 1:
                raise ReplayError(f"stale epoch {env.epoch} from sender {env.sender_id}")
            if env.nonce in epochs.get(env.epoch, ()):
                raise ReplayError(f"replayed nonce from sender {env.sender_id}")

    def record(self, env: SecureEnvelope) -> None:
        with self._lock:
            epochs = self._seen.setdefault(env.sender_id, {})
            epochs.setdefault(env.epoch, set()).add(env.nonce)
            newest = max(epochs)
            for old in [e for e in epochs if e < newest - 1]:
                del epochs[old]


# --- auth tokens -----------------------------------------------------------


def _b64url(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def _unb64url(text: str) -> bytes:
    pad = "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(text + pad)


@dataclass(frozen=True)
class AuthToken:
    """Decoded view of a verified participant token."""

    subject: int
    issued_at: float
    expires_at: float
    claims: dict
    raw: str = field(repr=False)

    def near_expiry(self, now: float, fraction: float = 0.8) -> bool:
        return now >= self.issued_at + fraction * (self.expires_at - self.issued_at)


def issue_token(
    subject: int,
    role: str,
    ttl: float,
    signer: KeyPair,
    now: float,
    permissions: tuple[str, ...] = ("exchange", "report"),
) -> str:
    """Sign a JWT for ``subject`` valid on [now, now + ttl)."""
    if ttl <= 0:
        raise CryptoError("ttl must be positive")
    header = {"alg": "RS256", "typ": "JWT"}
    claims = {
        "sub": int(subject),
        "iat": now,
        "exp": now + ttl,
        "role": role,
        "permissions": list(permissions),
    }
    signing_input = _b64url(json.dumps(header, separators=(",", ":")).encode()) + "." + _b64url(
        json.dumps(claims, separators=(",", ":")).encode()
    )
    sig = signer.private_key.sign(signing_input.encode("ascii"), padding.PKCS1v15(), hashes.SHA256())
    return signing_input + "." + _b64url(sig)


def verify_token(token: str, controller_public: rsa.RSAPublicKey, now: float) -> AuthToken:
    """Validate framing, signature, and lifetime; expiry is strict (now must be < exp)."""
    parts = token.split(".")
    if len(parts) != 3:
        raise TokenRejected("malformed")
    try:
        header = json.loads(_unb64url(parts[0]))
        claims = json.loads(_unb64url(parts[1]))
        sig = _unb64url(parts[2])
        if header.get("alg") != "RS256":
            raise TokenRejected("malformed")
        subject = int(claims["sub"])
        iat = float(claims["iat"])
        exp = float(claims["exp"])
    except TokenRejected:
        raise
    except Exception:
        raise TokenRejected("malformed") from None
    signing_input = (parts[0] + "." + parts[1]).encode("ascii")
    try:
        controller_public.verify(sig, signing_input, padding.PKCS1v15(), hashes.SHA256())
    except InvalidSignature:
        raise TokenRejected("bad-signature") from None
    if now >= exp:
        raise TokenRejected("expired")
    return AuthToken(subject=subject, issued_at=iat, expires_at=exp, claims=claims, raw=token)


# --- key-record certificates ------------------------------------------------
#
# The controller endorses each (node id, public key) binding with a plain
# signed record; there is no chain or revocation machinery.


def sign_key_record(node_id: int, public_pem: bytes, signer: KeyPair) -> str:
    body = _b64url(json.dumps({"node": int(node_id), "key": public_pem.decode("ascii")}).encode())
    sig = signer.private_key.sign(body.encode("ascii"), padding.PKCS1v15(), hashes.SHA256())
    return body + "." + _b64url(sig)


def verify_key_record(record: str, controller_public: rsa.RSAPublicKey) -> tuple[int, bytes]:
    try:
        body, sig = record.split(".")
        controller_public.verify(_unb64url(sig), body.encode("ascii"), padding.PKCS1v15(), hashes.SHA256())
        payload = json.loads(_unb64url(body))
        return int(payload["node"]), payload["key"].encode("ascii")
    except InvalidSignature:
        raise TokenRejected("bad-signature") from None
    except TokenRejected:
        raise
    except Exception:
        raise TokenRejected("malformed") from None
