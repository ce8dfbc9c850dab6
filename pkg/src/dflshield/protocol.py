"""Frame body schemas shared by nodes and the controller.

Bodies are JSON except for the tiny binary channel-reconnect hello. Under
the encrypted settings every body here rides inside a SecureEnvelope; the
schemas below describe the plaintext.
"""

from __future__ import annotations

import hashlib
import json
import struct

from .model import ModelParams, params_from_bytes, params_to_bytes

CONTROLLER_ID = 0xFFFFFFFF
ATTACKER_ID_BASE = 4_000_000_000

RECONNECT_PREFIX = b"RECON"
MODEL_PAYLOAD_MAGIC = b"MX"


def encode_model_payload(sender_id: int, round_index: int, params: ModelParams) -> bytes:
    """Model-exchange body: sender, round, then the public parameter blob."""
    return MODEL_PAYLOAD_MAGIC + struct.pack(">II", sender_id, round_index) + params_to_bytes(params)


def decode_model_payload(body: bytes) -> tuple[int, int, ModelParams]:
    if len(body) < 10 or body[:2] != MODEL_PAYLOAD_MAGIC:
        raise ValueError("not a model payload")
    sender, round_index = struct.unpack(">II", body[2:10])
    return sender, round_index, params_from_bytes(body[10:])


def derive_credential(scenario_name: str, seed: int, node_id: int) -> str:
    """Per-node join secret provisioned out of band with the scenario."""
    return hashlib.sha256(f"{scenario_name}:{seed}:{node_id}".encode()).hexdigest()


def encode_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def decode_json(body: bytes) -> dict:
    return json.loads(body.decode())


def auth_request(node_id: int, credential: str, public_pem: bytes | None, renew: bool = False) -> bytes:
    return encode_json(
        {
            "type": "auth",
            "node": node_id,
            "credential": credential,
            "public_key": public_pem.decode("ascii") if public_pem else "",
            "renew": renew,
        }
    )


def auth_granted(token: str) -> bytes:
    return encode_json({"type": "auth-ok", "token": token})


def auth_denied(reason: str) -> bytes:
    return encode_json({"type": "auth-denied", "reason": reason})


def start_bundle(
    node_id: int,
    role: str,
    neighbors: list[int],
    addresses: dict[int, str],
    peer_keys: dict[int, str],
    key_certs: dict[int, str],
    controller_key: str,
    bundle_epoch: int,
) -> bytes:
    return encode_json(
        {
            "type": "start",
            "node": node_id,
            "role": role,
            "neighbors": neighbors,
            "addresses": {str(k): v for k, v in addresses.items()},
            "peer_keys": {str(k): v for k, v in peer_keys.items()},
            "key_certs": {str(k): v for k, v in key_certs.items()},
            "controller_key": controller_key,
            "bundle_epoch": bundle_epoch,
        }
    )


def metrics_report(
    node_id: int, round_index: int, f1: float, loss: float, bytes_sent: int, bytes_recv: int, active_ms: float
) -> bytes:
    # Schema is fixed: {node_id, round, f1, loss, bytes_sent, bytes_recv, active_ms}.
    return encode_json(
        {
            "node_id": node_id,
            "round": round_index,
            "f1": f1,
            "loss": loss,
            "bytes_sent": bytes_sent,
            "bytes_recv": bytes_recv,
            "active_ms": active_ms,
        }
    )


def done_report(node_id: int, records: list[dict], events: dict[str, int]) -> bytes:
    return encode_json({"type": "done", "node": node_id, "records": records, "events": events})


def rekey_request(bundle_epoch: int) -> bytes:
    return encode_json({"type": "rekey", "bundle_epoch": bundle_epoch})


def pubkey_update(node_id: int, public_pem: bytes) -> bytes:
    return encode_json({"type": "pubkey", "node": node_id, "public_key": public_pem.decode("ascii")})


def bundle_update(peer_keys: dict[int, str], key_certs: dict[int, str], bundle_epoch: int) -> bytes:
    return encode_json(
        {
            "type": "bundle",
            "peer_keys": {str(k): v for k, v in peer_keys.items()},
            "key_certs": {str(k): v for k, v in key_certs.items()},
            "bundle_epoch": bundle_epoch,
        }
    )


def reconnect_hello(node_id: int, address_epoch: int) -> bytes:
    return RECONNECT_PREFIX + struct.pack(">II", node_id, address_epoch)


def parse_reconnect(body: bytes) -> tuple[int, int]:
    if not body.startswith(RECONNECT_PREFIX) or len(body) != len(RECONNECT_PREFIX) + 8:
        raise ValueError("not a reconnect hello")
    node_id, epoch = struct.unpack(">II", body[len(RECONNECT_PREFIX) :])
    return node_id, epoch
