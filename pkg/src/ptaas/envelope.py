"""Authenticated-encryption envelopes, canonical payload encoding, key registry.

Frame layout (all integers big-endian)::

    offset  size  field
    0       4     magic  b"PTAS"
    4       1     version (0x01)
    5       1     msg_type (0x01 QUERY, 0x02 MODEL_RESPONSE, 0x03 REJECT)
    6       16    device_id (cleartext, for routing)
    22      12    nonce = 4-byte session salt || 8-byte counter
    34      4     payload_len
    38      n     AES-256-GCM ciphertext || 16-byte tag

Bytes 0..33 (everything before ``payload_len``) are bound as associated data.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import IntegrityFailure, MalformedFrame, NonceReuse, SchemaError, UnknownDevice

MAGIC = b"PTAS"
VERSION = 0x01
QUERY = 0x01
MODEL_RESPONSE = 0x02
REJECT = 0x03
MSG_TYPES = {QUERY: "QUERY", MODEL_RESPONSE: "MODEL_RESPONSE", REJECT: "REJECT"}

DEVICE_ID_LEN = 16
KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

_HEADER = struct.Struct(">4sBB16s12sI")
HEADER_LEN = _HEADER.size  # 38
AAD_LEN = HEADER_LEN - 4

REJECT_CODES = ("BUDGET_EXHAUSTED", "VERIFY_FAILED", "INTERNAL")


@dataclass(frozen=True)
class SealedEnvelope:
    msg_type: int
    device_id: bytes
    nonce: bytes
    ciphertext: bytes
    magic: bytes = MAGIC
    version: int = VERSION

    @property
    def payload_len(self) -> int:
        return len(self.ciphertext)

    def header(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.msg_type, self.device_id,
                            self.nonce, self.payload_len)

    def associated_data(self) -> bytes:
        return self.header()[:AAD_LEN]

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, frame: bytes) -> "SealedEnvelope":
        if len(frame) < HEADER_LEN:
            raise MalformedFrame(f"frame shorter than {HEADER_LEN}-byte header")
        magic, version, msg_type, device_id, nonce, n = _HEADER.unpack_from(frame)
        if magic != MAGIC:
            raise MalformedFrame("bad magic")
        if version != VERSION:
            raise MalformedFrame(f"unsupported version {version}")
        if msg_type not in MSG_TYPES:
            raise MalformedFrame(f"unknown msg_type {msg_type:#x}")
        if len(frame) != HEADER_LEN + n:
            raise MalformedFrame(f"payload_len {n} but {len(frame) - HEADER_LEN} bytes present")
        if n < TAG_LEN:
            raise MalformedFrame("payload shorter than authentication tag")
        return cls(msg_type=msg_type, device_id=device_id, nonce=nonce,
                   ciphertext=bytes(frame[HEADER_LEN:]), magic=magic, version=version)


class NonceCounter:
    """Nonce source ``salt || counter`` that refuses to hand out a nonce twice.

    Device sessions use salts with the top bit clear and servers use salts
    with the top bit set, so both directions under one key never collide.
    """

    def __init__(self, salt: bytes | None = None, role: str = "device", start: int = 0):
        if salt is None:
            salt = bytearray(os.urandom(4))
            if role == "server":
                salt[0] |= 0x80
            else:
                salt[0] &= 0x7F
            salt = bytes(salt)
        if len(salt) != 4:
            raise ValueError("salt must be 4 bytes")
        self.salt = salt
        self._counter = start
        self._used: set[bytes] = set()
        self._lock = threading.Lock()

    @property
    def counter(self) -> int:
        return self._counter

    def next_nonce(self) -> bytes:
        with self._lock:
            nonce = self.salt + self._counter.to_bytes(8, "big")
            self._counter += 1
            self._used.add(nonce)
            return nonce

    def claim(self, nonce: bytes) -> None:
        """Register an externally chosen nonce; raise NonceReuse if seen before."""
        with self._lock:
            if nonce in self._used:
                raise NonceReuse(f"nonce {nonce.hex()} already used")
            self._used.add(nonce)


def seal(plaintext: bytes, key: bytes, nonce: bytes, msg_type: int, device_id: bytes,
         guard: NonceCounter | None = None) -> SealedEnvelope:
    """Encrypt and authenticate ``plaintext`` into an envelope.

    When ``guard`` is given the nonce is claimed against it first, so a reused
    nonce raises :class:`NonceReuse` before any ciphertext is produced.
    """
    if len(key) != KEY_LEN:
        raise ValueError("key must be 32 bytes")
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 12 bytes")
    if len(device_id) != DEVICE_ID_LEN:
        raise ValueError("device_id must be 16 bytes")
    if msg_type not in MSG_TYPES:
        raise ValueError(f"unknown msg_type {msg_type}")
    if guard is not None:
        guard.claim(nonce)
    # ciphertext length is plaintext + tag; needed in the header but not in AAD
    shell = SealedEnvelope(msg_type, device_id, nonce, b"")
    ct = AESGCM(key).encrypt(nonce, bytes(plaintext), shell.associated_data())
    return SealedEnvelope(msg_type, device_id, nonce, ct)


def open_envelope(env: SealedEnvelope | bytes, registry: "KeyRegistry") -> tuple[int, bytes]:
    """Verify and decrypt an envelope with the key registered for its device."""
    if not isinstance(env, SealedEnvelope):
        env = SealedEnvelope.from_bytes(env)
    if env.magic != MAGIC or env.version != VERSION:
        raise MalformedFrame("bad magic or version")
    key = registry.key_for(env.device_id)
    return env.msg_type, open_with_key(env, key)


def open_with_key(env: SealedEnvelope, key: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(env.nonce, env.ciphertext, env.associated_data())
    except InvalidTag:
        raise IntegrityFailure("authentication tag mismatch") from None


def open_from_peer(frame: bytes, key: bytes, device_id: bytes,
                   allowed_types: tuple[int, ...] = tuple(MSG_TYPES)) -> tuple[int, bytes]:
    """Open a frame whose sender and key are known in advance.

    Any damage, whether to framing, routing id, message type or ciphertext,
    is reported as :class:`IntegrityFailure`: the receiver was expecting an
    authentic frame from this peer and did not get one.
    """
    try:
        env = SealedEnvelope.from_bytes(frame)
    except MalformedFrame as exc:
        raise IntegrityFailure(f"frame damaged: {exc}") from None
    if env.device_id != device_id:
        raise IntegrityFailure("frame not addressed to this device")
    if env.msg_type not in allowed_types:
        raise IntegrityFailure(f"unexpected msg_type {env.msg_type:#x}")
    return env.msg_type, open_with_key(env, key)


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --------------------------------------------------------------------------
# key registry

@dataclass(frozen=True)
class DeviceKeyRecord:
    device_id: bytes
    key: bytes
    created_at: datetime

    def __repr__(self):
        return f"DeviceKeyRecord(device_id={self.device_id.hex()}, key=<redacted>)"


class KeyRegistry:
    """Pre-shared device keys. File format: ``device_hex key_hex created_at`` per line."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._records: dict[bytes, DeviceKeyRecord] = {}
        self._write_lock = threading.Lock()
        self._mtime: float | None = None
        if self.path is not None and self.path.exists():
            self.reload()

    def reload(self) -> None:
        self._mtime = self.path.stat().st_mtime_ns
        records = {}
        for lineno, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                dev_hex, key_hex, created = line.split()
                rec = DeviceKeyRecord(bytes.fromhex(dev_hex), bytes.fromhex(key_hex),
                                      datetime.fromisoformat(created))
            except ValueError as exc:
                raise ValueError(f"registry line {lineno}: {exc}") from exc
            if len(rec.device_id) != DEVICE_ID_LEN or len(rec.key) != KEY_LEN:
                raise ValueError(f"registry line {lineno}: bad id/key length")
            records[rec.device_id] = rec
        self._records = records

    def __contains__(self, device_id: bytes) -> bool:
        return device_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def _refresh_if_changed(self) -> None:
        # devices provisioned out-of-band after startup
        if self.path is None or not self.path.exists():
            return
        if self.path.stat().st_mtime_ns != self._mtime:
            with self._write_lock:
                self.reload()

    def key_for(self, device_id: bytes) -> bytes:
        rec = self._records.get(device_id)
        if rec is None:
            self._refresh_if_changed()
            rec = self._records.get(device_id)
        if rec is None:
            raise UnknownDevice(f"device {device_id.hex()} not registered")
        return rec.key

    def register(self, device_id: bytes | None = None, key: bytes | None = None) -> DeviceKeyRecord:
        device_id = device_id or os.urandom(DEVICE_ID_LEN)
        key = key or AESGCM.generate_key(bit_length=256)
        with self._write_lock:
            if device_id in self._records:
                raise ValueError(f"device {device_id.hex()} already registered")
            rec = DeviceKeyRecord(device_id, key, datetime.now(timezone.utc))
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(f"{device_id.hex()} {key.hex()} {rec.created_at.isoformat()}\n")
            # copy-on-write keeps concurrent readers lock-free
            self._records = {**self._records, device_id: rec}
        return rec


# --------------------------------------------------------------------------
# canonical payloads

_number = {"type": "number"}
_uint = {"type": "integer", "minimum": 0}

QUERY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["sketch_kind", "sketch", "dp", "metadata", "model_spec", "train"],
    "properties": {
        "sketch_kind": {"enum": ["minhash", "simhash"]},
        "sketch": {"type": "string", "contentEncoding": "base64"},
        "dp": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mechanism", "epsilon", "delta", "sensitivity", "placement"],
            "properties": {
                "mechanism": {"enum": ["laplace", "gaussian", "randomized_response"]},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "sensitivity": {"type": "number", "exclusiveMinimum": 0},
                "placement": {"enum": ["post_hash", "pre_quantization"]},
            },
        },
        "metadata": {
            "type": "object",
            "additionalProperties": False,
            "required": ["task", "num_classes", "label_hints"],
            "properties": {
                "task": {"const": "classify"},
                "num_classes": {"type": "integer", "minimum": 1},
                "label_hints": {"type": "array", "items": _uint},
            },
        },
        "model_spec": {
            "type": "object",
            "additionalProperties": False,
            "required": ["arch", "input_dim", "hidden", "num_classes"],
            "properties": {
                "arch": {"enum": ["logreg", "mlp1"]},
                "input_dim": {"type": "integer", "minimum": 1},
                "hidden": _uint,
                "num_classes": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["k_retrieve", "epochs", "learning_rate", "seed"],
            "properties": {
                "k_retrieve": {"type": "integer", "minimum": 1},
                "epochs": _uint,
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
            },
        },
    },
}

MODEL_RESPONSE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "model_digest", "metrics", "epsilon_spent"],
    "properties": {
        "model": {"type": "string"},
        "model_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "required": ["train_loss", "samples_used"],
            "properties": {"train_loss": _number, "samples_used": _uint},
        },
        "epsilon_spent": {"type": "number", "minimum": 0},
    },
}

REJECT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["code", "detail"],
    "properties": {
        "code": {"enum": list(REJECT_CODES)},
        "detail": {"type": "string"},
    },
}

SCHEMAS = {QUERY: QUERY_SCHEMA, MODEL_RESPONSE: MODEL_RESPONSE_SCHEMA, REJECT: REJECT_SCHEMA}


def validate(message: dict, msg_type: int) -> None:
    try:
        jsonschema.validate(message, SCHEMAS[msg_type])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{MSG_TYPES[msg_type]} {where}: {exc.message}") from None
    for b64_field in ("sketch", "model"):
        if b64_field in message and msg_type in (QUERY, MODEL_RESPONSE):
            try:
                base64.b64decode(message[b64_field], validate=True)
            except ValueError:
                raise SchemaError(f"{b64_field} is not valid base64") from None


def canonical_serialize(message: dict, msg_type: int | None = None) -> bytes:
    """Deterministic UTF-8 JSON: sorted keys, no whitespace, shortest floats."""
    if msg_type is not None:
        validate(message, msg_type)
    try:
        text = json.dumps(message, sort_keys=True, separators=(",", ":"),
                          ensure_ascii=False, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None
    return text.encode("utf-8")


def parse_canonical(data: bytes, msg_type: int | None = None) -> dict:
    try:
        message = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"payload is not valid JSON: {exc}") from None
    if not isinstance(message, dict):
        raise SchemaError("payload must be a JSON object")
    if msg_type is not None:
        validate(message, msg_type)
    return message


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    return base64.b64decode(text, validate=True)
