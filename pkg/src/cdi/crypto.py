"""Hashing, Ed25519 signatures and canonical JSON.

Everything that gets signed or digested in cdi goes through
:func:`canonicalize` first, so that two parties holding the same logical
record always hash and sign the same bytes.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Any, Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from cdi.errors import CanonicalizationError, DecodeError, MalformedPayload

HASH_ALGORITHM = "sha256"
SIGNATURE_SCHEME = "ed25519"
SEED_LENGTH = 32
SIGNATURE_LENGTH = 64
PUBLIC_KEY_LENGTH = 32

_HEX64 = re.compile(r"[0-9a-f]{64}")


@dataclass(frozen=True, order=True)
class Digest:
    """Content address of a byte string, rendered as ``sha256:<hex>``."""

    hex: str
    algorithm: str = HASH_ALGORITHM

    def __post_init__(self):
        if self.algorithm != HASH_ALGORITHM:
            raise DecodeError(f"unsupported digest algorithm {self.algorithm!r}")
        if not isinstance(self.hex, str) or not _HEX64.fullmatch(self.hex):
            raise DecodeError(f"digest must be 64 lowercase hex characters, got {self.hex!r}")

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.hex}"

    @classmethod
    def parse(cls, text: str) -> "Digest":
        if not isinstance(text, str):
            raise DecodeError(f"digest must be a string, got {type(text).__name__}")
        algorithm, sep, hexpart = text.partition(":")
        if not sep:
            raise DecodeError(f"digest {text!r} lacks an algorithm prefix")
        return cls(hex=hexpart, algorithm=algorithm)


def digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).hexdigest())


def digest_file(path: "os.PathLike[str] | str", chunk_size: int = 1 << 16) -> Digest:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            h.update(chunk)
    return Digest(h.hexdigest())


# -- canonical JSON ----------------------------------------------------------


def _check_canonicalizable(value: Any, path: str = "$") -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise CanonicalizationError(f"floating-point value at {path} is not allowed")
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"non-string key {key!r} at {path}")
            _check_canonicalizable(item, f"{path}.{key}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_canonicalizable(item, f"{path}[{i}]")
        return
    raise CanonicalizationError(f"unsupported value of type {type(value).__name__} at {path}")


def canonicalize(value: Any) -> bytes:
    """Serialize ``value`` to canonical JSON bytes.

    Keys are sorted by code point, there is no insignificant whitespace,
    strings are emitted as UTF-8 and integers in minimal form. Floats are
    rejected outright rather than risking platform-dependent rendering.
    """
    _check_canonicalizable(value)
    text = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:  # lone surrogates
        raise CanonicalizationError(str(exc)) from exc


def _reject_float(text: str):
    raise DecodeError(f"floating-point literal {text!r} not allowed")


def _reject_constant(text: str):
    raise DecodeError(f"non-finite literal {text!r} not allowed")


def _unique_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DecodeError(f"duplicate key {key!r}")
        out[key] = value
    return out


def loads(data: "bytes | str") -> Any:
    """Parse JSON with the canonical value model (no floats, no duplicate keys)."""
    try:
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return json.loads(
            data,
            parse_float=_reject_float,
            parse_constant=_reject_constant,
            object_pairs_hook=_unique_keys,
        )
    except UnicodeDecodeError as exc:
        raise DecodeError(f"invalid UTF-8: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DecodeError(f"invalid JSON: {exc}") from exc
    except RecursionError as exc:
        raise DecodeError("JSON nested too deeply") from exc


def loads_canonical(data: bytes) -> Any:
    """Parse ``data`` and insist it was already in canonical form."""
    value = loads(data)
    if canonicalize(value) != data:
        raise DecodeError("bytes are not in canonical form")
    return value


# -- keys and signatures -----------------------------------------------------


def _unhex(text: Any, what: str) -> bytes:
    if not isinstance(text, str):
        raise DecodeError(f"{what} must be a hex string")
    try:
        return bytes.fromhex(text)
    except ValueError as exc:
        raise DecodeError(f"{what} is not valid hex") from exc


@dataclass(frozen=True)
class PublicKey:
    bytes: bytes
    scheme: str = SIGNATURE_SCHEME

    def to_json(self) -> dict:
        return {"scheme": self.scheme, "public": self.bytes.hex()}

    @classmethod
    def from_json(cls, doc: Any) -> "PublicKey":
        if not isinstance(doc, dict) or set(doc) != {"scheme", "public"}:
            raise DecodeError("public key must be a record with exactly 'scheme' and 'public'")
        if doc["scheme"] != SIGNATURE_SCHEME:
            raise DecodeError(f"unsupported key scheme {doc['scheme']!r}")
        return cls(_unhex(doc["public"], "public key"), doc["scheme"])

    @cached_property
    def keyid(self) -> str:
        """Hex SHA-256 of the canonical key record; independent of how the key was built."""
        return digest(canonicalize(self.to_json())).hex


def keyid(public: PublicKey) -> str:
    return public.keyid


@dataclass(frozen=True)
class Signature:
    bytes: bytes

    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def from_hex(cls, text: Any) -> "Signature":
        return cls(_unhex(text, "signature"))


@dataclass(frozen=True)
class KeyPair:
    private: bytes = field(repr=False)
    public: PublicKey
    _key: Ed25519PrivateKey = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if self._key is None:
            object.__setattr__(self, "_key", Ed25519PrivateKey.from_private_bytes(self.private))

    @property
    def keyid(self) -> str:
        return self.public.keyid

    def to_json(self) -> dict:
        return {**self.public.to_json(), "private": self.private.hex()}

    @classmethod
    def from_json(cls, doc: Any) -> "KeyPair":
        if not isinstance(doc, dict) or set(doc) != {"scheme", "public", "private"}:
            raise DecodeError("private key file must have exactly 'scheme', 'public', 'private'")
        pair = generate_keypair(_unhex(doc["private"], "private key"))
        if pair.public != PublicKey.from_json({"scheme": doc["scheme"], "public": doc["public"]}):
            raise DecodeError("private key does not match the recorded public key")
        return pair


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """Create an Ed25519 key pair, deterministically when ``seed`` is given."""
    if seed is None:
        seed = os.urandom(SEED_LENGTH)
    elif not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_LENGTH:
        raise DecodeError(f"seed must be exactly {SEED_LENGTH} bytes")
    seed = bytes(seed)
    key = Ed25519PrivateKey.from_private_bytes(seed)
    raw = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return KeyPair(seed, PublicKey(raw), key)


def sign(key: KeyPair, payload: bytes) -> Signature:
    return Signature(key._key.sign(payload))


def verify(pubkey: PublicKey, payload: bytes, sig: Signature) -> bool:
    """Check ``sig`` over ``payload``.

    Returns False for a well-formed signature that does not verify. Raises
    :class:`DecodeError` when the key or signature bytes cannot even be
    interpreted, so callers can tell garbage from forgery.
    """
    if pubkey.scheme != SIGNATURE_SCHEME:
        raise DecodeError(f"unsupported key scheme {pubkey.scheme!r}")
    if len(pubkey.bytes) != PUBLIC_KEY_LENGTH:
        raise DecodeError(f"public key must be {PUBLIC_KEY_LENGTH} bytes, got {len(pubkey.bytes)}")
    if len(sig.bytes) != SIGNATURE_LENGTH:
        raise DecodeError(f"signature must be {SIGNATURE_LENGTH} bytes, got {len(sig.bytes)}")
    return _ed25519_verify(pubkey.bytes, bytes(payload), sig.bytes)


# Pure function of its arguments; bundles re-check the same certificates for every statement.
@lru_cache(maxsize=8192)
def _ed25519_verify(public: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        key = Ed25519PublicKey.from_public_bytes(public)
    except ValueError as exc:
        raise DecodeError(f"invalid public key: {exc}") from exc
    try:
        key.verify(signature, payload)
    except InvalidSignature:
        return False
    return True


def verify_quietly(pubkey: PublicKey, payload: bytes, sig: Signature) -> bool:
    """Like :func:`verify` but undecodable material simply counts as a failure."""
    try:
        return verify(pubkey, payload, sig)
    except DecodeError:
        return False


# -- signing envelope --------------------------------------------------------


def encode_payload(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def decode_payload(text: Any) -> bytes:
    if not isinstance(text, str):
        raise DecodeError("payload must be a base64 string")
    try:
        data = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise DecodeError(f"payload is not valid base64: {exc}") from exc
    # one byte string, one encoding
    if encode_payload(data) != text:
        raise DecodeError("payload base64 is not in canonical form")
    return data


@dataclass(frozen=True)
class EnvelopeSignature:
    keyid: str
    signature: Signature
    public_key: Optional[PublicKey] = None

    def to_json(self) -> dict:
        doc = {"keyid": self.keyid, "signature": self.signature.hex()}
        if self.public_key is not None:
            doc["public_key"] = self.public_key.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: Any) -> "EnvelopeSignature":
        if not isinstance(doc, dict) or not {"keyid", "signature"} <= set(doc) <= {"keyid", "signature", "public_key"}:
            raise DecodeError("signature entry must have 'keyid', 'signature' and optionally 'public_key'")
        if not isinstance(doc["keyid"], str):
            raise DecodeError("keyid must be a string")
        public = PublicKey.from_json(doc["public_key"]) if "public_key" in doc else None
        return cls(doc["keyid"], Signature.from_hex(doc["signature"]), public)


@dataclass(frozen=True)
class Envelope:
    """Canonical payload bytes plus the signatures made over exactly those bytes.

    The payload travels base64-encoded so that a verifier checks signatures
    against the bytes that were signed, never against a re-serialization.
    """

    payload: bytes
    signatures: tuple = ()

    def to_json(self) -> dict:
        return {
            "payload": encode_payload(self.payload),
            "signatures": [s.to_json() for s in self.signatures],
        }

    @classmethod
    def from_json(cls, doc: Any) -> "Envelope":
        if not isinstance(doc, dict) or set(doc) != {"payload", "signatures"}:
            raise DecodeError("envelope must have exactly 'payload' and 'signatures'")
        if not isinstance(doc["signatures"], list):
            raise DecodeError("envelope signatures must be a list")
        return cls(decode_payload(doc["payload"]), tuple(EnvelopeSignature.from_json(s) for s in doc["signatures"]))

    def payload_record(self, kind: str) -> dict:
        """Decode the payload as a canonical record of the given ``kind``."""
        try:
            record = loads_canonical(self.payload)
        except DecodeError as exc:
            raise MalformedPayload(str(exc)) from exc
        if not isinstance(record, dict):
            raise MalformedPayload("payload is not a record")
        if record.get("kind") != kind:
            raise MalformedPayload(f"expected payload kind {kind!r}, got {record.get('kind')!r}")
        return record


def seal(record: dict, keys: Iterable[KeyPair], *, embed_public: bool = False) -> Envelope:
    payload = canonicalize(record)
    sigs = [
        EnvelopeSignature(k.keyid, sign(k, payload), k.public if embed_public else None)
        for k in keys
    ]
    sigs.sort(key=lambda s: s.keyid)
    return Envelope(payload, tuple(sigs))
