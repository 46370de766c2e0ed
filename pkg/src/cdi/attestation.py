"""Simulated enclave key derivation and attestation evidence.

A real TEE quote binds a freshly generated key to the code that generated
it by placing a hash of the key in the quote's user data. This module keeps
that shape with a plain signed record: the "platform" signs the enclave
measurement together with the digest of the enclave-derived public key.

Verification goes through :class:`EvidenceVerifier`, so a verifier for real
quotes can be dropped in without touching the policy engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Optional, Protocol, Tuple

from cdi.crypto import (
    Digest,
    Envelope,
    KeyPair,
    PublicKey,
    canonicalize,
    digest,
    generate_keypair,
    seal,
    verify_quietly,
)
from cdi.errors import DecodeError, MalformedPayload

EVIDENCE_KIND = "evidence"

EnclaveMeasurement = Digest


def enclave_measurement(tool_id: str, tool_version: str, code_digest: Digest) -> EnclaveMeasurement:
    return digest(canonicalize({
        "tool_id": tool_id,
        "tool_version": tool_version,
        "code_digest": str(code_digest),
    }))


def key_report_data(public: PublicKey) -> Digest:
    return digest(canonicalize(public.to_json()))


@dataclass(frozen=True)
class AttestationEvidence:
    measurement: EnclaveMeasurement
    platform_id: str
    bound_keyid: str
    report_data: Digest
    envelope: Envelope

    kind = EVIDENCE_KIND

    @staticmethod
    def record(measurement: Digest, platform_id: str, bound_keyid: str, report_data: Digest) -> dict:
        return {
            "kind": EVIDENCE_KIND,
            "measurement": str(measurement),
            "platform_id": platform_id,
            "bound_keyid": bound_keyid,
            "report_data": str(report_data),
        }

    @classmethod
    def from_envelope(cls, envelope: Envelope) -> "AttestationEvidence":
        doc = envelope.payload_record(EVIDENCE_KIND)
        keys = {"kind", "measurement", "platform_id", "bound_keyid", "report_data"}
        if set(doc) != keys:
            raise MalformedPayload(f"evidence must have keys {sorted(keys)}")
        if len(envelope.signatures) != 1:
            raise MalformedPayload("evidence must carry exactly one platform signature")
        if not isinstance(doc["platform_id"], str) or not isinstance(doc["bound_keyid"], str):
            raise MalformedPayload("platform_id and bound_keyid must be strings")
        try:
            return cls(
                Digest.parse(doc["measurement"]),
                doc["platform_id"],
                doc["bound_keyid"],
                Digest.parse(doc["report_data"]),
                envelope,
            )
        except DecodeError as exc:
            raise MalformedPayload(str(exc)) from exc

    @property
    def signature(self):
        return self.envelope.signatures[0].signature

    def to_json(self) -> dict:
        return self.envelope.to_json()

    @classmethod
    def from_json(cls, doc: Any) -> "AttestationEvidence":
        return cls.from_envelope(Envelope.from_json(doc))


def simulate_enclave_keygen(
    measurement: EnclaveMeasurement,
    platform_key: KeyPair,
    platform_id: str,
    seed: Optional[bytes] = None,
) -> Tuple[KeyPair, AttestationEvidence]:
    """Derive a signing key "inside" an enclave and have the platform vouch for it."""
    key = generate_keypair(seed)
    record = AttestationEvidence.record(measurement, platform_id, key.keyid, key_report_data(key.public))
    env = seal(record, [platform_key])
    return key, AttestationEvidence.from_envelope(env)


@dataclass(frozen=True)
class EvidenceResult:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_evidence(
    evidence: AttestationEvidence,
    expected_measurements: Iterable[EnclaveMeasurement],
    trusted_platform_keys: Iterable[PublicKey],
    bound_key: PublicKey,
) -> EvidenceResult:
    """Pass iff a trusted platform signed the evidence, the measurement is
    expected (an empty expectation set accepts any) and the evidence binds
    exactly ``bound_key``.
    """
    sig = evidence.envelope.signatures[0] if evidence.envelope.signatures else None
    if sig is None or not any(
        verify_quietly(pk, evidence.envelope.payload, sig.signature) for pk in trusted_platform_keys
    ):
        return EvidenceResult(False, "untrusted platform")
    expected = set(expected_measurements)
    if expected and evidence.measurement not in expected:
        return EvidenceResult(False, "measurement mismatch")
    if evidence.report_data != key_report_data(bound_key) or evidence.bound_keyid != bound_key.keyid:
        return EvidenceResult(False, "key binding mismatch")
    return EvidenceResult(True)


class EvidenceVerifier(Protocol):
    def __call__(
        self,
        evidence: AttestationEvidence,
        expected_measurements: Iterable[EnclaveMeasurement],
        trusted_platform_keys: Iterable[PublicKey],
        bound_key: PublicKey,
    ) -> EvidenceResult: ...


simulated_verifier: EvidenceVerifier = verify_evidence
