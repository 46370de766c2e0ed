"""Vetting-authority certificates and tool certifications.

Authorities form a hierarchy much like web PKI: a self-signed root issues
certificates to intermediate authorities, and any authority may sign a
:class:`ToolCertification` asserting that a tool (identified by its signing
key or its enclave measurement) preserves some named properties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

from cdi.attestation import EvidenceVerifier, verify_evidence
from cdi.crypto import (
    Digest,
    Envelope,
    KeyPair,
    PublicKey,
    digest,
    seal,
    verify_quietly,
)
from cdi.errors import CertificateError, CertPathError, DecodeError, MalformedPayload

AUTHORITY_CERT_KIND = "authority-cert"
TOOL_CERT_KIND = "tool-cert"
WILDCARD_VERSION = "*"

# Maximum number of authority certificates between a tool certification and its root.
MAX_PATH_DEPTH = 8


@dataclass(frozen=True)
class Validity:
    not_before: int
    not_after: int

    def __post_init__(self):
        for v in (self.not_before, self.not_after):
            if not isinstance(v, int) or isinstance(v, bool):
                raise CertificateError("validity bounds must be integers")
        if self.not_before >= self.not_after:
            raise CertificateError("not_before must be earlier than not_after")

    def contains(self, t: int) -> bool:
        return self.not_before <= t <= self.not_after

    def to_json(self) -> dict:
        return {"not_before": self.not_before, "not_after": self.not_after}

    @classmethod
    def from_json(cls, doc: Any) -> "Validity":
        if not isinstance(doc, dict) or set(doc) != {"not_before", "not_after"}:
            raise DecodeError("validity must have exactly 'not_before' and 'not_after'")
        try:
            return cls(doc["not_before"], doc["not_after"])
        except CertificateError as exc:
            raise DecodeError(str(exc)) from exc


def _single_signature(envelope: Envelope):
    if len(envelope.signatures) != 1:
        raise MalformedPayload("certificates carry exactly one signature")
    return envelope.signatures[0]


@dataclass(frozen=True)
class AuthorityCertificate:
    subject_name: str
    subject_key: PublicKey
    issuer_keyid: str
    validity: Validity
    envelope: Envelope

    @property
    def subject_keyid(self) -> str:
        return self.subject_key.keyid

    @property
    def self_signed(self) -> bool:
        return self.issuer_keyid == self.subject_keyid

    @property
    def signature(self):
        return _single_signature(self.envelope).signature

    @property
    def digest(self) -> Digest:
        return digest(self.envelope.payload)

    def verify_signature(self, issuer_key: PublicKey) -> bool:
        sig = self.envelope.signatures[0]
        return sig.keyid == self.issuer_keyid == issuer_key.keyid and verify_quietly(
            issuer_key, self.envelope.payload, sig.signature
        )

    @staticmethod
    def record(subject_name: str, subject_key: PublicKey, issuer_keyid: str, validity: Validity) -> dict:
        return {
            "kind": AUTHORITY_CERT_KIND,
            "subject": {"name": subject_name, "public_key": subject_key.to_json()},
            "issuer_keyid": issuer_keyid,
            "validity": validity.to_json(),
        }

    @classmethod
    def from_envelope(cls, envelope: Envelope) -> "AuthorityCertificate":
        doc = envelope.payload_record(AUTHORITY_CERT_KIND)
        _single_signature(envelope)
        try:
            if set(doc) != {"kind", "subject", "issuer_keyid", "validity"}:
                raise DecodeError("unexpected authority certificate fields")
            subject = doc["subject"]
            if not isinstance(subject, dict) or set(subject) != {"name", "public_key"}:
                raise DecodeError("subject must have exactly 'name' and 'public_key'")
            if not isinstance(subject["name"], str) or not isinstance(doc["issuer_keyid"], str):
                raise DecodeError("subject name and issuer keyid must be strings")
            return cls(
                subject["name"],
                PublicKey.from_json(subject["public_key"]),
                doc["issuer_keyid"],
                Validity.from_json(doc["validity"]),
                envelope,
            )
        except DecodeError as exc:
            raise MalformedPayload(str(exc)) from exc

    def to_json(self) -> dict:
        return self.envelope.to_json()

    @classmethod
    def from_json(cls, doc: Any) -> "AuthorityCertificate":
        return cls.from_envelope(Envelope.from_json(doc))


@dataclass(frozen=True)
class ToolCertification:
    tool_id: str
    version_pattern: str
    certified_keyids: tuple
    certified_measurements: tuple
    properties: tuple
    issuer_keyid: str
    validity: Validity
    envelope: Envelope

    @property
    def signature(self):
        return _single_signature(self.envelope).signature

    @property
    def digest(self) -> Digest:
        return digest(self.envelope.payload)

    def matches_tool(self, tool_id: str, version: str) -> bool:
        return self.tool_id == tool_id and self.version_pattern in (WILDCARD_VERSION, version)

    def verify_signature(self, issuer_key: PublicKey) -> bool:
        sig = self.envelope.signatures[0]
        return sig.keyid == self.issuer_keyid == issuer_key.keyid and verify_quietly(
            issuer_key, self.envelope.payload, sig.signature
        )

    @staticmethod
    def record(tool_id, version_pattern, keyids, measurements, properties, issuer_keyid, validity) -> dict:
        return {
            "kind": TOOL_CERT_KIND,
            "tool": {"id": tool_id, "version_pattern": version_pattern},
            "certified_keyids": list(keyids),
            "certified_measurements": [str(m) for m in measurements],
            "properties": list(properties),
            "issuer_keyid": issuer_keyid,
            "validity": validity.to_json(),
        }

    @classmethod
    def from_envelope(cls, envelope: Envelope) -> "ToolCertification":
        doc = envelope.payload_record(TOOL_CERT_KIND)
        _single_signature(envelope)
        try:
            expected = {"kind", "tool", "certified_keyids", "certified_measurements", "properties", "issuer_keyid", "validity"}
            if set(doc) != expected:
                raise DecodeError("unexpected tool certification fields")
            tool = doc["tool"]
            if not isinstance(tool, dict) or set(tool) != {"id", "version_pattern"}:
                raise DecodeError("tool must have exactly 'id' and 'version_pattern'")
            for name in ("certified_keyids", "certified_measurements", "properties"):
                if not isinstance(doc[name], list) or not all(isinstance(x, str) for x in doc[name]):
                    raise DecodeError(f"{name} must be a list of strings")
            if not all(isinstance(x, str) for x in (tool["id"], tool["version_pattern"], doc["issuer_keyid"])):
                raise DecodeError("tool id, version pattern and issuer keyid must be strings")
            cert = cls(
                tool["id"],
                tool["version_pattern"],
                tuple(doc["certified_keyids"]),
                tuple(Digest.parse(m) for m in doc["certified_measurements"]),
                tuple(doc["properties"]),
                doc["issuer_keyid"],
                Validity.from_json(doc["validity"]),
                envelope,
            )
        except DecodeError as exc:
            raise MalformedPayload(str(exc)) from exc
        if not cert.properties or not (cert.certified_keyids or cert.certified_measurements):
            raise MalformedPayload("tool certification must name properties and at least one identity")
        return cert

    def to_json(self) -> dict:
        return self.envelope.to_json()

    @classmethod
    def from_json(cls, doc: Any) -> "ToolCertification":
        return cls.from_envelope(Envelope.from_json(doc))


def _check_issuer(issuer_key: KeyPair, issuer_keyid: Optional[str]) -> str:
    if issuer_keyid is not None and issuer_keyid != issuer_key.keyid:
        raise CertificateError("issuer_keyid does not belong to the issuing key")
    return issuer_key.keyid


def issue_authority_cert(
    issuer_key: KeyPair,
    issuer_keyid: Optional[str],
    subject_name: str,
    subject_pubkey: PublicKey,
    validity: Validity,
) -> AuthorityCertificate:
    """Certify ``subject_pubkey`` as an authority; self-signed when subject is the issuer."""
    issuer_keyid = _check_issuer(issuer_key, issuer_keyid)
    if not isinstance(validity, Validity):
        validity = Validity(*validity)
    record = AuthorityCertificate.record(subject_name, subject_pubkey, issuer_keyid, validity)
    return AuthorityCertificate.from_envelope(seal(record, [issuer_key]))


def issue_tool_certification(
    authority_key: KeyPair,
    authority_keyid: Optional[str],
    tool_id: str,
    version_pattern: str,
    properties: Sequence[str],
    validity: Validity,
    *,
    keyids: Sequence[str] = (),
    measurements: Sequence[Digest] = (),
) -> ToolCertification:
    authority_keyid = _check_issuer(authority_key, authority_keyid)
    if not properties:
        raise CertificateError("a tool certification must assert at least one property")
    if not keyids and not measurements:
        raise CertificateError("a tool certification must name a signing key or an enclave measurement")
    if not isinstance(validity, Validity):
        validity = Validity(*validity)
    record = ToolCertification.record(
        tool_id, version_pattern, keyids, measurements, properties, authority_keyid, validity
    )
    return ToolCertification.from_envelope(seal(record, [authority_key]))


def _ordered(pool: Iterable[AuthorityCertificate]) -> list:
    return sorted(pool, key=lambda c: c.digest)


def verify_cert_path(
    cert: ToolCertification,
    pool: Iterable[AuthorityCertificate],
    trusted_roots: Iterable[str],
    at_time: int,
    max_depth: int = MAX_PATH_DEPTH,
) -> str:
    """Find a chain of trust from ``cert`` to a trusted self-signed root.

    Returns the root keyid. Raises :class:`CertPathError` if none of the
    candidate paths works; the error carries the reason the search got
    furthest with.
    """
    trusted = set(trusted_roots)
    by_subject: dict = {}
    for c in _ordered(pool):
        by_subject.setdefault(c.subject_keyid, []).append(c)

    if not cert.validity.contains(at_time):
        raise CertPathError("validity", "tool certification not valid at evaluation time")
    first = by_subject.get(cert.issuer_keyid)
    if not first:
        raise CertPathError("no-path", f"no certificate for issuer {cert.issuer_keyid[:16]}")
    if not cert.verify_signature(first[0].subject_key):
        raise CertPathError("signature", "tool certification signature does not verify")

    failures: list = []

    def search(c: AuthorityCertificate, depth: int, seen: frozenset) -> Optional[str]:
        if not c.validity.contains(at_time):
            failures.append(CertPathError("validity", f"certificate {c.subject_name!r} not valid at {at_time}"))
            return None
        if c.self_signed:
            if not c.verify_signature(c.subject_key):
                failures.append(CertPathError("signature", f"root {c.subject_name!r} signature does not verify"))
                return None
            if c.subject_keyid not in trusted:
                failures.append(CertPathError("no-path", f"root {c.subject_name!r} is not trusted"))
                return None
            return c.subject_keyid
        if depth >= max_depth:
            failures.append(CertPathError("depth", f"path longer than {max_depth} certificates"))
            return None
        parents = [p for p in by_subject.get(c.issuer_keyid, ()) if p.subject_keyid not in seen]
        if not parents:
            failures.append(CertPathError("no-path", f"no issuer certificate above {c.subject_name!r}"))
            return None
        if not c.verify_signature(parents[0].subject_key):
            failures.append(CertPathError("signature", f"certificate {c.subject_name!r} signature does not verify"))
            return None
        for p in parents:
            root = search(p, depth + 1, seen | {p.subject_keyid})
            if root is not None:
                return root
        return None

    for c in first:
        root = search(c, 1, frozenset({c.subject_keyid}))
        if root is not None:
            return root
    specific = [f for f in failures if f.reason != "no-path"]
    raise (specific or failures or [CertPathError("no-path")])[0]


def certifying_authorities(
    statement,
    property: str,
    certs: Iterable[ToolCertification],
    pool: Sequence[AuthorityCertificate],
    trusted_roots: Iterable[str],
    at_time: int,
    *,
    trusted_platform_keys: Iterable[PublicKey] = (),
    evidence_verifier: EvidenceVerifier = verify_evidence,
) -> frozenset:
    """Distinct authorities vouching that the statement's tool has ``property``.

    Returns a set of ``(issuer keyid, root keyid)`` pairs, one per issuer.
    A certification may cover the tool by signing keyid or, when the
    statement carries evidence that verifies under ``trusted_platform_keys``,
    by enclave measurement.
    """
    stmt = statement.try_payload()
    if stmt is None:
        return frozenset()
    measurement = None
    platform_keys = list(trusted_platform_keys)
    signer = statement.signing_key()
    if platform_keys and signer is not None:
        try:
            evidence = statement.attestation
        except MalformedPayload:
            evidence = None
        if evidence is not None and evidence_verifier(evidence, (), platform_keys, signer):
            measurement = evidence.measurement

    roots = set(trusted_roots)
    found: dict = {}
    for cert in sorted(certs, key=lambda c: c.digest):
        if cert.issuer_keyid in found:
            continue
        if not cert.matches_tool(stmt.tool.id, stmt.tool.version) or property not in cert.properties:
            continue
        covered = stmt.tool.keyid in cert.certified_keyids or (
            measurement is not None and measurement in cert.certified_measurements
        )
        if not covered:
            continue
        try:
            found[cert.issuer_keyid] = verify_cert_path(cert, pool, roots, at_time)
        except CertPathError:
            continue
    return frozenset(found.items())
