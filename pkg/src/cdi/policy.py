"""Trust policies, deployment bundles and bundle validation.

A principal's :class:`TrustPolicy` names the roots it trusts, how many
independent authorities must vouch for each property, and whether tools must
run in (simulated) enclaves. :func:`validate_bundle` checks a bundle against
one policy using nothing but the bundle's own contents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from cdi.attestation import EvidenceVerifier, verify_evidence
from cdi.crypto import Envelope, PublicKey, canonicalize
from cdi.errors import (
    AmbiguousTerminalError,
    BundleError,
    ChainError,
    DecodeError,
    DuplicateStatementError,
    MalformedPayload,
    NoTerminalError,
    PolicyError,
)
from cdi.provenance import (
    OPERATION_TYPES,
    ArtifactRef,
    SignedStatement,
    Violation,
    integrity_violations,
    link_chain,
    statement_digest,
    verify_chain_integrity,
)
from cdi.vetting import AuthorityCertificate, ToolCertification, certifying_authorities


@dataclass(frozen=True)
class PropertyRequirement:
    property: str
    threshold: int
    applies_to: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.property, str) or not self.property:
            raise PolicyError("requirement property must be a non-empty string")
        if not isinstance(self.threshold, int) or isinstance(self.threshold, bool) or self.threshold < 1:
            raise PolicyError("requirement threshold must be an integer >= 1")
        if self.applies_to is not None and self.applies_to not in OPERATION_TYPES:
            raise PolicyError(f"applies_to must be one of {OPERATION_TYPES}")

    def applies(self, operation_type: str) -> bool:
        return self.applies_to is None or self.applies_to == operation_type

    def to_json(self) -> dict:
        doc = {"property": self.property, "threshold": self.threshold}
        if self.applies_to is not None:
            doc["applies_to"] = self.applies_to
        return doc

    @classmethod
    def from_json(cls, doc: Any) -> "PropertyRequirement":
        if not isinstance(doc, dict) or not {"property", "threshold"} <= set(doc) <= {"property", "threshold", "applies_to"}:
            raise PolicyError("requirement must have 'property', 'threshold' and optionally 'applies_to'")
        return cls(doc["property"], doc["threshold"], doc.get("applies_to"))


@dataclass(frozen=True)
class TrustPolicy:
    trusted_roots: frozenset
    requirements: tuple
    evaluation_time: int
    require_tee: bool = False
    trusted_platform_keys: tuple = ()
    allow_origin_inputs: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trusted_roots", frozenset(self.trusted_roots))
        object.__setattr__(self, "requirements", tuple(self.requirements))
        object.__setattr__(self, "trusted_platform_keys", tuple(self.trusted_platform_keys))
        if not self.trusted_roots:
            raise PolicyError("a policy must trust at least one root")
        if not all(isinstance(r, str) for r in self.trusted_roots):
            raise PolicyError("trusted roots are keyid strings")
        if not isinstance(self.evaluation_time, int) or isinstance(self.evaluation_time, bool):
            raise PolicyError("evaluation_time must be integer Unix seconds")
        if not isinstance(self.require_tee, bool) or not isinstance(self.allow_origin_inputs, bool):
            raise PolicyError("require_tee and allow_origin_inputs must be booleans")

    def replace(self, **changes) -> "TrustPolicy":
        fields = {
            "trusted_roots": self.trusted_roots,
            "requirements": self.requirements,
            "evaluation_time": self.evaluation_time,
            "require_tee": self.require_tee,
            "trusted_platform_keys": self.trusted_platform_keys,
            "allow_origin_inputs": self.allow_origin_inputs,
        }
        fields.update(changes)
        return TrustPolicy(**fields)

    def to_json(self) -> dict:
        return {
            "trusted_roots": sorted(self.trusted_roots),
            "requirements": [r.to_json() for r in self.requirements],
            "require_tee": self.require_tee,
            "trusted_platform_keys": [k.to_json() for k in self.trusted_platform_keys],
            "allow_origin_inputs": self.allow_origin_inputs,
            "evaluation_time": self.evaluation_time,
        }

    @classmethod
    def from_json(cls, doc: Any) -> "TrustPolicy":
        required = {"trusted_roots", "requirements", "evaluation_time"}
        optional = {"require_tee", "trusted_platform_keys", "allow_origin_inputs"}
        if not isinstance(doc, dict) or not required <= set(doc) <= required | optional:
            raise PolicyError(f"policy must have {sorted(required)} and optionally {sorted(optional)}")
        if not isinstance(doc["trusted_roots"], list) or not isinstance(doc["requirements"], list):
            raise PolicyError("trusted_roots and requirements must be lists")
        platform_keys = doc.get("trusted_platform_keys", [])
        if not isinstance(platform_keys, list):
            raise PolicyError("trusted_platform_keys must be a list")
        try:
            keys = tuple(PublicKey.from_json(k) for k in platform_keys)
        except DecodeError as exc:
            raise PolicyError(str(exc)) from exc
        return cls(
            trusted_roots=frozenset(doc["trusted_roots"]),
            requirements=tuple(PropertyRequirement.from_json(r) for r in doc["requirements"]),
            evaluation_time=doc["evaluation_time"],
            require_tee=doc.get("require_tee", False),
            trusted_platform_keys=keys,
            allow_origin_inputs=doc.get("allow_origin_inputs", True),
        )

    @property
    def properties(self) -> list:
        return sorted({r.property for r in self.requirements})


@dataclass(frozen=True)
class Bundle:
    """The deployed artifact's digest and everything needed to validate it.

    ``malformed`` records certificate envelopes whose payloads failed to
    decode when the bundle was loaded; they are reported, not used.
    """

    deployed: ArtifactRef
    statements: tuple
    certifications: tuple = ()
    authority_certs: tuple = ()
    malformed: tuple = ()

    def to_json(self) -> dict:
        return {
            "deployed": self.deployed.to_json(),
            "statements": [s.to_json() for s in self.statements],
            "certifications": [c.to_json() for c in self.certifications],
            "authority_certs": [c.to_json() for c in self.authority_certs],
        }

    @classmethod
    def from_json(cls, doc: Any) -> "Bundle":
        keys = {"deployed", "statements", "certifications", "authority_certs"}
        if not isinstance(doc, dict) or set(doc) != keys:
            raise BundleError(f"bundle must have exactly {sorted(keys)}")
        if not all(isinstance(doc[k], list) for k in ("statements", "certifications", "authority_certs")):
            raise BundleError("bundle statements and certificates must be lists")
        malformed = []
        try:
            deployed = ArtifactRef.from_json(doc["deployed"])
            statements = tuple(SignedStatement.from_json(s) for s in doc["statements"])
            certs = []
            for i, raw in enumerate(doc["certifications"]):
                env = Envelope.from_json(raw)
                try:
                    certs.append(ToolCertification.from_envelope(env))
                except MalformedPayload as exc:
                    malformed.append(("tool-cert", i, str(exc)))
            authorities = []
            for i, raw in enumerate(doc["authority_certs"]):
                env = Envelope.from_json(raw)
                try:
                    authorities.append(AuthorityCertificate.from_envelope(env))
                except MalformedPayload as exc:
                    malformed.append(("authority-cert", i, str(exc)))
        except DecodeError as exc:
            raise BundleError(str(exc)) from exc
        return cls(deployed, statements, tuple(certs), tuple(authorities), tuple(malformed))


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple
    per_statement_trust: Mapping[str, Mapping[str, int]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "violations": [v.to_json() for v in self.violations],
            "per_statement_trust": {d: dict(c) for d, c in self.per_statement_trust.items()},
        }

    def to_bytes(self) -> bytes:
        return canonicalize(self.to_json())


def evaluate_tool_trust(
    statement: SignedStatement,
    bundle: Bundle,
    policy: TrustPolicy,
    *,
    evidence_verifier: EvidenceVerifier = verify_evidence,
) -> dict:
    """Number of distinct trusted authorities per property the policy mentions."""
    return {
        prop: len(certifying_authorities(
            statement, prop, bundle.certifications, bundle.authority_certs,
            policy.trusted_roots, policy.evaluation_time,
            trusted_platform_keys=policy.trusted_platform_keys,
            evidence_verifier=evidence_verifier,
        ))
        for prop in policy.properties
    }


def _chain_violations(bundle: Bundle):
    deployed = bundle.deployed.digest
    try:
        chain = link_chain(bundle.statements, deployed)
    except ChainError as exc:
        rule = {
            NoTerminalError: "no-terminal",
            AmbiguousTerminalError: "ambiguous-terminal",
            DuplicateStatementError: "duplicate-statement",
        }.get(type(exc), "chain-error")
        indexed = {}
        for s in bundle.statements:
            indexed.setdefault(statement_digest(s), s)
        return indexed, [Violation("-", rule, str(exc))] + integrity_violations(indexed)
    return dict(chain.statements), verify_chain_integrity(chain)


def _tee_violations(name: str, s: SignedStatement, bundle: Bundle, policy: TrustPolicy, verifier) -> list:
    if s.evidence is None:
        return [Violation(name, "tee-evidence-missing", "statement carries no attestation evidence")]
    try:
        evidence = s.attestation
    except MalformedPayload as exc:
        return [Violation(name, "tee-evidence-invalid", f"malformed evidence: {exc}")]
    signer = s.signing_key()
    if signer is None:
        return [Violation(name, "tee-evidence-invalid", "no tool signing key to bind against")]
    tool = s.payload.tool
    expected = {
        m
        for c in bundle.certifications
        if c.matches_tool(tool.id, tool.version)
        for m in c.certified_measurements
    }
    result = verifier(evidence, expected, policy.trusted_platform_keys, signer)
    if not result:
        return [Violation(name, "tee-evidence-invalid", result.reason)]
    return []


def validate_bundle(
    bundle: Bundle,
    policy: TrustPolicy,
    *,
    evidence_verifier: EvidenceVerifier = verify_evidence,
) -> ValidationReport:
    """Check ``bundle`` against ``policy`` and collect every violation.

    Runs chain linking and integrity, enclave evidence (if the policy wants
    it), per-statement authority thresholds and the origin-input rule. No
    check short-circuits another.
    """
    violations = [
        Violation("-", f"{kind}-malformed", f"{kind} #{i}: {reason}")
        for kind, i, reason in bundle.malformed
    ]
    statements, chain_problems = _chain_violations(bundle)
    violations.extend(chain_problems)

    trust = {}
    for d in sorted(statements):
        s = statements[d]
        stmt = s.try_payload()
        if stmt is None:
            continue
        name = str(d)
        if policy.require_tee:
            violations.extend(_tee_violations(name, s, bundle, policy, evidence_verifier))
        counts = evaluate_tool_trust(s, bundle, policy, evidence_verifier=evidence_verifier)
        trust[name] = counts
        for req in policy.requirements:
            if req.applies(stmt.operation_type) and counts[req.property] < req.threshold:
                violations.append(Violation(
                    name, "threshold-not-met",
                    f"{req.property}: {counts[req.property]} < {req.threshold}",
                ))
        if not policy.allow_origin_inputs and stmt.operation_type == "transform":
            for i in stmt.inputs:
                if i.upstream is None:
                    violations.append(Violation(name, "origin-input", f"input {i.artifact.name!r} has no upstream statement"))

    violations = sorted(set(violations), key=Violation.sort_key)
    return ValidationReport(tuple(violations), trust)


def validate_for_principals(bundle: Bundle, policies: Mapping[str, TrustPolicy], **kwargs) -> dict:
    """Run each principal's policy separately; the bundle is acceptable only if all pass."""
    return {who: validate_bundle(bundle, p, **kwargs) for who, p in policies.items()}
