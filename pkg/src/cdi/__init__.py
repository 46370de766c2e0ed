"""Signed provenance chains, vetting-authority certifications and threshold
trust policies for software supply chains."""

__version__ = "0.1.0"

from cdi.attestation import (  # noqa: E402
    AttestationEvidence,
    EvidenceResult,
    enclave_measurement,
    simulate_enclave_keygen,
    verify_evidence,
)
from cdi.crypto import (  # noqa: E402
    Digest,
    KeyPair,
    PublicKey,
    Signature,
    canonicalize,
    digest,
    generate_keypair,
    sign,
    verify,
)
from cdi.policy import (  # noqa: E402
    Bundle,
    PropertyRequirement,
    TrustPolicy,
    ValidationReport,
    evaluate_tool_trust,
    validate_bundle,
)
from cdi.provenance import (  # noqa: E402
    ArtifactRef,
    InputRef,
    OperationStatement,
    ProvenanceChain,
    SignedStatement,
    ToolInfo,
    create_statement,
    link_chain,
    sign_statement,
    statement_digest,
    verify_chain_integrity,
    walk_chain,
)
from cdi.vetting import (  # noqa: E402
    AuthorityCertificate,
    ToolCertification,
    Validity,
    certifying_authorities,
    issue_authority_cert,
    issue_tool_certification,
    verify_cert_path,
)

__all__ = [
    "ArtifactRef",
    "AttestationEvidence",
    "AuthorityCertificate",
    "Bundle",
    "canonicalize",
    "certifying_authorities",
    "create_statement",
    "Digest",
    "digest",
    "enclave_measurement",
    "evaluate_tool_trust",
    "EvidenceResult",
    "generate_keypair",
    "InputRef",
    "issue_authority_cert",
    "issue_tool_certification",
    "KeyPair",
    "link_chain",
    "OperationStatement",
    "PropertyRequirement",
    "ProvenanceChain",
    "PublicKey",
    "sign",
    "sign_statement",
    "Signature",
    "SignedStatement",
    "simulate_enclave_keygen",
    "statement_digest",
    "ToolCertification",
    "ToolInfo",
    "TrustPolicy",
    "validate_bundle",
    "ValidationReport",
    "Validity",
    "verify",
    "verify_cert_path",
    "verify_chain_integrity",
    "verify_evidence",
    "walk_chain",
]
