"""Per-operation signed statements and the provenance DAG they form.

Each tool invocation emits one :class:`SignedStatement`. Inputs produced by
an earlier operation carry the digest of that operation's signed statement,
so the statements link into a DAG rooted at the operation that produced the
deployed artifact. Only artifact digests ever appear here, never content.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from cdi.attestation import AttestationEvidence
from cdi.crypto import (
    Digest,
    Envelope,
    KeyPair,
    PublicKey,
    canonicalize,
    digest,
    seal,
    verify_quietly,
)
from cdi.errors import (
    AmbiguousTerminalError,
    CycleError,
    DanglingReferenceError,
    DuplicateStatementError,
    DecodeError,
    EvidenceError,
    MalformedPayload,
    NoTerminalError,
    StatementError,
)

STATEMENT_KIND = "statement"
OPERATION_TYPES = ("transform", "inspect")
REPORT_PREFIX = "report:"


def _expect_record(doc: Any, keys: set, optional: set = frozenset(), what: str = "record") -> dict:
    if not isinstance(doc, dict):
        raise DecodeError(f"{what} must be a JSON object")
    present = set(doc)
    if not keys <= present or not present <= keys | optional:
        raise DecodeError(f"{what} must have keys {sorted(keys)} (optional {sorted(optional)}), got {sorted(present)}")
    return doc


def _expect_str(value: Any, what: str) -> str:
    if not isinstance(value, str):
        raise DecodeError(f"{what} must be a string")
    return value


@dataclass(frozen=True)
class ArtifactRef:
    name: str
    digest: Digest

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise StatementError("artifact name must be a non-empty string")
        if not isinstance(self.digest, Digest):
            raise StatementError("artifact digest must be a Digest")

    @property
    def is_report(self) -> bool:
        return self.name.startswith(REPORT_PREFIX)

    def to_json(self) -> dict:
        return {"name": self.name, "digest": str(self.digest)}

    @classmethod
    def from_json(cls, doc: Any) -> "ArtifactRef":
        doc = _expect_record(doc, {"name", "digest"}, what="artifact")
        try:
            return cls(_expect_str(doc["name"], "artifact name"), Digest.parse(doc["digest"]))
        except StatementError as exc:
            raise DecodeError(str(exc)) from exc


@dataclass(frozen=True)
class InputRef:
    artifact: ArtifactRef
    upstream: Optional[Digest] = None

    def to_json(self) -> dict:
        doc = {"artifact": self.artifact.to_json()}
        if self.upstream is not None:
            doc["upstream"] = str(self.upstream)
        return doc

    @classmethod
    def from_json(cls, doc: Any) -> "InputRef":
        doc = _expect_record(doc, {"artifact"}, {"upstream"}, what="input")
        upstream = Digest.parse(doc["upstream"]) if "upstream" in doc else None
        return cls(ArtifactRef.from_json(doc["artifact"]), upstream)


@dataclass(frozen=True)
class ToolInfo:
    id: str
    version: str
    keyid: str

    def to_json(self) -> dict:
        return {"id": self.id, "version": self.version, "keyid": self.keyid}

    @classmethod
    def from_json(cls, doc: Any) -> "ToolInfo":
        doc = _expect_record(doc, {"id", "version", "keyid"}, what="tool")
        return cls(
            _expect_str(doc["id"], "tool id"),
            _expect_str(doc["version"], "tool version"),
            _expect_str(doc["keyid"], "tool keyid"),
        )


@dataclass(frozen=True, eq=True)
class OperationStatement:
    tool: ToolInfo
    operation_type: str
    parameters: Mapping[str, str]
    inputs: tuple
    outputs: tuple
    created_at: int
    kind: str = field(default=STATEMENT_KIND, init=False)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "tool": self.tool.to_json(),
            "operation_type": self.operation_type,
            "parameters": dict(self.parameters),
            "inputs": [i.to_json() for i in self.inputs],
            "outputs": [o.to_json() for o in self.outputs],
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, doc: Any) -> "OperationStatement":
        doc = _expect_record(
            doc,
            {"kind", "tool", "operation_type", "parameters", "inputs", "outputs", "created_at"},
            what="statement",
        )
        if doc["kind"] != STATEMENT_KIND:
            raise DecodeError(f"statement kind must be {STATEMENT_KIND!r}")
        params = doc["parameters"]
        if not isinstance(params, dict) or not all(isinstance(v, str) for v in params.values()):
            raise DecodeError("parameters must be a flat string-to-string record")
        if not isinstance(doc["inputs"], list) or not isinstance(doc["outputs"], list):
            raise DecodeError("inputs and outputs must be lists")
        created_at = doc["created_at"]
        if not isinstance(created_at, int) or isinstance(created_at, bool):
            raise DecodeError("created_at must be an integer")
        return cls(
            tool=ToolInfo.from_json(doc["tool"]),
            operation_type=_expect_str(doc["operation_type"], "operation_type"),
            parameters=params,
            inputs=tuple(InputRef.from_json(i) for i in doc["inputs"]),
            outputs=tuple(ArtifactRef.from_json(o) for o in doc["outputs"]),
            created_at=created_at,
        )

    def problems(self) -> list:
        """Structural invariant violations, as human-readable strings."""
        out = []
        if self.operation_type not in OPERATION_TYPES:
            out.append(f"unknown operation type {self.operation_type!r}")
        if self.operation_type == "transform" and not self.outputs:
            out.append("transform statement has no outputs")
        if self.operation_type == "inspect":
            seen = {i.artifact.digest for i in self.inputs}
            for o in self.outputs:
                if not o.is_report and o.digest not in seen:
                    out.append(f"inspect output {o.name!r} is neither an input nor a {REPORT_PREFIX!r} artifact")
        return out


def create_statement(
    tool: ToolInfo,
    operation_type: str,
    parameters: Mapping[str, str],
    inputs: Sequence[InputRef],
    outputs: Sequence[ArtifactRef],
    created_at: int,
) -> OperationStatement:
    if not isinstance(created_at, int) or isinstance(created_at, bool):
        raise StatementError("created_at must be integer Unix seconds")
    for k, v in parameters.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise StatementError("parameters must map strings to strings")
    stmt = OperationStatement(tool, operation_type, dict(parameters), tuple(inputs), tuple(outputs), created_at)
    problems = stmt.problems()
    if problems:
        raise StatementError("; ".join(problems))
    return stmt


@dataclass(frozen=True)
class SignedStatement:
    """A statement envelope, optionally carrying attestation evidence.

    The payload is kept as the signed bytes. :attr:`payload` decodes it on
    demand and raises :class:`MalformedPayload` if the bytes do not hold a
    statement, which lets a validator report tampered statements instead of
    refusing to load them.
    """

    envelope: Envelope
    evidence: Optional[Envelope] = None

    @property
    def signatures(self) -> tuple:
        return self.envelope.signatures

    @cached_property
    def payload(self) -> OperationStatement:
        record = self.envelope.payload_record(STATEMENT_KIND)
        try:
            return OperationStatement.from_json(record)
        except DecodeError as exc:
            raise MalformedPayload(str(exc)) from exc

    def try_payload(self) -> Optional[OperationStatement]:
        try:
            return self.payload
        except MalformedPayload:
            return None

    @cached_property
    def attestation(self) -> Optional[AttestationEvidence]:
        if self.evidence is None:
            return None
        return AttestationEvidence.from_envelope(self.evidence)

    def signing_key(self) -> Optional[PublicKey]:
        """Public key of the tool key named in the payload, if it signed."""
        stmt = self.try_payload()
        if stmt is None:
            return None
        for sig in self.signatures:
            if sig.keyid == stmt.tool.keyid and sig.public_key is not None and sig.public_key.keyid == sig.keyid:
                return sig.public_key
        return None

    def to_json(self) -> dict:
        doc = self.envelope.to_json()
        if self.evidence is not None:
            doc["evidence"] = self.evidence.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: Any) -> "SignedStatement":
        doc = _expect_record(doc, {"payload", "signatures"}, {"evidence"}, what="signed statement")
        envelope = Envelope.from_json({"payload": doc["payload"], "signatures": doc["signatures"]})
        evidence = Envelope.from_json(doc["evidence"]) if "evidence" in doc else None
        return cls(envelope, evidence)

    @cached_property
    def digest(self) -> Digest:
        return digest(canonicalize(self.to_json()))


def sign_statement(
    stmt: OperationStatement,
    key: Union[KeyPair, Iterable[KeyPair]],
    evidence: Optional[AttestationEvidence] = None,
) -> SignedStatement:
    """Sign ``stmt`` with one or more keys; signatures end up sorted by keyid."""
    keys = [key] if isinstance(key, KeyPair) else list(key)
    if not keys:
        raise StatementError("at least one signing key is required")
    by_id = {k.keyid: k for k in keys}
    if len(by_id) != len(keys):
        raise StatementError("duplicate signing key")
    tool_key = by_id.get(stmt.tool.keyid)
    if tool_key is None:
        raise StatementError("statement tool keyid does not match any signing key")
    if evidence is not None:
        if evidence.bound_keyid != tool_key.keyid or evidence.report_data != digest(canonicalize(tool_key.public.to_json())):
            raise EvidenceError("attestation evidence is bound to a different key")
    env = seal(stmt.to_json(), keys, embed_public=True)
    return SignedStatement(env, evidence.envelope if evidence is not None else None)


def statement_digest(signed: SignedStatement) -> Digest:
    """Digest over the whole signed statement, signatures and evidence included."""
    return signed.digest


@dataclass(frozen=True)
class Violation:
    statement: str
    rule: str
    detail: str

    def to_json(self) -> dict:
        return {"statement": self.statement, "rule": self.rule, "detail": self.detail}

    def sort_key(self):
        return (self.statement, self.rule, self.detail)


@dataclass(frozen=True)
class ProvenanceChain:
    statements: Mapping[Digest, SignedStatement]
    terminal: Digest


def index_statements(statements: Iterable[SignedStatement]) -> dict:
    out = {}
    for s in statements:
        d = statement_digest(s)
        if d in out:
            raise DuplicateStatementError(f"duplicate statement {d}")
        out[d] = s
    return out


def link_chain(statements: Iterable[SignedStatement], deployed: Digest) -> ProvenanceChain:
    indexed = index_statements(statements)
    candidates = [
        d for d, s in indexed.items()
        if (p := s.try_payload()) is not None and any(o.digest == deployed for o in p.outputs)
    ]
    if not candidates:
        raise NoTerminalError(f"no terminal statement outputs {deployed}")
    if len(candidates) > 1:
        raise AmbiguousTerminalError(f"ambiguous terminal: {len(candidates)} statements output {deployed}")
    return ProvenanceChain(indexed, candidates[0])


def _edges(statements: Mapping[Digest, SignedStatement], strict: bool):
    """Map each statement digest to the set of downstream statements that consume it."""
    downstream = {d: set() for d in statements}
    for d, s in statements.items():
        p = s.try_payload()
        if p is None:
            continue
        for i in p.inputs:
            if i.upstream is None:
                continue
            if i.upstream not in statements:
                if strict:
                    raise DanglingReferenceError(f"{d} references missing upstream {i.upstream}")
                continue
            downstream[i.upstream].add(d)
    return downstream


def _kahn(downstream: Mapping[Digest, set]):
    indegree = {d: 0 for d in downstream}
    for targets in downstream.values():
        for t in targets:
            indegree[t] += 1
    ready = [d for d, n in indegree.items() if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        d = heapq.heappop(ready)
        order.append(d)
        for t in downstream[d]:
            indegree[t] -= 1
            if indegree[t] == 0:
                heapq.heappush(ready, t)
    stuck = sorted(d for d, n in indegree.items() if n > 0)
    return order, stuck


def walk_chain(chain: ProvenanceChain) -> list:
    """Statements in dependency order, upstream first; ties by ascending digest."""
    order, stuck = _kahn(_edges(chain.statements, strict=True))
    if stuck:
        raise CycleError("cycle among statements " + ", ".join(str(d) for d in stuck))
    return [chain.statements[d] for d in order]


def _signature_violations(d: str, s: SignedStatement) -> list:
    out = []
    if not s.signatures:
        out.append(Violation(d, "signature-missing", "statement carries no signatures"))
    keyids = [sig.keyid for sig in s.signatures]
    if keyids != sorted(set(keyids)):
        out.append(Violation(d, "signature-order", "signatures not strictly sorted by keyid"))
    for sig in s.signatures:
        if sig.public_key is None:
            out.append(Violation(d, "signature-invalid", f"signature {sig.keyid[:16]} has no public key"))
        elif sig.public_key.keyid != sig.keyid:
            out.append(Violation(d, "signature-invalid", f"keyid {sig.keyid[:16]} does not match its public key"))
        elif not verify_quietly(sig.public_key, s.envelope.payload, sig.signature):
            out.append(Violation(d, "signature-invalid", f"signature by {sig.keyid[:16]} does not verify"))
    return out


def integrity_violations(statements: Mapping[Digest, SignedStatement]) -> list:
    """Every integrity problem among ``statements``; see :func:`verify_chain_integrity`."""
    out = []
    for d, s in statements.items():
        name = str(d)
        if statement_digest(s) != d:
            out.append(Violation(name, "digest-mismatch", f"indexed as {d} but digests to {statement_digest(s)}"))
        out.extend(_signature_violations(name, s))
        try:
            p = s.payload
        except MalformedPayload as exc:
            out.append(Violation(name, "payload-malformed", str(exc)))
            continue
        for problem in p.problems():
            out.append(Violation(name, "statement-invalid", problem))
        if p.tool.keyid not in {sig.keyid for sig in s.signatures}:
            out.append(Violation(name, "signer-mismatch", "tool keyid has no signature"))
        for i in p.inputs:
            if i.upstream is None:
                continue
            up = statements.get(i.upstream)
            if up is None:
                out.append(Violation(name, "missing-upstream", f"input {i.artifact.name!r} references absent {i.upstream}"))
                continue
            up_payload = up.try_payload()
            if up_payload is None or not any(o.digest == i.artifact.digest for o in up_payload.outputs):
                out.append(Violation(
                    name, "link-mismatch",
                    f"input {i.artifact.name!r} ({i.artifact.digest}) is not an output of {i.upstream}",
                ))
    _, stuck = _kahn(_edges(statements, strict=False))
    for d in stuck:
        out.append(Violation(str(d), "cycle", "statement participates in a dependency cycle"))
    return sorted(out, key=Violation.sort_key)


def verify_chain_integrity(chain: ProvenanceChain) -> list:
    """Check signatures, upstream links and acyclicity.

    Returns the list of violations, sorted; an empty list means the chain is
    intact. Never raises for a bad chain.
    """
    out = integrity_violations(chain.statements)
    if chain.terminal not in chain.statements:
        out.append(Violation("-", "missing-terminal", f"terminal {chain.terminal} is not in the chain"))
    return sorted(out, key=Violation.sort_key)
