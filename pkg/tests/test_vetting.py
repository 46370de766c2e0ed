import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdi.attestation import enclave_measurement, simulate_enclave_keygen
from cdi.crypto import Envelope, digest, generate_keypair
from cdi.errors import CertificateError, CertPathError, MalformedPayload
from cdi.provenance import ArtifactRef, ToolInfo, create_statement, sign_statement
from cdi.vetting import (
    AuthorityCertificate,
    ToolCertification,
    Validity,
    certifying_authorities,
    issue_authority_cert,
    issue_tool_certification,
    verify_cert_path,
)

from cert_oracle import oracle_roots, random_case

T = 1_700_000_000
W = Validity(T - 100, T + 100)
ROOT = generate_keypair(b"\x21" * 32)
MID = generate_keypair(b"\x22" * 32)
OTHER = generate_keypair(b"\x23" * 32)
COMPILER = generate_keypair(b"\x24" * 32)
PROP = "memory-safety-preserving"


def root_cert(key=ROOT, validity=W):
    return issue_authority_cert(key, key.keyid, "root", key.public, validity)


def compiler_statement(key=COMPILER, version="13.2.0", evidence=None):
    stmt = create_statement(ToolInfo("gcc", version, key.keyid), "transform", {}, [], [ArtifactRef("a", digest(b"a"))], T)
    return sign_statement(stmt, key, evidence)


class TestIssue:
    def test_self_issued_root(self):
        c = root_cert()
        assert c.self_signed
        assert c.issuer_keyid == c.subject_keyid == ROOT.keyid
        assert c.verify_signature(ROOT.public)

    def test_two_level(self):
        mid = issue_authority_cert(ROOT, None, "intermediate", MID.public, W)
        assert not mid.self_signed
        tc = issue_tool_certification(MID, None, "gcc", "*", [PROP], W, keyids=[COMPILER.keyid])
        assert verify_cert_path(tc, [root_cert(), mid], {ROOT.keyid}, T) == ROOT.keyid

    def test_inverted_validity(self):
        with pytest.raises(CertificateError):
            issue_authority_cert(ROOT, None, "root", ROOT.public, (T + 1, T))

    def test_issuer_keyid_must_match(self):
        with pytest.raises(CertificateError):
            issue_authority_cert(ROOT, OTHER.keyid, "root", ROOT.public, W)

    def test_certify_compiler(self):
        tc = issue_tool_certification(ROOT, None, "gcc", "13.2.0", [PROP], W, keyids=[COMPILER.keyid])
        assert tc.properties == (PROP,)
        assert ToolCertification.from_json(tc.to_json()) == tc

    def test_empty_properties(self):
        with pytest.raises(CertificateError):
            issue_tool_certification(ROOT, None, "gcc", "*", [], W, keyids=[COMPILER.keyid])

    def test_measurement_only(self):
        m = enclave_measurement("gcc", "13.2.0", digest(b"gcc"))
        tc = issue_tool_certification(ROOT, None, "gcc", "*", [PROP], W, measurements=[m])
        assert tc.certified_keyids == () and tc.certified_measurements == (m,)

    def test_no_identity(self):
        with pytest.raises(CertificateError):
            issue_tool_certification(ROOT, None, "gcc", "*", [PROP], W)

    def test_roundtrip_authority(self):
        c = root_cert()
        assert AuthorityCertificate.from_json(c.to_json()) == c

    def test_wrong_kind_rejected(self):
        c = root_cert()
        with pytest.raises(MalformedPayload):
            ToolCertification.from_envelope(c.envelope)


class TestVerifyCertPath:
    def setup_method(self):
        self.mid = issue_authority_cert(ROOT, None, "intermediate", MID.public, W)
        self.tc = issue_tool_certification(MID, None, "gcc", "*", [PROP], Validity(T - 10, T + 10), keyids=[COMPILER.keyid])
        self.pool = [root_cert(), self.mid]

    def test_root_intermediate_tool(self):
        assert verify_cert_path(self.tc, self.pool, {ROOT.keyid}, T) == ROOT.keyid

    def test_expired_tool_cert(self):
        with pytest.raises(CertPathError) as e:
            verify_cert_path(self.tc, self.pool, {ROOT.keyid}, T + 11)
        assert e.value.reason == "validity"

    def test_untrusted_root(self):
        with pytest.raises(CertPathError) as e:
            verify_cert_path(self.tc, self.pool, {OTHER.keyid}, T)
        assert e.value.reason == "no-path"

    def test_missing_intermediate(self):
        with pytest.raises(CertPathError):
            verify_cert_path(self.tc, [root_cert()], {ROOT.keyid}, T)

    def test_expired_intermediate(self):
        mid = issue_authority_cert(ROOT, None, "intermediate", MID.public, Validity(T - 100, T - 1))
        with pytest.raises(CertPathError) as e:
            verify_cert_path(self.tc, [root_cert(), mid], {ROOT.keyid}, T)
        assert e.value.reason == "validity"

    def test_forged_intermediate(self):
        forged = issue_authority_cert(OTHER, None, "intermediate", MID.public, W)
        relabelled = AuthorityCertificate(
            forged.subject_name, forged.subject_key, ROOT.keyid, forged.validity,
            Envelope(forged.envelope.payload, forged.envelope.signatures),
        )
        with pytest.raises(CertPathError):
            verify_cert_path(self.tc, [root_cert(), relabelled], {ROOT.keyid}, T)

    def test_depth_cap(self):
        keys = [ROOT] + [generate_keypair(bytes([0x30 + i]) * 32) for i in range(9)]
        pool = [root_cert()]
        for parent, child in zip(keys, keys[1:]):
            pool.append(issue_authority_cert(parent, None, "mid", child.public, W))
        tc = issue_tool_certification(keys[-1], None, "gcc", "*", [PROP], W, keyids=[COMPILER.keyid])
        with pytest.raises(CertPathError) as e:
            verify_cert_path(tc, pool, {ROOT.keyid}, T)
        assert e.value.reason == "depth"
        assert verify_cert_path(tc, pool, {ROOT.keyid}, T, max_depth=10) == ROOT.keyid

    def test_picks_any_working_parent(self):
        # intermediate cross-certified by an untrusted root and by the trusted one
        other_root = root_cert(OTHER)
        cross = issue_authority_cert(OTHER, None, "intermediate", MID.public, W)
        pool = [other_root, cross, *self.pool]
        assert verify_cert_path(self.tc, pool, {ROOT.keyid}, T) == ROOT.keyid


class TestCertifyingAuthorities:
    def setup_method(self):
        self.roots = [root_cert(ROOT), root_cert(OTHER)]
        self.stmt = compiler_statement()

    def certify(self, key, **kw):
        kw.setdefault("keyids", [COMPILER.keyid])
        return issue_tool_certification(key, None, kw.pop("tool", "gcc"), kw.pop("version", "*"),
                                        kw.pop("props", [PROP]), kw.pop("validity", W), **kw)

    def count(self, certs, trusted=None, at=T, prop=PROP, stmt=None, **kw):
        trusted = {ROOT.keyid, OTHER.keyid} if trusted is None else trusted
        return certifying_authorities(stmt or self.stmt, prop, certs, self.roots, trusted, at, **kw)

    def test_two_independent(self):
        found = self.count([self.certify(ROOT), self.certify(OTHER)])
        assert found == {(ROOT.keyid, ROOT.keyid), (OTHER.keyid, OTHER.keyid)}

    def test_same_authority_twice(self):
        assert len(self.count([self.certify(ROOT), self.certify(ROOT, version="13.2.0")])) == 1

    def test_property_absent(self):
        assert self.count([self.certify(ROOT, props=["reproducible"])]) == frozenset()

    def test_version_exact_and_wildcard(self):
        assert len(self.count([self.certify(ROOT, version="13.2.0")])) == 1
        assert len(self.count([self.certify(ROOT, version="13.2")])) == 0
        assert len(self.count([self.certify(ROOT, tool="clang")])) == 0

    def test_uncovered_key(self):
        assert len(self.count([self.certify(ROOT, keyids=[OTHER.keyid])])) == 0

    def test_untrusted_and_expired(self):
        certs = [self.certify(ROOT), self.certify(OTHER, validity=Validity(T - 10, T - 1))]
        assert len(self.count(certs, trusted={OTHER.keyid})) == 0
        assert len(self.count(certs)) == 1

    def test_measurement_needs_verified_evidence(self):
        platform = generate_keypair(b"\x25" * 32)
        m = enclave_measurement("gcc", "13.2.0", digest(b"gcc"))
        key, ev = simulate_enclave_keygen(m, platform, "p0", b"\x26" * 32)
        stmt = compiler_statement(key, evidence=ev)
        certs = [self.certify(ROOT, keyids=[], measurements=[m])]
        assert len(self.count(certs, stmt=stmt)) == 0
        assert len(self.count(certs, stmt=stmt, trusted_platform_keys=[platform.public])) == 1
        assert len(self.count(certs, stmt=stmt, trusted_platform_keys=[OTHER.public])) == 0


@given(st.integers(0, 2**32))
@settings(max_examples=60, deadline=None)
def test_path_search_matches_oracle(seed):
    cert, pool, trusted, t = random_case(random.Random(seed))
    expected = oracle_roots(cert, pool, trusted, t)
    try:
        got = verify_cert_path(cert, pool, trusted, t)
    except CertPathError:
        assert expected == set()
    else:
        assert got in expected


@given(st.integers(0, 2**32), st.data())
@settings(max_examples=60, deadline=None)
def test_path_monotonicity(seed, data):
    cert, pool, trusted, t = random_case(random.Random(seed))
    try:
        verify_cert_path(cert, pool, trusted, t)
        return
    except CertPathError:
        pass
    drop = data.draw(st.integers(0, len(pool) - 1))
    with pytest.raises(CertPathError):
        verify_cert_path(cert, pool[:drop] + pool[drop + 1:], trusted, t)


@given(st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_time_soundness(seed):
    rng = random.Random(seed)
    cert, pool, trusted, t = random_case(rng)
    try:
        verify_cert_path(cert, pool, trusted, t)
    except CertPathError:
        return
    # shift time outside the tool certification's window
    for outside in (cert.validity.not_before - 1, cert.validity.not_after + 1):
        with pytest.raises(CertPathError):
            verify_cert_path(cert, pool, trusted, outside)


@given(st.lists(st.sampled_from([ROOT, OTHER, MID]), max_size=6))
@settings(max_examples=30, deadline=None)
def test_count_never_exceeds_distinct_issuers(issuers):
    pool = [root_cert(ROOT), root_cert(OTHER), issue_authority_cert(ROOT, None, "mid", MID.public, W)]
    certs = [issue_tool_certification(k, None, "gcc", "*", [PROP], W, keyids=[COMPILER.keyid]) for k in issuers]
    found = certifying_authorities(compiler_statement(), PROP, certs, pool, {ROOT.keyid, OTHER.keyid}, T)
    assert len(found) <= len({k.keyid for k in issuers})
    assert len(found) == len({k.keyid for k in issuers})
