"""Test fixtures: a four-stage supply chain built through the library and
through the command line.

checkout -> compile -> test (inspect) -> package, where package consumes
both the compiled binary and the test report.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from cdi.cli import main
from cdi.crypto import digest, generate_keypair
from cdi.policy import Bundle, PropertyRequirement, TrustPolicy
from cdi.provenance import ArtifactRef, InputRef, ToolInfo, create_statement, sign_statement
from cdi.vetting import Validity, issue_authority_cert, issue_tool_certification

T0 = 1_700_000_000
WINDOW = Validity(T0 - 86_400, T0 + 365 * 86_400)
PROPERTY = "memory-safety-preserving"

ARTIFACTS = {
    "main.c": b"int main(void) { return 0; }\n",
    "app.bin": b"\x7fELF\x02\x01\x01 compiled with -O2 -fstack-protector",
    "results.txt": b"12 passed, 0 failed\n",
    "app.img": b"OCI image layer: app.bin + results\n",
}

TOOLS = {
    "checkout": ("git", "2.43.0", "transform"),
    "compile": ("gcc", "13.2.0", "transform"),
    "test": ("pytest", "8.0.0", "inspect"),
    "package": ("buildah", "1.33.0", "transform"),
}


def seed_for(name: str, base: str = "fixture") -> bytes:
    return hashlib.sha256(f"{base}:{name}".encode()).digest()


def key(name: str, base: str = "fixture"):
    return generate_keypair(seed_for(name, base))


@dataclass
class Pipeline:
    keys: dict
    statements: dict
    root_certs: list
    tool_certs: list
    deployed: ArtifactRef
    extra: dict = field(default_factory=dict)

    def bundle(self, statements=None, tool_certs=None, root_certs=None) -> Bundle:
        return Bundle(
            self.deployed,
            tuple(self.statements.values() if statements is None else statements),
            tuple(self.tool_certs if tool_certs is None else tool_certs),
            tuple(self.root_certs if root_certs is None else root_certs),
        )

    def policy(self, threshold: int = 1, roots=None, **kw) -> TrustPolicy:
        return TrustPolicy(
            trusted_roots=frozenset(roots if roots is not None else [self.keys["root_a"].keyid]),
            requirements=(PropertyRequirement(PROPERTY, threshold),),
            evaluation_time=kw.pop("evaluation_time", T0),
            **kw,
        )


def ref(name: str) -> ArtifactRef:
    return ArtifactRef(name, digest(ARTIFACTS[name]))


def build_pipeline(second_authority_tools=(), evidence_for=None) -> Pipeline:
    """Build the 4-stage chain. Authority A certifies every tool; authority B
    certifies the stages named in ``second_authority_tools``.

    ``evidence_for`` maps a stage to a platform key name; that stage then gets
    an enclave-derived key with attestation evidence instead of a plain key.
    """
    from cdi.attestation import enclave_measurement, simulate_enclave_keygen

    evidence_for = evidence_for or {}
    keys = {n: key(n) for n in ("root_a", "root_b", "platform", *TOOLS)}
    evidence = {}
    measurements = {}
    for stage, platform in evidence_for.items():
        tool_id, version, _ = TOOLS[stage]
        m = enclave_measurement(tool_id, version, digest(f"{tool_id}-binary".encode()))
        measurements[stage] = m
        keys[stage], evidence[stage] = simulate_enclave_keygen(m, keys[platform], "platform-0", seed_for("enclave-" + stage))

    def tool(stage):
        tool_id, version, _ = TOOLS[stage]
        return ToolInfo(tool_id, version, keys[stage].keyid)

    statements = {}

    def record(stage, inputs, outputs, params):
        stmt = create_statement(tool(stage), TOOLS[stage][2], params, inputs, outputs, T0 + len(statements))
        statements[stage] = sign_statement(stmt, keys[stage], evidence.get(stage))
        return statements[stage].digest

    d_checkout = record("checkout", [], [ref("main.c")], {"repo": "https://example.org/app.git", "rev": "abc123"})
    d_compile = record("compile", [InputRef(ref("main.c"), d_checkout)], [ref("app.bin")], {"flags": "-O2 -fstack-protector"})
    d_test = record(
        "test", [InputRef(ref("app.bin"), d_compile)],
        [ArtifactRef("report:results.txt", digest(ARTIFACTS["results.txt"]))], {"config": "pytest.ini"},
    )
    record(
        "package",
        [InputRef(ref("app.bin"), d_compile), InputRef(ArtifactRef("report:results.txt", digest(ARTIFACTS["results.txt"])), d_test)],
        [ref("app.img")], {"format": "oci"},
    )

    root_certs = [
        issue_authority_cert(keys["root_a"], None, "Authority A", keys["root_a"].public, WINDOW),
        issue_authority_cert(keys["root_b"], None, "Authority B", keys["root_b"].public, WINDOW),
    ]
    tool_certs = []
    for stage, (tool_id, version, _) in TOOLS.items():
        ident = {"measurements": [measurements[stage]]} if stage in measurements else {"keyids": [keys[stage].keyid]}
        tool_certs.append(issue_tool_certification(keys["root_a"], None, tool_id, version, [PROPERTY], WINDOW, **ident))
        if stage in second_authority_tools:
            tool_certs.append(issue_tool_certification(keys["root_b"], None, tool_id, "*", [PROPERTY], WINDOW, **ident))
    return Pipeline(keys, statements, root_certs, tool_certs, ref("app.img"), {"evidence": evidence, "measurements": measurements})


# -- command line fixture ------------------------------------------------------


def run_cli(*argv) -> tuple:
    """Run ``cdi`` in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def cli_ok(*argv) -> str:
    code, out, err = run_cli(*argv)
    assert code == 0, f"cdi {' '.join(map(str, argv))} -> {code}: {err}"
    return out.strip()


def run_fixture_script(workdir: Path, base: str = "cli", time: int = T0) -> dict:
    """Drive the whole 4-stage supply chain through the CLI with seeded keys.

    Returns the paths of the interesting outputs.
    """
    workdir.mkdir(parents=True, exist_ok=True)
    keys = workdir / "keys"
    for name, data in ARTIFACTS.items():
        (workdir / name).write_bytes(data)
    common = ["--key-dir", keys, "--time", time]

    for name in ("root", *TOOLS):
        cli_ok("keygen", name, "--seed", seed_for(name, base).hex(), "--key-dir", keys)

    nb, na = time - 86_400, time + 365 * 86_400
    root_cert = workdir / "root.va.json"
    cli_ok("va", "init", "--key", "root", "--name", "Root Authority", "--not-before", nb, "--not-after", na,
           "-o", root_cert, *common)
    certs = []
    for stage, (tool_id, version, _) in TOOLS.items():
        path = workdir / f"{stage}.tc.json"
        cli_ok("va", "certify-tool", "--key", "root", "--tool", tool_id, "--version", version,
               "--keyid", keys / f"{stage}.pub.json", "--property", PROPERTY,
               "--not-before", nb, "--not-after", na, "-o", path, *common)
        certs.append(path)

    def record(stage, *flags):
        tool_id, version, op = TOOLS[stage]
        out = workdir / f"{stage}.cdi.json"
        d = cli_ok("record", "--tool", tool_id, "--version", version, "--type", op, "--key", stage,
                   "--statement-out", out, *flags, *common)
        return out, d

    w = lambda n: workdir / n  # noqa: E731
    s_checkout, d_checkout = record("checkout", "--param", "rev=abc123", "--output", w("main.c"))
    s_compile, d_compile = record("compile", "--param", "flags=-O2 -fstack-protector",
                                  "--input", f"{w('main.c')}@{d_checkout}", "--output", w("app.bin"))
    s_test, d_test = record("test", "--param", "config=pytest.ini",
                            "--input", f"{w('app.bin')}@{d_compile}", "--report", w("results.txt"))
    s_package, d_package = record("package", "--param", "format=oci",
                                  "--input", f"{w('app.bin')}@{d_compile}",
                                  "--input", f"{w('results.txt')}@{d_test}", "--output", w("app.img"))

    bundle = workdir / "bundle.json"
    cli_ok("bundle", "--artifact", w("app.img"),
           *[x for s in (s_checkout, s_compile, s_test, s_package) for x in ("--statement", s)],
           *[x for c in certs for x in ("--cert", c)],
           "--va-cert", root_cert, "-o", bundle)

    root_keyid = json.loads((keys / "root.pub.json").read_bytes())
    from cdi.crypto import PublicKey

    policy = workdir / "policy.policy.json"
    policy.write_text(json.dumps({
        "trusted_roots": [PublicKey.from_json(root_keyid).keyid],
        "requirements": [{"property": PROPERTY, "threshold": 1}],
        "require_tee": False,
        "trusted_platform_keys": [],
        "allow_origin_inputs": True,
        "evaluation_time": time,
    }))
    report = workdir / "report.json"
    code, out, err = run_cli("verify", "--bundle", bundle, "--policy", policy, "--time", time, "-o", report)
    return {
        "workdir": workdir,
        "keys": keys,
        "bundle": bundle,
        "policy": policy,
        "report": report,
        "verify_code": code,
        "verify_stdout": out,
        "statements": [s_checkout, s_compile, s_test, s_package],
        "statement_digests": [d_checkout, d_compile, d_test, d_package],
        "certs": certs,
        "root_cert": root_cert,
    }
