"""``cdi`` command line.

Exit codes: 0 validation passed (or command succeeded), 1 the bundle failed
policy or integrity checks, 2 usage, I/O or structural errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from cdi import __version__
from cdi.attestation import enclave_measurement, simulate_enclave_keygen
from cdi.crypto import (
    Digest,
    KeyPair,
    PublicKey,
    canonicalize,
    decode_payload,
    digest_file,
    generate_keypair,
    loads,
)
from cdi.errors import CdiError, ChainError, DecodeError
from cdi.policy import Bundle, TrustPolicy, ValidationReport, validate_bundle
from cdi.provenance import (
    ArtifactRef,
    InputRef,
    SignedStatement,
    ToolInfo,
    Violation,
    create_statement,
    link_chain,
    sign_statement,
    statement_digest,
)
from cdi.vetting import (
    AuthorityCertificate,
    ToolCertification,
    Validity,
    issue_authority_cert,
    issue_tool_certification,
)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ERROR = 2

KEY_DIR_ENV = "CDI_KEY_DIR"


class CliError(Exception):
    """Usage or I/O problem; reported on stderr with exit code 2."""


# -- file helpers ------------------------------------------------------------


def _read_json(path) -> object:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return loads(data)
    except DecodeError as exc:
        raise CliError(f"{path}: {exc}") from exc


def _write(path: Optional[str], data: bytes, *, force: bool = True) -> None:
    if path is None or path == "-":
        sys.stdout.write(data.decode("utf-8") + "\n")
        return
    p = Path(path)
    if p.exists() and not force:
        raise CliError(f"{p} exists; pass --force to overwrite")
    try:
        p.write_bytes(data)
    except OSError as exc:
        raise CliError(f"cannot write {p}: {exc.strerror or exc}") from exc


def _hash_file(path: str) -> Digest:
    try:
        return digest_file(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _key_dir(args) -> Path:
    return Path(args.key_dir or os.environ.get(KEY_DIR_ENV) or ".")


def _load_keypair(args, ref: str) -> KeyPair:
    candidates = [Path(ref), _key_dir(args) / f"{ref}.key.json"]
    for c in candidates:
        if c.is_file():
            try:
                return KeyPair.from_json(_read_json(c))
            except DecodeError as exc:
                raise CliError(f"{c}: {exc}") from exc
    raise CliError(f"no private key found for {ref!r}")


def _load_public(args, ref: str) -> PublicKey:
    candidates = [Path(ref), _key_dir(args) / f"{ref}.pub.json"]
    for c in candidates:
        if c.is_file():
            doc = _read_json(c)
            try:
                if isinstance(doc, dict) and "private" in doc:
                    return KeyPair.from_json(doc).public
                return PublicKey.from_json(doc)
            except DecodeError as exc:
                raise CliError(f"{c}: {exc}") from exc
    raise CliError(f"no public key found for {ref!r}")


def _seed(args) -> Optional[bytes]:
    if args.seed is None:
        return None
    try:
        seed = bytes.fromhex(args.seed)
    except ValueError as exc:
        raise CliError("--seed must be hex") from exc
    if len(seed) != 32:
        raise CliError("--seed must be 32 bytes (64 hex characters)")
    return seed


def _now(args) -> int:
    if args.time is not None:
        return args.time
    if args.seed is not None:
        raise CliError("--seed requires --time so that outputs are reproducible")
    return int(time.time())


def _validity(args) -> Validity:
    not_before = args.not_before if args.not_before is not None else args.time
    if not_before is None:
        raise CliError("--not-before (or --time) is required")
    try:
        return Validity(not_before, args.not_after)
    except CdiError as exc:
        raise CliError(str(exc)) from exc


# -- commands ----------------------------------------------------------------


def cmd_keygen(args) -> int:
    name = args.name
    if not name or os.sep in name or name in (".", ".."):
        raise CliError(f"invalid key name {name!r}")
    key = generate_keypair(_seed(args))
    key_dir = _key_dir(args)
    key_dir.mkdir(parents=True, exist_ok=True)
    pub_path, key_path = key_dir / f"{name}.pub.json", key_dir / f"{name}.key.json"
    if not args.force:
        for p in (pub_path, key_path):
            if p.exists():
                raise CliError(f"{p} exists; pass --force to overwrite")
    _write(str(pub_path), canonicalize(key.public.to_json()))
    _write(str(key_path), canonicalize(key.to_json()))
    print(key.keyid)
    return EXIT_PASS


def cmd_va_init(args) -> int:
    key = _load_keypair(args, args.key)
    cert = issue_authority_cert(key, key.keyid, args.name, key.public, _validity(args))
    _write(args.output or f"{args.name}.va.json", canonicalize(cert.to_json()))
    print(key.keyid)
    return EXIT_PASS


def cmd_va_issue(args) -> int:
    issuer = _load_keypair(args, args.key)
    subject = _load_public(args, args.subject_key)
    cert = issue_authority_cert(issuer, issuer.keyid, args.name, subject, _validity(args))
    _write(args.output or f"{args.name}.va.json", canonicalize(cert.to_json()))
    print(subject.keyid)
    return EXIT_PASS


def _keyid_arg(args, ref: str) -> str:
    if len(ref) == 64 and all(c in "0123456789abcdef" for c in ref):
        return ref
    return _load_public(args, ref).keyid


def cmd_va_certify_tool(args) -> int:
    key = _load_keypair(args, args.key)
    keyids = [_keyid_arg(args, k) for k in args.keyid or ()]
    try:
        measurements = [Digest.parse(m) for m in args.measurement or ()]
    except DecodeError as exc:
        raise CliError(f"--measurement: {exc}") from exc
    if not keyids and not measurements:
        raise CliError("certify-tool needs at least one --keyid or --measurement")
    cert = issue_tool_certification(
        key, key.keyid, args.tool, args.version, args.property, _validity(args),
        keyids=keyids, measurements=measurements,
    )
    _write(args.output or f"{args.tool}.tc.json", canonicalize(cert.to_json()))
    print(cert.digest)
    return EXIT_PASS


def cmd_measure(args) -> int:
    print(enclave_measurement(args.tool, args.version, _hash_file(args.code)))
    return EXIT_PASS


def _split_input(value: str):
    path, sep, upstream = value.rpartition("@")
    if sep and upstream.startswith("sha256:"):
        try:
            return path, Digest.parse(upstream)
        except DecodeError as exc:
            raise CliError(f"--input {value!r}: {exc}") from exc
    return value, None


def _hash_all(paths: Sequence[str]) -> list:
    # order-stable: map preserves argument order
    with ThreadPoolExecutor(max_workers=min(8, max(1, len(paths)))) as pool:
        return list(pool.map(_hash_file, paths))


def cmd_record(args) -> int:
    params = {}
    for p in args.param or ():
        k, sep, v = p.partition("=")
        if not sep or not k:
            raise CliError(f"--param {p!r} must look like key=value")
        params[k] = v

    inputs = [_split_input(s) for s in args.input or ()]
    outputs = [(o, o) for o in args.output or ()]
    outputs += [(r, "report:" + os.path.basename(r)) for r in args.report or ()]
    digests = _hash_all([p for p, _ in inputs] + [p for p, _ in outputs])
    in_digests, out_digests = digests[: len(inputs)], digests[len(inputs):]

    tee = (args.tee_platform_key, args.tee_platform_id, args.tee_code)
    evidence = None
    if any(tee):
        if not all(tee):
            raise CliError("--tee-platform-key, --tee-platform-id and --tee-code go together")
        if args.key:
            raise CliError("--key cannot be combined with TEE flags; the enclave derives its own key")
        platform = _load_keypair(args, args.tee_platform_key)
        measurement = enclave_measurement(args.tool, args.version, _hash_file(args.tee_code))
        key, evidence = simulate_enclave_keygen(measurement, platform, args.tee_platform_id, _seed(args))
    elif args.key:
        key = _load_keypair(args, args.key)
    else:
        raise CliError("record needs --key or the TEE flags")

    try:
        stmt = create_statement(
            ToolInfo(args.tool, args.version, key.keyid),
            args.type,
            params,
            [InputRef(ArtifactRef(os.path.basename(p), d), up) for (p, up), d in zip(inputs, in_digests)],
            [ArtifactRef(os.path.basename(name) if not name.startswith("report:") else name, d)
             for (_, name), d in zip(outputs, out_digests)],
            _now(args),
        )
    except CdiError as exc:
        raise CliError(str(exc)) from exc
    signed = sign_statement(stmt, key, evidence)
    _write(args.statement_out or f"{args.tool}.cdi.json", canonicalize(signed.to_json()))
    print(statement_digest(signed))
    return EXIT_PASS


def _load_statement(path: str) -> SignedStatement:
    try:
        return SignedStatement.from_json(_read_json(path))
    except DecodeError as exc:
        raise CliError(f"{path}: {exc}") from exc


def cmd_bundle(args) -> int:
    deployed = ArtifactRef(os.path.basename(args.artifact), _hash_file(args.artifact))
    statements = {}
    for path in args.statement:
        s = _load_statement(path)
        statements.setdefault(statement_digest(s), s)
    try:
        link_chain(statements.values(), deployed.digest)
    except ChainError as exc:
        raise CliError(str(exc)) from exc

    def load_all(paths, cls):
        out = {}
        for path in paths or ():
            try:
                c = cls.from_json(_read_json(path))
            except DecodeError as exc:
                raise CliError(f"{path}: {exc}") from exc
            out.setdefault(c.digest, c)
        return [out[d] for d in sorted(out)]

    bundle = Bundle(
        deployed,
        tuple(statements[d] for d in sorted(statements)),
        tuple(load_all(args.cert, ToolCertification)),
        tuple(load_all(args.va_cert, AuthorityCertificate)),
    )
    _write(args.output or "bundle.json", canonicalize(bundle.to_json()))
    return EXIT_PASS


def verify_documents(bundle_doc, policy_doc, *, time: Optional[int] = None,
                     artifact_digest: Optional[Digest] = None):
    """Validate parsed bundle/policy documents; returns ``(report, exit code)``.

    Raises :class:`DecodeError` when either document is structurally invalid.
    """
    bundle = Bundle.from_json(bundle_doc)
    policy = TrustPolicy.from_json(policy_doc)
    if time is not None:
        policy = policy.replace(evaluation_time=time)
    report = validate_bundle(bundle, policy)
    if artifact_digest is not None and artifact_digest != bundle.deployed.digest:
        extra = Violation("-", "deployed-mismatch", f"artifact digests to {artifact_digest}, bundle names {bundle.deployed.digest}")
        report = ValidationReport(
            tuple(sorted(report.violations + (extra,), key=Violation.sort_key)),
            report.per_statement_trust,
        )
    return report, EXIT_PASS if report.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    bundle_doc = _read_json(args.bundle)
    policy_doc = _read_json(args.policy)
    artifact = _hash_file(args.artifact) if args.artifact else None
    try:
        report, code = verify_documents(bundle_doc, policy_doc, time=args.time, artifact_digest=artifact)
    except DecodeError as exc:
        raise CliError(str(exc)) from exc
    data = report.to_bytes()
    if args.output:
        _write(args.output, data)
    sys.stdout.write(data.decode("utf-8") + "\n")
    return code


def _expand(doc):
    """Decode base64 payloads in place so a human can read them."""
    if isinstance(doc, dict):
        out = {}
        for k, v in doc.items():
            if k == "payload" and isinstance(v, str):
                try:
                    out[k] = loads(decode_payload(v))
                    continue
                except DecodeError:
                    pass
            out[k] = _expand(v)
        return out
    if isinstance(doc, list):
        return [_expand(x) for x in doc]
    return doc


def cmd_inspect(args) -> int:
    doc = _read_json(args.file)
    try:
        signed = SignedStatement.from_json(doc)
        signed.payload
    except DecodeError:
        pass
    else:
        print(f"# statement {statement_digest(signed)}")
    print(json.dumps(_expand(doc), indent=2, sort_keys=True, ensure_ascii=False))
    return EXIT_PASS


# -- argument parsing --------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--key-dir", help=f"directory holding key files (default ${KEY_DIR_ENV} or .)")
    p.add_argument("--seed", help="hex seed for deterministic key generation (testing)")
    p.add_argument("--time", type=int, help="Unix time to use instead of the clock")
    return p


def _output_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("-o", "--output", help="output file ('-' for stdout)")


def _validity_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--not-before", type=int)
    p.add_argument("--not-after", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cdi", description="Signed supply-chain provenance and trust policies")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", parents=[common], help="generate an Ed25519 key pair")
    p.add_argument("name")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_keygen)

    va = sub.add_parser("va", help="vetting authority operations")
    va_sub = va.add_subparsers(dest="va_command", required=True)

    p = va_sub.add_parser("init", parents=[common], help="self-signed root authority certificate")
    p.add_argument("--key", required=True)
    p.add_argument("--name", required=True)
    _validity_flags(p)
    _output_flag(p)
    p.set_defaults(func=cmd_va_init)

    p = va_sub.add_parser("issue", parents=[common], help="certificate for a subordinate authority")
    p.add_argument("--key", required=True, help="issuing authority's private key")
    p.add_argument("--subject-key", required=True, help="subordinate authority's public key")
    p.add_argument("--name", required=True)
    _validity_flags(p)
    _output_flag(p)
    p.set_defaults(func=cmd_va_issue)

    p = va_sub.add_parser("certify-tool", parents=[common], help="sign a tool certification")
    p.add_argument("--key", required=True)
    p.add_argument("--tool", required=True)
    p.add_argument("--version", required=True, help="exact version or '*'")
    p.add_argument("--keyid", action="append", help="certified signing keyid or public key file (repeatable)")
    p.add_argument("--measurement", action="append", help="certified enclave measurement (repeatable)")
    p.add_argument("--property", action="append", required=True)
    _validity_flags(p)
    _output_flag(p)
    p.set_defaults(func=cmd_va_certify_tool)

    p = sub.add_parser("measure", parents=[common], help="enclave measurement of a tool binary")
    p.add_argument("--tool", required=True)
    p.add_argument("--version", required=True)
    p.add_argument("--code", required=True)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("record", parents=[common], help="record and sign one supply-chain operation")
    p.add_argument("--tool", required=True)
    p.add_argument("--version", required=True)
    p.add_argument("--type", required=True, choices=["transform", "inspect"])
    p.add_argument("--param", action="append", metavar="K=V")
    p.add_argument("--input", action="append", metavar="PATH[@DIGEST]")
    p.add_argument("--output", action="append", metavar="PATH",
                   help="artifact produced by the operation (repeatable)")
    p.add_argument("--report", action="append", metavar="PATH", help="inspection report artifact (repeatable)")
    p.add_argument("--key")
    p.add_argument("--tee-platform-key")
    p.add_argument("--tee-platform-id")
    p.add_argument("--tee-code", help="tool binary whose digest enters the enclave measurement")
    p.add_argument("--statement-out", metavar="FILE", help="where to write the signed statement (default <tool>.cdi.json)")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("bundle", parents=[common], help="assemble a deployable bundle")
    p.add_argument("--artifact", required=True)
    p.add_argument("--statement", action="append", required=True)
    p.add_argument("--cert", action="append")
    p.add_argument("--va-cert", action="append")
    _output_flag(p)
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("verify", parents=[common], help="validate a bundle against a trust policy")
    p.add_argument("--bundle", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--artifact", help="also check that this file is the deployed artifact")
    _output_flag(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", parents=[common], help="pretty-print any cdi file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cdi: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except CdiError as exc:
        print(f"cdi: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
