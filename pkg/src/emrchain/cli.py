"""Command-line clients and the network harness.

    emrchain patient register|create-record|grant|revoke|show-record|share-key|recover
    emrchain doctor  register|upload|read|share-research
    emrchain harness run|serve

Exit codes: 0 success, 1 transport or unexpected failure, 2 usage error,
3 permission denied, 4 not found, 5 cryptographic or signature failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from . import crypto
from .chaincode import Right, parse_category
from .client import (
    CliProfile,
    DoctorClient,
    PatientClient,
    WireError,
    doctor_from_profile,
    patient_from_profile,
)
from .errors import EmrChainError
from .harness import HarnessPlan, LocalNetwork, ServeConfig, run_plan
from .node import b64d, b64e
from .wire import TcpChannel, parse_address

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DENIED = 3
EXIT_NOT_FOUND = 4
EXIT_CRYPTO = 5

_DENIED = {"PERMISSION_DENIED", "ROLE_DENIED", "NOT_OWNER"}
_NOT_FOUND = {"NO_RECORD", "NOT_FOUND", "UNKNOWN_CERT", "UNKNOWN_PATIENT",
              "UNKNOWN_PRACTITIONER"}
_CRYPTO = {"AUTHENTICATION_FAILURE", "VERSION_MISMATCH", "BAD_SIGNATURE",
           "BAD_ISSUER_SIGNATURE", "CERT_EXPIRED"}


def exit_code_for(code: str) -> int:
    if code in _DENIED:
        return EXIT_DENIED
    if code in _NOT_FOUND:
        return EXIT_NOT_FOUND
    if code in _CRYPTO:
        return EXIT_CRYPTO
    return EXIT_ERROR


def _channel(address: str) -> TcpChannel:
    host, port = parse_address(address)
    return TcpChannel(host, port)


def _load_patient(args) -> tuple[CliProfile, PatientClient]:
    profile = CliProfile.load(args.profile)
    client = patient_from_profile(profile, _channel(profile.node))
    return profile, client


def _load_doctor(args) -> tuple[CliProfile, DoctorClient]:
    profile = CliProfile.load(args.profile)
    client = doctor_from_profile(profile, _channel(profile.node))
    return profile, client


def _print_receipt(receipt: dict) -> None:
    print(f"tx {receipt['tx_id']} {receipt['status']}"
          + (f" code={receipt['code']}" if receipt.get("code") not in (None, "OK") else "")
          + (f" height={receipt['height']}" if receipt.get("height") is not None else ""))


def _check_receipt(receipt: dict) -> int:
    if receipt["status"] == "committed":
        return EXIT_OK
    if receipt["status"] in ("failed", "rejected"):
        return exit_code_for(receipt.get("code") or "ERROR")
    return EXIT_ERROR


# --------------------------------------------------------------------- patient

def cmd_patient_register(args) -> int:
    uii = crypto.Uii.from_dict(json.loads(Path(args.uii_file).read_text("utf-8")))
    client = PatientClient(args.user_id, uii, _channel(args.node))
    client.register()
    profile = CliProfile(
        role="patient", user_id=args.user_id, node=args.node,
        sign_secret=client.sign.secret, enc_secret=client.enc.secret,
        master_key=client.master.key, master_version=client.master.version,
        uii=uii.to_dict(), cert=client.cert_bytes,
    )
    profile.save(args.out)
    print(f"registered patient {args.user_id}")
    print(f"pseudonym {client.pseudonym.hex()}")
    print(f"profile written to {args.out}")
    return EXIT_OK


def cmd_patient_create_record(args) -> int:
    _, client = _load_patient(args)
    receipt = client.create_record()
    _print_receipt(receipt)
    return _check_receipt(receipt)


def cmd_patient_grant(args) -> int:
    _, client = _load_patient(args)
    receipt = client.grant(
        doctor_id=args.doctor,
        right=Right.parse(args.right),
        category=parse_category(args.category),
        valid_from=args.from_ms,
        valid_to=args.to_ms,
        study_id=args.study,
        anonymity=args.anonymity if args.right == "share" else None,
    )
    _print_receipt(receipt)
    return _check_receipt(receipt)


def cmd_patient_revoke(args) -> int:
    _, client = _load_patient(args)
    receipt = client.revoke(
        doctor_id=args.doctor,
        right=Right.parse(args.right),
        category=parse_category(args.category),
        study_id=args.study,
    )
    _print_receipt(receipt)
    return _check_receipt(receipt)


def cmd_patient_show_record(args) -> int:
    _, client = _load_patient(args)
    record = client.show_record()
    print(json.dumps(record, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_patient_share_key(args) -> int:
    _, client = _load_patient(args)
    wrapped = client.share_key(args.doctor)
    Path(args.out).write_bytes(wrapped)
    print(f"pseudonym {client.pseudonym.hex()}")
    print(f"wrapped key written to {args.out}")
    return EXIT_OK


def cmd_patient_recover(args) -> int:
    profile, client = _load_patient(args)
    backup = Path(args.profile).with_suffix(".bak")
    shutil.copyfile(args.profile, backup)
    result = client.recover()
    profile.master_key = client.master.key
    profile.master_version = client.master.version
    profile.save(args.profile)
    print(f"rotated {result['rotated']} blobs")
    print(f"old pseudonym {result['old_pseudonym']}")
    print(f"new pseudonym {result['new_pseudonym']}")
    print(f"previous profile archived at {backup}")
    return _check_receipt(result["migration"])


# --------------------------------------------------------------------- doctor

def cmd_doctor_register(args) -> int:
    client = DoctorClient(args.user_id, _channel(args.node))
    client.register()
    profile = CliProfile(
        role="doctor", user_id=args.user_id, node=args.node,
        sign_secret=client.sign.secret, enc_secret=client.enc.secret,
        cert=client.cert_bytes,
    )
    profile.save(args.out)
    print(f"registered doctor {args.user_id}")
    print(f"profile written to {args.out}")
    return EXIT_OK


def cmd_doctor_upload(args) -> int:
    _, client = _load_doctor(args)
    data = Path(args.file).read_bytes()
    receipt = client.upload(
        pseudonym=bytes.fromhex(args.pseudonym),
        category=parse_category(args.category),
        data=data,
        wrapped_master=Path(args.wrapped_key).read_bytes(),
    )
    _print_receipt(receipt)
    if receipt["status"] == "committed":
        print(f"path {receipt['path']}")
        print(f"hash {receipt['hash']}")
    return _check_receipt(receipt)


def cmd_doctor_read(args) -> int:
    _, client = _load_doctor(args)
    category = parse_category(args.category) if args.category else None
    documents = client.read(
        pseudonym=bytes.fromhex(args.pseudonym),
        wrapped_master=Path(args.wrapped_key).read_bytes(),
        category=category,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for item, plaintext in documents:
        name = item["path"].rsplit("/", 1)[-1]
        target = out_dir / f"{item['category']}-{name}.bin"
        target.write_bytes(plaintext)
        print(f"{item['category']} {item['path']} -> {target}")
    print(f"{len(documents)} documents")
    return EXIT_OK


def cmd_doctor_share_research(args) -> int:
    _, client = _load_doctor(args)
    package = client.share_research(
        pseudonym=bytes.fromhex(args.pseudonym),
        study_id=args.study,
        category=parse_category(args.category),
        wrapped_master=Path(args.wrapped_key).read_bytes(),
    )
    Path(args.out).write_text(json.dumps(package, indent=2, sort_keys=True), "utf-8")
    print(f"package with {len(package['documents'])} documents written to {args.out}")
    print(f"anonymized: {package['anonymity']}")
    return EXIT_OK


# -------------------------------------------------------------------- harness

def cmd_harness_run(args) -> int:
    plan = HarnessPlan.from_file(args.plan)
    report = run_plan(plan)
    for node_id, height in sorted(report["committed_heights"].items()):
        print(f"{node_id} height={height}")
    print(f"divergence: {report['divergence']}")
    print(f"delivered messages: {report['metrics']['delivered']}")
    print(f"pending receipts: {report['metrics']['pending']}")
    if args.json:
        Path(args.json).write_text(
            json.dumps(report, sort_keys=True, separators=(",", ":")), "utf-8"
        )
        print(f"report written to {args.json}")
    return EXIT_ERROR if report["divergence"] else EXIT_OK


def cmd_harness_serve(args) -> int:
    config = ServeConfig.from_file(args.config)
    network = LocalNetwork(config)
    network.start()
    for node_id, address in zip(sorted(network.nodes), network.addresses()):
        print(f"{node_id} listening on {address}")
    print("press Ctrl-C to stop")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        network.stop()
    return EXIT_OK


# ------------------------------------------------------------------ arg parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emrchain")
    sub = parser.add_subparsers(dest="command", required=True)

    patient = sub.add_parser("patient", help="patient-role client")
    psub = patient.add_subparsers(dest="sub", required=True)

    p = psub.add_parser("register")
    p.add_argument("--user-id", required=True)
    p.add_argument("--uii-file", required=True)
    p.add_argument("--node", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patient_register)

    p = psub.add_parser("create-record")
    p.add_argument("--profile", required=True)
    p.set_defaults(func=cmd_patient_create_record)

    p = psub.add_parser("grant")
    p.add_argument("--profile", required=True)
    p.add_argument("--doctor", required=True)
    p.add_argument("--right", required=True, choices=["read", "write", "share"])
    p.add_argument("--category", required=True)
    p.add_argument("--from", dest="from_ms", type=int, required=True)
    p.add_argument("--to", dest="to_ms", type=int, required=True)
    p.add_argument("--study")
    p.add_argument("--anonymity", action="store_true")
    p.set_defaults(func=cmd_patient_grant)

    p = psub.add_parser("revoke")
    p.add_argument("--profile", required=True)
    p.add_argument("--doctor", required=True)
    p.add_argument("--right", required=True, choices=["read", "write", "share"])
    p.add_argument("--category", required=True)
    p.add_argument("--study")
    p.set_defaults(func=cmd_patient_revoke)

    p = psub.add_parser("show-record")
    p.add_argument("--profile", required=True)
    p.set_defaults(func=cmd_patient_show_record)

    p = psub.add_parser("share-key")
    p.add_argument("--profile", required=True)
    p.add_argument("--doctor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patient_share_key)

    p = psub.add_parser("recover")
    p.add_argument("--profile", required=True)
    p.set_defaults(func=cmd_patient_recover)

    doctor = sub.add_parser("doctor", help="doctor-role client")
    dsub = doctor.add_subparsers(dest="sub", required=True)

    p = dsub.add_parser("register")
    p.add_argument("--user-id", required=True)
    p.add_argument("--node", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_doctor_register)

    p = dsub.add_parser("upload")
    p.add_argument("--profile", required=True)
    p.add_argument("--pseudonym", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--wrapped-key", required=True)
    p.add_argument("file")
    p.set_defaults(func=cmd_doctor_upload)

    p = dsub.add_parser("read")
    p.add_argument("--profile", required=True)
    p.add_argument("--pseudonym", required=True)
    p.add_argument("--wrapped-key", required=True)
    p.add_argument("--category")
    p.add_argument("--out-dir", default="emrchain-read")
    p.set_defaults(func=cmd_doctor_read)

    p = dsub.add_parser("share-research")
    p.add_argument("--profile", required=True)
    p.add_argument("--pseudonym", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--wrapped-key", required=True)
    p.add_argument("--out", default="research-package.json")
    p.set_defaults(func=cmd_doctor_share_research)

    harness = sub.add_parser("harness", help="network harness")
    hsub = harness.add_subparsers(dest="sub", required=True)

    p = hsub.add_parser("run")
    p.add_argument("--plan", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_harness_run)

    p = hsub.add_parser("serve")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_harness_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WireError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exit_code_for(exc.code)
    except EmrChainError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exit_code_for(exc.code)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except PermissionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ConnectionError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
