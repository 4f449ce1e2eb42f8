"""Node service: one running validator with its role-based client API.

Composes the replica, chaincode, ledger and blob store.  Mutating requests
become exactly one invoke transaction each; queries are answered from the
local state snapshot without a consensus round.

Key handling: requests that require the node to encrypt or decrypt (upload,
research packaging, blob rotation) carry the patient master key wrapped
under this node's X25519 public key.  The node unwraps in memory only;
nothing it persists can decrypt a stored envelope.
"""

from __future__ import annotations

import base64
import json
import random
import re
import threading
from typing import Callable

from . import crypto, errors
from .chaincode import Chaincode, MetadataItem, PatientRecord, ShareTicket
from .consensus import Replica
from .errors import (
    ChaincodeError,
    EmrChainError,
    NotFound,
    UnparseableDocument,
)
from .ledger import (
    KIND_INVOKE,
    KIND_QUERY,
    LedgerLog,
    Transaction,
    TxStatus,
    check_transaction,
)
from .membership import MembershipService, Role, cert_from_bytes, cert_identity
from .store import BlobRef, BlobStore

# Direct identifiers suppressed by anonymization, matched on normalized
# (lowercased, alphanumeric-only) field names.
IDENTIFIER_FIELDS = frozenset({
    "name", "names", "givenname", "givennames", "familyname", "fullname",
    "firstname", "lastname", "ssn", "dob", "dateofbirth", "birthdate",
    "zip", "zipcode", "postalcode", "address", "street",
    "patientid", "doctorid", "mrn", "phone", "email",
})

_NORMALIZE_RE = re.compile(r"[^a-z0-9]")


def _normalize_field(name: str) -> str:
    return _NORMALIZE_RE.sub("", name.lower())


def parse_structured_document(data: bytes) -> dict:
    """Documents eligible for anonymization are UTF-8 JSON objects."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UnparseableDocument(str(exc)) from exc
    if not isinstance(doc, dict):
        raise UnparseableDocument("document is not a field-tagged object")
    return doc


def anonymize_document(data: bytes) -> bytes:
    """Suppress direct-identifier fields; clinical fields pass through.

    Idempotent; raises :class:`UnparseableDocument` for free-form binary,
    which therefore can never be shared under an anonymity grant.
    """
    doc = parse_structured_document(data)
    kept = {k: v for k, v in doc.items() if _normalize_field(k) not in IDENTIFIER_FIELDS}
    return json.dumps(kept, sort_keys=True, separators=(",", ":")).encode("utf-8")


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


def render_record(record: PatientRecord) -> dict:
    return {
        "owner": record.owner,
        "permissions": [
            {
                "doctor_id": p.doctor_id,
                "right": p.right.token,
                "category": p.category,
                "from": p.valid_from,
                "to": p.valid_to,
                "timestamp": p.timestamp,
                **({"study_id": p.study_id} if p.study_id is not None else {}),
                **({"anonymity": p.anonymity} if p.anonymity is not None else {}),
            }
            for p in record.permissions
        ],
        "items": [
            {
                "doctor_id": i.doctor_id,
                "category": i.category,
                "path": i.path_to_file,
                "hash": i.file_hash.hex(),
                "timestamp": i.timestamp,
            }
            for i in record.items
        ],
        "private_data": b64e(record.private_data) if record.private_data else None,
    }


def render_ticket(ticket: ShareTicket) -> dict:
    return {
        "pseudonym": ticket.pseudonym.hex(),
        "doctor_id": ticket.doctor_id,
        "study_id": ticket.study_id,
        "category": ticket.category,
        "anonymity": ticket.anonymity,
        "issued_at": ticket.issued_at,
        "items": [{"path": i.path_to_file, "hash": i.file_hash.hex()} for i in ticket.items],
    }


class Node:
    """One validator node plus its client-facing service surface."""

    def __init__(
        self,
        replica: Replica,
        chaincode: Chaincode,
        store: BlobStore,
        membership: MembershipService,
        enc_keypair: crypto.EncryptionKeyPair,
        clock: Callable[[], int],
        rand: random.Random | None = None,
        ledger_log: LedgerLog | None = None,
    ):
        self.replica = replica
        self.chaincode = chaincode
        self.store = store
        self.membership = membership
        self.enc_keypair = enc_keypair
        self.clock = clock
        self.rand = rand
        self.ledger_log = ledger_log

        self.receipts: dict[bytes, dict] = {}
        self._receipt_events: dict[bytes, threading.Event] = {}
        self._pending_upload_blobs: dict[bytes, BlobRef] = {}
        self.commit_log: list[dict] = []

        replica.on_commit = self._on_commit

    @property
    def node_id(self) -> str:
        return self.replica.node_id

    @property
    def registry(self):
        return self.replica.registry

    # ------------------------------------------------------------- receipts

    def _on_commit(self, block, statuses: list[TxStatus], meta: dict) -> None:
        self.commit_log.append({
            "height": block.number,
            "block_hash": block.block_hash().hex(),
            "state_hash": block.state_hash.hex(),
            "quorum": meta.get("quorum"),
            "view": meta.get("view"),
            "source": meta.get("source"),
            "statuses": [(s.tx_id.hex(), s.ok, s.code) for s in statuses],
        })
        if self.ledger_log is not None and meta.get("source") != "replayed":
            self.ledger_log.append(block, meta.get("cert") or b"")
        for status in statuses:
            receipt = {
                "tx_id": status.tx_id.hex(),
                "status": "committed" if status.ok else "failed",
                "code": status.code,
                "height": block.number,
            }
            self.receipts[status.tx_id] = receipt
            ref = self._pending_upload_blobs.pop(status.tx_id, None)
            if ref is not None and not status.ok:
                # Failed upload invoke: remove the orphaned blob right away.
                self.store.delete_blob(ref)
            event = self._receipt_events.pop(status.tx_id, None)
            if event is not None:
                event.set()

    def receipt_for(self, tx_id: bytes) -> dict | None:
        return self.receipts.get(tx_id)

    def track_upload_blob(self, tx_id: bytes, ref: BlobRef) -> None:
        """Mark a stored blob as garbage unless its invoke commits cleanly."""
        self._pending_upload_blobs[tx_id] = ref

    # ---------------------------------------------------------- invoke path

    def pool_invoke(self, tx: Transaction, gossip: bool = True) -> dict:
        """Validate and pool one invoke; returns its (possibly final)
        receipt.  Must run on the replica's thread in threaded mode."""
        now = self.clock()
        code = self.replica.submit_tx(tx, now)
        tx_id = tx.tx_id
        if code is not None:
            receipt = {"tx_id": tx_id.hex(), "status": "rejected", "code": code, "height": None}
            self.receipts[tx_id] = receipt
            ref = self._pending_upload_blobs.pop(tx_id, None)
            if ref is not None:
                self.store.delete_blob(ref)
            event = self._receipt_events.pop(tx_id, None)
            if event is not None:
                event.set()
            return receipt
        existing = self.receipts.get(tx_id)
        if existing is not None:
            return existing
        if gossip:
            self.replica.gossip_tx(tx)
        receipt = {"tx_id": tx_id.hex(), "status": "pending", "code": None, "height": None}
        self.receipts.setdefault(tx_id, receipt)
        return receipt

    def _pool_marshalled(self, tx: Transaction) -> dict:
        """Pool on the replica's own thread when one exists (threaded
        transport), else directly (deterministic simulation)."""
        transport = self.replica.transport
        submit = getattr(transport, "submit", None)
        if submit is None:
            return self.pool_invoke(tx)
        done = threading.Event()
        box: dict = {}

        def run():
            box["receipt"] = self.pool_invoke(tx)
            done.set()

        submit(self.node_id, run)
        if not done.wait(timeout=5.0):
            return {"tx_id": tx.tx_id.hex(), "status": "pending", "code": None, "height": None}
        return box["receipt"]

    def submit_and_wait(self, tx: Transaction, timeout: float = 10.0) -> dict:
        """Pool an invoke and block until it commits or times out.  Under
        the simulated transport there is no background progress, so the
        receipt comes back as pooled (callers pump the scheduler)."""
        tx_id = tx.tx_id
        event = self._receipt_events.setdefault(tx_id, threading.Event())
        receipt = self._pool_marshalled(tx)
        if receipt["status"] != "pending":
            self._receipt_events.pop(tx_id, None)
            return receipt
        if getattr(self.replica.transport, "submit", None) is None:
            return receipt
        event.wait(timeout)
        receipt = self.receipts.get(tx_id)
        if receipt is None or receipt["status"] == "pending":
            return {"tx_id": tx_id.hex(), "status": "pending", "code": None, "height": None}
        return receipt

    # ----------------------------------------------------------- query path

    def submit_query(self, tx: Transaction) -> dict:
        """Serve a signed query from the local state snapshot."""
        if tx.kind != KIND_QUERY:
            raise ChaincodeError(errors.BAD_ARGS, "not a query transaction")
        code = check_transaction(tx, self.registry)
        if code is not None:
            raise ChaincodeError(code, "query failed admission checks")
        cert = self.registry.resolve(tx.submitter)
        identity = cert_identity(cert)
        now = self.clock()
        state = self.replica.ledger.state
        if tx.function == "getRecord":
            if len(tx.args) != 1:
                raise ChaincodeError(errors.BAD_ARGS, "getRecord expects 1 arg")
            record = self.chaincode.query_get_record(state, identity, cert.role,
                                                     tx.args[0], now)
            return {"record": render_record(record)}
        if tx.function == "authorizeShare":
            if len(tx.args) != 3:
                raise ChaincodeError(errors.BAD_ARGS, "authorizeShare expects 3 args")
            ticket = self.chaincode.query_authorize_share(
                state, identity, tx.args[0],
                tx.args[1].decode("utf-8"), tx.args[2].decode("utf-8"), now,
            )
            return {"ticket": render_ticket(ticket)}
        if tx.function == "fetchBlob":
            if len(tx.args) != 1:
                raise ChaincodeError(errors.BAD_ARGS, "fetchBlob expects 1 arg")
            ref = BlobRef.parse(tx.args[0].decode("utf-8"), self.store.categories)
            envelope = self.store.get_envelope(ref)
            return {"envelope": b64e(envelope.to_bytes())}
        raise ChaincodeError(errors.BAD_ARGS, f"unknown query {tx.function}")

    # ------------------------------------------------------------- uploads

    def upload_document(self, tx: Transaction, plaintext: bytes,
                        wrapped_master: bytes) -> dict:
        """Two-step upload: store the envelope, then run the signed
        addMetadataItem invoke.  A rejected invoke garbage-collects the
        blob immediately."""
        if tx.kind != KIND_INVOKE or tx.function != "addMetadataItem" or len(tx.args) != 2:
            raise ChaincodeError(errors.BAD_ARGS, "upload requires an addMetadataItem invoke")
        item = MetadataItem.from_bytes(tx.args[1])
        ref = BlobRef.parse(item.path_to_file, self.store.categories)
        pseudonym = tx.args[0]
        if ref.pseudonym_hex != pseudonym.hex() or ref.category != item.category:
            raise ChaincodeError(errors.BAD_ARGS, "item path does not match pseudonym/category")
        if crypto.sha256(plaintext) != item.file_hash:
            raise ChaincodeError(errors.BAD_ARGS, "file hash does not match plaintext")
        master = crypto.unwrap_master(self.enc_keypair.secret, wrapped_master)
        stored_ref, digest = self.store.put_blob(
            pseudonym, item.category, plaintext, master,
            rand=self.rand, blob_id=ref.blob_id,
        )
        self._pending_upload_blobs[tx.tx_id] = stored_ref
        receipt = self.submit_and_wait(tx)
        return {**receipt, "path": stored_ref.path, "hash": digest.hex()}

    # ------------------------------------------------------ research sharing

    def prepare_research_package(self, tx: Transaction, wrapped_master: bytes) -> dict:
        """Authorize via the share grant, fetch and decrypt the granted
        documents, anonymize when the grant demands it."""
        if tx.kind != KIND_QUERY or tx.function != "prepareResearchPackage" or len(tx.args) != 3:
            raise ChaincodeError(errors.BAD_ARGS, "bad research request")
        code = check_transaction(tx, self.registry)
        if code is not None:
            raise ChaincodeError(code, "research request failed admission checks")
        cert = self.registry.resolve(tx.submitter)
        identity = cert_identity(cert)
        now = self.clock()
        pseudonym = tx.args[0]
        study_id = tx.args[1].decode("utf-8")
        category = tx.args[2].decode("utf-8")
        ticket = self.chaincode.query_authorize_share(
            self.replica.ledger.state, identity, pseudonym, study_id, category, now,
        )
        master = crypto.unwrap_master(self.enc_keypair.secret, wrapped_master)
        documents = []
        provenance = []
        for item in ticket.items:
            ref = BlobRef.parse(item.path_to_file, self.store.categories)
            plaintext = self.store.get_blob(ref, master)
            if crypto.sha256(plaintext) != item.file_hash:
                raise crypto.AuthenticationFailure(
                    f"stored blob does not match ledger hash for {item.path_to_file}"
                )
            if ticket.anonymity:
                plaintext = anonymize_document(plaintext)
            documents.append(plaintext)
            provenance.append((item.path_to_file, item.file_hash.hex()))
        return {
            "study_id": ticket.study_id,
            "category": ticket.category,
            "anonymity": ticket.anonymity,
            "documents": [b64e(d) for d in documents],
            "provenance": [{"path": p, "hash": h} for p, h in provenance],
            "produced_at": ticket.issued_at,
        }

    # ------------------------------------------------------------- rotation

    def rotate_blobs(self, tx: Transaction, wrapped_old: bytes, wrapped_new: bytes) -> dict:
        """Rewrap all of one patient's blobs for a key rotation; the caller
        must own the record bound to the pseudonym."""
        if tx.kind != KIND_QUERY or tx.function != "rotateBlobs" or len(tx.args) != 1:
            raise ChaincodeError(errors.BAD_ARGS, "bad rotation request")
        code = check_transaction(tx, self.registry)
        if code is not None:
            raise ChaincodeError(code, "rotation request failed admission checks")
        cert = self.registry.resolve(tx.submitter)
        identity = cert_identity(cert)
        pseudonym = tx.args[0]
        raw = self.replica.ledger.state.get(pseudonym)
        if raw is None:
            raise ChaincodeError(errors.NO_RECORD, pseudonym.hex())
        record = PatientRecord.from_bytes(raw)
        if record.owner != identity:
            raise ChaincodeError(errors.PERMISSION_DENIED, "not the record owner")
        old = crypto.unwrap_master(self.enc_keypair.secret, wrapped_old)
        new = crypto.unwrap_master(self.enc_keypair.secret, wrapped_new)
        if new.version != old.version + 1:
            raise ChaincodeError(errors.BAD_ARGS, "new key version must follow the old")
        count = self.store.rotate_patient_blobs(pseudonym, old, new, rand=self.rand)
        return {"rotated": count}

    # -------------------------------------------------------------- wire API

    def handle_frame(self, line: str) -> str:
        """One request frame in, one response frame out (JSON per line,
        binary fields base64)."""
        try:
            request = json.loads(line)
            op = request["op"]
        except (json.JSONDecodeError, KeyError, TypeError):
            return _err(errors.BAD_ARGS, "unparseable request frame")
        try:
            handler = _WIRE_OPS.get(op)
            if handler is None:
                return _err(errors.BAD_ARGS, f"unknown op {op!r}")
            return _ok(handler(self, request))
        except EmrChainError as exc:
            return _err(exc.code, str(exc))
        except (KeyError, ValueError, TypeError) as exc:
            return _err(errors.BAD_ARGS, f"bad request: {exc}")


def _ok(payload: dict) -> str:
    return json.dumps({"ok": True, **payload}, sort_keys=True, separators=(",", ":"))


def _err(code: str, message: str) -> str:
    return json.dumps({"ok": False, "error": code, "message": message},
                      sort_keys=True, separators=(",", ":"))


# --- wire operation handlers -------------------------------------------------

def _op_ping(node: Node, request: dict) -> dict:
    return {"node": node.node_id, "height": node.replica.height,
            "view": node.replica.view}


def _op_register(node: Node, request: dict) -> dict:
    role = Role.parse(request["role"])
    uii = crypto.Uii.from_dict(request["uii"]) if "uii" in request else None
    cert = node.membership.register(
        user_id=request["user_id"],
        role=role,
        sign_public=b64d(request["sign_public"]),
        enc_public=b64d(request["enc_public"]),
        uii=uii,
    )
    node.registry.add(cert)
    return {"cert": b64e(cert.to_bytes()), "root_public": b64e(node.membership.root_public)}


def _op_issue_tcert(node: Node, request: dict) -> dict:
    ecert = cert_from_bytes(b64d(request["cert"]))
    tcert, secret = node.membership.issue_tcert(ecert)
    node.registry.add(tcert)
    return {"tcert": b64e(tcert.to_bytes()), "sign_secret": b64e(secret)}


def _op_get_cert(node: Node, request: dict) -> dict:
    cert = node.membership.get_cert(request["user_id"])
    return {"cert": b64e(cert.to_bytes())}


def _op_recover_access(node: Node, request: dict) -> dict:
    uii = crypto.Uii.from_dict(request["uii"])
    user_id = node.membership.recover_access(uii)
    return {"user_id": user_id}


def _op_invoke(node: Node, request: dict) -> dict:
    tx = Transaction.from_bytes(b64d(request["tx"]))
    return node.submit_and_wait(tx)


def _op_query(node: Node, request: dict) -> dict:
    tx = Transaction.from_bytes(b64d(request["tx"]))
    return node.submit_query(tx)


def _op_upload(node: Node, request: dict) -> dict:
    tx = Transaction.from_bytes(b64d(request["tx"]))
    return node.upload_document(tx, b64d(request["plaintext"]),
                                b64d(request["wrapped_master"]))


def _op_research(node: Node, request: dict) -> dict:
    tx = Transaction.from_bytes(b64d(request["tx"]))
    return node.prepare_research_package(tx, b64d(request["wrapped_master"]))


def _op_rotate(node: Node, request: dict) -> dict:
    tx = Transaction.from_bytes(b64d(request["tx"]))
    return node.rotate_blobs(tx, b64d(request["wrapped_old"]),
                             b64d(request["wrapped_new"]))


def _op_node_enc_key(node: Node, request: dict) -> dict:
    return {"enc_public": b64e(node.enc_keypair.public)}


_WIRE_OPS = {
    "ping": _op_ping,
    "register": _op_register,
    "issue_tcert": _op_issue_tcert,
    "get_cert": _op_get_cert,
    "recover_access": _op_recover_access,
    "invoke": _op_invoke,
    "query": _op_query,
    "upload": _op_upload,
    "research": _op_research,
    "rotate_blobs": _op_rotate,
    "node_enc_key": _op_node_enc_key,
}
