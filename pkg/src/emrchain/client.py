"""Role-based clients for patients and doctors.

Clients own all their key material: the signing and encryption pairs, and
for patients the symmetric master key.  The master key leaves the client
only wrapped under some recipient's X25519 public key (a clinician's for
sharing, a node's for server-side encrypt/decrypt work).
"""

from __future__ import annotations

import json
import os
import random
import stat
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .chaincode import MetadataItem, Permission, Right
from .errors import EmrChainError
from .ledger import KIND_INVOKE, KIND_QUERY, Transaction
from .membership import Role, cert_from_bytes
from .node import b64d, b64e
from .wire import NodeChannel


class WireError(EmrChainError):
    """Server-reported failure; ``code`` is the wire error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _unwrap_response(response: dict) -> dict:
    if not response.get("ok"):
        raise WireError(response.get("error", "ERROR"), response.get("message", ""))
    return response


def _now_ms() -> int:
    return int(time.time() * 1000)


class _BaseClient:
    def __init__(self, user_id: str, channel: NodeChannel,
                 sign: crypto.SigningKeyPair | None = None,
                 enc: crypto.EncryptionKeyPair | None = None,
                 clock=None, rand: random.Random | None = None):
        self.user_id = user_id
        self.channel = channel
        self.rand = rand
        self.sign = sign or crypto.SigningKeyPair.generate(rand)
        self.enc = enc or crypto.EncryptionKeyPair.generate(rand)
        self.clock = clock or _now_ms
        self.cert_bytes: bytes | None = None
        self._last_tx_ts = 0

    @property
    def cert_id(self) -> str:
        return f"ecert:{self.user_id}"

    def _next_ts(self) -> int:
        ts = max(self.clock(), self._last_tx_ts + 1)
        self._last_tx_ts = ts
        return ts

    def _request(self, frame: dict) -> dict:
        return _unwrap_response(self.channel.request(frame))

    def _register(self, role: Role, uii: crypto.Uii | None = None) -> dict:
        frame = {
            "op": "register",
            "user_id": self.user_id,
            "role": role.value,
            "sign_public": b64e(self.sign.public),
            "enc_public": b64e(self.enc.public),
        }
        if uii is not None:
            frame["uii"] = uii.to_dict()
        response = self._request(frame)
        self.cert_bytes = b64d(response["cert"])
        return response

    def _invoke(self, function: str, args: list[bytes]) -> dict:
        tx = Transaction.make_signed(
            self.sign.secret, KIND_INVOKE, function, args, self.cert_id, self._next_ts()
        )
        return self._request({"op": "invoke", "tx": b64e(tx.to_bytes())})

    def _query_tx(self, function: str, args: list[bytes]) -> Transaction:
        return Transaction.make_signed(
            self.sign.secret, KIND_QUERY, function, args, self.cert_id, self._next_ts()
        )

    def _query(self, function: str, args: list[bytes]) -> dict:
        tx = self._query_tx(function, args)
        return self._request({"op": "query", "tx": b64e(tx.to_bytes())})

    def node_enc_public(self) -> bytes:
        return b64d(self._request({"op": "node_enc_key"})["enc_public"])

    def fetch_user_cert(self, user_id: str):
        response = self._request({"op": "get_cert", "user_id": user_id})
        return cert_from_bytes(b64d(response["cert"]))

    def request_tcert(self) -> tuple:
        """Fresh unlinkable transaction certificate plus its signing key."""
        if self.cert_bytes is None:
            raise WireError("UNKNOWN_CERT", "client is not registered")
        response = self._request({"op": "issue_tcert", "cert": b64e(self.cert_bytes)})
        return cert_from_bytes(b64d(response["tcert"])), b64d(response["sign_secret"])


class PatientClient(_BaseClient):
    def __init__(self, user_id: str, uii: crypto.Uii, channel: NodeChannel,
                 master: crypto.PatientMasterKey | None = None, **kwargs):
        super().__init__(user_id, channel, **kwargs)
        self.uii = uii
        self.master = master or crypto.PatientMasterKey.generate(rand=self.rand)

    @property
    def pseudonym(self) -> bytes:
        return crypto.derive_pseudonym(self.master, self.uii)

    def register(self) -> dict:
        return self._register(Role.PATIENT, self.uii)

    def create_record(self) -> dict:
        return self._invoke("createRecord", [self.pseudonym])

    def grant(self, doctor_id: str, right: Right, category: str,
              valid_from: int, valid_to: int, study_id: str | None = None,
              anonymity: bool | None = None, timestamp: int | None = None) -> dict:
        perm = Permission(
            doctor_id=doctor_id, right=right, category=category,
            valid_from=valid_from, valid_to=valid_to,
            timestamp=self._next_ts() if timestamp is None else timestamp,
            study_id=study_id, anonymity=anonymity,
        )
        return self._invoke("addPermission", [self.pseudonym, perm.to_bytes()])

    def revoke(self, doctor_id: str, right: Right, category: str,
               study_id: str | None = None) -> dict:
        """Supersede the active grant with one whose window already ended."""
        now = self.clock()
        return self.grant(doctor_id, right, category, 0, max(0, now - 1),
                          study_id=study_id,
                          anonymity=False if right is Right.SHARE else None)

    def show_record(self) -> dict:
        return self._query("getRecord", [self.pseudonym])["record"]

    def set_private_data(self, note: bytes) -> dict:
        """Private notes ride encrypted under the patient's own keypair."""
        ciphertext = crypto.wrap_for(self.enc.public, note, self.rand) if note else b""
        return self._invoke("setPrivateData", [self.pseudonym, ciphertext])

    def read_private_data(self) -> bytes | None:
        record = self.show_record()
        if not record.get("private_data"):
            return None
        return crypto.unwrap_with(self.enc.secret, b64d(record["private_data"]))

    def share_key(self, doctor_id: str) -> bytes:
        """Wrap the master key for a clinician's encryption public key."""
        cert = self.fetch_user_cert(doctor_id)
        return crypto.wrap_master_for(cert.enc_public, self.master, self.rand)

    def read_documents(self, category: str | None = None) -> list[tuple[dict, bytes]]:
        """Fetch and decrypt the patient's own stored documents."""
        record = self.show_record()
        out = []
        for item in record["items"]:
            if category is not None and item["category"] != category:
                continue
            response = self._query("fetchBlob", [item["path"].encode("utf-8")])
            envelope = crypto.Envelope.from_bytes(b64d(response["envelope"]))
            out.append((item, crypto.decrypt_blob(self.master, envelope)))
        return out

    def recover(self) -> dict:
        """Key-loss/compromise recovery: prove UII to the membership
        service, rotate every stored blob to a fresh master key, and
        migrate the ledger record to the new pseudonym."""
        confirmed = self._request({"op": "recover_access", "uii": self.uii.to_dict()})
        if confirmed["user_id"] != self.user_id:
            raise WireError("UNKNOWN_PATIENT", "recovered identity does not match")
        old_master = self.master
        old_pseudonym = self.pseudonym
        new_master = crypto.PatientMasterKey.generate(
            version=old_master.version + 1, rand=self.rand
        )
        node_pub = self.node_enc_public()
        rotate_tx = self._query_tx("rotateBlobs", [old_pseudonym])
        rotated = self._request({
            "op": "rotate_blobs",
            "tx": b64e(rotate_tx.to_bytes()),
            "wrapped_old": b64e(crypto.wrap_master_for(node_pub, old_master, self.rand)),
            "wrapped_new": b64e(crypto.wrap_master_for(node_pub, new_master, self.rand)),
        })
        self.master = new_master
        receipt = self._invoke("migrateRecord", [old_pseudonym, self.pseudonym])
        return {
            "rotated": rotated["rotated"],
            "old_pseudonym": old_pseudonym.hex(),
            "new_pseudonym": self.pseudonym.hex(),
            "migration": receipt,
        }


class DoctorClient(_BaseClient):
    def register(self) -> dict:
        return self._register(Role.DOCTOR)

    def unwrap_master(self, wrapped: bytes) -> crypto.PatientMasterKey:
        return crypto.unwrap_master(self.enc.secret, wrapped)

    def upload(self, pseudonym: bytes, category: str, data: bytes,
               wrapped_master: bytes) -> dict:
        """Store one document and anchor its path and hash on the ledger."""
        master = self.unwrap_master(wrapped_master)
        blob_id = crypto.rand_bytes(16, self.rand).hex()
        path = f"store/{pseudonym.hex()}/{category}/{blob_id}"
        item = MetadataItem(
            doctor_id=self.user_id, category=category, path_to_file=path,
            file_hash=crypto.sha256(data), timestamp=self._next_ts(),
        )
        tx = Transaction.make_signed(
            self.sign.secret, KIND_INVOKE, "addMetadataItem",
            [pseudonym, item.to_bytes()], self.cert_id, self._next_ts(),
        )
        node_pub = self.node_enc_public()
        return self._request({
            "op": "upload",
            "tx": b64e(tx.to_bytes()),
            "plaintext": b64e(data),
            "wrapped_master": b64e(crypto.wrap_master_for(node_pub, master, self.rand)),
        })

    def get_record(self, pseudonym: bytes) -> dict:
        return self._query("getRecord", [pseudonym])["record"]

    def read(self, pseudonym: bytes, wrapped_master: bytes,
             category: str | None = None) -> list[tuple[dict, bytes]]:
        """Fetch and decrypt every readable document, newest last."""
        master = self.unwrap_master(wrapped_master)
        record = self.get_record(pseudonym)
        out = []
        for item in record["items"]:
            if category is not None and item["category"] != category:
                continue
            response = self._query("fetchBlob", [item["path"].encode("utf-8")])
            envelope = crypto.Envelope.from_bytes(b64d(response["envelope"]))
            out.append((item, crypto.decrypt_blob(master, envelope)))
        return out

    def share_research(self, pseudonym: bytes, study_id: str, category: str,
                       wrapped_master: bytes) -> dict:
        master = self.unwrap_master(wrapped_master)
        tx = self._query_tx(
            "prepareResearchPackage",
            [pseudonym, study_id.encode("utf-8"), category.encode("utf-8")],
        )
        node_pub = self.node_enc_public()
        return self._request({
            "op": "research",
            "tx": b64e(tx.to_bytes()),
            "wrapped_master": b64e(crypto.wrap_master_for(node_pub, master, self.rand)),
        })


# --------------------------------------------------------------------------
# Profiles: persisted client identity for the command-line tools
# --------------------------------------------------------------------------

@dataclass
class CliProfile:
    role: str
    user_id: str
    node: str
    sign_secret: bytes
    enc_secret: bytes
    master_key: bytes | None = None
    master_version: int = 1
    uii: dict | None = None
    cert: bytes | None = None

    def to_json(self) -> str:
        data = {
            "role": self.role,
            "user_id": self.user_id,
            "node": self.node,
            "sign_secret": b64e(self.sign_secret),
            "enc_secret": b64e(self.enc_secret),
            "master_key": b64e(self.master_key) if self.master_key else None,
            "master_version": self.master_version,
            "uii": self.uii,
            "cert": b64e(self.cert) if self.cert else None,
        }
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CliProfile":
        data = json.loads(text)
        return cls(
            role=data["role"],
            user_id=data["user_id"],
            node=data["node"],
            sign_secret=b64d(data["sign_secret"]),
            enc_secret=b64d(data["enc_secret"]),
            master_key=b64d(data["master_key"]) if data.get("master_key") else None,
            master_version=data.get("master_version", 1),
            uii=data.get("uii"),
            cert=b64d(data["cert"]) if data.get("cert") else None,
        )

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_json(), "utf-8")
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str | Path) -> "CliProfile":
        path = Path(path)
        mode = stat.S_IMODE(path.stat().st_mode)
        if mode & 0o077:
            raise PermissionError(
                f"profile {path} is readable by other users (mode {oct(mode)}); chmod 600 it"
            )
        return cls.from_json(path.read_text("utf-8"))


def patient_from_profile(profile: CliProfile, channel: NodeChannel) -> PatientClient:
    client = PatientClient(
        user_id=profile.user_id,
        uii=crypto.Uii.from_dict(profile.uii),
        channel=channel,
        master=crypto.PatientMasterKey(profile.master_key, profile.master_version),
        sign=_pair_from_secret_sign(profile.sign_secret),
        enc=_pair_from_secret_enc(profile.enc_secret),
    )
    client.cert_bytes = profile.cert
    return client


def doctor_from_profile(profile: CliProfile, channel: NodeChannel) -> DoctorClient:
    client = DoctorClient(
        user_id=profile.user_id,
        channel=channel,
        sign=_pair_from_secret_sign(profile.sign_secret),
        enc=_pair_from_secret_enc(profile.enc_secret),
    )
    client.cert_bytes = profile.cert
    return client


def _pair_from_secret_sign(secret: bytes) -> crypto.SigningKeyPair:
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

    priv = Ed25519PrivateKey.from_private_bytes(secret)
    return crypto.SigningKeyPair(secret, priv.public_key().public_bytes_raw())


def _pair_from_secret_enc(secret: bytes) -> crypto.EncryptionKeyPair:
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

    priv = X25519PrivateKey.from_private_bytes(secret)
    return crypto.EncryptionKeyPair(secret, priv.public_key().public_bytes_raw())
