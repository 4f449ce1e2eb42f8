"""Smart-contract logic: patient records, consent grants, access checks.

Function and argument wire contract (args are positional byte strings on
the transaction):

====================  ======  =======================================================
function              kind    args
====================  ======  =======================================================
createRecord          invoke  pseudonym (32B)
addPermission         invoke  pseudonym (32B), Permission canonical bytes
addMetadataItem       invoke  pseudonym (32B), MetadataItem canonical bytes
setPrivateData        invoke  pseudonym (32B), ciphertext (may be empty = clear)
migrateRecord         invoke  old pseudonym (32B), new pseudonym (32B)
getRecord             query   pseudonym (32B)
authorizeShare        query   pseudonym (32B), study id (utf-8), category (utf-8)
====================  ======  =======================================================

Grant evaluation: among grants matching (doctor, right, category, and study
id when the right is share), the one with the latest creation timestamp
decides; its window must contain ``now``.  Revocation is a fresh grant
whose window already ended.  Share does not imply read.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

from . import crypto, errors
from .encoding import DecodeError, Reader, Writer
from .errors import ChaincodeError
from .ledger import (
    KIND_INVOKE,
    STATUS_OK,
    Transaction,
    TxStatus,
    WorldState,
    check_transaction,
)
from .membership import CertificateRegistry, Role, cert_identity

# The three clinical data categories used by default; deployments may
# configure a different closed set.
DEFAULT_CATEGORIES = ("history_physical_exams", "laboratory_results", "delivered_radiation_doses")

CATEGORY_ALIASES = {
    "history": "history_physical_exams",
    "lab": "laboratory_results",
    "dose": "delivered_radiation_doses",
}


def parse_category(token: str, categories: tuple[str, ...] = DEFAULT_CATEGORIES) -> str:
    name = CATEGORY_ALIASES.get(token, token)
    if name not in categories:
        raise ChaincodeError(errors.INVALID_CATEGORY, f"unknown category {token!r}")
    return name


class Right(IntEnum):
    READ = 0
    WRITE = 1
    SHARE = 2

    @property
    def token(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, token: str) -> "Right":
        try:
            return cls[token.upper()]
        except KeyError:
            raise ValueError(f"unknown right {token!r}") from None


@dataclass(frozen=True)
class Permission:
    """One patient-issued grant.  ``timestamp`` is the grant creation time
    and must be unique within a record; the latest one wins at evaluation."""

    doctor_id: str
    right: Right
    category: str
    valid_from: int
    valid_to: int
    timestamp: int
    study_id: str | None = None
    anonymity: bool | None = None

    def validate(self, categories: tuple[str, ...] = DEFAULT_CATEGORIES) -> None:
        if self.category not in categories:
            raise ChaincodeError(errors.INVALID_CATEGORY, self.category)
        if self.valid_from > self.valid_to:
            raise ChaincodeError(errors.INVALID_WINDOW, "from > to")
        if self.right is Right.SHARE:
            if not self.study_id:
                raise ChaincodeError(errors.MISSING_STUDY_ID, "share grants require a study id")
        else:
            if self.study_id is not None:
                raise ChaincodeError(errors.INVALID_PERMISSION, "study id only valid with share")
            if self.anonymity is not None:
                raise ChaincodeError(errors.INVALID_PERMISSION, "anonymity only valid with share")

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .str_(self.doctor_id)
            .u8(int(self.right))
            .str_(self.category)
            .u64(self.valid_from)
            .u64(self.valid_to)
            .u64(self.timestamp)
            .opt_str(self.study_id)
            .opt_bool(self.anonymity)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Permission":
        reader = Reader(data)
        perm = cls._read(reader)
        reader.expect_end()
        return perm

    @classmethod
    def _read(cls, reader: Reader) -> "Permission":
        doctor_id = reader.str_()
        right = Right(reader.u8())
        category = reader.str_()
        valid_from = reader.u64()
        valid_to = reader.u64()
        timestamp = reader.u64()
        study_id = reader.opt_str()
        anonymity = reader.opt_bool()
        return cls(doctor_id, right, category, valid_from, valid_to, timestamp,
                   study_id, anonymity)


@dataclass(frozen=True)
class MetadataItem:
    """Pointer to one encrypted file in the off-chain store."""

    doctor_id: str
    category: str
    path_to_file: str
    file_hash: bytes
    timestamp: int

    def validate(self, categories: tuple[str, ...] = DEFAULT_CATEGORIES) -> None:
        if self.category not in categories:
            raise ChaincodeError(errors.INVALID_CATEGORY, self.category)
        if len(self.file_hash) != crypto.DIGEST_LEN:
            raise ChaincodeError(errors.BAD_ARGS, "file hash must be 32 bytes")
        if not self.path_to_file:
            raise ChaincodeError(errors.BAD_ARGS, "empty path")

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .str_(self.doctor_id)
            .str_(self.category)
            .str_(self.path_to_file)
            .raw(self.file_hash)
            .u64(self.timestamp)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MetadataItem":
        reader = Reader(data)
        item = cls._read(reader)
        reader.expect_end()
        return item

    @classmethod
    def _read(cls, reader: Reader) -> "MetadataItem":
        return cls(
            doctor_id=reader.str_(),
            category=reader.str_(),
            path_to_file=reader.str_(),
            file_hash=reader.raw(crypto.DIGEST_LEN),
            timestamp=reader.u64(),
        )


@dataclass
class PatientRecord:
    """The on-ledger value: owner binding, grants, metadata, private data."""

    owner: str
    permissions: list[Permission] = field(default_factory=list)
    items: list[MetadataItem] = field(default_factory=list)
    private_data: bytes | None = None
    tombstone: bool = False

    def to_bytes(self) -> bytes:
        w = Writer().str_(self.owner).bool_(self.tombstone)
        w.u32(len(self.permissions))
        for perm in self.permissions:
            w.bytes_(perm.to_bytes())
        w.u32(len(self.items))
        for item in self.items:
            w.bytes_(item.to_bytes())
        w.opt_bytes(self.private_data)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PatientRecord":
        reader = Reader(data)
        owner = reader.str_()
        tombstone = reader.bool_()
        nperm = reader.u32()
        permissions = [Permission.from_bytes(reader.bytes_()) for _ in range(nperm)]
        nitem = reader.u32()
        items = [MetadataItem.from_bytes(reader.bytes_()) for _ in range(nitem)]
        private_data = reader.opt_bytes()
        reader.expect_end()
        return cls(owner, permissions, items, private_data, tombstone)

    def items_by_category(self) -> dict[str, list[MetadataItem]]:
        grouped: dict[str, list[MetadataItem]] = {}
        for item in self.items:
            grouped.setdefault(item.category, []).append(item)
        return grouped


def check_permission(record: PatientRecord, doctor_id: str, right: Right,
                     category: str, now: int, study_id: str | None = None) -> bool:
    """Pure predicate: does the latest matching grant cover ``now``?

    Ties on creation timestamp cannot occur for committed records (the
    chaincode rejects duplicates); defensively, the later-appended grant
    wins.
    """
    best: Permission | None = None
    for perm in record.permissions:
        if perm.doctor_id != doctor_id or perm.right is not right or perm.category != category:
            continue
        if right is Right.SHARE and perm.study_id != study_id:
            continue
        if best is None or perm.timestamp >= best.timestamp:
            best = perm
    if best is None:
        return False
    return best.valid_from <= now <= best.valid_to


def has_any_valid_grant(record: PatientRecord, doctor_id: str, now: int) -> bool:
    seen: dict[tuple, Permission] = {}
    for perm in record.permissions:
        if perm.doctor_id != doctor_id:
            continue
        key = (perm.right, perm.category, perm.study_id)
        prev = seen.get(key)
        if prev is None or perm.timestamp >= prev.timestamp:
            seen[key] = perm
    return any(p.valid_from <= now <= p.valid_to for p in seen.values())


@dataclass(frozen=True)
class ShareTicket:
    """Authorization snapshot consumed by research packaging."""

    pseudonym: bytes
    doctor_id: str
    study_id: str
    category: str
    anonymity: bool
    issued_at: int
    items: tuple[MetadataItem, ...]


class Chaincode:
    """Deterministic transition logic over the world state.

    Invokes run inside block application with the block timestamp as the
    clock; queries run against a state snapshot with node-local time.
    Every rejection is a :class:`ChaincodeError` with a stable code, so a
    failing transaction is recorded identically by every replica.
    """

    def __init__(self, registry: CertificateRegistry,
                 categories: tuple[str, ...] = DEFAULT_CATEGORIES):
        self.registry = registry
        self.categories = categories

    # -- helpers ------------------------------------------------------------

    def _load_record(self, state: WorldState, pseudonym: bytes,
                     allow_tombstone: bool = False) -> PatientRecord:
        if len(pseudonym) != crypto.DIGEST_LEN:
            raise ChaincodeError(errors.BAD_ARGS, "pseudonym must be 32 bytes")
        raw = state.get(pseudonym)
        if raw is None:
            raise ChaincodeError(errors.NO_RECORD, pseudonym.hex())
        record = PatientRecord.from_bytes(raw)
        if record.tombstone and not allow_tombstone:
            raise ChaincodeError(errors.NO_RECORD, pseudonym.hex())
        return record

    def _store_record(self, state: WorldState, pseudonym: bytes, record: PatientRecord) -> None:
        state.put(pseudonym, record.to_bytes())

    # -- invoke path ----------------------------------------------------------

    def execute(self, state: WorldState, tx: Transaction, now_ms: int) -> TxStatus:
        """Apply one invoke; failures mutate nothing and return a coded
        status.  Pure function of (state, tx, now_ms) so preview, commit
        and replay all reach the same result."""
        tx_id = tx.tx_id
        try:
            if tx.kind != KIND_INVOKE:
                raise ChaincodeError(errors.BAD_ARGS, "only invokes execute in blocks")
            code = check_transaction(tx, self.registry)
            if code is not None:
                raise ChaincodeError(code, "transaction failed admission checks")
            identity = cert_identity(self.registry.resolve(tx.submitter))
            self._dispatch(state, tx, identity, now_ms)
        except ChaincodeError as exc:
            return TxStatus(tx_id, False, exc.code)
        except DecodeError:
            return TxStatus(tx_id, False, errors.BAD_ARGS)
        return TxStatus(tx_id, True, STATUS_OK)

    def _dispatch(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        handlers = {
            "createRecord": self._create_record,
            "addPermission": self._add_permission,
            "addMetadataItem": self._add_metadata_item,
            "setPrivateData": self._set_private_data,
            "migrateRecord": self._migrate_record,
        }
        handler = handlers.get(tx.function)
        if handler is None:
            raise ChaincodeError(errors.BAD_ARGS, f"unknown function {tx.function}")
        handler(state, tx, identity, now_ms)

    def _require_args(self, tx: Transaction, count: int) -> None:
        if len(tx.args) != count:
            raise ChaincodeError(errors.BAD_ARGS, f"{tx.function} expects {count} args")

    def _create_record(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        self._require_args(tx, 1)
        pseudonym = tx.args[0]
        if len(pseudonym) != crypto.DIGEST_LEN:
            raise ChaincodeError(errors.BAD_ARGS, "pseudonym must be 32 bytes")
        if state.get(pseudonym) is not None:
            raise ChaincodeError(errors.RECORD_EXISTS, pseudonym.hex())
        self._store_record(state, pseudonym, PatientRecord(owner=identity))

    def _add_permission(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        self._require_args(tx, 2)
        record = self._load_record(state, tx.args[0])
        if record.owner != identity:
            raise ChaincodeError(errors.NOT_OWNER, "only the record owner may grant")
        perm = Permission.from_bytes(tx.args[1])
        perm.validate(self.categories)
        if any(p.timestamp == perm.timestamp for p in record.permissions):
            raise ChaincodeError(errors.DUPLICATE_TIMESTAMP,
                                 "grant timestamps must be unique per record")
        record.permissions.append(perm)
        record.permissions.sort(key=lambda p: p.timestamp)
        self._store_record(state, tx.args[0], record)

    def _add_metadata_item(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        self._require_args(tx, 2)
        record = self._load_record(state, tx.args[0])
        item = MetadataItem.from_bytes(tx.args[1])
        item.validate(self.categories)
        if item.doctor_id != identity:
            raise ChaincodeError(errors.BAD_ARGS, "uploader id must match the submitting cert")
        if not check_permission(record, item.doctor_id, Right.WRITE, item.category, now_ms):
            raise ChaincodeError(errors.PERMISSION_DENIED,
                                 "no valid write grant for this category")
        if any(existing.path_to_file == item.path_to_file for existing in record.items):
            raise ChaincodeError(errors.DUPLICATE_PATH, item.path_to_file)
        item = replace(item, timestamp=now_ms)
        record.items.append(item)
        record.items.sort(key=lambda i: i.timestamp)
        self._store_record(state, tx.args[0], record)

    def _set_private_data(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        self._require_args(tx, 2)
        record = self._load_record(state, tx.args[0])
        if record.owner != identity:
            raise ChaincodeError(errors.NOT_OWNER, "only the record owner may set private data")
        record.private_data = tx.args[1] or None
        self._store_record(state, tx.args[0], record)

    def _migrate_record(self, state: WorldState, tx: Transaction, identity: str, now_ms: int) -> None:
        self._require_args(tx, 2)
        old_key, new_key = tx.args
        record = self._load_record(state, old_key)
        if record.owner != identity:
            raise ChaincodeError(errors.NOT_OWNER, "only the record owner may migrate")
        if len(new_key) != crypto.DIGEST_LEN:
            raise ChaincodeError(errors.BAD_ARGS, "pseudonym must be 32 bytes")
        if state.get(new_key) is not None:
            raise ChaincodeError(errors.RECORD_EXISTS, new_key.hex())
        self._store_record(state, new_key, record)
        self._store_record(state, old_key, PatientRecord(owner=record.owner, tombstone=True))

    # -- query path -----------------------------------------------------------

    def query_get_record(self, state: WorldState, submitter_id: str, role: Role,
                         pseudonym: bytes, now_ms: int) -> PatientRecord:
        """Owner sees the full record; a doctor holding any live grant sees
        metadata for read-granted categories only, without private data."""
        record = self._load_record(state, pseudonym)
        if role is Role.PATIENT:
            if record.owner != submitter_id:
                raise ChaincodeError(errors.PERMISSION_DENIED, "not the record owner")
            return record
        if not has_any_valid_grant(record, submitter_id, now_ms):
            raise ChaincodeError(errors.PERMISSION_DENIED, "no valid grant on this record")
        readable = [
            cat for cat in self.categories
            if check_permission(record, submitter_id, Right.READ, cat, now_ms)
        ]
        return PatientRecord(
            owner=record.owner,
            permissions=[p for p in record.permissions if p.doctor_id == submitter_id],
            items=[i for i in record.items if i.category in readable],
            private_data=None,
        )

    def query_authorize_share(self, state: WorldState, doctor_id: str, pseudonym: bytes,
                              study_id: str, category: str, now_ms: int) -> ShareTicket:
        record = self._load_record(state, pseudonym)
        if not check_permission(record, doctor_id, Right.SHARE, category, now_ms, study_id):
            raise ChaincodeError(errors.PERMISSION_DENIED,
                                 "no valid share grant for this study and category")
        grant = max(
            (p for p in record.permissions
             if p.doctor_id == doctor_id and p.right is Right.SHARE
             and p.category == category and p.study_id == study_id),
            key=lambda p: p.timestamp,
        )
        return ShareTicket(
            pseudonym=pseudonym,
            doctor_id=doctor_id,
            study_id=study_id,
            category=category,
            anonymity=bool(grant.anonymity),
            issued_at=now_ms,
            items=tuple(i for i in record.items if i.category == category),
        )
