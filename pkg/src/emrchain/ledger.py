"""Blocks, transactions, the key-value world state and chain validation.

Canonical layouts (all via :mod:`emrchain.encoding`, big-endian, u32 length
prefixes):

* Transaction content: kind u8 | function str | arg-count u32 | args bytes*
  | submitter str | timestamp u64.  ``tx_id`` = SHA-256(content); the
  submitter signs the content bytes.  Serialized form appends the signature.
* Block: number u64 | prev_hash 32B | tx-count u32 | serialized txs* |
  state_hash 32B | timestamp u64.  Block hash = SHA-256(serialized block).
* State digest: SHA-256 over ``len(key) | key | SHA-256(value)`` for keys in
  ascending byte order, so it is independent of insertion history.

Query transactions are validated and served from local state; only invokes
enter blocks.  Failed invokes stay in their block as marked no-ops so every
replica agrees on ordering without a second consensus round.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol

from . import crypto, errors
from .encoding import DecodeError, Reader, Writer
from .errors import ChainMismatch, EmrChainError, StateHashMismatch
from .membership import CertificateRegistry, Role

ZERO_DIGEST = b"\x00" * crypto.DIGEST_LEN

KIND_INVOKE = 0
KIND_QUERY = 1

STATUS_OK = "OK"


@dataclass(frozen=True)
class Transaction:
    kind: int
    function: str
    args: tuple[bytes, ...]
    submitter: str
    timestamp: int
    signature: bytes = b""

    def content_bytes(self) -> bytes:
        w = Writer().u8(self.kind).str_(self.function).u32(len(self.args))
        for arg in self.args:
            w.bytes_(arg)
        w.str_(self.submitter).u64(self.timestamp)
        return w.getvalue()

    @property
    def tx_id(self) -> bytes:
        return crypto.sha256(self.content_bytes())

    def to_bytes(self) -> bytes:
        return Writer().raw(self.content_bytes()).bytes_(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        reader = Reader(data)
        tx = cls._read(reader)
        reader.expect_end()
        return tx

    @classmethod
    def _read(cls, reader: Reader) -> "Transaction":
        kind = reader.u8()
        if kind not in (KIND_INVOKE, KIND_QUERY):
            raise DecodeError(f"unknown transaction kind {kind}")
        function = reader.str_()
        nargs = reader.u32()
        args = tuple(reader.bytes_() for _ in range(nargs))
        submitter = reader.str_()
        timestamp = reader.u64()
        signature = reader.bytes_()
        return cls(kind, function, args, submitter, timestamp, signature)

    @classmethod
    def make_signed(cls, secret: bytes, kind: int, function: str,
                    args: Iterable[bytes], submitter: str, timestamp: int) -> "Transaction":
        tx = cls(kind, function, tuple(args), submitter, timestamp)
        return replace(tx, signature=crypto.sign(secret, tx.content_bytes()))


@dataclass(frozen=True)
class Block:
    number: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    state_hash: bytes
    timestamp: int

    def to_bytes(self) -> bytes:
        w = Writer().u64(self.number).raw(self.prev_hash).u32(len(self.txs))
        for tx in self.txs:
            w.bytes_(tx.to_bytes())
        w.raw(self.state_hash).u64(self.timestamp)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        reader = Reader(data)
        number = reader.u64()
        prev_hash = reader.raw(crypto.DIGEST_LEN)
        ntx = reader.u32()
        txs = tuple(Transaction.from_bytes(reader.bytes_()) for _ in range(ntx))
        state_hash = reader.raw(crypto.DIGEST_LEN)
        timestamp = reader.u64()
        reader.expect_end()
        return cls(number, prev_hash, txs, state_hash, timestamp)

    def block_hash(self) -> bytes:
        return crypto.sha256(self.to_bytes())


class WorldState:
    """Latest effect of all committed invokes: pseudonym -> record bytes."""

    def __init__(self, entries: dict[bytes, bytes] | None = None, block_number: int = 0):
        self.entries: dict[bytes, bytes] = dict(entries or {})
        self.block_number = block_number

    def get(self, key: bytes) -> bytes | None:
        return self.entries.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        self.entries[key] = value

    def copy(self) -> "WorldState":
        return WorldState(dict(self.entries), self.block_number)

    def digest(self) -> bytes:
        w = Writer()
        for key in sorted(self.entries):
            w.bytes_(key)
            w.raw(crypto.sha256(self.entries[key]))
        return crypto.sha256(w.getvalue())


def compute_state_hash(state: WorldState) -> bytes:
    return state.digest()


@dataclass(frozen=True)
class TxStatus:
    tx_id: bytes
    ok: bool
    code: str = STATUS_OK


class Executor(Protocol):
    def execute(self, state: WorldState, tx: Transaction, now_ms: int) -> TxStatus: ...


# Chaincode functions mapped to the roles allowed to call them; owner and
# grant checks happen inside execution.  getRecord admits both roles, the
# record-level rule (owner, or doctor holding a live grant) applies after.
INVOKE_ROLE_TABLE: dict[str, frozenset[Role]] = {
    "createRecord": frozenset({Role.PATIENT}),
    "addPermission": frozenset({Role.PATIENT}),
    "setPrivateData": frozenset({Role.PATIENT}),
    "migrateRecord": frozenset({Role.PATIENT}),
    "addMetadataItem": frozenset({Role.DOCTOR}),
}
QUERY_ROLE_TABLE: dict[str, frozenset[Role]] = {
    "getRecord": frozenset({Role.PATIENT, Role.DOCTOR}),
    "authorizeShare": frozenset({Role.DOCTOR}),
    "fetchBlob": frozenset({Role.PATIENT, Role.DOCTOR}),
    "rotateBlobs": frozenset({Role.PATIENT}),
    "prepareResearchPackage": frozenset({Role.DOCTOR}),
}


def check_transaction(tx: Transaction, registry: CertificateRegistry) -> str | None:
    """Full admission check; returns None when valid, else a stable code.

    The certificate window is evaluated at the transaction timestamp so
    every replica reaches the same verdict.
    """
    try:
        cert = registry.resolve(tx.submitter, now_ms=tx.timestamp)
    except EmrChainError as exc:
        return exc.code
    if not crypto.verify(cert.sign_public, tx.content_bytes(), tx.signature):
        return errors.BAD_SIGNATURE
    table = INVOKE_ROLE_TABLE if tx.kind == KIND_INVOKE else QUERY_ROLE_TABLE
    allowed = table.get(tx.function)
    if allowed is None:
        return errors.BAD_ARGS
    if cert.role not in allowed:
        return errors.ROLE_DENIED
    return None


def validate_transaction(tx: Transaction, registry: CertificateRegistry) -> bool:
    return check_transaction(tx, registry) is None


class Ledger:
    """Append-only block chain plus the world state it produces.

    Single-writer: only the consensus commit path (or replay/sync) calls
    :meth:`apply_block`.  Reads may run concurrently; every apply installs
    a freshly built state object, so a reader always sees one consistent
    snapshot.
    """

    def __init__(self, blocks: list[Block], state: WorldState):
        self.blocks = blocks
        self.state = state

    @classmethod
    def genesis(cls, timestamp: int = 0) -> "Ledger":
        state = WorldState()
        block = Block(0, ZERO_DIGEST, (), state.digest(), timestamp)
        return cls([block], state)

    @property
    def height(self) -> int:
        return self.blocks[-1].number

    def tip(self) -> Block:
        return self.blocks[-1]

    def tip_hash(self) -> bytes:
        return self.blocks[-1].block_hash()

    def execute_preview(self, txs: Iterable[Transaction], timestamp: int,
                        executor: Executor) -> tuple[bytes, WorldState, list[TxStatus]]:
        """Run ``txs`` against a copy of the current state (leader path)."""
        scratch = self.state.copy()
        statuses = [executor.execute(scratch, tx, timestamp) for tx in txs]
        scratch.block_number = self.height + 1
        return scratch.digest(), scratch, statuses

    def apply_block(self, block: Block, executor: Executor) -> list[TxStatus]:
        """Validate linkage, execute invokes in order, verify the embedded
        state hash, then install.  Failed invokes become marked no-ops; a
        state-hash disagreement rejects the whole block untouched."""
        if block.number != self.height + 1:
            raise ChainMismatch(
                f"block {block.number} does not extend height {self.height}"
            )
        if block.prev_hash != self.tip_hash():
            raise ChainMismatch(f"prev_hash mismatch at block {block.number}")
        digest, scratch, statuses = self.execute_preview(block.txs, block.timestamp, executor)
        if digest != block.state_hash:
            raise StateHashMismatch(
                f"block {block.number}: executed state digest differs from header"
            )
        self.blocks.append(block)
        self.state = scratch
        return statuses


def replay(blocks: list[Block], executor: Executor) -> Ledger:
    """Rebuild state from genesis; raises on any linkage or digest break."""
    if not blocks:
        return Ledger.genesis()
    first = blocks[0]
    if first.number != 0 or first.prev_hash != ZERO_DIGEST or first.txs:
        raise ChainMismatch("chain does not start at a valid genesis block")
    if first.state_hash != WorldState().digest():
        raise StateHashMismatch("genesis state hash incorrect")
    ledger = Ledger([first], WorldState())
    for block in blocks[1:]:
        ledger.apply_block(block, executor)
    return ledger


class LedgerLog:
    """Single append-only chain file: repeated length-prefixed records of
    (block bytes, commit-certificate bytes)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, block: Block, cert: bytes = b"") -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "ab") as fh:
            fh.write(Writer().bytes_(block.to_bytes()).bytes_(cert).getvalue())
            fh.flush()

    def read_entries(self) -> list[tuple[Block, bytes]]:
        if not self.path.exists():
            return []
        raw = self.path.read_bytes()
        reader = Reader(raw)
        entries = []
        while reader.remaining:
            block = Block.from_bytes(reader.bytes_())
            cert = reader.bytes_()
            entries.append((block, cert))
        return entries

    def read_blocks(self) -> list[Block]:
        return [block for block, _ in self.read_entries()]
