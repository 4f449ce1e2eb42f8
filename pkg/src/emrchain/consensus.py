"""PBFT replica state machine.

Three normal-case phases over signed messages: the view leader broadcasts a
pre-prepare carrying a full pre-executed block, every node (leader
included) broadcasts a prepare for the block digest, and a node that has
pinned the block and logged 2f+1 distinct matching prepares broadcasts a
commit.  2f+1 distinct matching commits apply the block.  One sequence is
outstanding at a time (sequence = chain height + 1), which keeps the view
change to a single slot:

* A node whose progress timer fires broadcasts a view-change vote for the
  next view, attaching its prepared certificate (the 2f+1 prepare
  signatures) when it has one.
* f+1 votes for a higher view make a node vote too; the new leader forms a
  new-view from 2f+1 votes, re-proposing the best certified block if any
  vote proves one could have committed, else proposing fresh.
* Replicas verify the vote set and the re-proposal choice before adopting
  the view, so a byzantine leader cannot override a possibly-committed
  digest.

Replicas are passive: a transport delivers messages and timer callbacks and
supplies the clock, so the same logic runs under the deterministic
simulator and the threaded real-time network.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, Protocol

from . import crypto
from .encoding import DecodeError, Reader, Writer
from .errors import EmrChainError, NotLeader
from .ledger import ZERO_DIGEST, Block, Ledger, Transaction, TxStatus, check_transaction
from .membership import CertificateRegistry


class MsgKind(IntEnum):
    PRE_PREPARE = 1
    PREPARE = 2
    COMMIT = 3
    VIEW_CHANGE = 4
    NEW_VIEW = 5
    CLIENT_TX = 6


@dataclass(frozen=True)
class PreparedProof:
    """Evidence that a block could have committed: 2f+1 prepare signatures
    from distinct nodes for one digest at one (view, sequence)."""

    view: int
    sequence: int
    block: Block
    prepare_sigs: tuple[tuple[str, bytes], ...]

    def to_bytes(self) -> bytes:
        w = Writer().u64(self.view).u64(self.sequence).bytes_(self.block.to_bytes())
        w.u32(len(self.prepare_sigs))
        for sender, sig in self.prepare_sigs:
            w.str_(sender)
            w.bytes_(sig)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PreparedProof":
        reader = Reader(data)
        view = reader.u64()
        sequence = reader.u64()
        block = Block.from_bytes(reader.bytes_())
        count = reader.u32()
        sigs = tuple((reader.str_(), reader.bytes_()) for _ in range(count))
        reader.expect_end()
        return cls(view, sequence, block, sigs)


@dataclass(frozen=True)
class CommitCertificate:
    """2f+1 commit signatures over one block digest: the transferable proof
    that a block committed, verified during peer sync."""

    view: int
    sequence: int
    signatures: tuple[tuple[str, bytes], ...]

    def to_bytes(self) -> bytes:
        w = Writer().u64(self.view).u64(self.sequence).u32(len(self.signatures))
        for sender, sig in self.signatures:
            w.str_(sender)
            w.bytes_(sig)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CommitCertificate":
        reader = Reader(data)
        view = reader.u64()
        sequence = reader.u64()
        count = reader.u32()
        sigs = tuple((reader.str_(), reader.bytes_()) for _ in range(count))
        reader.expect_end()
        return cls(view, sequence, sigs)


@dataclass(frozen=True)
class ConsensusMessage:
    kind: MsgKind
    view: int
    sequence: int
    digest: bytes
    sender: str
    block: Block | None = None
    last_committed: int = 0
    prepared: PreparedProof | None = None
    view_changes: tuple[bytes, ...] = ()
    payload: bytes = b""
    signature: bytes = b""

    def content_bytes(self) -> bytes:
        w = (
            Writer()
            .u8(int(self.kind))
            .u64(self.view)
            .u64(self.sequence)
            .raw(self.digest)
            .str_(self.sender)
        )
        if self.kind == MsgKind.PRE_PREPARE:
            w.bytes_(self.block.to_bytes())
        elif self.kind == MsgKind.VIEW_CHANGE:
            w.u64(self.last_committed)
            w.opt_bytes(None if self.prepared is None else self.prepared.to_bytes())
        elif self.kind == MsgKind.NEW_VIEW:
            w.opt_bytes(None if self.block is None else self.block.to_bytes())
            w.u32(len(self.view_changes))
            for vc in self.view_changes:
                w.bytes_(vc)
        elif self.kind == MsgKind.CLIENT_TX:
            w.bytes_(self.payload)
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.content_bytes()).bytes_(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConsensusMessage":
        reader = Reader(data)
        kind = MsgKind(reader.u8())
        view = reader.u64()
        sequence = reader.u64()
        digest = reader.raw(crypto.DIGEST_LEN)
        sender = reader.str_()
        block = None
        last_committed = 0
        prepared = None
        view_changes: tuple[bytes, ...] = ()
        payload = b""
        if kind == MsgKind.PRE_PREPARE:
            block = Block.from_bytes(reader.bytes_())
        elif kind == MsgKind.VIEW_CHANGE:
            last_committed = reader.u64()
            proof_bytes = reader.opt_bytes()
            if proof_bytes is not None:
                prepared = PreparedProof.from_bytes(proof_bytes)
        elif kind == MsgKind.NEW_VIEW:
            block_bytes = reader.opt_bytes()
            if block_bytes is not None:
                block = Block.from_bytes(block_bytes)
            count = reader.u32()
            view_changes = tuple(reader.bytes_() for _ in range(count))
        elif kind == MsgKind.CLIENT_TX:
            payload = reader.bytes_()
        signature = reader.bytes_()
        reader.expect_end()
        return cls(kind, view, sequence, digest, sender, block,
                   last_committed, prepared, view_changes, payload, signature)

    def signed(self, secret: bytes) -> "ConsensusMessage":
        return replace(self, signature=crypto.sign(secret, self.content_bytes()))


@dataclass(frozen=True)
class ReplicaConfig:
    node_id: str
    node_ids: tuple[str, ...]
    batch_size: int = 8
    batch_timeout_ms: int = 50
    view_timeout_ms: int = 400

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(sorted(self.node_ids)))
        if self.node_id not in self.node_ids:
            raise ValueError("node_id must be one of node_ids")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def leader_of(self, view: int) -> str:
        return self.node_ids[view % self.n]


class Transport(Protocol):
    def broadcast(self, sender: str, raw: bytes) -> None: ...
    def send(self, sender: str, target: str, raw: bytes) -> None: ...
    def set_timer(self, node_id: str, delay_ms: int, token: tuple) -> None: ...
    def fetch_blocks(self, requester: str, target: str, from_height: int) -> list[bytes] | None: ...


CommitHook = Callable[[Block, list[TxStatus], dict], None]


class Replica:
    """One consensus node: pools client invokes, runs the PBFT phases, and
    applies agreed blocks to its ledger via the chaincode executor."""

    def __init__(
        self,
        config: ReplicaConfig,
        keypair: crypto.SigningKeyPair,
        ledger: Ledger,
        executor,
        registry: CertificateRegistry,
        transport: Transport,
        on_commit: CommitHook | None = None,
    ):
        self.config = config
        self.keypair = keypair
        self.ledger = ledger
        self.executor = executor
        self.registry = registry
        self.transport = transport
        self.on_commit = on_commit

        self.view = 0
        self.pool: dict[bytes, Transaction] = {}
        self.committed_txids: set[bytes] = set()
        self.commit_certs: dict[int, bytes] = {}
        self.metrics: dict[str, int] = {
            "dropped_bad_sig": 0,
            "dropped_stale": 0,
            "dropped_decode": 0,
            "equivocations_seen": 0,
            "duplicates_ignored": 0,
            "view_changes_sent": 0,
            "syncs": 0,
        }

        # Slot state for the single outstanding sequence (= height + 1).
        self._pinned_digest: bytes | None = None
        self._pinned_block: Block | None = None
        self._prepares: dict[str, tuple[bytes, bytes]] = {}   # sender -> (digest, sig)
        self._commits: dict[str, tuple[bytes, bytes]] = {}
        self._prepared = False
        self._prepared_cert: PreparedProof | None = None
        self._early: list[ConsensusMessage] = []

        self._vc_votes: dict[int, dict[str, ConsensusMessage]] = {}
        self._vc_sent_target = 0
        self._epoch = 0
        self._batch_timer_armed = False
        self._progress_timer_armed = False

    # ------------------------------------------------------------------ utils

    @property
    def node_id(self) -> str:
        return self.config.node_id

    @property
    def height(self) -> int:
        return self.ledger.height

    @property
    def next_sequence(self) -> int:
        return self.ledger.height + 1

    def is_leader(self, view: int | None = None) -> bool:
        return self.config.leader_of(self.view if view is None else view) == self.node_id

    def _sign(self, msg: ConsensusMessage) -> ConsensusMessage:
        return msg.signed(self.keypair.secret)

    def _broadcast(self, msg: ConsensusMessage) -> None:
        self.transport.broadcast(self.node_id, msg.to_bytes())

    def _verify_sender(self, msg: ConsensusMessage) -> bool:
        try:
            cert = self.registry.resolve(f"ecert:{msg.sender}")
        except EmrChainError:
            return False
        return crypto.verify(cert.sign_public, msg.content_bytes(), msg.signature)

    # ------------------------------------------------------------ client path

    def submit_tx(self, tx: Transaction, now: int) -> str | None:
        """Pool a validated invoke; returns an error code or None.

        Duplicate suppression is per-node convenience only; execution is
        deterministic even if a byzantine leader replays a committed tx.
        """
        code = check_transaction(tx, self.registry)
        if code is not None:
            return code
        tx_id = tx.tx_id
        if tx_id in self.pool or tx_id in self.committed_txids:
            return None
        self.pool[tx_id] = tx
        self._maybe_start_batch(now)
        self._arm_progress_timer(now)
        return None

    def _maybe_start_batch(self, now: int) -> None:
        if not self.is_leader() or self._pinned_digest is not None or not self.pool:
            return
        if len(self.pool) >= self.config.batch_size:
            self._propose(now)
        elif not self._batch_timer_armed:
            self._batch_timer_armed = True
            self.transport.set_timer(
                self.node_id, self.config.batch_timeout_ms, ("batch", self._epoch)
            )

    def propose_batch(self, now: int) -> Block:
        """Explicit leader proposal (used by harnesses and tests)."""
        if not self.is_leader():
            raise NotLeader(f"{self.node_id} is not the leader of view {self.view}")
        return self._propose(now)

    def _propose(self, now: int) -> Block:
        txs = tuple(list(self.pool.values())[: self.config.batch_size])
        timestamp = max(now, self.ledger.tip().timestamp)
        state_hash, _, _ = self.ledger.execute_preview(txs, timestamp, self.executor)
        block = Block(self.next_sequence, self.ledger.tip_hash(), txs, state_hash, timestamp)
        msg = self._sign(ConsensusMessage(
            MsgKind.PRE_PREPARE, self.view, block.number, block.block_hash(),
            self.node_id, block=block,
        ))
        self._broadcast(msg)
        self._accept_proposal(block, now)
        return block

    # --------------------------------------------------------------- messages

    def on_message(self, raw: bytes, now: int) -> None:
        try:
            msg = ConsensusMessage.from_bytes(raw)
        except (DecodeError, ValueError):
            self.metrics["dropped_decode"] += 1
            return
        if not self._verify_sender(msg):
            self.metrics["dropped_bad_sig"] += 1
            return
        if msg.kind == MsgKind.PRE_PREPARE:
            self._on_preprepare(msg, now)
        elif msg.kind in (MsgKind.PREPARE, MsgKind.COMMIT):
            self._on_vote(msg, now)
        elif msg.kind == MsgKind.VIEW_CHANGE:
            self._on_view_change(msg, now)
        elif msg.kind == MsgKind.NEW_VIEW:
            self._on_new_view(msg, now)
        elif msg.kind == MsgKind.CLIENT_TX:
            try:
                tx = Transaction.from_bytes(msg.payload)
            except DecodeError:
                self.metrics["dropped_decode"] += 1
                return
            self.submit_tx(tx, now)

    def gossip_tx(self, tx: Transaction) -> None:
        """Forward a client transaction so every node pools it."""
        msg = self._sign(ConsensusMessage(
            MsgKind.CLIENT_TX, 0, 0, ZERO_DIGEST, self.node_id, payload=tx.to_bytes(),
        ))
        self._broadcast(msg)

    def _check_slot(self, msg: ConsensusMessage, now: int) -> bool:
        """Gate a phase message to the current view and outstanding slot."""
        if msg.view != self.view:
            self.metrics["dropped_stale"] += 1
            return False
        if msg.sequence != self.next_sequence:
            if msg.sequence > self.next_sequence:
                # Evidence that peers advanced without us; catch up.
                self._sync_from_peers(now)
                if msg.view == self.view and msg.sequence == self.next_sequence:
                    return True
            self.metrics["dropped_stale"] += 1
            return False
        return True

    def _on_preprepare(self, msg: ConsensusMessage, now: int) -> None:
        if not self._check_slot(msg, now):
            return
        if msg.sender != self.config.leader_of(self.view):
            self.metrics["dropped_stale"] += 1
            return
        if self._pinned_digest is not None:
            if msg.digest != self._pinned_digest:
                self.metrics["equivocations_seen"] += 1
            else:
                self.metrics["duplicates_ignored"] += 1
            return
        block = msg.block
        if block is None or not self._validate_block(block, msg.digest):
            self.metrics["dropped_stale"] += 1
            return
        self._accept_proposal(block, now)

    def _validate_block(self, block: Block, digest: bytes) -> bool:
        if block.block_hash() != digest:
            return False
        if block.number != self.next_sequence:
            return False
        if block.prev_hash != self.ledger.tip_hash():
            return False
        if block.timestamp < self.ledger.tip().timestamp:
            return False
        state_hash, _, _ = self.ledger.execute_preview(
            block.txs, block.timestamp, self.executor
        )
        return state_hash == block.state_hash

    def _accept_proposal(self, block: Block, now: int) -> None:
        """Pin the proposal, broadcast our prepare, replay buffered votes."""
        self._pinned_digest = block.block_hash()
        self._pinned_block = block
        prepare = self._sign(ConsensusMessage(
            MsgKind.PREPARE, self.view, block.number, self._pinned_digest, self.node_id,
        ))
        self._prepares.setdefault(self.node_id, (self._pinned_digest, prepare.signature))
        self._broadcast(prepare)
        self._arm_progress_timer(now)
        early, self._early = self._early, []
        for buffered in early:
            self._on_vote(buffered, now)
        self._maybe_advance(now)

    def _on_vote(self, msg: ConsensusMessage, now: int) -> None:
        if not self._check_slot(msg, now):
            return
        if self._pinned_digest is None:
            if len(self._early) < 512:
                self._early.append(msg)
            return
        log = self._prepares if msg.kind == MsgKind.PREPARE else self._commits
        if msg.sender in log:
            self.metrics["duplicates_ignored"] += 1
            return
        log[msg.sender] = (msg.digest, msg.signature)
        self._maybe_advance(now)

    def _count_matching(self, log: dict[str, tuple[bytes, bytes]]) -> int:
        return sum(1 for digest, _ in log.values() if digest == self._pinned_digest)

    def _maybe_advance(self, now: int) -> None:
        if self._pinned_digest is None:
            return
        if not self._prepared and self._count_matching(self._prepares) >= self.config.quorum:
            self._prepared = True
            self._prepared_cert = PreparedProof(
                view=self.view,
                sequence=self.next_sequence,
                block=self._pinned_block,
                prepare_sigs=tuple(
                    (sender, sig) for sender, (digest, sig) in sorted(self._prepares.items())
                    if digest == self._pinned_digest
                ),
            )
            commit = self._sign(ConsensusMessage(
                MsgKind.COMMIT, self.view, self.next_sequence,
                self._pinned_digest, self.node_id,
            ))
            self._commits.setdefault(self.node_id, (self._pinned_digest, commit.signature))
            self._broadcast(commit)
        quorum = self._count_matching(self._commits)
        if quorum >= self.config.quorum:
            self._commit_block(self._pinned_block, quorum, now)

    def _commit_block(self, block: Block, quorum: int, now: int) -> None:
        cert = CommitCertificate(
            view=self.view,
            sequence=block.number,
            signatures=tuple(
                (sender, sig) for sender, (digest, sig) in sorted(self._commits.items())
                if digest == self._pinned_digest
            ),
        )
        statuses = self.ledger.apply_block(block, self.executor)
        self.commit_certs[block.number] = cert.to_bytes()
        self._after_commit(block, statuses, {"quorum": quorum, "view": self.view,
                                             "source": "consensus",
                                             "cert": cert.to_bytes()}, now)

    def _after_commit(self, block: Block, statuses: list[TxStatus],
                      meta: dict, now: int) -> None:
        for tx in block.txs:
            tx_id = tx.tx_id
            self.committed_txids.add(tx_id)
            self.pool.pop(tx_id, None)
        self._reset_slot()
        if self.on_commit is not None:
            self.on_commit(block, statuses, meta)
        self._maybe_start_batch(now)
        if self.pool:
            self._arm_progress_timer(now)

    def _reset_slot(self) -> None:
        self._pinned_digest = None
        self._pinned_block = None
        self._prepares = {}
        self._commits = {}
        self._prepared = False
        self._prepared_cert = None
        self._early = []
        self._epoch += 1
        self._batch_timer_armed = False
        self._progress_timer_armed = False
        self._vc_sent_target = self.view
        for target in [t for t in self._vc_votes if t <= self.view]:
            del self._vc_votes[target]

    # ------------------------------------------------------------- view change

    def _arm_progress_timer(self, now: int) -> None:
        if self._progress_timer_armed:
            return
        self._progress_timer_armed = True
        self.transport.set_timer(
            self.node_id, self.config.view_timeout_ms, ("progress", self._epoch)
        )

    def _pending_work(self) -> bool:
        return bool(self.pool) or self._pinned_digest is not None

    def on_timer(self, token: tuple, now: int) -> None:
        kind, epoch = token
        if epoch != self._epoch:
            return
        if kind == "batch":
            self._batch_timer_armed = False
            if self.is_leader() and self._pinned_digest is None and self.pool:
                self._propose(now)
        elif kind == "progress":
            self._progress_timer_armed = False
            if not self._pending_work():
                return
            self._send_view_change(max(self.view + 1, self._vc_sent_target + 1), now)
            self._arm_progress_timer(now)

    def _send_view_change(self, target: int, now: int) -> None:
        self._vc_sent_target = target
        msg = self._sign(ConsensusMessage(
            MsgKind.VIEW_CHANGE, target, self.next_sequence, ZERO_DIGEST, self.node_id,
            last_committed=self.height, prepared=self._prepared_cert,
        ))
        self.metrics["view_changes_sent"] += 1
        self._vc_votes.setdefault(target, {})[self.node_id] = msg
        self._broadcast(msg)
        self._maybe_new_view(target, now)

    def _validate_proof(self, proof: PreparedProof) -> bool:
        digest = proof.block.block_hash()
        if proof.block.number != proof.sequence:
            return False
        seen = set()
        valid = 0
        for sender, sig in proof.prepare_sigs:
            if sender in seen or sender not in self.config.node_ids:
                continue
            seen.add(sender)
            content = ConsensusMessage(
                MsgKind.PREPARE, proof.view, proof.sequence, digest, sender
            ).content_bytes()
            try:
                cert = self.registry.resolve(f"ecert:{sender}")
            except EmrChainError:
                continue
            if crypto.verify(cert.sign_public, content, sig):
                valid += 1
        return valid >= self.config.quorum

    def _on_view_change(self, msg: ConsensusMessage, now: int) -> None:
        target = msg.view
        if target <= self.view:
            self.metrics["dropped_stale"] += 1
            return
        votes = self._vc_votes.setdefault(target, {})
        if msg.sender in votes:
            self.metrics["duplicates_ignored"] += 1
            return
        votes[msg.sender] = msg
        if (len(votes) >= self.config.f + 1 and self._vc_sent_target < target):
            self._send_view_change(target, now)
        self._maybe_new_view(target, now)

    def _maybe_new_view(self, target: int, now: int) -> None:
        if self.config.leader_of(target) != self.node_id or target <= self.view:
            return
        votes = self._vc_votes.get(target, {})
        if len(votes) < self.config.quorum:
            return
        chosen = dict(sorted(votes.items())[: self.config.quorum])
        max_committed = max(vc.last_committed for vc in chosen.values())
        if max_committed > self.height:
            self._sync_from_peers(now)
        best = self._best_valid_proof(chosen.values())
        proposal: Block | None = None
        if best is not None and best.sequence == self.next_sequence:
            proposal = best.block
        elif self.pool:
            txs = tuple(list(self.pool.values())[: self.config.batch_size])
            timestamp = max(now, self.ledger.tip().timestamp)
            state_hash, _, _ = self.ledger.execute_preview(txs, timestamp, self.executor)
            proposal = Block(self.next_sequence, self.ledger.tip_hash(), txs,
                             state_hash, timestamp)
        msg = self._sign(ConsensusMessage(
            MsgKind.NEW_VIEW, target, self.next_sequence,
            proposal.block_hash() if proposal else b"\x00" * crypto.DIGEST_LEN,
            self.node_id,
            block=proposal,
            view_changes=tuple(vc.to_bytes() for _, vc in sorted(chosen.items())),
        ))
        self._broadcast(msg)
        self._enter_view(target, now)
        if proposal is not None:
            self._accept_proposal(proposal, now)
        elif self.pool:
            self._maybe_start_batch(now)

    def _best_valid_proof(self, votes) -> PreparedProof | None:
        best: PreparedProof | None = None
        for vc in votes:
            proof = vc.prepared
            if proof is None or not self._validate_proof(proof):
                continue
            if best is None or (proof.sequence, proof.view) > (best.sequence, best.view):
                best = proof
        return best

    def _on_new_view(self, msg: ConsensusMessage, now: int) -> None:
        target = msg.view
        if target <= self.view:
            self.metrics["dropped_stale"] += 1
            return
        if msg.sender != self.config.leader_of(target):
            self.metrics["dropped_stale"] += 1
            return
        votes: dict[str, ConsensusMessage] = {}
        for raw in msg.view_changes:
            try:
                vc = ConsensusMessage.from_bytes(raw)
            except (DecodeError, ValueError):
                continue
            if vc.kind != MsgKind.VIEW_CHANGE or vc.view != target:
                continue
            if vc.sender in votes or not self._verify_sender(vc):
                continue
            votes[vc.sender] = vc
        if len(votes) < self.config.quorum:
            self.metrics["dropped_stale"] += 1
            return
        max_committed = max(vc.last_committed for vc in votes.values())
        if max_committed > self.height:
            self._sync_from_peers(now)
        best = self._best_valid_proof(votes.values())
        proposal = msg.block
        if best is not None and best.sequence == self.next_sequence:
            # The leader was obliged to re-propose the certified block.
            if proposal is None or proposal.block_hash() != best.block.block_hash():
                self.metrics["dropped_stale"] += 1
                return
        self._enter_view(target, now)
        if proposal is not None and proposal.number == self.next_sequence:
            if self._validate_block(proposal, proposal.block_hash()):
                self._accept_proposal(proposal, now)

    def _enter_view(self, target: int, now: int) -> None:
        self.view = target
        self._pinned_digest = None
        self._pinned_block = None
        self._prepares = {}
        self._commits = {}
        self._prepared = False
        # A prepared certificate from the old view stays with us for future
        # view-change votes until the slot commits or is re-prepared.
        self._early = []
        self._epoch += 1
        self._batch_timer_armed = False
        self._progress_timer_armed = False
        self._vc_sent_target = max(self._vc_sent_target, target)
        for stale in [t for t in self._vc_votes if t <= target]:
            del self._vc_votes[stale]
        if self._pending_work():
            self._arm_progress_timer(now)

    # ------------------------------------------------------------------- sync

    def serve_blocks(self, from_height: int, limit: int = 1024) -> list[bytes]:
        """Peer-facing read of committed blocks with their commit
        certificates, starting at ``from_height``."""
        out = []
        for block in self.ledger.blocks:
            if block.number >= from_height:
                cert = self.commit_certs.get(block.number)
                if cert is None:
                    break  # cannot prove this block to a peer
                out.append(Writer().bytes_(block.to_bytes()).bytes_(cert).getvalue())
                if len(out) >= limit:
                    break
        return out

    def verify_commit_certificate(self, block: Block, cert: CommitCertificate) -> bool:
        """A block is sync-trustworthy only with 2f+1 distinct valid commit
        signatures over its digest."""
        if cert.sequence != block.number:
            return False
        digest = block.block_hash()
        seen = set()
        valid = 0
        for sender, sig in cert.signatures:
            if sender in seen or sender not in self.config.node_ids:
                continue
            seen.add(sender)
            content = ConsensusMessage(
                MsgKind.COMMIT, cert.view, cert.sequence, digest, sender
            ).content_bytes()
            try:
                node_cert = self.registry.resolve(f"ecert:{sender}")
            except EmrChainError:
                continue
            if crypto.verify(node_cert.sign_public, content, sig):
                valid += 1
        return valid >= self.config.quorum

    def _sync_from_peers(self, now: int) -> bool:
        peers = [n for n in self.config.node_ids if n != self.node_id]
        return self.sync_from_peers(peers, now)

    def sync_from_peers(self, peers: list[str], now: int) -> bool:
        """Fetch, certificate-check and apply missing blocks; a tampered
        stream stops at the bad frame and the next peer is tried from the
        new height."""
        advanced = False
        for peer in peers:
            raws = self.transport.fetch_blocks(self.node_id, peer, self.height + 1)
            if not raws:
                continue
            for raw in raws:
                try:
                    reader = Reader(raw)
                    block = Block.from_bytes(reader.bytes_())
                    cert_bytes = reader.bytes_()
                    reader.expect_end()
                    cert = CommitCertificate.from_bytes(cert_bytes)
                    if not self.verify_commit_certificate(block, cert):
                        break
                    statuses = self.ledger.apply_block(block, self.executor)
                except (DecodeError, EmrChainError):
                    break
                advanced = True
                self.commit_certs[block.number] = cert_bytes
                self._after_sync_block(block, statuses, cert_bytes, now)
        if advanced:
            self.metrics["syncs"] += 1
            self._reset_slot()
            if self._pending_work():
                self._arm_progress_timer(now)
        return advanced

    def _after_sync_block(self, block: Block, statuses: list[TxStatus],
                          cert_bytes: bytes, now: int) -> None:
        for tx in block.txs:
            self.committed_txids.add(tx.tx_id)
            self.pool.pop(tx.tx_id, None)
        if self.on_commit is not None:
            self.on_commit(block, statuses, {"quorum": None, "view": self.view,
                                             "source": "sync", "cert": cert_bytes})
