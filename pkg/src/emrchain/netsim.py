"""Network transports for consensus replicas.

:class:`SimNetwork` is a seeded discrete-event scheduler: sends become
delivery events after a random-but-reproducible delay, timers are events,
and block fetches resolve synchronously at the instant of the requesting
event.  The same seed replays the same run byte for byte.

:class:`ThreadedNetwork` drives the same replicas in real time with one
worker thread per node, used by the local-socket deployment.

Byzantine behavior is injected at the transport boundary so honest code
paths stay untouched: a fault adapter may drop, duplicate, corrupt or fork
a node's traffic inside its configured time window.
"""

from __future__ import annotations

import heapq
import queue
import random
import threading
import time
from dataclasses import dataclass, field

from . import crypto
from .consensus import ConsensusMessage, MsgKind, Replica
from .ledger import Block


class FaultBehavior:
    """Pass-through base; subclasses override the hooks they need."""

    name = "honest"

    def bind(self, replica: Replica, rng: random.Random) -> None:
        self.replica = replica
        self.rng = rng

    def outbound(self, targets: list[str], raw: bytes, now: int) -> list[tuple[str, bytes]]:
        return [(t, raw) for t in targets]

    def inbound(self, raw: bytes, now: int) -> bytes | None:
        return raw

    def serve_blocks(self, blocks: list[bytes], now: int) -> list[bytes] | None:
        return blocks


class SilenceBehavior(FaultBehavior):
    """Crashed or partitioned node: nothing in, nothing out."""

    name = "silence"

    def outbound(self, targets, raw, now):
        return []

    def inbound(self, raw, now):
        return None

    def serve_blocks(self, blocks, now):
        return None


class TamperBehavior(FaultBehavior):
    """Flips one random bit in every outgoing message and every served
    block, so honest receivers must reject on signature or digest."""

    name = "tamper"

    def _flip(self, raw: bytes) -> bytes:
        if not raw:
            return raw
        data = bytearray(raw)
        pos = self.rng.randrange(len(data))
        data[pos] ^= 1 << self.rng.randrange(8)
        return bytes(data)

    def outbound(self, targets, raw, now):
        return [(t, self._flip(raw)) for t in targets]

    def serve_blocks(self, blocks, now):
        return [self._flip(b) for b in blocks]


class ReplayBehavior(FaultBehavior):
    """Sends every message twice and occasionally resends an old one."""

    name = "replay"

    def __init__(self):
        self._history: list[bytes] = []

    def outbound(self, targets, raw, now):
        out = [(t, raw) for t in targets] + [(t, raw) for t in targets]
        self._history.append(raw)
        if len(self._history) > 4 and self.rng.random() < 0.5:
            old = self._history[self.rng.randrange(len(self._history))]
            out.extend((t, old) for t in targets)
        if len(self._history) > 64:
            del self._history[:32]
        return out


class EquivocateBehavior(FaultBehavior):
    """Forks the node's own proposals and votes: half the peers see one
    digest, half see a conflicting one, each correctly signed."""

    name = "equivocate"

    def _fork_preprepare(self, msg: ConsensusMessage) -> bytes:
        block = msg.block
        alt_ts = block.timestamp + 1
        state_hash, _, _ = self.replica.ledger.execute_preview(
            block.txs, alt_ts, self.replica.executor
        )
        alt = Block(block.number, block.prev_hash, block.txs, state_hash, alt_ts)
        forged = ConsensusMessage(
            MsgKind.PRE_PREPARE, msg.view, msg.sequence, alt.block_hash(),
            msg.sender, block=alt,
        ).signed(self.replica.keypair.secret)
        return forged.to_bytes()

    def _fork_vote(self, msg: ConsensusMessage) -> bytes:
        forged = ConsensusMessage(
            msg.kind, msg.view, msg.sequence, crypto.sha256(msg.digest + b"!"),
            msg.sender,
        ).signed(self.replica.keypair.secret)
        return forged.to_bytes()

    def outbound(self, targets, raw, now):
        try:
            msg = ConsensusMessage.from_bytes(raw)
        except Exception:
            return [(t, raw) for t in targets]
        alt: bytes | None = None
        if msg.kind == MsgKind.PRE_PREPARE and msg.block is not None:
            alt = self._fork_preprepare(msg)
        elif msg.kind in (MsgKind.PREPARE, MsgKind.COMMIT):
            alt = self._fork_vote(msg)
        if alt is None:
            return [(t, raw) for t in targets]
        out = []
        for i, target in enumerate(sorted(targets)):
            out.append((target, raw if i % 2 == 0 else alt))
        return out


BEHAVIORS = {
    "silence": SilenceBehavior,
    "tamper": TamperBehavior,
    "replay": ReplayBehavior,
    "equivocate": EquivocateBehavior,
}


@dataclass
class FaultPlanEntry:
    node_id: str
    behavior: str
    from_ms: int = 0
    to_ms: int = 1 << 62


class _FaultAdapter:
    def __init__(self, entry: FaultPlanEntry, behavior: FaultBehavior):
        self.entry = entry
        self.behavior = behavior

    def active(self, now: int) -> bool:
        return self.entry.from_ms <= now <= self.entry.to_ms


class SimNetwork:
    """Deterministic event scheduler connecting replicas.

    Event heap entries are (time, tick, kind, payload); the tick breaks
    ties so iteration order never depends on hashing.  All randomness
    (delays, fault decisions) flows from one seeded generator.
    """

    START_TIME_MS = 1_700_000_000_000

    def __init__(self, seed: int = 0, delay_ms: tuple[int, int] = (1, 8),
                 start_time: int | None = None):
        self.rng = random.Random(seed)
        self.delay_ms = delay_ms
        self.now = self.START_TIME_MS if start_time is None else start_time
        self._heap: list[tuple[int, int, str, tuple]] = []
        self._tick = 0
        self._replicas: dict[str, Replica] = {}
        self._faults: dict[str, _FaultAdapter] = {}
        self.delivered_count = 0

    # -- wiring ---------------------------------------------------------------

    def attach(self, replica: Replica) -> None:
        self._replicas[replica.node_id] = replica

    def inject_fault(self, entry: FaultPlanEntry) -> None:
        behavior = BEHAVIORS[entry.behavior]()
        behavior.bind(self._replicas[entry.node_id], self.rng)
        self._faults[entry.node_id] = _FaultAdapter(entry, behavior)

    def _push(self, at: int, kind: str, payload: tuple) -> None:
        self._tick += 1
        heapq.heappush(self._heap, (at, self._tick, kind, payload))

    def _delay(self) -> int:
        lo, hi = self.delay_ms
        return self.rng.randint(lo, hi)

    # -- transport interface ----------------------------------------------------

    def broadcast(self, sender: str, raw: bytes) -> None:
        targets = sorted(n for n in self._replicas if n != sender)
        self._send_many(sender, targets, raw)

    def send(self, sender: str, target: str, raw: bytes) -> None:
        self._send_many(sender, [target], raw)

    def _send_many(self, sender: str, targets: list[str], raw: bytes) -> None:
        adapter = self._faults.get(sender)
        if adapter is not None and adapter.active(self.now):
            pairs = adapter.behavior.outbound(targets, raw, self.now)
        else:
            pairs = [(t, raw) for t in targets]
        for target, data in pairs:
            self._push(self.now + self._delay(), "deliver", (target, data))

    def set_timer(self, node_id: str, delay_ms: int, token: tuple) -> None:
        self._push(self.now + delay_ms, "timer", (node_id, token))

    def fetch_blocks(self, requester: str, target: str, from_height: int) -> list[bytes] | None:
        req_adapter = self._faults.get(requester)
        if req_adapter is not None and req_adapter.active(self.now):
            if isinstance(req_adapter.behavior, SilenceBehavior):
                return None
        peer = self._replicas.get(target)
        if peer is None:
            return None
        blocks = peer.serve_blocks(from_height)
        adapter = self._faults.get(target)
        if adapter is not None and adapter.active(self.now):
            return adapter.behavior.serve_blocks(blocks, self.now)
        return blocks

    # -- scheduling ----------------------------------------------------------

    def schedule(self, at: int, callback, *args) -> None:
        """Run an arbitrary callback (workload step) at simulated time."""
        self._push(at, "action", (callback, args))

    def run(self, max_events: int = 2_000_000, until: int | None = None) -> int:
        """Drain the event heap; returns the number of events processed."""
        processed = 0
        while self._heap and processed < max_events:
            at, _, kind, payload = self._heap[0]
            if until is not None and at > until:
                break
            heapq.heappop(self._heap)
            self.now = max(self.now, at)
            processed += 1
            if kind == "deliver":
                target, raw = payload
                replica = self._replicas.get(target)
                if replica is None:
                    continue
                adapter = self._faults.get(target)
                if adapter is not None and adapter.active(self.now):
                    raw = adapter.behavior.inbound(raw, self.now)
                    if raw is None:
                        continue
                self.delivered_count += 1
                replica.on_message(raw, self.now)
            elif kind == "timer":
                node_id, token = payload
                replica = self._replicas.get(node_id)
                if replica is None:
                    continue
                adapter = self._faults.get(node_id)
                if adapter is not None and adapter.active(self.now) and \
                        isinstance(adapter.behavior, SilenceBehavior):
                    continue
                replica.on_timer(token, self.now)
            else:
                callback, args = payload
                callback(*args)
        return processed


class ThreadedNetwork:
    """Real-time transport: one worker thread per replica, queue-delivered
    messages, wall-clock timers.  Replica internals stay single-threaded
    because only the owning worker touches them."""

    def __init__(self):
        self._replicas: dict[str, Replica] = {}
        self._queues: dict[str, queue.Queue] = {}
        self._timers: dict[str, list[tuple[float, tuple]]] = {}
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    @staticmethod
    def now_ms() -> int:
        return int(time.time() * 1000)

    def attach(self, replica: Replica) -> None:
        self._replicas[replica.node_id] = replica
        self._queues[replica.node_id] = queue.Queue()
        self._timers[replica.node_id] = []

    def broadcast(self, sender: str, raw: bytes) -> None:
        for node_id, q in self._queues.items():
            if node_id != sender:
                q.put(("msg", raw))

    def send(self, sender: str, target: str, raw: bytes) -> None:
        q = self._queues.get(target)
        if q is not None:
            q.put(("msg", raw))

    def set_timer(self, node_id: str, delay_ms: int, token: tuple) -> None:
        q = self._queues.get(node_id)
        if q is not None:
            q.put(("timer_set", time.monotonic() + delay_ms / 1000.0, token))

    def fetch_blocks(self, requester: str, target: str, from_height: int) -> list[bytes] | None:
        q = self._queues.get(target)
        if q is None:
            return None
        done = threading.Event()
        result: list = [None]

        def respond(blocks):
            result[0] = blocks
            done.set()

        q.put(("fetch", from_height, respond))
        if not done.wait(timeout=2.0):
            return None
        return result[0]

    def submit(self, node_id: str, callback, *args) -> None:
        """Run a callable on the node's worker thread (client entry path)."""
        self._queues[node_id].put(("call", callback, args))

    def _worker(self, node_id: str) -> None:
        replica = self._replicas[node_id]
        q = self._queues[node_id]
        timers = self._timers[node_id]
        while not self._stop.is_set():
            timeout = 0.05
            if timers:
                timeout = max(0.0, min(t[0] for t in timers) - time.monotonic())
                timeout = min(timeout, 0.05)
            try:
                item = q.get(timeout=timeout)
            except queue.Empty:
                item = None
            now = self.now_ms()
            if item is not None:
                kind = item[0]
                if kind == "msg":
                    replica.on_message(item[1], now)
                elif kind == "timer_set":
                    timers.append((item[1], item[2]))
                elif kind == "fetch":
                    _, from_height, respond = item
                    respond(replica.serve_blocks(from_height))
                elif kind == "call":
                    _, callback, args = item
                    callback(*args)
            due = [t for t in timers if t[0] <= time.monotonic()]
            if due:
                timers[:] = [t for t in timers if t[0] > time.monotonic()]
                for _, token in due:
                    replica.on_timer(token, self.now_ms())

    def start(self) -> None:
        for node_id in self._replicas:
            thread = threading.Thread(target=self._worker, args=(node_id,),
                                      name=f"replica-{node_id}", daemon=True)
            self._threads.append(thread)
            thread.start()

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=2.0)
