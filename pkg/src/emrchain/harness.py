"""Network harness: builds n-node networks, drives scripted or randomized
workloads over the deterministic simulator, and emits reproducible run
reports.  Also assembles the threaded local-socket deployment used by the
command-line clients.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .chaincode import Chaincode, DEFAULT_CATEGORIES, MetadataItem, Permission, Right
from .consensus import Replica, ReplicaConfig
from .ledger import KIND_INVOKE, Ledger, LedgerLog, Transaction, replay
from .membership import (
    CertificateRegistry,
    MembershipService,
    PractitionerRegistry,
    Role,
)
from .netsim import BEHAVIORS, FaultPlanEntry, SimNetwork, ThreadedNetwork
from .node import Node
from .store import BlobRef, BlobStore, FilesystemBackend, MemoryBackend
from .wire import NodeServer


@dataclass
class HarnessPlan:
    """Declarative run description; same plan + same seed = same report."""

    n: int = 4
    seed: int = 1
    batch_size: int = 4
    batch_timeout_ms: int = 40
    view_timeout_ms: int = 400
    delay_ms: tuple[int, int] = (1, 8)
    faults: list[FaultPlanEntry] = field(default_factory=list)
    workload: dict = field(default_factory=dict)
    include_events: bool = False

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.faults and self.n < 4:
            raise ValueError("byzantine fault plans need at least four nodes")
        for entry in self.faults:
            if entry.behavior not in BEHAVIORS:
                raise ValueError(f"unknown behavior {entry.behavior!r}")
            if entry.node_id not in {node_name(i) for i in range(self.n)}:
                raise ValueError(f"fault targets unknown node {entry.node_id!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "HarnessPlan":
        faults = [
            FaultPlanEntry(
                node_id=f["node"] if isinstance(f["node"], str) else node_name(f["node"]),
                behavior=f["behavior"],
                from_ms=f.get("from_ms", 0),
                to_ms=f.get("to_ms", 1 << 62),
            )
            for f in data.get("faults", [])
        ]
        plan = cls(
            n=data.get("n", 4),
            seed=data.get("seed", 1),
            batch_size=data.get("batch_size", 4),
            batch_timeout_ms=data.get("batch_timeout_ms", 40),
            view_timeout_ms=data.get("view_timeout_ms", 400),
            delay_ms=tuple(data.get("delay_ms", (1, 8))),
            faults=faults,
            workload=data.get("workload", {}),
            include_events=data.get("include_events", False),
        )
        plan.validate()
        return plan

    @classmethod
    def from_file(cls, path: str | Path) -> "HarnessPlan":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "batch_timeout_ms": self.batch_timeout_ms,
            "view_timeout_ms": self.view_timeout_ms,
            "delay_ms": list(self.delay_ms),
            "faults": [
                {"node": f.node_id, "behavior": f.behavior,
                 "from_ms": f.from_ms, "to_ms": f.to_ms}
                for f in self.faults
            ],
            "workload": self.workload,
        }


def node_name(i: int) -> str:
    return f"node{i}"


@dataclass
class SimUser:
    user_id: str
    role: Role
    sign: crypto.SigningKeyPair
    enc: crypto.EncryptionKeyPair
    uii: crypto.Uii | None = None
    master: crypto.PatientMasterKey | None = None
    last_ts: int = 0

    @property
    def cert_id(self) -> str:
        return f"ecert:{self.user_id}"

    @property
    def pseudonym(self) -> bytes:
        return crypto.derive_pseudonym(self.master, self.uii)

    def unique_ts(self, now: int) -> int:
        ts = max(now, self.last_ts + 1)
        self.last_ts = ts
        return ts

    def make_invoke(self, function: str, args: list[bytes], now: int) -> Transaction:
        return Transaction.make_signed(
            self.sign.secret, KIND_INVOKE, function, args, self.cert_id,
            self.unique_ts(now),
        )


class SimEnv:
    """A wired simulated network plus its bookkeeping."""

    def __init__(self, plan: HarnessPlan):
        plan.validate()
        self.plan = plan
        self.rng = random.Random(plan.seed)
        self.net = SimNetwork(seed=self.rng.randrange(1 << 31), delay_ms=plan.delay_ms)
        self.practitioners = PractitionerRegistry()
        self.membership = MembershipService(
            self.practitioners, clock=lambda: self.net.now, rand=self.rng
        )
        self.registry = CertificateRegistry(self.membership.root_public)
        self.store = BlobStore(MemoryBackend())
        self.nodes: dict[str, Node] = {}
        self.patients: dict[str, SimUser] = {}
        self.doctors: dict[str, SimUser] = {}
        self.query_events: list[dict] = []
        self.action_events: list[dict] = []

        node_ids = tuple(node_name(i) for i in range(plan.n))
        fault_ids = {f.node_id for f in plan.faults}
        self.honest_ids = [n for n in node_ids if n not in fault_ids]

        node_keys = {}
        for node_id in node_ids:
            sign = crypto.SigningKeyPair.generate(self.rng)
            enc = crypto.EncryptionKeyPair.generate(self.rng)
            cert = self.membership.register(node_id, Role.NODE, sign.public, enc.public)
            self.registry.add(cert)
            node_keys[node_id] = (sign, enc)

        for node_id in node_ids:
            sign, enc = node_keys[node_id]
            config = ReplicaConfig(
                node_id=node_id, node_ids=node_ids,
                batch_size=plan.batch_size,
                batch_timeout_ms=plan.batch_timeout_ms,
                view_timeout_ms=plan.view_timeout_ms,
            )
            chaincode = Chaincode(self.registry)
            ledger = Ledger.genesis(timestamp=self.net.now)
            replica = Replica(config, sign, ledger, chaincode, self.registry, self.net)
            self.net.attach(replica)
            node = Node(replica, chaincode, self.store, self.membership, enc,
                        clock=lambda: self.net.now, rand=self.rng)
            self.nodes[node_id] = node

        for entry in plan.faults:
            shifted = FaultPlanEntry(
                node_id=entry.node_id, behavior=entry.behavior,
                from_ms=self.net.now + entry.from_ms,
                to_ms=self.net.now + entry.to_ms if entry.to_ms < (1 << 61) else entry.to_ms,
            )
            self.net.inject_fault(shifted)

    # -- users -----------------------------------------------------------------

    def add_patient(self, user_id: str) -> SimUser:
        uii = crypto.Uii(
            dob=f"19{50 + self.rng.randrange(45):02d}-{1 + self.rng.randrange(12):02d}-"
                f"{1 + self.rng.randrange(28):02d}",
            given_names=(f"Pat{user_id}", "Q"),
            zip_code=f"{10000 + self.rng.randrange(89999)}",
            ssn=None if self.rng.random() < 0.3 else f"{self.rng.randrange(10**9):09d}",
        )
        user = SimUser(
            user_id=user_id, role=Role.PATIENT,
            sign=crypto.SigningKeyPair.generate(self.rng),
            enc=crypto.EncryptionKeyPair.generate(self.rng),
            uii=uii, master=crypto.PatientMasterKey.generate(rand=self.rng),
        )
        cert = self.membership.register(user_id, Role.PATIENT, user.sign.public,
                                        user.enc.public, uii=uii)
        self.registry.add(cert)
        self.patients[user_id] = user
        return user

    def add_doctor(self, user_id: str) -> SimUser:
        self.practitioners.add(user_id)
        user = SimUser(
            user_id=user_id, role=Role.DOCTOR,
            sign=crypto.SigningKeyPair.generate(self.rng),
            enc=crypto.EncryptionKeyPair.generate(self.rng),
        )
        cert = self.membership.register(user_id, Role.DOCTOR, user.sign.public,
                                        user.enc.public)
        self.registry.add(cert)
        self.doctors[user_id] = user
        return user

    # -- submission --------------------------------------------------------------

    def submit_to_all(self, tx: Transaction) -> None:
        """Every node receives every client transaction."""
        for node in self.nodes.values():
            node.pool_invoke(tx, gossip=False)

    def reference_node(self) -> Node:
        return self.nodes[self.honest_ids[0]]

    def run(self, max_events: int = 2_000_000, until: int | None = None) -> int:
        return self.net.run(max_events=max_events, until=until)

    # -- divergence / report -----------------------------------------------------

    def honest_chains(self) -> dict[str, list[tuple[str, str]]]:
        out = {}
        for node_id in self.honest_ids:
            ledger = self.nodes[node_id].replica.ledger
            out[node_id] = [
                (b.block_hash().hex(), b.state_hash.hex()) for b in ledger.blocks
            ]
        return out

    def divergence(self) -> bool:
        chains = list(self.honest_chains().values())
        for other in chains[1:]:
            for mine, theirs in zip(chains[0], other):
                if mine != theirs:
                    return True
        return False

    def report(self) -> dict:
        reference = self.reference_node()
        receipts = {
            r["tx_id"]: {"status": r["status"], "code": r["code"], "height": r["height"]}
            for r in reference.receipts.values()
        }
        chains = self.honest_chains()
        report = {
            "plan": self.plan.to_dict(),
            "committed_heights": {
                node_id: self.nodes[node_id].replica.height for node_id in sorted(self.nodes)
            },
            "tip_state": {
                node_id: self.nodes[node_id].replica.ledger.state.digest().hex()
                for node_id in sorted(self.honest_ids)
            },
            "chain": [
                {"height": i, "block_hash": bh, "state_hash": sh}
                for i, (bh, sh) in enumerate(chains[self.honest_ids[0]])
            ],
            "divergence": self.divergence(),
            "receipts": dict(sorted(receipts.items())),
            "metrics": {
                "delivered": self.net.delivered_count,
                "view_changes_sent": sum(
                    self.nodes[n].replica.metrics["view_changes_sent"] for n in self.honest_ids
                ),
                "pending": sum(
                    1 for r in reference.receipts.values() if r["status"] == "pending"
                ),
            },
        }
        if self.plan.include_events:
            report["events"] = self.action_events + self.query_events
        return report


# --------------------------------------------------------------------------
# Workloads
# --------------------------------------------------------------------------

def schedule_workload(env: SimEnv) -> None:
    spec = env.plan.workload
    kind = spec.get("kind", "random")
    if kind == "random":
        _schedule_random(env, spec)
    elif kind == "script":
        _schedule_script(env, spec.get("steps", []))
    elif kind == "none":
        pass
    else:
        raise ValueError(f"unknown workload kind {kind!r}")


def _do_invoke(env: SimEnv, user: SimUser, function: str, args: list[bytes],
               label: dict) -> None:
    tx = user.make_invoke(function, args, env.net.now)
    env.submit_to_all(tx)
    env.action_events.append({
        "t": env.net.now, "kind": "invoke", "function": function,
        "tx_id": tx.tx_id.hex(), **label,
    })


def _do_query_read(env: SimEnv, doctor: SimUser, patient: SimUser,
                   category: str | None) -> None:
    node = env.reference_node()
    state = node.replica.ledger.state
    now = env.net.now
    try:
        record = node.chaincode.query_get_record(
            state, doctor.user_id, Role.DOCTOR, patient.pseudonym, now
        )
        outcome = {"ok": True, "paths": [i.path_to_file for i in record.items]}
    except Exception as exc:  # noqa: BLE001 - recorded for the oracle
        outcome = {"ok": False, "code": getattr(exc, "code", "ERROR")}
    env.query_events.append({
        "t": now, "kind": "read", "doctor": doctor.user_id,
        "pseudonym": patient.pseudonym.hex(),
        "category": category, "height": state.block_number, **outcome,
    })


def _do_query_share(env: SimEnv, doctor: SimUser, patient: SimUser,
                    study: str, category: str) -> None:
    node = env.reference_node()
    state = node.replica.ledger.state
    now = env.net.now
    try:
        ticket = node.chaincode.query_authorize_share(
            state, doctor.user_id, patient.pseudonym, study, category, now
        )
        outcome = {"ok": True, "anonymity": ticket.anonymity,
                   "paths": [i.path_to_file for i in ticket.items]}
    except Exception as exc:  # noqa: BLE001
        outcome = {"ok": False, "code": getattr(exc, "code", "ERROR")}
    env.query_events.append({
        "t": now, "kind": "share", "doctor": doctor.user_id,
        "pseudonym": patient.pseudonym.hex(),
        "study": study, "category": category,
        "height": state.block_number, **outcome,
    })


def _do_upload(env: SimEnv, doctor: SimUser, patient: SimUser, category: str,
               payload: bytes) -> None:
    blob_id = crypto.rand_bytes(16, env.rng).hex()
    path = f"store/{patient.pseudonym.hex()}/{category}/{blob_id}"
    item = MetadataItem(
        doctor_id=doctor.user_id, category=category, path_to_file=path,
        file_hash=crypto.sha256(payload), timestamp=env.net.now,
    )
    env.store.put_blob(patient.pseudonym, category, payload, patient.master,
                       rand=env.rng, blob_id=blob_id)
    tx = doctor.make_invoke("addMetadataItem", [patient.pseudonym, item.to_bytes()],
                            env.net.now)
    env.reference_node().track_upload_blob(tx.tx_id, BlobRef.parse(path))
    env.submit_to_all(tx)
    env.action_events.append({
        "t": env.net.now, "kind": "invoke", "function": "addMetadataItem",
        "tx_id": tx.tx_id.hex(), "doctor": doctor.user_id,
        "pseudonym": patient.pseudonym.hex(), "category": category, "path": path,
    })


def _schedule_random(env: SimEnv, spec: dict) -> None:
    rng = env.rng
    n_patients = spec.get("patients", 2)
    n_doctors = spec.get("doctors", 3)
    n_events = spec.get("events", 40)
    span = spec.get("span_ms", max(4000, n_events * 60))
    start = env.net.now

    patients = [env.add_patient(f"pat{i}") for i in range(n_patients)]
    doctors = [env.add_doctor(f"doc{i}") for i in range(n_doctors)]

    for i, patient in enumerate(patients):
        at = start + 20 + i * 7
        env.net.schedule(at, _do_invoke, env, patient, "createRecord",
                         [patient.pseudonym], {"pseudonym": patient.pseudonym.hex()})

    warmup = start + 400
    for i in range(n_events):
        at = warmup + int(span * (i / max(1, n_events))) + rng.randrange(40)
        patient = rng.choice(patients)
        doctor = rng.choice(doctors)
        category = rng.choice(DEFAULT_CATEGORIES)
        roll = rng.random()
        if roll < 0.28:
            right = rng.choice((Right.READ, Right.WRITE, Right.SHARE))
            study = f"study{rng.randrange(3)}" if right is Right.SHARE else None
            anonymity = rng.random() < 0.5 if right is Right.SHARE else None
            lo = -rng.randrange(0, 4000)
            hi = rng.randrange(-1500, int(span * 1.5))
            if lo > hi:
                lo, hi = hi, lo

            def do_grant(env=env, patient=patient, doctor=doctor, right=right,
                         category=category, study=study, anonymity=anonymity,
                         lo=lo, hi=hi):
                now = env.net.now
                perm = Permission(
                    doctor_id=doctor.user_id, right=right, category=category,
                    valid_from=now + lo, valid_to=now + hi,
                    timestamp=patient.unique_ts(now), study_id=study,
                    anonymity=anonymity,
                )
                _do_invoke(env, patient, "addPermission",
                           [patient.pseudonym, perm.to_bytes()],
                           {"pseudonym": patient.pseudonym.hex(),
                            "doctor": doctor.user_id})

            env.net.schedule(at, do_grant)
        elif roll < 0.38:
            right = rng.choice((Right.READ, Right.WRITE, Right.SHARE))
            study = f"study{rng.randrange(3)}" if right is Right.SHARE else None

            def do_revoke(env=env, patient=patient, doctor=doctor, right=right,
                          category=category, study=study):
                now = env.net.now
                perm = Permission(
                    doctor_id=doctor.user_id, right=right, category=category,
                    valid_from=0, valid_to=max(0, now - 1),
                    timestamp=patient.unique_ts(now), study_id=study,
                    anonymity=False if right is Right.SHARE else None,
                )
                _do_invoke(env, patient, "addPermission",
                           [patient.pseudonym, perm.to_bytes()],
                           {"pseudonym": patient.pseudonym.hex(),
                            "doctor": doctor.user_id})

            env.net.schedule(at, do_revoke)
        elif roll < 0.66:
            payload = crypto.rand_bytes(24 + rng.randrange(64), rng)
            env.net.schedule(at, _do_upload, env, doctor, patient, category, payload)
        elif roll < 0.9:
            env.net.schedule(at, _do_query_read, env, doctor, patient,
                             category if rng.random() < 0.5 else None)
        else:
            env.net.schedule(at, _do_query_share, env, doctor, patient,
                             f"study{rng.randrange(3)}", category)


def _schedule_script(env: SimEnv, steps: list[dict]) -> None:
    for step in steps:
        at = env.net.now + step.get("t", 0)
        action = step["action"]
        if action == "add_patient":
            env.add_patient(step["patient"])
        elif action == "add_doctor":
            env.add_doctor(step["doctor"])
        elif action == "create_record":
            patient = env.patients[step["patient"]]
            env.net.schedule(at, _do_invoke, env, patient, "createRecord",
                             [patient.pseudonym],
                             {"pseudonym": patient.pseudonym.hex()})
        elif action == "grant":
            patient = env.patients[step["patient"]]

            def do_grant(env=env, patient=patient, step=step):
                now = env.net.now
                perm = Permission(
                    doctor_id=step["doctor"], right=Right.parse(step["right"]),
                    category=step["category"],
                    valid_from=now + step.get("from_off", 0),
                    valid_to=now + step.get("to_off", 60_000),
                    timestamp=patient.unique_ts(now),
                    study_id=step.get("study"), anonymity=step.get("anonymity"),
                )
                _do_invoke(env, patient, "addPermission",
                           [patient.pseudonym, perm.to_bytes()],
                           {"pseudonym": patient.pseudonym.hex(),
                            "doctor": step["doctor"]})

            env.net.schedule(at, do_grant)
        elif action == "upload":
            patient = env.patients[step["patient"]]
            doctor = env.doctors[step["doctor"]]
            payload = step.get("data", "clinical document").encode("utf-8")
            env.net.schedule(at, _do_upload, env, doctor, patient,
                             step["category"], payload)
        elif action == "read":
            patient = env.patients[step["patient"]]
            doctor = env.doctors[step["doctor"]]
            env.net.schedule(at, _do_query_read, env, doctor, patient,
                             step.get("category"))
        else:
            raise ValueError(f"unknown script action {action!r}")


def run_plan(plan: HarnessPlan) -> dict:
    """Build, run to quiescence, and report."""
    env = SimEnv(plan)
    schedule_workload(env)
    env.run()
    return env.report()


# --------------------------------------------------------------------------
# Threaded local-socket deployment
# --------------------------------------------------------------------------

@dataclass
class ServeConfig:
    n: int = 4
    host: str = "127.0.0.1"
    base_port: int = 7440
    store_root: str = "emrchain-store"
    chain_root: str | None = None
    registry_file: str | None = None
    practitioners: list[str] = field(default_factory=list)
    batch_size: int = 4
    batch_timeout_ms: int = 60
    view_timeout_ms: int = 1500

    @classmethod
    def from_file(cls, path: str | Path) -> "ServeConfig":
        data = json.loads(Path(path).read_text("utf-8"))
        return cls(**data)


class LocalNetwork:
    """n replicas in one process over the threaded transport, each exposing
    the wire API on its own TCP port."""

    def __init__(self, config: ServeConfig):
        self.config = config
        practitioners = PractitionerRegistry(set(config.practitioners))
        if config.registry_file:
            practitioners = PractitionerRegistry.from_file(config.registry_file)
            for extra in config.practitioners:
                practitioners.add(extra)
        self.membership = MembershipService(practitioners)
        self.registry = CertificateRegistry(self.membership.root_public)
        self.net = ThreadedNetwork()
        self.store = BlobStore(FilesystemBackend(config.store_root))
        self.nodes: dict[str, Node] = {}
        self.servers: list[NodeServer] = []

        node_ids = tuple(node_name(i) for i in range(config.n))
        node_keys = {}
        for node_id in node_ids:
            sign = crypto.SigningKeyPair.generate()
            enc = crypto.EncryptionKeyPair.generate()
            cert = self.membership.register(node_id, Role.NODE, sign.public, enc.public)
            self.registry.add(cert)
            node_keys[node_id] = (sign, enc)

        for i, node_id in enumerate(node_ids):
            sign, enc = node_keys[node_id]
            replica_config = ReplicaConfig(
                node_id=node_id, node_ids=node_ids,
                batch_size=config.batch_size,
                batch_timeout_ms=config.batch_timeout_ms,
                view_timeout_ms=config.view_timeout_ms,
            )
            chaincode = Chaincode(self.registry)
            log = None
            # Genesis pinned at timestamp 0 so a restarted node replays its
            # persisted chain onto a bit-identical base block.
            ledger = Ledger.genesis(timestamp=0)
            restored_certs: dict[int, bytes] = {}
            if config.chain_root:
                log = LedgerLog(Path(config.chain_root) / f"{node_id}.chain")
                entries = log.read_entries()
                if entries:
                    ledger = replay(ledger.blocks + [b for b, _ in entries], chaincode)
                    restored_certs = {b.number: c for b, c in entries if c}
            replica = Replica(replica_config, sign, ledger, chaincode,
                              self.registry, self.net)
            replica.commit_certs.update(restored_certs)
            self.net.attach(replica)
            node = Node(replica, chaincode, self.store, self.membership, enc,
                        clock=ThreadedNetwork.now_ms, ledger_log=log)
            self.nodes[node_id] = node
            server = NodeServer(node, config.host, config.base_port + i
                                if config.base_port else 0)
            self.servers.append(server)

    def start(self) -> None:
        self.net.start()
        for server in self.servers:
            server.start()

    def stop(self) -> None:
        for server in self.servers:
            server.stop()
        self.net.stop()

    def addresses(self) -> list[str]:
        return [f"{s.host}:{s.port}" for s in self.servers]
