import random

import pytest

from emrchain import crypto
from emrchain.chaincode import (
    Chaincode,
    DEFAULT_CATEGORIES,
    MetadataItem,
    PatientRecord,
    Permission,
    Right,
    check_permission,
    parse_category,
)
from emrchain.errors import ChaincodeError
from emrchain.ledger import KIND_INVOKE, Transaction, WorldState
from emrchain.membership import Role

from oracle import oracle_check

NOW = 1_700_000_100_000
LAB = "laboratory_results"
DOSE = "delivered_radiation_doses"
HISTORY = "history_physical_exams"


def perm(doctor="doc1", right=Right.READ, category=LAB, frm=NOW - 1000,
         to=NOW + 1000, ts=None, study=None, anonymity=None):
    return Permission(
        doctor_id=doctor, right=right, category=category,
        valid_from=frm, valid_to=to,
        timestamp=NOW if ts is None else ts,
        study_id=study, anonymity=anonymity,
    )


class TestPermissionModel:
    def test_codec_roundtrip(self):
        p = perm(study=None)
        assert Permission.from_bytes(p.to_bytes()) == p
        s = perm(right=Right.SHARE, study="study1", anonymity=True)
        assert Permission.from_bytes(s.to_bytes()) == s

    def test_validate_window(self):
        with pytest.raises(ChaincodeError) as exc:
            perm(frm=NOW + 10, to=NOW).validate()
        assert exc.value.code == "INVALID_WINDOW"

    def test_share_requires_study(self):
        with pytest.raises(ChaincodeError) as exc:
            perm(right=Right.SHARE).validate()
        assert exc.value.code == "MISSING_STUDY_ID"

    def test_study_only_with_share(self):
        with pytest.raises(ChaincodeError) as exc:
            perm(right=Right.READ, study="s").validate()
        assert exc.value.code == "INVALID_PERMISSION"

    def test_category_aliases(self):
        assert parse_category("lab") == LAB
        assert parse_category("dose") == DOSE
        assert parse_category("history") == HISTORY
        with pytest.raises(ChaincodeError):
            parse_category("imaging")


class TestCheckPermission:
    def record(self, *perms):
        return PatientRecord(owner="alice", permissions=list(perms))

    def test_grant_in_window(self):
        record = self.record(perm())
        assert check_permission(record, "doc1", Right.READ, LAB, NOW)

    def test_no_grant_for_doctor(self):
        record = self.record(perm())
        assert not check_permission(record, "doc2", Right.READ, LAB, NOW)

    def test_wrong_category(self):
        record = self.record(perm())
        assert not check_permission(record, "doc1", Right.READ, DOSE, NOW)

    def test_expired(self):
        record = self.record(perm(to=NOW - 1))
        assert not check_permission(record, "doc1", Right.READ, LAB, NOW)

    def test_future(self):
        record = self.record(perm(frm=NOW + 1))
        assert not check_permission(record, "doc1", Right.READ, LAB, NOW)

    def test_latest_wins_supersession(self):
        granted = perm(ts=NOW - 10)
        revoked = perm(ts=NOW - 5, frm=0, to=NOW - 100)
        record = self.record(granted, revoked)
        assert not check_permission(record, "doc1", Right.READ, LAB, NOW)
        # And the reverse order of timestamps re-enables.
        record = self.record(perm(ts=NOW - 5, frm=0, to=NOW - 100), perm(ts=NOW - 1))
        assert check_permission(record, "doc1", Right.READ, LAB, NOW)

    def test_share_needs_matching_study(self):
        record = self.record(perm(right=Right.SHARE, study="s1", anonymity=False))
        assert check_permission(record, "doc1", Right.SHARE, LAB, NOW, "s1")
        assert not check_permission(record, "doc1", Right.SHARE, LAB, NOW, "s2")

    def test_share_does_not_imply_read(self):
        record = self.record(perm(right=Right.SHARE, study="s1", anonymity=False))
        assert not check_permission(record, "doc1", Right.READ, LAB, NOW)

    def test_monotone_supersession_other_tuples_unaffected(self):
        rng = random.Random(3)
        perms = [
            perm(doctor=f"doc{rng.randrange(3)}",
                 right=rng.choice((Right.READ, Right.WRITE)),
                 category=rng.choice(DEFAULT_CATEGORIES),
                 frm=NOW - rng.randrange(5000), to=NOW + rng.randrange(5000),
                 ts=NOW - 100 + i)
            for i in range(30)
        ]
        record = self.record(*perms)
        queries = [
            (f"doc{d}", r, c)
            for d in range(3)
            for r in (Right.READ, Right.WRITE)
            for c in DEFAULT_CATEGORIES
        ]
        before = {q: check_permission(record, q[0], q[1], q[2], NOW) for q in queries}
        record.permissions.append(perm(doctor="doc9", ts=NOW + 50))
        after = {q: check_permission(record, q[0], q[1], q[2], NOW) for q in queries}
        assert before == after


class TestOracleEquivalence:
    def test_1000_randomized_instances(self):
        """check_permission agrees with the brute-force oracle on 1,000
        randomized (grant-set, request) instances."""
        rng = random.Random(12345)
        rights = (Right.READ, Right.WRITE, Right.SHARE)
        agreements = 0
        for case in range(1000):
            n_grants = rng.randrange(0, 12)
            perms = []
            grant_dicts = []
            ts_pool = rng.sample(range(NOW - 10_000, NOW + 10_000), n_grants)
            for ts in ts_pool:
                right = rng.choice(rights)
                study = f"s{rng.randrange(3)}" if right is Right.SHARE else None
                frm = NOW + rng.randrange(-8000, 4000)
                to = frm + rng.randrange(0, 9000)
                p = Permission(
                    doctor_id=f"doc{rng.randrange(3)}", right=right,
                    category=rng.choice(DEFAULT_CATEGORIES),
                    valid_from=frm, valid_to=to, timestamp=ts,
                    study_id=study,
                    anonymity=rng.random() < 0.5 if right is Right.SHARE else None,
                )
                perms.append(p)
                grant_dicts.append({
                    "doctor": p.doctor_id, "right": p.right.token,
                    "category": p.category, "from": p.valid_from,
                    "to": p.valid_to, "timestamp": p.timestamp,
                    "study": p.study_id,
                })
            record = PatientRecord(owner="alice",
                                   permissions=sorted(perms, key=lambda p: p.timestamp))
            doctor = f"doc{rng.randrange(3)}"
            right = rng.choice(rights)
            category = rng.choice(DEFAULT_CATEGORIES)
            study = f"s{rng.randrange(3)}" if right is Right.SHARE else None
            now = NOW + rng.randrange(-9000, 9000)
            got = check_permission(record, doctor, right, category, now, study)
            want = oracle_check(grant_dicts, doctor, right.token, category, now, study)
            assert got == want, f"case {case}: chaincode={got} oracle={want}"
            agreements += 1
        assert agreements == 1000


class CodeEnv:
    """Chaincode wired to a bare world state for direct execution."""

    def __init__(self, registry, make_user):
        self.chaincode = Chaincode(registry)
        self.state = WorldState()
        self.patient = make_user("alice", Role.PATIENT)
        self.doctor = make_user("doc1", Role.DOCTOR)
        self.doctor2 = make_user("doc2", Role.DOCTOR)

    def invoke(self, user, function, args, now=NOW):
        tx = Transaction.make_signed(user.sign.secret, KIND_INVOKE, function,
                                     args, user.cert_id, now)
        return self.chaincode.execute(self.state, tx, now)

    def record(self):
        return PatientRecord.from_bytes(self.state.get(self.patient.pseudonym))


@pytest.fixture
def env(registry, make_user):
    return CodeEnv(registry, make_user)


class TestInvokes:
    def test_create_then_query_empty(self, env):
        status = env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        assert status.ok
        record = env.chaincode.query_get_record(
            env.state, "alice", Role.PATIENT, env.patient.pseudonym, NOW)
        assert record.permissions == [] and record.items == []
        assert record.private_data is None

    def test_create_twice(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        status = env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        assert not status.ok and status.code == "RECORD_EXISTS"

    def test_add_permission_and_window_validation(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        ok = env.invoke(env.patient, "addPermission",
                        [env.patient.pseudonym, perm().to_bytes()])
        assert ok.ok
        bad = env.invoke(env.patient, "addPermission",
                         [env.patient.pseudonym,
                          perm(frm=NOW + 10, to=NOW, ts=NOW + 1).to_bytes()])
        assert not bad.ok and bad.code == "INVALID_WINDOW"

    def test_duplicate_grant_timestamp_rejected(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(ts=NOW).to_bytes()])
        dup = env.invoke(env.patient, "addPermission",
                         [env.patient.pseudonym, perm(ts=NOW, category=DOSE).to_bytes()])
        assert not dup.ok and dup.code == "DUPLICATE_TIMESTAMP"

    def test_grant_missing_study_for_share(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        p = Permission(doctor_id="doc1", right=Right.SHARE, category=LAB,
                       valid_from=NOW, valid_to=NOW + 10, timestamp=NOW)
        status = env.invoke(env.patient, "addPermission",
                            [env.patient.pseudonym, p.to_bytes()])
        assert not status.ok and status.code == "MISSING_STUDY_ID"

    def test_grant_on_missing_record(self, env):
        status = env.invoke(env.patient, "addPermission",
                            [env.patient.pseudonym, perm().to_bytes()])
        assert not status.ok and status.code == "NO_RECORD"

    def test_only_owner_grants(self, env, make_user):
        other = make_user("bob", Role.PATIENT)
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        status = env.invoke(other, "addPermission",
                            [env.patient.pseudonym, perm().to_bytes()])
        assert not status.ok and status.code == "NOT_OWNER"

    def item(self, doctor="doc1", category=LAB, path=None, data=b"bytes"):
        path = path or f"store/{'0' * 64}/{category}/{'a' * 32}"
        return MetadataItem(doctor_id=doctor, category=category, path_to_file=path,
                            file_hash=crypto.sha256(data), timestamp=NOW)

    def test_upload_with_write_grant(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(right=Right.WRITE).to_bytes()])
        status = env.invoke(env.doctor, "addMetadataItem",
                            [env.patient.pseudonym, self.item().to_bytes()])
        assert status.ok
        assert len(env.record().items) == 1

    def test_upload_with_read_grant_only(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(right=Right.READ).to_bytes()])
        status = env.invoke(env.doctor, "addMetadataItem",
                            [env.patient.pseudonym, self.item().to_bytes()])
        assert not status.ok and status.code == "PERMISSION_DENIED"

    def test_upload_with_expired_write_grant(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym,
                    perm(right=Right.WRITE, to=NOW - 1).to_bytes()])
        status = env.invoke(env.doctor, "addMetadataItem",
                            [env.patient.pseudonym, self.item().to_bytes()])
        assert not status.ok and status.code == "PERMISSION_DENIED"

    def test_duplicate_path_rejected(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(right=Right.WRITE).to_bytes()])
        env.invoke(env.doctor, "addMetadataItem",
                   [env.patient.pseudonym, self.item().to_bytes()])
        status = env.invoke(env.doctor, "addMetadataItem",
                            [env.patient.pseudonym, self.item(data=b"other").to_bytes()])
        assert not status.ok and status.code == "DUPLICATE_PATH"

    def test_private_data_set_get_clear(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "setPrivateData", [env.patient.pseudonym, b"cipher"])
        assert env.record().private_data == b"cipher"
        env.invoke(env.patient, "setPrivateData", [env.patient.pseudonym, b""])
        assert env.record().private_data is None

    def test_record_roundtrips_losslessly(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(right=Right.WRITE).to_bytes()])
        env.invoke(env.doctor, "addMetadataItem",
                   [env.patient.pseudonym, self.item().to_bytes()])
        env.invoke(env.patient, "setPrivateData", [env.patient.pseudonym, b"note"])
        record = env.record()
        assert PatientRecord.from_bytes(record.to_bytes()) == record

    def test_migrate_record(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        new_key = crypto.sha256(b"new-pseudonym")
        status = env.invoke(env.patient, "migrateRecord",
                            [env.patient.pseudonym, new_key])
        assert status.ok
        with pytest.raises(ChaincodeError) as exc:
            env.chaincode.query_get_record(env.state, "alice", Role.PATIENT,
                                           env.patient.pseudonym, NOW)
        assert exc.value.code == "NO_RECORD"
        moved = env.chaincode.query_get_record(env.state, "alice", Role.PATIENT,
                                               new_key, NOW)
        assert moved.owner == "alice"
        # The tombstone blocks re-creation at the old pseudonym.
        squatted = env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        assert not squatted.ok and squatted.code == "RECORD_EXISTS"


class TestQueries:
    def test_owner_sees_full_record(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "setPrivateData", [env.patient.pseudonym, b"secret"])
        record = env.chaincode.query_get_record(
            env.state, "alice", Role.PATIENT, env.patient.pseudonym, NOW)
        assert record.private_data == b"secret"

    def test_doctor_filtered_to_read_grants(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        for category in (LAB, DOSE):
            env.invoke(env.patient, "addPermission",
                       [env.patient.pseudonym,
                        perm(right=Right.WRITE, category=category,
                             ts=NOW - 20 + DEFAULT_CATEGORIES.index(category)).to_bytes()])
            env.invoke(env.doctor, "addMetadataItem",
                       [env.patient.pseudonym,
                        TestInvokes().item(category=category,
                                           path=f"store/{'0'*64}/{category}/{'b'*32}",
                                           data=category.encode()).to_bytes()])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym, perm(right=Right.READ, category=LAB,
                                                ts=NOW - 5).to_bytes()])
        record = env.chaincode.query_get_record(
            env.state, "doc1", Role.DOCTOR, env.patient.pseudonym, NOW)
        assert [i.category for i in record.items] == [LAB]
        assert record.private_data is None
        assert all(p.doctor_id == "doc1" for p in record.permissions)

    def test_doctor_without_grant_denied(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        with pytest.raises(ChaincodeError) as exc:
            env.chaincode.query_get_record(env.state, "doc2", Role.DOCTOR,
                                           env.patient.pseudonym, NOW)
        assert exc.value.code == "PERMISSION_DENIED"

    def test_authorize_share_ticket(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym,
                    perm(right=Right.SHARE, study="s1", anonymity=True,
                         ts=NOW - 10).to_bytes()])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym,
                    perm(right=Right.WRITE, ts=NOW - 9).to_bytes()])
        env.invoke(env.doctor, "addMetadataItem",
                   [env.patient.pseudonym, TestInvokes().item().to_bytes()])
        ticket = env.chaincode.query_authorize_share(
            env.state, "doc1", env.patient.pseudonym, "s1", LAB, NOW)
        assert ticket.anonymity is True
        assert len(ticket.items) == 1

    def test_share_wrong_study_denied(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym,
                    perm(right=Right.SHARE, study="s1", anonymity=False).to_bytes()])
        with pytest.raises(ChaincodeError) as exc:
            env.chaincode.query_authorize_share(
                env.state, "doc1", env.patient.pseudonym, "s2", LAB, NOW)
        assert exc.value.code == "PERMISSION_DENIED"

    def test_share_window_expired_denied(self, env):
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        env.invoke(env.patient, "addPermission",
                   [env.patient.pseudonym,
                    perm(right=Right.SHARE, study="s1", anonymity=False,
                         to=NOW - 1).to_bytes()])
        with pytest.raises(ChaincodeError) as exc:
            env.chaincode.query_authorize_share(
                env.state, "doc1", env.patient.pseudonym, "s1", LAB, NOW)
        assert exc.value.code == "PERMISSION_DENIED"


class TestNoWriteWithoutGrant:
    def test_randomized_workload_every_item_covered(self, registry, make_user):
        """Every stored metadata item is covered by a write grant valid at
        its stored timestamp, across a randomized workload."""
        rng = random.Random(77)
        env = CodeEnv(registry, make_user)
        env.invoke(env.patient, "createRecord", [env.patient.pseudonym])
        history = []
        now = NOW
        for step in range(300):
            now += rng.randrange(1, 50)
            if rng.random() < 0.4:
                p = Permission(
                    doctor_id=rng.choice(("doc1", "doc2")),
                    right=rng.choice((Right.READ, Right.WRITE)),
                    category=rng.choice(DEFAULT_CATEGORIES),
                    valid_from=now + rng.randrange(-2000, 500),
                    valid_to=now + rng.randrange(-500, 2000),
                    timestamp=now,
                )
                if p.valid_from <= p.valid_to:
                    status = env.invoke(env.patient, "addPermission",
                                        [env.patient.pseudonym, p.to_bytes()], now=now)
                    if status.ok:
                        history.append({
                            "doctor": p.doctor_id, "right": p.right.token,
                            "category": p.category, "from": p.valid_from,
                            "to": p.valid_to, "timestamp": p.timestamp,
                            "study": None, "valid_at": now,
                        })
            else:
                doctor = rng.choice((env.doctor, env.doctor2))
                category = rng.choice(DEFAULT_CATEGORIES)
                item = MetadataItem(
                    doctor_id=doctor.user_id, category=category,
                    path_to_file=f"store/{'0' * 64}/{category}/{step:032x}",
                    file_hash=crypto.sha256(bytes([step % 251])), timestamp=now,
                )
                env.invoke(doctor, "addMetadataItem",
                           [env.patient.pseudonym, item.to_bytes()], now=now)
        record = env.record()
        assert record.items, "workload should commit at least one item"
        for item in record.items:
            grants_before = [g for g in history if g["valid_at"] <= item.timestamp]
            assert oracle_check(grants_before, item.doctor_id, "write",
                                item.category, item.timestamp)
