import json
import time

import pytest

from emrchain import crypto
from emrchain.chaincode import Right
from emrchain.client import DoctorClient, PatientClient, WireError
from emrchain.errors import UnparseableDocument
from emrchain.harness import LocalNetwork, ServeConfig
from emrchain.node import anonymize_document, b64d, b64e, parse_structured_document
from emrchain.wire import InProcessChannel, TcpChannel

LAB = "laboratory_results"
DOSE = "delivered_radiation_doses"


@pytest.fixture(scope="module")
def net(tmp_path_factory):
    config = ServeConfig(
        n=4, base_port=0,
        store_root=str(tmp_path_factory.mktemp("cloud")),
        chain_root=str(tmp_path_factory.mktemp("chains")),
        practitioners=["doc1", "doc2", "doc3", "doc4"],
        batch_size=2, batch_timeout_ms=30, view_timeout_ms=2000,
    )
    network = LocalNetwork(config)
    network.start()
    yield network
    network.stop()


@pytest.fixture(scope="module")
def channel(net):
    return InProcessChannel(net.nodes["node0"])


def now_ms():
    return int(time.time() * 1000)


def make_patient(channel, name, zip_code="11790"):
    uii = crypto.Uii(dob="1960-02-02", given_names=(name.title(), "X"),
                     zip_code=zip_code)
    patient = PatientClient(name, uii, channel)
    patient.register()
    return patient


def make_doctor(channel, name):
    doctor = DoctorClient(name, channel)
    doctor.register()
    return doctor


class TestAnonymize:
    DOC = {
        "name": "Ada Lovelace", "ssn": "123-45-6789", "dob": "1815-12-10",
        "zip": "11790", "address": "1 Example Way", "patient_id": "pat-7",
        "doctor_id": "doc1", "lab_test": "CBC", "value": 4.2, "unit": "10^9/L",
    }

    def test_identifiers_stripped_clinical_kept(self):
        result = json.loads(anonymize_document(json.dumps(self.DOC).encode()))
        assert "name" not in result and "ssn" not in result
        assert "dob" not in result and "zip" not in result
        assert "address" not in result and "patient_id" not in result
        assert "doctor_id" not in result
        assert result["lab_test"] == "CBC" and result["value"] == 4.2

    def test_no_identifiers_unchanged(self):
        doc = {"lab_test": "CBC", "value": 1}
        result = json.loads(anonymize_document(json.dumps(doc).encode()))
        assert result == doc

    def test_idempotent(self):
        once = anonymize_document(json.dumps(self.DOC).encode())
        assert anonymize_document(once) == once

    def test_field_name_variants(self):
        doc = {"Patient-ID": "x", "Date_Of_Birth": "y", "labValue": 3}
        result = json.loads(anonymize_document(json.dumps(doc).encode()))
        assert result == {"labValue": 3}

    def test_binary_rejected(self):
        with pytest.raises(UnparseableDocument):
            anonymize_document(b"\x89PNG\r\n...binary...")
        with pytest.raises(UnparseableDocument):
            parse_structured_document(b"[1, 2, 3]")


class TestWireFormat:
    def test_unknown_op(self, net):
        response = net.nodes["node0"].handle_frame('{"op":"bogus"}')
        decoded = json.loads(response)
        assert decoded["ok"] is False and decoded["error"] == "BAD_ARGS"

    def test_unparseable_frame(self, net):
        decoded = json.loads(net.nodes["node0"].handle_frame("not json"))
        assert decoded["ok"] is False

    def test_ping_over_tcp(self, net):
        server = net.servers[0]
        channel = TcpChannel(server.host, server.port)
        response = channel.request({"op": "ping"})
        assert response["ok"] and response["node"] == "node0"

    def test_response_is_single_canonical_json_line(self, net):
        raw = net.nodes["node0"].handle_frame('{"op":"ping"}')
        assert "\n" not in raw
        decoded = json.loads(raw)
        assert raw == json.dumps(decoded, sort_keys=True, separators=(",", ":"))


@pytest.fixture(scope="module")
def actors(channel):
    patient = make_patient(channel, "alice")
    doctor = make_doctor(channel, "doc1")
    stranger = make_doctor(channel, "doc2")
    receipt = patient.create_record()
    assert receipt["status"] == "committed"
    return patient, doctor, stranger


class TestEndToEndFlows:

    def test_grant_and_upload_and_read(self, actors):
        patient, doctor, _ = actors
        now = now_ms()
        assert patient.grant("doc1", Right.WRITE, LAB, now - 1000,
                             now + 600_000)["status"] == "committed"
        assert patient.grant("doc1", Right.READ, LAB, now - 1000,
                             now + 600_000)["status"] == "committed"
        wrapped = patient.share_key("doc1")
        payload = json.dumps({"lab_test": "CBC", "value": 5.1,
                              "name": "Alice"}).encode()
        receipt = doctor.upload(patient.pseudonym, LAB, payload, wrapped)
        assert receipt["status"] == "committed"
        assert receipt["hash"] == crypto.sha256(payload).hex()
        docs = doctor.read(patient.pseudonym, wrapped, LAB)
        assert [d for _, d in docs] == [payload]

    def test_receipt_height_matches_all_nodes(self, actors, net):
        """Receipt honesty: a committed receipt reporting height h implies
        the tx sits in block h on every node that has block h."""
        node0 = net.nodes["node0"]
        for receipt in node0.receipts.values():
            if receipt["status"] != "committed":
                continue
            height = receipt["height"]
            for node in net.nodes.values():
                if node.replica.height < height:
                    continue
                block = node.replica.ledger.blocks[height]
                assert receipt["tx_id"] in {t.tx_id.hex() for t in block.txs}

    def test_stranger_read_denied(self, actors):
        patient, _, stranger = actors
        wrapped = patient.share_key("doc2")
        with pytest.raises(WireError) as exc:
            stranger.read(patient.pseudonym, wrapped)
        assert exc.value.code == "PERMISSION_DENIED"

    def test_upload_without_grant_cleans_blob(self, actors, net):
        patient, _, stranger = actors
        wrapped = patient.share_key("doc2")
        store = net.store
        before = {r.path for r in store.list_refs(patient.pseudonym)}
        with_receipt = stranger.upload(patient.pseudonym, LAB, b"sneaky", wrapped)
        assert with_receipt["status"] == "failed"
        assert with_receipt["code"] == "PERMISSION_DENIED"
        after = {r.path for r in store.list_refs(patient.pseudonym)}
        assert after == before, "orphan blob must be garbage-collected"

    def test_upload_wrong_category_vs_grant(self, actors):
        patient, doctor, _ = actors
        wrapped = patient.share_key("doc1")
        receipt = doctor.upload(patient.pseudonym, DOSE, b"dose data", wrapped)
        assert receipt["status"] == "failed"
        assert receipt["code"] == "PERMISSION_DENIED"

    def test_doctor_grant_is_role_denied(self, actors, net):
        _, doctor, _ = actors
        from emrchain.ledger import KIND_INVOKE, Transaction
        from emrchain.chaincode import Permission

        perm = Permission("doc2", Right.READ, LAB, 0, 10, timestamp=now_ms())
        tx = Transaction.make_signed(
            doctor.sign.secret, KIND_INVOKE, "addPermission",
            [crypto.sha256(b"any"), perm.to_bytes()], doctor.cert_id, now_ms(),
        )
        receipt = net.nodes["node0"].submit_and_wait(tx)
        assert receipt["status"] == "rejected"
        assert receipt["code"] == "ROLE_DENIED"

    def test_private_data_roundtrip(self, actors):
        patient, _, _ = actors
        patient.set_private_data(b"my private note")
        assert patient.read_private_data() == b"my private note"
        record = patient.show_record()
        assert b64d(record["private_data"]) != b"my private note"  # encrypted

    def test_research_package_anonymized(self, actors):
        patient, doctor, _ = actors
        now = now_ms()
        patient.grant("doc1", Right.SHARE, LAB, now - 1000, now + 600_000,
                      study_id="study1", anonymity=True)
        wrapped = patient.share_key("doc1")
        package = doctor.share_research(patient.pseudonym, "study1", LAB, wrapped)
        assert package["anonymity"] is True
        assert len(package["documents"]) >= 1
        for encoded in package["documents"]:
            doc = json.loads(b64d(encoded))
            assert "name" not in doc
            assert "lab_test" in doc
        assert all(p["path"].startswith("store/") for p in package["provenance"])

    def test_research_package_plain(self, actors):
        patient, doctor, _ = actors
        now = now_ms()
        patient.grant("doc1", Right.SHARE, DOSE, now - 1000, now + 600_000,
                      study_id="study2", anonymity=False)
        patient.grant("doc1", Right.WRITE, DOSE, now - 1000, now + 600_000)
        wrapped = patient.share_key("doc1")
        binary = b"\x00\x01binary dose data"
        assert doctor.upload(patient.pseudonym, DOSE, binary,
                             wrapped)["status"] == "committed"
        package = doctor.share_research(patient.pseudonym, "study2", DOSE, wrapped)
        assert package["anonymity"] is False
        assert b64d(package["documents"][0]) == binary

    def test_research_binary_with_anonymity_rejected(self, actors):
        patient, doctor, _ = actors
        now = now_ms()
        patient.grant("doc1", Right.SHARE, DOSE, now - 1000, now + 600_000,
                      study_id="study3", anonymity=True)
        wrapped = patient.share_key("doc1")
        with pytest.raises(WireError) as exc:
            doctor.share_research(patient.pseudonym, "study3", DOSE, wrapped)
        assert exc.value.code == "UNPARSEABLE_DOCUMENT"

    def test_research_without_grant_denied(self, actors):
        patient, doctor, _ = actors
        wrapped = patient.share_key("doc1")
        with pytest.raises(WireError) as exc:
            doctor.share_research(patient.pseudonym, "study-none", LAB, wrapped)
        assert exc.value.code == "PERMISSION_DENIED"

    def test_tcert_issuance_and_unlinkability_surface(self, actors):
        _, doctor, _ = actors
        t1, s1 = doctor.request_tcert()
        t2, s2 = doctor.request_tcert()
        assert t1.tcert_id != t2.tcert_id
        assert t1.sign_public != t2.sign_public
        assert b"doc1" not in t1.to_bytes()


class TestRecovery:
    def test_full_recovery_flow(self, channel, net):
        patient = make_patient(channel, "bob", zip_code="55555")
        doctor = DoctorClient("doc3", channel)
        doctor.register()
        assert patient.create_record()["status"] == "committed"
        now = now_ms()
        patient.grant("doc3", Right.WRITE, LAB, now - 1000, now + 600_000)
        wrapped = patient.share_key("doc3")
        payloads = [json.dumps({"lab_test": f"t{i}", "value": i}).encode()
                    for i in range(3)]
        for payload in payloads:
            assert doctor.upload(patient.pseudonym, LAB, payload,
                                 wrapped)["status"] == "committed"
        old_master = patient.master
        old_pseudonym = patient.pseudonym
        old_items = patient.show_record()["items"]

        result = patient.recover()
        assert result["rotated"] == 3
        assert result["migration"]["status"] == "committed"
        assert patient.master.version == old_master.version + 1
        assert patient.pseudonym != old_pseudonym

        # New key reads 100% of prior documents; hashes unchanged.
        docs = patient.read_documents()
        assert sorted(d for _, d in docs) == sorted(payloads)
        new_items = patient.show_record()["items"]
        assert [i["hash"] for i in new_items] == [i["hash"] for i in old_items]

        # Old key decrypts 0%.
        for item in new_items:
            envelope = crypto.Envelope.from_bytes(b64d(patient._query(
                "fetchBlob", [item["path"].encode()])["envelope"]))
            with pytest.raises(crypto.VersionMismatch):
                crypto.decrypt_blob(old_master, envelope)

        # Old pseudonym is tombstoned.
        from emrchain.ledger import KIND_QUERY, Transaction
        tx = Transaction.make_signed(
            patient.sign.secret, KIND_QUERY, "getRecord", [old_pseudonym],
            patient.cert_id, now_ms())
        with pytest.raises(WireError) as exc:
            patient._request({"op": "query", "tx": b64e(tx.to_bytes())})
        assert exc.value.code == "NO_RECORD"

    def test_recover_unknown_uii(self, channel):
        ghost = PatientClient(
            "ghost", crypto.Uii(dob="1900-01-01", given_names=("No", "One"),
                                zip_code="00000"), channel)
        with pytest.raises(WireError) as exc:
            ghost._request({"op": "recover_access", "uii": ghost.uii.to_dict()})
        assert exc.value.code == "UNKNOWN_PATIENT"


class TestNoPlaintextAtRest:
    def test_store_and_chain_files_hold_no_plaintext(self, channel, net, tmp_path):
        patient = make_patient(channel, "carla", zip_code="31337")
        doctor = DoctorClient("doc4", channel)
        doctor.register()
        assert patient.create_record()["status"] == "committed"
        now = now_ms()
        patient.grant("doc4", Right.WRITE, LAB, now - 1000, now + 600_000)
        wrapped = patient.share_key("doc4")
        marker = b"EXTREMELY-UNIQUE-PLAINTEXT-MARKER-0xC0FFEE"
        payload = marker + crypto.rand_bytes(32)
        assert doctor.upload(patient.pseudonym, LAB, payload,
                             wrapped)["status"] == "committed"
        time.sleep(0.1)
        scanned = 0
        for root in (net.config.store_root, net.config.chain_root):
            for path in __import__("pathlib").Path(root).rglob("*"):
                if path.is_file():
                    scanned += 1
                    assert marker not in path.read_bytes(), path
        assert scanned >= 5  # blobs plus one chain log per node
        # Membership state holds no plaintext either.
        assert marker not in net.membership.persisted_state()
