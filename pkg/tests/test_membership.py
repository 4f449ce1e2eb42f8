import random

import pytest

from emrchain import crypto
from emrchain.errors import (
    BadIssuerSignature,
    CertificateExpired,
    DuplicateRegistration,
    UnknownCertificate,
    UnknownPatient,
    UnknownPractitioner,
)
from emrchain.membership import (
    CertificateRegistry,
    ECert,
    MembershipService,
    PractitionerRegistry,
    Role,
    TCert,
    cert_from_bytes,
    cert_identity,
    verify_cert,
)


def make_keys(rng):
    return crypto.SigningKeyPair.generate(rng), crypto.EncryptionKeyPair.generate(rng)


class TestRegistration:
    def test_doctor_in_registry(self, membership, rng):
        sign, enc = make_keys(rng)
        cert = membership.register("doc1", Role.DOCTOR, sign.public, enc.public)
        assert cert.role is Role.DOCTOR
        assert verify_cert(cert, membership.root_public) is Role.DOCTOR

    def test_doctor_not_in_registry(self, membership, rng):
        sign, enc = make_keys(rng)
        with pytest.raises(UnknownPractitioner):
            membership.register("quack", Role.DOCTOR, sign.public, enc.public)

    def test_duplicate_registration(self, membership, rng, uii):
        sign, enc = make_keys(rng)
        membership.register("alice", Role.PATIENT, sign.public, enc.public, uii=uii)
        with pytest.raises(DuplicateRegistration):
            membership.register("alice", Role.PATIENT, sign.public, enc.public, uii=uii)

    def test_patient_requires_uii(self, membership, rng):
        sign, enc = make_keys(rng)
        with pytest.raises(Exception):
            membership.register("alice", Role.PATIENT, sign.public, enc.public)

    def test_registry_file_roundtrip(self, tmp_path):
        path = tmp_path / "npdb.txt"
        path.write_text("docA\n\ndocB \n", "utf-8")
        registry = PractitionerRegistry.from_file(path)
        assert registry.contains("docA")
        assert registry.contains("docB")
        assert not registry.contains("docC")


class TestCertificates:
    def test_cert_codec(self, membership, rng, uii):
        sign, enc = make_keys(rng)
        cert = membership.register("alice", Role.PATIENT, sign.public, enc.public, uii=uii)
        again = cert_from_bytes(cert.to_bytes())
        assert again == cert
        assert cert_identity(cert) == "alice"

    def test_forged_signature_rejected(self, membership, rng):
        sign, enc = make_keys(rng)
        cert = membership.register("doc1", Role.DOCTOR, sign.public, enc.public)
        forged = ECert(cert.user_id, cert.role, cert.sign_public, cert.enc_public,
                       cert.valid_from, cert.valid_to,
                       bytes([cert.signature[0] ^ 1]) + cert.signature[1:])
        with pytest.raises(BadIssuerSignature):
            verify_cert(forged, membership.root_public)

    def test_expired_window_rejected(self, membership, rng):
        sign, enc = make_keys(rng)
        cert = membership.register("doc1", Role.DOCTOR, sign.public, enc.public)
        with pytest.raises(CertificateExpired):
            verify_cert(cert, membership.root_public, now_ms=cert.valid_to + 1)

    def test_registry_rejects_forged_insert(self, membership, registry, rng):
        sign, enc = make_keys(rng)
        rogue_root = crypto.SigningKeyPair.generate(rng)
        cert = ECert("mallory", Role.PATIENT, sign.public, enc.public, 0, 2**62)
        cert = ECert("mallory", Role.PATIENT, sign.public, enc.public, 0, 2**62,
                     crypto.sign(rogue_root.secret, cert.content_bytes()))
        with pytest.raises(BadIssuerSignature):
            registry.add(cert)
        with pytest.raises(UnknownCertificate):
            registry.resolve("ecert:mallory")


class TestTCerts:
    def test_two_tcerts_share_no_identifying_field(self, membership, rng):
        sign, enc = make_keys(rng)
        ecert = membership.register("doc1", Role.DOCTOR, sign.public, enc.public)
        t1, s1 = membership.issue_tcert(ecert)
        t2, s2 = membership.issue_tcert(ecert)
        # Field-equality scan over everything a validator can see.
        assert t1.tcert_id != t2.tcert_id
        assert t1.sign_public != t2.sign_public
        assert t1.signature != t2.signature
        assert s1 != s2
        assert not hasattr(t1, "user_id")

    def test_membership_resolves_tcert_nodes_cannot(self, membership, registry, rng):
        sign, enc = make_keys(rng)
        ecert = membership.register("doc1", Role.DOCTOR, sign.public, enc.public)
        tcert, _ = membership.issue_tcert(ecert)
        registry.add(tcert)
        assert membership.resolve_tcert(tcert.tcert_id) == "doc1"
        resolved = registry.resolve(tcert.cert_id)
        # Node-visible identity is the unlinkable cert id itself.
        assert cert_identity(resolved) == tcert.cert_id
        node_visible = resolved.to_bytes()
        assert b"doc1" not in node_visible

    def test_expired_ecert_rejected(self, rng):
        practitioners = PractitionerRegistry({"doc1"})
        clock = {"now": 1_000_000}
        service = MembershipService(practitioners, clock=lambda: clock["now"],
                                    rand=rng, cert_validity_ms=100)
        sign, enc = make_keys(rng)
        ecert = service.register("doc1", Role.DOCTOR, sign.public, enc.public)
        clock["now"] += 200
        with pytest.raises(CertificateExpired):
            service.issue_tcert(ecert)

    def test_unknown_ecert_rejected(self, membership, rng):
        sign, enc = make_keys(rng)
        stranger = ECert("ghost", Role.DOCTOR, sign.public, enc.public,
                         0, 2**62)
        stranger = ECert("ghost", Role.DOCTOR, sign.public, enc.public, 0, 2**62,
                         crypto.sign(membership.root.secret, stranger.content_bytes()))
        with pytest.raises(UnknownCertificate):
            membership.issue_tcert(stranger)


class TestRecovery:
    def test_recover_matches_patient(self, membership, rng, uii):
        sign, enc = make_keys(rng)
        membership.register("alice", Role.PATIENT, sign.public, enc.public, uii=uii)
        assert membership.recover_access(uii) == "alice"

    def test_recover_unknown_uii(self, membership, rng, uii):
        with pytest.raises(UnknownPatient):
            membership.recover_access(uii)


class TestPrivacySeparation:
    def test_persisted_state_decrypts_no_envelope(self, membership, rng, uii):
        """Slide a 32-byte window over everything the service persists and
        try it as an AES key against stored envelopes: zero successes."""
        sign, enc = make_keys(rng)
        membership.register("alice", Role.PATIENT, sign.public, enc.public, uii=uii)
        membership.register("doc1", Role.DOCTOR, *[k.public for k in make_keys(rng)])
        master = crypto.PatientMasterKey.generate(rand=rng)
        envelopes = [crypto.encrypt_blob(master, rng.randbytes(48), rng)
                     for _ in range(3)]
        blob = membership.persisted_state()
        assert master.key not in blob
        attempts = 0
        for offset in range(len(blob) - 31):
            candidate = crypto.PatientMasterKey(blob[offset:offset + 32],
                                                version=master.version)
            for envelope in envelopes:
                attempts += 1
                try:
                    crypto.decrypt_blob(candidate, envelope)
                except (crypto.AuthenticationFailure, crypto.VersionMismatch):
                    continue
                raise AssertionError(
                    f"membership state byte window {offset} decrypts an envelope")
        assert attempts > 1000
