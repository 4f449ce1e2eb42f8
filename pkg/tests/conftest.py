import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emrchain import crypto
from emrchain.membership import CertificateRegistry, MembershipService, PractitionerRegistry, Role


@pytest.fixture
def rng():
    return random.Random(0xEE11)


@pytest.fixture
def uii():
    return crypto.Uii(dob="1961-04-12", given_names=("Ada", "Marie"),
                      zip_code="11794", ssn="123456789")


@pytest.fixture
def membership(rng):
    practitioners = PractitionerRegistry({"doc1", "doc2", "doc3"})
    return MembershipService(practitioners, clock=lambda: 1_700_000_000_000, rand=rng)


@pytest.fixture
def registry(membership):
    return CertificateRegistry(membership.root_public)


class User:
    """Registered test user with local key material."""

    def __init__(self, membership, registry, user_id, role, rng, uii=None):
        self.user_id = user_id
        self.role = role
        self.sign = crypto.SigningKeyPair.generate(rng)
        self.enc = crypto.EncryptionKeyPair.generate(rng)
        self.uii = uii
        self.master = crypto.PatientMasterKey.generate(rand=rng) if role is Role.PATIENT else None
        self.cert = membership.register(user_id, role, self.sign.public,
                                        self.enc.public, uii=uii)
        registry.add(self.cert)

    @property
    def cert_id(self):
        return self.cert.cert_id

    @property
    def pseudonym(self):
        return crypto.derive_pseudonym(self.master, self.uii)


@pytest.fixture
def make_user(membership, registry, rng):
    def _make(user_id, role, uii=None):
        if role is Role.PATIENT and uii is None:
            uii = crypto.Uii(dob="1970-01-01", given_names=(user_id,), zip_code="00001")
        return User(membership, registry, user_id, role, rng, uii=uii)

    return _make
