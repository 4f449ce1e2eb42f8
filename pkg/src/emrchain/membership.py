"""Identity provider and certificate authority.

Registers patients, doctors and consensus nodes, checks doctor identities
against a practitioner allowlist, and issues enrollment certificates
(ECerts) plus per-use transaction certificates (TCerts).  The tcert-to-user
mapping lives only inside the service; validators see certificates but no
linkage between a user's TCerts.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable

from . import crypto
from .encoding import DecodeError, Reader, Writer
from .errors import (
    BadIssuerSignature,
    CertificateExpired,
    DuplicateRegistration,
    MalformedUii,
    UnknownCertificate,
    UnknownPatient,
    UnknownPractitioner,
)

DEFAULT_CERT_VALIDITY_MS = 365 * 24 * 3600 * 1000


class Role(Enum):
    PATIENT = "patient"
    DOCTOR = "doctor"
    NODE = "node"

    @classmethod
    def parse(cls, token: str) -> "Role":
        for role in cls:
            if role.value == token:
                return role
        raise ValueError(f"unknown role {token!r}")


@dataclass(frozen=True)
class ECert:
    """Enrollment certificate binding a user id and role to their keys."""

    user_id: str
    role: Role
    sign_public: bytes
    enc_public: bytes
    valid_from: int
    valid_to: int
    signature: bytes = b""

    @property
    def cert_id(self) -> str:
        return f"ecert:{self.user_id}"

    def content_bytes(self) -> bytes:
        return (
            Writer()
            .u8(0)
            .str_(self.user_id)
            .str_(self.role.value)
            .bytes_(self.sign_public)
            .bytes_(self.enc_public)
            .u64(self.valid_from)
            .u64(self.valid_to)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return Writer().raw(self.content_bytes()).bytes_(self.signature).getvalue()


@dataclass(frozen=True)
class TCert:
    """Transaction certificate: fresh key, random id, no user identifier.

    Carries the role so validators can authorize chaincode functions; the
    role is a cohort attribute shared by every user of that role, not an
    identifier.
    """

    tcert_id: bytes
    role: Role
    sign_public: bytes
    valid_from: int
    valid_to: int
    signature: bytes = b""

    @property
    def cert_id(self) -> str:
        return f"tcert:{self.tcert_id.hex()}"

    def content_bytes(self) -> bytes:
        return (
            Writer()
            .u8(1)
            .bytes_(self.tcert_id)
            .str_(self.role.value)
            .bytes_(self.sign_public)
            .u64(self.valid_from)
            .u64(self.valid_to)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return Writer().raw(self.content_bytes()).bytes_(self.signature).getvalue()


Certificate = ECert | TCert


def cert_identity(cert: Certificate) -> str:
    """Identity string used for record ownership and grant matching: the
    user id for an ECert, the unlinkable cert id for a TCert."""
    if isinstance(cert, ECert):
        return cert.user_id
    return cert.cert_id


def cert_from_bytes(data: bytes) -> Certificate:
    reader = Reader(data)
    kind = reader.u8()
    if kind == 0:
        cert = ECert(
            user_id=reader.str_(),
            role=Role.parse(reader.str_()),
            sign_public=reader.bytes_(),
            enc_public=reader.bytes_(),
            valid_from=reader.u64(),
            valid_to=reader.u64(),
            signature=reader.bytes_(),
        )
    elif kind == 1:
        cert = TCert(
            tcert_id=reader.bytes_(),
            role=Role.parse(reader.str_()),
            sign_public=reader.bytes_(),
            valid_from=reader.u64(),
            valid_to=reader.u64(),
            signature=reader.bytes_(),
        )
    else:
        raise DecodeError(f"unknown certificate kind {kind}")
    reader.expect_end()
    return cert


def verify_cert(cert: Certificate, root_public: bytes, now_ms: int | None = None) -> Role:
    """Check the issuer signature and validity window; returns the role."""
    if not crypto.verify(root_public, cert.content_bytes(), cert.signature):
        raise BadIssuerSignature(f"issuer signature invalid for {cert.cert_id}")
    if now_ms is not None and not (cert.valid_from <= now_ms <= cert.valid_to):
        raise CertificateExpired(f"{cert.cert_id} outside validity window")
    return cert.role


class CertificateRegistry:
    """Validator-side view of issued certificates, keyed by cert id.

    Certificates are verified against the membership root key on insert so
    forged entries never become resolvable.
    """

    def __init__(self, root_public: bytes):
        self.root_public = root_public
        self._certs: dict[str, Certificate] = {}

    def add(self, cert: Certificate) -> None:
        verify_cert(cert, self.root_public)
        self._certs[cert.cert_id] = cert

    def resolve(self, cert_id: str, now_ms: int | None = None) -> Certificate:
        cert = self._certs.get(cert_id)
        if cert is None:
            raise UnknownCertificate(cert_id)
        if now_ms is not None and not (cert.valid_from <= now_ms <= cert.valid_to):
            raise CertificateExpired(f"{cert_id} outside validity window")
        return cert

    def known(self, cert_id: str) -> bool:
        return cert_id in self._certs

    def cert_ids(self) -> list[str]:
        return sorted(self._certs)


class PractitionerRegistry:
    """Allowlist of verified clinician identifiers (mock data bank)."""

    def __init__(self, identifiers: set[str] | None = None):
        self._ids = set(identifiers or ())

    @classmethod
    def from_file(cls, path: str | Path) -> "PractitionerRegistry":
        ids = set()
        for line in Path(path).read_text("utf-8").splitlines():
            line = line.strip()
            if line:
                ids.add(line)
        return cls(ids)

    def contains(self, identifier: str) -> bool:
        return identifier in self._ids

    def add(self, identifier: str) -> None:
        self._ids.add(identifier)


@dataclass
class _UserEntry:
    cert: ECert
    uii_canonical: bytes | None


class MembershipService:
    """Single logical authority for registration and certificate issuance.

    Holds the root signing key, the registered users and the private
    tcert-to-user map.  Never holds a patient master key.
    """

    def __init__(
        self,
        practitioners: PractitionerRegistry,
        clock: Callable[[], int] | None = None,
        rand: random.Random | None = None,
        cert_validity_ms: int = DEFAULT_CERT_VALIDITY_MS,
    ):
        self.practitioners = practitioners
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._rand = rand
        self._validity = cert_validity_ms
        self.root = crypto.SigningKeyPair.generate(rand)
        self._users: dict[str, _UserEntry] = {}
        self._tcert_owner: dict[bytes, str] = {}

    @property
    def root_public(self) -> bytes:
        return self.root.public

    def _issue_window(self, now: int) -> tuple[int, int]:
        return now, now + self._validity

    def register(
        self,
        user_id: str,
        role: Role,
        sign_public: bytes,
        enc_public: bytes,
        uii: crypto.Uii | None = None,
    ) -> ECert:
        """Certify client-provided public keys for a new user.

        Doctors must appear in the practitioner registry; patients must
        present well-formed UII, which is retained for recovery.  The
        patient master key is generated client-side and never seen here.
        """
        if user_id in self._users:
            raise DuplicateRegistration(user_id)
        uii_canonical = None
        if role is Role.DOCTOR:
            if not self.practitioners.contains(user_id):
                raise UnknownPractitioner(user_id)
        elif role is Role.PATIENT:
            if uii is None:
                raise MalformedUii("patient registration requires UII")
            uii_canonical = uii.canonical_bytes()
        now = self._clock()
        valid_from, valid_to = self._issue_window(now)
        cert = ECert(user_id, role, sign_public, enc_public, valid_from, valid_to)
        cert = replace(cert, signature=crypto.sign(self.root.secret, cert.content_bytes()))
        self._users[user_id] = _UserEntry(cert=cert, uii_canonical=uii_canonical)
        return cert

    def get_cert(self, user_id: str) -> ECert:
        entry = self._users.get(user_id)
        if entry is None:
            raise UnknownCertificate(f"ecert:{user_id}")
        return entry.cert

    def issue_tcert(self, ecert: ECert) -> tuple[TCert, bytes]:
        """Issue a fresh transaction certificate for the holder of ``ecert``.

        Returns the certificate and the new signing secret; the secret is
        handed to the user over the registration channel and not retained.
        """
        now = self._clock()
        verify_cert(ecert, self.root_public, now)
        known = self._users.get(ecert.user_id)
        if known is None or known.cert.to_bytes() != ecert.to_bytes():
            raise UnknownCertificate(ecert.cert_id)
        pair = crypto.SigningKeyPair.generate(self._rand)
        tcert_id = crypto.rand_bytes(16, self._rand)
        valid_from, valid_to = self._issue_window(now)
        tcert = TCert(tcert_id, ecert.role, pair.public, valid_from, valid_to)
        tcert = replace(tcert, signature=crypto.sign(self.root.secret, tcert.content_bytes()))
        self._tcert_owner[tcert_id] = ecert.user_id
        return tcert, pair.secret

    def resolve_tcert(self, tcert_id: bytes) -> str:
        """Service-internal linkage; validators have no equivalent."""
        user = self._tcert_owner.get(tcert_id)
        if user is None:
            raise UnknownCertificate(f"tcert:{tcert_id.hex()}")
        return user

    def recover_access(self, uii: crypto.Uii) -> str:
        """Match presented UII against registered patients; returns the
        user id whose key-rotation and record migration may proceed."""
        canonical = uii.canonical_bytes()
        for user_id, entry in self._users.items():
            if entry.uii_canonical is not None and entry.uii_canonical == canonical:
                return user_id
        raise UnknownPatient("no registered patient matches the presented UII")

    def persisted_state(self) -> bytes:
        """Canonical serialization of everything the service stores.

        Used by the privacy-separation test: these bytes must contain no
        key material capable of decrypting any patient envelope.
        """
        w = Writer()
        w.bytes_(self.root.secret)
        w.bytes_(self.root.public)
        w.u32(len(self._users))
        for user_id in sorted(self._users):
            entry = self._users[user_id]
            w.str_(user_id)
            w.bytes_(entry.cert.to_bytes())
            w.opt_bytes(entry.uii_canonical)
        w.u32(len(self._tcert_owner))
        for tcert_id in sorted(self._tcert_owner):
            w.bytes_(tcert_id)
            w.str_(self._tcert_owner[tcert_id])
        return w.getvalue()
