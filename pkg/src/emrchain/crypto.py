"""Cryptographic primitives.

Algorithm choices, fixed project-wide:

* Hashing: SHA-256 (32-byte digests; lowercase hex in text interfaces).
* Signatures: Ed25519.
* Key wrapping to a recipient: X25519 ephemeral exchange + HKDF-SHA256 +
  AES-256-GCM (ECIES style).
* Blob encryption: per-blob 256-bit data-encryption key (DEK) under
  AES-256-GCM; the DEK itself is wrapped by the patient's 256-bit master
  key.  Rotating the master key rewraps DEKs only, so payload ciphertext
  (and any hash of the plaintext) survives rotation unchanged.

Every generator accepts an optional ``random.Random`` so a simulation
harness can reproduce byte-identical runs; production callers leave it
``None`` and get ``os.urandom``.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature as _InvalidSignature
from cryptography.exceptions import InvalidTag as _InvalidTag
from cryptography.hazmat.primitives import hashes as _hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import DecodeError, Reader, Writer
from .errors import AuthenticationFailure, MalformedKey, MalformedUii, VersionMismatch

DIGEST_LEN = 32
KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
SIGNATURE_LEN = 64

# 0x1E separates UII fields, 0x1F separates items inside a field and the
# master key from the UII blob in pseudonym derivation.
FIELD_SEP = b"\x1e"
ITEM_SEP = b"\x1f"

_WRAP_INFO = b"emrchain/key-wrap/v1"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_hex(digest: bytes) -> str:
    if len(digest) != DIGEST_LEN:
        raise ValueError("digest must be 32 bytes")
    return digest.hex()


def rand_bytes(n: int, rand: random.Random | None = None) -> bytes:
    if rand is None:
        return os.urandom(n)
    return rand.randbytes(n)


# --------------------------------------------------------------------------
# Key material
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 signing pair, raw 32-byte encodings."""

    secret: bytes
    public: bytes

    @classmethod
    def generate(cls, rand: random.Random | None = None) -> "SigningKeyPair":
        secret = rand_bytes(KEY_LEN, rand)
        priv = Ed25519PrivateKey.from_private_bytes(secret)
        return cls(secret=secret, public=priv.public_key().public_bytes_raw())


@dataclass(frozen=True)
class EncryptionKeyPair:
    """X25519 key-agreement pair used for wrapping keys to a recipient."""

    secret: bytes
    public: bytes

    @classmethod
    def generate(cls, rand: random.Random | None = None) -> "EncryptionKeyPair":
        secret = rand_bytes(KEY_LEN, rand)
        priv = X25519PrivateKey.from_private_bytes(secret)
        return cls(secret=secret, public=priv.public_key().public_bytes_raw())


@dataclass(frozen=True)
class PatientMasterKey:
    """Per-patient symmetric master key; ``version`` increases on rotation."""

    key: bytes
    version: int = 1

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise MalformedKey("master key must be 32 bytes")
        if self.version < 1:
            raise MalformedKey("master key version must be >= 1")

    @classmethod
    def generate(cls, version: int = 1, rand: random.Random | None = None) -> "PatientMasterKey":
        return cls(key=rand_bytes(KEY_LEN, rand), version=version)


def sign(secret: bytes, message: bytes) -> bytes:
    try:
        priv = Ed25519PrivateKey.from_private_bytes(secret)
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    return priv.sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        pub = Ed25519PublicKey.from_public_bytes(public)
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    try:
        pub.verify(signature, message)
        return True
    except _InvalidSignature:
        return False


# --------------------------------------------------------------------------
# Patient identity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Uii:
    """Uniquely identifiable information: SSN (optional), date of birth,
    given names, ZIP code."""

    dob: str
    given_names: tuple[str, ...]
    zip_code: str
    ssn: str | None = None

    def validate(self) -> None:
        import datetime

        if not self.given_names or any(not n for n in self.given_names):
            raise MalformedUii("at least one non-empty given name required")
        if not self.zip_code:
            raise MalformedUii("zip code required")
        try:
            datetime.date.fromisoformat(self.dob)
        except (TypeError, ValueError) as exc:
            raise MalformedUii(f"dob must be an ISO-8601 date: {exc}") from exc
        for field in (self.ssn or "", self.dob, self.zip_code, *self.given_names):
            if "\x1e" in field or "\x1f" in field:
                raise MalformedUii("fields may not contain separator control characters")

    def canonical_bytes(self) -> bytes:
        """Deterministic encoding: ssn|dob|names|zip joined by 0x1E, names
        uppercased, sorted and joined by 0x1F, absent SSN as empty field."""
        self.validate()
        names = ITEM_SEP.join(n.encode("utf-8") for n in sorted(x.upper() for x in self.given_names))
        fields = [
            (self.ssn or "").encode("utf-8"),
            self.dob.encode("utf-8"),
            names,
            self.zip_code.encode("utf-8"),
        ]
        return FIELD_SEP.join(fields)

    def to_dict(self) -> dict:
        out = {"dob": self.dob, "given_names": list(self.given_names), "zip": self.zip_code}
        if self.ssn is not None:
            out["ssn"] = self.ssn
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Uii":
        try:
            return cls(
                dob=data["dob"],
                given_names=tuple(data["given_names"]),
                zip_code=data["zip"],
                ssn=data.get("ssn"),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedUii(f"bad uii mapping: {exc}") from exc


def derive_pseudonym(master: PatientMasterKey, uii: Uii) -> bytes:
    """Patient ledger key: SHA-256(master key || 0x1F || canonical UII)."""
    return sha256(master.key + ITEM_SEP + uii.canonical_bytes())


# --------------------------------------------------------------------------
# Recipient key wrapping (ECIES over X25519)
# --------------------------------------------------------------------------

def wrap_for(recipient_public: bytes, plaintext: bytes,
             rand: random.Random | None = None) -> bytes:
    """Encrypt ``plaintext`` so only the holder of the matching X25519
    secret key can read it.  Output: eph_pub(32) || nonce(12) || ct+tag."""
    try:
        pub = X25519PublicKey.from_public_bytes(recipient_public)
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    eph_secret = rand_bytes(KEY_LEN, rand)
    eph = X25519PrivateKey.from_private_bytes(eph_secret)
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(pub)
    key = HKDF(
        algorithm=_hashes.SHA256(), length=KEY_LEN,
        salt=eph_pub + recipient_public, info=_WRAP_INFO,
    ).derive(shared)
    nonce = rand_bytes(NONCE_LEN, rand)
    sealed = AESGCM(key).encrypt(nonce, plaintext, None)
    return eph_pub + nonce + sealed


def unwrap_with(recipient_secret: bytes, blob: bytes) -> bytes:
    if len(blob) < KEY_LEN + NONCE_LEN + TAG_LEN:
        raise AuthenticationFailure("wrapped blob too short")
    eph_pub = blob[:KEY_LEN]
    nonce = blob[KEY_LEN:KEY_LEN + NONCE_LEN]
    sealed = blob[KEY_LEN + NONCE_LEN:]
    try:
        priv = X25519PrivateKey.from_private_bytes(recipient_secret)
        pub = X25519PublicKey.from_public_bytes(eph_pub)
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    shared = priv.exchange(pub)
    key = HKDF(
        algorithm=_hashes.SHA256(), length=KEY_LEN,
        salt=eph_pub + priv.public_key().public_bytes_raw(), info=_WRAP_INFO,
    ).derive(shared)
    try:
        return AESGCM(key).decrypt(nonce, sealed, None)
    except _InvalidTag as exc:
        raise AuthenticationFailure("key unwrap failed") from exc


def wrap_master_for(recipient_public: bytes, master: PatientMasterKey,
                    rand: random.Random | None = None) -> bytes:
    body = Writer().u32(master.version).raw(master.key).getvalue()
    return wrap_for(recipient_public, body, rand)


def unwrap_master(recipient_secret: bytes, blob: bytes) -> PatientMasterKey:
    body = unwrap_with(recipient_secret, blob)
    if len(body) != 4 + KEY_LEN:
        raise AuthenticationFailure("unexpected master key payload")
    reader = Reader(body)
    version = reader.u32()
    key = reader.raw(KEY_LEN)
    return PatientMasterKey(key=key, version=version)


# --------------------------------------------------------------------------
# Envelope encryption
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """One encrypted blob: payload under a fresh DEK, DEK wrapped by the
    patient master key.  ``key_version`` names the master key version that
    can unwrap the DEK."""

    key_version: int
    wrapped_dek: bytes
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .bytes_(Writer().u32(self.key_version).getvalue())
            .bytes_(self.wrapped_dek)
            .bytes_(self.nonce)
            .bytes_(self.ciphertext)
            .bytes_(self.tag)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        try:
            reader = Reader(data)
            version_field = reader.bytes_()
            if len(version_field) != 4:
                raise DecodeError("version field must be 4 bytes")
            version = Reader(version_field).u32()
            wrapped_dek = reader.bytes_()
            nonce = reader.bytes_()
            ciphertext = reader.bytes_()
            tag = reader.bytes_()
            reader.expect_end()
        except DecodeError as exc:
            raise AuthenticationFailure(f"malformed envelope: {exc}") from exc
        if len(nonce) != NONCE_LEN or len(tag) != TAG_LEN:
            raise AuthenticationFailure("malformed envelope: bad field length")
        return cls(version, wrapped_dek, nonce, ciphertext, tag)


def _version_aad(version: int) -> bytes:
    return Writer().u32(version).getvalue()


def encrypt_blob(master: PatientMasterKey, plaintext: bytes,
                 rand: random.Random | None = None) -> Envelope:
    dek = rand_bytes(KEY_LEN, rand)
    wrap_nonce = rand_bytes(NONCE_LEN, rand)
    wrapped = wrap_nonce + AESGCM(master.key).encrypt(wrap_nonce, dek, _version_aad(master.version))
    nonce = rand_bytes(NONCE_LEN, rand)
    sealed = AESGCM(dek).encrypt(nonce, plaintext, None)
    return Envelope(
        key_version=master.version,
        wrapped_dek=wrapped,
        nonce=nonce,
        ciphertext=sealed[:-TAG_LEN],
        tag=sealed[-TAG_LEN:],
    )


def _unwrap_dek(master: PatientMasterKey, envelope: Envelope) -> bytes:
    if envelope.key_version != master.version:
        raise VersionMismatch(
            f"envelope wrapped under key v{envelope.key_version}, have v{master.version}"
        )
    if len(envelope.wrapped_dek) < NONCE_LEN + TAG_LEN:
        raise AuthenticationFailure("malformed wrapped DEK")
    wrap_nonce = envelope.wrapped_dek[:NONCE_LEN]
    sealed = envelope.wrapped_dek[NONCE_LEN:]
    try:
        dek = AESGCM(master.key).decrypt(wrap_nonce, sealed, _version_aad(envelope.key_version))
    except _InvalidTag as exc:
        raise AuthenticationFailure("DEK unwrap failed") from exc
    if len(dek) != KEY_LEN:
        raise AuthenticationFailure("unwrapped DEK has wrong length")
    return dek


def decrypt_blob(master: PatientMasterKey, envelope: Envelope) -> bytes:
    dek = _unwrap_dek(master, envelope)
    try:
        return AESGCM(dek).decrypt(envelope.nonce, envelope.ciphertext + envelope.tag, None)
    except _InvalidTag as exc:
        raise AuthenticationFailure("payload authentication failed") from exc


def rewrap_envelope(old: PatientMasterKey, new: PatientMasterKey,
                    envelope: Envelope, rand: random.Random | None = None) -> Envelope:
    """Move one envelope from ``old`` to ``new`` without touching the
    payload ciphertext."""
    dek = _unwrap_dek(old, envelope)
    wrap_nonce = rand_bytes(NONCE_LEN, rand)
    wrapped = wrap_nonce + AESGCM(new.key).encrypt(wrap_nonce, dek, _version_aad(new.version))
    return Envelope(
        key_version=new.version,
        wrapped_dek=wrapped,
        nonce=envelope.nonce,
        ciphertext=envelope.ciphertext,
        tag=envelope.tag,
    )


def rotate_master(old: PatientMasterKey, envelopes: list[Envelope],
                  rand: random.Random | None = None) -> tuple[PatientMasterKey, list[Envelope]]:
    """Generate the successor master key and rewrap every envelope's DEK.

    Atomic: if any envelope fails to authenticate under ``old``, nothing is
    returned and the caller's envelopes are untouched.
    """
    deks = [_unwrap_dek(old, env) for env in envelopes]
    new = PatientMasterKey.generate(version=old.version + 1, rand=rand)
    rewrapped = []
    for dek, env in zip(deks, envelopes):
        wrap_nonce = rand_bytes(NONCE_LEN, rand)
        wrapped = wrap_nonce + AESGCM(new.key).encrypt(wrap_nonce, dek, _version_aad(new.version))
        rewrapped.append(
            Envelope(new.version, wrapped, env.nonce, env.ciphertext, env.tag)
        )
    return new, rewrapped
