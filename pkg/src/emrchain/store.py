"""Off-chain "cloud" repository for envelope-encrypted clinical files.

Layout: ``store/<pseudonym-hex>/<category>/<blob-id>``, one file per blob
holding the canonical envelope bytes.  The on-ledger metadata item keeps
the SHA-256 of the *plaintext*, so rewrapping the envelope under a rotated
master key never invalidates ledger hashes.
"""

from __future__ import annotations

import random
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from . import crypto
from .chaincode import DEFAULT_CATEGORIES
from .crypto import Envelope, PatientMasterKey
from .errors import AuthenticationFailure, InvalidCategory, InvalidPath, NotFound, VersionMismatch

_PSEUDONYM_RE = re.compile(r"^[0-9a-f]{64}$")
_BLOB_ID_RE = re.compile(r"^[0-9a-f]{32}$")


@dataclass(frozen=True)
class BlobRef:
    pseudonym_hex: str
    category: str
    blob_id: str

    @property
    def path(self) -> str:
        return f"store/{self.pseudonym_hex}/{self.category}/{self.blob_id}"

    @classmethod
    def parse(cls, path: str, categories: tuple[str, ...] = DEFAULT_CATEGORIES) -> "BlobRef":
        parts = path.split("/")
        if len(parts) != 4 or parts[0] != "store":
            raise InvalidPath(path)
        _, pseudonym_hex, category, blob_id = parts
        if not _PSEUDONYM_RE.match(pseudonym_hex):
            raise InvalidPath(f"bad pseudonym component in {path!r}")
        if category not in categories:
            raise InvalidPath(f"bad category component in {path!r}")
        if not _BLOB_ID_RE.match(blob_id):
            raise InvalidPath(f"bad blob id component in {path!r}")
        return cls(pseudonym_hex, category, blob_id)


class MemoryBackend:
    """Dict-backed storage for tests."""

    def __init__(self):
        self._data: dict[str, bytes] = {}

    def write(self, path: str, data: bytes) -> None:
        self._data[path] = data

    def read(self, path: str) -> bytes:
        try:
            return self._data[path]
        except KeyError:
            raise NotFound(path) from None

    def exists(self, path: str) -> bool:
        return path in self._data

    def delete(self, path: str) -> None:
        self._data.pop(path, None)

    def list_prefix(self, prefix: str) -> list[str]:
        return sorted(p for p in self._data if p.startswith(prefix))


class FilesystemBackend:
    """Files under a root directory; writes go through a temp-and-rename so
    readers never observe a torn blob."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _resolve(self, path: str) -> Path:
        target = (self.root / path).resolve()
        if not target.is_relative_to(self.root.resolve()):
            raise InvalidPath(path)
        return target

    def write(self, path: str, data: bytes) -> None:
        target = self._resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(".tmp")
        tmp.write_bytes(data)
        tmp.replace(target)

    def read(self, path: str) -> bytes:
        target = self._resolve(path)
        if not target.is_file():
            raise NotFound(path)
        return target.read_bytes()

    def exists(self, path: str) -> bool:
        return self._resolve(path).is_file()

    def delete(self, path: str) -> None:
        target = self._resolve(path)
        if target.is_file():
            target.unlink()

    def list_prefix(self, prefix: str) -> list[str]:
        base = self._resolve(prefix)
        if not base.is_dir():
            return []
        out = []
        for item in base.rglob("*"):
            if item.is_file() and not item.name.endswith(".tmp"):
                out.append(str(item.relative_to(self.root)))
        return sorted(out)


class BlobStore:
    """Category-organized envelope storage keyed by patient pseudonym.

    Writes within one patient's namespace are serialized; rotation holds
    the same per-patient lock exclusively for its whole read-rewrap-write
    cycle.
    """

    def __init__(self, backend, categories: tuple[str, ...] = DEFAULT_CATEGORIES):
        self.backend = backend
        self.categories = categories
        self._locks: dict[str, threading.RLock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, pseudonym_hex: str) -> threading.RLock:
        with self._locks_guard:
            return self._locks.setdefault(pseudonym_hex, threading.RLock())

    def _check_category(self, category: str) -> None:
        if category not in self.categories:
            raise InvalidCategory(category)

    def put_blob(self, pseudonym: bytes, category: str, plaintext: bytes,
                 master: PatientMasterKey, rand: random.Random | None = None,
                 blob_id: str | None = None) -> tuple[BlobRef, bytes]:
        """Encrypt and store one file; returns its ref and the plaintext
        digest destined for the on-ledger metadata item."""
        self._check_category(category)
        pseudonym_hex = crypto.digest_hex(pseudonym)
        if blob_id is None:
            blob_id = crypto.rand_bytes(16, rand).hex()
        elif not _BLOB_ID_RE.match(blob_id):
            raise InvalidPath(f"bad blob id {blob_id!r}")
        ref = BlobRef(pseudonym_hex, category, blob_id)
        envelope = crypto.encrypt_blob(master, plaintext, rand)
        with self._lock_for(pseudonym_hex):
            self.backend.write(ref.path, envelope.to_bytes())
        return ref, crypto.sha256(plaintext)

    def get_envelope(self, ref: BlobRef) -> Envelope:
        return Envelope.from_bytes(self.backend.read(ref.path))

    def get_blob(self, ref: BlobRef, master: PatientMasterKey) -> bytes:
        return crypto.decrypt_blob(master, self.get_envelope(ref))

    def delete_blob(self, ref: BlobRef) -> None:
        with self._lock_for(ref.pseudonym_hex):
            self.backend.delete(ref.path)

    def verify_integrity(self, ref: BlobRef, expected: bytes,
                         master: PatientMasterKey) -> bool:
        """True iff the blob decrypts cleanly and hashes to ``expected``.

        Tamper shows up as a parse or authentication failure; a swapped-in
        valid envelope decrypts but fails the hash comparison.  A missing
        blob still raises NotFound.
        """
        raw = self.backend.read(ref.path)
        try:
            plaintext = crypto.decrypt_blob(master, Envelope.from_bytes(raw))
        except (AuthenticationFailure, VersionMismatch):
            return False
        return crypto.sha256(plaintext) == expected

    def list_refs(self, pseudonym: bytes) -> list[BlobRef]:
        pseudonym_hex = crypto.digest_hex(pseudonym)
        prefix = f"store/{pseudonym_hex}"
        return [BlobRef.parse(p, self.categories) for p in self.backend.list_prefix(prefix)]

    def rotate_patient_blobs(self, pseudonym: bytes, old: PatientMasterKey,
                             new: PatientMasterKey,
                             rand: random.Random | None = None) -> int:
        """Rewrap every blob of one patient from ``old`` to ``new``.

        Two-phase: all envelopes are read and rewrapped in memory first,
        so a single corrupt blob aborts with nothing modified.
        """
        pseudonym_hex = crypto.digest_hex(pseudonym)
        with self._lock_for(pseudonym_hex):
            refs = self.list_refs(pseudonym)
            rewrapped = [
                (ref, crypto.rewrap_envelope(old, new, self.get_envelope(ref), rand))
                for ref in refs
            ]
            for ref, envelope in rewrapped:
                self.backend.write(ref.path, envelope.to_bytes())
        return len(rewrapped)
