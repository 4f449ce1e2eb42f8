"""Permissioned-ledger EMR sharing.

PBFT-replicated key-value ledger whose chaincode enforces patient-defined
access permissions over envelope-encrypted off-chain medical records, with
a membership certificate authority, pseudonymous patient identities and
role-based patient/doctor clients.
"""

from .chaincode import (
    Chaincode,
    DEFAULT_CATEGORIES,
    MetadataItem,
    PatientRecord,
    Permission,
    Right,
    check_permission,
)
from .consensus import Replica, ReplicaConfig
from .crypto import (
    Envelope,
    EncryptionKeyPair,
    PatientMasterKey,
    SigningKeyPair,
    Uii,
    decrypt_blob,
    derive_pseudonym,
    encrypt_blob,
    rotate_master,
    sign,
    verify,
    wrap_master_for,
)
from .ledger import Block, Ledger, Transaction, WorldState, compute_state_hash, replay
from .membership import CertificateRegistry, ECert, MembershipService, Role, TCert
from .store import BlobRef, BlobStore, FilesystemBackend, MemoryBackend

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlobRef",
    "BlobStore",
    "CertificateRegistry",
    "Chaincode",
    "DEFAULT_CATEGORIES",
    "ECert",
    "EncryptionKeyPair",
    "Envelope",
    "FilesystemBackend",
    "Ledger",
    "MembershipService",
    "MemoryBackend",
    "MetadataItem",
    "PatientMasterKey",
    "PatientRecord",
    "Permission",
    "Replica",
    "ReplicaConfig",
    "Right",
    "Role",
    "SigningKeyPair",
    "TCert",
    "Transaction",
    "Uii",
    "WorldState",
    "check_permission",
    "compute_state_hash",
    "decrypt_blob",
    "derive_pseudonym",
    "encrypt_blob",
    "replay",
    "rotate_master",
    "sign",
    "verify",
    "wrap_master_for",
]
