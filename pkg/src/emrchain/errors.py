"""Exception types shared across the package.

Chaincode failures carry a stable string ``code`` so replicas can record a
failed transaction deterministically and clients can map errors to exit
codes without parsing messages.
"""

from __future__ import annotations


class EmrChainError(Exception):
    """Base class for all package errors."""

    code = "ERROR"


# --- crypto ---------------------------------------------------------------

class AuthenticationFailure(EmrChainError):
    code = "AUTHENTICATION_FAILURE"


class VersionMismatch(EmrChainError):
    code = "VERSION_MISMATCH"


class MalformedUii(EmrChainError):
    code = "MALFORMED_UII"


class MalformedKey(EmrChainError):
    code = "MALFORMED_KEY"


# --- ledger ---------------------------------------------------------------

class ChainMismatch(EmrChainError):
    code = "CHAIN_MISMATCH"


class StateHashMismatch(EmrChainError):
    code = "STATE_HASH_MISMATCH"


# --- certificates / membership --------------------------------------------

class UnknownCertificate(EmrChainError):
    code = "UNKNOWN_CERT"


class BadIssuerSignature(EmrChainError):
    code = "BAD_ISSUER_SIGNATURE"


class CertificateExpired(EmrChainError):
    code = "CERT_EXPIRED"


class UnknownPractitioner(EmrChainError):
    code = "UNKNOWN_PRACTITIONER"


class DuplicateRegistration(EmrChainError):
    code = "DUPLICATE_REGISTRATION"


class UnknownPatient(EmrChainError):
    code = "UNKNOWN_PATIENT"


# --- chaincode ------------------------------------------------------------

class ChaincodeError(EmrChainError):
    """Deterministic chaincode rejection; ``code`` is part of the contract."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


RECORD_EXISTS = "RECORD_EXISTS"
NO_RECORD = "NO_RECORD"
INVALID_WINDOW = "INVALID_WINDOW"
MISSING_STUDY_ID = "MISSING_STUDY_ID"
PERMISSION_DENIED = "PERMISSION_DENIED"
DUPLICATE_PATH = "DUPLICATE_PATH"
DUPLICATE_TIMESTAMP = "DUPLICATE_TIMESTAMP"
NOT_OWNER = "NOT_OWNER"
ROLE_DENIED = "ROLE_DENIED"
BAD_SIGNATURE = "BAD_SIGNATURE"
BAD_ARGS = "BAD_ARGS"
DUPLICATE_TX = "DUPLICATE_TX"
INVALID_CATEGORY = "INVALID_CATEGORY"
INVALID_PERMISSION = "INVALID_PERMISSION"


# --- store ----------------------------------------------------------------

class NotFound(EmrChainError):
    code = "NOT_FOUND"


class InvalidPath(EmrChainError):
    code = "INVALID_PATH"


class InvalidCategory(EmrChainError):
    code = "INVALID_CATEGORY"


# --- node service ----------------------------------------------------------

class InvalidSignature(EmrChainError):
    code = "BAD_SIGNATURE"


class RoleDenied(EmrChainError):
    code = "ROLE_DENIED"


class UnparseableDocument(EmrChainError):
    code = "UNPARSEABLE_DOCUMENT"


class NotLeader(EmrChainError):
    code = "NOT_LEADER"
