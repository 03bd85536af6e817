"""Exception hierarchy shared by every chez subsystem.

Flow handlers raise these; the HTTP layer and CLI map them onto status
codes / exit codes. Each carries a stable ``code`` string used in wire
error bodies ({"error": code, "field": optional}).
"""

from __future__ import annotations

from typing import Any


class ChezError(Exception):
    """Base class for all domain errors."""

    code = "INTERNAL"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


# --- storage layer ---------------------------------------------------------

class StorageError(ChezError):
    code = "STORAGE"


class ConstraintViolation(StorageError):
    """A unique constraint was violated; ``constraint`` names which one."""

    code = "CONSTRAINT_VIOLATION"

    def __init__(self, constraint: str, message: str = ""):
        super().__init__(message or f"unique constraint violated: {constraint}")
        self.constraint = constraint


class ForeignKeyViolation(StorageError):
    code = "FOREIGN_KEY_VIOLATION"

    def __init__(self, table: str, field: Any = None, message: str = ""):
        super().__init__(message or f"dangling reference in {table}.{field}")
        self.table = table
        self.field = field


class UnknownRecord(StorageError):
    code = "UNKNOWN_RECORD"


class OperationDisabled(StorageError):
    """Raised for operations that exist in the API surface but are disabled
    by design (address deletion)."""

    code = "OPERATION_DISABLED"


# --- input validation ------------------------------------------------------

class ValidationError(ChezError):
    code = "VALIDATION_ERROR"

    def __init__(self, field: str, message: str = ""):
        super().__init__(message or f"invalid field: {field}")
        self.field = field


class ParseError(ChezError):
    code = "PARSE_ERROR"


# --- identity flows --------------------------------------------------------

class CaptchaError(ChezError):
    code = "CAPTCHA_ERROR"


class UserExistsError(ChezError):
    code = "USER_EXISTS"


class UnknownUser(ChezError):
    code = "UNKNOWN_USER"


class NotAuthorized(ChezError):
    code = "NOT_AUTHORIZED"


class UnknownIdp(ChezError):
    code = "UNKNOWN_IDP"


class SignatureInvalidError(ChezError):
    """Federated-assertion signature did not verify against the IdP key."""

    code = "SIGNATURE_INVALID"


class ClaimMappingError(ChezError):
    code = "CLAIM_MAPPING_ERROR"


# --- tokens ----------------------------------------------------------------

class TokenValidationError(ChezError):
    """Base for every way a typed token can fail validation."""

    code = "TOKEN_INVALID"


class MalformedToken(TokenValidationError):
    code = "TOKEN_MALFORMED"


class SignatureInvalid(TokenValidationError):
    code = "TOKEN_SIGNATURE_INVALID"


class TokenExpired(TokenValidationError):
    code = "TOKEN_EXPIRED"


class WrongTokenType(TokenValidationError):
    code = "TOKEN_WRONG_TYPE"

    def __init__(self, expected: str, actual: str):
        super().__init__(f"expected {expected} token, got {actual}")
        self.expected = expected
        self.actual = actual


class TokenRevoked(TokenValidationError):
    code = "TOKEN_REVOKED"


class OtpMismatch(TokenValidationError):
    """Token otp claim does not match the stored one (including replay
    after the stored otp was nulled)."""

    code = "OTP_MISMATCH"


# --- authn / mfa -----------------------------------------------------------

class InvalidCredentials(ChezError):
    # Deliberately a single message for unknown identifier and wrong
    # password; callers must not distinguish the two.
    code = "INVALID_CREDENTIALS"

    def __init__(self):
        super().__init__("invalid credentials")


class MfaValidationError(ChezError):
    code = "MFA_INVALID"


class NoPendingChallenge(ChezError):
    code = "NO_PENDING_CHALLENGE"


# --- rbac ------------------------------------------------------------------

class AuthorizationError(ChezError):
    code = "AUTHORIZATION_ERROR"


class MembersPresentError(ChezError):
    code = "MEMBERS_PRESENT"


class PermissionsPresentError(ChezError):
    code = "PERMISSIONS_PRESENT"


class DuplicateInCatalog(ChezError):
    code = "DUPLICATE_IN_CATALOG"

    def __init__(self, module: str, action: str):
        super().__init__(f"catalog lists ({module}, {action}) more than once")
        self.module = module
        self.action = action


# --- gateway ---------------------------------------------------------------

class DuplicatePrefix(ChezError):
    code = "DUPLICATE_PREFIX"


# --- vault -----------------------------------------------------------------

class MfaRequired(ChezError):
    code = "MFA_REQUIRED"


class UnknownCredential(ChezError):
    code = "UNKNOWN_CREDENTIAL"


class EnvironmentMismatch(ChezError):
    code = "ENVIRONMENT_MISMATCH"


class SessionClosed(ChezError):
    code = "SESSION_CLOSED"


class SealIntegrityError(ChezError):
    """Sealed credential failed authenticated decryption (tamper or wrong
    master key)."""

    code = "SEAL_INTEGRITY"


# --- monitor ---------------------------------------------------------------

class MalformedEvent(ChezError):
    code = "MALFORMED_EVENT"


class WindowMismatch(ChezError):
    code = "WINDOW_MISMATCH"


# --- cli -------------------------------------------------------------------

class AlreadyBootstrapped(ChezError):
    code = "ALREADY_BOOTSTRAPPED"


class ConfigError(ChezError):
    code = "CONFIG_ERROR"
