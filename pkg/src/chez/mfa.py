"""MFA management: enable/disable challenges, email OTP, authenticator
secrets with provisioning URIs, and single-use backup codes.

A pending challenge lives on the user's mfa row (otp / pending_type /
attempts); confirming is an atomic check-and-consume, so racing confirms
of one challenge admit at most one winner.
"""

from __future__ import annotations

import secrets
import string
import threading
import time
from typing import Callable, Optional

from .errors import (
    MfaValidationError,
    NoPendingChallenge,
    UnknownUser,
    ValidationError,
)
from .hashing import PasswordHashingStrategy
from .identity import generate_otp
from .mail import MailClient, MailMessage
from .model import MfaType, UserStatus, new_mfa_record
from .storage import BaseStorage
from .totp import generate_secret, provisioning_uri, verify_totp

OTP_TTL_SECONDS = 300.0
MAX_ATTEMPTS = 5
BACKUP_CODE_COUNT = 10
BACKUP_CODE_LENGTH = 10
_BACKUP_ALPHABET = string.ascii_letters + string.digits


def _new_backup_codes() -> list[str]:
    return ["".join(secrets.choice(_BACKUP_ALPHABET) for _ in range(BACKUP_CODE_LENGTH))
            for _ in range(BACKUP_CODE_COUNT)]


class MfaService:
    def __init__(self, storage: BaseStorage, mail: MailClient,
                 hasher: PasswordHashingStrategy,
                 clock: Callable[[], float] = time.time, issuer: str = "chez"):
        self.storage = storage
        self.mail = mail
        self.hasher = hasher
        self.clock = clock
        self.issuer = issuer
        self._confirm_lock = threading.Lock()

    # -- enable/disable flow -----------------------------------------------------

    def request_toggle(self, user_id: str, mfa_type: str) -> dict:
        """Start an enable/disable challenge. EMAIL mails an OTP; TOTP
        returns the generated secret plus its otpauth:// URI."""
        try:
            wanted = MfaType(str(mfa_type).upper())
        except ValueError:
            raise ValidationError("type") from None
        user = self.storage.get("user", user_id)
        if user is None:
            raise UnknownUser(user_id)
        if user["status"] != UserStatus.ACTIVE.value:
            raise ValidationError("user", "user is not active")
        row = self._row_for(user_id)
        if wanted is MfaType.EMAIL:
            otp = generate_otp()
            self.storage.update("mfa", user_id, {
                "otp": otp,
                "pending_type": MfaType.EMAIL.value,
                "otp_expires_at": self.clock() + OTP_TTL_SECONDS,
                "attempts": 0,
            })
            self._mail_otp(user_id, otp)
            return {"channel": "EMAIL"}
        secret = generate_secret()
        self.storage.update("mfa", user_id, {
            "totp_secret": secret,
            "pending_type": MfaType.TOTP.value,
            "otp": None,
            "otp_expires_at": None,
            "attempts": 0,
        })
        account = self._email_for(user_id) or user_id
        return {
            "channel": "TOTP",
            "secret": secret,
            "otpauth_uri": provisioning_uri(secret, account, self.issuer),
        }

    def confirm_toggle(self, user_id: str, otp: str, enable: bool) -> dict:
        with self._confirm_lock:
            row = self.storage.get("mfa", user_id)
            if row is None or row.get("pending_type") is None:
                raise NoPendingChallenge(user_id)
            self._check_challenge_alive(row)
            pending = MfaType(row["pending_type"])
            if pending is MfaType.EMAIL:
                matched = row["otp"] is not None and self._otp_equals(row["otp"], otp)
            else:
                matched = verify_totp(row["totp_secret"], str(otp), self.clock())
            if not matched:
                self._bump_attempts(row)
                raise MfaValidationError("code mismatch")
            if enable:
                codes = _new_backup_codes()
                self.storage.update("mfa", user_id, {
                    "enabled": True,
                    "mfa_type": pending.value,
                    "otp": None,
                    "otp_expires_at": None,
                    "pending_type": None,
                    "attempts": 0,
                    "backup_codes": [self.hasher.hash(c) for c in codes],
                })
                # plaintext codes are returned exactly once
                return {"enabled": True, "backup_codes": codes}
            self.storage.update("mfa", user_id, {
                "enabled": False,
                "mfa_type": None,
                "otp": None,
                "otp_expires_at": None,
                "pending_type": None,
                "attempts": 0,
                "totp_secret": None,
                "backup_codes": [],
            })
            return {"enabled": False}

    # -- login-time factor checks (used by the login state machine) ---------------

    def login_challenge(self, user_id: str) -> tuple[str, Optional[int]]:
        """Prepare the second factor for a login. Returns (channel, otp);
        otp is set only for the EMAIL channel (the caller mails it)."""
        row = self._row_for(user_id)
        if row.get("enabled") and row.get("mfa_type") == MfaType.TOTP.value:
            return MfaType.TOTP.value, None
        otp = generate_otp()
        self.storage.update("mfa", user_id, {
            "otp": otp,
            "otp_expires_at": self.clock() + OTP_TTL_SECONDS,
            "attempts": 0,
        })
        return MfaType.EMAIL.value, otp

    def verify_login_factor(self, user_id: str, submitted: str) -> bool:
        """Consume one factor: stored email OTP, a current TOTP code, or an
        unused backup code. Single-use everywhere."""
        with self._confirm_lock:
            row = self.storage.get("mfa", user_id)
            if row is None:
                return False
            if row.get("attempts", 0) >= MAX_ATTEMPTS:
                return False
            if row.get("otp") is not None:
                expires = row.get("otp_expires_at")
                if (expires is None or self.clock() <= expires) and \
                        self._otp_equals(row["otp"], submitted):
                    self.storage.update("mfa", user_id,
                                        {"otp": None, "otp_expires_at": None,
                                         "attempts": 0})
                    return True
            if row.get("enabled") and row.get("totp_secret") and \
                    verify_totp(row["totp_secret"], str(submitted), self.clock()):
                return True
            if row.get("enabled"):
                for stored in row.get("backup_codes", []):
                    if self.hasher.verify(str(submitted), stored):
                        remaining = [c for c in row["backup_codes"] if c != stored]
                        self.storage.update("mfa", user_id,
                                            {"backup_codes": remaining, "attempts": 0})
                        return True
            self._bump_attempts(row)
            return False

    def is_enabled(self, user_id: str) -> bool:
        row = self.storage.get("mfa", user_id)
        return bool(row and row.get("enabled"))

    def mfa_type(self, user_id: str) -> Optional[str]:
        row = self.storage.get("mfa", user_id)
        return row.get("mfa_type") if row else None

    # -- helpers -------------------------------------------------------------------

    def _row_for(self, user_id: str) -> dict:
        row = self.storage.get("mfa", user_id)
        if row is None:
            if self.storage.get("user", user_id) is None:
                raise UnknownUser(user_id)
            row = new_mfa_record(user_id)
            self.storage.insert("mfa", row)
        return row

    @staticmethod
    def _otp_equals(stored: int, submitted) -> bool:
        try:
            return int(submitted) == int(stored)
        except (TypeError, ValueError):
            return False

    def _check_challenge_alive(self, row: dict) -> None:
        if row.get("attempts", 0) >= MAX_ATTEMPTS:
            self._void_challenge(row)
            raise MfaValidationError("challenge voided: too many attempts")
        expires = row.get("otp_expires_at")
        if row.get("pending_type") == MfaType.EMAIL.value and expires is not None \
                and self.clock() > expires:
            self._void_challenge(row)
            raise MfaValidationError("challenge voided: code expired")

    def _void_challenge(self, row: dict) -> None:
        self.storage.update("mfa", row["user_id"], {
            "otp": None, "otp_expires_at": None, "pending_type": None, "attempts": 0,
        })

    def _bump_attempts(self, row: dict) -> None:
        self.storage.update("mfa", row["user_id"],
                            {"attempts": row.get("attempts", 0) + 1})

    def _email_for(self, user_id: str) -> Optional[str]:
        details = self.storage.find_one("user_details", user_id=user_id)
        return details["email"] if details else None

    def _mail_otp(self, user_id: str, otp: int) -> None:
        email = self._email_for(user_id)
        if email:
            self.mail.send(MailMessage(to=email, template_id="mfa-otp",
                                       link=f"{otp:06d}"))
