"""Identity lifecycle flows: registration, email verification, password
recovery, profile and address management, and federated JIT provisioning.

Flow steps run in a fixed order (validate, captcha, existence, master,
user, token, mail) and any failure stops the flow at that step; there are
no compensating rollbacks, so effects of completed earlier steps persist,
matching the sequential flow contract the tests pin down.
"""

from __future__ import annotations

import base64
import json
import re
import secrets
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Mapping, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .audit import AuditLog
from .errors import (
    CaptchaError,
    ClaimMappingError,
    NotAuthorized,
    OperationDisabled,
    OtpMismatch,
    SignatureInvalidError,
    UnknownIdp,
    UnknownUser,
    UserExistsError,
    ValidationError,
)
from .hashing import PasswordHashingStrategy, unusable_hash
from .mail import MailClient, MailMessage
from .model import Role, UserStatus, new_address, new_master, new_user, new_user_details
from .storage import BaseStorage
from .tokens import TokenService, TokenType

_EMAIL_RE = re.compile(r"^[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)+$")
_PHONE_RE = re.compile(r"^\+?[0-9]{7,15}$")
_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z .'\-]{0,99}$")
_SPECIAL_RE = re.compile(r"[^A-Za-z0-9]")

MIN_AGE_YEARS = 13
MAX_AGE_YEARS = 120


@dataclass
class RegistrationInput:
    name: str
    email: str
    phone: str
    password: str  # transient; hashed immediately, never persisted
    dob: str  # dd/mm/yyyy
    captcha_response: Optional[str] = None


@dataclass(frozen=True)
class IdpConfig:
    idp_id: str
    verification_key: str  # base64 raw Ed25519 public key
    claim_mapping: Mapping[str, str]  # assertion claim -> user_details field
    master_id: str


class CaptchaVerifier:
    def verify(self, response: Optional[str]) -> bool:
        raise NotImplementedError


class StaticCaptchaVerifier(CaptchaVerifier):
    """Deterministic verifier: accepts exactly one expected response."""

    def __init__(self, expected: str = "captcha-ok"):
        self.expected = expected

    def verify(self, response: Optional[str]) -> bool:
        return response == self.expected


def generate_otp() -> int:
    """Six-digit OTP from a cryptographically secure source."""
    return secrets.randbelow(1_000_000)


# --- field validators --------------------------------------------------------

def validate_name(name: str) -> None:
    if not name or not _NAME_RE.match(name):
        raise ValidationError("name")


def validate_email(email: str) -> None:
    if not email or not _EMAIL_RE.match(email):
        raise ValidationError("email")


def validate_phone(phone: str) -> None:
    if not phone or not _PHONE_RE.match(phone):
        raise ValidationError("phone")


def validate_password(password: str) -> None:
    # >=10 chars with upper, lower, digit and special character
    ok = (
        len(password) >= 10
        and any(c.isupper() for c in password)
        and any(c.islower() for c in password)
        and any(c.isdigit() for c in password)
        and _SPECIAL_RE.search(password) is not None
    )
    if not ok:
        raise ValidationError("password")


def validate_dob(dob: str, now: float) -> None:
    try:
        day, month, year = dob.split("/")
        born = datetime(int(year), int(month), int(day), tzinfo=timezone.utc)
    except (ValueError, AttributeError):
        raise ValidationError("dob") from None
    if len(day) != 2 or len(month) != 2 or len(year) != 4:
        raise ValidationError("dob")
    today = datetime.fromtimestamp(now, tz=timezone.utc)
    age = (today - born).days / 365.2425
    if age < MIN_AGE_YEARS or age > MAX_AGE_YEARS:
        raise ValidationError("dob")


class IdentityService:
    def __init__(self, storage: BaseStorage, tokens: TokenService,
                 mail: MailClient, hasher: PasswordHashingStrategy,
                 captcha: CaptchaVerifier, audit: AuditLog,
                 clock: Callable[[], float] = time.time,
                 base_url: str = "http://localhost:8080"):
        self.storage = storage
        self.tokens = tokens
        self.mail = mail
        self.hasher = hasher
        self.captcha = captcha
        self.audit = audit
        self.clock = clock
        self.base_url = base_url

    # -- registration ----------------------------------------------------------

    def register_user(self, data: RegistrationInput, captcha_enabled: bool) -> dict:
        """Full registration flow; returns {master_id, user_id}."""
        # step 1: input validation
        validate_name(data.name)
        validate_password(data.password)
        validate_dob(data.dob, self.clock())
        validate_email(data.email)
        validate_phone(data.phone)
        # step 2: captcha, only when enabled
        if captcha_enabled and not self.captcha.verify(data.captcha_response):
            raise CaptchaError("captcha validation failed")
        # step 3: existence check (email or phone already registered)
        if self._find_details_by_email(data.email) is not None:
            raise UserExistsError("user already exists")
        if self._find_details_by_phone(data.phone) is not None:
            raise UserExistsError("user already exists")
        # step 4: master record
        master = new_master(self.clock())
        self.storage.insert("master", master)
        # step 5: user record + details (hashed password, flags false)
        user = new_user(master["id"], role=Role.USER, status=UserStatus.ACTIVE)
        self.storage.insert("user", user)
        details = new_user_details(user["id"], data.name, data.email, data.phone,
                                   self.hasher.hash(data.password), data.dob)
        self.storage.insert("user_details", details)
        # step 6: typed verification token; otp persisted only after issue
        otp = generate_otp()
        token = self.tokens.issue(user["id"], TokenType.VERIFY_EMAIL, otp=otp)
        self.storage.update("user_details", details["id"], {"otp": otp})
        # step 7: verification mail
        self._send_link(data.email, "verify-email", token)
        self.audit.emit("register", subject=user["id"], outcome="success")
        return {"master_id": master["id"], "user_id": user["id"]}

    def verify_email(self, token: str) -> None:
        claims = self.tokens.validate(token, TokenType.VERIFY_EMAIL)
        details = self.storage.find_one("user_details", user_id=claims["userId"])
        if details is None or details["otp"] is None or details["otp"] != claims.get("otp"):
            raise OtpMismatch("verification code mismatch")
        self.storage.update("user_details", details["id"],
                            {"email_verified": True, "otp": None})
        self.audit.emit("verify_email", subject=claims["userId"], outcome="success")

    # -- password recovery -----------------------------------------------------

    def request_password_reset(self, email: str, dob: str) -> None:
        """Anti-enumeration: the response is identical whether or not the
        (email, dob) pair matches a user; only malformed input errors."""
        validate_email(email)
        validate_dob(dob, self.clock())
        details = self._find_details_by_email(email)
        if details is None or details["dob"] != dob:
            return
        otp = generate_otp()
        token = self.tokens.issue(details["user_id"], TokenType.FORGOT_PASSWORD, otp=otp)
        self.storage.update("user_details", details["id"], {"otp": otp})
        self._send_link(email, "forgot-password", token)
        self.audit.emit("request_password_reset", subject=details["user_id"])

    def reset_password(self, token: str, new_password: str) -> None:
        claims = self.tokens.validate(token, TokenType.FORGOT_PASSWORD)
        details = self.storage.find_one("user_details", user_id=claims["userId"])
        if details is None or details["otp"] is None or details["otp"] != claims.get("otp"):
            raise OtpMismatch("reset code mismatch")
        validate_password(new_password)
        self.storage.update("user_details", details["id"], {
            "password_hash": self.hasher.hash(new_password),
            "otp": None,
        })
        self.audit.emit("reset_password", subject=claims["userId"], outcome="success")

    # -- profile & addresses ---------------------------------------------------

    _PROFILE_FIELDS = frozenset({"name", "phone", "dob", "profile_image"})

    def update_profile(self, user_id: str, fields: Mapping[str, Any],
                       actor: Mapping[str, Any]) -> dict:
        self._authorize_for_user(user_id, actor)
        unknown = set(fields) - self._PROFILE_FIELDS
        if unknown:
            raise ValidationError(sorted(unknown)[0])
        if "name" in fields:
            validate_name(fields["name"])
        if "phone" in fields:
            validate_phone(fields["phone"])
        if "dob" in fields:
            validate_dob(fields["dob"], self.clock())
        details = self.storage.find_one("user_details", user_id=user_id)
        if details is None:
            raise UnknownUser(user_id)
        updated = self.storage.update("user_details", details["id"], dict(fields))
        self.audit.emit("profile_update", subject=user_id)
        return updated

    def get_profile(self, user_id: str) -> dict:
        details = self.storage.find_one("user_details", user_id=user_id)
        if details is None:
            raise UnknownUser(user_id)
        safe = dict(details)
        safe.pop("password_hash")
        safe.pop("otp")
        return safe

    def upsert_address(self, user_id: str, address: Mapping[str, Any],
                       actor: Mapping[str, Any]) -> dict:
        self._authorize_for_user(user_id, actor)
        for key in ("lines", "city", "country"):
            if not address.get(key):
                raise ValidationError(key)
        if address.get("id"):
            existing = self.storage.get("address", address["id"])
            if existing is None or existing["user_id"] != user_id:
                raise ValidationError("id")
            row = self.storage.update("address", address["id"], {
                "lines": address["lines"], "city": address["city"],
                "country": address["country"],
            })
        else:
            row = new_address(user_id, address["lines"], address["city"],
                              address["country"])
            self.storage.insert("address", row)
        self.audit.emit("address_upsert", subject=user_id)
        return row

    def list_addresses(self, user_id: str) -> list[dict]:
        return self.storage.find("address", user_id=user_id)

    def delete_address(self, user_id: str, address_id: str,
                       actor: Mapping[str, Any]) -> None:
        # disabled by design; the storage layer enforces the same rule
        raise OperationDisabled("address deletion is disabled")

    # -- federation ------------------------------------------------------------

    def register_idp(self, config: IdpConfig) -> None:
        Ed25519PublicKey.from_public_bytes(base64.b64decode(config.verification_key))
        if "email" not in config.claim_mapping.values():
            raise ClaimMappingError("mapping must produce an email field")
        self.storage.insert("idp", {
            "idp_id": config.idp_id,
            "verification_key": config.verification_key,
            "claim_mapping": dict(config.claim_mapping),
            "master_id": config.master_id,
        })

    def verify_federated_assertion(self, assertion: str, idp_id: str) -> str:
        """Verify an IdP-signed claim set; return the local user id,
        provisioning it just-in-time on first sight."""
        idp = self.storage.get("idp", idp_id)
        if idp is None:
            raise UnknownIdp(idp_id)
        try:
            payload_b64, sig_b64 = assertion.split(".")
            payload = base64.urlsafe_b64decode(payload_b64 + "=" * ((4 - len(payload_b64) % 4) % 4))
            signature = base64.urlsafe_b64decode(sig_b64 + "=" * ((4 - len(sig_b64) % 4) % 4))
        except (ValueError, TypeError):
            raise SignatureInvalidError("assertion is not payload.signature") from None
        key = Ed25519PublicKey.from_public_bytes(base64.b64decode(idp["verification_key"]))
        try:
            key.verify(signature, payload)
        except InvalidSignature:
            raise SignatureInvalidError("assertion signature invalid") from None
        claims = json.loads(payload)
        mapped: dict[str, Any] = {}
        for claim, detail_field in idp["claim_mapping"].items():
            if claim in claims:
                mapped[detail_field] = claims[claim]
        if "email" not in mapped:
            raise ClaimMappingError("required email claim absent")
        existing = self._find_details_by_email(mapped["email"])
        if existing is not None:
            user = self.storage.get("user", existing["user_id"])
            if user is not None and user["master_id"] == idp["master_id"]:
                self.audit.emit("federated_login", subject=user["id"], idp=idp_id)
                return user["id"]
        user = new_user(idp["master_id"], role=Role.USER, status=UserStatus.ACTIVE)
        self.storage.insert("user", user)
        details = new_user_details(
            user["id"], mapped.get("name", mapped["email"]), mapped["email"],
            mapped.get("phone"), unusable_hash(), mapped.get("dob"))
        details["email_verified"] = True  # attested by the IdP
        self.storage.insert("user_details", details)
        self.audit.emit("federated_login", subject=user["id"], idp=idp_id,
                        provisioned=True)
        return user["id"]

    # -- helpers ---------------------------------------------------------------

    def _find_details_by_email(self, email: str) -> Optional[dict]:
        return self.storage.find_one("user_details", email=email)

    def _find_details_by_phone(self, phone: Optional[str]) -> Optional[dict]:
        if not phone:
            return None
        return self.storage.find_one("user_details", phone=phone)

    def _send_link(self, to: str, template_id: str, token: str) -> None:
        link = f"{self.base_url}/{template_id}?token={token}"
        self.mail.send(MailMessage(to=to, template_id=template_id, link=link))

    def _authorize_for_user(self, user_id: str, actor: Mapping[str, Any]) -> None:
        if actor.get("user_id") == user_id:
            return
        if actor.get("role") == Role.ADMIN.value:
            target = self.storage.get("user", user_id)
            if target is not None and target["master_id"] == actor.get("master_id"):
                return
        raise NotAuthorized("not permitted for target user")
