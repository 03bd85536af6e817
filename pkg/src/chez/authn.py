"""Login state machine, MFA completion, and refresh-token rotation.

Login runs the fixed order: input validation, captcha (when enabled),
credential validation, MFA branch. Credential failure is indistinguishable
between unknown identifier and wrong password, and the password hash is
always evaluated so the two cases share a timing class. The risk score
from the session monitor can force the MFA branch for a user who left MFA
off, but can never bypass MFA a user enabled.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

from .audit import AuditLog
from .errors import (
    CaptchaError,
    ConstraintViolation,
    InvalidCredentials,
    MfaValidationError,
    TokenRevoked,
    ValidationError,
)
from .hashing import PasswordHashingStrategy
from .identity import CaptchaVerifier, _EMAIL_RE, _PHONE_RE
from .mail import MailClient, MailMessage
from .mfa import MfaService
from .model import UserStatus
from .monitor import EventKind, SessionMonitor, TelemetryEvent
from .storage import BaseStorage
from .tokens import TokenService, TokenType

MFA_FORCE_THRESHOLD = 0.7


@dataclass(frozen=True)
class TokenPair:
    access: str
    refresh: str


@dataclass(frozen=True)
class MfaChallenge:
    mfa_token: str
    channel: str  # EMAIL or TOTP
    forced: bool = False  # risk-forced for a user with MFA disabled


class AuthnService:
    def __init__(self, storage: BaseStorage, tokens: TokenService,
                 mfa: MfaService, mail: MailClient,
                 hasher: PasswordHashingStrategy, captcha: CaptchaVerifier,
                 monitor: SessionMonitor, audit: AuditLog,
                 clock: Callable[[], float] = time.time,
                 site: str = "authn",
                 mfa_force_threshold: float = MFA_FORCE_THRESHOLD):
        self.storage = storage
        self.tokens = tokens
        self.mfa = mfa
        self.mail = mail
        self.hasher = hasher
        self.captcha = captcha
        self.monitor = monitor
        self.audit = audit
        self.clock = clock
        self.site = site
        self.mfa_force_threshold = mfa_force_threshold
        self._decoy: Optional[str] = None

    def _decoy_hash(self) -> str:
        # evaluated for unknown identifiers so lookups share a timing class;
        # built lazily so non-login tooling never pays for it
        if self._decoy is None:
            self._decoy = self.hasher.hash("decoy-password-for-timing")
        return self._decoy

    # -- login -------------------------------------------------------------------

    def login(self, identifier: str, password: str,
              captcha_response: Optional[str] = None,
              captcha_enabled: bool = False,
              context: Optional[Mapping[str, Any]] = None):
        """Returns a TokenPair, or an MfaChallenge when a second factor is
        required."""
        context = dict(context or {})
        if not identifier or not (_EMAIL_RE.match(identifier)
                                  or _PHONE_RE.match(identifier)):
            raise ValidationError("identifier")
        if not password:
            raise ValidationError("password")
        if captcha_enabled and not self.captcha.verify(captcha_response):
            raise CaptchaError("captcha validation failed")

        details = (self.storage.find_one("user_details", email=identifier)
                   or self.storage.find_one("user_details", phone=identifier))
        if details is None:
            self.hasher.verify(password, self._decoy_hash())
            self._record_failure(None, context)
            raise InvalidCredentials()
        user = self.storage.get("user", details["user_id"])
        password_ok = self.hasher.verify(password, details["password_hash"])
        if user is None or user["status"] != UserStatus.ACTIVE.value or not password_ok:
            self._record_failure(details["user_id"], context)
            raise InvalidCredentials()

        user_id = user["id"]
        risk = self.monitor.risk_context(
            user_id, at_time=self.clock(),
            device_id=context.get("device_id"), source=context.get("source"))
        score = self.monitor.risk_score(risk)
        forced = score >= self.mfa_force_threshold
        if self.mfa.is_enabled(user_id) or forced:
            challenge = self._begin_mfa(user, details, forced)
            self.audit.emit("login", subject=user_id, outcome="mfa_required",
                            forced=forced, risk_score=round(score, 6))
            return challenge
        pair = self._issue_pair(user)
        self._record_success(user_id, context)
        self.audit.emit("login", subject=user_id, outcome="success")
        return pair

    def complete_mfa(self, mfa_token: str, otp: str,
                     context: Optional[Mapping[str, Any]] = None) -> TokenPair:
        context = dict(context or {})
        claims = self.tokens.validate(mfa_token, TokenType.MFA_REQUEST)
        user_id = claims["userId"]
        if not self.mfa.verify_login_factor(user_id, otp):
            self._record_failure(user_id, context)
            raise MfaValidationError("second factor rejected")
        user = self.storage.get("user", user_id)
        if user is None or user["status"] != UserStatus.ACTIVE.value:
            raise InvalidCredentials()
        pair = self._issue_pair(user, mfa_time=self.clock())
        self._record_success(user_id, context)
        self.audit.emit("mfa_complete", subject=user_id, outcome="success")
        return pair

    def refresh(self, refresh_token: str) -> TokenPair:
        """Rotate: the presented refresh token is revoked and a new pair
        issued. Reuse of a rotated token is reported as revocation."""
        claims = self.tokens.validate(refresh_token, TokenType.REFRESH)
        try:
            self.storage.insert("revoked_token",
                                {"jti": claims["jti"], "revoked_at": self.clock()})
        except ConstraintViolation:
            raise TokenRevoked("refresh token already rotated") from None
        user = self.storage.get("user", claims["userId"])
        if user is None:
            raise InvalidCredentials()
        pair = self._issue_pair(user, mfa_time=claims.get("mfaTime"))
        self.audit.emit("token_refresh", subject=user["id"])
        return pair

    def actor_from_access_token(self, serialized: str) -> dict:
        """Actor attributes derived from a validated ACCESS token only."""
        claims = self.tokens.validate(serialized, TokenType.ACCESS)
        return {
            "user_id": claims["userId"],
            "role": claims.get("role", "USER"),
            "master_id": claims.get("masterId"),
            "mfa_time": claims.get("mfaTime"),
        }

    # -- internals ------------------------------------------------------------------

    def _begin_mfa(self, user: dict, details: dict, forced: bool) -> MfaChallenge:
        channel, otp = self.mfa.login_challenge(user["id"])
        if channel == "EMAIL" and otp is not None:
            self.mail.send(MailMessage(to=details["email"], template_id="login-otp",
                                       link=f"{otp:06d}"))
        token = self.tokens.issue(user["id"], TokenType.MFA_REQUEST,
                                  extra={"channel": channel, "forced": forced})
        return MfaChallenge(mfa_token=token, channel=channel, forced=forced)

    def _issue_pair(self, user: dict, mfa_time: Optional[float] = None) -> TokenPair:
        extra: dict[str, Any] = {"role": user["role"], "masterId": user["master_id"]}
        if mfa_time is not None:
            extra["mfaTime"] = mfa_time
        access = self.tokens.issue(user["id"], TokenType.ACCESS, extra=extra)
        refresh = self.tokens.issue(user["id"], TokenType.REFRESH, extra=extra)
        return TokenPair(access=access, refresh=refresh)

    def _record_failure(self, user_id: Optional[str],
                        context: Mapping[str, Any]) -> None:
        self.monitor.ingest(TelemetryEvent(
            time=self.clock(), site=self.site, kind=EventKind.LOGIN_FAILURE,
            subject=user_id, attributes=dict(context)))
        self.audit.emit("login", subject=user_id, outcome="failure")

    def _record_success(self, user_id: str, context: Mapping[str, Any]) -> None:
        self.monitor.ingest(TelemetryEvent(
            time=self.clock(), site=self.site, kind=EventKind.LOGIN_SUCCESS,
            subject=user_id, attributes=dict(context)))
