"""Typed signed tokens: compact header.payload.signature, HMAC-SHA256.

Every payload carries a ``type`` discriminator binding the token to exactly
one flow; validation demands the expected type, so a verification-mail
token can never stand in for a password-reset one. The signature covers
the encoded header and payload, and is checked before the payload is even
parsed, so any tamper reads as a signature failure.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import json
import time
from typing import Any, Callable, Mapping, Optional

from .errors import MalformedToken, SignatureInvalid, TokenExpired, WrongTokenType
from .model import new_id


class TokenType(str, enum.Enum):
    VERIFY_EMAIL = "VERIFY_EMAIL"
    FORGOT_PASSWORD = "FORGOT_PASSWORD"
    MFA_REQUEST = "MFA_REQUEST"
    ACCESS = "ACCESS"
    REFRESH = "REFRESH"


DEFAULT_TTLS: dict[TokenType, float] = {
    TokenType.VERIFY_EMAIL: 30 * 60,
    TokenType.FORGOT_PASSWORD: 30 * 60,
    TokenType.MFA_REQUEST: 5 * 60,
    TokenType.ACCESS: 15 * 60,
    TokenType.REFRESH: 7 * 24 * 3600,
}

_HEADER = {"alg": "HS256", "typ": "JWT"}


def _b64url(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).decode().rstrip("=")


def _unb64url(segment: str) -> bytes:
    return base64.urlsafe_b64decode(segment + "=" * ((4 - len(segment) % 4) % 4))


class TokenService:
    """Issues and validates typed tokens under one configured HMAC key."""

    def __init__(self, key: bytes, clock: Callable[[], float] = time.time,
                 ttls: Optional[Mapping[TokenType, float]] = None):
        if not key:
            raise ValueError("signing key must be configured")
        self._key = key
        self._clock = clock
        self._ttls = dict(DEFAULT_TTLS)
        if ttls:
            self._ttls.update(ttls)

    def ttl_for(self, token_type: TokenType) -> float:
        return self._ttls[token_type]

    def issue(self, user_id: str, token_type: TokenType,
              otp: Optional[int] = None, ttl: Optional[float] = None,
              extra: Optional[Mapping[str, Any]] = None) -> str:
        ttl = self._ttls[token_type] if ttl is None else ttl
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        now = self._clock()
        payload: dict[str, Any] = {
            "userId": user_id,
            "type": token_type.value,
            "iat": now,
            "exp": now + ttl,
            "jti": new_id(),
        }
        if otp is not None:
            payload["otp"] = otp
        if extra:
            payload.update(extra)
        header_seg = _b64url(json.dumps(_HEADER, separators=(",", ":")).encode())
        payload_seg = _b64url(json.dumps(payload, separators=(",", ":"),
                                         sort_keys=True).encode())
        signature = self._sign(f"{header_seg}.{payload_seg}")
        return f"{header_seg}.{payload_seg}.{signature}"

    def validate(self, serialized: str, expected_type: TokenType) -> dict:
        """Claims dict iff signature valid, unexpired, and type matches."""
        if not isinstance(serialized, str) or serialized.count(".") != 2:
            raise MalformedToken("token must have three segments")
        header_seg, payload_seg, signature = serialized.split(".")
        expected_sig = self._sign(f"{header_seg}.{payload_seg}")
        if not hmac.compare_digest(expected_sig, signature):
            raise SignatureInvalid("token signature mismatch")
        try:
            claims = json.loads(_unb64url(payload_seg))
        except (ValueError, TypeError):
            raise MalformedToken("payload is not valid JSON") from None
        if not isinstance(claims, dict) or "type" not in claims or "exp" not in claims:
            raise MalformedToken("payload missing required claims")
        if self._clock() >= claims["exp"]:
            raise TokenExpired("token expired")
        if claims["type"] != expected_type.value:
            raise WrongTokenType(expected_type.value, claims["type"])
        return claims

    def _sign(self, signing_input: str) -> str:
        mac = hmac.new(self._key, signing_input.encode(), hashlib.sha256)
        return _b64url(mac.digest())
