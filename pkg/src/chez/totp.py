"""Time-based one-time passwords (HOTP truncation over HMAC, 30 s steps).

Defaults interoperate with the common authenticator apps: SHA-1, 6 digits,
30-second period, base32 secrets. Verification accepts one period of clock
skew either side by default.
"""

from __future__ import annotations

import base64
import hmac
import secrets
import struct


def generate_secret(bits: int = 160) -> str:
    """Fresh random secret, base32-encoded without padding."""
    return base64.b32encode(secrets.token_bytes(bits // 8)).decode().rstrip("=")


def decode_secret(secret: str) -> bytes:
    padded = secret.upper().replace(" ", "")
    padded += "=" * ((8 - len(padded) % 8) % 8)
    return base64.b32decode(padded)


def hotp(key: bytes, counter: int, digits: int = 6, algorithm: str = "sha1") -> str:
    mac = hmac.new(key, struct.pack(">Q", counter), algorithm).digest()
    offset = mac[-1] & 0x0F
    binary = struct.unpack(">L", mac[offset:offset + 4])[0] & 0x7FFFFFFF
    return str(binary % (10 ** digits)).zfill(digits)


def totp_at(key: bytes, at_time: float, period: int = 30, digits: int = 6,
            algorithm: str = "sha1") -> str:
    return hotp(key, int(at_time // period), digits, algorithm)


def verify_totp(secret: str, code: str, at_time: float, *, period: int = 30,
                digits: int = 6, algorithm: str = "sha1", skew: int = 1) -> bool:
    """True iff ``code`` matches some window in ``at_time`` +/- skew periods.

    Comparison is constant-time per candidate window; all windows are
    always evaluated so timing does not reveal which one matched.
    """
    try:
        key = decode_secret(secret)
    except (ValueError, TypeError):
        return False
    if not code or len(code) != digits or not code.isdigit():
        return False
    counter = int(at_time // period)
    matched = False
    for offset in range(-skew, skew + 1):
        candidate = counter + offset
        if candidate < 0:
            continue
        expected = hotp(key, candidate, digits, algorithm)
        if hmac.compare_digest(expected, code):
            matched = True
    return matched


def provisioning_uri(secret: str, account: str, issuer: str) -> str:
    """otpauth:// URI for QR provisioning; rendering is the client's job."""
    from urllib.parse import quote

    label = f"{quote(issuer)}:{quote(account)}"
    return f"otpauth://totp/{label}?secret={secret}&issuer={quote(issuer)}"
