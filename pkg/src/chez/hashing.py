"""Password hashing behind a strategy interface.

The default is adaptive PBKDF2-HMAC-SHA256 with a bcrypt-style cost factor
(iterations = 600 * 2**cost, so cost 10 lands in the recommended range).
The cost is embedded in the stored hash, so verification adapts to whatever
cost the hash was created with. Tests swap in a low-cost instance.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import os


class PasswordHashingStrategy:
    def hash(self, password: str) -> str:
        raise NotImplementedError

    def verify(self, password: str, stored: str) -> bool:
        raise NotImplementedError


class Pbkdf2Strategy(PasswordHashingStrategy):
    PREFIX = "pbkdf2_sha256"

    def __init__(self, cost: int = 10):
        if cost < 1 or cost > 20:
            raise ValueError("cost out of range")
        self.cost = cost

    @staticmethod
    def _iterations(cost: int) -> int:
        return 600 * (2 ** cost)

    def hash(self, password: str) -> str:
        salt = os.urandom(16)
        digest = hashlib.pbkdf2_hmac(
            "sha256", password.encode(), salt, self._iterations(self.cost)
        )
        return "$".join([
            self.PREFIX,
            str(self.cost),
            base64.b64encode(salt).decode(),
            base64.b64encode(digest).decode(),
        ])

    def verify(self, password: str, stored: str) -> bool:
        try:
            prefix, cost_s, salt_b64, digest_b64 = stored.split("$")
            if prefix != self.PREFIX:
                return False
            salt = base64.b64decode(salt_b64)
            expected = base64.b64decode(digest_b64)
            cost = int(cost_s)
        except (ValueError, TypeError):
            return False
        actual = hashlib.pbkdf2_hmac(
            "sha256", password.encode(), salt, self._iterations(cost)
        )
        return hmac.compare_digest(actual, expected)


def unusable_hash() -> str:
    """Sentinel stored for accounts that must never authenticate by
    password (federated JIT users). Verification always fails because the
    prefix never matches."""
    return "unusable$" + base64.b64encode(os.urandom(18)).decode()
