"""Credential vault: sealed storage, policy- and MFA-gated access,
automated rotation, and privileged-session recording.

Secrets are sealed with an AEAD under the vault master key before they
touch storage; the additional data binds ciphertext to the credential's
id, audience, environment and version, so records cannot be swapped
around. Grant tags double as environment scopes: a vault grant tagged
["dev"] reaches only DEV credentials, an untagged grant reaches all.
"""

from __future__ import annotations

import base64
import enum
import os
import secrets
import string
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional, Protocol

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .audit import AuditLog
from .errors import (
    AuthorizationError,
    EnvironmentMismatch,
    MfaRequired,
    SealIntegrityError,
    SessionClosed,
    UnknownCredential,
    ValidationError,
)
from .model import new_id
from .policy import AccessRequest, DecisionPoint
from .storage import BaseStorage
from .tokens import TokenService, TokenType

VAULT_MODULE = "vault"
VAULT_APP = "vault"
MFA_PROOF_MAX_AGE = 300.0


class CredentialKind(str, enum.Enum):
    SSH_KEY = "SSH_KEY"
    LDAP = "LDAP"
    ACCESS_KEY = "ACCESS_KEY"
    PRIVILEGED_PASSWORD = "PRIVILEGED_PASSWORD"
    API_KEY = "API_KEY"
    SECRET_KEY = "SECRET_KEY"
    SERVICE_ACCOUNT_PASSWORD = "SERVICE_ACCOUNT_PASSWORD"


class Audience(str, enum.Enum):
    CIAM = "CIAM"
    PAM = "PAM"


class Environment(str, enum.Enum):
    PROD = "PROD"
    TEST = "TEST"
    DEV = "DEV"


CHARSETS = {
    "alnum": string.ascii_letters + string.digits,
    "alnum+symbols": string.ascii_letters + string.digits + "!@#$%^&*-_=+",
    "alpha": string.ascii_letters,
    "digits": string.digits,
    "hex": "0123456789abcdef",
}


@dataclass(frozen=True)
class RotationPolicy:
    interval: Optional[float] = None  # seconds between scheduled rotations
    length: int = 32
    charset: str = "alnum+symbols"

    def validate(self) -> None:
        if self.length < 8:
            raise ValidationError("length", "generated secrets need >= 8 chars")
        if self.charset not in CHARSETS:
            raise ValidationError("charset", f"unknown charset {self.charset}")
        if self.interval is not None and self.interval <= 0:
            raise ValidationError("interval")

    def generate(self) -> str:
        alphabet = CHARSETS[self.charset]
        return "".join(secrets.choice(alphabet) for _ in range(self.length))

    def as_dict(self) -> dict:
        return {"interval": self.interval, "length": self.length,
                "charset": self.charset}

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RotationPolicy":
        return cls(interval=raw.get("interval"), length=raw.get("length", 32),
                   charset=raw.get("charset", "alnum+symbols"))


class RekeyTarget(Protocol):
    """Anything the vault re-keys after rotating a credential (servers,
    databases; the tests use a simulated one)."""

    def rekey(self, new_secret: str) -> None: ...


class Vault:
    def __init__(self, storage: BaseStorage, master_key: bytes,
                 pdp: DecisionPoint, tokens: TokenService, audit: AuditLog,
                 clock: Callable[[], float] = time.time,
                 mfa_proof_max_age: float = MFA_PROOF_MAX_AGE):
        if len(master_key) != 32:
            raise ValueError("vault master key must be 32 bytes")
        self._aead = ChaCha20Poly1305(master_key)
        self.storage = storage
        self.pdp = pdp
        self.tokens = tokens
        self.audit = audit
        self.clock = clock
        self.mfa_proof_max_age = mfa_proof_max_age
        self._credential_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._targets: dict[str, RekeyTarget] = {}
        self._sessions: dict[str, dict] = {}
        self._sessions_lock = threading.Lock()

    # -- credential lifecycle ---------------------------------------------------

    def store_credential(self, kind: str, audience: str, environment: str,
                         secret: str, rotation_policy: RotationPolicy,
                         actor: Mapping[str, Any]) -> str:
        self._authorize(actor, "create")
        if not secret:
            raise ValidationError("secret")
        kind_v = self._parse(CredentialKind, kind, "kind")
        audience_v = self._parse(Audience, audience, "audience")
        environment_v = self._parse(Environment, environment, "environment")
        rotation_policy.validate()
        credential_id = new_id()
        now = self.clock()
        record = {
            "id": credential_id,
            "kind": kind_v.value,
            "audience": audience_v.value,
            "environment": environment_v.value,
            "ciphertext": self._seal(secret, credential_id, audience_v.value,
                                     environment_v.value, 1),
            "rotation_policy": rotation_policy.as_dict(),
            "version": 1,
            "created_at": now,
            "rotated_at": None,
        }
        self.storage.insert("credential", record)
        self.audit.emit("vault_store", actor=actor.get("user_id"),
                        credential_id=credential_id, version=1, outcome="success")
        return credential_id

    def retrieve_credential(self, credential_id: str, actor: Mapping[str, Any],
                            mfa_proof: Optional[str]) -> str:
        decision = self._authorize(actor, "read")
        self._check_mfa_proof(mfa_proof)
        with self._lock_for(credential_id):
            record = self.storage.get("credential", credential_id)
            if record is None:
                raise UnknownCredential(credential_id)
            self._check_environment_scope(decision.tags, record["environment"])
            plaintext = self._unseal(record)
        self.audit.emit("vault_retrieve", actor=actor.get("user_id"),
                        credential_id=credential_id, version=record["version"],
                        outcome="success")
        return plaintext

    def rotate_credential(self, credential_id: str, trigger: str = "EVENT",
                          actor: Optional[Mapping[str, Any]] = None) -> int:
        if trigger not in ("SCHEDULED", "EVENT"):
            raise ValidationError("trigger")
        with self._lock_for(credential_id):
            record = self.storage.get("credential", credential_id)
            if record is None:
                raise UnknownCredential(credential_id)
            policy = RotationPolicy.from_dict(record["rotation_policy"])
            new_secret = policy.generate()
            new_version = record["version"] + 1
            self.storage.update("credential", credential_id, {
                "ciphertext": self._seal(new_secret, credential_id,
                                         record["audience"],
                                         record["environment"], new_version),
                "version": new_version,
                "rotated_at": self.clock(),
            })
            target = self._targets.get(credential_id)
            if target is not None:
                target.rekey(new_secret)
        self.audit.emit("vault_rotate", actor=(actor or {}).get("user_id"),
                        credential_id=credential_id, version=new_version,
                        trigger=trigger, outcome="success")
        return new_version

    def list_credentials(self, actor: Mapping[str, Any],
                         audience: Optional[str] = None,
                         environment: Optional[str] = None) -> list[dict]:
        """Metadata only; ciphertext never leaves the vault. Audience and
        environment scoping keep CIAM and PAM (and PROD/TEST/DEV) apart."""
        decision = self._authorize(actor, "list")
        rows = self.storage.all("credential")
        out = []
        for row in rows:
            if audience and row["audience"] != audience.upper():
                continue
            if environment and row["environment"] != environment.upper():
                continue
            if decision.tags and row["environment"].lower() not in decision.tags:
                continue
            out.append({k: row[k] for k in
                        ("id", "kind", "audience", "environment", "version",
                         "created_at", "rotated_at", "rotation_policy")})
        return out

    def attach_target(self, credential_id: str, target: RekeyTarget) -> None:
        """Register the system that must learn each new secret on rotation."""
        self._targets[credential_id] = target

    def due_rotations(self, now: Optional[float] = None) -> list[str]:
        now = self.clock() if now is None else now
        due = []
        for row in self.storage.all("credential"):
            interval = (row.get("rotation_policy") or {}).get("interval")
            if not interval:
                continue
            last = row["rotated_at"] or row["created_at"]
            if last + interval <= now:
                due.append(row["id"])
        return due

    # -- privileged session manager ------------------------------------------------

    def psm_start(self, user_id: str, target: str,
                  actor: Mapping[str, Any]) -> str:
        self._authorize(actor, "session")
        session_id = new_id()
        with self._sessions_lock:
            self._sessions[session_id] = {
                "id": session_id,
                "user_id": user_id,
                "target": target,
                "started_at": self.clock(),
                "ended_at": None,
                "events": [],
            }
        self.audit.emit("psm_start", actor=actor.get("user_id"),
                        session_id=session_id, target=target)
        return session_id

    def psm_record(self, session_id: str, kind: str, detail: Any = None) -> None:
        with self._sessions_lock:
            session = self._session_open(session_id)
            session["events"].append({"time": self.clock(), "kind": kind,
                                      "detail": detail})
        self.audit.emit("psm_event", session_id=session_id, kind=kind)

    def psm_end(self, session_id: str) -> dict:
        with self._sessions_lock:
            session = self._session_open(session_id)
            session["ended_at"] = self.clock()
        self.audit.emit("psm_end", session_id=session_id, session=session)
        return session

    def psm_session(self, session_id: str) -> Optional[dict]:
        with self._sessions_lock:
            found = self._sessions.get(session_id)
            return dict(found) if found else None

    def _session_open(self, session_id: str) -> dict:
        session = self._sessions.get(session_id)
        if session is None or session["ended_at"] is not None:
            raise SessionClosed(session_id)
        return session

    # -- internals -------------------------------------------------------------------

    def _authorize(self, actor: Mapping[str, Any], action: str):
        decision = self.pdp.decide(AccessRequest(
            subject=actor.get("user_id") or "",
            resource_kind=VAULT_MODULE, action=action, app=VAULT_APP,
            context={"time": self.clock()}))
        if not decision.permitted:
            raise AuthorizationError(
                f"vault {action} denied: {decision.reason_code.value}")
        return decision

    def _check_mfa_proof(self, mfa_proof: Optional[str]) -> None:
        if not mfa_proof:
            raise MfaRequired("vault access requires recent MFA")
        claims = self.tokens.validate(mfa_proof, TokenType.ACCESS)
        mfa_time = claims.get("mfaTime")
        if mfa_time is None or self.clock() - mfa_time > self.mfa_proof_max_age:
            raise MfaRequired("MFA proof is stale or absent")

    @staticmethod
    def _check_environment_scope(tags, environment: str) -> None:
        if tags and environment.lower() not in tags:
            raise EnvironmentMismatch(
                f"actor is not scoped to {environment} credentials")

    def _lock_for(self, credential_id: str) -> threading.Lock:
        with self._locks_guard:
            if credential_id not in self._credential_locks:
                self._credential_locks[credential_id] = threading.Lock()
            return self._credential_locks[credential_id]

    @staticmethod
    def _parse(enum_cls, value: str, field: str):
        try:
            return enum_cls(str(value).upper())
        except ValueError:
            raise ValidationError(field, f"unknown {field}: {value}") from None

    def _aad(self, credential_id: str, audience: str, environment: str,
             version: int) -> bytes:
        return f"{credential_id}|{audience}|{environment}|{version}".encode()

    def _seal(self, plaintext: str, credential_id: str, audience: str,
              environment: str, version: int) -> str:
        nonce = os.urandom(12)
        sealed = self._aead.encrypt(nonce, plaintext.encode(),
                                    self._aad(credential_id, audience,
                                              environment, version))
        return base64.b64encode(nonce + sealed).decode()

    def _unseal(self, record: dict) -> str:
        raw = base64.b64decode(record["ciphertext"])
        nonce, sealed = raw[:12], raw[12:]
        try:
            plaintext = self._aead.decrypt(
                nonce, sealed, self._aad(record["id"], record["audience"],
                                         record["environment"],
                                         record["version"]))
        except InvalidTag:
            raise SealIntegrityError(record["id"]) from None
        return plaintext.decode()


class RotationScheduler:
    """Background ticker driving scheduled rotations off each credential's
    next-due timestamp."""

    def __init__(self, vault: Vault, tick_seconds: float = 1.0):
        self.vault = vault
        self.tick_seconds = tick_seconds
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="vault-rotation")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self._stop.clear()

    def run_once(self) -> int:
        """One scheduler pass; returns how many rotations ran."""
        count = 0
        for credential_id in self.vault.due_rotations():
            try:
                self.vault.rotate_credential(credential_id, trigger="SCHEDULED")
                count += 1
            except UnknownCredential:
                continue
        return count

    def _run(self) -> None:
        while not self._stop.wait(self.tick_seconds):
            self.run_once()
