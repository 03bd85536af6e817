"""Policy engine: the versioned policy/entitlement store, attribute
collection (PIP), access decisions with reason codes (PDP), and the
group-tag resource filter.

Decisions are default-deny: access is granted only when an enabled
permission matches the request's module/action/app, some group containing
the subject holds that permission, and the permission's role requirement
is satisfied. A matching permission that fails a later check yields the
most specific reason code; no match at all is NO_GRANT.
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .audit import AuditLog
from .errors import DuplicateInCatalog, ParseError, UnknownUser
from .model import new_permission, normalize_tags
from .storage import BaseStorage


class ReasonCode(str, enum.Enum):
    NO_GRANT = "NO_GRANT"
    APP_NOT_ALLOWED = "APP_NOT_ALLOWED"
    ROLE_MISMATCH = "ROLE_MISMATCH"
    PERMISSION_DISABLED = "PERMISSION_DISABLED"
    TAG_MISMATCH = "TAG_MISMATCH"
    INTERNAL = "INTERNAL"


@dataclass(frozen=True)
class AccessRequest:
    subject: str  # user id
    resource_kind: str  # permission module
    action: str
    app: str
    context: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Decision:
    effect: str  # "permit" | "deny"
    reason_code: Optional[ReasonCode]
    tags: frozenset[str]
    allow_untagged: bool = True
    store_version: int = 0

    @property
    def permitted(self) -> bool:
        return self.effect == "permit"

    @staticmethod
    def permit(tags: Iterable[str], allow_untagged: bool, version: int) -> "Decision":
        return Decision("permit", None, frozenset(tags), allow_untagged, version)

    @staticmethod
    def deny(reason: ReasonCode, version: int = 0) -> "Decision":
        return Decision("deny", reason, frozenset(), True, version)


@dataclass(frozen=True)
class SubjectAttributes:
    user_id: str
    role: str
    master_id: str
    group_ids: frozenset[str]
    combined_tags: frozenset[str]


REQUIRED_POLICY_FIELDS = ("module", "action", "apps", "role", "enabled")


def parse_policy_document(raw: Mapping[str, Any]) -> dict:
    """Validate one policy/permission document; returns a normalized copy."""
    if not isinstance(raw, Mapping):
        raise ParseError("policy document must be an object")
    missing = [f for f in REQUIRED_POLICY_FIELDS if f not in raw]
    if missing:
        raise ParseError(f"policy document missing fields: {', '.join(missing)}")
    if not isinstance(raw["apps"], (list, tuple)):
        raise ParseError("apps must be a list of app names")
    role = str(raw["role"]).lower()
    if role not in ("admin", "user"):
        raise ParseError(f"unknown role: {raw['role']}")
    if not isinstance(raw["enabled"], bool):
        raise ParseError("enabled must be boolean")
    return {
        "module": str(raw["module"]),
        "action": str(raw["action"]),
        "apps": [str(a) for a in raw["apps"]],
        "role": role,
        "enabled": raw["enabled"],
        "allow_untagged": bool(raw.get("allow_untagged", True)),
    }


class PolicyStore:
    """Policy & entitlement store: permission documents with a monotonic
    version counter; the PDP reads through it, the PAP writes through it."""

    def __init__(self, storage: BaseStorage):
        self.storage = storage
        self._lock = threading.Lock()

    @property
    def version(self) -> int:
        row = self.storage.get("policy_meta", "version")
        return row["value"] if row else 0

    def _bump(self) -> int:
        with self._lock:
            row = self.storage.get("policy_meta", "version")
            if row is None:
                self.storage.insert("policy_meta", {"key": "version", "value": 1})
                return 1
            new = row["value"] + 1
            self.storage.update("policy_meta", "version", {"value": new})
            return new

    def store_policy(self, raw: Mapping[str, Any]) -> int:
        """Create or update one permission document; returns the new store
        version. The permission id is stable across updates."""
        doc = parse_policy_document(raw)
        existing = self.storage.find_one("permission", module=doc["module"],
                                         action=doc["action"])
        if existing is None:
            self.storage.insert("permission", new_permission(**doc))
        else:
            self.storage.update("permission", existing["id"], doc)
        return self._bump()

    def fetch_policies(self, resource_kind: str) -> list[dict]:
        return self.storage.find("permission", module=resource_kind)

    def load_catalog(self, documents: Sequence[Mapping[str, Any]]) -> int:
        """Replace the whole catalog atomically; returns the count loaded.

        Ids stay stable for (module, action) pairs that survive the reload;
        grants referencing removed permissions are dropped with them.
        """
        parsed = [parse_policy_document(doc) for doc in documents]
        seen: set[tuple[str, str]] = set()
        for doc in parsed:
            key = (doc["module"], doc["action"])
            if key in seen:
                raise DuplicateInCatalog(doc["module"], doc["action"])
            seen.add(key)
        previous = {(p["module"], p["action"]): p["id"]
                    for p in self.storage.all("permission")}
        records = [new_permission(permission_id=previous.get(
            (doc["module"], doc["action"])), **doc) for doc in parsed]
        kept_ids = {r["id"] for r in records}
        self.storage.replace_table("permission", records)
        for grant in self.storage.all("group_permission"):
            if grant["permission_id"] not in kept_ids:
                self.storage.delete("group_permission", grant["id"])
        self._bump()
        return len(records)

    def permission_by_id(self, permission_id: str) -> Optional[dict]:
        return self.storage.get("permission", permission_id)


class AttributeCollector:
    """PIP: assembles subject attributes, with an optional short TTL cache."""

    def __init__(self, storage: BaseStorage, cache_ttl: float = 0.0,
                 clock: Callable[[], float] = time.time):
        self.storage = storage
        self.cache_ttl = cache_ttl
        self.clock = clock
        self._cache: dict[str, tuple[float, SubjectAttributes]] = {}
        self._lock = threading.Lock()

    def collect(self, subject: str) -> SubjectAttributes:
        if self.cache_ttl > 0:
            with self._lock:
                hit = self._cache.get(subject)
                if hit and self.clock() - hit[0] < self.cache_ttl:
                    return hit[1]
        attrs = self._collect_uncached(subject)
        if self.cache_ttl > 0:
            with self._lock:
                self._cache[subject] = (self.clock(), attrs)
        return attrs

    def _collect_uncached(self, subject: str) -> SubjectAttributes:
        user = self.storage.get("user", subject)
        if user is None:
            raise UnknownUser(subject)
        group_ids = frozenset(m["group_id"] for m in
                              self.storage.find("group_members", user_id=subject))
        tags: set[str] = set()
        for group_id in group_ids:
            for grant in self.storage.find("group_permission", group_id=group_id):
                tags.update(normalize_tags(grant.get("tags", [])))
        return SubjectAttributes(
            user_id=subject,
            role=user["role"],
            master_id=user["master_id"],
            group_ids=group_ids,
            combined_tags=frozenset(tags),
        )

    def invalidate(self, subject: Optional[str] = None) -> None:
        with self._lock:
            if subject is None:
                self._cache.clear()
            else:
                self._cache.pop(subject, None)


# Deny precedence: a candidate that got past more checks yields the more
# specific reason. enabled -> role -> app.
_REASON_RANK = {
    ReasonCode.PERMISSION_DISABLED: 0,
    ReasonCode.ROLE_MISMATCH: 1,
    ReasonCode.APP_NOT_ALLOWED: 2,
}


class DecisionPoint:
    """PDP. ``decide`` is read-only and never raises; internal failures
    map to deny(INTERNAL)."""

    def __init__(self, store: PolicyStore, pip: AttributeCollector,
                 decision_log: Optional[AuditLog] = None,
                 clock: Callable[[], float] = time.time):
        self.store = store
        self.pip = pip
        self.decision_log = decision_log
        self.clock = clock

    def decide(self, request: AccessRequest) -> Decision:
        version = self.store.version
        try:
            decision = self._evaluate(request, version)
        except UnknownUser:
            decision = Decision.deny(ReasonCode.NO_GRANT, version)
        except Exception:
            decision = Decision.deny(ReasonCode.INTERNAL, version)
        self._log(request, decision)
        return decision

    def _evaluate(self, request: AccessRequest, version: int) -> Decision:
        if not all((request.subject, request.resource_kind, request.action,
                    request.app)):
            return Decision.deny(ReasonCode.INTERNAL, version)
        attrs = self.pip.collect(request.subject)
        candidates = self._candidate_grants(attrs, request.resource_kind,
                                            request.action)
        if not candidates:
            return Decision.deny(ReasonCode.NO_GRANT, version)
        permit_tags: set[str] = set()
        allow_untagged = False
        permitted = False
        worst: Optional[ReasonCode] = None
        for grant, permission in candidates:
            reason = self._check(permission, attrs.role, request.app)
            if reason is None:
                permitted = True
                permit_tags.update(normalize_tags(grant.get("tags", [])))
                allow_untagged = allow_untagged or permission.get("allow_untagged", True)
            elif worst is None or _REASON_RANK[reason] > _REASON_RANK[worst]:
                worst = reason
        if permitted:
            return Decision.permit(permit_tags, allow_untagged, version)
        return Decision.deny(worst or ReasonCode.NO_GRANT, version)

    def _candidate_grants(self, attrs: SubjectAttributes, module: str,
                          action: str) -> list[tuple[dict, dict]]:
        out = []
        for group_id in sorted(attrs.group_ids):
            grants = self.store.storage.find("group_permission", group_id=group_id)
            for grant in grants:
                permission = self.store.permission_by_id(grant["permission_id"])
                if permission and permission["module"] == module \
                        and permission["action"] == action:
                    out.append((grant, permission))
        return out

    @staticmethod
    def _check(permission: dict, subject_role: str, app: str) -> Optional[ReasonCode]:
        if not permission.get("enabled", False):
            return ReasonCode.PERMISSION_DISABLED
        if permission["role"] == "admin" and subject_role.lower() != "admin":
            return ReasonCode.ROLE_MISMATCH
        if app not in permission.get("apps", []):
            return ReasonCode.APP_NOT_ALLOWED
        return None

    def _log(self, request: AccessRequest, decision: Decision) -> None:
        if self.decision_log is None:
            return
        self.decision_log.emit(
            "decision",
            subject=request.subject,
            resource_kind=request.resource_kind,
            action=request.action,
            app=request.app,
            effect=decision.effect,
            reason_code=decision.reason_code.value if decision.reason_code else None,
            tags=sorted(decision.tags),
            store_version=decision.store_version,
        )


def filter_resources(resources: Iterable[Mapping[str, Any]],
                     tags: Iterable[str],
                     allow_untagged: bool = True) -> list[dict]:
    """OR semantics: a resource survives iff its tag set intersects the
    subject's combined tags; untagged resources survive only when the
    granting policy allows them."""
    subject_tags = set(normalize_tags(list(tags)))
    kept = []
    for resource in resources:
        resource_tags = set(normalize_tags(resource.get("tags", [])))
        if resource_tags:
            if resource_tags & subject_tags:
                kept.append(dict(resource))
        elif allow_untagged:
            kept.append(dict(resource))
    return kept
