"""Core data model: record types, table schemas, and constraint metadata.

Tables mirror the multi-tenant identity core: every user, group, grant and
resource hangs off a master (tenant) record. The schema registry below is
what both storage backends enforce; ``schema_dump()`` emits it as JSON so
documentation tests can assert the constraint list directly.
"""

from __future__ import annotations

import enum
import uuid
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence


def new_id() -> str:
    """Opaque unique identifier (UUID hex)."""
    return uuid.uuid4().hex


class Role(str, enum.Enum):
    ADMIN = "ADMIN"
    USER = "USER"


class UserStatus(str, enum.Enum):
    ACTIVE = "ACTIVE"
    INACTIVE = "INACTIVE"


class MfaType(str, enum.Enum):
    EMAIL = "EMAIL"
    TOTP = "TOTP"


def normalize_tags(tags: Sequence[str]) -> list[str]:
    """Tags are matched case-insensitively; store them lowercased, deduped,
    in first-seen order."""
    seen: list[str] = []
    for tag in tags:
        low = tag.strip().lower()
        if low and low not in seen:
            seen.append(low)
    return seen


# --- table schema registry ---------------------------------------------------

@dataclass(frozen=True)
class ForeignKey:
    field: str
    references: str  # target table; always points at its primary key
    nullable: bool = False


@dataclass(frozen=True)
class TableSchema:
    name: str
    primary_key: Any  # str or tuple[str, ...] for composite keys
    unique: tuple = ()  # extra unique constraints, each a str or tuple[str, ...]
    foreign_keys: tuple = ()
    indexes: tuple = ()
    delete_disabled: bool = False


TABLES: dict[str, TableSchema] = {}


def _table(schema: TableSchema) -> TableSchema:
    TABLES[schema.name] = schema
    return schema


MASTER = _table(TableSchema(name="master", primary_key="id"))

USER = _table(TableSchema(
    name="user",
    primary_key="id",
    foreign_keys=(ForeignKey("master_id", "master"),),
))

USER_DETAILS = _table(TableSchema(
    name="user_details",
    primary_key="id",
    unique=("user_id",),
    foreign_keys=(ForeignKey("user_id", "user"),),
    indexes=("user_id", "email", "phone"),
))

ADDRESS = _table(TableSchema(
    name="address",
    primary_key="id",
    foreign_keys=(ForeignKey("user_id", "user"),),
    indexes=("user_id",),
    delete_disabled=True,
))

GROUP = _table(TableSchema(
    name="group",
    primary_key="id",
    foreign_keys=(ForeignKey("master_id", "master"),),
))

GROUP_MEMBERS = _table(TableSchema(
    name="group_members",
    primary_key=("group_id", "user_id"),
    foreign_keys=(ForeignKey("group_id", "group"), ForeignKey("user_id", "user")),
))

PERMISSION = _table(TableSchema(
    name="permission",
    primary_key="id",
    unique=(("module", "action"),),
    indexes=("module",),
))

GROUP_PERMISSION = _table(TableSchema(
    name="group_permission",
    primary_key="id",
    unique=(("group_id", "permission_id"),),
    foreign_keys=(
        ForeignKey("group_id", "group"),
        ForeignKey("permission_id", "permission"),
        ForeignKey("master_id", "master"),
    ),
    indexes=("group_id",),
))

RESOURCE = _table(TableSchema(
    name="resource",
    primary_key="id",
    foreign_keys=(ForeignKey("master_id", "master"),),
    indexes=("master_id",),
))

MFA = _table(TableSchema(
    name="mfa",
    primary_key="user_id",
    foreign_keys=(ForeignKey("user_id", "user"),),
))

# Auxiliary tables used by the token service, vault, federation broker and
# policy store. Same storage contract, not part of the nine-table identity
# core.
REVOKED_TOKEN = _table(TableSchema(name="revoked_token", primary_key="jti"))

CREDENTIAL = _table(TableSchema(name="credential", primary_key="id"))

IDP = _table(TableSchema(name="idp", primary_key="idp_id"))

POLICY_META = _table(TableSchema(name="policy_meta", primary_key="key"))


def schema_dump() -> list[dict]:
    """Table definitions and constraints as plain JSON-able dicts."""
    out = []
    for schema in TABLES.values():
        out.append({
            "table": schema.name,
            "primary_key": list(schema.primary_key)
            if isinstance(schema.primary_key, tuple) else schema.primary_key,
            "unique": [list(u) if isinstance(u, tuple) else u for u in schema.unique],
            "foreign_keys": [
                {"field": fk.field, "references": fk.references}
                for fk in schema.foreign_keys
            ],
            "indexes": list(schema.indexes),
            "delete_disabled": schema.delete_disabled,
        })
    return out


# --- record constructors -----------------------------------------------------
#
# Records are plain dicts in storage; these helpers build them with the
# defaults the flows rely on (role USER, status ACTIVE, verification flags
# false, optional fields null).

def new_master(created_at: float) -> dict:
    return {"id": new_id(), "created_at": created_at}


def new_user(master_id: str, role: Role = Role.USER,
             status: UserStatus = UserStatus.ACTIVE, is_root: bool = False) -> dict:
    return {
        "id": new_id(),
        "master_id": master_id,
        "role": role.value,
        "status": status.value,
        "is_root": is_root,
    }


def new_user_details(user_id: str, name: str, email: str, phone: Optional[str],
                     password_hash: str, dob: Optional[str]) -> dict:
    return {
        "id": new_id(),
        "user_id": user_id,
        "name": name,
        "email": email,
        "phone": phone,
        "password_hash": password_hash,
        "dob": dob,
        "email_verified": False,
        "phone_verified": False,
        "profile_image": None,
        "otp": None,
    }


def new_address(user_id: str, lines: str, city: str, country: str) -> dict:
    return {"id": new_id(), "user_id": user_id, "lines": lines,
            "city": city, "country": country}


def new_group(name: str, master_id: str) -> dict:
    return {"id": new_id(), "name": name, "master_id": master_id}


def new_permission(module: str, action: str, apps: Sequence[str], role: str,
                   enabled: bool = True, allow_untagged: bool = True,
                   permission_id: Optional[str] = None) -> dict:
    return {
        "id": permission_id or new_id(),
        "module": module,
        "action": action,
        "apps": list(apps),
        "role": role,
        "enabled": enabled,
        "allow_untagged": allow_untagged,
    }


def new_group_permission(group_id: str, permission_id: str, master_id: str,
                         tags: Sequence[str]) -> dict:
    return {
        "id": new_id(),
        "group_id": group_id,
        "permission_id": permission_id,
        "master_id": master_id,
        "tags": normalize_tags(tags),
    }


def new_resource(master_id: str, kind: str, tags: Sequence[str],
                 payload: Any = None) -> dict:
    return {"id": new_id(), "master_id": master_id, "kind": kind,
            "tags": normalize_tags(tags), "payload": payload}


def new_mfa_record(user_id: str) -> dict:
    return {
        "user_id": user_id,
        "mfa_type": None,
        "enabled": False,
        "otp": None,
        "totp_secret": None,
        "backup_codes": [],
        # pending enable/disable challenge bookkeeping
        "pending_type": None,
        "otp_expires_at": None,
        "attempts": 0,
    }
