"""Group, membership and grant administration.

Actor rule: admins (including the root user) administer only their own
master's groups; membership itself may cross masters, which is what makes
cross-account collaboration work. The permission catalog is externally
provided and loaded whole through the policy store.
"""

from __future__ import annotations

import json
import threading
from typing import Any, Mapping, Optional, Sequence

from .audit import AuditLog
from .errors import (
    AuthorizationError,
    MembersPresentError,
    ParseError,
    PermissionsPresentError,
    UnknownRecord,
    ValidationError,
)
from .model import new_group, new_group_permission, normalize_tags
from .policy import PolicyStore
from .storage import BaseStorage


class RbacService:
    def __init__(self, storage: BaseStorage, policy_store: PolicyStore,
                 audit: Optional[AuditLog] = None):
        self.storage = storage
        self.policy_store = policy_store
        self.audit = audit
        # serializes group admin ops so delete cannot race a member add
        self._admin_lock = threading.Lock()

    # -- groups ---------------------------------------------------------------

    def upsert_group(self, name: str, master_id: str, actor: Mapping[str, Any],
                     group_id: Optional[str] = None) -> dict:
        if not name or not str(name).strip():
            raise ValidationError("name")
        if not master_id:
            raise ValidationError("master_id")
        self._authorize_admin(actor, master_id)
        with self._admin_lock:
            if group_id is not None:
                existing = self.storage.get("group", group_id)
                if existing is None or existing["master_id"] != master_id:
                    raise ValidationError("group_id")
                group = self.storage.update("group", group_id, {"name": name})
            else:
                group = new_group(name, master_id)
                self.storage.insert("group", group)
        self._emit("group_upsert", actor, group_id=group["id"])
        return group

    def delete_group(self, group_id: str, master_id: str,
                     actor: Mapping[str, Any]) -> None:
        if not group_id:
            raise ValidationError("group_id")
        if not master_id:
            raise ValidationError("master_id")
        self._authorize_admin(actor, master_id)
        with self._admin_lock:
            group = self.storage.get("group", group_id)
            if group is None or group["master_id"] != master_id:
                raise ValidationError("group_id")
            # check order is fixed: members first, then permissions
            if self.storage.count("group_members", group_id=group_id) > 0:
                raise MembersPresentError("group has members")
            if self.storage.count("group_permission", group_id=group_id) > 0:
                raise PermissionsPresentError("group has permissions assigned")
            self.storage.delete("group", group_id)
        self._emit("group_delete", actor, group_id=group_id)

    # -- membership -------------------------------------------------------------

    def modify_group_member(self, member_id: str, group_id: str, master_id: str,
                            actor: Mapping[str, Any], add: bool) -> None:
        if not member_id:
            raise ValidationError("member_id")
        if not group_id:
            raise ValidationError("group_id")
        self._authorize_admin(actor, master_id)
        with self._admin_lock:
            group = self.storage.get("group", group_id)
            if group is None or group["master_id"] != master_id:
                raise ValidationError("group_id")
            if self.storage.get("user", member_id) is None:
                raise ValidationError("member_id")
            if add:
                # cross-account membership is allowed: the member's master
                # may differ from the group's
                self.storage.insert("group_members",
                                    {"group_id": group_id, "user_id": member_id})
            else:
                try:
                    self.storage.delete("group_members", (group_id, member_id))
                except UnknownRecord:
                    pass  # removal is an idempotent no-op
        self._emit("group_member_add" if add else "group_member_remove",
                   actor, group_id=group_id, member_id=member_id)

    # -- grants --------------------------------------------------------------------

    def add_group_permission(self, group_id: str, permission_id: str,
                             actor: Mapping[str, Any],
                             tags: Sequence[str] = ()) -> dict:
        if not group_id:
            raise ValidationError("group_id")
        if not permission_id:
            raise ValidationError("permission_id")
        group = self.storage.get("group", group_id)
        if group is None:
            raise ValidationError("group_id")
        self._authorize_admin_or_member_role(actor, group["master_id"])
        permission = self.storage.get("permission", permission_id)
        if permission is None or not permission.get("enabled", False):
            raise ValidationError("permission_id")
        # a user-role actor may hand out only user-role permissions
        if str(actor.get("role", "")).lower() == "user" \
                and permission["role"] != "user":
            raise AuthorizationError(
                "only user-role permissions can be assigned by users")
        grant = new_group_permission(group_id, permission_id,
                                     group["master_id"], tags)
        self.storage.insert("group_permission", grant)
        self._emit("group_permission_add", actor, group_id=group_id,
                   permission_id=permission_id, tags=grant["tags"])
        return grant

    def update_group_permission_tags(self, group_id: str, permission_id: str,
                                     tags: Sequence[str],
                                     actor: Mapping[str, Any]) -> dict:
        """Explicit tag replacement for an existing grant."""
        group = self.storage.get("group", group_id)
        if group is None:
            raise ValidationError("group_id")
        self._authorize_admin(actor, group["master_id"])
        grant = self.storage.find_one("group_permission", group_id=group_id,
                                      permission_id=permission_id)
        if grant is None:
            raise ValidationError("permission_id")
        updated = self.storage.update("group_permission", grant["id"],
                                      {"tags": normalize_tags(tags)})
        self._emit("group_permission_update", actor, group_id=group_id,
                   permission_id=permission_id, tags=updated["tags"])
        return updated

    def remove_group_permission(self, group_id: str, permission_id: str,
                                actor: Mapping[str, Any]) -> None:
        group = self.storage.get("group", group_id)
        if group is None:
            raise ValidationError("group_id")
        self._authorize_admin(actor, group["master_id"])
        grant = self.storage.find_one("group_permission", group_id=group_id,
                                      permission_id=permission_id)
        if grant is not None:
            self.storage.delete("group_permission", grant["id"])
        self._emit("group_permission_remove", actor, group_id=group_id,
                   permission_id=permission_id)

    # -- catalog ---------------------------------------------------------------------

    def load_permission_catalog(self, document: str | Sequence[Mapping]) -> int:
        """Load an externally provided catalog (JSON array text or parsed
        list); all-or-nothing."""
        if isinstance(document, str):
            try:
                parsed = json.loads(document)
            except json.JSONDecodeError as exc:
                raise ParseError(f"catalog is not valid JSON: {exc}") from None
        else:
            parsed = document
        if not isinstance(parsed, list):
            raise ParseError("catalog must be a JSON array of permission objects")
        count = self.policy_store.load_catalog(parsed)
        self._emit("permission_catalog_load", {}, count=count)
        return count

    def find_permission(self, module: str, action: str) -> Optional[dict]:
        return self.storage.find_one("permission", module=module, action=action)

    # -- internals ----------------------------------------------------------------------

    @staticmethod
    def _is_admin(actor: Mapping[str, Any]) -> bool:
        return str(actor.get("role", "")).lower() == "admin"

    def _authorize_admin(self, actor: Mapping[str, Any], master_id: str) -> None:
        if not self._is_admin(actor) or actor.get("master_id") != master_id:
            raise AuthorizationError("actor may not administer this master")

    def _authorize_admin_or_member_role(self, actor: Mapping[str, Any],
                                        master_id: str) -> None:
        # grant assignment additionally admits user-role actors of the same
        # master; the per-permission role rule still applies afterwards
        if actor.get("master_id") != master_id:
            raise AuthorizationError("actor may not administer this master")
        if str(actor.get("role", "")).lower() not in ("admin", "user"):
            raise AuthorizationError("unknown actor role")

    def _emit(self, op: str, actor: Mapping[str, Any], **fields) -> None:
        if self.audit is not None:
            self.audit.emit(op, actor=actor.get("user_id"), **fields)
