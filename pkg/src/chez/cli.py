"""Administrative command line: bootstrap, serve, catalog loading, group
and vault administration, audit queries, schema dump.

Commands delegate to module operations; the CLI itself holds no business
logic. Secrets are read from environment variables or hidden prompts,
never from argv. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Any, Optional

import click

from .app import ChezApp, build_app
from .audit import match_filters, read_jsonl
from .config import load_config
from .errors import AlreadyBootstrapped, ChezError
from .httpd import HttpServer
from .identity import validate_email, validate_password
from .model import Role, UserStatus, new_master, new_user, new_user_details, schema_dump
from .vault import RotationPolicy


class CliState:
    def __init__(self, config_path: Optional[str], as_json: bool):
        self.config_path = config_path
        self.as_json = as_json
        self._app: Optional[ChezApp] = None

    def app(self) -> ChezApp:
        if self._app is None:
            self._app = build_app(load_config(self.config_path))
        return self._app

    def emit(self, data: Any, human: str) -> None:
        if self.as_json:
            click.echo(json.dumps(data, sort_keys=True, default=str))
        else:
            click.echo(human)


def _actor_for(state: CliState, as_user: Optional[str]) -> dict:
    """CLI actor: a CHEZ_TOKEN access token wins; otherwise --as <user-id>;
    otherwise the unique root user of a single-master store."""
    app = state.app()
    token = os.environ.get("CHEZ_TOKEN")
    if token:
        return app.authn.actor_from_access_token(token)
    if as_user:
        user = app.storage.get("user", as_user)
        if user is None:
            raise ChezError(f"no such user: {as_user}")
    else:
        roots = app.storage.find("user", is_root=True)
        if len(roots) != 1:
            raise ChezError("ambiguous actor: pass --as USER_ID or set CHEZ_TOKEN")
        user = roots[0]
    return {"user_id": user["id"], "role": user["role"],
            "master_id": user["master_id"]}


@click.group()
@click.option("--config", "-c", "config_path", envvar="CHEZ_CONFIG",
              type=click.Path(), help="Config file (TOML or JSON).")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], as_json: bool) -> None:
    ctx.obj = CliState(config_path, as_json)


# --- bootstrap ---------------------------------------------------------------------


@cli.command()
@click.option("--email", required=True)
@click.option("--name", default="Root Administrator", show_default=True)
@click.option("--phone", default=None)
@click.option("--force", is_flag=True,
              help="Bootstrap even if the store is not empty.")
@click.pass_obj
def bootstrap(state: CliState, email: str, name: str, phone: Optional[str],
              force: bool) -> None:
    """Create the first master and its root user (role ADMIN)."""
    app = state.app()
    if app.storage.count("master") > 0 and not force:
        raise AlreadyBootstrapped("store already holds a master; use --force")
    password = os.environ.get("CHEZ_BOOTSTRAP_PASSWORD")
    if not password:
        password = click.prompt("Root password", hide_input=True)
    validate_email(email)
    validate_password(password)
    master = new_master(app.clock())
    app.storage.insert("master", master)
    user = new_user(master["id"], role=Role.ADMIN, status=UserStatus.ACTIVE,
                    is_root=True)
    app.storage.insert("user", user)
    details = new_user_details(user["id"], name, email, phone,
                               app.hasher.hash(password), None)
    details["email_verified"] = True
    app.storage.insert("user_details", details)
    app.audit.emit("bootstrap", subject=user["id"], master_id=master["id"])
    state.emit({"master_id": master["id"], "user_id": user["id"]},
               f"master: {master['id']}\nroot user: {user['id']}")


# --- serve -------------------------------------------------------------------------


@cli.command()
@click.pass_obj
def serve(state: CliState) -> None:
    """Run the gateway, rotation scheduler and telemetry endpoints."""
    app = state.app()
    app.scheduler.start()
    server = HttpServer(app.gateway, app.config.host, app.config.port)
    click.echo(f"listening on {app.config.host}:{server.port}", err=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        app.close()


# --- permission catalog --------------------------------------------------------------


@cli.group()
def perm() -> None:
    """Permission catalog operations."""


@perm.command("load")
@click.argument("catalog_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def perm_load(state: CliState, catalog_file: str) -> None:
    """Replace the permission catalog from a JSON array file."""
    with open(catalog_file, encoding="utf-8") as f:
        text = f.read()
    count = state.app().rbac.load_permission_catalog(text)
    state.emit({"loaded": count}, f"loaded {count} permissions")


# --- group administration ---------------------------------------------------------------


@cli.group()
def group() -> None:
    """Group, membership and grant administration."""


@group.command("add")
@click.argument("name")
@click.option("--master", "master_id", required=True)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def group_add(state: CliState, name: str, master_id: str,
              as_user: Optional[str]) -> None:
    actor = _actor_for(state, as_user)
    row = state.app().rbac.upsert_group(name, master_id, actor)
    state.emit(row, f"group: {row['id']}")


@group.command("delete")
@click.argument("group_id")
@click.option("--master", "master_id", required=True)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def group_delete(state: CliState, group_id: str, master_id: str,
                 as_user: Optional[str]) -> None:
    actor = _actor_for(state, as_user)
    state.app().rbac.delete_group(group_id, master_id, actor)
    state.emit({"deleted": group_id}, f"deleted {group_id}")


@group.command("member")
@click.argument("action", type=click.Choice(["add", "remove"]))
@click.argument("group_id")
@click.argument("user_id")
@click.option("--master", "master_id", required=True)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def group_member(state: CliState, action: str, group_id: str, user_id: str,
                 master_id: str, as_user: Optional[str]) -> None:
    actor = _actor_for(state, as_user)
    state.app().rbac.modify_group_member(user_id, group_id, master_id, actor,
                                         add=action == "add")
    state.emit({"group_id": group_id, "user_id": user_id, "action": action},
               f"{action}: {user_id} {'->' if action == 'add' else '<-'} {group_id}")


@group.command("grant")
@click.argument("group_id")
@click.option("--module", required=True)
@click.option("--action", "perm_action", required=True)
@click.option("--tags", default="", help="Comma-separated tag list.")
@click.option("--as", "as_user", default=None)
@click.pass_obj
def group_grant(state: CliState, group_id: str, module: str, perm_action: str,
                tags: str, as_user: Optional[str]) -> None:
    """Attach a catalog permission (module/action) to a group."""
    app = state.app()
    actor = _actor_for(state, as_user)
    permission = app.rbac.find_permission(module, perm_action)
    if permission is None:
        raise ChezError(f"no catalog permission ({module}, {perm_action})")
    tag_list = [t for t in (s.strip() for s in tags.split(",")) if t]
    row = app.rbac.add_group_permission(group_id, permission["id"], actor,
                                        tags=tag_list)
    state.emit(row, f"grant: {row['id']} tags={row['tags']}")


# --- vault -------------------------------------------------------------------------------


@cli.group()
def vault() -> None:
    """Credential vault operations."""


@vault.command("store")
@click.option("--kind", required=True)
@click.option("--audience", required=True)
@click.option("--env", "environment", required=True)
@click.option("--interval", type=float, default=None,
              help="Scheduled rotation interval in seconds.")
@click.option("--length", type=int, default=32, show_default=True)
@click.option("--charset", default="alnum+symbols", show_default=True)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def vault_store(state: CliState, kind: str, audience: str, environment: str,
                interval: Optional[float], length: int, charset: str,
                as_user: Optional[str]) -> None:
    """Store a secret (read from CHEZ_SECRET or a hidden prompt)."""
    secret = os.environ.get("CHEZ_SECRET")
    if not secret:
        secret = click.prompt("Secret", hide_input=True)
    actor = _actor_for(state, as_user)
    policy = RotationPolicy(interval=interval, length=length, charset=charset)
    credential_id = state.app().vault.store_credential(
        kind, audience, environment, secret, policy, actor)
    state.emit({"credential_id": credential_id}, f"credential: {credential_id}")


@vault.command("get")
@click.argument("credential_id")
@click.option("--as", "as_user", default=None)
@click.pass_obj
def vault_get(state: CliState, credential_id: str,
              as_user: Optional[str]) -> None:
    """Retrieve a secret; requires an MFA proof token in CHEZ_MFA_PROOF."""
    actor = _actor_for(state, as_user)
    proof = os.environ.get("CHEZ_MFA_PROOF")
    secret = state.app().vault.retrieve_credential(credential_id, actor, proof)
    state.emit({"secret": secret}, secret)


@vault.command("rotate")
@click.argument("credential_id")
@click.option("--trigger", type=click.Choice(["EVENT", "SCHEDULED"]),
              default="EVENT", show_default=True)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def vault_rotate(state: CliState, credential_id: str, trigger: str,
                 as_user: Optional[str]) -> None:
    actor = _actor_for(state, as_user)
    version = state.app().vault.rotate_credential(credential_id, trigger=trigger,
                                                  actor=actor)
    state.emit({"credential_id": credential_id, "version": version},
               f"rotated {credential_id} to version {version}")


@vault.command("list")
@click.option("--audience", default=None)
@click.option("--env", "environment", default=None)
@click.option("--as", "as_user", default=None)
@click.pass_obj
def vault_list(state: CliState, audience: Optional[str],
               environment: Optional[str], as_user: Optional[str]) -> None:
    actor = _actor_for(state, as_user)
    rows = state.app().vault.list_credentials(actor, audience=audience,
                                              environment=environment)
    human = "\n".join(
        f"{r['id']} {r['kind']} {r['audience']}/{r['environment']} v{r['version']}"
        for r in rows) or "(none)"
    state.emit(rows, human)


# --- audit -------------------------------------------------------------------------------


@cli.group()
def audit() -> None:
    """Audit stream queries."""


@audit.command("query")
@click.option("--op", default=None)
@click.option("--actor", default=None)
@click.option("--subject", default=None)
@click.option("--credential", "credential_id", default=None)
@click.option("--limit", type=int, default=None)
@click.pass_obj
def audit_query(state: CliState, op: Optional[str], actor: Optional[str],
                subject: Optional[str], credential_id: Optional[str],
                limit: Optional[int]) -> None:
    """Stream matching audit records as JSON lines."""
    config = load_config(state.config_path)
    if config.audit_path == "-":
        raise ChezError("audit_path is stdout; point it at a file to query")
    filters = {"op": op, "actor": actor, "subject": subject,
               "credential_id": credential_id}
    emitted = 0
    for record in read_jsonl(config.audit_path):
        if match_filters(record, filters):
            click.echo(json.dumps(record, sort_keys=True))
            emitted += 1
            if limit is not None and emitted >= limit:
                break


# --- schema ------------------------------------------------------------------------------


@cli.group()
def schema() -> None:
    """Data model inspection."""


@schema.command("dump")
@click.pass_obj
def schema_dump_cmd(state: CliState) -> None:
    """Emit table definitions and constraints as JSON."""
    click.echo(json.dumps(schema_dump(), indent=2, sort_keys=True))


# --- entry point -------------------------------------------------------------------------


def main(argv: Optional[list[str]] = None) -> int:
    """Console entry point with the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except ChezError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
