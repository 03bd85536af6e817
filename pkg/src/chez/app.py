"""Application assembly: builds every subsystem from one AppConfig and
mounts the HTTP surface on the gateway.

Three kinds of routes:
  * public flows (register, verify, login, telemetry, ...) need no token;
  * self-service routes (profile, address, MFA toggles) need a valid
    bearer ACCESS token but act only on the caller;
  * protected service routes (RouteBindings from config) go through the
    full enforcement pipeline: token, decision, tag filtering.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .audit import AuditLog, AuditSink, JsonLinesSink, MemorySink
from .authn import AuthnService, MfaChallenge, TokenPair
from .config import AppConfig, resolve_signing_key, resolve_vault_key
from .errors import MalformedEvent, UnknownRecord, ValidationError
from .gateway import Gateway, GatewayRequest, GatewayResponse, RequestContext, RouteBinding
from .hashing import PasswordHashingStrategy, Pbkdf2Strategy
from .identity import IdentityService, RegistrationInput, StaticCaptchaVerifier
from .mail import InMemoryMailSink, MailClient, SmtpMailClient
from .mfa import MfaService
from .model import new_resource
from .monitor import SessionMonitor, TelemetryEvent
from .policy import AttributeCollector, DecisionPoint, PolicyStore
from .rbac import RbacService
from .storage import BaseStorage, open_storage
from .tokens import TokenService, TokenType
from .vault import RotationScheduler, Vault


@dataclass
class ChezApp:
    config: AppConfig
    clock: Callable[[], float]
    storage: BaseStorage
    tokens: TokenService
    hasher: PasswordHashingStrategy
    mail: MailClient
    audit: AuditLog
    audit_sink: AuditSink
    decision_log: AuditLog
    traffic_sink: AuditSink
    monitor: SessionMonitor
    identity: IdentityService
    mfa: MfaService
    authn: AuthnService
    policy_store: PolicyStore
    pip: AttributeCollector
    pdp: DecisionPoint
    rbac: RbacService
    vault: Vault
    scheduler: RotationScheduler
    gateway: Gateway

    def close(self) -> None:
        self.scheduler.stop()
        self.storage.close()


def _sink_for(path: str) -> AuditSink:
    return MemorySink() if path == ":memory:" else JsonLinesSink(path)


def build_app(config: AppConfig, *,
              clock: Callable[[], float] = time.time,
              signing_key: Optional[bytes] = None,
              vault_key: Optional[bytes] = None,
              hasher: Optional[PasswordHashingStrategy] = None,
              mail: Optional[MailClient] = None,
              audit_sink: Optional[AuditSink] = None,
              decision_sink: Optional[AuditSink] = None,
              traffic_sink: Optional[AuditSink] = None) -> ChezApp:
    """Wire the full server. Keyword overrides exist so tests can inject
    fakes; production callers pass only the config."""
    signing_key = signing_key or resolve_signing_key(config)
    vault_key = vault_key or resolve_vault_key(config)
    storage = open_storage(config.storage_path)
    hasher = hasher or Pbkdf2Strategy(config.password_hash_cost)
    if mail is None:
        mail = (SmtpMailClient(config.smtp_host, config.smtp_port,
                               config.mail_sender)
                if config.mail_adapter == "smtp" else InMemoryMailSink())
    audit_sink = audit_sink or _sink_for(config.audit_path)
    decision_sink = decision_sink or _sink_for(config.decision_log_path)
    traffic_sink = traffic_sink or _sink_for(config.traffic_log_path)

    ttls = {TokenType(name): seconds for name, seconds in config.token_ttls.items()}
    tokens = TokenService(signing_key, clock=clock, ttls=ttls)
    audit = AuditLog(audit_sink, clock)
    decision_log = AuditLog(decision_sink, clock)
    captcha = StaticCaptchaVerifier(config.captcha_expected)
    monitor = SessionMonitor(
        window_seconds=config.monitor_window_seconds, alpha=config.monitor_alpha,
        k=config.monitor_k, warmup=config.monitor_warmup, audit=audit)
    identity = IdentityService(storage, tokens, mail, hasher, captcha, audit,
                               clock=clock, base_url=config.base_url)
    mfa = MfaService(storage, mail, hasher, clock=clock)
    authn = AuthnService(storage, tokens, mfa, mail, hasher, captcha, monitor,
                         audit, clock=clock,
                         mfa_force_threshold=config.mfa_force_threshold)
    policy_store = PolicyStore(storage)
    pip = AttributeCollector(storage, cache_ttl=config.pip_cache_ttl, clock=clock)
    pdp = DecisionPoint(policy_store, pip, decision_log=decision_log, clock=clock)
    rbac = RbacService(storage, policy_store, audit=audit)
    vault = Vault(storage, vault_key, pdp, tokens, audit, clock=clock)
    scheduler = RotationScheduler(vault, tick_seconds=config.rotation_tick_seconds)
    gateway = Gateway(pdp, authn.actor_from_access_token, traffic=traffic_sink,
                      clock=clock)

    app = ChezApp(config=config, clock=clock, storage=storage, tokens=tokens,
                  hasher=hasher, mail=mail, audit=audit, audit_sink=audit_sink,
                  decision_log=decision_log, traffic_sink=traffic_sink,
                  monitor=monitor, identity=identity, mfa=mfa, authn=authn,
                  policy_store=policy_store, pip=pip, pdp=pdp, rbac=rbac,
                  vault=vault, scheduler=scheduler, gateway=gateway)
    _mount_routes(app)
    return app


# --- route handlers --------------------------------------------------------------


def _body(request: GatewayRequest) -> dict:
    if request.body is None:
        return {}
    if not isinstance(request.body, dict):
        raise ValidationError("body", "expected a JSON object")
    return request.body


def _pair_body(result: TokenPair | MfaChallenge) -> dict:
    if isinstance(result, TokenPair):
        return {"access": result.access, "refresh": result.refresh}
    return {"mfa_token": result.mfa_token, "channel": result.channel,
            "forced": result.forced}


def _mount_routes(app: ChezApp) -> None:
    gateway = app.gateway
    captcha_enabled = app.config.captcha_enabled

    # -- public identity flows ----------------------------------------------------

    def register(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        data = RegistrationInput(
            name=body.get("name", ""), email=body.get("email", ""),
            phone=body.get("phone", ""), password=body.get("password", ""),
            dob=body.get("dob", ""),
            captcha_response=body.get("captcha_response"))
        result = app.identity.register_user(data, captcha_enabled)
        return GatewayResponse(201, result)

    def verify_email(request: GatewayRequest) -> GatewayResponse:
        token = request.query.get("token", "")
        app.identity.verify_email(token)
        return GatewayResponse(200, {"verified": True})

    def forgot_password(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        app.identity.request_password_reset(body.get("email", ""),
                                            body.get("dob", ""))
        # generic response regardless of whether the pair matched
        return GatewayResponse(202, {"status": "ok"})

    def reset_password(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        app.identity.reset_password(body.get("token", ""),
                                    body.get("new_password", ""))
        return GatewayResponse(200, {"status": "ok"})

    def login(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        result = app.authn.login(
            body.get("identifier", ""), body.get("password", ""),
            captcha_response=body.get("captcha_response"),
            captcha_enabled=captcha_enabled,
            context={k: body[k] for k in ("device_id", "source") if k in body})
        return GatewayResponse(200, _pair_body(result))

    def mfa_complete(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        pair = app.authn.complete_mfa(body.get("mfa_token", ""),
                                      str(body.get("otp", "")))
        return GatewayResponse(200, _pair_body(pair))

    def token_refresh(request: GatewayRequest) -> GatewayResponse:
        body = _body(request)
        pair = app.authn.refresh(body.get("refresh", ""))
        return GatewayResponse(200, _pair_body(pair))

    gateway.register_public("POST", "/register", register)
    gateway.register_public("GET", "/verify-email", verify_email)
    gateway.register_public("POST", "/forgot-password", forgot_password)
    gateway.register_public("POST", "/reset-password", reset_password)
    gateway.register_public("POST", "/login", login)
    gateway.register_public("POST", "/mfa/complete", mfa_complete)
    gateway.register_public("POST", "/token/refresh", token_refresh)

    # -- telemetry ------------------------------------------------------------------

    def telemetry(request: GatewayRequest) -> GatewayResponse:
        if isinstance(request.body, list):
            events = request.body
        elif isinstance(request.body, str):
            events = [json.loads(line) for line in request.body.splitlines()
                      if line.strip()]
        elif isinstance(request.body, dict):
            events = [request.body]
        else:
            raise MalformedEvent("telemetry body must be JSON lines or array")
        accepted = 0
        rejected = []
        for index, raw in enumerate(events):
            try:
                app.monitor.ingest(TelemetryEvent.from_dict(raw))
                accepted += 1
            except MalformedEvent as exc:
                rejected.append({"index": index, "error": str(exc)})
        return GatewayResponse(200, {"accepted": accepted, "rejected": rejected})

    def kpi(request: GatewayRequest) -> GatewayResponse:
        site = request.query.get("site", "")
        window = request.query.get("window")
        if not site or window is None:
            raise ValidationError("site" if not site else "window")
        snapshot = app.monitor.kpi(site, float(window))
        if snapshot is None:
            raise UnknownRecord(f"no closed window {window} for {site}")
        return GatewayResponse(200, snapshot.as_dict())

    gateway.register_public("POST", "/telemetry", telemetry)
    gateway.register_public("GET", "/kpi", kpi)

    # -- self-service (bearer token, acts on the caller) ----------------------------

    def authed(handler):
        def wrapper(request: GatewayRequest) -> GatewayResponse:
            header = request.header("authorization") or ""
            if not header.startswith("Bearer "):
                return GatewayResponse(401, {"error": "TOKEN_MISSING"})
            actor = app.authn.actor_from_access_token(header[len("Bearer "):])
            return handler(request, actor)
        return wrapper

    def patch_profile(request: GatewayRequest, actor: dict) -> GatewayResponse:
        body = _body(request)
        target = body.pop("user_id", None) or actor["user_id"]
        updated = app.identity.update_profile(target, body, actor)
        updated.pop("password_hash", None)
        updated.pop("otp", None)
        return GatewayResponse(200, updated)

    def put_address(request: GatewayRequest, actor: dict) -> GatewayResponse:
        body = _body(request)
        target = body.pop("user_id", None) or actor["user_id"]
        row = app.identity.upsert_address(target, body, actor)
        return GatewayResponse(200, row)

    def delete_address(request: GatewayRequest, actor: dict) -> GatewayResponse:
        body = _body(request)
        # always raises OperationDisabled; mapped to 405 by the gateway
        app.identity.delete_address(actor["user_id"], body.get("id", ""), actor)
        return GatewayResponse(405, {"error": "OPERATION_DISABLED"})

    def mfa_request(request: GatewayRequest, actor: dict) -> GatewayResponse:
        body = _body(request)
        result = app.mfa.request_toggle(actor["user_id"], body.get("type", ""))
        return GatewayResponse(200, result)

    def mfa_confirm(request: GatewayRequest, actor: dict) -> GatewayResponse:
        body = _body(request)
        result = app.mfa.confirm_toggle(actor["user_id"],
                                        str(body.get("otp", "")),
                                        bool(body.get("enable", True)))
        return GatewayResponse(200, result)

    gateway.register_public("PATCH", "/profile", authed(patch_profile))
    gateway.register_public("PUT", "/address", authed(put_address))
    gateway.register_public("DELETE", "/address", authed(delete_address))
    gateway.register_public("POST", "/mfa/request", authed(mfa_request))
    gateway.register_public("POST", "/mfa/confirm", authed(mfa_confirm))

    # -- protected service routes ------------------------------------------------------

    services = {"resources": resource_service(app.storage)}
    for raw in app.config.routes:
        binding = RouteBinding(
            path_prefix=raw["path_prefix"], service=raw["service"],
            resource_kind=raw["resource_kind"],
            action_map={k.upper(): v for k, v in raw["action_map"].items()},
            app=raw["app"])
        handler = services.get(binding.service)
        if handler is None:
            raise ValidationError("service", f"unknown service {binding.service}")
        gateway.register_route(binding, handler)


def resource_service(storage: BaseStorage):
    """Built-in backend serving tagged resource documents per master.

    GET <prefix>        -> list (tag-filtered by the gateway)
    GET <prefix>/<id>   -> single resource (403 TAG_MISMATCH when filtered)
    POST <prefix>       -> create under the caller's master
    """

    def handler(request: GatewayRequest, ctx: RequestContext) -> GatewayResponse:
        master_id = ctx.actor.get("master_id")
        if request.method.upper() == "POST":
            body = request.body if isinstance(request.body, dict) else {}
            row = new_resource(master_id, body.get("kind", "document"),
                               body.get("tags", []), body.get("payload"))
            storage.insert("resource", row)
            return GatewayResponse(201, row)
        tail = request.path.rstrip("/").rsplit("/", 1)[-1]
        rows = storage.find("resource", master_id=master_id)
        by_id = {r["id"]: r for r in rows}
        if tail in by_id:
            return GatewayResponse(200, resources=[by_id[tail]], single=True)
        return GatewayResponse(200, resources=rows)

    return handler
