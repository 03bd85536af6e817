"""Central request entry point: route matching, bearer-token validation,
policy enforcement, response tag-filtering, and traffic logging.

Ordering contract: authentication failures (401) are decided before the
policy engine is ever consulted (403), and no backend bound through a
RouteBinding runs without a permit decision. Every request, including the
failing ones, appends exactly one traffic-log entry before the response is
returned.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from .audit import AuditSink
from .errors import (
    AlreadyBootstrapped,
    AuthorizationError,
    CaptchaError,
    ChezError,
    ConstraintViolation,
    DuplicatePrefix,
    EnvironmentMismatch,
    ForeignKeyViolation,
    InvalidCredentials,
    MembersPresentError,
    MfaRequired,
    MfaValidationError,
    NoPendingChallenge,
    NotAuthorized,
    OperationDisabled,
    ParseError,
    PermissionsPresentError,
    TokenValidationError,
    UnknownCredential,
    UnknownIdp,
    UnknownRecord,
    UnknownUser,
    UserExistsError,
    ValidationError,
    SignatureInvalidError,
    ClaimMappingError,
)
from .policy import AccessRequest, Decision, DecisionPoint, ReasonCode, filter_resources


@dataclass(frozen=True)
class RouteBinding:
    path_prefix: str
    service: str
    resource_kind: str
    action_map: Mapping[str, str]  # HTTP method -> policy action
    app: str


@dataclass
class GatewayRequest:
    method: str
    path: str
    headers: Mapping[str, str] = field(default_factory=dict)
    body: Any = None
    query: Mapping[str, str] = field(default_factory=dict)

    def header(self, name: str) -> Optional[str]:
        for key, value in self.headers.items():
            if key.lower() == name.lower():
                return value
        return None


@dataclass
class GatewayResponse:
    status: int
    body: Any = None
    headers: dict = field(default_factory=dict)
    # a backend declaring a list-of-resource payload opts into tag filtering;
    # single marks a one-resource lookup that 403s when filtered away
    resources: Optional[list] = None
    single: bool = False


@dataclass(frozen=True)
class RequestContext:
    actor: Mapping[str, Any]
    decision: Decision


ServiceHandler = Callable[[GatewayRequest, RequestContext], GatewayResponse]
PublicHandler = Callable[[GatewayRequest], GatewayResponse]

_STATUS_BY_ERROR: list[tuple[type, int]] = [
    (InvalidCredentials, 401),
    (TokenValidationError, 401),
    (MfaValidationError, 401),
    (MfaRequired, 403),
    (NotAuthorized, 403),
    (AuthorizationError, 403),
    (EnvironmentMismatch, 403),
    (SignatureInvalidError, 403),
    (OperationDisabled, 405),
    (UserExistsError, 409),
    (ConstraintViolation, 409),
    (MembersPresentError, 409),
    (PermissionsPresentError, 409),
    (NoPendingChallenge, 409),
    (AlreadyBootstrapped, 409),
    (ForeignKeyViolation, 409),
    (UnknownUser, 404),
    (UnknownIdp, 404),
    (UnknownCredential, 404),
    (UnknownRecord, 404),
    (ParseError, 400),
    (ClaimMappingError, 400),
    (ValidationError, 400),
    (ChezError, 400),
]


def error_response(exc: ChezError) -> GatewayResponse:
    status = next(code for klass, code in _STATUS_BY_ERROR
                  if isinstance(exc, klass))
    body = {"error": exc.code}
    if isinstance(exc, ValidationError):
        body["field"] = exc.field
    return GatewayResponse(status=status, body=body)


class Gateway:
    def __init__(self, pdp: DecisionPoint, token_actor: Callable[[str], dict],
                 traffic: Optional[AuditSink] = None,
                 clock: Callable[[], float] = time.time):
        """token_actor validates a serialized ACCESS token into actor
        attributes (raising TokenValidationError otherwise)."""
        self.pdp = pdp
        self.token_actor = token_actor
        self.traffic = traffic
        self.clock = clock
        self._routes: dict[str, tuple[RouteBinding, ServiceHandler]] = {}
        self._public: dict[tuple[str, str], PublicHandler] = {}
        self._lock = threading.Lock()

    # -- registration -----------------------------------------------------------

    def register_route(self, binding: RouteBinding, handler: ServiceHandler) -> None:
        with self._lock:
            if binding.path_prefix in self._routes:
                raise DuplicatePrefix(binding.path_prefix)
            self._routes = dict(self._routes)
            self._routes[binding.path_prefix] = (binding, handler)

    def register_public(self, method: str, path: str, handler: PublicHandler) -> None:
        with self._lock:
            key = (method.upper(), path)
            if key in self._public:
                raise DuplicatePrefix(f"{method} {path}")
            self._public = dict(self._public)
            self._public[key] = handler

    # -- request handling ----------------------------------------------------------

    def handle(self, request: GatewayRequest) -> GatewayResponse:
        started = time.perf_counter()
        subject = "anonymous"
        decision_summary = None
        response = GatewayResponse(500, {"error": "INTERNAL"})
        try:
            public = self._public.get((request.method.upper(), request.path))
            if public is not None:
                response = self._run_public(public, request)
                return response
            matched = self._match_route(request.path)
            if matched is None:
                response = GatewayResponse(404, {"error": "NO_ROUTE"})
                return response
            binding, handler = matched
            bearer = self._bearer(request)
            if bearer is None:
                response = GatewayResponse(401, {"error": "TOKEN_MISSING"})
                return response
            try:
                actor = self.token_actor(bearer)
            except TokenValidationError as exc:
                response = GatewayResponse(401, {"error": exc.code})
                return response
            subject = actor["user_id"]
            action = binding.action_map.get(request.method.upper())
            if action is None:
                response = GatewayResponse(405, {"error": "METHOD_NOT_ALLOWED"})
                return response
            decision = self.pdp.decide(AccessRequest(
                subject=subject,
                resource_kind=binding.resource_kind,
                action=action,
                app=binding.app,
                context={"time": self.clock(), "path": request.path},
            ))
            decision_summary = self._summarize(decision)
            if not decision.permitted:
                response = GatewayResponse(
                    403, {"reason": decision.reason_code.value})
                return response
            try:
                response = handler(request, RequestContext(actor, decision))
            except ChezError as exc:
                response = error_response(exc)
                return response
            except Exception:
                response = GatewayResponse(502, {"error": "BACKEND_FAILURE"})
                return response
            response = self._apply_filter(response, decision)
            return response
        finally:
            self._log(request, subject, response, started, decision_summary)

    # -- internals --------------------------------------------------------------------

    def _run_public(self, handler: PublicHandler,
                    request: GatewayRequest) -> GatewayResponse:
        try:
            return handler(request)
        except ChezError as exc:
            return error_response(exc)
        except Exception:
            return GatewayResponse(500, {"error": "INTERNAL"})

    def _match_route(self, path: str) -> Optional[tuple[RouteBinding, ServiceHandler]]:
        best = None
        for prefix, entry in self._routes.items():
            if path == prefix or path.startswith(prefix.rstrip("/") + "/"):
                if best is None or len(prefix) > len(best[0].path_prefix):
                    best = entry
        return best

    @staticmethod
    def _bearer(request: GatewayRequest) -> Optional[str]:
        header = request.header("authorization")
        if not header or not header.startswith("Bearer "):
            return None
        token = header[len("Bearer "):].strip()
        return token or None

    @staticmethod
    def _apply_filter(response: GatewayResponse, decision: Decision) -> GatewayResponse:
        if response.resources is None:
            return response
        kept = filter_resources(response.resources, decision.tags,
                                decision.allow_untagged)
        if response.single:
            if not kept:
                return GatewayResponse(403,
                                       {"reason": ReasonCode.TAG_MISMATCH.value})
            return GatewayResponse(response.status, kept[0], response.headers)
        return GatewayResponse(response.status, {"resources": kept},
                               response.headers)

    @staticmethod
    def _summarize(decision: Decision) -> str:
        if decision.permitted:
            return "permit"
        return f"deny:{decision.reason_code.value}"

    def _log(self, request: GatewayRequest, subject: str,
             response: GatewayResponse, started: float,
             decision_summary: Optional[str]) -> None:
        if self.traffic is None:
            return
        self.traffic.append({
            "time": self.clock(),
            "method": request.method.upper(),
            "path": request.path,
            "subject": subject,
            "status": response.status,
            "latency_ms": round((time.perf_counter() - started) * 1000.0, 3),
            "decision": decision_summary,
        })
