"""Runtime configuration: defaults, config file (TOML or JSON), and
environment overrides (env wins over file, file over defaults).

Secrets (signing key, vault master key) are never part of the config file
proper; the file only points at an env var or key file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Optional

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class AppConfig:
    storage_path: Optional[str] = None  # None -> in-memory store
    signing_key_env: str = "CHEZ_SIGNING_KEY"
    signing_key_file: Optional[str] = None
    vault_key_env: str = "CHEZ_VAULT_KEY"
    vault_key_file: Optional[str] = None
    mail_adapter: str = "memory"  # memory | smtp
    smtp_host: str = "localhost"
    smtp_port: int = 25
    mail_sender: str = "no-reply@chez.local"
    captcha_enabled: bool = False
    captcha_expected: str = "captcha-ok"
    password_hash_cost: int = 10
    mfa_force_threshold: float = 0.7
    rotation_tick_seconds: float = 1.0
    audit_path: str = "-"
    decision_log_path: str = "-"
    traffic_log_path: str = "-"
    base_url: str = "http://localhost:8080"
    host: str = "127.0.0.1"
    port: int = 8080
    pip_cache_ttl: float = 0.0
    monitor_window_seconds: float = 10.0
    monitor_alpha: float = 0.3
    monitor_k: float = 3.0
    monitor_warmup: int = 10
    token_ttls: dict = field(default_factory=dict)  # token type -> seconds
    routes: list = field(default_factory=list)  # protected route bindings


_ENV_OVERRIDES: dict[str, tuple[str, type]] = {
    "CHEZ_STORAGE_PATH": ("storage_path", str),
    "CHEZ_AUDIT_PATH": ("audit_path", str),
    "CHEZ_DECISION_LOG_PATH": ("decision_log_path", str),
    "CHEZ_TRAFFIC_LOG_PATH": ("traffic_log_path", str),
    "CHEZ_BASE_URL": ("base_url", str),
    "CHEZ_HOST": ("host", str),
    "CHEZ_PORT": ("port", int),
    "CHEZ_CAPTCHA_ENABLED": ("captcha_enabled", bool),
    "CHEZ_MFA_FORCE_THRESHOLD": ("mfa_force_threshold", float),
    "CHEZ_ROTATION_TICK_SECONDS": ("rotation_tick_seconds", float),
    "CHEZ_MAIL_ADAPTER": ("mail_adapter", str),
    "CHEZ_PIP_CACHE_TTL": ("pip_cache_ttl", float),
}

_TRUTHY = {"1", "true", "yes", "on"}


def _parse_env(value: str, kind: type) -> Any:
    if kind is bool:
        return value.strip().lower() in _TRUTHY
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"bad environment value {value!r}: {exc}") from None


def load_config(path: Optional[str] = None,
                env: Optional[Mapping[str, str]] = None) -> AppConfig:
    env = os.environ if env is None else env
    path = path or env.get("CHEZ_CONFIG")
    data: dict[str, Any] = {}
    if path:
        data = _read_file(path)
    known = {f.name for f in fields(AppConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(
            f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    config = AppConfig(**data)
    for var, (attr, kind) in _ENV_OVERRIDES.items():
        if var in env:
            setattr(config, attr, _parse_env(env[var], kind))
    return config


def _read_file(path: str) -> dict:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.endswith(".toml"):
        try:
            return tomllib.loads(raw.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None


def resolve_signing_key(config: AppConfig,
                        env: Optional[Mapping[str, str]] = None) -> bytes:
    material = _key_material(config.signing_key_env, config.signing_key_file, env)
    if material is None:
        raise ConfigError(
            f"signing key not configured: set {config.signing_key_env} or "
            "signing_key_file")
    return material


def resolve_vault_key(config: AppConfig,
                      env: Optional[Mapping[str, str]] = None) -> bytes:
    material = _key_material(config.vault_key_env, config.vault_key_file, env)
    if material is None:
        raise ConfigError(
            f"vault master key not configured: set {config.vault_key_env} or "
            "vault_key_file")
    # passphrase of any length becomes the 32-byte AEAD key
    return hashlib.sha256(material).digest()


def _key_material(env_name: str, file_path: Optional[str],
                  env: Optional[Mapping[str, str]]) -> Optional[bytes]:
    env = os.environ if env is None else env
    value = env.get(env_name)
    if value:
        return value.encode()
    if file_path:
        try:
            with open(file_path, "rb") as f:
                return f.read().strip()
        except OSError as exc:
            raise ConfigError(f"cannot read key file {file_path}: {exc}") from None
    return None
