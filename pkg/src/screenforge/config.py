"""Runtime settings: environment variables plus an optional INI config file.

The de-identification key comes only from SCREENFORGE_DEID_KEY (64 hex chars).
There is no built-in default key; a missing or malformed key is a startup
error so the platform can never run in a silently insecure mode.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ENV_DEID_KEY = "SCREENFORGE_DEID_KEY"
ENV_API_TOKEN = "SCREENFORGE_API_TOKEN"
ENV_DATA_ROOT = "SCREENFORGE_DATA_ROOT"


@dataclass(frozen=True)
class EligibilityRules:
    age_min: int = 50
    age_max: int = 80
    min_pack_years: float = 20.0
    max_years_since_quit: float = 15.0
    ruleset_version: str = "lung-screening-default-1"


@dataclass(frozen=True)
class Settings:
    data_root: Path
    deid_key: bytes
    api_token: str | None = None
    reader_token: str | None = None
    expert_token: str | None = None
    host: str = "127.0.0.1"
    port: int = 8321
    follow_up_days: int = 365
    quiet_period_seconds: float = 5.0
    poll_interval_seconds: float = 1.0
    retry_horizon: int = 1000
    idempotency_ttl_hours: float = 24.0
    cors_origins: tuple[str, ...] = ("*",)
    eligibility: EligibilityRules = field(default_factory=EligibilityRules)
    policy_path: Path | None = None


def _parse_key(raw: str) -> bytes:
    raw = raw.strip()
    if len(raw) != 64:
        raise ConfigError(
            f"{ENV_DEID_KEY} must be 64 hex characters (32 bytes), got {len(raw)}")
    try:
        return bytes.fromhex(raw)
    except ValueError:
        raise ConfigError(f"{ENV_DEID_KEY} is not valid hex") from None


def load_settings(data_root: "Path | str | None" = None,
                  config_path: "Path | str | None" = None,
                  env: "dict | None" = None) -> Settings:
    env = os.environ if env is None else env
    root = data_root or env.get(ENV_DATA_ROOT)
    if not root:
        raise ConfigError(
            f"no data root: pass --data-root or set {ENV_DATA_ROOT}")
    raw_key = env.get(ENV_DEID_KEY)
    if not raw_key:
        raise ConfigError(
            f"{ENV_DEID_KEY} is not set; refusing to start without a "
            "de-identification key (there is no default key)")
    values: dict = {
        "data_root": Path(root),
        "deid_key": _parse_key(raw_key),
        "api_token": env.get(ENV_API_TOKEN) or None,
    }
    rules: dict = {}
    if config_path is not None:
        cfg = configparser.ConfigParser()
        read = cfg.read(str(config_path))
        if not read:
            raise ConfigError(f"config file not found: {config_path}")
        try:
            if cfg.has_section("server"):
                s = cfg["server"]
                values["host"] = s.get("host", Settings.host)
                values["port"] = s.getint("port", Settings.port)
                raw_origins = s.get("cors_origins", "")
                if raw_origins:
                    values["cors_origins"] = tuple(
                        o.strip() for o in raw_origins.split(",") if o.strip())
            if cfg.has_section("workflow"):
                w = cfg["workflow"]
                values["follow_up_days"] = w.getint("follow_up_days",
                                                    Settings.follow_up_days)
                values["quiet_period_seconds"] = w.getfloat(
                    "quiet_period_seconds", Settings.quiet_period_seconds)
                values["poll_interval_seconds"] = w.getfloat(
                    "poll_interval_seconds", Settings.poll_interval_seconds)
            if cfg.has_section("auth"):
                a = cfg["auth"]
                values["reader_token"] = a.get("reader_token") or None
                values["expert_token"] = a.get("expert_token") or None
            if cfg.has_section("eligibility"):
                e = cfg["eligibility"]
                rules["age_min"] = e.getint("age_min", EligibilityRules.age_min)
                rules["age_max"] = e.getint("age_max", EligibilityRules.age_max)
                rules["min_pack_years"] = e.getfloat(
                    "min_pack_years", EligibilityRules.min_pack_years)
                rules["max_years_since_quit"] = e.getfloat(
                    "max_years_since_quit", EligibilityRules.max_years_since_quit)
                rules["ruleset_version"] = e.get(
                    "ruleset_version", EligibilityRules.ruleset_version)
            if cfg.has_section("deid") and cfg["deid"].get("policy_path"):
                values["policy_path"] = Path(cfg["deid"]["policy_path"])
        except ValueError as err:
            raise ConfigError(f"bad value in config file: {err}") from None
    values["eligibility"] = EligibilityRules(**rules)
    return Settings(**values)
