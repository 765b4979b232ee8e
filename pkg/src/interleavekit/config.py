"""Declarative run configuration: one YAML file, env fallbacks, strict keys.

Precedence is env < file < flags; flag handling lives in the CLI. Unknown
keys anywhere in the file are rejected so typos fail loudly. The effective
configuration echoes at startup with secrets redacted.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .clients import ClientRole, ServiceEndpoint
from .guidance import GuidanceConfig
from .image_engine import ImageEngineConfig
from .orb import OrbConfig
from .store import MixSpec
from .video_engine import VideoEngineConfig

ENV_PREFIX = "IVK"


class ConfigError(ValueError):
    """Bad configuration file or values."""


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _build(cls, section: str, data: dict):
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    _check_keys(section, data, fields)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section}: {exc}") from exc


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 4
    endpoints: dict[ClientRole, ServiceEndpoint] = field(default_factory=dict)
    image_engine: ImageEngineConfig = field(default_factory=ImageEngineConfig)
    video_engine: VideoEngineConfig = field(default_factory=VideoEngineConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    mix: MixSpec | None = None

    def echo_dict(self) -> dict:
        """Effective config for the startup log, secrets redacted."""
        return {
            "seed": self.seed,
            "workers": self.workers,
            "endpoints": {
                role.value: {
                    "base_url": ep.base_url,
                    "api_key": "***" if ep.api_key else None,
                    "timeout": ep.timeout,
                    "max_retries": ep.max_retries,
                }
                for role, ep in sorted(self.endpoints.items(), key=lambda kv: kv[0].value)
            },
            "image_engine": dict(self.image_engine.__dict__),
            "video_engine": {
                **{
                    k: v
                    for k, v in self.video_engine.__dict__.items()
                    if k not in ("orb", "correspondence_prompt")
                },
                "orb": dict(self.video_engine.orb.__dict__),
            },
            "guidance": dict(self.guidance.__dict__),
            "mix": (
                {"seed": self.mix.seed, "sources": [list(s) for s in self.mix.sources]}
                if self.mix
                else None
            ),
        }


def endpoints_from_env(env: dict[str, str] | None = None) -> dict[ClientRole, ServiceEndpoint]:
    """Per-role URL/key overrides: IVK_<ROLE>_URL and IVK_<ROLE>_KEY."""
    env = env if env is not None else dict(os.environ)
    out: dict[ClientRole, ServiceEndpoint] = {}
    for role in ClientRole:
        url = env.get(f"{ENV_PREFIX}_{role.value.upper()}_URL")
        if url:
            out[role] = ServiceEndpoint(
                base_url=url, api_key=env.get(f"{ENV_PREFIX}_{role.value.upper()}_KEY")
            )
    return out


def load_run_config(
    path: str | Path | None, env: dict[str, str] | None = None
) -> RunConfig:
    config = RunConfig(endpoints=endpoints_from_env(env))
    if path is None:
        return config
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    _check_keys(
        "config",
        raw,
        {"seed", "workers", "endpoints", "image_engine", "video_engine", "guidance", "mix"},
    )
    if "seed" in raw:
        config.seed = int(raw["seed"])
    if "workers" in raw:
        config.workers = int(raw["workers"])
        if config.workers < 1:
            raise ConfigError("workers must be >= 1")
    for name, spec in (raw.get("endpoints") or {}).items():
        try:
            role = ClientRole(name)
        except ValueError:
            raise ConfigError(f"unknown endpoint role {name!r}") from None
        _check_keys(
            f"endpoints.{name}",
            spec,
            {"url", "api_key", "timeout", "max_retries", "backoff_base"},
        )
        if "url" not in spec:
            raise ConfigError(f"endpoints.{name} needs url")
        config.endpoints[role] = ServiceEndpoint(
            base_url=spec["url"],
            api_key=spec.get("api_key"),
            timeout=float(spec.get("timeout", 10.0)),
            max_retries=int(spec.get("max_retries", 3)),
            backoff_base=float(spec.get("backoff_base", 0.25)),
        )
    if "image_engine" in raw:
        config.image_engine = _build(ImageEngineConfig, "image_engine", raw["image_engine"])
    if "video_engine" in raw:
        section = dict(raw["video_engine"])
        orb_section = section.pop("orb", None)
        orb = _build(OrbConfig, "video_engine.orb", orb_section) if orb_section else OrbConfig()
        _check_keys(
            "video_engine",
            section,
            {"min_gap", "max_gap", "pairs_per_video", "llm_retry_limit", "rng_seed", "correspondence_prompt"},
        )
        try:
            config.video_engine = VideoEngineConfig(orb=orb, **section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid video_engine: {exc}") from exc
    if "guidance" in raw:
        config.guidance = _build(GuidanceConfig, "guidance", raw["guidance"])
    if "mix" in raw:
        section = raw["mix"]
        _check_keys("mix", section, {"seed", "sources"})
        sources = []
        for item in section.get("sources", []):
            _check_keys("mix.sources[]", item, {"id", "weight"})
            sources.append((str(item["id"]), float(item["weight"])))
        try:
            config.mix = MixSpec(sources=tuple(sources), seed=int(section.get("seed", 0)))
        except ValueError as exc:
            raise ConfigError(f"invalid mix: {exc}") from exc
    return config
