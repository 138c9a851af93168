"""Engine configuration with layered resolution.

Precedence, highest first: explicit flags, config file, environment
variables, built-in defaults. Environment variables use the field name
uppercased with a ``PATHTRACK_`` prefix, e.g. ``PATHTRACK_PRUNE_K``. Config
files are plain ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

ENV_PREFIX = "PATHTRACK_"

GENERATOR_KINDS = ("openai", "scripted")
EMBEDDER_KINDS = ("hash", "http")
PROMPT_MODES = ("zero_shot", "one_shot")
MERGE_ORDERS = ("path_first", "score_interleave")


class ConfigError(ValueError):
    """Raised for invalid or conflicting configuration."""


@dataclass
class EngineConfig:
    """All engine knobs with their default operating values."""

    generator_kind: str = "openai"
    generator_base_url: str | None = None
    generator_model: str | None = None
    generator_script: str | None = None
    embedder_kind: str = "hash"
    embedder_dim: int = 256
    embedder_base_url: str | None = None
    coref_threshold: float = 0.8
    coref_k: int = 5
    prune_k: int = 30
    max_hops: int = 2
    prompt_mode: str = "zero_shot"
    merge_order: str = "path_first"
    limit: int = 10
    second_stage_k: int = 10
    qa_docs: int = 5
    use_completion: bool = True
    use_expansion_goal: bool = True
    include_chain: bool = True
    concurrency: int = 1
    max_chunk_tokens: int = 512
    retries: int = 2
    templates_dir: str | None = None

    def validate(self) -> "EngineConfig":
        if self.generator_kind not in GENERATOR_KINDS:
            raise ConfigError(f"generator_kind must be one of {GENERATOR_KINDS}")
        if self.embedder_kind not in EMBEDDER_KINDS:
            raise ConfigError(f"embedder_kind must be one of {EMBEDDER_KINDS}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.merge_order not in MERGE_ORDERS:
            raise ConfigError(f"merge_order must be one of {MERGE_ORDERS}")
        if not (0.0 < self.coref_threshold <= 1.0):
            raise ConfigError("coref_threshold must be in (0, 1]")
        if self.coref_k < 0:
            raise ConfigError("coref_k must be >= 0")
        if self.prune_k < 0:
            raise ConfigError("prune_k must be >= 0 (0 disables pruning)")
        if not (1 <= self.max_hops <= 3):
            raise ConfigError("max_hops must be between 1 and 3")
        if self.limit < 1:
            raise ConfigError("limit must be >= 1")
        if self.second_stage_k < 1:
            raise ConfigError("second_stage_k must be >= 1")
        if self.qa_docs < 1:
            raise ConfigError("qa_docs must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")
        if self.max_chunk_tokens < 32:
            raise ConfigError("max_chunk_tokens must be >= 32")
        if self.retries < 0:
            raise ConfigError("retries must be >= 0")
        if self.embedder_dim < 8:
            raise ConfigError("embedder_dim must be >= 8")
        if self.generator_kind == "scripted" and not self.generator_script:
            raise ConfigError(
                "generator_kind 'scripted' needs generator_script pointing at a "
                "JSON response file"
            )
        return self

    def with_overrides(self, **overrides) -> "EngineConfig":
        """A copy with the given non-None fields replaced, re-validated."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(clean) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return dataclasses.replace(self, **clean).validate()

    def echo(self) -> dict:
        """Resolved values for traces and reports.

        Filesystem paths are left out so artifacts stay byte-identical when
        the same run happens from a different working directory.
        """
        skip = {"generator_script", "templates_dir"}
        out = {}
        for f in dataclasses.fields(self):
            if f.name in skip:
                continue
            out[f.name] = getattr(self, f.name)
        return out


_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _parse_value(name: str, raw: str, target_type) -> object:
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config value '{name}' must be a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(
            f"config value '{name}' must be a {target_type.__name__}, got {raw!r}"
        ) from None
    return raw


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for f in dataclasses.fields(EngineConfig):
        default = f.default
        if isinstance(default, bool):
            types[f.name] = bool
        elif isinstance(default, int):
            types[f.name] = int
        elif isinstance(default, float):
            types[f.name] = float
        else:
            types[f.name] = str
    return types


def parse_config_file(path: str | Path) -> dict:
    """Read ``key = value`` lines; unknown keys are an error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    types = _field_types()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = _parse_value(key, value, types[key])
    return values


def resolve_config(
    flags: Mapping[str, object] | None = None,
    config_file: str | Path | None = None,
    env: Mapping[str, str] | None = None,
) -> EngineConfig:
    """Layer defaults, environment, config file, and flags into one config."""
    env = os.environ if env is None else env
    types = _field_types()
    values: dict[str, object] = {}
    for name, target_type in types.items():
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            values[name] = _parse_value(env_key, env[env_key], target_type)
    if config_file is not None:
        values.update(parse_config_file(config_file))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown config field '{key}'")
        values[key] = value
    return EngineConfig(**values).validate()
