"""
Client configuration: defaults, key-value files, environment overrides
"""

import dataclasses
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "CIPOLLINO_"


@dataclasses.dataclass(frozen=True)
class ClientConfig:
    """Tunables shared by the client models"""

    pool_target: int = 4
    candidate_budget: int = 64
    feed_interval_seconds: int = 3600
    guard_list_size: int = 3
    rng_seed: Optional[int] = None
    dirty_timeout_seconds: int = 600
    port_history_seconds: int = 3600
    circuits_per_port: int = 2
    max_resample: int = 100
    pin_guard_list: bool = False

    def __post_init__(self):
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if field.name in ("rng_seed", "pin_guard_list"):
                continue
            if value <= 0:
                raise ConfigError(f"{field.name} must be positive, got {value}")

    def with_overrides(self, overrides: Mapping[str, str]) -> "ClientConfig":
        """Return a copy with string-valued overrides applied"""
        return dataclasses.replace(self, **_coerce(overrides))

    def as_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(ClientConfig)}


def _coerce(raw: Mapping[str, Optional[str]]) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key, text in raw.items():
        name = key.strip().lower()
        if name not in _FIELDS:
            raise ConfigError(f"Unknown configuration key: {key}")
        if text is None or text.strip() == "":
            if name == "rng_seed":
                values[name] = None
                continue
            raise ConfigError(f"Missing value for {key}")
        text = text.strip()
        if name == "pin_guard_list":
            lowered = text.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigError(f"{key} must be a boolean, got {text!r}")
            values[name] = lowered in ("1", "true", "yes")
            continue
        try:
            values[name] = int(text)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {text!r}") from None
    return values


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Parse ``key=value`` strings given on the command line"""
    overrides: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like key=value: {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, str]] = None,
    use_environment: bool = True,
) -> ClientConfig:
    """Build a ClientConfig from defaults, file, environment and overrides"""
    config = ClientConfig()

    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Configuration file not found: {path}")
        file_values = dotenv_values(path)
        config = config.with_overrides(file_values)
        logger.info("loaded configuration from %s (%d keys)", path, len(file_values))

    if use_environment:
        load_dotenv()
        env_values = {}
        for name in _FIELDS:
            value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if value is not None:
                env_values[name] = value
        if env_values:
            config = config.with_overrides(env_values)

    if overrides:
        config = config.with_overrides(overrides)
    return config


def render_config(config: ClientConfig) -> str:
    """Render a configuration as a key-value file"""
    lines = ["# cipollino client configuration"]
    for name, value in config.as_dict().items():
        if value is None:
            lines.append(f"# {name}=")
        elif isinstance(value, bool):
            lines.append(f"{name}={'true' if value else 'false'}")
        else:
            lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
