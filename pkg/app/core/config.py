"""
Application configuration and settings.

Process-level settings come from the environment (prefix ``LFFN_``) via
pydantic-settings; experiment settings come from the sectioned
``default.cfg`` file and are validated into a ``RunConfig``.
"""

import configparser
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError
from app.core.storage import atomic_write_text
from app.schemas.config import RunConfig

CONFIG_FORMAT_VERSION = 1
PROFILE_PREFIX = "profile:"
PROFILE_ALIASES = {"full-scale": "paper-scale"}
_RUN_KEYS = ("seed", "mode")


class Settings(BaseSettings):
    """
    Application settings.

    Attributes:
        app_name: Name of the application
        app_version: Current version
        app_description: Short description of the service
        host: Host address the HTTP API binds to
        port: Port the HTTP API binds to
        output_dir: Directory the CLI writes datasets, checkpoints and reports to
        config_path: Run configuration file used when none is given
        checkpoint_path: Checkpoint loaded by the HTTP API at startup
        num_threads: Torch intra-op threads (1 keeps runs bit-reproducible)
        dtype: Floating point type of all tensors (float64 or float32)
        log_level: Root logging level
    """

    # Application metadata
    app_name: str = "LFFN Detection Bench"
    app_version: str = "1.0.0"
    app_description: str = (
        "Layer-weakening feature fusion detector: kernels, fusion pyramid, "
        "adaptive quantization, stochastic NMS, VOC evaluation and cost counting"
    )

    # Server settings
    host: str = "0.0.0.0"
    port: int = 8000

    # Paths
    output_dir: Path = Path("outputs")
    config_path: Path = Path("default.cfg")
    checkpoint_path: Optional[Path] = None

    # Numerics
    num_threads: int = 1
    dtype: str = "float64"

    # Environment
    log_level: str = "INFO"
    environment: str = "production"
    debug: bool = False

    model_config = SettingsConfigDict(
        env_prefix="LFFN_", env_file=".env", case_sensitive=False, extra="ignore"
    )


settings = Settings()


def parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _format_value(value: Any) -> str:
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, str):
        return value
    return json.dumps(value)


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override '{dotted}' does not name a section")
    node[parts[-1]] = value


def load_run_config(
    path: Optional[Path] = None,
    profile: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: Config file; the built-in defaults are used when it is None
        profile: Name of a ``[profile:<name>]`` section to apply on top
        overrides: Dotted-key overrides (``training.iterations``), applied last

    Returns:
        The validated RunConfig

    Raises:
        ConfigurationError: Unknown profile, bad version or malformed file
        pydantic.ValidationError: Values violating the schema
    """
    data: Dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as handle:
                parser.read_file(handle)
        except (OSError, configparser.Error) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e

        version = parser.getint("meta", "format_version", fallback=CONFIG_FORMAT_VERSION)
        if version != CONFIG_FORMAT_VERSION:
            raise ConfigurationError(
                f"config format_version {version} unsupported (expected {CONFIG_FORMAT_VERSION})"
            )
        data["format_version"] = version

        for section in parser.sections():
            if section == "meta" or section.startswith(PROFILE_PREFIX):
                continue
            values = {k: parse_value(v) for k, v in parser.items(section)}
            if section == "run":
                data.update(values)
            else:
                data.setdefault(section, {}).update(values)

        if profile is not None:
            name = f"{PROFILE_PREFIX}{PROFILE_ALIASES.get(profile, profile)}"
            if not parser.has_section(name):
                raise ConfigurationError(f"unknown profile '{profile}' in {path}")
            for key, raw in parser.items(name):
                _set_dotted(data, key, parse_value(raw))
    elif profile is not None:
        raise ConfigurationError("a profile requires a config file")

    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)

    return RunConfig.model_validate(data)


def dump_run_config(config: RunConfig, path: Path) -> Path:
    """Write ``config`` as a sectioned config file that load_run_config reads back."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["meta"] = {"format_version": str(config.format_version)}
    parser["run"] = {key: _format_value(getattr(config, key)) for key in _RUN_KEYS}
    for name in type(config).model_fields:
        value = getattr(config, name)
        if name in _RUN_KEYS or name == "format_version":
            continue
        parser[name] = {
            key: _format_value(getattr(value, key)) for key in type(value).model_fields
        }

    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {val}" for key, val in parser.items(section))
        lines.append("")
    return atomic_write_text(path, "\n".join(lines))
