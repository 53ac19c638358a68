from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from app.core.errors import ConfigError


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: str = "runs"
    CHECKPOINT_DIR: str = "runs/checkpoints"  # resolved by the HTTP inference endpoint

    # Images per forward chunk during evaluation (bounds peak memory)
    EVAL_BATCH_SIZE: int = 256
    # Thread fan-out for dataset generation; output order never depends on it
    WORKERS: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()


# ============= Run configuration files =============

def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def load_key_values(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_key_values(text, source=str(path))


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar key")
        node[leaf] = value
    return nested


def resolve_run_config(
    file_values: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
):
    """
    Build a RunConfig from defaults < config file < command-line overrides.

    Unknown keys are rejected; values are validated by the pydantic models.
    """
    from app.schemas import RunConfig

    flat: Dict[str, Any] = dict(file_values or {})
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})

    known = RunConfig.known_keys()
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def dump_run_config(config) -> str:
    """Render a RunConfig as a sorted key=value snapshot."""
    lines = [f"{key} = {value}" for key, value in sorted(config.flatten().items())]
    return "\n".join(lines) + "\n"
