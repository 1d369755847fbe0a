import os
from pathlib import Path
from typing import Any, Optional, Type, TypeVar, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from cardioforge.errors import ConfigError

# Load environment variables
load_dotenv()

PACKAGE_CONFIG_DIR = Path(__file__).resolve().parent / "configs"
# Directory holding schedule / preset / run documents
CONFIG_DIR = Path(os.getenv('CARDIOFORGE_CONFIG_DIR', str(PACKAGE_CONFIG_DIR)))
# Default root for run directories
WORKING_DIRECTORY = os.getenv('WORKING_DIRECTORY', './runs/')
# Logging
LOG_FILE = os.getenv('LOG_FILE', 'cardioforge.log')
LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

ModelT = TypeVar("ModelT", bound=BaseModel)


def resolve_config_path(ref: Union[str, Path], base_dir: Optional[Path] = None) -> Path:
    """
    Resolve a config reference to an existing file.

    A reference is either a path (absolute, relative to ``base_dir`` or to the
    working directory) or the bare name of a packaged preset such as
    ``staged``.
    """
    ref_path = Path(ref)
    candidates = [ref_path]
    if base_dir is not None and not ref_path.is_absolute():
        candidates.append(base_dir / ref_path)
    if ref_path.suffix == "":
        candidates += [CONFIG_DIR / f"{ref}.yaml", PACKAGE_CONFIG_DIR / f"{ref}.yaml"]
    else:
        candidates += [CONFIG_DIR / ref_path.name, PACKAGE_CONFIG_DIR / ref_path.name]
    for candidate in candidates:
        if candidate.is_file():
            return candidate
    raise ConfigError(f"Config reference not found: {ref}", path=str(ref))


def read_yaml(path: Union[str, Path]) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = yaml.safe_load(handle) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}", path=str(path)) from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file is not valid YAML: {path}: {e}", path=str(path)) from e
    if not isinstance(document, dict):
        raise ConfigError(f"Config document must be a mapping: {path}", path=str(path))
    return document


def validate_config(model: Type[ModelT], document: dict[str, Any], source: str = "<memory>") -> ModelT:
    """Validate a mapping against a pydantic config model, raising ConfigError."""
    try:
        return model.model_validate(document)
    except PydanticValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first.get("loc", ()))
        raise ConfigError(f"Invalid config in {source}: {field}: {first.get('msg')}",
                          path=source, field=field) from e


def load_config(model: Type[ModelT], ref: Union[str, Path], base_dir: Optional[Path] = None) -> ModelT:
    path = resolve_config_path(ref, base_dir)
    return validate_config(model, read_yaml(path), source=str(path))


def _inline_reference(value: str, base_dir: Path) -> Any:
    """Load ``file`` or ``file#key`` (a named entry inside a preset file)."""
    ref, _, key = value.partition("#")
    document = read_yaml(resolve_config_path(ref, base_dir))
    if not key:
        return document
    if key not in document:
        raise ConfigError(f"Preset {key!r} not found in {ref}", path=ref, field=key)
    return document[key]


INLINE_KEYS = ("schedule", "hyperparameters", "train.augment")


def load_run_config(model: Type[ModelT], ref: Union[str, Path], inline: tuple[str, ...] = INLINE_KEYS,
                    overrides: Optional[dict[str, Any]] = None) -> ModelT:
    """
    Load a run document, replacing string values of the ``inline`` keys with
    the documents they reference (relative to the run document or the
    config dir), then validate it. Dotted keys address nested sections.

    Args:
        model: Run config model.
        ref: Run document path or packaged preset name.
        inline: Keys whose string values are config references.
        overrides: Top-level values replacing those in the document.

    Returns:
        The validated run config.
    """
    path = resolve_config_path(ref)
    document = read_yaml(path)
    for key in inline:
        *parents, leaf = key.split(".")
        section = document
        for part in parents:
            section = section.get(part) if isinstance(section, dict) else None
        if isinstance(section, dict) and isinstance(section.get(leaf), str):
            section[leaf] = _inline_reference(section[leaf], path.parent)
    document.update(overrides or {})
    return validate_config(model, document, source=str(path))


def dump_resolved_config(config: BaseModel, path: Union[str, Path]) -> Path:
    """Write a config with every default made explicit (the "resolved config")."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(config.model_dump(mode="json"), handle, sort_keys=True)
    return path
