"""
Flat key-value experiment configs
=================================
    # comment
    steps = 2000
    mode = laver
    model.d_model = 64
    model.grid = 8,8
    ema.decay = 0.95

Keys are TrainConfig fields, dotted into sub-configs. Values are ints,
floats, true/false, bare identifiers or comma tuples; pydantic validates
the result. Unknown and duplicate keys are rejected with their line number.
"""

import logging
import re
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ValidationError

from exceptions import FormatError, RejectedInputError
from schemas import TrainConfig

logger = logging.getLogger(__name__)

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")
_INT = re.compile(r"^[+-]?\d+$")
_FLOAT = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


def _scalar(text: str, line_no: int, source: Optional[str]) -> Any:
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    if text in ("true", "false"):
        return text == "true"
    if _IDENT.match(text):
        return text
    raise FormatError(f"line {line_no}: cannot parse value {text!r}", source)


def parse_value(text: str, line_no: int = 0, source: Optional[str] = None) -> Any:
    text = text.strip()
    if not text:
        raise FormatError(f"line {line_no}: missing value", source)
    if "," in text:
        return tuple(_scalar(part.strip(), line_no, source) for part in text.split(","))
    return _scalar(text, line_no, source)


def _known_key(key: str) -> bool:
    model: type = TrainConfig
    parts = key.split(".")
    for i, part in enumerate(parts):
        field = model.model_fields.get(part)
        if field is None:
            return False
        nested = field.annotation
        last = i == len(parts) - 1
        is_section = isinstance(nested, type) and issubclass(nested, BaseModel)
        if last:
            return not is_section
        if not is_section:
            return False
        model = nested
    return True


def parse_config_text(text: str, source: Optional[str] = None) -> Dict[str, Any]:
    """Nested dict of the entries in ``text``, ready for ``TrainConfig.model_validate``."""
    result: Dict[str, Any] = {}
    seen: Dict[str, int] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {line_no}: expected 'key = value'", source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY.match(key):
            raise FormatError(f"line {line_no}: malformed key {key!r}", source)
        if key in seen:
            raise FormatError(f"line {line_no}: duplicate key {key!r} (first set on line {seen[key]})", source)
        if not _known_key(key):
            raise FormatError(f"line {line_no}: unknown key {key!r}", source)
        seen[key] = line_no

        target = result
        *sections, leaf = key.split(".")
        for section in sections:
            target = target.setdefault(section, {})
        target[leaf] = parse_value(value, line_no, source)
    return result


def build_config(entries: Dict[str, Any], source: Optional[str] = None) -> TrainConfig:
    try:
        return TrainConfig.model_validate(entries)
    except ValidationError as e:
        raise RejectedInputError(f"{source or 'config'}: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, **overrides: Any) -> TrainConfig:
    """Read a config file (or start from defaults) and apply top-level overrides such as ``mode`` or ``seed``."""
    entries: Dict[str, Any] = {}
    source = None
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise FormatError(f"cannot read config: {e}", source)
        entries = parse_config_text(text, source)
    for key, value in overrides.items():
        if value is not None:
            entries[key] = value
    config = build_config(entries, source)
    logger.info(f"Loaded config from {source or 'defaults'}: mode={config.mode.value} seed={config.seed} steps={config.steps}")
    return config
