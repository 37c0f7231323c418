# stotrans/json_validators.py
"""
Run-config loading and validation.

A run config is a flat ``key = value`` file (``#`` starts a comment) or a
JSON object. Layers are merged lowest first: schema defaults, the named
preset, the file, then command-line overrides. String values are coerced by
the schema type before the merged config is checked with jsonschema.
"""

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import jsonschema
from fuzzywuzzy import process

from stotrans.errors import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
SUGGESTION_THRESHOLD = 70
_NULL_WORDS = ("null", "none", "")
_TRUE_WORDS = ("true", "yes", "on", "1")
_FALSE_WORDS = ("false", "no", "off", "0")


@lru_cache(maxsize=1)
def load_schema() -> Dict[str, Any]:
    with open(DATA_DIR / "run_config_schema.json", "r", encoding="utf-8") as f:
        return json.load(f)


@lru_cache(maxsize=1)
def load_presets() -> Dict[str, Any]:
    with open(DATA_DIR / "presets.json", "r", encoding="utf-8") as f:
        return json.load(f)


def schema_defaults() -> Dict[str, Any]:
    return {key: spec["default"] for key, spec in load_schema()["properties"].items() if "default" in spec}


def suggest_key(key: str, known) -> Optional[str]:
    """Closest known key when the fuzzy score clears the threshold."""
    match = process.extractOne(key, list(known))
    if match and match[1] >= SUGGESTION_THRESHOLD:
        return match[0]
    return None


def _unknown_key_error(key: str, known, where: str) -> str:
    suggestion = suggest_key(key, known)
    hint = f"; did you mean '{suggestion}'?" if suggestion else ""
    return f"unknown config key '{key}' in {where}{hint}"


def parse_config_text(text: str, where: str = "config") -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values: Dict[str, str] = {}
    errors: List[str] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            errors.append(f"{where}:{number}: expected 'key = value', got {raw.strip()!r}")
            continue
        if key in values:
            errors.append(f"{where}:{number}: key '{key}' is set twice")
            continue
        values[key] = value.strip()
    if errors:
        raise ConfigError(errors)
    return values


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError([f"cannot read config file {path}: {e}"])
    if path.suffix.lower() == ".json":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError([f"{path}: invalid JSON: {e}"])
        if not isinstance(payload, dict):
            raise ConfigError([f"{path}: a JSON config must be an object"])
        return payload
    return parse_config_text(text, str(path))


def _coerce_scalar(value: str, kind: str):
    if kind == "integer":
        return int(value)
    if kind == "number":
        return float(value)
    if kind == "boolean":
        lowered = value.lower()
        if lowered in _TRUE_WORDS:
            return True
        if lowered in _FALSE_WORDS:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return value.strip("'\"")


def coerce_values(raw: Mapping[str, Any]) -> Tuple[Dict[str, Any], List[str]]:
    """
    Convert string values to the schema's declared type.

    Returns:
        Tuple of (coerced values, list of errors). Non-string values and
        unknown keys pass through unchanged.
    """
    properties = load_schema()["properties"]
    coerced: Dict[str, Any] = {}
    errors: List[str] = []
    for key, value in raw.items():
        spec = properties.get(key)
        if spec is None or not isinstance(value, str):
            coerced[key] = value
            continue
        kinds = spec["type"] if isinstance(spec["type"], list) else [spec["type"]]
        try:
            if "null" in kinds and value.strip().lower() in _NULL_WORDS:
                coerced[key] = None
            elif "array" in kinds:
                item_kind = spec.get("items", {}).get("type", "string")
                items = [v.strip() for v in value.strip().strip("[]").split(",") if v.strip()]
                coerced[key] = [_coerce_scalar(v, item_kind) for v in items]
            else:
                kind = next(k for k in kinds if k != "null")
                coerced[key] = _coerce_scalar(value.strip(), kind)
        except ValueError:
            errors.append(f"'{key}' expects {' or '.join(kinds)}, got {value!r}")
    return coerced, errors


def validate_run_config(config: Mapping[str, Any]) -> Tuple[bool, List[str]]:
    """
    Validate a merged run config against the schema plus cross-key rules.

    Returns:
        Tuple of (is_valid, list_of_errors)
    """
    schema = load_schema()
    known = schema["properties"].keys()
    errors = [_unknown_key_error(k, known, "run config") for k in config if k not in known]

    validator = jsonschema.Draft7Validator(schema)
    for error in sorted(validator.iter_errors(dict(config)), key=lambda e: list(e.path)):
        if error.validator == "additionalProperties":
            continue
        where = ".".join(str(p) for p in error.path) or "config"
        hint = ""
        if error.validator == "enum" and isinstance(error.instance, str):
            suggestion = suggest_key(error.instance, error.validator_value)
            hint = f"; did you mean '{suggestion}'?" if suggestion else ""
        errors.append(f"{where}: {error.message}{hint}")
    if errors:
        return False, errors

    if config["emb_dim"] % config["num_heads"] != 0:
        errors.append(f"emb_dim {config['emb_dim']} is not divisible by num_heads {config['num_heads']}")
    if config["data_source"] == "tsv" and not config.get("train_path"):
        errors.append("data_source 'tsv' needs train_path")
    if sum(config["split_fractions"]) > 1.0 + 1e-9:
        errors.append(f"split_fractions {config['split_fractions']} sum to more than 1")
    if config["data_source"] == "synthetic":
        if config["synthetic_seq_len"] > config["max_seq_len"]:
            errors.append(f"synthetic_seq_len {config['synthetic_seq_len']} exceeds max_seq_len {config['max_seq_len']}")
        if config["synthetic_cues"] % 2 == 0:
            errors.append("synthetic_cues must be odd so every example has a majority polarity")
    return len(errors) == 0, errors


def _layer(raw: Mapping[str, Any], where: str) -> Dict[str, Any]:
    values, errors = coerce_values(raw)
    if errors:
        raise ConfigError([f"{where}: {e}" for e in errors])
    return values


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Merge defaults < preset < file < overrides, validate, and return the config."""
    file_values = _layer(read_config_file(path), str(path)) if path else {}
    override_values = _layer(overrides or {}, "command line")

    preset_name = override_values.get("preset", file_values.get("preset"))
    preset_values: Dict[str, Any] = {}
    if preset_name:
        presets = load_presets()
        if preset_name not in presets:
            suggestion = suggest_key(preset_name, presets)
            hint = f"; did you mean '{suggestion}'?" if suggestion else ""
            raise ConfigError([f"unknown preset '{preset_name}'{hint}"])
        preset_values = dict(presets[preset_name]["settings"])

    config = schema_defaults()
    config.update(preset_values)
    config.update(file_values)
    config.update(override_values)
    config.pop("preset", None)

    is_valid, errors = validate_run_config(config)
    if not is_valid:
        raise ConfigError(errors)
    logger.debug(f"Run config: {config}")
    return config


def validate_model_config(config) -> Tuple[bool, List[str]]:
    """
    Check a ModelConfig before any parameter is allocated.

    Returns:
        Tuple of (is_valid, list_of_errors)
    """
    errors = []
    for name in ("vocab_size", "num_layers", "num_heads", "emb_dim", "ffn_hidden_dim", "max_seq_len", "centroid_count"):
        if getattr(config, name) < 1:
            errors.append(f"{name} must be positive, got {getattr(config, name)}")
    if config.vocab_size < 3:
        errors.append(f"vocab_size must cover the reserved ids plus one token, got {config.vocab_size}")
    if config.num_classes < 2:
        errors.append(f"num_classes must be at least 2, got {config.num_classes}")
    if config.num_heads >= 1 and config.emb_dim % config.num_heads != 0:
        errors.append(f"emb_dim {config.emb_dim} is not divisible by num_heads {config.num_heads}")
    if not 0.0 <= config.dropout_rate < 1.0:
        errors.append(f"dropout_rate must lie in [0, 1), got {config.dropout_rate}")
    if config.alpha is not None and not config.alpha > 0:
        errors.append(f"alpha must be positive, got {config.alpha}")
    _, attention_errors = config.attention.validate()
    errors.extend(attention_errors)
    return len(errors) == 0, errors
