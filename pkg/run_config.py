"""
Run configuration: defaults, JSON config files, declared override files and CLI flags.

Layers are applied in order DEFAULT_CONFIG -> --config JSON -> --overrides
file -> flags. Unknown keys and wrongly typed values are rejected at every
layer. Nothing is read from the process environment.
"""

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from dotenv import dotenv_values

from errors import ConfigError
from phantoms import PhantomSpec
from pipeline import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "config.resolved.json"

DEFAULT_CONFIG = {
    "output_dir": "runs/default",
    "train": {
        "mode": "point",
        "accel": 4.0,
        "steps": 4,
        "epochs": 50,
        # null picks 1e-3 for point sampling and 5e-5 for line sampling
        "lr": None,
        "lr_halving_period": 10,
        "batch_size": 8,
        "seed": 0,
        "slope": 5.0,
        "extent": 64,
        "recon_widths": [16, 32, 64, 128],
        "policy_widths": [16, 32, 64, 128],
        "line_hidden": 256,
        "max_rejections": 200,
        "eval_seed": 1234,
        "freeze_reconstructor": False,
        "pretrain_epochs": 10,
        "workers": 1,
    },
    "phantom": {
        "extent": 64,
        "min_ellipses": 3,
        "max_ellipses": 8,
        "intensity_min": 0.1,
        "intensity_max": 1.0,
        "rotation": "none",
        "angle": 0.0,
        "orientation_jitter": 0.2618,
        "aspect_min": 0.2,
        "aspect_max": 0.5,
        "smoothing": 0.8,
        "seed": 0,
    },
    "data": {
        "count": 2500,
        "split_seed": 0,
        "fractions": [0.8, 0.1, 0.1],
        "probe_count": 100,
        "workers": 1,
    },
}

# keys whose default is null accept any number
_NULLABLE_NUMBERS = {"train.lr"}


def _check_type(key: str, default: Any, value: Any) -> Any:
    if default is None:
        if key in _NULLABLE_NUMBERS and (value is None or
                                         (isinstance(value, (int, float)) and not isinstance(value, bool))):
            return value
        raise ConfigError(f"{key} must be a number or null, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def merge_config(base: Dict, overrides: Dict, prefix: str = "") -> Dict:
    """
    Return ``base`` updated with ``overrides``, section by section.

    Raises:
        ConfigError: On unknown keys or values whose type differs from the default
    """
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{dotted}' must be an object")
            merged[key] = merge_config(base[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = _check_type(dotted, DEFAULT_KEYS.get(dotted, base[key]), value)
    return merged


def _flatten(config: Dict, prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in config.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[f"{prefix}{key}"] = value
    return flat


DEFAULT_KEYS = _flatten(DEFAULT_CONFIG)


def load_config(path: Optional[Union[str, Path]] = None) -> Dict:
    """
    Load a JSON run config merged over DEFAULT_CONFIG.

    Raises:
        ConfigError: If the file is missing, is not JSON or has invalid keys
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return config
    try:
        with open(path, "r") as f:
            user = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return merge_config(config, user)


def _unflatten(flat: Dict[str, Any]) -> Dict:
    nested: Dict = {}
    for dotted, value in flat.items():
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def parse_value(raw: Optional[str]) -> Any:
    """JSON literal when it parses, otherwise the raw string."""
    if raw is None:
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_overrides(path: Union[str, Path]) -> Dict:
    """
    Read a KEY=VALUE override file with dotted keys (``train.epochs=5``).

    Raises:
        ConfigError: If the file does not exist
    """
    if not Path(path).is_file():
        raise ConfigError(f"overrides file not found: {path}")
    values = dotenv_values(path, interpolate=False)
    return _unflatten({key.strip(): parse_value(raw) for key, raw in values.items()})


def apply_flags(config: Dict, seed: Optional[int] = None, mode: Optional[str] = None,
                accel: Optional[float] = None, steps: Optional[int] = None) -> Dict:
    """Apply --seed-override, --mode, --accel and --steps."""
    flags: Dict = {"train": {}}
    if seed is not None:
        flags["train"]["seed"] = seed
        flags["phantom"] = {"seed": seed}
    if mode is not None:
        flags["train"]["mode"] = mode
    if accel is not None:
        flags["train"]["accel"] = float(accel)
    if steps is not None:
        flags["train"]["steps"] = steps
    return merge_config(config, flags)


def validate_config(config: Dict) -> Dict:
    """
    Check cross-field consistency by building the typed views.

    Raises:
        ConfigError: If any section is inconsistent
    """
    cfg = train_config(config)
    spec = phantom_spec(config)
    if cfg.extent != spec.extent:
        raise ConfigError(f"train.extent {cfg.extent} differs from phantom.extent {spec.extent}")
    try:
        cfg.accel_spec()
    except ValueError as e:
        raise ConfigError(f"acceleration settings are infeasible: {e}") from e
    data_config(config)
    return config


def resolve_config(config_path: Optional[Union[str, Path]] = None,
                   overrides_path: Optional[Union[str, Path]] = None, **flags) -> Dict:
    config = load_config(config_path)
    if overrides_path is not None:
        config = merge_config(config, load_overrides(overrides_path))
    config = apply_flags(config, **flags)
    return validate_config(config)


def canonical_json(config: Dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: Dict) -> str:
    """
    First 16 hex digits of the sha256 of the sorted-key JSON config.

    ``output_dir`` is left out so the same run writes identical artifacts wherever it lands.
    """
    hashed = {key: value for key, value in config.items() if key != "output_dir"}
    return hashlib.sha256(canonical_json(hashed).encode("utf-8")).hexdigest()[:16]


def train_config(config: Dict) -> TrainConfig:
    try:
        return TrainConfig(**config["train"])
    except TypeError as e:
        raise ConfigError(f"invalid train section: {e}") from e


def phantom_spec(config: Dict) -> PhantomSpec:
    try:
        return PhantomSpec(**config["phantom"])
    except TypeError as e:
        raise ConfigError(f"invalid phantom section: {e}") from e


@dataclass(frozen=True)
class DataConfig:
    """Dataset size, split and worker settings for ``datagen``."""

    count: int = 2500
    split_seed: int = 0
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    probe_count: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.count < 1 or self.probe_count < 1 or self.workers < 1:
            raise ConfigError("data.count, data.probe_count and data.workers must be positive")
        if len(self.fractions) != 3:
            raise ConfigError("data.fractions needs three values (train, val, test)")


def data_config(config: Dict) -> DataConfig:
    try:
        values = dict(config["data"])
        values["fractions"] = tuple(values["fractions"])
        return DataConfig(**values)
    except TypeError as e:
        raise ConfigError(f"invalid data section: {e}") from e
