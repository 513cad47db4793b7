"""Tests for config layering, validation and hashing."""

import json

import pytest

from errors import ConfigError
from forward_model import LINE
from run_config import (DEFAULT_CONFIG, apply_flags, config_hash, data_config, load_config, load_overrides,
                        merge_config, parse_value, phantom_spec, resolve_config, train_config, validate_config)


def test_defaults_are_valid():
    config = resolve_config()
    assert config == validate_config(load_config())
    assert train_config(config).lr == 1e-3
    assert phantom_spec(config).extent == 64


def test_config_file_is_merged(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 3, "accel": 8}}))
    config = load_config(path)
    assert config["train"]["epochs"] == 3
    assert config["train"]["accel"] == 8.0
    assert isinstance(config["train"]["accel"], float)
    assert config["train"]["steps"] == DEFAULT_CONFIG["train"]["steps"]


@pytest.mark.parametrize("override", [
    {"train": {"epoch": 3}},
    {"model": {}},
    {"train": {"epochs": "three"}},
    {"train": {"epochs": 2.5}},
    {"train": {"freeze_reconstructor": 1}},
    {"train": 5},
    {"train": {"lr": "fast"}},
])
def test_bad_overrides_are_rejected(override):
    with pytest.raises(ConfigError):
        merge_config(DEFAULT_CONFIG, override)


def test_lr_accepts_null_or_number():
    assert merge_config(DEFAULT_CONFIG, {"train": {"lr": 0.01}})["train"]["lr"] == 0.01
    assert merge_config(DEFAULT_CONFIG, {"train": {"lr": None}})["train"]["lr"] is None


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_config(broken)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listing)


def test_overrides_file(tmp_path):
    path = tmp_path / "overrides.env"
    path.write_text("train.epochs=5\ntrain.mode=line\ntrain.accel=2\ndata.fractions=[0.6, 0.2, 0.2]\n")
    overrides = load_overrides(path)
    assert overrides == {"train": {"epochs": 5, "mode": "line", "accel": 2}, "data": {"fractions": [0.6, 0.2, 0.2]}}
    config = resolve_config(overrides_path=path)
    assert config["train"]["mode"] == LINE
    assert config["train"]["accel"] == 2.0
    with pytest.raises(ConfigError):
        load_overrides(tmp_path / "missing.env")


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("true") is True
    assert parse_value("null") is None
    assert parse_value("point") == "point"
    assert parse_value(None) is None


def test_flags_are_applied_last(tmp_path):
    path = tmp_path / "overrides.env"
    path.write_text("train.steps=2\n")
    config = resolve_config(overrides_path=path, seed=9, steps=1, accel=2)
    assert config["train"]["steps"] == 1
    assert config["train"]["seed"] == 9
    assert config["phantom"]["seed"] == 9
    assert config["train"]["accel"] == 2.0
    assert apply_flags(DEFAULT_CONFIG)["train"] == DEFAULT_CONFIG["train"]


def test_cross_field_validation():
    mismatched = merge_config(DEFAULT_CONFIG, {"phantom": {"extent": 32}})
    with pytest.raises(ConfigError):
        validate_config(mismatched)
    infeasible = merge_config(DEFAULT_CONFIG, {"train": {"mode": "line", "accel": 8.0, "extent": 16, "steps": 4},
                                               "phantom": {"extent": 16}})
    with pytest.raises(ConfigError):
        validate_config(infeasible)
    with pytest.raises(ConfigError):
        validate_config(merge_config(DEFAULT_CONFIG, {"data": {"count": 0}}))
    with pytest.raises(ConfigError):
        validate_config(merge_config(DEFAULT_CONFIG, {"train": {"mode": "radial"}}))


def test_config_hash():
    config = resolve_config()
    digest = config_hash(config)
    assert len(digest) == 16
    assert int(digest, 16) >= 0
    assert config_hash(resolve_config()) == digest
    moved = merge_config(config, {"output_dir": "elsewhere"})
    assert config_hash(moved) == digest
    assert config_hash(merge_config(config, {"train": {"seed": 1}})) != digest


def test_data_section_view():
    data = data_config(resolve_config())
    assert data.count == 2500
    assert data.fractions == (0.8, 0.1, 0.1)
    with pytest.raises(ConfigError):
        validate_config(merge_config(DEFAULT_CONFIG, {"data": {"fractions": [0.5, 0.5]}}))
