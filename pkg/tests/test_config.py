from pathlib import Path

import pytest
import yaml

from flsim.config import (
    ExperimentConfig,
    Scheme,
    dump_config,
    load_config,
    parse_scheme,
    validate_config,
    with_overrides,
)
from flsim.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


def test_defaults():
    config = load_config(None)
    assert config == ExperimentConfig()
    assert config.channel.candidate_levels == (2, 4, 8, 16)
    assert config.channel.n_bits == 16
    assert config.hp.n_clients == config.n_clients == 10
    assert config.max_enumeration_layers == 12
    assert config.workers == 1


def test_rejects_non_power_of_two_level():
    with pytest.raises(ConfigError, match="candidate_levels"):
        validate_config({"channel": {"candidate_levels": [3]}})


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="unknown key 'channel.bogus'"):
        validate_config({"channel": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown key 'colour'"):
        validate_config({"colour": "blue"})


def test_negative_values_rejected():
    with pytest.raises(ConfigError, match="hp.eta"):
        validate_config({"hp": {"eta": -0.1}})
    with pytest.raises(ConfigError, match="channel.es_n0"):
        validate_config({"channel": {"es_n0": -1}})


def test_dump_is_a_fixed_point(tmp_path):
    config = validate_config({"n_clients": 4, "scheme": "grouped3", "channel": {"es_n0": 7.5}, "model": {"hidden": [8, 4]}})
    text = dump_config(config)
    path = tmp_path / "config.yaml"
    path.write_text(text)
    reloaded = load_config(path)
    assert reloaded == config
    assert dump_config(reloaded) == text
    assert list(yaml.safe_load(text)) == sorted(yaml.safe_load(text))


@pytest.mark.parametrize(
    "text, scheme",
    [
        ("layerwise", Scheme("layerwise")),
        ("AM", Scheme("am")),
        ("Fixed8", Scheme("fixed", 8)),
        ("grouped4", Scheme("grouped", 4)),
    ],
)
def test_parse_scheme(text, scheme):
    assert parse_scheme(text) == scheme


@pytest.mark.parametrize("text", ["grouped0", "fixed", "am2", "greedy"])
def test_parse_scheme_rejects(text):
    with pytest.raises(ConfigError):
        parse_scheme(text)


def test_fixed_level_must_be_a_candidate():
    with pytest.raises(ConfigError, match="fixed level"):
        validate_config({"scheme": "fixed32"})
    with pytest.raises(ConfigError, match="fixed level"):
        validate_config({"scheme": "fixed3"})


def test_scheme_labels():
    assert [parse_scheme(s).label for s in ("fixed2", "am", "layerwise", "grouped5")] == [
        "2PSK",
        "AM",
        "Proposed",
        "Proposed (g=5)",
    ]


def test_client_count_is_shared_with_hyperparameters():
    assert validate_config({"n_clients": 4}).hp.n_clients == 4
    assert validate_config({"n_clients": 4, "hp": {"n_clients": 4}}).hp.n_clients == 4
    with pytest.raises(ConfigError, match="disagrees"):
        validate_config({"n_clients": 4, "hp": {"n_clients": 5}})


def test_with_overrides():
    config = validate_config({"n_clients": 3, "seed": 1})
    changed = with_overrides(config, seed=9, scheme="am", rounds=None)
    assert (changed.seed, changed.scheme, changed.rounds) == (9, "am", config.rounds)
    assert changed.hp.n_clients == 3
    with pytest.raises(ConfigError):
        with_overrides(config, scheme="fixed5")


def test_idx_dataset_needs_paths():
    with pytest.raises(ConfigError, match="train_images"):
        validate_config({"dataset": {"kind": "idx"}})


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(bad)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == ExperimentConfig()


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    assert isinstance(load_config(path), ExperimentConfig)


def test_default_file_matches_built_in_defaults():
    assert load_config(CONFIG_DIR / "default.yaml") == ExperimentConfig()
