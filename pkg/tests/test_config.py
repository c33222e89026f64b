import json

import pytest

from config import (ARCH_PRESETS, DynamicsConfig, HierarchyConfig, SimConfig, config_hash, dump_config, load_config,
                    model_arch)
from core.errors import ConfigError


def test_defaults_form_the_desk_preset():
    cfg = load_config()
    assert cfg.dynamics.arch() == ARCH_PRESETS["desk"]
    assert cfg.world.dt == pytest.approx(1.0 / 30.0)
    assert cfg.train.stride == 10


def test_dotted_overrides_are_parsed_as_json():
    cfg = load_config(None, ["train.lr=0.01", "world.cloth_grid=[5,4]", "world.task=lift", "render.debug_dump=true"])
    assert cfg.train.lr == 0.01
    assert cfg.world.cloth_grid == (5, 4)
    assert cfg.world.task == "lift"
    assert cfg.render.debug_dump is True


def test_config_file_then_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 3, "train": {"stride": 5, "lr": 0.5}}))
    cfg = load_config(path, ["train.lr=0.25"])
    assert cfg.seed == 3
    assert cfg.train.stride == 5
    assert cfg.train.lr == 0.25


def test_seed_environment_variable(monkeypatch):
    monkeypatch.setenv("SOMA_SEED", "42")
    assert load_config(None, ["seed=1"]).seed == 42


def test_seed_environment_variable_must_be_integer(monkeypatch):
    monkeypatch.setenv("SOMA_SEED", "forty")
    with pytest.raises(ConfigError):
        load_config()


@pytest.mark.parametrize("override", [
    "world.frames=5",
    "world.nope=1",
    "dynamics.preset=\"huge\"",
    "render.lam=1.5",
    "train.supervision=\"depth\"",
    "missing_equals_sign",
])
def test_invalid_overrides_raise_config_error(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_explicit_arch_overrides_preset():
    arch = DynamicsConfig(preset="paper", embed_dim=16).arch()
    assert arch == {"embed_dim": 16, "num_layers": 16, "knn": 8}


def test_paper_preset_selectable_from_command_line():
    cfg = load_config(None, ['dynamics.preset="paper"'])
    assert cfg.dynamics.arch() == {"embed_dim": 128, "num_layers": 16, "knn": 8}


def test_config_hash_tracks_architecture_only():
    a = SimConfig()
    b = load_config(None, ["train.lr=0.5", "seed=9"])
    c = load_config(None, ["dynamics.embed_dim=64"])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert set(model_arch(a.dynamics)) == {"embed_dim", "num_layers", "knn", "attr_dim", "num_levels"}


def test_dump_config_round_trips(tmp_path):
    cfg = load_config(None, ["train.stride=4"])
    dump_config(cfg, tmp_path / "config.json")
    assert load_config(tmp_path / "config.json") == cfg


@pytest.mark.parametrize("n, expected", [(100, [100, 50, 2]), (13, [13, 6, 2]), (4, [4, 3, 2]), (3, [3, 2, 1])])
def test_default_level_sizes(n, expected):
    assert HierarchyConfig().sizes_for(n) == expected


def test_explicit_level_sizes_keep_splat_count():
    assert HierarchyConfig(level_sizes=[999, 40, 4]).sizes_for(120) == [120, 40, 4]


def test_too_few_splats_for_hierarchy():
    with pytest.raises(ConfigError):
        HierarchyConfig().sizes_for(2)
