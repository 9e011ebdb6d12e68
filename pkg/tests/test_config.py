import pytest

from wda.config import (RunConfig, config_from_dict, desk_preset, dump_config, full_preset, load_config,
                        parse_override)
from wda.data import ConfigError


def test_full_preset_defaults():
    c = full_preset().validate()
    assert c.optim.patch_hw == (512, 512) and c.optim.batch_size == 2
    assert c.optim.lr_g == 5e-5 and c.optim.power == 0.9
    assert c.optim.max_iters == 20000 and c.optim.z_max == 10000
    assert c.optim.lr_d == 1e-4 and c.optim.betas_d == (0.9, 0.99)
    assert c.augment.cp.crop_hw == (256, 256) and c.augment.cp.prob == 0.5
    assert c.optim.refresh_period == 2000


def test_desk_preset():
    c = desk_preset().validate()
    assert c.optim.max_iters == 2000 and c.optim.z_max == 1000
    assert c.synth.hw == (128, 128)


def test_yaml_roundtrip(tmp_path):
    c = desk_preset().replace(**{"losses.K": 7, "augment.cp.crop_hw": [16, 16]})
    p = dump_config(c, tmp_path / "c.yaml")
    back = load_config(p)
    assert back.to_dict() == c.to_dict()
    assert back.fingerprint() == c.fingerprint()
    assert back.augment.cp.crop_hw == (16, 16)


def test_partial_yaml_overrides_preset(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("optim:\n  max_iters: 50\n  z_max: 20\nlosses:\n  weights:\n    epsilon: 2.0\n")
    c = load_config(p, preset="desk")
    assert c.optim.max_iters == 50 and c.losses.weights.epsilon == 2.0
    assert c.optim.patch_hw == (64, 64)


def test_invalid_configs(tmp_path):
    with pytest.raises(ConfigError):
        desk_preset().replace(**{"optim.z_max": 5000}).validate()
    with pytest.raises(ConfigError):
        desk_preset().replace(**{"optim.lr_g": 0.0}).validate()
    with pytest.raises(ConfigError):
        desk_preset().replace(**{"optim.nope": 1})
    with pytest.raises(ConfigError):
        desk_preset().replace(**{"optim.patch_hw": (60, 60)}).validate()
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        load_config(preset="huge")


def test_parse_override():
    assert parse_override("losses.K=7") == ("losses.K", 7)
    assert parse_override("counter.scales=[1.0, 2.0]") == ("counter.scales", [1.0, 2.0])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_fingerprint_changes_with_config():
    a = RunConfig()
    assert a.fingerprint() == RunConfig().fingerprint()
    assert a.fingerprint() != a.replace(seed=1).fingerprint()
