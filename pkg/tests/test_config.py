import json

import pytest

from m2i2.config import PRESETS, TrainConfig, preset
from m2i2.errors import ConfigError


def test_roundtrip_json():
    cfg = TrainConfig(seed=3, dim=32, enable_itc=False)
    again = TrainConfig.from_json(cfg.to_json())
    assert again == cfg


def test_unknown_key_rejected():
    d = TrainConfig().to_dict()
    d["learning_rate"] = 0.1
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(d)


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        preset("huge")


def test_validate_lr_order():
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-5, lr_final=1e-4).validate()


def test_validate_itm_needs_pairs():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    TrainConfig(batch_size=1, enable_itm=False).validate()


def test_validate_all_objectives_off():
    with pytest.raises(ConfigError):
        TrainConfig(
            enable_mim=False, enable_mlm=False, enable_itm=False, enable_itc=False
        ).validate()


def test_validate_phase():
    with pytest.raises(ConfigError):
        TrainConfig(phase="transfer").validate()


def test_presets_are_valid():
    for name in PRESETS:
        cfg = preset(name)
        assert cfg.validate() is cfg


def test_preset_overrides():
    cfg = preset("test", seed=42, epochs=1)
    assert cfg.seed == 42 and cfg.epochs == 1 and cfg.dim == 16


def test_paper_preset_scale():
    cfg = preset("paper")
    assert cfg.dim == 768
    assert cfg.depth_img_enc == 12
    assert cfg.queue_capacity == 65535
    assert cfg.image_size == 256


def test_model_config_projection():
    cfg = preset("desk")
    mc = cfg.model_config()
    assert mc.dim == cfg.dim
    assert mc.n_patches == (cfg.image_size // cfg.patch_size) ** 2


def test_json_is_flat_and_sorted():
    d = json.loads(TrainConfig().to_json())
    assert all(not isinstance(v, (dict, list)) for v in d.values())
    assert list(d) == sorted(d)


def test_save_load(tmp_path):
    cfg = preset("test", seed=9)
    p = tmp_path / "cfg.json"
    cfg.save(p)
    assert TrainConfig.load(p) == cfg
