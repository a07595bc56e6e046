import json

import pytest

from splatstego.config import Config, ConfigError, apply_overrides, config_from_dict, dump_config, load_config


def test_defaults_validate():
    cfg = Config().validate()
    assert cfg.train.resolution == 2 * cfg.model.hidden_resolution
    assert (cfg.train.lambda_dec_pos, cfg.train.lambda_dec_neg, cfg.train.lambda_rgb) == (0.3, 1.0, 0.1)
    assert cfg.train.harmonize.scope == "theta+phi" and cfg.train.harmonize.granularity == "group"


def test_dump_load_roundtrip(tmp_path):
    cfg = apply_overrides(Config(), ["train.steps=7", "payload.kind=bits", "model.deltas=[\"color\"]"])
    p = tmp_path / "c.json"
    p.write_text(dump_config(cfg))
    back = load_config(str(p))
    assert back == cfg and back.payload.kind == "bits" and back.model.deltas == ["color"]


@pytest.mark.parametrize("override", [
    "train.nope=1", "nope.steps=1", "train.steps=1.5", "train.steps=true", "train.harmonize.granularity=layer",
    "train.resolution=100", "train.tile_size=4", "train.views_per_step=0", "train.dec_loss=l3",
    "payload.kind=text", "train.lambda_rgb=-1", "rig.checking_index=99", "steps",
])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        apply_overrides(Config(), [override]).validate()


def test_bad_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(str(p))
    with pytest.raises(ConfigError):
        config_from_dict({"train": 3})
    with pytest.raises(ConfigError):
        config_from_dict({"model": {"encoder": "file_import"}})


def test_config_dict_is_json():
    json.dumps(Config().to_dict())
