import json

import pytest

from knotcast.config import RunConfig, from_dict, load_config


def test_defaults_and_round_trip(tmp_path):
    cfg = RunConfig()
    assert cfg.knots.k == 3 and cfg.train.batch_size == 32 and cfg.mc_samples == 100
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg
    assert load_config() == cfg


def test_partial_override():
    cfg = from_dict({"knots": {"k": 4}, "train": {"epochs": 7}, "sigmas": [0.02]})
    assert cfg.knots.k == 4 and cfg.knots.eol == 80.0
    assert cfg.train.epochs == 7 and cfg.sigmas == [0.02]
    p = cfg.pipeline()
    assert p.k == 4 and p.train.epochs == 7


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        from_dict({"knotz": 3})
    with pytest.raises(ValueError, match="unknown"):
        from_dict({"train": {"lr": 1}})
    with pytest.raises(ValueError):
        from_dict({"train": 5})
