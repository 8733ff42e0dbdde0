import json

import pytest

from animweave.config import RunConfig, flatten
from animweave.errors import ConfigurationError
from animweave.injection import Strategy


def test_defaults():
    c = RunConfig()
    assert (c.steps, c.cfg_scale, c.w, c.n_f, c.kv_layers) == (50, 7.5, 0.8, 12, (3, 8))
    fai = c.schedule(Strategy.FAI, 8)
    assert sorted(fai.active_steps) == list(range(1, 26)) and fai.feature_layer == 4
    kv = c.schedule(Strategy.DAI, 8)
    assert sorted(kv.active_steps) == list(range(6, 51)) and sorted(kv.decoder_layers) == list(range(3, 9))
    assert c.schedule(Strategy.NONE, 8) is None


def test_custom_windows():
    c = RunConfig(fai_window=(2, 10), kv_window=(20, 50), kv_layers=(4, 6))
    assert sorted(c.schedule(Strategy.FAI, 8).active_steps) == list(range(2, 11))
    kv = c.schedule(Strategy.KVAI, 8)
    assert min(kv.active_steps) == 20 and sorted(kv.decoder_layers) == [4, 5, 6]


@pytest.mark.parametrize("kwargs", [
    {"fai_window": (0, 10)}, {"kv_window": (5, 60)}, {"n_f": 1}, {"w": 1.0}, {"strategy": "bogus"}, {"steps": 0},
])
def test_validate_rejects(kwargs):
    with pytest.raises((ConfigurationError, ValueError)):
        RunConfig(**kwargs).validate()


def test_layers_outside_backbone_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig(kv_layers=(3, 12)).schedule(Strategy.KVAI, 8)


def test_file_then_flags_merge(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"steps": 20, "n_f": 6, "llm": {"backend": "mock", "timeout": 5}}))
    base = RunConfig.load(path)
    assert (base.steps, base.n_f, base.llm_timeout) == (20, 6, 5)
    merged = base.merged({"n_f": 8, "seed": None})
    assert (merged.steps, merged.n_f, merged.seed) == (20, 8, 0)


def test_unknown_key_rejected():
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"stepz": 3})


def test_hash_ignores_location_but_not_pixels():
    a = RunConfig()
    assert a.hash() == RunConfig(output_dir="elsewhere", trace_cache="/tmp/x").hash()
    assert a.hash() != RunConfig(seed=1).hash()
    assert a.hash() != RunConfig(w=0.5).hash()


def test_flatten():
    assert flatten({"llm": {"backend": "x"}, "extra": {"a": 1}}) == {"llm_backend": "x", "extra": {"a": 1}}
