import json

import pytest

from partreg.config import RunConfig
from partreg.errors import ConfigError
from partreg.shapes import make_shape


class TestRunConfig:
    def test_published_defaults(self):
        d = json.loads(RunConfig().to_json())
        assert d["learning_rate"] == 0.001
        assert d["steps_per_stage"] == 300
        assert d["m"] == 18
        assert d["n"] == 128

    def test_round_trip(self, tmp_path):
        cfg = RunConfig(descriptor="pfh", m=6, radius=0.02, chamfer_weight=0.5, seed=9, downsample=500)
        cfg.save(tmp_path / "c.json")
        assert RunConfig.load(tmp_path / "c.json") == cfg
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_derived_configs(self):
        t = make_shape("box_composite")
        d = RunConfig().descriptor_config(t)
        assert d.radius == pytest.approx(0.15 * t.bbox_diagonal())
        assert d.fscore_threshold == pytest.approx(0.05 * d.radius)
        o = RunConfig(learning_rate=0.01).optimizer_config()
        assert o.learning_rate == 0.01 and o.steps_per_stage == 300

    @pytest.mark.parametrize("change", [
        {"descriptor": "fpfh"}, {"m": 0}, {"n": 1.5}, {"learning_rate": 0}, {"selection": "best"},
        {"dropout_fraction": 1.0}, {"template_up": [0, 0, 0]}, {"downsample": 3}, {"seed": -1},
        {"radius": -1.0}, {"chamfer_weight": float("nan")},
    ])
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            RunConfig().replace(**change)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"bogus": 1})

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{\n  'm': 3}")
        with pytest.raises(ConfigError, match="line"):
            RunConfig.load(tmp_path / "c.json")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "none.json")
