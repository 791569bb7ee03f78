"""TOML experiment configuration: defaults, strict keys and validation."""

import pytest
import tomli

from solar_vlm.config import ConfigError, ExperimentConfig, from_dict, load_config
from solar_vlm.model import ModelConfig
from solar_vlm.training import TrainConfig

REFERENCE_DEFAULTS = {
    "seq_len": 288,
    "patch_len": 10,
    "patch_stride": 8,
    "d_model": 128,
    "memory_size": 100,
    "memory_top_k": 5,
    "d_text": 2048,
    "text_lambda": 0.6,
    "d_v": 2048,
    "num_images": 8,
    "visual_lambda": 0.7,
    "knn_k": 5,
}


class TestDefaults:
    def test_model_defaults(self):
        cfg = ModelConfig()
        for key, value in REFERENCE_DEFAULTS.items():
            assert getattr(cfg, key) == value, key

    def test_training_defaults(self):
        t = TrainConfig()
        assert (t.batch_size, t.learning_rate, t.epochs, t.horizon) == (16, 1e-4, 50, 48)

    def test_every_default_is_a_key(self):
        d = ExperimentConfig().to_dict()
        for key in REFERENCE_DEFAULTS:
            assert key in d["model"]


class TestParsing:
    def test_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.dump(tmp_path / "c.toml")
        again = load_config(tmp_path / "c.toml")
        assert again.to_dict() == cfg.to_dict()

    def test_overrides(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[model]\nknn_k = 3\ntext_lambda = 1\n[training]\nepochs = 2\n")
        cfg = load_config(p)
        assert cfg.model.knn_k == 3 and cfg.model.text_lambda == 1.0 and cfg.training.epochs == 2

    def test_all_unknown_keys_listed(self):
        with pytest.raises(ConfigError) as exc:
            from_dict({"model": {"knn": 3, "dmodel": 8}, "extra": {}, "training": {"lr": 1.0}})
        msg = str(exc.value)
        for bad in ("model.knn", "model.dmodel", "[extra]", "training.lr"):
            assert bad in msg
        assert len(exc.value.problems) == 4

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="model.d_model"):
            from_dict({"model": {"d_model": "big"}})
        with pytest.raises(ConfigError, match="ablation.ts_only"):
            from_dict({"ablation": {"ts_only": 1}})

    def test_validation_collects_everything(self):
        with pytest.raises(ConfigError) as exc:
            from_dict({"model": {"d_model": 10, "num_heads": 4, "text_lambda": 2.0}, "data": {"sites": 1}})
        text = " ".join(exc.value.problems)
        assert "divisible" in text and "text_lambda" in text and "data.sites" in text

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.toml")

    def test_syntax_error(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[model\n")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_output_root(self, monkeypatch, tmp_path):
        monkeypatch.delenv("SOLARVLM_OUT", raising=False)
        assert str(ExperimentConfig().output_root()) == "runs"
        monkeypatch.setenv("SOLARVLM_OUT", str(tmp_path))
        assert ExperimentConfig().output_root() == tmp_path

    def test_dump_is_valid_toml(self, tmp_path):
        ExperimentConfig().dump(tmp_path / "c.toml")
        raw = tomli.loads((tmp_path / "c.toml").read_text())
        assert raw["training"]["split_ratios"] == [0.7, 0.1, 0.2]
