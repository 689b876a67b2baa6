# tests/test_config.py

import pytest

from config import (
    EPSILON_PRESETS,
    HASH_NAME,
    RESOLVED_NAME,
    RunConfig,
    load_run_config,
    resolve_run_dir,
    write_resolved,
)
from exceptions import ConfigValidationError
from utils import parse_float_list, parse_int_list, parse_merge_spec


@pytest.fixture
def env_file(tmp_path):
    def write(text: str):
        path = tmp_path / "run.env"
        path.write_text(text, encoding="utf-8")
        return path
    return write


class TestLoading:

    def test_defaults(self):
        cfg = load_run_config()
        assert cfg == RunConfig()
        assert cfg.epsilon == 1e-3

    def test_file_values_are_cast(self, env_file):
        cfg = load_run_config(env_file("ALPHA=0.01\nSTEPS=5\nHOLDOUT_BATCH=true\nOBJECTIVE=er-only\n"))
        assert cfg.alpha == 0.01
        assert cfg.steps == 5
        assert cfg.holdout_batch is True
        assert cfg.objective == "er-only"

    def test_flags_beat_file(self, env_file):
        cfg = load_run_config(env_file("STEPS=5\nBETA=0.2\n"), {"steps": "7", "beta": None})
        assert cfg.steps == 7
        assert cfg.beta == 0.2

    def test_unknown_key(self, env_file):
        with pytest.raises(ConfigValidationError):
            load_run_config(env_file("LEARNING_RATE=0.1\n"))

    def test_unknown_override(self):
        with pytest.raises(ConfigValidationError):
            load_run_config(overrides={"learning_rate": 0.1})

    @pytest.mark.parametrize("line", ["STEPS=abc", "ALPHA=fast", "DIAGNOSTIC=maybe"])
    def test_bad_values(self, env_file, line):
        with pytest.raises(ConfigValidationError):
            load_run_config(env_file(line + "\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigValidationError):
            load_run_config(tmp_path / "absent.env")

    def test_preset_fills_epsilon(self, env_file):
        cfg = load_run_config(env_file("EPSILON_PRESET=entity\n"))
        assert cfg.epsilon == EPSILON_PRESETS["entity"]

    def test_explicit_epsilon_beats_preset(self, env_file):
        cfg = load_run_config(env_file("EPSILON_PRESET=entity\n"), {"epsilon": "0.5"})
        assert cfg.epsilon == 0.5

    def test_unknown_preset(self):
        with pytest.raises(ConfigValidationError):
            load_run_config(overrides={"epsilon_preset": "landscape"})

    @pytest.mark.parametrize("field,value", [
        ("phase", "deploy"), ("sweep_param", "alpha"), ("n_samples", 0), ("label_dropout", 1.0),
    ])
    def test_validation(self, field, value):
        with pytest.raises(ConfigValidationError):
            RunConfig(**{field: value})


class TestDerived:

    def test_dataset_overrides(self):
        dataset = RunConfig(erase="1", preserve="0").get_dataset()
        assert dataset.erase_concepts == [1]
        assert dataset.preserve_concepts == [0]

    @pytest.mark.parametrize("erase,preserve", [("5", ""), ("0", "0"), ("", "0,1")])
    def test_invalid_concepts(self, erase, preserve):
        with pytest.raises(ConfigValidationError):
            RunConfig(erase=erase, preserve=preserve).get_dataset()

    def test_model_config_follows_dataset(self):
        model_cfg = RunConfig(dataset="two-modes-1d", d_model=16).model_config()
        assert model_cfg.d_data == 1
        assert model_cfg.d_model == 16
        assert model_cfg.n_concepts == 2

    def test_erasure_hyperparams(self):
        hp = RunConfig(alpha=0.01, rank=2, lambda_mode="exact", seed=4).erasure_hyperparams()
        assert (hp.alpha, hp.rank, hp.lambda_mode, hp.seed) == (0.01, 2, "exact", 4)


class TestHashing:

    def test_run_only_fields_do_not_change_hash(self):
        base = RunConfig().config_sha256()
        assert RunConfig(phase="eval", n_samples=10, run_dir="x", concept=1).config_sha256() == base

    def test_training_fields_change_hash(self):
        base = RunConfig().config_sha256()
        assert RunConfig(alpha=2e-3).config_sha256() != base
        assert RunConfig(seed=1).config_sha256() != base

    def test_resolved_text_sorted(self):
        lines = RunConfig().resolved_text().splitlines()
        keys = [line.split("=", 1)[0] for line in lines]
        assert keys == sorted(keys)
        assert "ALPHA=0.001" in lines

    def test_write_and_reload(self, tmp_path):
        cfg = RunConfig(alpha=0.01, erase="0", holdout_batch=True)
        digest = write_resolved(cfg, tmp_path / "run")
        assert (tmp_path / "run" / HASH_NAME).read_text().strip() == digest
        reloaded = load_run_config(tmp_path / "run" / RESOLVED_NAME)
        assert reloaded == cfg
        assert reloaded.config_sha256() == digest

    def test_default_run_dir(self, monkeypatch, tmp_path):
        monkeypatch.setenv("ERASE_RUN_ROOT", str(tmp_path))
        cfg = RunConfig()
        assert resolve_run_dir(cfg) == tmp_path / f"run-{cfg.config_sha256()[:10]}"
        assert str(resolve_run_dir(RunConfig(run_dir="custom"))) == "custom"


class TestParsing:

    def test_merge_spec(self):
        assert parse_merge_spec("a/lora.ckpt x 0.5, b/lora.ckpt x 0.25") == [("a/lora.ckpt", 0.5), ("b/lora.ckpt", 0.25)]

    def test_merge_spec_default_weight(self):
        assert parse_merge_spec("max/lora.ckpt, b.ckpt x 1") == [("max/lora.ckpt", None), ("b.ckpt", 1.0)]

    def test_merge_spec_empty(self):
        assert parse_merge_spec("  ") == []

    def test_merge_spec_bad_weight(self):
        with pytest.raises(ConfigValidationError):
            parse_merge_spec("a.ckpt x heavy")

    def test_number_lists(self):
        assert parse_float_list("1e-4, 1e-3") == [1e-4, 1e-3]
        assert parse_int_list("0,1,,2") == [0, 1, 2]
        with pytest.raises(ConfigValidationError):
            parse_int_list("0,one")
