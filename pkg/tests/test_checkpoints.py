# tests/test_checkpoints.py

import json

import numpy as np
import pytest

from checkpoints import MANIFEST_KEY, load_checkpoint, read_manifest, save_checkpoint
from conftest import random_lora
from exceptions import CheckpointCompatibilityError, CheckpointCorruptionError
from single_stream import GatedLoRA, ModelConfig, SingleStreamModel


def _rewrite(path, mutate_manifest=None, mutate_arrays=None):
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data[MANIFEST_KEY]))
        arrays = {name: np.array(data[name]) for name in data.files if name != MANIFEST_KEY}
    if mutate_manifest:
        mutate_manifest(manifest)
    if mutate_arrays:
        mutate_arrays(arrays)
    with open(path, "wb") as f:
        np.savez(f, **{MANIFEST_KEY: np.array(json.dumps(manifest))}, **arrays)


class TestRoundTrip:

    def test_model_bit_exact(self, tiny_model, tmp_path, rng):
        path = tmp_path / "base.ckpt"
        checksum = save_checkpoint(path, tiny_model)
        loaded = load_checkpoint(path, expected_kind="model")
        assert isinstance(loaded, SingleStreamModel)
        assert loaded.checksum() == checksum == tiny_model.checksum()
        x = rng.standard_normal((3, tiny_model.config.n_I, tiny_model.config.d_data))
        assert np.array_equal(tiny_model.velocity(x, 1, 0.4).data, loaded.velocity(x, 1, 0.4).data)

    def test_lora_bit_exact(self, tiny_config, tmp_path):
        lora = random_lora(tiny_config, seed=2, gated=False)
        lora.scale = 0.5
        lora.provenance = {"kind": "erasure", "erase": [1]}
        path = tmp_path / "lora.ckpt"
        save_checkpoint(path, lora, extras={"final_lambda": 0.25})
        loaded = load_checkpoint(path, expected_kind="lora", base_config=tiny_config)
        assert isinstance(loaded, GatedLoRA)
        assert loaded.checksum() == lora.checksum()
        assert (loaded.rank, loaded.scale, loaded.gated) == (2, 0.5, False)
        assert loaded.provenance == {"kind": "erasure", "erase": [1]}
        assert read_manifest(path)["extras"] == {"final_lambda": 0.25}

    def test_manifest_contents(self, tiny_model, tmp_path):
        path = tmp_path / "base.ckpt"
        save_checkpoint(path, tiny_model)
        manifest = read_manifest(path)
        assert manifest["kind"] == "model"
        assert manifest["config_hash"] == tiny_model.config.config_hash()
        assert set(manifest["shapes"]) == set(tiny_model.named_parameters())

    def test_rejects_other_objects(self, tmp_path):
        with pytest.raises(TypeError):
            save_checkpoint(tmp_path / "x.ckpt", object())


class TestCorruption:

    @pytest.fixture
    def saved(self, tiny_model, tmp_path):
        path = tmp_path / "base.ckpt"
        save_checkpoint(path, tiny_model)
        return path

    def _field(self, path, **kwargs):
        with pytest.raises(CheckpointCorruptionError) as info:
            load_checkpoint(path, **kwargs)
        return info.value.field

    def test_truncated(self, saved):
        data = saved.read_bytes()
        saved.write_bytes(data[: len(data) // 2])
        assert self._field(saved) == "container"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        assert self._field(path) == "container"

    def test_missing_file(self, tmp_path):
        assert self._field(tmp_path / "absent.ckpt") == "container"

    def test_version(self, saved):
        _rewrite(saved, mutate_manifest=lambda m: m.update(version=99))
        assert self._field(saved) == "version"

    def test_format(self, saved):
        _rewrite(saved, mutate_manifest=lambda m: m.update(format="other"))
        assert self._field(saved) == "format"

    def test_kind(self, saved):
        assert self._field(saved, expected_kind="lora") == "kind"

    def test_flipped_value(self, saved):
        def flip(arrays):
            name = sorted(arrays)[0]
            arrays[name].flat[0] += 1e-9
        _rewrite(saved, mutate_arrays=flip)
        assert self._field(saved) == "checksum"

    def test_missing_tensor(self, saved):
        _rewrite(saved, mutate_arrays=lambda arrays: arrays.pop(sorted(arrays)[0]))
        assert self._field(saved) == "shapes"

    def test_config_hash(self, saved):
        _rewrite(saved, mutate_manifest=lambda m: m.update(config_hash="0" * 64))
        assert self._field(saved) == "config_hash"


class TestCompatibility:

    def test_lora_for_other_base(self, lora, tmp_path):
        path = tmp_path / "lora.ckpt"
        save_checkpoint(path, lora)
        other = ModelConfig(d_model=8, n_heads=2, n_layers=3, n_I=3, n_T=3, d_data=2, n_concepts=2, time_embed_dim=4)
        with pytest.raises(CheckpointCompatibilityError):
            load_checkpoint(path, expected_kind="lora", base_config=other)

    def test_lora_without_base_check(self, lora, tmp_path):
        path = tmp_path / "lora.ckpt"
        save_checkpoint(path, lora)
        assert load_checkpoint(path).checksum() == lora.checksum()
