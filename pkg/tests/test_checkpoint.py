import numpy as np
import pytest

from afflow.checkpoint import (config_from_meta, load_model, model_meta,
                               read_checkpoint, save_model, write_checkpoint)
from afflow.flow import FlowConfig
from afflow.model import ArtifactFlowModel, ModelConfig


def _small_model(seed=0, lam=0.2):
    cfg = ModelConfig(flow=FlowConfig(levels=2, steps=2, lambda0=lam, hidden=8),
                      ace_features=4, ace_blocks=1, init_seed=seed)
    return ArtifactFlowModel(cfg)


def test_raw_roundtrip(tmp_path, rng):
    meta = {"alpha": "1", "beta": "two"}
    arrays = {"x": rng.normal(size=(2, 3)), "y": rng.normal(size=4)}
    path = tmp_path / "c.afck"
    write_checkpoint(path, meta, arrays)
    assert path.read_bytes()[:4] == b"AFCK"
    meta2, arrays2 = read_checkpoint(path)
    assert meta2 == meta
    for name in arrays:
        np.testing.assert_array_equal(arrays2[name], arrays[name])


def test_model_roundtrip_bitexact(tmp_path, rng):
    model = _small_model(seed=7)
    for param in model.named_params().values():
        param.data += rng.normal(0, 0.01, param.data.shape)
    model.mark_actnorm_initialized()
    save_model(tmp_path / "m.afck", model)

    loaded, meta, _ = load_model(tmp_path / "m.afck")
    assert loaded.config == model.config
    for name, param in model.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[name].data, param.data)
    assert all(loaded.actnorm_flags().values())

    x = rng.uniform(0, 1, (1, 1, 16, 16))
    np.testing.assert_array_equal(loaded.restore(x), model.restore(x))


def test_actnorm_flags_preserved(tmp_path):
    model = _small_model()
    flags = model.actnorm_flags()
    one = next(iter(flags))
    model.flow.actnorm_layers()[one].initialized = True
    save_model(tmp_path / "m.afck", model)
    loaded, _, _ = load_model(tmp_path / "m.afck")
    assert loaded.actnorm_flags()[one] is True
    others = [v for k, v in loaded.actnorm_flags().items() if k != one]
    assert not any(others)


def test_config_reconstruction():
    model = _small_model(seed=3, lam=0.15)
    cfg = config_from_meta(model_meta(model))
    assert cfg == model.config


def test_missing_parameter_rejected(tmp_path):
    model = _small_model()
    meta = model_meta(model)
    arrays = {name: p.data for name, p in model.named_params().items()}
    victim = next(iter(arrays))
    del arrays[victim]
    write_checkpoint(tmp_path / "m.afck", meta, arrays)
    with pytest.raises(ValueError, match="missing parameter"):
        load_model(tmp_path / "m.afck")


def test_shape_mismatch_rejected(tmp_path):
    model = _small_model()
    meta = model_meta(model)
    arrays = {name: p.data for name, p in model.named_params().items()}
    victim = next(iter(arrays))
    arrays[victim] = np.zeros((1, 1))
    write_checkpoint(tmp_path / "m.afck", meta, arrays)
    with pytest.raises(ValueError, match="shape"):
        load_model(tmp_path / "m.afck")


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "junk.afck").write_bytes(b"JUNK" + b"\x00" * 8)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(tmp_path / "junk.afck")


def test_incomplete_meta_rejected(tmp_path):
    write_checkpoint(tmp_path / "m.afck", {"flow.levels": "2"}, {})
    with pytest.raises(ValueError, match="missing"):
        load_model(tmp_path / "m.afck")


def test_extra_state_preserved(tmp_path, rng):
    model = _small_model()
    save_model(tmp_path / "m.afck", model,
               extra_meta={"train.step": "42"},
               extra_arrays={"adam.m.ace.head.w": rng.normal(size=(4, 1, 3, 3))})
    meta, arrays = read_checkpoint(tmp_path / "m.afck")
    assert meta["train.step"] == "42"
    assert "adam.m.ace.head.w" in arrays
