import pytest

from afflow.config import ConfigError, RunConfig


def test_defaults_materialize_typed_views():
    cfg = RunConfig()
    flow = cfg.flow_config()
    assert flow.levels == 3 and flow.steps == 12 and flow.hidden == 64
    train = cfg.train_config()
    assert train.lr == 1e-4 and train.beta1 == 0.5 and train.beta2 == 0.999
    assert train.batch == 8
    sim = cfg.sim_config()
    assert sim.kind == "sinusoidal-respiratory" and sim.phi0 is None


def test_load_file_with_comments(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("""
# toy settings
flow.levels = 2
train.iters = 100
sim.phi0 = 0.25
""")
    cfg = RunConfig.load(path)
    assert cfg.get("flow.levels") == 2
    assert cfg.get("train.iters") == 100
    assert cfg.sim_config().phi0 == 0.25


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("flow.nope = 3\n")
    with pytest.raises(ConfigError, match="unknown config key 'flow.nope'"):
        RunConfig.load(path)


def test_bad_value_rejected():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="bad value"):
        cfg.set("train.iters", "many")


def test_malformed_line_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("flow.levels: 3\n")
    with pytest.raises(ConfigError, match="expected"):
        RunConfig.load(path)


def test_cli_style_override_wins():
    cfg = RunConfig()
    cfg.set("flow.lambda0", "0.35")
    assert cfg.flow_config().lambda0 == 0.35


def test_resolved_text_roundtrips(tmp_path):
    cfg = RunConfig()
    cfg.set("train.seed", "42")
    cfg.set("sim.amplitude_max", "1.5")
    out = tmp_path / "out"
    cfg.write_resolved(out)
    text = (out / "resolved.cfg").read_text()
    assert "train.seed = 42" in text
    assert "sim.amplitude_max = 1.5" in text
    # resolved output parses back to the identical config
    reloaded = RunConfig.load(out / "resolved.cfg")
    assert reloaded.values == cfg.values


def test_phi0_random_sentinel():
    cfg = RunConfig()
    cfg.set("sim.phi0", "random")
    assert cfg.sim_config().phi0 is None
    cfg.set("sim.phi0", "1.0")
    assert cfg.sim_config().phi0 == 1.0
