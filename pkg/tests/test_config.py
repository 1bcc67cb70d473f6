import pytest

from metatra.config import ExperimentConfig, apply_overrides, dump_config, load_config
from metatra.errors import ConfigError

BASE = """
seed: 1
dataset:
  synth:
    - {domain_id: a}
    - {domain_id: b, speed_mean: 1.5}
model: {d_model: 8, d_latent: 4}
train: {epochs: 3, loss: {kl: 0.5}}
eval: {k: 5, held_out: b}
"""


def test_load_and_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(BASE)
    cfg = load_config(p)
    assert cfg.seed == 1 and cfg.train.meta.epochs == 3 and cfg.train.loss.kl == 0.5
    assert cfg.model.d_model == 8 and cfg.eval.held_out == "b"
    again = tmp_path / "d.yaml"
    again.write_text(dump_config(cfg))
    assert load_config(again).digest() == cfg.digest()


def test_overrides_and_seed(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(BASE)
    cfg = load_config(p, ["train.epochs=9", "train.metamix=false", "model.activation=tanh"], seed=42)
    assert cfg.train.meta.epochs == 9 and cfg.train.meta.metamix is False
    assert cfg.model.activation == "tanh" and cfg.seed == 42
    assert cfg.digest() != load_config(p).digest()
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


@pytest.mark.parametrize("raw", [
    {"dataset": {}},
    {"seed": 0, "extra": {}},
    {"seed": 0, "model": {"d_model": 7}},
    {"seed": 0, "train": {"meta_learning": False, "metamix": True}},
    {"seed": 0, "dataset": {"t_obs": 20, "t_pre": 20}},
    {"seed": 0, "eval": {"k": 0}},
    {"seed": 0, "dataset": {"synth": [{"domain_id": "a", "agents_per_scene": 0}]}},
])
def test_invalid(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
