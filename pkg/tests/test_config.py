import pytest

from knpl.config import PipelineConfig
from knpl.errors import ConfigError


def test_defaults_roundtrip(tmp_path):
    cfg = PipelineConfig()
    path = tmp_path / "c.ini"
    cfg.write(path)
    again = PipelineConfig.load(path)
    assert again == cfg
    assert again.canonical() == cfg.canonical()


def test_desk_defaults():
    cfg = PipelineConfig()
    assert cfg.attribution.steps == 20
    assert cfg.attribution.share_fraction == 0.2
    assert cfg.probe.enhance_factor == 2.0
    assert cfg.probe.tau == 0.7
    assert cfg.probe.tau_grid == (0.5, 0.6, 0.7, 0.8, 0.9)


def test_partial_file_and_types():
    cfg = PipelineConfig.from_text("[world]\nseed = 11\n[probe]\ntau_grid = 0.6, 0.8\nconditions = no_cot\n")
    assert cfg.world.seed == 11 and cfg.world.n_entities == 100
    assert cfg.probe.tau_grid == (0.6, 0.8)
    assert cfg.probe.conditions == ("no_cot",)
    assert PipelineConfig.from_text("[conflict]\nenabled = no\n").conflict.enabled is False


@pytest.mark.parametrize("text", [
    "[world]\nseeds = 1\n",
    "[nonsense]\nx = 1\n",
    "[world]\nseed = abc\n",
    "[probe]\ntargets = w1, w9\n",
    "[probe]\ntau = 1.5\n",
    "[probe]\nenhance_factor = 1.0\n",
    "[probe]\npositions = all\n",
    "[model]\nd_model = 30\nn_heads = 4\n",
    "[conflict]\nenabled = maybe\n",
    "[world\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        PipelineConfig.from_text(text)


def test_missing_file():
    with pytest.raises(ConfigError):
        PipelineConfig.load("/nonexistent/knpl.ini")


def test_digests_track_sections():
    base = PipelineConfig()
    other = PipelineConfig.from_text("[probe]\ntau = 0.8\n")
    assert base.digest(["world", "train"]) == other.digest(["world", "train"])
    assert base.digest(["probe"]) != other.digest(["probe"])
    seeded = base.with_seed(3)
    assert seeded.world.seed == 3 and seeded.train.seed == 3
    assert seeded.digest(["world"]) != base.digest(["world"])


def test_derived_objects():
    cfg = PipelineConfig()
    mc = cfg.model_config(50)
    assert (mc.vocab_size, mc.n_layers, mc.d_ff) == (50, 2, 128)
    assert cfg.train_config().few_shot_k == cfg.world.few_shot_k
    assert [c.kind for c in cfg.conditions()] == ["no_cot", "zero_shot", "few_shot"]
