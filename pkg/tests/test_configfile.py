import pytest

from lpa import configfile
from lpa.config import PRESETS, ConfigError, get_preset, parse_record, render_record
from lpa.configfile import DataSpec, ExperimentConfig
from lpa.training import TrainConfig


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_round_trip_presets(name):
    exp = ExperimentConfig(get_preset(name), TrainConfig(learning_rate=1e-4, seed=3), DataSpec("x.txt"))
    assert configfile.parse(configfile.render(exp)) == exp


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_record_round_trip(name):
    cfg, extra = parse_record(render_record(get_preset(name), {"state.step": 5}))
    assert cfg == get_preset(name) and extra == {"state.step": "5"}


def test_preset_expands_before_overrides():
    text = "[model]\npreset = desk\nlayer_count = 3\n[placement]\nmode = attn\nr = 8\nattn_sublayers = K,V\n"
    exp = configfile.parse(text)
    assert exp.model == get_preset("desk").replace(layer_count=3).with_placement("attn", 8, ("K", "V"))


@pytest.mark.parametrize("text,match", [
    ("[model]\nwidth = 3\n", "width"),
    ("[train]\nmomentum = 0.9\n", "momentum"),
    ("[placement]\nrank = 3\n", "rank"),
    ("[data]\nformat = txt\n", "format"),
    ("[extras]\na = 1\n", "extras"),
    ("[data]\nsplit = 0.5,0.5,0.5\n", "split"),
    ("[train]\nbatch_size = many\n", "batch_size"),
    ("[model]\npreset = nope\n", "unknown preset"),
])
def test_rejects(text, match):
    with pytest.raises(ConfigError, match=match):
        configfile.parse(text)


def test_load_save(tmp_path):
    exp = ExperimentConfig(get_preset("desk-low-ffn-r16"))
    configfile.save(exp, tmp_path / "e.cfg")
    assert configfile.load(tmp_path / "e.cfg") == exp
