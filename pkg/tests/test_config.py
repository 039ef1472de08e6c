import pytest

from capskit.config import (
    ExperimentConfig,
    apply_overrides,
    dump_config,
    from_mapping,
    load_config,
    parse_value,
)
from capskit.unet import ConfigError


def test_defaults():
    cfg = load_config(None)
    assert cfg == ExperimentConfig()
    assert cfg.caps.beta == 0.25 and cfg.caps.temperature == 1e-3
    assert cfg.run.seeds == (0, 1, 2)
    assert cfg.net_config("maxpool").sampler.kind == "maxpool"
    assert cfg.train_config(7).seed == 7


def test_load_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\nsamplers = caps, maxpool\nseeds = 4\n\n[caps]\nbeta = 0.125\n"
                 "use_lpf = no\n\n[train]\nmax_epochs = 3\n")
    cfg = load_config(p)
    assert cfg.run.samplers == ("caps", "maxpool")
    assert cfg.run.seeds == (4,)
    assert cfg.caps.beta == 0.125 and cfg.caps.use_lpf is False
    assert cfg.train.max_epochs == 3
    assert cfg.protocol == ExperimentConfig().protocol


@pytest.mark.parametrize("text", [
    "[run]\nbogus = 1\n",
    "[nope]\nx = 1\n",
    "[caps]\nbeta = 0.5\n",
    "[caps]\nuse_ca = maybe\n",
    "[run]\nsamplers = strided\n",
    "[train]\nseed = 3\n",
    "[train]\nmax_epochs = ten\n",
    "stray = 1\n",
    "[protocol]\ncrop_size = 32\nmargin = 8\n",
    "[protocol]\ncrop_size = 66\n",
])
def test_rejects_bad_files(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), seed=5, out="o", sampler="aps", beta=0.0,
                          temperature=1.0, test_set="bdt")
    assert cfg.run.seeds == (5,) and cfg.run.out == "o" and cfg.run.samplers == ("aps",)
    assert cfg.caps.beta == 0.0 and cfg.caps.temperature == 1.0
    assert cfg.run.sets == ("bdt",)
    assert apply_overrides(cfg) is cfg


def test_dump_round_trip(tmp_path):
    cfg = from_mapping({"caps": {"temperature": "0.01"}, "raw": {"radius": "2, 5.5"}})
    p = tmp_path / "c.ini"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_parse_value():
    assert parse_value("1, 2", (0, 0)) == (1, 2)
    assert parse_value("1e-4, 1", (0.5,)) == (1e-4, 1.0)
    assert parse_value("TRUE", False) is True
    assert parse_value(" x ", "") == "x"
