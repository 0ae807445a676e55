import json

import pytest

from fsrfer.config import PROFILES, ConfigError, RunConfig, parse_config


def write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text, encoding="utf-8")
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, ""))
    f = cfg.fsr
    assert (f.k, f.p, f.sigma, f.r, f.lr) == (2.0, 6.0, 1.5, 1.0, 2e-4)
    assert f.lr_halving_iters == [20000, 50000, 100000, 200000]
    assert f.blocks == 6 and f.beta1 == 0.0
    assert cfg.data.scales == [2, 3, 4, 5, 6, 7, 8] and cfg.data.canonical == 100
    assert cfg.fer.embed_dim == 128 and cfg.fer.spd_dim == 32
    assert cfg.profile == "paper" and cfg.seed == 42


def test_no_file_equals_empty_file(tmp_path):
    assert parse_config() == parse_config(write(tmp_path, ""))


def test_override_beats_file(tmp_path):
    path = write(tmp_path, "[fsr]\nsigma = 3.0\nk = 4\n")
    cfg = parse_config(path, [("fsr.sigma", "2.0")])
    assert cfg.fsr.sigma == 2.0 and cfg.fsr.k == 4.0


def test_file_beats_profile(tmp_path):
    cfg = parse_config(write(tmp_path, 'profile = "smoke"\n[fsr]\niters = 77\n'))
    assert cfg.profile == "smoke" and cfg.fsr.iters == 77 and cfg.fsr.channels == PROFILES["smoke"]["fsr.channels"]


def test_profile_argument_wins(tmp_path):
    assert parse_config(write(tmp_path, 'profile = "smoke"\n'), profile="paper").profile == "paper"


@pytest.mark.parametrize("key", ["fsr.gamma", "gamma", "model.depth", "fsr.k.x"])
def test_unknown_key_named(key):
    with pytest.raises(ConfigError) as exc:
        parse_config(overrides=[(key, "1")])
    assert exc.value.key == key and key in str(exc.value)


def test_unknown_key_in_file(tmp_path):
    with pytest.raises(ConfigError, match="fsr.gamma"):
        parse_config(write(tmp_path, "[fsr]\ngamma = 0.1\n"))


@pytest.mark.parametrize("key,value", [("fsr.iters", "many"), ("fsr.reweight", "maybe"),
                                       ("fsr.sigma", "x"), ("data.scales", "2,nine")])
def test_type_mismatch(key, value):
    with pytest.raises(ConfigError, match=key):
        parse_config(overrides=[(key, value)])


def test_toml_type_mismatch(tmp_path):
    with pytest.raises(ConfigError, match="fsr.iters"):
        parse_config(write(tmp_path, '[fsr]\niters = "ten"\n'))


@pytest.mark.parametrize("key,value", [("fsr.sigma", "1.0"), ("fsr.r", "0.5"), ("fsr.k", "0"),
                                       ("data.scales", "1,2"), ("eval.methods", "hr,isr"),
                                       ("fer.spd_dim", "100"), ("profile", "huge")])
def test_invariant_violations(key, value):
    with pytest.raises(ConfigError):
        parse_config(overrides=[(key, value)])


def test_list_syntax():
    cfg = parse_config(overrides=[("data.scales", "5..8"), ("eval.methods", "hr,bicubic"),
                                  ("fsr.reweight", "off"), ("fsr.lr_halving_iters", "[10, 20]")])
    assert cfg.data.scales == [5, 6, 7, 8]
    assert cfg.eval.methods == ["hr", "bicubic"]
    assert cfg.fsr.reweight is False
    assert cfg.fsr.lr_halving_iters == [10, 20]


def test_invalid_toml(tmp_path):
    with pytest.raises(ConfigError, match="invalid TOML"):
        parse_config(write(tmp_path, "[fsr\n"))


def test_dumps_round_trip():
    cfg = parse_config(profile="smoke", overrides=[("seed", 7)])
    d = json.loads(cfg.dumps())
    assert d["seed"] == 7 and d["profile"] == "smoke" and d["fsr"]["blocks"] == 2
    again = RunConfig()
    assert set(d) == set(again.to_dict())
