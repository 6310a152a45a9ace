import pytest

from gdfd.config import (KEYS, ConfigError, ConfigTypeError, UnknownKeyError, distill_config,
                         format_config, gen_train_config, loss_weights, parse_config)


def test_empty_file_gives_defaults():
    cfg = parse_config("")
    assert cfg["lambda_tv"] == 6e-3
    assert cfg["lambda_l2"] == 1.5e-5
    assert cfg["lambda_s"] == 10.0
    assert cfg["temperature"] == 3.0
    assert (cfg["lr"], cfg["beta1"], cfg["beta2"], cfg["adam_eps"]) == (1e-3, 0.9, 0.999, 1e-8)
    assert cfg["momentum"] == 0.9 and cfg["decay"] == 0.977


def test_cli_beats_file_beats_default():
    cfg = parse_config("lambda_s = 10\nlambda_tv = 0.1\n", ["lambda_s=1"])
    assert cfg["lambda_s"] == 1.0
    assert cfg["lambda_tv"] == 0.1
    assert cfg["lambda_l2"] == 1.5e-5


def test_comments_blank_lines_and_lists():
    text = "# header\n\n  steps = 10   # trailing\ngen_widths = 4, 4,2\nstats = running\n"
    cfg = parse_config(text)
    assert cfg["steps"] == 10
    assert cfg["gen_widths"] == (4, 4, 2)
    assert cfg["stats"] == "running"


def test_type_error_names_key_and_line():
    with pytest.raises(ConfigTypeError) as info:
        parse_config("steps = 5\nlambda_s = banana\n")
    assert info.value.key == "lambda_s" and info.value.line == 2
    assert "lambda_s" in str(info.value) and "line 2" in str(info.value)


def test_unknown_key_rejected_in_file_and_overrides():
    with pytest.raises(UnknownKeyError) as info:
        parse_config("lamda_s = 1\n")
    assert info.value.line == 1
    with pytest.raises(UnknownKeyError):
        parse_config("", ["nope=3"])
    with pytest.raises(UnknownKeyError):
        parse_config("", {"nope": 3})


def test_malformed_lines():
    with pytest.raises(ConfigError) as info:
        parse_config("steps 10\n")
    assert info.value.line == 1
    with pytest.raises(ConfigError):
        parse_config("steps =\n")
    with pytest.raises(ConfigTypeError):
        parse_config("stats = magic\n")
    with pytest.raises(ConfigTypeError):
        parse_config("steps = 1.5\n")


def test_format_round_trip():
    cfg = parse_config("gen_widths = 8,4\nlambda_s = 2.5\n", ["steps=7"])
    assert parse_config(format_config(cfg)) == cfg
    assert set(cfg) == set(KEYS)


def test_typed_views():
    cfg = parse_config("", ["lambda_s=3", "gen_steps=9", "steps=50", "warmup=5"])
    assert loss_weights(cfg).lambda_s == 3
    g = gen_train_config(cfg, seed=4)
    assert (g.steps, g.seed, g.lr, g.beta2) == (9, 4, 1e-3, 0.999)
    d = distill_config(cfg, seed=2)
    assert (d.steps, d.warmup, d.seed, d.temperature) == (50, 5, 2, 3.0)
