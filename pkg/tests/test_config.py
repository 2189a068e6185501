import pytest
from hypothesis import given, settings, strategies as st

from rtta.config import SCHEMA, ConfigError, ExperimentConfig, emit_config, parse_config


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert cfg["adaptation.beta"] == 6.0
    assert cfg["attack.epsilon"] == 8 / 255 and cfg["attack.alpha"] == 2 / 255
    assert cfg["adaptation.epochs"] == 30 and cfg["attack.steps"] == 5 and cfg["evaluation.steps"] == 20
    ac = cfg.adaptation_config()
    assert ac.method_cfg.method == "tgra" and ac.schedule.decay_epochs == (10, 25, 30)


def test_sections_comments_and_fractions():
    cfg = parse_config("# a comment\n[attack]\nepsilon = 4/255\n; another\n[adaptation]\nbeta=12\nmethod = trades_u\n")
    assert cfg["attack.epsilon"] == 4 / 255 and cfg["adaptation.beta"] == 12.0
    assert cfg.adaptation_config().method_cfg.method == "trades_u"


@pytest.mark.parametrize("text, line", [
    ("[corruption]\nseverity = 5\n", 2),
    ("[adaptation]\nbeta = 6\nbogus = 1\n", 3),
    ("[nowhere]\n", 1),
    ("beta = 6\n", 1),
    ("[adaptation]\nepochs = three\n", 2),
    ("[adaptation]\nbeta = 6\nbeta = 7\n", 3),
    ("[adaptation]\njust words\n", 2),
    ("[attack]\nepsilon = 0.01\nalpha = 0.5\n", 3),
    ("[split]\nfractions = 0.5, 0.4\n", 2),
    ("[model]\narchitecture = cnn\nwidths = 8, 16, 32, 64\n", 3),
    ("[adaptation]\nmethod = mart\n", 2),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_overrides():
    cfg = parse_config("[adaptation]\nbeta = 6\n", ["adaptation.beta=12", "run.seed=4"])
    assert cfg["adaptation.beta"] == 12.0 and cfg.seed == 4
    with pytest.raises(ConfigError, match="--set #1"):
        parse_config("", ["adaptation.nope=1"])
    with pytest.raises(ConfigError, match="--set #2"):
        parse_config("", ["run.seed=1", "noequals"])


def test_round_trip_defaults():
    cfg = parse_config("")
    assert parse_config(emit_config(cfg, "header line")) == cfg


_override = st.sampled_from([
    "adaptation.beta=12", "adaptation.beta=0", "attack.epsilon=4/255", "attack.alpha=1/255",
    "adaptation.method=trades_u", "corruption.severity=1", "model.architecture=mlp", "model.widths=16",
    "split.fractions=0.7,0.3", "split.stratified=false", "evaluation.attacks=pgd,square",
    "sweep.betas=2,4,6,8,10,12", "adaptation.decay_epochs=5", "run.out=/tmp/x y", "data.texture=0.123456789",
])


@settings(max_examples=60, deadline=None)
@given(st.lists(_override, max_size=6), st.integers(0, 10**6))
def test_round_trip_property(overrides, seed):
    cfg = parse_config("", overrides + [f"run.seed={seed}"])
    assert parse_config(emit_config(cfg)) == cfg


def test_emit_lists_every_key():
    text = emit_config(parse_config(""))
    for sec, keys in SCHEMA.items():
        assert f"[{sec}]" in text
        for key in keys:
            assert f"\n{key} = " in text


def test_builders():
    cfg = parse_config("[model]\narchitecture = mlp\nwidths = 32, 16\n[corruption]\nseverity = 1\n")
    spec = cfg.model_spec()
    assert spec.widths == (192, 32, 16, 10)
    assert cfg.corruption_spec().noise_sigma == 0.03
    assert cfg.eval_threat().init == "uniform_ball" and cfg.threat().init == "none"
