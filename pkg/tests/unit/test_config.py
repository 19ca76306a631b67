import pytest

from app.core.config import PRESETS, build_config, config_to_text, load_config, parse_config_text
from app.core.errors import ConfigError
from app.models.training import Stage, TrainConfig


def test_defaults_follow_the_toy_preset():
    config = build_config({})
    for key, value in PRESETS["toy"].items():
        assert getattr(config, key) == value


def test_paper_preset_fills_unset_keys_only():
    config = build_config({"preset": "paper", "warmup": 50})
    assert config.warmup == 50
    assert config.peak_lr == PRESETS["paper"]["peak_lr"]
    assert config.average_best == PRESETS["paper"]["average_best"]


def test_parse_key_value_lines():
    entries = parse_config_text("seed = 3\n# comment\n\nalpha=5.0  # trailing\n")
    assert entries == {"seed": "3", "alpha": "5.0"}
    config = build_config(entries)
    assert config.seed == 3
    assert config.alpha == 5.0


@pytest.mark.parametrize(
    "text",
    ["no_such_key = 1\n", "seed = 1\nseed = 2\n", "just words\n", " = 4\n"],
)
def test_malformed_config_text_is_rejected(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError):
        build_config({"p_star": "1.5"})
    with pytest.raises(ConfigError):
        build_config({"p_star": "sometimes"})
    with pytest.raises(ConfigError):
        build_config({"d_model": 10, "heads": 4})
    with pytest.raises(ConfigError):
        build_config({"divergence": "l2"})


def test_replacement_probability_is_normalized():
    assert build_config({"p_star": "0.20"}).p_star == "0.2"
    assert build_config({"p_star": "1"}).p_star == "1.0"
    assert build_config({"p_star": "dynamic"}).p_star == "dynamic"


def test_overrides_win_over_the_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 3\nbeam = 2\n")
    config = load_config(path, {"seed": 9, "beam": None})
    assert (config.seed, config.beam) == (9, 2)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_manifest_round_trips_through_the_parser():
    config = build_config({"seed": 4, "p_star": "0.6", "divergence": "jsd"})
    entries = parse_config_text(config_to_text(config))
    assert build_config({k: v for k, v in entries.items() if v != "None"}) == config


def test_stage_settings_pick_their_own_beta_and_epochs():
    config = build_config({"adam_beta2_mt": 0.99, "mt_max_epochs": 7, "p_star": "0.2"})
    mt = TrainConfig.from_run(config, Stage.MT)
    assert (mt.adam_beta2, mt.max_epochs) == (0.99, 7)
    st = TrainConfig.from_run(config, Stage.ST)
    assert st.policy.mode == "fixed" and st.policy.value == 0.2


def test_baseline_needs_single_branch_no_loss_and_no_replacement():
    config = build_config({"single_branch": True, "alpha": 0.0, "p_star": "0", "divergence": "none"})
    assert TrainConfig.from_run(config, Stage.ST).is_baseline
    assert not TrainConfig.from_run(build_config({}), Stage.ST).is_baseline
