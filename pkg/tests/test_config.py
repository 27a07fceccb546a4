import pytest

from taillight.config import ConfigError, RunConfig, dump_text, from_mapping, load_config, parse_text, to_mapping

from conftest import CONFIGS


def test_parse_comments_and_types():
    cfg = from_mapping(parse_text("# top\nlr = 0.5  # inline\nstage_channels = 4, 8\naugment = no\n\nsplit_l = 1\n"))
    assert cfg.train.lr == 0.5
    assert cfg.model.backbone.stage_channels == (4, 8)
    assert cfg.train.augment is False


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="lerning_rate"):
        parse_text("lerning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        parse_text("just words\n")
    with pytest.raises(ConfigError):
        from_mapping({"lr": "fast"})


@pytest.mark.parametrize("text", ["bootstrap_ratio = 0", "bootstrap_ratio = 1.5", "stage = 4",
                                  "bootstrap_mode = median", "epochs = 1, 2", "pool = max", "grad_clip = -1"])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        from_mapping(parse_text(text))


@pytest.mark.parametrize("name", ["default", "tiny", "full"])
def test_shipped_configs_round_trip(name):
    cfg = load_config(CONFIGS / f"{name}.cfg")
    assert from_mapping(parse_text(dump_text(cfg))) == cfg


def test_defaults_file_matches_builtins():
    assert load_config(CONFIGS / "default.cfg") == RunConfig()
    defaults = to_mapping(RunConfig())
    assert defaults["hidden_size"] == "256" and defaults["bootstrap_ratio"] == "0.3" and defaults["window"] == "16"


def test_replace_overrides():
    cfg = RunConfig().replace(seed=4, split_l=3)
    assert cfg.train.seed == 4 and cfg.model.backbone.split_l == 3
