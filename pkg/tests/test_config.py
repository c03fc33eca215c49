import pytest

from higrpo.config import CONFIG_ENV, Config, ConfigError, load_config, parse_config_text, parse_members
from higrpo.reward import ALL_MEMBERS


def test_defaults():
    c = Config()
    assert (c.group_size, c.iterations, c.lam, c.beta, c.eps_adv) == (8, 1200, 1.0, 0.01, 1e-4)
    assert c.lr == 5e-3 and c.side == 4 and c.colors == 7 and c.features == 512
    lc = c.loss_config()
    assert (lc.clip_low, lc.clip_high) == (0.2, 0.28)
    assert c.replace(decoupled_clip=False).loss_config().clip_high == 0.2


@pytest.mark.parametrize("key,value", [("group_size", 1), ("beta", -1.0), ("eps_adv", 0.0), ("lr", 0.0),
                                       ("aggregation", "sum"), ("ratio_level", "word"), ("density", -1.0),
                                       ("iterations", -1), ("clip_low", 1.0), ("difficulty_mix", "odd:1")])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        Config(**{key: value})


def test_members_parsing():
    assert parse_members("all") == ALL_MEMBERS
    assert parse_members("none") == frozenset()
    assert parse_members("hpm,part") == {"hpm1", "hpm2", "part2"}
    assert parse_members("hpm1, consist2") == {"hpm1", "consist2"}
    with pytest.raises(ConfigError):
        parse_members("aesthetic")


def test_file_and_overrides(tmp_path, monkeypatch):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nseed = 3\nlambda = 0.5\naggregation = sequence\nreasoning = off\n")
    c = load_config(path, {"seed": "9"})
    assert c.run_seed == 9 and c.lam == 0.5 and c.aggregation == "sequence_mean" and c.reasoning is False
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert load_config().run_seed == 3
    with pytest.raises(ConfigError):
        load_config(None, {"warp_drive": "1"})
    with pytest.raises(ConfigError):
        load_config(None, {"group_size": "eight"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_text_round_trip():
    c = Config(run_seed=4, lam=0.25, reward_members="hpm2,unified2", reasoning=False)
    again = load_config(None, parse_config_text(c.to_text()))
    assert again == c


def test_bad_line():
    with pytest.raises(ConfigError):
        parse_config_text("seed 4\n")
