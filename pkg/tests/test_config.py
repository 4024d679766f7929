import pytest

from ditto.config import TrainConfig, parse_flat


def test_roundtrip_text():
    cfg = TrainConfig().updated(seed=3, agent__horizon=9, reward__kind="l2", agent__greedy=True)
    again = TrainConfig.loads(cfg.dumps())
    assert again == cfg and again.digest() == cfg.digest()


def test_defaults_match_reference_settings():
    cfg = TrainConfig()
    assert (cfg.wm.batch_size, cfg.wm.seq_len, cfg.wm.beta, cfg.wm.delta) == (50, 50, 0.1, 0.8)
    assert (cfg.data.wm_episodes, cfg.data.expert_episodes) == (200, 10)


def test_parse_flat_comments_and_errors():
    text = "# comment\nagent.horizon = 9  # inline\n\nseed=4\n"
    assert parse_flat(text) == {"agent.horizon": "9", "seed": "4"}
    with pytest.raises(ValueError, match="line 2"):
        parse_flat("seed = 1\nnot a pair\n")


def test_type_coercion():
    cfg = TrainConfig()
    cfg.set("agent.steps", "1e3")
    cfg.set("agent.greedy", "yes")
    cfg.set("wm.beta", "0.5")
    assert cfg.agent.steps == 1000 and cfg.agent.greedy is True and cfg.wm.beta == 0.5
    with pytest.raises(ValueError):
        cfg.set("agent.greedy", "maybe")


@pytest.mark.parametrize("key", ["agent.nope", "nosection.x"])
def test_unknown_keys(key):
    with pytest.raises(KeyError):
        TrainConfig().set(key, "1")


@pytest.mark.parametrize("override", [
    {"reward__kind": "bogus"}, {"agent__kind": "bogus"}, {"wm__delta": 1.5},
    {"wm__beta": -1}, {"agent__gamma": 2}, {"agent__horizon": 0},
])
def test_validation(override):
    with pytest.raises(ValueError):
        TrainConfig().updated(**override)
