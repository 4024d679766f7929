import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def patrol():
    from ditto.envsim import make_env

    return make_env("patrol")


TINY_WM = {"wm__deter": 16, "wm__hidden": 16, "wm__cnn_depth": 4, "wm__groups": 4, "wm__classes": 3,
           "wm__batch_size": 4, "wm__seq_len": 8, "wm__log_every": 0,
           "agent__hidden": 32, "agent__batch_size": 8, "agent__log_every": 0,
           "bc__batch_size": 16}


def tiny_config(**overrides):
    from ditto.config import TrainConfig

    return TrainConfig().updated(**{**TINY_WM, **overrides})


@pytest.fixture(scope="session")
def tiny_setup():
    """Untrained tiny world model on the patrol env plus two encoded expert episodes."""
    from ditto.envsim import ScriptedExpert, collect_episodes, make_env
    from ditto.worldmodel import WorldModel, encode_dataset

    env = make_env("patrol")
    cfg = tiny_config()
    torch.manual_seed(0)
    model = WorldModel(env.spec, cfg.wm)
    episodes = collect_episodes(ScriptedExpert(env), env, 2, seed=0)
    store = encode_dataset(episodes, model, encode_seed=0)
    return env, cfg, model, episodes, store
