import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from ditto.agent import ActorCritic, Actor, parameter_count
from ditto.baselines import (
    AdversarialReward, PixelBCPolicy, dbc_loss, load_pixel_bc, policy_entropy, stack_frames, train_dbc, train_dgail,
    train_pixel_bc,
)
from ditto.envsim import Episode
from ditto.worldmodel import Imagined, ModelState


def test_dbc_uniform_policy():
    actor = Actor(6, 5, hidden=8)
    with torch.no_grad():
        actor.net[-1].weight.zero_()
        actor.net[-1].bias.zero_()
    loss = dbc_loss(torch.randn(10, 6), torch.randint(0, 5, (10,)), actor, 0.1)
    assert loss.item() == pytest.approx(0.9 * math.log(5), abs=1e-6)


def test_dbc_perfect_fit():
    actor = Actor(6, 3, hidden=8)
    with torch.no_grad():
        actor.net[-1].weight.zero_()
        actor.net[-1].bias.copy_(torch.tensor([200.0, 0.0, 0.0]))
    assert dbc_loss(torch.randn(4, 6), torch.zeros(4, dtype=torch.long), actor, 0.0).item() == pytest.approx(0.0)


def test_default_bc_entropy():
    assert tiny_config().bc.entropy == 0.1


def test_train_dbc_fits_expert(tiny_setup, tmp_path):
    _, _, model, _, store = tiny_setup
    run = train_dbc(store, model, tiny_config(bc__lr=3e-3), steps=150, out_dir=tmp_path)
    assert run.curves[-1]["actor_loss"] < run.curves[0]["actor_loss"]
    assert (tmp_path / "policy.ckpt").exists() and (tmp_path / "curves.csv").exists()
    ditto = ActorCritic.create(model.state_dim, 5, tiny_config().agent)
    assert parameter_count(run.agent.actor) == parameter_count(ditto.actor)


def _fake_rollout(B, H, D, A):
    states = ModelState(torch.randn(B, H + 1, D - 4), torch.zeros(B, H + 1, 4))
    return Imagined(states, torch.randint(0, A, (B, H)))


def test_adversarial_reward_at_init_is_log2():
    cfg = tiny_config()
    model = AdversarialReward(10, 5, cfg)
    with torch.no_grad():
        for p in model.D.parameters():
            p.zero_()
    r = model.rewards(_fake_rollout(3, 4, 10, 5), None)
    torch.testing.assert_close(r, torch.full((3, 4), math.log(2)))


def test_collapse_flag():
    cfg = tiny_config(gail__collapse_window=5)
    model = AdversarialReward(10, 5, cfg)
    rollout = _fake_rollout(2, 3, 10, 5)
    with torch.no_grad():
        model.D.net[-1].weight.zero_()
        model.D.net[-1].bias.fill_(-50.0)
    for _ in range(4):
        model.rewards(rollout, None)
    assert not model.collapsed and model.low_streak == 4
    with torch.no_grad():
        model.D.net[-1].bias.fill_(0.0)
    model.rewards(rollout, None)
    assert model.low_streak == 0
    with torch.no_grad():
        model.D.net[-1].bias.fill_(-50.0)
    for _ in range(5):
        model.rewards(rollout, None)
    assert model.collapsed


def test_train_dgail_interleaves(tiny_setup):
    _, _, model, _, store = tiny_setup
    run = train_dgail(store, model, tiny_config(agent__horizon=4), steps=3)
    assert run.report["discriminator_updates"] == 3
    assert isinstance(run.report["adversarial_collapse"], bool)
    assert all("disc_loss" in c for c in run.curves)


def test_stack_frames():
    obs = np.arange(4)[:, None, None, None] * np.ones((4, 2, 2, 1), np.uint8)
    out = stack_frames(obs, 3)
    assert out.shape == (4, 3, 2, 2, 1)
    assert out[0, :, 0, 0, 0].tolist() == [0, 0, 0] and out[3, :, 0, 0, 0].tolist() == [1, 2, 3]


def test_pixel_bc_initial_loss_and_memorization(tiny_setup, tmp_path):
    env, _, _, episodes, _ = tiny_setup
    single = [Episode(episodes[0].observations[:2], episodes[0].actions[:1])]
    run = train_pixel_bc(single, tiny_config(bc__lr=1e-3), env.spec, steps=60, out_dir=tmp_path)
    assert run.curves[0]["loss"] == pytest.approx(math.log(5), abs=0.3)
    assert run.curves[-1]["accuracy"] == 1.0
    model = load_pixel_bc(tmp_path / "policy.ckpt")
    x = torch.as_tensor(single[0].observations[:1])
    torch.testing.assert_close(model(x), run.model(x))


def test_pixel_bc_policy_frame_stack(tiny_setup):
    env, _, _, episodes, _ = tiny_setup
    run = train_pixel_bc(episodes[:1], tiny_config(bc__frame_stack=2), env.spec, steps=2)
    policy = PixelBCPolicy(run.model, greedy=True)
    policy.reset(2, 0)
    obs = np.stack([episodes[0].observations[0]] * 2)
    assert policy.act(obs).shape == (2,) and policy.act(obs).shape == (2,)


def test_pixel_bc_needs_episodes(tiny_setup):
    env = tiny_setup[0]
    with pytest.raises(ValueError):
        train_pixel_bc([], tiny_config(), env.spec, steps=1)


def test_policy_entropy_uniform():
    assert policy_entropy(torch.zeros(2, 5)).tolist() == pytest.approx([math.log(5)] * 2)
