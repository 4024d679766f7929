"""Comparison agents: latent behavior cloning (D-BC), adversarial imitation in
the world model (D-GAIL) and end-to-end behavior cloning from pixels.

D-BC and D-GAIL use the exact actor class of the DITTO agent; D-GAIL also
reuses its actor-critic update and only swaps the reward model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .agent import ActorCritic, AgentRun, RewardModel, mlp, save_agent, train_agent, write_agent_csv
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .datastore import ExpertWindows, LatentStore
from .envsim import EnvSpec, EnvState, Episode, Policy
from .rewards import Discriminator, RewardSpec, adversarial_reward, discriminator_loss
from .worldmodel import Encoder, Imagined, WorldModel, preprocess

log = logging.getLogger(__name__)


def policy_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, -1)
    return -(logp.exp() * logp).sum(-1)


# ---------------------------------------------------------------------------
# D-BC


def dbc_loss(states: torch.Tensor, actions: torch.Tensor, actor: nn.Module, eta_bc: float = 0.1) -> torch.Tensor:
    """E[-log pi(a | s) - eta_bc * H(pi(s))] over expert latent-action pairs."""
    logits = actor(states)
    nll = F.cross_entropy(logits, actions.long(), reduction="none")
    return (nll - eta_bc * policy_entropy(logits)).mean()


def train_dbc(store: LatentStore, world_model: WorldModel, config: TrainConfig, steps: int | None = None,
              out_dir: str | Path | None = None) -> AgentRun:
    store.check_provenance(world_model.checkpoint_id)
    cfg = config.bc
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(config.seed)
    agent = ActorCritic.create(world_model.state_dim, world_model.spec.num_actions, config.agent, store.provenance, "dbc")
    opt = torch.optim.Adam(agent.actor.parameters(), lr=cfg.lr)
    states, actions = store.flat_pairs()
    states, actions = torch.as_tensor(states), torch.as_tensor(actions)
    rng = np.random.default_rng(config.seed)
    curves = []
    for step in range(1, steps + 1):
        idx = torch.as_tensor(rng.integers(len(states), size=cfg.batch_size))
        loss = dbc_loss(states[idx], actions[idx], agent.actor, cfg.entropy)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            ent = policy_entropy(agent.actor(states[idx])).mean().item()
        curves.append({"step": step, "actor_loss": loss.item(), "entropy": ent})
    if out_dir is not None:
        save_agent(Path(out_dir) / "policy.ckpt", agent, config, steps)
        write_agent_csv(Path(out_dir) / "curves.csv", curves)
    return AgentRun(agent, curves)


# ---------------------------------------------------------------------------
# D-GAIL


class AdversarialReward(RewardModel):
    """Discriminator-based reward; one discriminator step per agent batch.

    The reward for rollout step t scores the pair (s_t, a_t).  A run is
    flagged as collapsed once the mean reward stays below ``threshold`` for
    ``window`` consecutive updates.
    """

    def __init__(self, state_dim: int, num_actions: int, config: TrainConfig):
        g = config.gail
        self.D = Discriminator(state_dim, num_actions, g.disc_hidden, g.disc_layers)
        self.opt = torch.optim.Adam(self.D.parameters(), lr=g.disc_lr)
        self.clip = config.reward.adv_clip
        self.threshold = g.collapse_threshold
        self.window = g.collapse_window
        self.low_streak = 0
        self.collapsed = False
        self.updates = 0

    def update(self, rollout: Imagined, expert: ExpertWindows) -> dict[str, float]:
        H = rollout.actions.shape[1]
        e_states = torch.cat([torch.as_tensor(expert.h), torch.as_tensor(expert.z)], -1)[:, :H].float()
        e_states = e_states.reshape(-1, e_states.shape[-1])
        e_actions = torch.as_tensor(expert.actions).reshape(-1)
        l_states = rollout.states.flat()[:, :H].reshape(len(e_states), -1).detach()
        l_actions = rollout.actions.reshape(-1)
        loss = discriminator_loss(self.D, e_states, e_actions, l_states, l_actions)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.updates += 1
        return {"disc_loss": loss.item()}

    def rewards(self, rollout, expert):
        H = rollout.actions.shape[1]
        r = adversarial_reward(rollout.states.flat()[:, :H], rollout.actions, self.D, self.clip)
        if r.mean().item() < self.threshold:
            self.low_streak += 1
            if self.low_streak >= self.window:
                self.collapsed = True
        else:
            self.low_streak = 0
        return r


def train_dgail(store: LatentStore, world_model: WorldModel, config: TrainConfig, steps: int | None = None,
                out_dir: str | Path | None = None) -> AgentRun:
    """Actor-critic on the adversarial reward, sharing DITTO's update code."""
    torch.manual_seed(config.seed)
    reward_model = AdversarialReward(world_model.state_dim, world_model.spec.num_actions, config)
    run = train_agent(store, world_model, RewardSpec("adversarial"), config, steps=steps, out_dir=out_dir,
                      reward_model=reward_model, kind="dgail")
    run.report["adversarial_collapse"] = reward_model.collapsed
    run.report["discriminator_updates"] = reward_model.updates
    return run


# ---------------------------------------------------------------------------
# Pixel BC


class PixelBC(nn.Module):
    """World-model-style CNN encoder followed by the agent MLP head."""

    def __init__(self, spec: EnvSpec, depth: int = 32, hidden: int = 256, layers: int = 2, frame_stack: int = 1):
        super().__init__()
        self.spec = spec
        self.frame_stack = frame_stack
        stacked = replace(spec, obs_channels=spec.obs_channels * frame_stack)
        self.encoder = Encoder(stacked, depth)
        self.head = mlp(self.encoder.out_dim, spec.num_actions, hidden, layers)
        # zero output layer: the untrained policy is exactly uniform
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: uint8 (B, k, H, W, C) or (B, H, W, C) when k = 1."""
        x = preprocess(frames)
        if x.ndim == 5:
            x = x.flatten(1, 2)
        return self.head(self.encoder(x))


def stack_frames(observations: np.ndarray, k: int) -> np.ndarray:
    """(T, H, W, C) -> (T, k, H, W, C), repeating the first frame at the start."""
    idx = np.arange(len(observations))[:, None] + np.arange(-k + 1, 1)[None, :]
    return observations[np.clip(idx, 0, None)]


@dataclass
class BCRun:
    model: PixelBC
    curves: list[dict] = field(default_factory=list)


def train_pixel_bc(episodes: Sequence[Episode], config: TrainConfig, spec: EnvSpec, steps: int | None = None,
                   out_dir: str | Path | None = None) -> BCRun:
    """Cross-entropy on expert (frame, action) pairs."""
    if not episodes:
        raise ValueError("pixel BC needs at least one expert episode")
    cfg = config.bc
    steps = cfg.steps if steps is None else steps
    k = cfg.frame_stack
    torch.manual_seed(config.seed)
    model = PixelBC(spec, config.wm.cnn_depth, config.agent.hidden, config.agent.layers, k)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    frames = np.concatenate([stack_frames(e.observations[:-1], k) if k > 1 else e.observations[:-1] for e in episodes])
    actions = torch.as_tensor(np.concatenate([e.actions for e in episodes])).long()
    rng = np.random.default_rng(config.seed)
    curves = []
    for step in range(1, steps + 1):
        idx = rng.integers(len(frames), size=min(cfg.batch_size, len(frames)))
        logits = model(torch.as_tensor(frames[idx]))
        loss = F.cross_entropy(logits, actions[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        acc = (logits.argmax(-1) == actions[idx]).float().mean().item()
        curves.append({"step": step, "loss": loss.item(), "accuracy": acc})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_pixel_bc(out / "policy.ckpt", model, config)
        with open(out / "curves.csv", "w") as f:
            f.write("step,loss,accuracy\n")
            for row in curves:
                f.write(f"{row['step']},{row['loss']},{row['accuracy']}\n")
    return BCRun(model, curves)


def save_pixel_bc(path: str | Path, model: PixelBC, config: TrainConfig) -> str:
    spec = model.spec
    extra = {"spec": [spec.obs_height, spec.obs_width, spec.obs_channels, spec.num_actions, spec.max_episode_steps],
             "frame_stack": model.frame_stack, "kind": "bc"}
    params = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    return save_checkpoint(path, Checkpoint("pixel_bc", params, config.to_flat(), extra))


def load_pixel_bc(path: str | Path) -> PixelBC:
    ckpt = load_checkpoint(path, kind="pixel_bc")
    config = TrainConfig.from_flat(ckpt.config)
    model = PixelBC(EnvSpec(*ckpt.extra["spec"]), config.wm.cnn_depth, config.agent.hidden, config.agent.layers,
                    ckpt.extra["frame_stack"])
    model.load_state_dict(ckpt.state_dict())
    return model


class PixelBCPolicy(Policy):
    def __init__(self, model: PixelBC, greedy: bool = False):
        self.model = model
        self.greedy = greedy
        self.tag = "bc"
        self.reset(1, 0)

    def reset(self, n, seed):
        self.generator = torch.Generator().manual_seed(seed)
        self.history: list[np.ndarray] = []

    @torch.no_grad()
    def act(self, observations: np.ndarray, states: Sequence[EnvState] | None = None) -> np.ndarray:
        k = self.model.frame_stack
        if not self.history:
            self.history = [observations] * k
        self.history = (self.history + [observations])[-k:]
        frames = np.stack(self.history, 1) if k > 1 else observations
        logits = self.model(torch.as_tensor(frames))
        if self.greedy:
            return logits.argmax(-1).numpy()
        return torch.multinomial(torch.softmax(logits, -1), 1, generator=self.generator).squeeze(-1).numpy()
