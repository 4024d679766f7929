"""Actor-critic trained entirely inside the world model.

Each update draws windows of encoded expert latents, imagines on-policy
rollouts from the window starts with the prior, scores every imagined state
against the time-aligned expert state, and trains

* the critic on lambda-returns bootstrapped from a hard-copied target critic,
* the actor with REINFORCE, using the critic as baseline, plus an entropy bonus.

The world model is frozen throughout.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import AgentConfig, TrainConfig
from .datastore import ExpertWindows, LatentStore, sample_expert_latent_windows
from .envsim import ContractViolation, EnvState, Policy
from .rewards import RewardSpec, aligned_reward, min_dataset_reward
from .worldmodel import Imagined, ModelState, NonFiniteLossError, WorldModel, imagine

log = logging.getLogger(__name__)


def mlp(n_in: int, n_out: int, hidden: int = 256, layers: int = 2) -> nn.Sequential:
    dims = [n_in] + [hidden] * layers
    body: list[nn.Module] = []
    for a, b in zip(dims[:-1], dims[1:]):
        body += [nn.Linear(a, b), nn.LayerNorm(b), nn.ELU()]
    return nn.Sequential(*body, nn.Linear(dims[-1], n_out))


class Actor(nn.Module):
    def __init__(self, state_dim: int, num_actions: int, hidden: int = 256, layers: int = 2):
        super().__init__()
        self.net = mlp(state_dim, num_actions, hidden, layers)

    def forward(self, flat_state: torch.Tensor) -> torch.Tensor:
        return self.net(flat_state)


class Critic(nn.Module):
    def __init__(self, state_dim: int, hidden: int = 256, layers: int = 2):
        super().__init__()
        self.net = mlp(state_dim, 1, hidden, layers)

    def forward(self, flat_state: torch.Tensor) -> torch.Tensor:
        return self.net(flat_state).squeeze(-1)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Losses


def lambda_returns(rewards, values, gamma: float, lam: float) -> torch.Tensor:
    """Backward recursion V_t = r_t + gamma((1 - lam) v_{t+1} + lam V_{t+1}) with V_H = v_H.

    ``rewards`` is (..., H) where ``rewards[..., t]`` is earned on the step
    from state t to t+1; ``values`` is (..., H+1).  Returns (..., H).
    """
    rewards = torch.as_tensor(rewards)
    values = torch.as_tensor(values, dtype=rewards.dtype)
    if values.shape[-1] != rewards.shape[-1] + 1 or values.shape[:-1] != rewards.shape[:-1]:
        raise ContractViolation(
            f"lambda_returns needs values with one more step than rewards, got {tuple(values.shape)} and {tuple(rewards.shape)}"
        )
    H = rewards.shape[-1]
    out = torch.empty_like(rewards)
    last = values[..., H]
    for t in reversed(range(H)):
        last = rewards[..., t] + gamma * ((1 - lam) * values[..., t + 1] + lam * last)
        out[..., t] = last
    return out


def critic_loss(values: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over batch of sum_{t=1}^{H-1} 0.5 (v(s_t) - sg(V_t))^2.

    ``values`` are online-critic outputs for states 0..H, ``targets`` the
    lambda-returns for states 0..H-1.  The start state and the bootstrap state
    carry no loss.
    """
    H = targets.shape[-1]
    err = values[..., 1:H] - targets[..., 1:H].detach()
    return (0.5 * err ** 2).sum(-1).mean()


def actor_loss(
    log_probs: torch.Tensor,
    entropy: torch.Tensor,
    targets: torch.Tensor,
    baseline: torch.Tensor,
    eta: float,
) -> torch.Tensor:
    """Mean over batch of sum_{t=1}^{H-1} [-log pi(a_t|s_t) sg(V_t - v(s_t)) - eta H(pi(s_t))].

    All inputs are (B, H) over rollout steps 0..H-1.
    """
    H = targets.shape[-1]
    advantage = (targets[..., 1:H] - baseline[..., 1:H]).detach()
    reinforce = -log_probs[..., 1:H] * advantage
    return (reinforce - eta * entropy[..., 1:H]).sum(-1).mean()


def update_target_critic(critic: nn.Module, target: nn.Module, step: int, period: int = 100) -> bool:
    """Hard-copy the online critic into the target every ``period`` gradient steps."""
    if step > 0 and step % period == 0:
        target.load_state_dict(critic.state_dict())
        return True
    return False


# ---------------------------------------------------------------------------
# Reward models


class RewardModel:
    """Turns an imagined rollout plus its expert window into per-step rewards (B, H)."""

    def rewards(self, rollout: Imagined, expert: ExpertWindows) -> torch.Tensor:
        raise NotImplementedError

    def update(self, rollout: Imagined, expert: ExpertWindows) -> dict[str, float]:
        return {}


class AlignedLatentReward(RewardModel):
    """Compare imagined state t with expert state t for t = 1..H."""

    def __init__(self, spec: RewardSpec):
        self.fn = aligned_reward(spec.kind, spec.tau0, spec.eps)

    def rewards(self, rollout, expert):
        learner = rollout.states.flat()[:, 1:]
        target = torch.cat([torch.as_tensor(expert.h), torch.as_tensor(expert.z)], -1)[:, 1:]
        return self.fn(target, learner)


class MinDatasetReward(RewardModel):
    """1 - min distance from each imagined state to any expert latent."""

    def __init__(self, spec: RewardSpec, store: LatentStore):
        self.kind, self.tau0 = spec.distance, spec.tau0
        self.expert_set = torch.cat(
            [torch.as_tensor(np.concatenate([e.h, e.z], 1)) for e in store.episodes]
        ).float()

    def rewards(self, rollout, expert):
        return min_dataset_reward(rollout.states.flat()[:, 1:], self.expert_set, self.kind, self.tau0)


def make_reward_model(spec: RewardSpec, store: LatentStore) -> RewardModel:
    if spec.kind == "min_dataset":
        return MinDatasetReward(spec, store)
    if spec.kind == "adversarial":
        raise ValueError("adversarial rewards need a discriminator; use baselines.train_dgail")
    return AlignedLatentReward(spec)


# ---------------------------------------------------------------------------
# Training


@dataclass
class ActorCritic:
    actor: Actor
    critic: Critic
    target: Critic
    provenance: str = ""
    kind: str = "ditto"

    @classmethod
    def create(cls, state_dim: int, num_actions: int, cfg: AgentConfig, provenance: str = "", kind: str = "ditto"):
        actor = Actor(state_dim, num_actions, cfg.hidden, cfg.layers)
        critic = Critic(state_dim, cfg.hidden, cfg.layers)
        target = copy.deepcopy(critic)
        for p in target.parameters():
            p.requires_grad_(False)
        return cls(actor, critic, target, provenance, kind)


@dataclass
class AgentRun:
    agent: ActorCritic
    curves: list[dict] = field(default_factory=list)
    report: dict = field(default_factory=dict)


def expert_start_state(windows: ExpertWindows) -> ModelState:
    return ModelState(torch.as_tensor(windows.start_h).float(), torch.as_tensor(windows.start_z).float())


def bootstrap_targets(agent: ActorCritic, flat: torch.Tensor, rewards: torch.Tensor, gamma: float, lam: float) -> torch.Tensor:
    """lambda-returns whose bootstrap values come from the target critic."""
    with torch.no_grad():
        values = agent.target(flat)
    return lambda_returns(rewards, values, gamma, lam)


def ac_update(
    agent: ActorCritic,
    rollout: Imagined,
    rewards: torch.Tensor,
    cfg: AgentConfig,
    actor_opt: torch.optim.Optimizer,
    critic_opt: torch.optim.Optimizer,
) -> dict[str, float]:
    """One critic step followed by one actor step on a detached imagined batch."""
    flat = rollout.states.flat().detach()
    rewards = rewards.detach()
    targets = bootstrap_targets(agent, flat, rewards, cfg.gamma, cfg.lam)

    values = agent.critic(flat)
    c_loss = critic_loss(values, targets)
    baseline = values.detach()[:, :-1]

    logits = agent.actor(flat[:, :-1])
    logp_all = F.log_softmax(logits, -1)
    log_probs = logp_all.gather(-1, rollout.actions.unsqueeze(-1)).squeeze(-1)
    entropy = -(logp_all.exp() * logp_all).sum(-1)
    a_loss = actor_loss(log_probs, entropy, targets, baseline, cfg.entropy)

    if not (torch.isfinite(c_loss) and torch.isfinite(a_loss)):
        raise NonFiniteLossError(f"agent loss not finite: critic={c_loss.item()} actor={a_loss.item()}")

    critic_opt.zero_grad(set_to_none=True)
    c_loss.backward()
    nn.utils.clip_grad_norm_(agent.critic.parameters(), cfg.grad_clip)
    critic_opt.step()

    actor_opt.zero_grad(set_to_none=True)
    a_loss.backward()
    nn.utils.clip_grad_norm_(agent.actor.parameters(), cfg.grad_clip)
    actor_opt.step()

    return {
        "intrinsic_return": rewards.sum(-1).mean().item(),
        "intrinsic_reward": rewards.mean().item(),
        "critic_loss": c_loss.item(),
        "actor_loss": a_loss.item(),
        "entropy": entropy.mean().item(),
    }


def train_agent(
    store: LatentStore,
    world_model: WorldModel,
    reward_spec: RewardSpec,
    config: TrainConfig,
    steps: int | None = None,
    out_dir: str | Path | None = None,
    reward_model: RewardModel | None = None,
    kind: str = "ditto",
    checkpoint_every: int = 500,
) -> AgentRun:
    """Train an actor-critic in imagination against expert latent windows."""
    store.check_provenance(world_model.checkpoint_id)
    cfg = config.agent
    steps = cfg.steps if steps is None else steps
    for p in world_model.parameters():
        p.requires_grad_(False)
    torch.manual_seed(config.seed)
    agent = ActorCritic.create(world_model.state_dim, world_model.spec.num_actions, cfg, store.provenance, kind)
    actor_opt = torch.optim.Adam(agent.actor.parameters(), lr=cfg.lr)
    critic_opt = torch.optim.Adam(agent.critic.parameters(), lr=cfg.lr)
    reward_model = reward_model or make_reward_model(reward_spec, store)
    generator = torch.Generator().manual_seed(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    curves: list[dict] = []
    for step in range(1, steps + 1):
        rng = np.random.default_rng([config.seed, step])
        windows = sample_expert_latent_windows(store, cfg.batch_size, cfg.horizon, rng)
        with torch.no_grad():
            rollout = imagine(world_model, expert_start_state(windows), agent.actor, cfg.horizon, generator)
        extra = reward_model.update(rollout, windows)
        with torch.no_grad():
            rewards = reward_model.rewards(rollout, windows)
        metrics = ac_update(agent, rollout, rewards, cfg, actor_opt, critic_opt)
        metrics.update(extra)
        update_target_critic(agent.critic, agent.target, step, cfg.target_update)
        curves.append({"step": step, **metrics})
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("%s step %d intrinsic return %.3f entropy %.3f", kind, step, metrics["intrinsic_return"], metrics["entropy"])
        if out is not None and checkpoint_every and step % checkpoint_every == 0:
            save_agent(out / "policy.ckpt", agent, config, step)
    if out is not None:
        save_agent(out / "policy.ckpt", agent, config, steps)
        write_agent_csv(out / "curves.csv", curves)
    return AgentRun(agent, curves)


def write_agent_csv(path: str | Path, curves: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "intrinsic_return", "critic_loss", "actor_loss", "entropy"])
        for row in curves:
            writer.writerow([row["step"], row.get("intrinsic_return", ""), row.get("critic_loss", ""),
                             row.get("actor_loss", ""), row.get("entropy", "")])


def save_agent(path: str | Path, agent: ActorCritic, config: TrainConfig, step: int = 0) -> str:
    params = {}
    for prefix, module in (("actor", agent.actor), ("critic", agent.critic), ("target", agent.target)):
        for k, v in module.state_dict().items():
            params[f"{prefix}.{k}"] = v.detach().numpy()
    extra = {"provenance": agent.provenance, "kind": agent.kind, "step": step}
    return save_checkpoint(path, Checkpoint("agent", params, config.to_flat(), extra))


def load_agent(path: str | Path, state_dim: int, num_actions: int) -> tuple[ActorCritic, Checkpoint]:
    ckpt = load_checkpoint(path, kind="agent")
    cfg = TrainConfig.from_flat(ckpt.config).agent
    agent = ActorCritic.create(state_dim, num_actions, cfg, ckpt.extra["provenance"], ckpt.extra["kind"])
    state = ckpt.state_dict()
    for prefix, module in (("actor", agent.actor), ("critic", agent.critic), ("target", agent.target)):
        module.load_state_dict({k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")})
    return agent, ckpt


# ---------------------------------------------------------------------------
# Deployment


class LatentPolicy(Policy):
    """Run an actor on real frames through the world-model encoder and posterior.

    At each step the frame is embedded, the posterior RSSM step consumes the
    previous action, and the actor samples (or argmaxes) the next action.
    Environment states passed to :meth:`act` are ignored.
    """

    def __init__(self, actor: nn.Module, world_model: WorldModel, greedy: bool = False, tag: str = "ditto"):
        self.actor = actor
        self.world_model = world_model
        self.greedy = greedy
        self.tag = tag
        self.reset(1, 0)

    def reset(self, n: int, seed: int) -> None:
        self.generator = torch.Generator().manual_seed(seed)
        self.state = self.world_model.rssm.initial(n)
        self.prev_action = torch.zeros(n, dtype=torch.long)
        self.first = True

    @torch.no_grad()
    def act(self, observations: np.ndarray, states: Sequence[EnvState] | None = None) -> np.ndarray:
        n = len(observations)
        if self.state.h.shape[0] != n:
            self.reset(n, 0)
        embed = self.world_model.encode_obs(observations)
        is_first = torch.full((n,), self.first)
        out = self.world_model.rssm.step(self.state, self.prev_action, embed, self.generator, is_first)
        self.state = out.state
        logits = self.actor(out.state.flat())
        if self.greedy:
            action = logits.argmax(-1)
        else:
            action = torch.multinomial(torch.softmax(logits, -1), 1, generator=self.generator).squeeze(-1)
        self.prev_action = action
        self.first = False
        return action.numpy()


def act(actor: nn.Module, world_model: WorldModel, observations: Sequence[np.ndarray] | np.ndarray,
        greedy: bool = False, seed: int = 0) -> np.ndarray:
    """Actions for a single observation stream, one per observation."""
    policy = LatentPolicy(actor, world_model, greedy)
    policy.reset(1, seed)
    return np.array([int(policy.act(np.asarray(o)[None])[0]) for o in observations], dtype=np.int64)
