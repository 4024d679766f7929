"""Imitation rewards on world-model latent states.

All latent rewards compare flat model states ``concat(h, z)``.  The default
``ditto_dot`` reward is a dot product normalized by the larger squared norm,

    r(e, p) = e . p / max(|e|, |p|)^2,

which lies in [-1, 1] and equals 1 exactly when the two vectors coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datastore import ProvenanceError

DISTANCES = ("dot", "l2", "cosine")


@dataclass
class RewardSpec:
    kind: str = "ditto_dot"
    eps: float = 1e-3
    tau0: float = 1e-8
    adv_clip: float = 10.0
    distance: str = "dot"

    @classmethod
    def from_config(cls, cfg) -> "RewardSpec":
        return cls(cfg.kind, cfg.eps, cfg.tau0, cfg.adv_clip, getattr(cfg, "distance", "dot"))


def _check_provenance(expert_provenance: str | None, learner_provenance: str | None) -> None:
    if expert_provenance is not None and learner_provenance is not None and expert_provenance != learner_provenance:
        raise ProvenanceError(
            f"expert latents come from world model {expert_provenance}, learner latents from {learner_provenance}"
        )


def ditto_reward(
    expert: torch.Tensor,
    learner: torch.Tensor,
    tau0: float = 1e-8,
    expert_provenance: str | None = None,
    learner_provenance: str | None = None,
) -> torch.Tensor:
    """Normalized dot-product reward over the last dimension.

    Norm guard: if both vectors have norm below ``tau0`` the reward is 1, if
    exactly one does it is 0.
    """
    _check_provenance(expert_provenance, learner_provenance)
    expert = torch.as_tensor(expert)
    learner = torch.as_tensor(learner)
    sq_e = (expert * expert).sum(-1)
    sq_l = (learner * learner).sum(-1)
    dot = (expert * learner).sum(-1)
    # max(|e|, |p|)^2 taken on squared norms so that r(v, v) is exactly 1
    reward = dot / torch.maximum(sq_e, sq_l).clamp_min(tau0 ** 2)
    small_e, small_l = sq_e < tau0 ** 2, sq_l < tau0 ** 2
    reward = torch.where(small_e & small_l, torch.ones_like(reward), reward)
    reward = torch.where(small_e ^ small_l, torch.zeros_like(reward), reward)
    return reward


def distance(a: torch.Tensor, b: torch.Tensor, kind: str = "dot", tau0: float = 1e-8) -> torch.Tensor:
    """Distances whose complement ``1 - d`` serves as a reward.

    ``dot``: 1 - ditto_reward; ``l2``: |a - b| / (2 max(|a|, |b|)) in [0, 1];
    ``cosine``: 1 - cos(a, b) in [0, 2].
    """
    if kind == "dot":
        return 1.0 - ditto_reward(a, b, tau0)
    if kind == "l2":
        scale = torch.maximum(a.norm(dim=-1), b.norm(dim=-1)).clamp_min(tau0)
        return (a - b).norm(dim=-1) / (2 * scale)
    if kind == "cosine":
        return 1.0 - F.cosine_similarity(a, b, dim=-1, eps=tau0)
    raise ValueError(f"unknown distance {kind!r}; expected one of {DISTANCES}")


def min_dataset_reward(
    learner: torch.Tensor,
    expert_set: torch.Tensor,
    kind: str = "dot",
    tau0: float = 1e-8,
    chunk: int = 4096,
) -> torch.Tensor:
    """1 - min over the expert set of d(learner, expert); learner is (..., D), set is (N, D)."""
    expert_set = torch.as_tensor(expert_set)
    if expert_set.ndim != 2 or len(expert_set) == 0:
        raise ValueError("expert_set must be a non-empty (N, D) collection")
    learner = torch.as_tensor(learner)
    lead = learner.shape[:-1]
    flat = learner.reshape(-1, learner.shape[-1])
    best = []
    for i in range(0, len(flat), chunk):
        block = flat[i:i + chunk, None, :]
        best.append(distance(block, expert_set[None], kind, tau0).min(-1).values)
    return (1.0 - torch.cat(best)).reshape(lead)


def aligned_reward(kind: str, tau0: float = 1e-8, eps: float = 1e-3) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    """Time-aligned reward function ``f(expert, learner)`` for a reward kind."""
    if kind == "ditto_dot":
        return lambda e, p: ditto_reward(e, p, tau0)
    if kind in ("l2", "cosine"):
        return lambda e, p: 1.0 - distance(e, p, kind, tau0)
    if kind == "sparse":
        return lambda e, p: ((e - p).abs().amax(-1) <= eps).float()
    raise ValueError(f"reward kind {kind!r} is not a time-aligned latent reward")


# ---------------------------------------------------------------------------
# Sparse indicator


def pair_key(state, action) -> Hashable:
    """Hashable key for a (state, action) pair; arrays are keyed by their bytes."""
    if isinstance(state, torch.Tensor):
        state = state.detach().cpu().numpy()
    if isinstance(state, np.ndarray):
        state = (state.shape, np.ascontiguousarray(state, dtype=np.float32).tobytes())
    return (state, int(action))


def sparse_reward(state, action, expert_pairs: Iterable[Hashable] | set) -> float:
    """1 if the pair occurs in the expert data, else 0."""
    if not isinstance(expert_pairs, (set, frozenset)):
        expert_pairs = set(expert_pairs)
    return 1.0 if pair_key(state, action) in expert_pairs else 0.0


# ---------------------------------------------------------------------------
# Adversarial (D-GAIL) reward


class Discriminator(nn.Module):
    """MLP over flat(s) + one-hot(a) with a clamped sigmoid output."""

    def __init__(self, state_dim: int, num_actions: int, hidden: int = 256, layers: int = 2, clamp: float = 1e-6):
        super().__init__()
        self.num_actions = num_actions
        self.clamp = clamp
        dims = [state_dim + num_actions] + [hidden] * layers
        body = []
        for a, b in zip(dims[:-1], dims[1:]):
            body += [nn.Linear(a, b), nn.ELU()]
        self.net = nn.Sequential(*body, nn.Linear(dims[-1], 1))

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(actions.long(), self.num_actions).to(states.dtype)
        logits = self.net(torch.cat([states, onehot], -1)).squeeze(-1)
        return torch.sigmoid(logits).clamp(self.clamp, 1 - self.clamp)


def bce_from_probs(d_expert: torch.Tensor, d_learner: torch.Tensor) -> torch.Tensor:
    """E_expert[-log D] + E_learner[-log(1 - D)]."""
    return -torch.log(d_expert).mean() - torch.log1p(-d_learner).mean()


def discriminator_loss(
    D: Discriminator,
    expert_states: torch.Tensor,
    expert_actions: torch.Tensor,
    learner_states: torch.Tensor,
    learner_actions: torch.Tensor,
) -> torch.Tensor:
    if len(expert_states) == 0 or len(learner_states) == 0:
        raise ValueError("discriminator batches must be non-empty")
    return bce_from_probs(D(expert_states, expert_actions), D(learner_states, learner_actions))


def adversarial_reward_from_prob(prob: torch.Tensor, clip: float = 10.0) -> torch.Tensor:
    return (-torch.log1p(-torch.as_tensor(prob))).clamp(0.0, clip)


def adversarial_reward(states: torch.Tensor, actions: torch.Tensor, D: Discriminator, clip: float = 10.0) -> torch.Tensor:
    """-log(1 - D(s, a)), clipped to [0, clip]."""
    return adversarial_reward_from_prob(D(states, actions), clip)
