"""Recurrent state-space world model with grouped categorical latents.

Components (all trained jointly):

* encoder   -- CNN, frame -> embedding
* rssm      -- GRU cell h_t = f(h_{t-1}, z_{t-1}, a_{t-1}); prior p(z_t | h_t);
               posterior q(z_t | h_t, e_t)
* decoder   -- transposed CNN, (h_t, z_t) -> per-pixel Gaussian means

Latents are ``groups`` categorical variables with ``classes`` classes each,
sampled with a straight-through estimator after mixing 1% uniform into the
probabilities.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    module_hash,
    optimizer_arrays,
    restore_optimizer,
    save_checkpoint,
)
from .config import TrainConfig, WorldModelConfig
from .datastore import LatentEpisode, LatentStore, SequenceBatch, sample_sequences
from .envsim import ContractViolation, EnvSpec, Episode

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class NonFiniteLossError(RuntimeError):
    pass


def preprocess(obs: np.ndarray | torch.Tensor) -> torch.Tensor:
    """uint8 (..., H, W, C) -> float (..., C, H, W) in [-0.5, 0.5]."""
    x = torch.as_tensor(obs)
    x = x.to(torch.float32) / 255.0 - 0.5
    return x.movedim(-1, -3)


# ---------------------------------------------------------------------------
# Latent state


@dataclass
class ModelState:
    h: torch.Tensor  # (..., D_h)
    z: torch.Tensor  # (..., G*K)

    def flat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)

    def detach(self) -> "ModelState":
        return ModelState(self.h.detach(), self.z.detach())

    def __getitem__(self, idx) -> "ModelState":
        return ModelState(self.h[idx], self.z[idx])

    @staticmethod
    def stack(states: Sequence["ModelState"], dim: int = 1) -> "ModelState":
        return ModelState(torch.stack([s.h for s in states], dim), torch.stack([s.z for s in states], dim))


@dataclass
class RSSMOutputs:
    h: torch.Tensor
    z: torch.Tensor
    prior_logits: torch.Tensor  # (..., G, K)
    posterior_logits: torch.Tensor | None  # None on the imagination branch

    @property
    def state(self) -> ModelState:
        return ModelState(self.h, self.z)


# ---------------------------------------------------------------------------
# Categorical helpers


def mixed_probs(logits: torch.Tensor, unimix: float) -> torch.Tensor:
    probs = torch.softmax(logits, -1)
    if unimix > 0:
        probs = (1 - unimix) * probs + unimix / logits.shape[-1]
    return probs


def straight_through_sample(
    logits: torch.Tensor, unimix: float = 0.01, generator: torch.Generator | None = None
) -> torch.Tensor:
    """One-hot sample per group whose gradient is that of the group probabilities.

    ``logits`` has shape (..., G, K); the result has the same shape.
    """
    probs = mixed_probs(logits, unimix)
    K = probs.shape[-1]
    flat = probs.detach().reshape(-1, K)
    if not torch.isfinite(flat).all():
        raise NonFiniteLossError(
            f"non-finite latent logits: min/max={logits.min().item():.3g}/{logits.max().item():.3g}")
    idx = torch.multinomial(flat, 1, generator=generator).squeeze(-1)
    sample = F.one_hot(idx, K).to(probs.dtype).reshape(probs.shape)
    return sample + probs - probs.detach()


def categorical_kl(q_probs: torch.Tensor, p_probs: torch.Tensor) -> torch.Tensor:
    """KL(q || p) summed over groups; inputs (..., G, K)."""
    return (q_probs * (torch.log(q_probs) - torch.log(p_probs))).sum((-1, -2))


def kl_balanced(
    posterior_logits: torch.Tensor, prior_logits: torch.Tensor, delta: float, unimix: float = 0.01
) -> torch.Tensor:
    """delta * KL(q || sg(p)) + (1 - delta) * KL(sg(q) || p), per batch element."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    q = mixed_probs(posterior_logits, unimix)
    p = mixed_probs(prior_logits, unimix)
    posterior_term = categorical_kl(q, p.detach())
    prior_term = categorical_kl(q.detach(), p)
    return delta * posterior_term + (1 - delta) * prior_term


def gaussian_nll(mean: torch.Tensor, target: torch.Tensor, include_constant: bool = True,
                 event_dims: int = 3) -> torch.Tensor:
    """Unit-variance Gaussian negative log-likelihood summed over the last ``event_dims`` dims."""
    dims = tuple(range(-event_dims, 0))
    nll = 0.5 * ((target - mean) ** 2).sum(dims)
    if include_constant:
        n = math.prod(mean.shape[-event_dims:])
        nll = nll + 0.5 * n * LOG_2PI
    return nll


# ---------------------------------------------------------------------------
# Networks


class Encoder(nn.Module):
    """Patch convolution (kernel = stride = grid cell) followed by a strided conv."""

    def __init__(self, spec: EnvSpec, depth: int = 32, patch: int = 8):
        super().__init__()
        if spec.obs_height % (2 * patch) or spec.obs_width % (2 * patch):
            raise ValueError(f"frame {spec.obs_shape} must be divisible by {2 * patch}")
        self.spec = spec
        self.net = nn.Sequential(
            nn.Conv2d(spec.obs_channels, depth, patch, patch),
            nn.ELU(),
            nn.Conv2d(depth, 2 * depth, 4, 2, 1),
            nn.ELU(),
            nn.Flatten(),
        )
        self.out_dim = 2 * depth * (spec.obs_height // (2 * patch)) * (spec.obs_width // (2 * patch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-3]
        if tuple(x.shape[-3:]) != (self.spec.obs_channels, self.spec.obs_height, self.spec.obs_width):
            raise ContractViolation(f"encoder expects (..., C, H, W) = {self.spec.obs_shape[::-1]}, got {tuple(x.shape)}")
        out = self.net(x.reshape(-1, *x.shape[-3:]))
        return out.reshape(*lead, self.out_dim)


class Decoder(nn.Module):
    def __init__(self, spec: EnvSpec, feat_dim: int, depth: int = 32, patch: int = 8):
        super().__init__()
        self.spec = spec
        self.grid = (spec.obs_height // (2 * patch), spec.obs_width // (2 * patch))
        self.depth = depth
        self.fc = nn.Linear(feat_dim, 2 * depth * self.grid[0] * self.grid[1])
        self.net = nn.Sequential(
            nn.ELU(),
            nn.ConvTranspose2d(2 * depth, depth, 4, 2, 1),
            nn.ELU(),
            nn.ConvTranspose2d(depth, spec.obs_channels, patch, patch),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        lead = feat.shape[:-1]
        x = self.fc(feat.reshape(-1, feat.shape[-1])).reshape(-1, 2 * self.depth, *self.grid)
        out = self.net(x)
        return out.reshape(*lead, *out.shape[1:])


def _dense(n_in: int, n_out: int) -> nn.Sequential:
    # LayerNorm keeps the categorical logits from saturating early in training
    return nn.Sequential(nn.Linear(n_in, n_out), nn.LayerNorm(n_out), nn.ELU())


class RSSM(nn.Module):
    def __init__(self, num_actions: int, embed_dim: int, cfg: WorldModelConfig):
        super().__init__()
        self.num_actions = num_actions
        self.groups, self.classes = cfg.groups, cfg.classes
        self.deter = cfg.deter
        self.unimix = cfg.unimix
        stoch = cfg.groups * cfg.classes
        self.img_in = _dense(stoch + num_actions, cfg.hidden)
        self.cell = nn.GRUCell(cfg.hidden, cfg.deter)
        self.prior_net = nn.Sequential(_dense(cfg.deter, cfg.hidden), nn.Linear(cfg.hidden, stoch))
        self.post_net = nn.Sequential(_dense(cfg.deter + embed_dim, cfg.hidden), nn.Linear(cfg.hidden, stoch))
        self.h_init = nn.Parameter(torch.zeros(cfg.deter))

    @property
    def stoch_dim(self) -> int:
        return self.groups * self.classes

    @property
    def state_dim(self) -> int:
        return self.deter + self.stoch_dim

    def initial(self, batch: int) -> ModelState:
        h = torch.tanh(self.h_init).expand(batch, -1)
        z = torch.full((batch, self.stoch_dim), 1.0 / self.classes, device=h.device)
        return ModelState(h, z)

    def _group(self, flat_logits: torch.Tensor) -> torch.Tensor:
        return flat_logits.reshape(*flat_logits.shape[:-1], self.groups, self.classes)

    def step(
        self,
        prev: ModelState,
        action: torch.Tensor,
        embed: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
        is_first: torch.Tensor | None = None,
    ) -> RSSMOutputs:
        """One RSSM transition.

        ``action`` is the index of the previous action (B,) or already one-hot (B, A).
        Rows flagged ``is_first`` restart from the learned initial state with a
        zero action.
        """
        if action.dtype in (torch.int64, torch.int32):
            action = F.one_hot(action.long(), self.num_actions).float()
        if is_first is not None and bool(is_first.any()):
            init = self.initial(prev.h.shape[0])
            m = is_first.float().unsqueeze(-1)
            prev = ModelState(m * init.h + (1 - m) * prev.h, m * init.z + (1 - m) * prev.z)
            action = (1 - m) * action
        x = self.img_in(torch.cat([prev.z, action], -1))
        h = self.cell(x, prev.h)
        prior_logits = self._group(self.prior_net(h))
        if embed is None:
            z = straight_through_sample(prior_logits, self.unimix, generator)
            return RSSMOutputs(h, z.flatten(-2), prior_logits, None)
        post_logits = self._group(self.post_net(torch.cat([h, embed], -1)))
        z = straight_through_sample(post_logits, self.unimix, generator)
        return RSSMOutputs(h, z.flatten(-2), prior_logits, post_logits)


class WorldModel(nn.Module):
    def __init__(self, spec: EnvSpec, cfg: WorldModelConfig):
        super().__init__()
        self.spec = spec
        self.cfg = cfg
        self.encoder = Encoder(spec, cfg.cnn_depth)
        self.rssm = RSSM(spec.num_actions, self.encoder.out_dim, cfg)
        self.decoder = Decoder(spec, self.rssm.state_dim, cfg.cnn_depth)

    @property
    def state_dim(self) -> int:
        return self.rssm.state_dim

    @property
    def checkpoint_id(self) -> str:
        return module_hash(self)

    def encode_obs(self, obs: np.ndarray | torch.Tensor) -> torch.Tensor:
        """uint8 frames (..., H, W, C) -> embeddings (..., E)."""
        x = torch.as_tensor(obs)
        if tuple(x.shape[-3:]) != self.spec.obs_shape:
            raise ContractViolation(f"observation shape {tuple(x.shape[-3:])} does not match {self.spec.obs_shape}")
        return self.encoder(preprocess(x))

    def decode(self, state: ModelState) -> torch.Tensor:
        """Per-pixel Gaussian means (..., C, H, W) in normalized pixel units."""
        return self.decoder(state.flat())

    def observe(
        self,
        embeds: torch.Tensor,
        actions: torch.Tensor,
        is_first: torch.Tensor,
        generator: torch.Generator | None = None,
    ) -> tuple[ModelState, torch.Tensor, torch.Tensor]:
        """Posterior pass over (B, L) sequences.

        ``actions[:, t]`` is the action taken at observation t, so the transition
        into step t uses ``actions[:, t-1]``; step 0 always starts from the
        initial state.

        Returns stacked states and (B, L, G, K) posterior and prior logits.
        """
        B, L = actions.shape
        state = self.rssm.initial(B)
        prev_action = torch.zeros(B, dtype=torch.long)
        first = is_first.clone()
        first[:, 0] = True
        hs, zs, posts, priors = [], [], [], []
        for t in range(L):
            out = self.rssm.step(state, prev_action, embeds[:, t], generator, first[:, t])
            state = out.state
            prev_action = actions[:, t]
            hs.append(out.h)
            zs.append(out.z)
            posts.append(out.posterior_logits)
            priors.append(out.prior_logits)
        return ModelState(torch.stack(hs, 1), torch.stack(zs, 1)), torch.stack(posts, 1), torch.stack(priors, 1)

    def rssm_step(self, prev: ModelState, action, obs_embedding=None, generator=None, is_first=None) -> RSSMOutputs:
        action = torch.as_tensor(action)
        return self.rssm.step(prev, action, obs_embedding, generator, is_first)


# ---------------------------------------------------------------------------
# Loss and training


def wm_loss(
    model: WorldModel,
    batch: SequenceBatch,
    beta: float,
    delta: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Negative ELBO averaged over batch and time.

    The reconstruction term drops the Gaussian normalizing constant, which is
    fixed by the frame size and carries no gradient.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    obs = torch.as_tensor(batch.observations)
    actions = torch.as_tensor(batch.actions).long()
    is_first = torch.as_tensor(batch.is_first)
    mask = torch.as_tensor(batch.mask).float()
    embeds = model.encode_obs(obs)
    states, post, prior = model.observe(embeds, actions, is_first, generator)
    recon = gaussian_nll(model.decode(states), preprocess(obs), include_constant=False)
    kl = kl_balanced(post, prior, delta, model.cfg.unimix)
    denom = mask.sum()
    recon_mean = (recon * mask).sum() / denom
    kl_mean = (kl * mask).sum() / denom
    total = recon_mean + beta * kl_mean
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            "world-model loss is not finite: "
            f"recon={recon_mean.item()} kl={kl_mean.item()} "
            f"posterior logits min/max/mean={post.min().item():.3g}/{post.max().item():.3g}/{post.mean().item():.3g} "
            f"prior logits min/max/mean={prior.min().item():.3g}/{prior.max().item():.3g}/{prior.mean().item():.3g}"
        )
    return total, {"total": total.item(), "recon": recon_mean.item(), "kl": kl_mean.item()}


def _param_names(module: nn.Module) -> dict[nn.Parameter, str]:
    return {p: n for n, p in module.named_parameters()}


def save_world_model(path: str | Path, model: WorldModel, config: TrainConfig | None = None,
                     optimizer: torch.optim.Optimizer | None = None, step: int = 0) -> str:
    aux, meta = ({}, {}) if optimizer is None else optimizer_arrays(optimizer, _param_names(model))
    spec = model.spec
    extra = {
        "spec": [spec.obs_height, spec.obs_width, spec.obs_channels, spec.num_actions, spec.max_episode_steps],
        "wm": {k: v for k, v in vars(model.cfg).items()},
        "step": step,
        "optimizer": meta,
    }
    ckpt = Checkpoint("world_model", {k: v.detach().numpy() for k, v in model.state_dict().items()},
                      config.to_flat() if config else {}, extra, aux)
    return save_checkpoint(path, ckpt)


def load_world_model(path: str | Path) -> tuple[WorldModel, Checkpoint]:
    ckpt = load_checkpoint(path, kind="world_model")
    spec = EnvSpec(*ckpt.extra["spec"])
    model = WorldModel(spec, WorldModelConfig(**ckpt.extra["wm"]))
    model.load_state_dict(ckpt.state_dict())
    return model, ckpt


@dataclass
class WorldModelRun:
    model: WorldModel
    curves: list[dict]
    checkpoint_id: str


def train_world_model(
    episodes: Sequence[Episode],
    config: TrainConfig,
    spec: EnvSpec,
    out_dir: str | Path | None = None,
    steps: int | None = None,
    resume: str | Path | None = None,
    checkpoint_every: int = 500,
) -> WorldModelRun:
    """Fit the world model with Adam and global-norm gradient clipping.

    With ``resume`` the model, optimizer state and step counter are restored
    from a checkpoint and the data sampler is re-seeded from the step counter,
    so training picks up where it stopped.
    """
    if not episodes:
        raise ValueError("world-model dataset is empty")
    cfg = config.wm
    steps = cfg.steps if steps is None else steps
    torch.manual_seed(config.seed)
    model = WorldModel(spec, cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start = 0
    if resume is not None:
        loaded, ckpt = load_world_model(resume)
        model.load_state_dict(loaded.state_dict())
        restore_optimizer(optimizer, _param_names(model), ckpt.aux, ckpt.extra.get("optimizer", {}))
        start = int(ckpt.extra.get("step", 0))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curves: list[dict] = []
    for step in range(start, start + steps):
        rng = np.random.default_rng([config.seed, step])
        generator = torch.Generator().manual_seed(config.seed * 1_000_003 + step)
        batch = sample_sequences(episodes, cfg.batch_size, cfg.seq_len, rng, pad_short=config.data.pad_short)
        try:
            loss, metrics = wm_loss(model, batch, cfg.beta, cfg.delta, generator)
        except NonFiniteLossError:
            log.error("aborting world-model training at step %d; last checkpoint kept", step)
            raise
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        curves.append({"step": step + 1, **metrics})
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("wm step %d total %.3f recon %.3f kl %.3f", step + 1, metrics["total"], metrics["recon"], metrics["kl"])
        if out is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_world_model(out / "model.ckpt", model, config, optimizer, step + 1)
    if out is not None:
        save_world_model(out / "model.ckpt", model, config, optimizer, start + steps)
        write_loss_csv(out / "loss.csv", curves, append=resume is not None)
    return WorldModelRun(model, curves, model.checkpoint_id)


def write_loss_csv(path: str | Path, curves: Sequence[dict], append: bool = False) -> None:
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "total", "recon", "kl"])
        for row in curves:
            writer.writerow([row["step"], row["total"], row["recon"], row["kl"]])


# ---------------------------------------------------------------------------
# Encoding and imagination


@torch.no_grad()
def encode_dataset(episodes: Sequence[Episode], model: WorldModel, encode_seed: int = 0) -> LatentStore:
    """Teacher-forced posterior pass over every episode.

    Stores a sampled (not modal) posterior latent per step.  Episode i draws
    from its own generator seeded by ``(encode_seed, i)``, so each episode's
    latents do not depend on batching.
    """
    stored = []
    for i, e in enumerate(episodes):
        if tuple(e.observations.shape[1:]) != model.spec.obs_shape:
            raise ContractViolation(
                f"episode {i} frames {e.observations.shape[1:]} do not match model input {model.spec.obs_shape}"
            )
        generator = torch.Generator().manual_seed(encode_seed * 1_000_003 + i)
        obs = torch.as_tensor(e.observations)[None]
        actions = torch.zeros(1, e.length + 1, dtype=torch.long)
        actions[0, :-1] = torch.as_tensor(e.actions).long()
        is_first = torch.zeros(1, e.length + 1, dtype=torch.bool)
        states, _, _ = model.observe(model.encode_obs(obs), actions, is_first, generator)
        stored.append(LatentEpisode(states.h[0].numpy().copy(), states.z[0].numpy().copy(), e.actions.astype(np.int64)))
    return LatentStore(stored, model.checkpoint_id, encode_seed)


@dataclass
class Imagined:
    states: ModelState  # (B, H+1, ...)
    actions: torch.Tensor  # (B, H)


def imagine(
    model: WorldModel,
    start: ModelState,
    policy: Callable[[torch.Tensor], torch.Tensor],
    horizon: int,
    generator: torch.Generator | None = None,
    greedy: bool = False,
) -> Imagined:
    """Roll the prior forward ``horizon`` steps from ``start`` under ``policy``.

    ``policy`` maps flat states (B, D) to action logits (B, A).  Only the
    recurrent cell and the prior head run; the encoder and decoder are never
    called.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = start
    states, actions = [start], []
    for _ in range(horizon):
        logits = policy(state.flat())
        if greedy:
            action = logits.argmax(-1)
        else:
            action = torch.multinomial(torch.softmax(logits, -1), 1, generator=generator).squeeze(-1)
        state = model.rssm.step(state, action, None, generator).state
        states.append(state)
        actions.append(action)
    return Imagined(ModelState.stack(states, 1), torch.stack(actions, 1))
