"""Run configuration.

All hyperparameters live in one nested dataclass so that a run can be echoed
verbatim into checkpoints and reports.  The on-disk format is a flat text file
of ``section.key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

# Expert-episode grid of the data-efficiency sweep.
EXPERT_EPISODE_GRID = (4, 8, 15, 30, 60, 125, 250, 500, 1000)

REWARD_KINDS = ("ditto_dot", "min_dataset", "l2", "cosine", "sparse", "adversarial")
AGENT_KINDS = ("ditto", "dgail", "dbc", "bc")


@dataclass
class EnvConfig:
    name: str = "patrol"


@dataclass
class DataConfig:
    wm_episodes: int = 200
    expert_episodes: int = 10
    # fraction of world-model episodes collected with the uniform random policy;
    # the rest come from the epsilon-noisy scripted expert
    random_fraction: float = 0.5
    noise_eps: float = 0.3
    pad_short: bool = False


@dataclass
class WorldModelConfig:
    batch_size: int = 50
    seq_len: int = 50
    steps: int = 2000
    lr: float = 3e-4
    beta: float = 0.1
    delta: float = 0.8
    groups: int = 8
    classes: int = 8
    deter: int = 256
    hidden: int = 256
    cnn_depth: int = 32
    unimix: float = 0.01
    grad_clip: float = 100.0
    encode_seed: int = 0
    log_every: int = 10


@dataclass
class AgentConfig:
    kind: str = "ditto"
    batch_size: int = 512
    horizon: int = 15
    gamma: float = 0.95
    lam: float = 0.95
    entropy: float = 5e-2
    lr: float = 3e-4
    target_update: int = 100
    steps: int = 2000
    hidden: int = 256
    layers: int = 2
    grad_clip: float = 100.0
    greedy: bool = False
    log_every: int = 10


@dataclass
class RewardConfig:
    kind: str = "ditto_dot"
    eps: float = 1e-3
    tau0: float = 1e-8
    adv_clip: float = 10.0
    # distance used by min_dataset: dot | l2 | cosine
    distance: str = "dot"


@dataclass
class GailConfig:
    disc_hidden: int = 256
    disc_layers: int = 2
    disc_lr: float = 3e-4
    collapse_threshold: float = 1e-3
    collapse_window: int = 1000


@dataclass
class BCConfig:
    entropy: float = 0.1
    steps: int = 2000
    batch_size: int = 256
    lr: float = 3e-4
    frame_stack: int = 1


@dataclass
class EvalConfig:
    episodes: int = 20


@dataclass
class TrainConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    gail: GailConfig = field(default_factory=GailConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.reward.kind not in REWARD_KINDS:
            raise ValueError(f"reward.kind must be one of {REWARD_KINDS}, got {self.reward.kind!r}")
        if self.agent.kind not in AGENT_KINDS:
            raise ValueError(f"agent.kind must be one of {AGENT_KINDS}, got {self.agent.kind!r}")
        if not 0.0 <= self.wm.delta <= 1.0:
            raise ValueError("wm.delta must lie in [0, 1]")
        if self.wm.beta < 0:
            raise ValueError("wm.beta must be non-negative")
        if not (0.0 <= self.agent.gamma <= 1.0 and 0.0 <= self.agent.lam <= 1.0):
            raise ValueError("agent.gamma and agent.lam must lie in [0, 1]")
        if self.agent.horizon < 1:
            raise ValueError("agent.horizon must be >= 1")

    # -- flat key access -------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    def set(self, key: str, raw: Any) -> None:
        """Set a dotted key, coercing strings to the field's type."""
        parts = key.split(".")
        target: Any = self
        for part in parts[:-1]:
            if not hasattr(target, part):
                raise KeyError(f"unknown config section {part!r} in {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(raw, type(current)))

    def updated(self, **overrides: Any) -> "TrainConfig":
        """Copy with dotted-key overrides (use ``__`` for dots in kwargs)."""
        new = TrainConfig.from_flat(self.to_flat())
        for key, value in overrides.items():
            new.set(key.replace("__", "."), value)
        new.validate()
        return new

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "TrainConfig":
        cfg = cls()
        for key, value in flat.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    # -- text format -----------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_flat().items())

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        return cls.from_flat(parse_flat(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.loads(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def parse_flat(text: str) -> dict[str, str]:
    """Raw ``key = value`` pairs of a config file, in file order."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        flat[key] = value
    return flat


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: Any, kind: type) -> Any:
    if not isinstance(raw, str):
        return kind(raw) if kind is not bool else bool(raw)
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {raw!r}")
    if kind is int:
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    return kind(raw)
