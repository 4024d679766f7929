"""Environment-return evaluation and JSON run reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envsim import PixelEnv, Policy, ScriptedExpert, derive_seeds, rollout


@dataclass
class EvalResult:
    returns: list[float]
    mean: float
    stderr: float
    expert_mean: float | None = None

    @property
    def n(self) -> int:
        return len(self.returns)

    @property
    def relative(self) -> float | None:
        """Mean return divided by the expert's mean return."""
        if self.expert_mean is None or self.expert_mean == 0:
            return None
        return self.mean / self.expert_mean


def mean_stderr(values) -> tuple[float, float]:
    """Sample mean and standard error (ddof = 1); stderr is 0 for a single value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("need at least one value")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def episode_returns(policy: Policy, env: PixelEnv, episodes: int = 20, seed: int = 0) -> list[float]:
    seeds = derive_seeds(seed, episodes)
    eps = rollout(env, policy, seeds)
    return [e.total_return for e in eps]


def evaluate(policy: Policy, env: PixelEnv, episodes: int = 20, seed: int = 0,
             expert: Policy | None = None) -> EvalResult:
    """Mean true return over ``episodes`` fresh episodes.

    The expert reference defaults to the scripted expert on the same seeds.
    """
    returns = episode_returns(policy, env, episodes, seed)
    mean, se = mean_stderr(returns)
    expert = expert if expert is not None else ScriptedExpert(env)
    expert_mean = float(np.mean(episode_returns(expert, env, episodes, seed)))
    return EvalResult(returns, mean, se, expert_mean)


@dataclass
class RunReport:
    """Summary written next to every trained agent."""

    agent: str
    env: str
    seed: int
    expert_episodes: int
    eval: dict
    intrinsic_curve: list = field(default_factory=list)
    collapse: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Fields that must be reproduced exactly under a fixed seed."""
        return {"eval": self.eval, "intrinsic_curve": self.intrinsic_curve, "collapse": self.collapse,
                "hashes": {k: v for k, v in self.hashes.items() if k != "git"}}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


def eval_dict(result: EvalResult) -> dict:
    return {"returns": result.returns, "mean": result.mean, "stderr": result.stderr,
            "n": result.n, "expert_mean": result.expert_mean, "relative": result.relative}
