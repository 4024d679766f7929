"""Desk-scale pixel environments, scripted experts and episode collection.

Environments are pure state machines: ``reset(seed)`` and ``step(state, action)``
return fresh :class:`EnvState` objects and never mutate their inputs, so a seed
and an action sequence fully determine the observation sequence.

The bundled ``patrol`` environment is an 8x8 grid drawn at 64x64x3.  One of
four waypoints in the grid corners is lit; stepping onto it pays +1 and lights
the next waypoint in the cycle.  Episodes start on the waypoint preceding the
lit one and, as with sticky actions in the Atari emulator, the previous action
is repeated with probability 0.1.  At a corner the repeated move runs into the
wall, so sticky actions delay the expert without leaving the patrol loop, and
the only off-loop states an imitator meets are the ones its own mistakes lead
to.  ``patrol-inner`` moves the waypoints one cell inwards, where a repeated
move overshoots the turn and demonstrations contain excursions.  The greedy
Manhattan expert is optimal for the deterministic variant (``patrol-det``),
whose return has a closed form (:meth:`PatrolEnv.max_return`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


@dataclass(frozen=True)
class EnvSpec:
    obs_height: int
    obs_width: int
    obs_channels: int
    num_actions: int
    max_episode_steps: int

    def __post_init__(self):
        for name in ("obs_height", "obs_width", "obs_channels", "num_actions", "max_episode_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"EnvSpec.{name} must be >= 1")

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.obs_height, self.obs_width, self.obs_channels)


@dataclass(frozen=True)
class EnvState:
    """Opaque environment state.  ``internal`` is private to the environment."""

    internal: tuple
    step_counter: int
    rng_seed: int
    done: bool = False


@dataclass
class Episode:
    observations: np.ndarray  # (T+1, H, W, C) uint8
    actions: np.ndarray  # (T,) int32
    extrinsic_returns: np.ndarray | None = None  # (T,) float32, evaluation only
    seed: int | None = None
    policy_tag: str = ""

    def __post_init__(self):
        self.observations = np.ascontiguousarray(self.observations, dtype=np.uint8)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.int32)
        if self.extrinsic_returns is not None:
            self.extrinsic_returns = np.ascontiguousarray(self.extrinsic_returns, dtype=np.float32)
        if self.observations.ndim != 4:
            raise ValueError(f"observations must be (T+1, H, W, C), got {self.observations.shape}")
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError(
                f"episode needs len(observations) == len(actions) + 1, got "
                f"{len(self.observations)} and {len(self.actions)}"
            )
        if self.extrinsic_returns is not None and len(self.extrinsic_returns) != len(self.actions):
            raise ValueError("extrinsic_returns must have one entry per action")

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        if self.extrinsic_returns is None:
            raise ValueError("episode was stored without extrinsic returns")
        return float(self.extrinsic_returns.sum())


# ---------------------------------------------------------------------------
# Environments


class PixelEnv:
    """Interface shared by bundled environments and external adapters."""

    spec: EnvSpec
    name: str = "env"

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        raise NotImplementedError

    def step(self, state: EnvState, action: int) -> tuple[EnvState, np.ndarray, float, bool]:
        raise NotImplementedError

    def expert_action(self, state: EnvState) -> int:
        raise NotImplementedError(f"{self.name} has no scripted expert")

    def _check_step(self, state: EnvState, action) -> int:
        if state.done:
            raise ContractViolation("cannot step an environment state that is done")
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) < self.spec.num_actions:
            raise ContractViolation(
                f"action {action!r} out of range [0, {self.spec.num_actions})"
            )
        return int(action)


NOOP, UP, DOWN, LEFT, RIGHT = range(5)
_MOVES = {NOOP: (0, 0), UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

_BACKGROUND = (16, 16, 16)
_WAYPOINT_IDLE = (60, 60, 160)
_WAYPOINT_LIT = (40, 200, 40)
_AGENT = (230, 40, 40)


CORNERS = ((0, 0), (0, 7), (7, 7), (7, 0))
INNER = ((1, 1), (1, 6), (6, 6), (6, 1))


class PatrolEnv(PixelEnv):
    """Visit lit waypoints in a fixed cyclic order on an open grid.

    Args:
        grid: cells per side.
        cell: pixels per cell side.
        max_episode_steps: horizon cap.
        waypoints: (row, col) cells visited in order.  ``None`` with
            ``randomize=True`` draws four distinct cells per episode.
        start: "waypoint" puts the agent on the waypoint preceding the lit
            one, "anywhere" on a uniformly random free cell.
        sticky: probability that the previous action is repeated instead of
            the chosen one (drawn from the episode seed and step counter).
    """

    def __init__(
        self,
        grid: int = 8,
        cell: int = 8,
        max_episode_steps: int = 200,
        waypoints: Sequence[tuple[int, int]] | None = CORNERS,
        randomize: bool = False,
        start: str = "waypoint",
        sticky: float = 0.1,
        name: str = "patrol",
    ):
        if start not in ("waypoint", "anywhere"):
            raise ValueError(f"unknown start mode {start!r}")
        if not 0.0 <= sticky < 1.0:
            raise ValueError("sticky must lie in [0, 1)")
        self.start = start
        self.sticky = sticky
        self.grid = grid
        self.cell = cell
        self.randomize = randomize
        self.name = name
        self.default_waypoints = None if waypoints is None else tuple(tuple(w) for w in waypoints)
        if not randomize and not self.default_waypoints:
            raise ValueError("fixed-layout patrol needs waypoints")
        self.spec = EnvSpec(grid * cell, grid * cell, 3, len(_MOVES), max_episode_steps)

    # internal = (agent_row, agent_col, target_index, waypoints, previous_action)

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        rng = np.random.default_rng(seed)
        if self.randomize:
            flat = rng.choice(self.grid * self.grid, size=4, replace=False)
            waypoints = tuple((int(i) // self.grid, int(i) % self.grid) for i in flat)
        else:
            waypoints = self.default_waypoints
        target = int(rng.integers(len(waypoints)))
        if self.start == "waypoint":
            agent = waypoints[target - 1]
        else:
            while True:
                agent = (int(rng.integers(self.grid)), int(rng.integers(self.grid)))
                if agent != waypoints[target]:
                    break
        state = EnvState((agent[0], agent[1], target, waypoints, NOOP), 0, int(seed))
        return state, self.render(state)

    def step(self, state, action):
        action = self._check_step(state, action)
        row, col, target, waypoints, previous = state.internal
        if self.sticky and np.random.default_rng([state.rng_seed, state.step_counter]).random() < self.sticky:
            action = previous
        dr, dc = _MOVES[action]
        row = min(max(row + dr, 0), self.grid - 1)
        col = min(max(col + dc, 0), self.grid - 1)
        reward = 0.0
        if (row, col) == waypoints[target]:
            reward = 1.0
            target = (target + 1) % len(waypoints)
        counter = state.step_counter + 1
        done = counter >= self.spec.max_episode_steps
        new = EnvState((row, col, target, waypoints, action), counter, state.rng_seed, done)
        return new, self.render(new), reward, done

    def render(self, state: EnvState) -> np.ndarray:
        row, col, target, waypoints = state.internal[:4]
        c = self.cell
        frame = np.empty(self.spec.obs_shape, dtype=np.uint8)
        frame[:] = _BACKGROUND
        for i, (wr, wc) in enumerate(waypoints):
            patch = frame[wr * c:(wr + 1) * c, wc * c:(wc + 1) * c]
            if i == target:
                patch[:] = _WAYPOINT_LIT
            else:
                patch[0, :] = patch[-1, :] = patch[:, 0] = patch[:, -1] = _WAYPOINT_IDLE
        m = c // 4
        frame[row * c + m:(row + 1) * c - m, col * c + m:(col + 1) * c - m] = _AGENT
        return frame

    def expert_action(self, state: EnvState) -> int:
        row, col, target, waypoints = state.internal[:4]
        tr, tc = waypoints[target]
        if tc > col:
            return RIGHT
        if tc < col:
            return LEFT
        if tr > row:
            return DOWN
        if tr < row:
            return UP
        return NOOP

    def max_return(self, state: EnvState) -> float:
        """Largest return reachable from ``state`` before the step cap.

        Exact without sticky actions and an upper bound with them.
        """
        row, col, target, waypoints = state.internal[:4]
        budget = self.spec.max_episode_steps - state.step_counter
        pos, total = (row, col), 0
        while True:
            goal = waypoints[target]
            dist = abs(goal[0] - pos[0]) + abs(goal[1] - pos[1])
            if dist > budget:
                return float(total)
            budget -= dist
            total += 1
            pos, target = goal, (target + 1) % len(waypoints)


class GymAdapter(PixelEnv):
    """Wrap an external emulator exposing the gymnasium ``reset``/``step`` API.

    The emulator is stateful, so the adapter keeps it inside ``EnvState`` and the
    determinism contract holds only if the emulator itself is seed-deterministic.
    """

    def __init__(self, make: Callable[[], object], spec: EnvSpec, name: str = "external"):
        self.make = make
        self.spec = spec
        self.name = name

    def reset(self, seed):
        emulator = self.make()
        obs, _info = emulator.reset(seed=int(seed))
        return EnvState((emulator,), 0, int(seed)), self._frame(obs)

    def step(self, state, action):
        action = self._check_step(state, action)
        (emulator,) = state.internal
        obs, reward, terminated, truncated, _info = emulator.step(action)
        counter = state.step_counter + 1
        done = bool(terminated or truncated or counter >= self.spec.max_episode_steps)
        return EnvState((emulator,), counter, state.rng_seed, done), self._frame(obs), float(reward), done

    def _frame(self, obs) -> np.ndarray:
        frame = np.asarray(obs)
        if frame.shape != self.spec.obs_shape:
            raise ContractViolation(f"emulator frame {frame.shape} does not match {self.spec.obs_shape}")
        return frame.astype(np.uint8, copy=False)


ENV_REGISTRY: dict[str, Callable[[], PixelEnv]] = {
    "patrol": lambda: PatrolEnv(),
    "patrol-det": lambda: PatrolEnv(sticky=0.0, name="patrol-det"),
    "patrol-inner": lambda: PatrolEnv(waypoints=INNER, name="patrol-inner"),
    "patrol-anywhere": lambda: PatrolEnv(start="anywhere", name="patrol-anywhere"),
    "patrol-random": lambda: PatrolEnv(waypoints=None, randomize=True, name="patrol-random"),
}


def make_env(name: str) -> PixelEnv:
    try:
        return ENV_REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; registered: {sorted(ENV_REGISTRY)}") from None


# ---------------------------------------------------------------------------
# Policies used for data collection and evaluation


class Policy:
    """Batched policy acting on a set of lock-stepped environments.

    ``act`` receives the stacked observations and, for privileged scripted
    policies only, the environment states.  Learned policies must ignore
    ``states``.
    """

    tag = "policy"

    def reset(self, n: int, seed: int) -> None:
        pass

    def act(self, observations: np.ndarray, states: Sequence[EnvState]) -> np.ndarray:
        raise NotImplementedError


class ScriptedExpert(Policy):
    tag = "expert"

    def __init__(self, env: PixelEnv):
        self.env = env

    def act(self, observations, states):
        return np.array([self.env.expert_action(s) for s in states], dtype=np.int64)


def scripted_expert_action(env: PixelEnv, state: EnvState) -> int:
    return env.expert_action(state)


class RandomPolicy(Policy):
    tag = "random"

    def __init__(self, num_actions: int):
        self.num_actions = num_actions
        self.rng = np.random.default_rng(0)

    def reset(self, n, seed):
        self.rng = np.random.default_rng(seed)

    def act(self, observations, states):
        return self.rng.integers(self.num_actions, size=len(observations))


class NoisyExpert(Policy):
    """Scripted expert that takes a uniform random action with probability eps."""

    def __init__(self, env: PixelEnv, eps: float):
        self.env = env
        self.eps = eps
        self.tag = f"noisy{eps:g}"
        self.rng = np.random.default_rng(0)

    def reset(self, n, seed):
        self.rng = np.random.default_rng(seed)

    def act(self, observations, states):
        actions = np.array([self.env.expert_action(s) for s in states], dtype=np.int64)
        flip = self.rng.random(len(states)) < self.eps
        actions[flip] = self.rng.integers(self.env.spec.num_actions, size=int(flip.sum()))
        return actions


class ConstantPolicy(Policy):
    def __init__(self, action: int):
        self.action = action
        self.tag = f"constant{action}"

    def act(self, observations, states):
        return np.full(len(observations), self.action, dtype=np.int64)


# ---------------------------------------------------------------------------
# Collection


def derive_seeds(seed: int, n: int) -> list[int]:
    """Deterministic, pairwise-distinct per-episode seeds."""
    children = np.random.SeedSequence(seed).spawn(n)
    seeds = [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
    if len(set(seeds)) != n:  # vanishingly unlikely; fall back to an offset scheme
        seeds = [int(seed) * 1_000_003 + i for i in range(n)]
    return seeds


def rollout(env: PixelEnv, policy: Policy, seeds: Sequence[int], policy_seed: int = 0) -> list[Episode]:
    """Run one episode per seed with all environments stepped in lockstep."""
    n = len(seeds)
    states, frames = zip(*(env.reset(s) for s in seeds))
    states = list(states)
    obs = [[f] for f in frames]
    acts: list[list[int]] = [[] for _ in range(n)]
    rews: list[list[float]] = [[] for _ in range(n)]
    policy.reset(n, policy_seed)
    current = np.stack(frames)
    while not all(s.done for s in states):
        actions = np.asarray(policy.act(current, states))
        if actions.shape != (n,):
            raise ContractViolation(f"policy {policy.tag!r} returned actions of shape {actions.shape}, expected ({n},)")
        for i, state in enumerate(states):
            if state.done:
                continue
            a = actions[i]
            if not 0 <= int(a) < env.spec.num_actions:
                raise ContractViolation(
                    f"policy {policy.tag!r} emitted action {int(a)} outside [0, {env.spec.num_actions}) "
                    f"at step {state.step_counter} of episode seed {seeds[i]}"
                )
            states[i], frame, reward, _ = env.step(state, int(a))
            obs[i].append(frame)
            acts[i].append(int(a))
            rews[i].append(reward)
            current[i] = frame
    return [
        Episode(np.stack(obs[i]), np.array(acts[i], dtype=np.int32), np.array(rews[i], dtype=np.float32),
                seed=seeds[i], policy_tag=policy.tag)
        for i in range(n)
    ]


def collect_episodes(policy: Policy, env: PixelEnv | str, n_episodes: int, seed: int) -> list[Episode]:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if isinstance(env, str):
        env = make_env(env)
    return rollout(env, policy, derive_seeds(seed, n_episodes), policy_seed=seed)


def collect_mixture(
    env: PixelEnv | str,
    policies: Sequence[tuple[Policy, int]],
    seed: int,
) -> list[Episode]:
    """Collect ``count`` episodes per policy; each episode keeps its policy tag."""
    if isinstance(env, str):
        env = make_env(env)
    episodes: list[Episode] = []
    for i, (policy, count) in enumerate(policies):
        if count > 0:
            episodes += collect_episodes(policy, env, count, seed=seed * 7919 + i)
    return episodes
