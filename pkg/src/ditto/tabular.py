"""Exact finite-MDP tools for checking imitation-by-RL claims.

Occupancy measures are obtained from a direct linear solve of the discounted
flow equations, so they are exact up to floating point and can serve as
oracles for the sampled, neural parts of the library.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np


@dataclass
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    mu: np.ndarray  # (S,)
    gamma: float

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {self.P.shape}")
        if self.mu.shape != (self.P.shape[0],):
            raise ValueError("mu must have one entry per state")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("each P[s, a, :] must be a probability vector")
        if np.any(self.mu < 0) or abs(self.mu.sum() - 1.0) > 1e-12:
            raise ValueError("mu must be a probability vector")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def _check_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy must have shape {(mdp.n_states, mdp.n_actions)}, got {policy.shape}")
    if np.any(policy < 0) or not np.allclose(policy.sum(1), 1.0, atol=1e-12, rtol=0):
        raise ValueError("policy rows must be probability vectors")
    return policy


def occupancy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Discounted state-action occupancy rho(s, a) = (1 - gamma) sum_t gamma^t P(s_t = s, a_t = a).

    Solves (I - gamma P_pi^T) d = (1 - gamma) mu for the state occupancy d and
    returns d(s) pi(a | s).
    """
    policy = _check_policy(mdp, policy)
    if mdp.gamma >= 1.0:
        raise np.linalg.LinAlgError("occupancy flow system is singular for gamma = 1")
    P_pi = np.einsum("sa,sat->st", policy, mdp.P)
    A = np.eye(mdp.n_states) - mdp.gamma * P_pi.T
    d = np.linalg.solve(A, (1 - mdp.gamma) * mdp.mu)
    return d[:, None] * policy


def flow_residual(mdp: TabularMDP, rho: np.ndarray) -> float:
    """Max violation of sum_a rho(s,a) = (1-g) mu(s) + g sum_{s',a'} P[s',a',s] rho(s',a')."""
    lhs = rho.sum(1)
    rhs = (1 - mdp.gamma) * mdp.mu + mdp.gamma * np.einsum("uas,ua->s", mdp.P, rho)
    return float(np.abs(lhs - rhs).max())


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions have different supports: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class Violation:
    state: int
    action: int
    value: float
    reason: str


def rprime_check(reward: np.ndarray, expert_pairs: Iterable[tuple[int, int]], eps: float) -> tuple[bool, list[Violation]]:
    """Check the relaxed-reward conditions pointwise.

    On expert pairs the reward must equal 1; elsewhere it must lie in [0, 1 - eps].
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    reward = np.asarray(reward, dtype=np.float64)
    in_data = np.zeros(reward.shape, dtype=bool)
    for s, a in expert_pairs:
        in_data[s, a] = True
    violations = []
    for s, a in zip(*np.nonzero(in_data & (reward != 1.0))):
        violations.append(Violation(int(s), int(a), float(reward[s, a]), "expert pair reward != 1"))
    off = ~in_data
    for s, a in zip(*np.nonzero(off & (reward < 0.0))):
        violations.append(Violation(int(s), int(a), float(reward[s, a]), "negative off-dataset reward"))
    for s, a in zip(*np.nonzero(off & (reward > 1.0 - eps))):
        violations.append(Violation(int(s), int(a), float(reward[s, a]), f"off-dataset reward exceeds 1 - eps = {1 - eps}"))
    return not violations, violations


def max_admissible_eps(reward: np.ndarray, expert_pairs: Iterable[tuple[int, int]]) -> float:
    """Largest eps for which ``rprime_check`` passes (0 if none does)."""
    reward = np.asarray(reward, dtype=np.float64)
    in_data = np.zeros(reward.shape, dtype=bool)
    for s, a in expert_pairs:
        in_data[s, a] = True
    if np.any(reward[in_data] != 1.0) or np.any(reward[~in_data] < 0):
        return 0.0
    if in_data.all():
        return 1.0
    return max(0.0, 1.0 - float(reward[~in_data].max()))


def sparse_reward_table(shape: tuple[int, int], expert_pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    r = np.zeros(shape)
    for s, a in expert_pairs:
        r[s, a] = 1.0
    return r


def smoothed_reward_table(embedding: np.ndarray, expert_pairs: Iterable[tuple[int, int]], tau0: float = 1e-8) -> np.ndarray:
    """max over expert pairs of the normalized dot product between pair embeddings.

    ``embedding`` has shape (S, A, D).  Equivalent to one minus the minimum
    dot-product distance to the expert set.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    S, A, D = emb.shape
    pairs = list(expert_pairs)
    if not pairs:
        raise ValueError("expert set is empty")
    flat = emb.reshape(-1, D)
    expert = np.stack([emb[s, a] for s, a in pairs])
    sq_flat = np.einsum("nd,nd->n", flat, flat)[:, None]
    sq_exp = np.einsum("nd,nd->n", expert, expert)[None, :]
    # squared norms directly, so that identical vectors score exactly 1
    r = flat @ expert.T / np.maximum(np.maximum(sq_flat, sq_exp), tau0 ** 2)
    both_small = (sq_flat < tau0 ** 2) & (sq_exp < tau0 ** 2)
    one_small = (sq_flat < tau0 ** 2) ^ (sq_exp < tau0 ** 2)
    r = np.where(both_small, 1.0, np.where(one_small, 0.0, r))
    return r.max(1).reshape(S, A)


def solve_intrinsic(mdp: TabularMDP, reward: np.ndarray, gamma: float | None = None,
                    tol: float = 1e-10, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Value iteration on a reward table.

    Returns a deterministic policy as a one-hot (S, A) array and the state
    values.  Ties (within 1e-9) go to the lowest action index.
    """
    gamma = mdp.gamma if gamma is None else gamma
    if not 0.0 <= gamma < 1.0:
        raise ValueError("value iteration needs gamma in [0, 1)")
    reward = np.asarray(reward, dtype=np.float64)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = reward + gamma * mdp.P @ V
        V_new = Q.max(1)
        delta = np.abs(V_new - V).max()
        V = V_new
        if delta * gamma < tol * (1 - gamma) or delta == 0:
            break
    Q = reward + gamma * mdp.P @ V
    best = np.argmax(Q >= Q.max(1, keepdims=True) - 1e-9, axis=1)
    policy = np.zeros_like(reward)
    policy[np.arange(mdp.n_states), best] = 1.0
    return policy, V


# ---------------------------------------------------------------------------
# Small MDP families


def chain_mdp(n: int = 5, gamma: float = 0.9) -> TabularMDP:
    """n-state chain; action 0 steps left, action 1 steps right, ends are sticky; start at state 0."""
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, n - 1)] = 1.0
    mu = np.zeros(n)
    mu[0] = 1.0
    return TabularMDP(P, mu, gamma)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float) -> TabularMDP:
    P = rng.random((n_states, n_actions, n_states)) ** 3
    P /= P.sum(-1, keepdims=True)
    mu = rng.random(n_states)
    mu /= mu.sum()
    return TabularMDP(P, mu, gamma)


def deterministic_policy(actions: Iterable[int], n_actions: int) -> np.ndarray:
    actions = list(actions)
    pi = np.zeros((len(actions), n_actions))
    pi[np.arange(len(actions)), actions] = 1.0
    return pi


def support_pairs(rho: np.ndarray, threshold: float = 0.0) -> set[tuple[int, int]]:
    return {(int(s), int(a)) for s, a in zip(*np.nonzero(rho > threshold))}


# ---------------------------------------------------------------------------
# Plain-text format
#
#   TABMDP 1
#   <n_states> <n_actions> <gamma>
#   <mu: n_states numbers>
#   <P: n_states * n_actions * n_states numbers, row-major>


def dumps_mdp(mdp: TabularMDP) -> str:
    lines = [
        "TABMDP 1",
        f"{mdp.n_states} {mdp.n_actions} {mdp.gamma!r}",
        " ".join(repr(float(x)) for x in mdp.mu),
        " ".join(repr(float(x)) for x in mdp.P.ravel()),
    ]
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> TabularMDP:
    tokens = text.split()
    if tokens[:2] != ["TABMDP", "1"]:
        raise ValueError("not a TABMDP version 1 file")
    S, A, gamma = int(tokens[2]), int(tokens[3]), float(tokens[4])
    values = np.array([float(t) for t in tokens[5:]])
    if len(values) != S + S * A * S:
        raise ValueError(f"expected {S + S * A * S} probabilities, found {len(values)}")
    return TabularMDP(values[S:].reshape(S, A, S), values[:S], gamma)


def save_mdp(mdp: TabularMDP, path: str | Path) -> None:
    Path(path).write_text(dumps_mdp(mdp))


def load_mdp(path: str | Path) -> TabularMDP:
    return loads_mdp(Path(path).read_text())


def hashable_pairs(pairs: Iterable[tuple[int, int]]) -> set[Hashable]:
    return {(int(s), int(a)) for s, a in pairs}
