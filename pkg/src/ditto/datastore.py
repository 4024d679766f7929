"""Episode persistence and sampling.

Episode file layout (all little-endian)::

    magic        8 bytes  b"DITTOEP1"
    version      uint16
    T            uint32   number of actions
    H, W, C      uint16   frame shape
    num_actions  uint16
    flags        uint16   bit 0: extrinsic returns present
    observations uint8    (T+1) x H x W x C, row-major
    actions      int32    T
    returns      float32  T   (only if flags & 1)

A dataset directory holds ``<split>/ep_<index>.dep`` files plus a
``manifest.json`` describing each split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .envsim import Episode

MAGIC = b"DITTOEP1"
VERSION = 1
_HEADER = struct.Struct("<8sHIHHHHH")
FLAG_RETURNS = 1


class EpisodeFormatError(ValueError):
    pass


class BadMagicError(EpisodeFormatError):
    pass


class VersionMismatchError(EpisodeFormatError):
    pass


class TruncatedPayloadError(EpisodeFormatError):
    pass


class ConfigurationError(ValueError):
    """Sampling request that no stored data can satisfy."""


class ProvenanceError(ValueError):
    """Latents and world model come from different checkpoints."""


# ---------------------------------------------------------------------------
# Episode files


def encode_episode(e: Episode, num_actions: int | None = None) -> bytes:
    T = e.length
    _, H, W, C = e.observations.shape
    if num_actions is None:
        num_actions = int(e.actions.max()) + 1 if T else 1
    if T and (e.actions.min() < 0 or e.actions.max() >= num_actions):
        raise ValueError(f"actions outside [0, {num_actions})")
    flags = FLAG_RETURNS if e.extrinsic_returns is not None else 0
    parts = [
        _HEADER.pack(MAGIC, VERSION, T, H, W, C, num_actions, flags),
        e.observations.tobytes(order="C"),
        e.actions.astype("<i4").tobytes(),
    ]
    if flags & FLAG_RETURNS:
        parts.append(e.extrinsic_returns.astype("<f4").tobytes())
    return b"".join(parts)


def decode_episode(blob: bytes) -> tuple[Episode, int]:
    """Parse an episode file; returns the episode and its stored action count."""
    if len(blob) < _HEADER.size:
        if blob[:8] != MAGIC[: len(blob[:8])]:
            raise BadMagicError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
        raise TruncatedPayloadError(f"file holds {len(blob)} bytes, header alone needs {_HEADER.size}")
    magic, version, T, H, W, C, num_actions, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"episode format version {version} is not supported (expected {VERSION})")
    n_obs = (T + 1) * H * W * C
    expected = _HEADER.size + n_obs + 4 * T + (4 * T if flags & FLAG_RETURNS else 0)
    if len(blob) < expected:
        raise TruncatedPayloadError(f"payload truncated: {len(blob)} bytes present, header implies {expected}")
    if len(blob) > expected:
        raise EpisodeFormatError(f"{len(blob) - expected} trailing bytes after payload")
    off = _HEADER.size
    obs = np.frombuffer(blob, dtype=np.uint8, count=n_obs, offset=off).reshape(T + 1, H, W, C)
    off += n_obs
    actions = np.frombuffer(blob, dtype="<i4", count=T, offset=off)
    off += 4 * T
    returns = None
    if flags & FLAG_RETURNS:
        returns = np.frombuffer(blob, dtype="<f4", count=T, offset=off)
    if T and (actions.min() < 0 or actions.max() >= num_actions):
        raise EpisodeFormatError(f"stored actions fall outside [0, {num_actions})")
    return Episode(obs.copy(), actions.astype(np.int32), None if returns is None else returns.astype(np.float32)), num_actions


def write_episode(e: Episode, path: str | Path, num_actions: int | None = None) -> None:
    Path(path).write_bytes(encode_episode(e, num_actions))


def read_episode(path: str | Path) -> Episode:
    return decode_episode(Path(path).read_bytes())[0]


# ---------------------------------------------------------------------------
# Dataset directories


def write_dataset(root: str | Path, split: str, episodes: Sequence[Episode], num_actions: int) -> Path:
    split_dir = Path(root) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(episodes):
        name = f"ep_{i:05d}.dep"
        write_episode(e, split_dir / name, num_actions)
        entries.append({"file": name, "length": e.length, "seed": e.seed, "policy_tag": e.policy_tag})
    manifest_path = Path(root) / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"splits": {}}
    tags = sorted({e["policy_tag"] for e in entries})
    manifest["splits"][split] = {
        "count": len(entries),
        "num_actions": num_actions,
        "policy_tags": tags,
        "episodes": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return split_dir


def read_dataset(root: str | Path, split: str) -> list[Episode]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["splits"]:
        raise FileNotFoundError(f"dataset {root} has no split {split!r}")
    episodes = []
    for entry in manifest["splits"][split]["episodes"]:
        e = read_episode(root / split / entry["file"])
        e.seed = entry["seed"]
        e.policy_tag = entry["policy_tag"]
        episodes.append(e)
    return episodes


# ---------------------------------------------------------------------------
# World-model sequence sampling


@dataclass
class SequenceBatch:
    observations: np.ndarray  # (B, L, H, W, C) uint8
    actions: np.ndarray  # (B, L) int64; action taken at each observation
    is_first: np.ndarray  # (B, L) bool
    mask: np.ndarray  # (B, L) bool; False only on padding

    @property
    def shape(self) -> tuple[int, int]:
        return self.actions.shape


def _window_table(lengths: Sequence[int], L: int) -> np.ndarray:
    """All (episode, start) pairs whose L observations and actions fit."""
    rows = [np.stack([np.full(T - L + 1, i), np.arange(T - L + 1)], 1) for i, T in enumerate(lengths) if T >= L]
    return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)


def sample_sequences(
    episodes: Sequence[Episode],
    batch_size: int,
    seq_len: int,
    rng: np.random.Generator,
    pad_short: bool = False,
) -> SequenceBatch:
    """Draw windows uniformly over all in-episode start positions.

    A window holds ``seq_len`` consecutive observations together with the
    action taken at each of them, so an episode with T actions offers
    ``T - seq_len + 1`` starts.  Shorter episodes are dropped unless
    ``pad_short`` is set, in which case they are used whole and right-padded.
    """
    if not episodes or all(e.length < 1 for e in episodes):
        raise ConfigurationError("need at least one episode with length >= 1")
    lengths = [e.length for e in episodes]
    table = _window_table(lengths, seq_len)
    short = [i for i, T in enumerate(lengths) if 1 <= T < seq_len] if pad_short else []
    n_choices = len(table) + len(short)
    if n_choices == 0:
        raise ConfigurationError(
            f"every episode is shorter than seq_len={seq_len} (longest has {max(lengths)} actions) "
            "and padding is disabled"
        )
    H, W, C = episodes[0].observations.shape[1:]
    obs = np.zeros((batch_size, seq_len, H, W, C), dtype=np.uint8)
    actions = np.zeros((batch_size, seq_len), dtype=np.int64)
    is_first = np.zeros((batch_size, seq_len), dtype=bool)
    mask = np.zeros((batch_size, seq_len), dtype=bool)
    for b, choice in enumerate(rng.integers(n_choices, size=batch_size)):
        if choice < len(table):
            ep, start = table[choice]
            n = seq_len
        else:
            ep, start = short[choice - len(table)], 0
            n = lengths[ep]
        e = episodes[ep]
        obs[b, :n] = e.observations[start:start + n]
        actions[b, :n] = e.actions[start:start + n]
        is_first[b, 0] = start == 0
        mask[b, :n] = True
    return SequenceBatch(obs, actions, is_first, mask)


# ---------------------------------------------------------------------------
# Encoded expert latents


@dataclass
class LatentEpisode:
    h: np.ndarray  # (T+1, D_h) float32
    z: np.ndarray  # (T+1, G*K) float32, one-hot per group
    actions: np.ndarray  # (T,) int64

    def __post_init__(self):
        if not (len(self.h) == len(self.z) == len(self.actions) + 1):
            raise ValueError("latent episode needs T+1 states and T actions")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class LatentStore:
    episodes: list[LatentEpisode]
    provenance: str
    encode_seed: int = 0

    def check_provenance(self, checkpoint_id: str) -> None:
        if self.provenance != checkpoint_id:
            raise ProvenanceError(
                f"latent store was encoded with world model {self.provenance}, "
                f"but world model {checkpoint_id} is loaded; re-run encode"
            )

    def flat_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (flat state, action) pair; the final state of each episode has no action."""
        states = np.concatenate([np.concatenate([e.h[:-1], e.z[:-1]], 1) for e in self.episodes])
        actions = np.concatenate([e.actions for e in self.episodes])
        return states.astype(np.float32), actions

    def subset(self, n: int) -> "LatentStore":
        return LatentStore(self.episodes[:n], self.provenance, self.encode_seed)

    def save(self, path: str | Path) -> None:
        arrays = {}
        for i, e in enumerate(self.episodes):
            arrays[f"h_{i}"] = e.h
            arrays[f"z_{i}"] = e.z
            arrays[f"a_{i}"] = e.actions
        meta = json.dumps({"provenance": self.provenance, "encode_seed": self.encode_seed, "n": len(self.episodes)})
        with open(path, "wb") as f:
            np.savez(f, meta=np.array(meta), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "LatentStore":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            episodes = [
                LatentEpisode(data[f"h_{i}"], data[f"z_{i}"], data[f"a_{i}"]) for i in range(meta["n"])
            ]
        return cls(episodes, meta["provenance"], meta["encode_seed"])


@dataclass
class ExpertWindows:
    h: np.ndarray  # (B, H+1, D_h)
    z: np.ndarray  # (B, H+1, G*K)
    actions: np.ndarray  # (B, H)
    episode: np.ndarray  # (B,)
    start: np.ndarray  # (B,)

    @property
    def start_h(self) -> np.ndarray:
        return self.h[:, 0]

    @property
    def start_z(self) -> np.ndarray:
        return self.z[:, 0]


def sample_expert_latent_windows(
    store: LatentStore, batch_size: int, horizon: int, rng: np.random.Generator
) -> ExpertWindows:
    """Uniform draw over (episode, t) with t + horizon <= T."""
    if not store.episodes:
        raise ConfigurationError("latent store is empty")
    table = _window_table([e.length for e in store.episodes], horizon)
    if len(table) == 0:
        raise ConfigurationError(
            f"no expert episode is long enough for horizon {horizon} "
            f"(longest has {max(e.length for e in store.episodes)} actions)"
        )
    picks = table[rng.integers(len(table), size=batch_size)]
    h = np.stack([store.episodes[i].h[t:t + horizon + 1] for i, t in picks])
    z = np.stack([store.episodes[i].z[t:t + horizon + 1] for i, t in picks])
    actions = np.stack([store.episodes[i].actions[t:t + horizon] for i, t in picks])
    return ExpertWindows(h, z, actions, picks[:, 0], picks[:, 1])
