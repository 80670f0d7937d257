"""Time-major episode batches and an episodic ring replay buffer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BufferError(ValueError):
    """Malformed episode data or invalid sampling request."""


@dataclass
class EpisodeBatch:
    """A batch of (possibly padded) episodes, time-major.

    Step arrays cover t = 0..T-1; the observation-like arrays carry one extra
    trailing step (t = T) so the final transition can bootstrap.
    """

    obs: np.ndarray  # (T+1, B, n_agents, obs_dim) float32
    state: np.ndarray  # (T+1, B, state_dim) float32
    avail: np.ndarray  # (T+1, B, n_agents, n_actions) float32
    actions: np.ndarray  # (T, B, n_agents) int64
    reward: np.ndarray  # (T, B) float32
    terminated: np.ndarray  # (T, B) float32
    filled: np.ndarray  # (T, B) float32, per-episode prefix mask

    def __post_init__(self):
        T, B = self.reward.shape
        expect = {
            "obs": (T + 1, B, self.n_agents, self.obs.shape[3]),
            "state": (T + 1, B, self.state.shape[2]),
            "avail": (T + 1, B, self.n_agents, self.n_actions),
            "actions": (T, B, self.n_agents),
            "reward": (T, B),
            "terminated": (T, B),
            "filled": (T, B),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise BufferError(f"{name} has shape {got}, expected {shape}")
        diffs = np.diff(self.filled, axis=0)
        if np.any(diffs > 0):
            raise BufferError("filled mask must be a per-episode prefix")

    @property
    def T(self) -> int:
        return self.reward.shape[0]

    @property
    def B(self) -> int:
        return self.reward.shape[1]

    @property
    def n_agents(self) -> int:
        return self.actions.shape[2] if self.actions.ndim == 3 else self.obs.shape[2]

    @property
    def n_actions(self) -> int:
        return self.avail.shape[3]

    def episode_lengths(self) -> np.ndarray:
        return self.filled.sum(axis=0).astype(np.int64)


class ReplayBuffer:
    """Ring buffer over whole episodes with uniform without-replacement sampling."""

    def __init__(self, capacity: int, episode_limit: int, n_agents: int, n_actions: int,
                 obs_dim: int, state_dim: int):
        if capacity < 1:
            raise BufferError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.episode_limit = episode_limit
        T = episode_limit
        self.obs = np.zeros((capacity, T + 1, n_agents, obs_dim), dtype=np.float32)
        self.state = np.zeros((capacity, T + 1, state_dim), dtype=np.float32)
        self.avail = np.zeros((capacity, T + 1, n_agents, n_actions), dtype=np.float32)
        self.actions = np.zeros((capacity, T, n_agents), dtype=np.int64)
        self.reward = np.zeros((capacity, T), dtype=np.float32)
        self.terminated = np.zeros((capacity, T), dtype=np.float32)
        self.filled = np.zeros((capacity, T), dtype=np.float32)
        self.lengths = np.zeros(capacity, dtype=np.int64)
        self.insertions = 0  # monotone; ring position = insertions % capacity

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def can_sample(self, batch_size: int) -> bool:
        return len(self) >= batch_size

    def add(self, episode: EpisodeBatch) -> None:
        if episode.B != 1:
            raise BufferError(f"add() takes single episodes, got batch of {episode.B}")
        T = episode.T
        if T > self.episode_limit:
            raise BufferError(f"episode length {T} exceeds buffer horizon {self.episode_limit}")
        slot = self.insertions % self.capacity
        for name in ("obs", "state", "avail", "actions", "reward", "terminated", "filled"):
            dest = getattr(self, name)
            src = getattr(episode, name)[:, 0]
            dest[slot] = 0
            dest[slot, : src.shape[0]] = src
        self.lengths[slot] = int(episode.filled[:, 0].sum())
        self.insertions += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> EpisodeBatch:
        size = len(self)
        if batch_size < 1 or batch_size > size:
            raise BufferError(f"cannot sample {batch_size} episodes from {size} stored")
        idx = rng.choice(size, size=batch_size, replace=False)
        L = int(self.lengths[idx].max())
        return EpisodeBatch(
            obs=self.obs[idx, : L + 1].transpose(1, 0, 2, 3).copy(),
            state=self.state[idx, : L + 1].transpose(1, 0, 2).copy(),
            avail=self.avail[idx, : L + 1].transpose(1, 0, 2, 3).copy(),
            actions=self.actions[idx, :L].transpose(1, 0, 2).copy(),
            reward=self.reward[idx, :L].transpose(1, 0).copy(),
            terminated=self.terminated[idx, :L].transpose(1, 0).copy(),
            filled=self.filled[idx, :L].transpose(1, 0).copy(),
        )
