"""Episode-grouped experience replay with success-first eviction."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CapacityError, UsageError
from .qnet import Transition


@dataclass
class EpisodeRecord:
    transitions: list[Transition]
    success: bool
    episode_id: int = -1
    # compact trajectory used to re-render observations when a run is resumed
    trajectory: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.transitions)


class ReplayBuffer:
    """Holds whole episodes; capacity is counted in transitions.

    When a push overflows the capacity, unsuccessful episodes are evicted
    oldest first; only once none are left are successful episodes dropped,
    again oldest first. Episodes are never split.
    """

    def __init__(self, capacity: int = 4000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: list[EpisodeRecord] = []
        self._size = 0
        self._flat: Optional[list[Transition]] = None

    def __len__(self) -> int:
        return self._size

    def push_episode(self, episode: EpisodeRecord) -> list[EpisodeRecord]:
        """Append ``episode`` and evict as needed; returns the evicted episodes."""
        if len(episode) == 0:
            raise UsageError("cannot push an empty episode")
        if len(episode) > self.capacity:
            raise CapacityError(f"episode of {len(episode)} transitions exceeds capacity {self.capacity}")
        self.episodes.append(episode)
        self._size += len(episode)
        evicted = []
        while self._size > self.capacity:
            victim = next((i for i, e in enumerate(self.episodes) if not e.success), 0)
            ep = self.episodes.pop(victim)
            self._size -= len(ep)
            evicted.append(ep)
        self._flat = None
        return evicted

    def transitions(self) -> list[Transition]:
        if self._flat is None:
            self._flat = [t for ep in self.episodes for t in ep.transitions]
        return self._flat

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        flat = self.transitions()
        if not flat:
            raise UsageError("cannot sample from an empty replay buffer")
        idx = rng.permutation(len(flat))[: min(n, len(flat))]
        return [flat[i] for i in idx]

    def stats(self) -> dict:
        rewards = Counter(round(float(t.reward), 6) for t in self.transitions())
        n_ep = len(self.episodes)
        return {
            "episodes": n_ep,
            "transitions": len(self),
            "capacity": self.capacity,
            "successful_episodes": sum(e.success for e in self.episodes),
            "success_ratio": (sum(e.success for e in self.episodes) / n_ep) if n_ep else 0.0,
            "reward_histogram": {str(k): v for k, v in sorted(rewards.items())},
        }


def sample_without_replacement(buffer: ReplayBuffer, n: int = 64, seed=0) -> list[Transition]:
    """``n`` distinct transitions drawn uniformly (all of them if fewer exist)."""
    return buffer.sample(n, np.random.default_rng(seed))


def push_episode(buffer: ReplayBuffer, episode: EpisodeRecord) -> ReplayBuffer:
    buffer.push_episode(episode)
    return buffer
