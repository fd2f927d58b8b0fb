"""Fixed-capacity FIFO transition storage with uniform sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    branch_depth: int = 0


class ReplayBuffer:
    """Ring buffer over preallocated arrays; eviction is strictly oldest-first.

    ``done`` marks true terminations (bootstrap cut), not time-limit ends.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.depth = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, done=False, branch_depth=0) -> None:
        i = self._next
        self.obs[i] = s
        self.act[i] = a
        self.rew[i] = r
        self.next_obs[i] = s_next
        self.done[i] = float(done)
        self.depth[i] = branch_depth
        self._advance(1)

    def add_transition(self, t: Transition) -> None:
        self.add(t.s, t.a, t.r, t.s_next, t.done, t.branch_depth)

    def add_batch(self, s, a, r, s_next, done, branch_depth) -> None:
        n = len(r)
        if n == 0:
            return
        if n > self.capacity:  # only the newest rows survive
            s, a, r, s_next = s[-self.capacity:], a[-self.capacity:], r[-self.capacity:], s_next[-self.capacity:]
            done = np.broadcast_to(done, (n,))[-self.capacity:]
            branch_depth = np.broadcast_to(branch_depth, (n,))[-self.capacity:]
            self.total_added += n - self.capacity
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self.obs[idx] = s
        self.act[idx] = a
        self.rew[idx] = r
        self.next_obs[idx] = s_next
        self.done[idx] = done
        self.depth[idx] = branch_depth
        self._advance(n)

    def _advance(self, n):
        self._next = (self._next + n) % self.capacity
        self._size = min(self._size + n, self.capacity)
        self.total_added += n

    def _order(self):
        """Storage indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (self._next + np.arange(self.capacity)) % self.capacity

    def get(self, idx) -> dict:
        return {"obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
                "next_obs": self.next_obs[idx], "done": self.done[idx], "depth": self.depth[idx]}

    def all(self) -> dict:
        return self.get(self._order())

    def transitions(self) -> list[Transition]:
        d = self.all()
        return [Transition(d["obs"][i], d["act"][i], float(d["rew"][i]), d["next_obs"][i],
                           bool(d["done"][i]), int(d["depth"][i])) for i in range(len(self))]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self._size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        return self.get(self.sample_indices(n, rng))


def buffer_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> dict:
    """``n`` transitions drawn uniformly with replacement."""
    return buffer.sample(n, rng)


def mixed_sample(env_buffer: ReplayBuffer, model_buffer: ReplayBuffer, n: int,
                 real_fraction: float, rng: np.random.Generator) -> dict:
    """Minibatch with ``round(real_fraction * n)`` real rows, the rest model rows.

    Falls back to all-real while the model buffer is empty.
    """
    n_real = n if len(model_buffer) == 0 else int(round(real_fraction * n))
    parts = []
    if n_real:
        parts.append(env_buffer.sample(n_real, rng))
    if n - n_real:
        parts.append(model_buffer.sample(n - n_real, rng))
    if len(parts) == 1:
        return parts[0]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
