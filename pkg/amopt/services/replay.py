"""FIFO replay buffer with uniform sampling"""
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from amopt.services.envs import Transition


@dataclass(frozen=True)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.r.shape[0]


class ReplayBuffer:
    """Ring buffer of transitions; the oldest entry is overwritten when full"""

    def __init__(self, state_dim: int, action_dim: int, capacity: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros(self.capacity)
        self.s_next = np.zeros((self.capacity, state_dim))
        self.done = np.zeros(self.capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        self.s[self.ptr] = transition.s
        self.a[self.ptr] = transition.a
        self.r[self.ptr] = transition.r
        self.s_next[self.ptr] = transition.s_next
        self.done[self.ptr] = float(transition.done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions: Iterable[Transition]) -> None:
        for transition in transitions:
            self.add(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform with replacement over the current contents"""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            s=self.s[idx].copy(),
            a=self.a[idx].copy(),
            r=self.r[idx].copy(),
            s_next=self.s_next[idx].copy(),
            done=self.done[idx].copy(),
        )
