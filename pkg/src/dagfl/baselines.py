"""Comparison frameworks: synchronous averaging, asynchronous merging, mined blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelWeights, aggregate, mean_weights

BASELINE_KINDS = ("google", "async", "block")


@dataclass(frozen=True)
class LocalUpdate:
    runner: int
    weights: ModelWeights
    arrival: int


@dataclass(frozen=True)
class Block:
    height: int
    weights: ModelWeights
    miner: int
    mined_at: int
    reward: int


def sync_round(global_weights: ModelWeights, updates: Sequence[LocalUpdate], deadline: int) -> ModelWeights | None:
    """Plain mean of updates that arrived by the deadline; None skips the round."""
    on_time = [u.weights for u in sorted(updates, key=lambda u: (u.arrival, u.runner)) if u.arrival <= deadline]
    if not on_time:
        return None
    return mean_weights(on_time)


def async_update(global_weights: ModelWeights, local: ModelWeights, weight: float = 0.5) -> ModelWeights:
    """new = (1 - weight) * global + weight * local; order matters across calls."""
    if not 0.0 < weight <= 1.0:
        raise ValueError("async weight must lie in (0, 1]")
    if weight == 1.0:
        return local.copy()
    return aggregate([(global_weights, 1.0 - weight), (local, weight)])


def mining_times(n_miners: int, difficulty: float, rng: np.random.Generator) -> np.ndarray:
    """Ticks each miner needs to find a nonce; success chance per tick is 1/difficulty."""
    if n_miners < 1:
        raise ValueError("need at least one miner")
    if difficulty < 1:
        raise ValueError("difficulty must be >= 1")
    return rng.geometric(1.0 / difficulty, size=n_miners)


def block_round(height: int, global_weights: ModelWeights, updates: Sequence[LocalUpdate], deadline: int,
                n_miners: int, difficulty: float, rng: np.random.Generator, reward: int = 1) -> tuple[Block | None, int]:
    """Aggregate like a sync round, then race the miners; returns (block, winning miner)."""
    weights = sync_round(global_weights, updates, deadline)
    times = mining_times(n_miners, difficulty, rng)
    # simultaneous finds are broken at random so equal miners win equally often
    tied = np.flatnonzero(times == times.min())
    winner = int(tied[0]) if len(tied) == 1 else int(rng.choice(tied))
    if weights is None:
        return None, winner
    return Block(height, weights, winner, deadline + int(times[winner]), reward), winner
