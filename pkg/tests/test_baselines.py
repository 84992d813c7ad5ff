import numpy as np
import pytest

from dagfl.baselines import LocalUpdate, async_update, block_round, mining_times, sync_round
from dagfl.model import ModelWeights


def w(v):
    return ModelWeights({"a": np.array([float(v)])})


def test_sync_round_plain_mean():
    out = sync_round(w(0), [LocalUpdate(0, w(1), 3), LocalUpdate(1, w(3), 5)], deadline=10)
    assert out.flat().tolist() == [2.0]


def test_sync_round_excludes_late_updates():
    out = sync_round(w(0), [LocalUpdate(0, w(1), 3), LocalUpdate(1, w(100), 11)], deadline=10)
    assert out.flat().tolist() == [1.0]
    assert sync_round(w(0), [LocalUpdate(1, w(100), 11)], deadline=10) is None


def test_async_merge():
    assert async_update(w(0), w(2)).flat().tolist() == [1.0]
    assert async_update(w(0), w(2), 1.0).flat().tolist() == [2.0]
    # order matters
    a = async_update(async_update(w(0), w(4)), w(8)).flat()[0]
    b = async_update(async_update(w(0), w(8)), w(4)).flat()[0]
    assert (a, b) == (5.0, 4.0)
    with pytest.raises(ValueError):
        async_update(w(0), w(1), 0.0)


def test_two_equal_miners_split_blocks():
    rng = np.random.default_rng(0)
    wins = sum(block_round(h, w(0), [LocalUpdate(0, w(1), 0)], 0, 2, 4.0, rng)[1] == 0 for h in range(10000))
    assert abs(wins / 10000 - 0.5) < 0.015


def test_mining_times_distribution():
    t = mining_times(200000, 4.0, np.random.default_rng(1))
    assert t.min() >= 1 and abs(t.mean() - 4.0) < 0.05
    with pytest.raises(ValueError):
        mining_times(0, 4.0, np.random.default_rng(1))
    with pytest.raises(ValueError):
        mining_times(3, 0.5, np.random.default_rng(1))


def test_block_round_contents():
    block, winner = block_round(3, w(0), [LocalUpdate(0, w(2), 1), LocalUpdate(1, w(4), 2)], 5, 3, 2.0,
                                np.random.default_rng(2), reward=10)
    assert block.height == 3 and block.miner == winner and block.reward == 10
    assert block.mined_at > 5 and block.weights.flat().tolist() == [3.0]
    empty, _ = block_round(0, w(0), [], 5, 3, 2.0, np.random.default_rng(2))
    assert empty is None
