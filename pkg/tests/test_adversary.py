import numpy as np
import pytest

from dagfl.adversary import (AdversaryConfig, assign_roles, backdoor_shard, collude_node, duplicate_commits,
                             lazy_node, patch_trigger, poison_shard, stealable, steal_node)
from dagfl.crypto import Keyring
from dagfl.dag import Dag, DagNode, NodeKind
from dagfl.pol import replay_distance
from dagfl.store import ContentStore, uri_for
from dagfl.worker import produce_update

KR = Keyring(17, 6)


def test_config_validation():
    with pytest.raises(ValueError):
        AdversaryConfig({"normal": 0.1})
    with pytest.raises(ValueError):
        AdversaryConfig({"stealing": 0.7, "lazy": 0.5})
    with pytest.raises(ValueError):
        AdversaryConfig({"stealing": 0.1}, attack_prob=2)


def test_roles_take_highest_indices():
    roles = assign_roles(10, AdversaryConfig({"stealing": 0.2, "colluding": 0.2}))
    assert roles == ["normal"] * 6 + ["colluding"] * 2 + ["stealing"] * 2
    assert assign_roles(4, AdversaryConfig()) == ["normal"] * 4


def test_poison_flips_labels(tiny):
    p = poison_shard(tiny)
    assert np.array_equal(p.y, (tiny.y + 1) % 4) and np.array_equal(p.X, tiny.X)


def test_backdoor_patch(digits):
    shard = digits.subset(np.arange(40))
    bd = backdoor_shard(shard, 2, 7, np.random.default_rng(0), fraction=0.5)
    hit = bd.y != shard.y
    imgs = bd.X.reshape(40, 8, 8)
    patched = np.all(imgs[:, 6:, 6:] == 1.0, axis=(1, 2))
    assert patched.sum() >= 20 and np.all(bd.y[patched] == 7) and np.all(patched[hit])
    assert np.array_equal(bd.X[~patched], shard.X[~patched])
    assert np.all(patch_trigger(shard, 3).X.reshape(40, 8, 8)[:, 5:, 5:] == 1.0)
    with pytest.raises(ValueError):
        backdoor_shard(shard, 9, 0, np.random.default_rng(0))


@pytest.fixture
def world(tiny, tiny_arch, fast_settings):
    dag, store = Dag(), ContentStore()
    d = store.put_weights(tiny_arch.init_weights(0))
    g = dag.append(DagNode.create(KR[5], NodeKind.GENESIS, 0, weight_commit=d, weight_uri=uri_for(d)))
    a, _ = produce_update(KR[0], dag, [g], [0.5], fast_settings, tiny, tiny, tiny_arch, store, 1)
    dag.append(a)
    b, _ = produce_update(KR[1], dag, [a.node_id], [0.5], fast_settings, tiny, tiny, tiny_arch, store, 2)
    dag.append(b)
    return dag, store, a, b


def test_stolen_node_copies_weights(world):
    dag, store, a, b = world
    assert stealable(dag, KR[0], dag.order) == [b.node_id]
    s = steal_node(KR[0], dag, b.node_id, 3)
    dag.append(s)
    assert s.author == KR[0].user and s.weight_commit == b.weight_commit
    assert duplicate_commits(dag) == {s.node_id}


def test_colluded_node_fails_replay(world, tiny, tiny_arch, fast_settings):
    dag, store, a, b = world
    # honestly trained from genesis, then re-attributed to a conspirator's node
    honest, _ = produce_update(KR[2], dag, [dag.genesis_id], [0.5], fast_settings, tiny, tiny, tiny_arch, store, 3)
    c = collude_node(KR[2], honest, [a.node_id])
    dag.append(c)
    assert c.sources == (a.node_id,) and c.source_evals == (1.0,)
    assert replay_distance(tiny_arch, dag, store, c, tiny) > 1e-3
    assert collude_node(KR[2], honest, []) is honest


def test_lazy_node_fails_replay(world, tiny, tiny_arch):
    dag, store, a, b = world
    lazy = lazy_node(KR[1], dag, b.node_id, 5)
    dag.append(lazy)
    assert lazy.weight_commit == b.weight_commit
    assert replay_distance(tiny_arch, dag, store, lazy, tiny) > 1e-3
