import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from dagfl.crypto import Keyring
from dagfl.dag import (BadSignature, Dag, DagNode, DuplicateNode, MalformedNode, NodeKind, NonMonotoneTimestamp,
                       UnknownSource, find_tips, settle_subtree, verify_incoming)
from dagfl.ledger import Ledger, LedgerRegistry
from dagfl.model import TrainingSettings

KR = Keyring(11, 5)
G = NodeKind.GENESIS
U = NodeKind.MODEL_UPDATE


def upd(author, ts, sources, **kw):
    return DagNode.create(KR[author], U, ts, sources=sources, source_evals=[0.5] * len(sources), **kw)


@pytest.fixture
def chain():
    dag = Dag()
    g = dag.append(DagNode.create(KR[0], G, 0, weight_commit="c0"))
    a = dag.append(upd(1, 1, [g], weight_commit="c1"))
    return dag, g, a


def test_node_id_is_hash_of_encoding_and_deterministic():
    n1 = upd(1, 3, ["x"], training_settings=TrainingSettings(seed=2), payload={"b": 1, "a": 2})
    n2 = upd(1, 3, ["x"], training_settings=TrainingSettings(seed=2), payload={"a": 2, "b": 1})
    assert n1.node_id == n2.node_id == n1.compute_id()
    assert n1.signature_valid()


@pytest.mark.parametrize("change", [
    {"timestamp": 4}, {"sources": ("y",)}, {"source_evals": (0.6,)}, {"weight_commit": "z"},
    {"weight_uri": "cas://z"}, {"self_eval": 0.1}, {"payload": {"k": 1}},
    {"training_settings": TrainingSettings(seed=3)}, {"kind": NodeKind.POL_PROOF},
])
def test_every_field_is_covered_by_the_signature(change):
    node = upd(1, 3, ["x"])
    forged = dataclasses.replace(node, **change)
    assert forged.compute_id() != node.node_id
    assert not forged.signature_valid()


def test_verify_incoming_reasons(chain):
    dag, g, a = chain
    assert verify_incoming(dag, upd(2, 2, [a]))
    assert verify_incoming(dag, upd(2, 2, ["f" * 64])).reason == "UnknownSource"
    assert verify_incoming(dag, upd(2, 1, [a])).reason == "NonMonotoneTimestamp"
    assert verify_incoming(dag, dag[a]).reason == "DuplicateNode"
    good = upd(2, 2, [a])
    bad_sig = dataclasses.replace(good, signature=bytes(64))
    assert verify_incoming(dag, bad_sig).reason == "BadSignature"
    tampered = dataclasses.replace(good, self_eval=0.9)
    assert verify_incoming(dag, tampered).reason == "MalformedNode"
    assert verify_incoming(dag, DagNode.create(KR[2], U, 2, sources=[a], source_evals=[])).reason == "MalformedNode"
    assert verify_incoming(dag, DagNode.create(KR[2], U, 2)).reason == "MalformedNode"
    assert verify_incoming(dag, "not a node").reason == "MalformedNode"


def test_verify_incoming_registry(chain):
    dag, g, a = chain
    ledger = Ledger.genesis(KR.users[:3], 1)
    reg = LedgerRegistry(ledger)
    assert verify_incoming(dag, upd(4, 2, [a]), reg).reason == "NotRegistered"
    ledger.transfer(KR[2].user, KR[0].user, 1)
    assert verify_incoming(dag, upd(2, 2, [a]), reg).reason == "InsufficientBalance"
    assert verify_incoming(dag, upd(1, 2, [a]), reg)


def test_append_raises_typed_errors(chain):
    dag, g, a = chain
    for node, err in [(upd(2, 2, ["q"]), UnknownSource), (upd(2, 1, [a]), NonMonotoneTimestamp),
                      (dag[a], DuplicateNode), (dataclasses.replace(upd(2, 2, [a]), signature=bytes(64)), BadSignature),
                      (DagNode.create(KR[2], U, 5, sources=[a, a], source_evals=[1, 1]), MalformedNode),
                      (DagNode.create(KR[2], G, 5, sources=[a]), MalformedNode)]:
        with pytest.raises(err):
            dag.append(node)
    assert len(dag) == 2


def test_tips_ignore_future_and_settlement_children(chain):
    dag, g, a = chain
    b = dag.append(upd(2, 5, [a]))
    dag.append(DagNode.create(KR[0], NodeKind.SETTLEMENT, 6, sources=[b]))
    assert find_tips(dag, 5) == {a}
    assert find_tips(dag, 6) == {b}
    assert find_tips(dag, 100) == {b}


def test_export(tmp_path, chain):
    dag, g, a = chain
    dag.export(tmp_path)
    assert len((tmp_path / "dag_nodes.jsonl").read_text().splitlines()) == 2
    assert (tmp_path / "dag_edges.csv").read_text().splitlines() == ["child,parent", f"{a},{g}"]


@st.composite
def random_dag(draw):
    n = draw(st.integers(1, 25))
    dag = Dag()
    ids = [dag.append(DagNode.create(KR[0], G, 0), verify_signature=False)]
    for i in range(n):
        ts = i + 1
        k = draw(st.integers(1, min(3, len(ids))))
        srcs = draw(st.lists(st.sampled_from(ids), min_size=k, max_size=k, unique=True))
        ids.append(dag.append(upd(draw(st.integers(1, 4)), ts, srcs, payload={"i": i}), verify_signature=False))
    return dag


@given(random_dag())
@settings(max_examples=100, deadline=None)
def test_insertion_order_is_topological(dag):
    pos = {nid: i for i, nid in enumerate(dag.order)}
    for node in dag:
        assert all(pos[s] < pos[node.node_id] for s in node.sources)
        assert all(dag[s].timestamp < node.timestamp for s in node.sources)


@given(random_dag(), st.integers(1, 8))
@settings(max_examples=100, deadline=None)
def test_successive_settlements_partition_the_dag(dag, interval):
    settled: set[str] = set()
    last = max(n.timestamp for n in dag)
    h = 0
    while h * interval <= last + interval:
        close = (h + 1) * interval
        tips = find_tips(dag, close)
        snap = settle_subtree(dag, tips, settled, h)
        assert not settled & set(snap.members)
        for m in snap.members:
            assert dag[m].timestamp < close
            # closure: every non-root source is settled by now
            assert all(s in settled or s in snap.members or dag.is_root(s) for s in dag[m].sources)
        settled |= set(snap.members)
        h += 1
    non_root = {n.node_id for n in dag if not dag.is_root(n.node_id)}
    assert settled == non_root


@given(random_dag(), st.integers(0, 30))
@settings(max_examples=100, deadline=None)
def test_tips_have_no_visible_children(dag, close):
    for t in find_tips(dag, close):
        assert dag[t].timestamp < close
        assert all(dag[c].timestamp >= close for c in dag.children[t])


def test_hand_built_dag_order_and_children():
    dag = Dag()
    g = dag.append(DagNode.create(KR[0], G, 0))
    a, b, c = (dag.append(upd(i + 1, 1, [g], payload={"n": i})) for i in range(3))
    d = dag.append(upd(1, 2, [a, b]))
    e = dag.append(upd(2, 2, [b, c]))
    assert dag.order == [g, a, b, c, d, e]
    assert {k: sorted(v) for k, v in dag.children.items()} == {
        g: sorted([a, b, c]), a: [d], b: sorted([d, e]), c: [e], d: [], e: []}
    assert dag.ancestors(e) == {b, c, g}


def test_chain_subtrees_and_eligibility():
    from dagfl.settlement import SettlementState, eligible_nodes
    dag = Dag()
    g = dag.append(DagNode.create(KR[0], G, 0))
    a = dag.append(upd(1, 1, [g]))
    b = dag.append(upd(2, 2, [a]))
    c = dag.append(upd(3, 3, [b]))
    state = SettlementState()
    snap = settle_subtree(dag, find_tips(dag, 10), state.settled, 0)
    assert snap.members == (a, b, c) and snap.tips == (c,)
    eligible, waiting = eligible_nodes(dag, state, snap, 10)
    assert eligible == [a, b] and waiting == {c}
    state.settled |= set(snap.members)
    state.balanced |= set(eligible)
    state.pending = waiting
    d = dag.append(upd(4, 12, [c]))
    snap2 = settle_subtree(dag, find_tips(dag, 20), state.settled, 1)
    assert snap2.members == (d,)
    assert eligible_nodes(dag, state, snap2, 20) == ([c], {d})


@given(random_dag())
@settings(max_examples=50, deadline=None)
def test_children_index_matches_brute_force(dag):
    for nid in dag.order:
        brute = [n.node_id for n in dag if nid in n.sources]
        assert dag.children[nid] == brute
