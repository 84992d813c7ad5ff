"""Independent reference implementations shared by the unit and acceptance tests."""

import math
import random

import numpy as np

from dagfl.crypto import Keyring
from dagfl.dag import Dag, DagNode, NodeKind
from dagfl.ledger import Ledger
from dagfl.model import Architecture, Conv2D, Dense, Flatten, MaxPool2D, ModelWeights, ReLU, aggregate, gradient_check
from dagfl.settlement import SettlementEngine

# one architecture per layer type so a failure points at the layer
LAYER_CASES = {
    "dense": lambda: Architecture((5,), [Dense(3)], 3),
    "relu": lambda: Architecture((5,), [Dense(4), ReLU(), Dense(3)], 3),
    "conv2d": lambda: Architecture((1, 5, 5), [Conv2D(2, 3), Flatten(), Dense(3)], 3),
    "maxpool2d": lambda: Architecture((1, 6, 6), [MaxPool2D(2), Flatten(), Dense(3)], 3),
    "flatten": lambda: Architecture((1, 3, 3), [Flatten(), Dense(3)], 3),
    "cnn": lambda: Architecture.cnn((6, 6), 3, filters=2, kernel=3, hidden=5),
}


def layer_gradient_errors(seed=0):
    rng = np.random.default_rng(seed)
    errors = {}
    for name, build in LAYER_CASES.items():
        arch = build()
        n_in = int(np.prod(arch.input_shape))
        X = rng.normal(size=(6, n_in))
        y = rng.integers(0, 3, size=6)
        errors[name] = gradient_check(arch, X, y, seed=seed)
    return errors


def brute_force_aggregate(pairs):
    total = math.fsum(e for _, e in pairs)
    out = {}
    for name in pairs[0][0].names:
        acc = np.zeros_like(pairs[0][0].tensors[name])
        for idx in np.ndindex(acc.shape):
            acc[idx] = math.fsum(e * w.tensors[name][idx] for w, e in pairs) / total
        out[name] = acc
    return ModelWeights(out)


def random_instance(rng):
    k = int(rng.integers(1, 6))
    shapes = [(int(rng.integers(1, 4)), int(rng.integers(1, 4))), (int(rng.integers(1, 5)),)]
    pairs = []
    for _ in range(k):
        w = ModelWeights({f"t{i}": rng.normal(size=s) for i, s in enumerate(shapes)})
        pairs.append((w, float(rng.uniform(0.01, 1.0))))
    return pairs


def aggregation_max_error(instances=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        pairs = random_instance(rng)
        got, want = aggregate(pairs), brute_force_aggregate(pairs)
        worst = max(worst, float(np.max(np.abs(got.flat() - want.flat()))))
    return worst


def random_settlement_case(rng: random.Random):
    n_users = rng.randint(3, 5)
    kr = Keyring(rng.randrange(10**6), n_users + 1)
    dag = Dag()
    ids = [dag.append(DagNode.create(kr[n_users], NodeKind.GENESIS, 0), verify_signature=False)]
    for ts in sorted(rng.sample(range(1, 40), rng.randint(1, 10))):
        srcs = rng.sample(ids, rng.randint(1, min(3, len(ids))))
        node = DagNode.create(kr[rng.randrange(n_users)], NodeKind.MODEL_UPDATE, ts, sources=srcs,
                              source_evals=[0.5] * len(srcs))
        ids.append(dag.append(node, verify_signature=False))
    led = Ledger.genesis(kr.users[:n_users], 20)
    return dag, led, kr


def oracle_balances(dag: Dag, led: Ledger, reward: int, final_tick: int) -> dict:
    out = {u: led.balance(u) for u in led.balances}
    for node in dag:
        if node.kind != NodeKind.MODEL_UPDATE:
            continue
        if not any(dag[c].timestamp < final_tick and dag[c].kind != NodeKind.SETTLEMENT
                   for c in dag.children[node.node_id]):
            continue
        for s in node.sources:
            p = dag[s]
            if p.kind == NodeKind.MODEL_UPDATE and p.author != node.author:
                out[p.author] += reward
    return out


def settlement_property_suite(cases=1000, seed=0) -> list[str]:
    """Run random small DAGs through the engine; returns a list of failure descriptions."""
    rng = random.Random(seed)
    failures = []
    for case in range(cases):
        dag, led, kr = random_settlement_case(rng)
        interval, reward = rng.choice([5, 10, 20]), rng.choice([1, 3])
        model_nodes = {n.node_id for n in dag if n.kind == NodeKind.MODEL_UPDATE}
        final = (max(n.timestamp for n in dag) // interval + 2) * interval
        expected = oracle_balances(dag, led, reward, final)
        eng = SettlementEngine(dag, led, kr, interval=interval, committee_size=3, reward=reward)
        seen: list[str] = []
        for tick in range(interval, final + 1, interval):
            seen.extend(eng.settle_interval(tick).content["members"])
            if not led.conserved():
                failures.append(f"case {case}: conservation broken at tick {tick}")
        if len(seen) != len(set(seen)) or set(seen) != model_nodes:
            failures.append(f"case {case}: subtrees do not partition the settled nodes")
        if {u: led.balance(u) for u in led.balances} != expected:
            failures.append(f"case {case}: ledger differs from the recomputation")
    return failures
