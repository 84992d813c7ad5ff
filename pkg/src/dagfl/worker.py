"""Contributor loop: sample candidates, keep the best, aggregate, train, publish."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .crypto import KeyPair
from .dag import MODEL_KINDS, Dag, DagNode, NodeKind
from .dataset import Dataset
from .model import Architecture, ModelWeights, TrainingSettings, aggregate, evaluate, train
from .store import ContentStore, digest_from_uri, uri_for

# keeps an all-zero candidate set aggregatable; recorded in the node so replay matches
MIN_EVAL = 1e-6


@dataclass(frozen=True)
class WorkerPolicy:
    beta: int = 6
    sigma: int = 5
    eta: int = 30
    idle_prob: float = 0.1

    def __post_init__(self):
        if not 1 <= self.sigma <= self.beta <= self.eta:
            raise ValueError(f"need 1 <= sigma <= beta <= eta, got {self.sigma}, {self.beta}, {self.eta}")
        if not 0.0 <= self.idle_prob <= 1.0:
            raise ValueError("idle_prob must lie in [0, 1]")


def recent_pool(dag: Dag, eta: int, before_tick: int | None = None, exclude: set[str] | None = None) -> list[str]:
    """The ``eta`` most recently appended evaluable nodes, newest first."""
    pool = []
    for nid in reversed(dag.order):
        node = dag.nodes[nid]
        if node.kind not in MODEL_KINDS:
            continue
        if before_tick is not None and node.timestamp > before_tick:
            continue
        if exclude and nid in exclude:
            continue
        pool.append(nid)
        if len(pool) == eta:
            break
    return pool


def collect_candidates(dag: Dag, policy: WorkerPolicy, arch: Architecture, store: ContentStore,
                       test_shard: Dataset, rng: np.random.Generator, pool: Sequence[str] | None = None) -> list[tuple[str, float]]:
    if pool is None:
        pool = recent_pool(dag, policy.eta)
    if not pool:
        if dag.genesis_id is None:
            raise ValueError("DAG has no evaluable node")
        pool = [dag.genesis_id]
    pick = rng.choice(len(pool), size=min(policy.beta, len(pool)), replace=False)
    out = []
    for i in sorted(int(p) for p in pick):
        nid = pool[i]
        w = store.get_weights(digest_from_uri(dag[nid].weight_uri))
        out.append((nid, evaluate(arch, w, test_shard)))
    return out


def select_sources(candidates: Sequence[tuple[str, float]], sigma: int) -> tuple[list[str], list[float]]:
    """Top ``sigma`` by evaluation, descending; ties go to the smaller node id."""
    ranked = sorted(candidates, key=lambda c: (-c[1], c[0]))[:sigma]
    return [c[0] for c in ranked], [c[1] for c in ranked]


def produce_update(key: KeyPair, dag: Dag, sources: Sequence[str], evals: Sequence[float], settings: TrainingSettings,
                   train_shard: Dataset, test_shard: Dataset, arch: Architecture, store: ContentStore,
                   tick: int) -> tuple[DagNode, ModelWeights]:
    evals = [max(float(e), MIN_EVAL) for e in evals]
    start = aggregate([(store.get_weights(digest_from_uri(dag[s].weight_uri)), e) for s, e in zip(sources, evals)])
    weights = train(arch, start, settings, train_shard)
    digest = store.put_weights(weights)
    node = DagNode.create(key, NodeKind.MODEL_UPDATE, tick, sources=sources, source_evals=evals,
                          weight_commit=digest, weight_uri=uri_for(digest), training_settings=settings,
                          self_eval=evaluate(arch, weights, test_shard))
    return node, weights


def worker_tick(rng: np.random.Generator, policy: WorkerPolicy) -> bool:
    """True when the worker idles this tick."""
    return bool(rng.random() < policy.idle_prob)
