"""Dishonest contributor behaviors, layered on top of the honest worker pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crypto import KeyPair
from .dag import Dag, DagNode, NodeKind
from .dataset import Dataset

KINDS = ("normal", "poisoning", "backdoor", "stealing", "colluding", "lazy")
# kinds whose nodes misreport how they were produced
DISHONEST = ("stealing", "colluding", "lazy")


@dataclass
class AdversaryConfig:
    fractions: dict[str, float] = field(default_factory=dict)
    attack_prob: float = 1.0
    backdoor_target: int = 0
    patch_size: int = 2
    backdoor_fraction: float = 0.5

    def __post_init__(self):
        for kind, frac in self.fractions.items():
            if kind not in KINDS or kind == "normal":
                raise ValueError(f"unknown adversary kind {kind!r}")
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"fraction for {kind} must lie in [0, 1]")
        if sum(self.fractions.values()) > 1.0 + 1e-12:
            raise ValueError("adversary fractions sum above 1")
        if not 0.0 <= self.attack_prob <= 1.0 or not 0.0 <= self.backdoor_fraction <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")


def assign_roles(n_users: int, config: AdversaryConfig) -> list[str]:
    """Attackers take the highest user indices, in KINDS order; the rest are normal."""
    roles = ["normal"] * n_users
    pos = n_users
    for kind in KINDS[1:]:
        count = int(round(config.fractions.get(kind, 0.0) * n_users))
        for _ in range(count):
            pos -= 1
            if pos < 0:
                raise ValueError("adversary fractions exceed the user count")
            roles[pos] = kind
    return roles


def poison_shard(shard: Dataset, rng: np.random.Generator | None = None) -> Dataset:
    if shard.n_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    return shard.replace(y=(shard.y + 1) % shard.n_classes)


def backdoor_shard(shard: Dataset, patch_size: int, target: int, rng: np.random.Generator,
                   fraction: float = 1.0, value: float = 1.0) -> Dataset:
    """Saturate a bottom-right patch on a fraction of samples and relabel them to ``target``."""
    if shard.image_shape is None:
        raise ValueError("backdoor needs image-shaped features")
    h, w = shard.image_shape
    if patch_size < 1 or patch_size > min(h, w):
        raise ValueError(f"patch {patch_size} does not fit a {h}x{w} image")
    n_hit = int(round(len(shard) * fraction))
    idx = np.sort(rng.permutation(len(shard))[:n_hit])
    X = shard.X.copy().reshape(len(shard), h, w)
    y = shard.y.copy()
    X[idx, h - patch_size:, w - patch_size:] = value
    y[idx] = target
    return shard.replace(X=X.reshape(len(shard), h * w), y=y)


def patch_trigger(data: Dataset, patch_size: int, value: float = 1.0) -> Dataset:
    """Apply the trigger to every sample (for attack success measurements)."""
    h, w = data.image_shape
    X = data.X.copy().reshape(len(data), h, w)
    X[:, h - patch_size:, w - patch_size:] = value
    return data.replace(X=X.reshape(len(data), h * w))


def stealable(dag: Dag, attacker: KeyPair, pool: Sequence[str]) -> list[str]:
    return [n for n in pool if dag[n].kind == NodeKind.MODEL_UPDATE and dag[n].author != attacker.user]


def steal_node(attacker: KeyPair, dag: Dag, victim_id: str, tick: int) -> DagNode:
    """Re-sign someone else's update as one's own."""
    v = dag[victim_id]
    return DagNode.create(attacker, NodeKind.MODEL_UPDATE, tick, sources=v.sources, source_evals=v.source_evals,
                          weight_commit=v.weight_commit, weight_uri=v.weight_uri,
                          training_settings=v.training_settings, self_eval=v.self_eval)


def collude_node(attacker: KeyPair, honest: DagNode, conspirators: Sequence[str], claimed_eval: float = 1.0) -> DagNode:
    """Keep the honestly trained weights but credit conspirators as sources."""
    if not conspirators:
        return honest
    return DagNode.create(attacker, NodeKind.MODEL_UPDATE, honest.timestamp, sources=list(conspirators),
                          source_evals=[claimed_eval] * len(conspirators), weight_commit=honest.weight_commit,
                          weight_uri=honest.weight_uri, training_settings=honest.training_settings,
                          self_eval=honest.self_eval)


def lazy_node(attacker: KeyPair, dag: Dag, previous_id: str, tick: int) -> DagNode:
    """Publish one's own earlier weights again, claiming a fresh training step on top of them."""
    prev = dag[previous_id]
    return DagNode.create(attacker, NodeKind.MODEL_UPDATE, tick, sources=[previous_id],
                          source_evals=[max(prev.self_eval, 1e-6)], weight_commit=prev.weight_commit,
                          weight_uri=prev.weight_uri, training_settings=prev.training_settings,
                          self_eval=prev.self_eval)


def duplicate_commits(dag: Dag) -> set[str]:
    """Nodes whose weight commit was already published by an earlier node."""
    flagged = set()
    for ids in dag.commits().values():
        flagged.update(ids[1:])
    return flagged
