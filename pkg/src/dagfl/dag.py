"""DAG ledger shared by task DAGs and the global DAG.

Nodes are immutable and identified by the hash of their canonical encoding
(every field except the signature, length-prefixed in declaration order).
Insertion order is a topological order because a node can only be appended
once all of its sources exist.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Protocol

from .crypto import KeyPair, UserId, hash_hex, verify
from .model import TrainingSettings


class NodeKind(str, Enum):
    GENESIS = "genesis"
    MODEL_UPDATE = "model-update"
    TASK_GENESIS = "task-genesis"
    TASK_TERMINATION = "task-termination"
    SETTLEMENT = "settlement"
    POL_CHALLENGE = "pol-challenge"
    POL_PROOF = "pol-proof"
    POL_RESULT = "pol-result"


ROOT_KINDS = {NodeKind.GENESIS, NodeKind.TASK_GENESIS}
# nodes whose weights can be fetched, evaluated and aggregated
MODEL_KINDS = {NodeKind.GENESIS, NodeKind.TASK_GENESIS, NodeKind.MODEL_UPDATE, NodeKind.TASK_TERMINATION}


class DagError(Exception):
    reason = "DagError"


class UnknownSource(DagError):
    reason = "UnknownSource"


class BadSignature(DagError):
    reason = "BadSignature"


class NonMonotoneTimestamp(DagError):
    reason = "NonMonotoneTimestamp"


class DuplicateNode(DagError):
    reason = "DuplicateNode"


class MalformedNode(DagError):
    reason = "MalformedNode"


def _field(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class DagNode:
    kind: NodeKind
    author: UserId
    sources: tuple[str, ...]
    source_evals: tuple[float, ...]
    weight_commit: str
    weight_uri: str
    training_settings: TrainingSettings | None
    self_eval: float
    timestamp: int
    payload: dict = field(default_factory=dict, compare=False)
    signature: bytes = b""
    node_id: str = field(default="", compare=False)

    def encode(self) -> bytes:
        """Canonical encoding; the signature covers exactly these bytes."""
        parts = [
            self.kind.value.encode(),
            self.author.public_key,
            b"".join(_field(s.encode()) for s in self.sources),
            b"".join(struct.pack("<d", float(e)) for e in self.source_evals),
            self.weight_commit.encode(),
            self.weight_uri.encode(),
            _canon_json(self.training_settings.to_dict() if self.training_settings else None),
            struct.pack("<d", float(self.self_eval)),
            struct.pack("<q", self.timestamp),
            _canon_json(self.payload),
        ]
        return b"".join(_field(p) for p in parts)

    def compute_id(self) -> str:
        return hash_hex(self.encode())

    def signature_valid(self) -> bool:
        return verify(self.author, self.encode(), self.signature)

    @classmethod
    def create(cls, key: KeyPair, kind: NodeKind, timestamp: int, sources: Iterable[str] = (),
               source_evals: Iterable[float] = (), weight_commit: str = "", weight_uri: str = "",
               training_settings: TrainingSettings | None = None, self_eval: float = 0.0,
               payload: dict | None = None) -> "DagNode":
        node = cls(kind=NodeKind(kind), author=key.user, sources=tuple(sources),
                   source_evals=tuple(float(e) for e in source_evals), weight_commit=weight_commit,
                   weight_uri=weight_uri, training_settings=training_settings, self_eval=float(self_eval),
                   timestamp=int(timestamp), payload=dict(payload or {}))
        return node.signed_by(key)

    def signed_by(self, key: KeyPair) -> "DagNode":
        body = DagNode(self.kind, key.user, self.sources, self.source_evals, self.weight_commit,
                       self.weight_uri, self.training_settings, self.self_eval, self.timestamp, self.payload)
        enc = body.encode()
        return DagNode(body.kind, body.author, body.sources, body.source_evals, body.weight_commit,
                       body.weight_uri, body.training_settings, body.self_eval, body.timestamp, body.payload,
                       key.sign(enc), hash_hex(enc))

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind.value,
            "author": self.author.index,
            "author_key": self.author.hex(),
            "sources": list(self.sources),
            "source_evals": list(self.source_evals),
            "weight_commit": self.weight_commit,
            "weight_uri": self.weight_uri,
            "training_settings": self.training_settings.to_dict() if self.training_settings else None,
            "self_eval": self.self_eval,
            "timestamp": self.timestamp,
            "payload": self.payload,
            "signature": self.signature.hex(),
        }


class Registry(Protocol):
    def is_registered(self, user: UserId) -> bool: ...

    def has_balance(self, user: UserId) -> bool: ...


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)


class Dag:
    def __init__(self):
        self.nodes: dict[str, DagNode] = {}
        self.children: dict[str, list[str]] = {}
        self.genesis_id: str | None = None
        self._order: list[str] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __iter__(self) -> Iterator[DagNode]:
        return (self.nodes[i] for i in self._order)

    def __getitem__(self, node_id: str) -> DagNode:
        return self.nodes[node_id]

    @property
    def order(self) -> list[str]:
        return list(self._order)

    def check(self, node: DagNode, verify_signature: bool = True) -> None:
        """Raise the DagError an append of ``node`` would raise."""
        if not node.node_id or node.node_id != node.compute_id():
            raise MalformedNode("node id does not match its encoding")
        if node.node_id in self.nodes:
            raise DuplicateNode(node.node_id)
        if verify_signature and not node.signature_valid():
            raise BadSignature(node.node_id)
        if node.kind in ROOT_KINDS:
            if node.sources:
                raise MalformedNode("root nodes carry no sources")
        elif not node.sources:
            raise MalformedNode(f"{node.kind.value} node needs at least one source")
        if node.kind == NodeKind.MODEL_UPDATE and len(node.sources) != len(node.source_evals):
            raise MalformedNode("sources and source_evals differ in length")
        if len(set(node.sources)) != len(node.sources):
            raise MalformedNode("duplicate source")
        for src in node.sources:
            parent = self.nodes.get(src)
            if parent is None:
                raise UnknownSource(src)
            if parent.timestamp >= node.timestamp:
                raise NonMonotoneTimestamp(f"{src} at {parent.timestamp} >= {node.timestamp}")

    def append(self, node: DagNode, verify_signature: bool = True) -> str:
        self.check(node, verify_signature)
        self.nodes[node.node_id] = node
        self.children[node.node_id] = []
        self._order.append(node.node_id)
        for src in node.sources:
            self.children[src].append(node.node_id)
        if self.genesis_id is None and node.kind in ROOT_KINDS:
            self.genesis_id = node.node_id
        return node.node_id

    def is_root(self, node_id: str) -> bool:
        return self.nodes[node_id].kind in ROOT_KINDS

    def ancestors(self, node_id: str) -> set[str]:
        seen: set[str] = set()
        stack = list(self.nodes[node_id].sources)
        while stack:
            cur = stack.pop()
            if cur not in seen:
                seen.add(cur)
                stack.extend(self.nodes[cur].sources)
        return seen

    def visible(self, before_tick: int) -> list[str]:
        return [i for i in self._order if self.nodes[i].timestamp < before_tick]

    def commits(self) -> dict[str, list[str]]:
        """weight commit -> node ids carrying it, in insertion order."""
        out: dict[str, list[str]] = {}
        for i in self._order:
            c = self.nodes[i].weight_commit
            if c:
                out.setdefault(c, []).append(i)
        return out

    def export(self, directory: str | Path, prefix: str = "dag") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{prefix}_nodes.jsonl", "w") as fh:
            for node in self:
                fh.write(json.dumps(node.to_json(), sort_keys=True) + "\n")
        with open(directory / f"{prefix}_edges.csv", "w") as fh:
            fh.write("child,parent\n")
            for node in self:
                for src in node.sources:
                    fh.write(f"{node.node_id},{src}\n")


def append_node(dag: Dag, node: DagNode) -> str:
    return dag.append(node)


def verify_incoming(dag: Dag, node: DagNode, registry: Registry | None = None) -> Verdict:
    """Structured accept/reject; never raises."""
    try:
        dag.check(node)
    except DagError as exc:
        return Verdict(False, exc.reason)
    except Exception:  # malformed objects must not crash the receiver
        return Verdict(False, "MalformedNode")
    if registry is not None:
        if not registry.is_registered(node.author):
            return Verdict(False, "NotRegistered")
        if not registry.has_balance(node.author):
            return Verdict(False, "InsufficientBalance")
    return ACCEPT


# --------------------------------------------------------------------------- settlement traversal


@dataclass(frozen=True)
class SubtreeSnapshot:
    h: int
    members: tuple[str, ...]
    tips: tuple[str, ...]

    @property
    def balance_members(self) -> tuple[str, ...]:
        tipset = set(self.tips)
        return tuple(m for m in self.members if m not in tipset)

    def to_json(self) -> dict:
        return {"h": self.h, "members": list(self.members), "tips": list(self.tips)}


def interval_bounds(h: int, interval: int) -> tuple[int, int]:
    return h * interval, (h + 1) * interval


def find_tips(dag: Dag, close_tick: int) -> set[str]:
    """Frontier of the DAG restricted to nodes stamped before ``close_tick``.

    Settlement nodes are bookkeeping, not part of the model graph, so they are
    neither tips nor successors.
    """
    tips = set()
    for node in dag:
        if node.timestamp >= close_tick or node.kind == NodeKind.SETTLEMENT:
            continue
        has_child = any(
            dag.nodes[c].timestamp < close_tick and dag.nodes[c].kind != NodeKind.SETTLEMENT
            for c in dag.children[node.node_id]
        )
        if not has_child:
            tips.add(node.node_id)
    return tips


def find_tips_for_interval(dag: Dag, h: int, interval: int) -> set[str]:
    return find_tips(dag, interval_bounds(h, interval)[1])


def settle_subtree(dag: Dag, tips: Iterable[str], prev_boundary: set[str], h: int = 0) -> SubtreeSnapshot:
    """Walk back from the tips until every path hits genesis or an already-settled node."""
    members: set[str] = set()
    tipset = set(tips)
    stack = [t for t in tipset if t not in prev_boundary]
    while stack:
        cur = stack.pop()
        if cur in members or cur in prev_boundary:
            continue
        node = dag.nodes[cur]
        if node.kind in ROOT_KINDS or node.kind == NodeKind.SETTLEMENT:
            continue
        members.add(cur)
        stack.extend(node.sources)
    ordered = tuple(i for i in dag.order if i in members)
    return SubtreeSnapshot(h, ordered, tuple(i for i in ordered if i in tipset))
