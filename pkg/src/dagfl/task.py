"""Task-DAG lifecycle: publish with escrowed prize, register workers, monitor, finalize."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .crypto import KeyPair, Keyring, UserId, hash_bytes, hash_hex
from .dag import Dag, DagNode, NodeKind
from .dataset import Dataset
from .ledger import InsufficientBalance, Ledger
from .model import Architecture, ModelWeights, evaluate
from .settlement import InsufficientCommittee, elect_committee
from .store import BlobMissing, CommitmentMismatch, ContentStore, digest_from_uri, uri_for


class TaskError(Exception):
    pass


class AlreadyRegistered(TaskError):
    pass


class UnknownStrategy(TaskError, KeyError):
    pass


class NoWinner(TaskError):
    pass


@dataclass(frozen=True)
class TaskDescriptor:
    task_id: str
    publisher: UserId
    weight_commit: str
    weight_uri: str
    test_commit: str
    alpha: float
    prize: int
    contest: str
    penalty: str
    committee: tuple[UserId, ...]
    genesis_tick: int

    @property
    def prize_account(self) -> str:
        return f"task:{self.task_id}:prize"

    def registration_account(self, user: UserId) -> str:
        return f"task:{self.task_id}:reg:{user.index}"


@dataclass
class PrizeAllocation:
    amounts: dict[UserId, int]
    winner: str

    @property
    def total(self) -> int:
        return sum(self.amounts.values())

    def to_json(self) -> dict:
        return {str(u.index): a for u, a in sorted(self.amounts.items())}


@dataclass
class Registration:
    user: UserId
    deposit: int
    tick: int


@dataclass
class MonitorResult:
    kind: str  # continue | penalty | candidate-winner
    node_id: str
    user: UserId | None = None
    amount: int = 0
    reevaluation: float | None = None


@dataclass
class TaskState:
    descriptor: TaskDescriptor
    dag: Dag
    registrations: dict[UserId, Registration] = field(default_factory=dict)
    penalties: dict[UserId, int] = field(default_factory=lambda: defaultdict(int))
    failures: dict[str, str] = field(default_factory=dict)
    candidates: list[tuple[str, float]] = field(default_factory=list)
    termination: DagNode | None = None
    penalty_params: dict = field(default_factory=lambda: {"threshold": 0.5, "base": 10})
    reward_per_reference: int = 1

    @property
    def task_id(self) -> str:
        return self.descriptor.task_id

    # dag_core registry protocol
    def is_registered(self, user: UserId) -> bool:
        return user in self.registrations or user == self.descriptor.publisher

    def has_balance(self, user: UserId) -> bool:
        return True


# --------------------------------------------------------------------------- strategies


def winner_path(dag: Dag, winner_id: str) -> list[str]:
    """Backward walk along each node's first (best-evaluated) source; roots excluded."""
    path, cur = [], winner_id
    while cur is not None and dag[cur].kind not in (NodeKind.GENESIS, NodeKind.TASK_GENESIS):
        path.append(cur)
        cur = dag[cur].sources[0] if dag[cur].sources else None
    return path


def winner_traverse(dag: Dag, context: dict, prize: int) -> PrizeAllocation:
    winner = context["winner"]
    path = winner_path(dag, winner)
    amounts: dict[UserId, int] = defaultdict(int)
    share = prize // len(path) if path else 0
    for nid in path:
        amounts[dag[nid].author] += share
    return PrizeAllocation(dict(amounts), winner)


def immediate_settlement(dag: Dag, context: dict, prize: int) -> PrizeAllocation:
    """Fixed reward to the referred author per cross-author citation, until the prize runs out."""
    reward = int(context.get("reward", 1))
    nodes = context.get("nodes") or dag.order
    invalid = set(context.get("invalidated", ()))
    amounts: dict[UserId, int] = defaultdict(int)
    left = prize
    for nid in nodes:
        node = dag[nid]
        if node.kind != NodeKind.MODEL_UPDATE or nid in invalid:
            continue
        for src in node.sources:
            parent = dag[src]
            if parent.kind == NodeKind.MODEL_UPDATE and src not in invalid and parent.author != node.author:
                pay = min(reward, left)
                if pay:
                    amounts[parent.author] += pay
                    left -= pay
    return PrizeAllocation(dict(amounts), context.get("winner", ""))


ContestStrategy = Callable[[Dag, dict, int], PrizeAllocation]
PenaltyStrategy = Callable[[Dag, DagNode, dict], int]

CONTEST_STRATEGIES: dict[str, ContestStrategy] = {
    "winner-traverse": winner_traverse,
    "immediate-settlement": immediate_settlement,
}


def self_reference_fine(dag: Dag, node: DagNode, params: dict) -> int:
    if not node.sources:
        return 0
    own = sum(1 for s in node.sources if dag[s].author == node.author)
    ratio = Fraction(own, len(node.sources))
    excess = ratio - Fraction(str(params.get("threshold", 0.5)))
    if excess <= 0:
        return 0
    return math.floor(Fraction(str(params.get("base", 10))) * excess)


PENALTY_STRATEGIES: dict[str, PenaltyStrategy] = {
    "self-reference": self_reference_fine,
    "none": lambda dag, node, params: 0,
}


def apply_contest_strategy(tag: str, dag: Dag, context: dict, prize: int) -> PrizeAllocation:
    try:
        fn = CONTEST_STRATEGIES[tag]
    except KeyError:
        raise UnknownStrategy(tag) from None
    alloc = fn(dag, context, prize)
    if alloc.total > prize or any(a < 0 for a in alloc.amounts.values()):
        raise TaskError(f"strategy {tag} over-allocated {alloc.total} > {prize}")
    return alloc


def apply_penalty_strategy(tag: str, dag: Dag, node: DagNode, params: dict | None = None) -> int:
    try:
        fn = PENALTY_STRATEGIES[tag]
    except KeyError:
        raise UnknownStrategy(tag) from None
    return fn(dag, node, params or {})


# --------------------------------------------------------------------------- lifecycle


def publish_task(publisher: KeyPair, weights: ModelWeights, test_set: Dataset, alpha: float, prize: int,
                 contest: str, penalty: str, committee_size: int, ledger: Ledger, keyring: Keyring,
                 store: ContentStore, tick: int = 0, name: str = "task") -> tuple[TaskState, DagNode]:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if contest not in CONTEST_STRATEGIES:
        raise UnknownStrategy(contest)
    if penalty not in PENALTY_STRATEGIES:
        raise UnknownStrategy(penalty)
    if ledger.balance(publisher.user) < prize:
        raise InsufficientBalance(f"{publisher.user.short} cannot escrow prize {prize}")
    weight_commit = store.put_weights(weights)
    test_commit = hash_hex(test_set.to_bytes())
    task_id = hash_hex(f"{name}|{publisher.user.hex()}|{weight_commit}|{test_commit}|{tick}".encode())[:16]
    try:
        committee = elect_committee(ledger, hash_bytes(b"task|" + task_id.encode()), committee_size, keyring)
    except InsufficientCommittee as exc:
        raise TaskError(f"empty committee candidate pool: {exc}") from None
    desc = TaskDescriptor(task_id, publisher.user, weight_commit, uri_for(weight_commit), test_commit,
                          float(alpha), int(prize), contest, penalty, committee.members, tick)
    ledger.deposit(publisher.user, desc.prize_account, prize)
    genesis = DagNode.create(publisher, NodeKind.TASK_GENESIS, tick, weight_commit=weight_commit,
                             weight_uri=desc.weight_uri,
                             payload={"task_id": task_id, "test_commit": test_commit, "alpha": desc.alpha,
                                      "prize": desc.prize, "contest": contest, "penalty": penalty,
                                      "committee": [m.index for m in committee.members]})
    dag = Dag()
    dag.append(genesis)
    return TaskState(desc, dag), genesis


def register_worker(task: TaskState, user: UserId, deposit: int, ledger: Ledger, tick: int = 0) -> Registration:
    if user in task.registrations:
        raise AlreadyRegistered(user.short)
    ledger.deposit(user, task.descriptor.registration_account(user), deposit)
    reg = Registration(user, int(deposit), tick)
    task.registrations[user] = reg
    return reg


def monitor_step(task: TaskState, node: DagNode, arch: Architecture, store: ContentStore,
                 test_set: Dataset) -> MonitorResult:
    """Publisher-side check of one accepted node: penalty rule, then target detection."""
    fine = apply_penalty_strategy(task.descriptor.penalty, task.dag, node, task.penalty_params)
    if fine > 0:
        task.penalties[node.author] += fine
        return MonitorResult("penalty", node.node_id, node.author, fine)
    if node.self_eval > task.descriptor.alpha:
        try:
            weights = store.get_weights(digest_from_uri(node.weight_uri))
        except (BlobMissing, ValueError):
            task.failures[node.node_id] = "weights unavailable"
            return MonitorResult("continue", node.node_id, node.author)
        score = evaluate(arch, weights, test_set)
        if score > task.descriptor.alpha:
            task.candidates.append((node.node_id, score))
            return MonitorResult("candidate-winner", node.node_id, node.author, reevaluation=score)
        return MonitorResult("continue", node.node_id, node.author, reevaluation=score)
    return MonitorResult("continue", node.node_id, node.author)


def finalize_task(task: TaskState, publisher: KeyPair, winner_id: str, revealed: Dataset, arch: Architecture,
                  store: ContentStore, global_dag: Dag, tick: int) -> tuple[DagNode, PrizeAllocation]:
    desc = task.descriptor
    if publisher.user != desc.publisher:
        raise TaskError("only the publisher finalizes")
    if task.termination is not None:
        raise TaskError("task already finalized")
    if hash_hex(revealed.to_bytes()) != desc.test_commit:
        raise CommitmentMismatch("revealed test set does not match the genesis commitment")
    winner = task.dag[winner_id]
    score = evaluate(arch, store.get_weights(digest_from_uri(winner.weight_uri)), revealed)
    if score <= desc.alpha:
        raise NoWinner(f"{winner_id} re-evaluates to {score:.4f} <= {desc.alpha}")
    alloc = apply_contest_strategy(desc.contest, task.dag,
                                   {"winner": winner_id, "reward": task.reward_per_reference}, desc.prize)
    test_digest = store.put_dataset(revealed)
    if global_dag.genesis_id is None:
        raise TaskError("global DAG has no genesis")
    node = DagNode.create(
        publisher, NodeKind.TASK_TERMINATION, tick, sources=[global_dag.genesis_id],
        weight_commit=winner.weight_commit, weight_uri=winner.weight_uri, self_eval=score,
        payload={
            "task_id": desc.task_id,
            "winner": winner_id,
            "winner_author": winner.author.index,
            "test_uri": uri_for(test_digest),
            "test_commit": desc.test_commit,
            "reevaluation": score,
            "allocation": alloc.to_json(),
            "prize_account": desc.prize_account,
            "publisher": desc.publisher.index,
            "penalties": {str(u.index): a for u, a in sorted(task.penalties.items()) if a},
            "registrations": {str(u.index): desc.registration_account(u) for u in sorted(task.registrations)},
        })
    global_dag.append(node)
    task.termination = node
    return node, alloc
