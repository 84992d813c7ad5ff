"""Proof-of-Learning: challenge, obfuscated proof, committee replay, clearing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .crypto import KeyPair, UserId
from .dag import Dag, DagNode, NodeKind
from .dataset import Dataset, obfuscate
from .ledger import InsufficientBalance, Ledger
from .model import (AggregationError, Architecture, ModelWeights, TrainingSettings, aggregate,
                    fnorm_distance, train)
from .store import BlobMissing, CommitmentMismatch, ContentStore, digest_from_uri, uri_for

PROVED = "learning-proved"
INVALIDATED = "learning-invalidated"


class PolError(Exception):
    pass


class AlreadyChallenged(PolError):
    pass


class SelfChallenge(PolError):
    pass


class NotAuthor(PolError):
    pass


class NotChallengeable(PolError):
    pass


class Inseparable(PolError):
    def __init__(self, report: "CalibrationReport"):
        super().__init__(
            f"honest max {report.honest_max:.3e} >= falsified min {report.falsified_min:.3e}")
        self.report = report


@dataclass
class PolChallenge:
    challenge_id: str
    target: str
    challenger: UserId
    deposit: int
    raised_tick: int
    settled_tick: int | None = None
    deadline: int | None = None

    @property
    def escrow_account(self) -> str:
        return f"pol:{self.challenge_id}"


@dataclass
class PolProof:
    proof_id: str
    challenge_id: str
    prover: UserId
    dataset_commit: str
    dataset_uri: str
    tick: int
    settled_tick: int | None = None


@dataclass
class PolVerdict:
    challenge_id: str
    target: str
    decision: str
    epsilon: float
    distances: dict[int, float | None] = field(default_factory=dict)
    votes_for: int = 0
    reason: str = ""

    @property
    def proved(self) -> bool:
        return self.decision == PROVED

    def to_json(self) -> dict:
        return {
            "challenge": self.challenge_id,
            "target": self.target,
            "decision": self.decision,
            "epsilon": self.epsilon,
            "distances": {str(k): v for k, v in sorted(self.distances.items())},
            "votes_for": self.votes_for,
            "reason": self.reason,
        }


def quorum(n: int) -> int:
    return math.ceil(2 * n / 3)


def replay(arch: Architecture, dag: Dag, store: ContentStore, target: DagNode, data: Dataset) -> ModelWeights:
    """Rebuild the node's starting point from its sources and retrain on ``data``."""
    sources = [store.get_weights(digest_from_uri(dag[s].weight_uri)) for s in target.sources]
    start = aggregate(list(zip(sources, target.source_evals)))
    return train(arch, start, target.training_settings, data)


def replay_distance(arch: Architecture, dag: Dag, store: ContentStore, target: DagNode, data: Dataset) -> float:
    claimed = store.get_weights(digest_from_uri(target.weight_uri))
    return fnorm_distance(replay(arch, dag, store, target, data), claimed)


VerifierHook = Callable[[float | None], float | None]


class PolManager:
    """Tracks challenges on one DAG and turns proofs into committee verdicts."""

    def __init__(self, dag: Dag, store: ContentStore, arch: Architecture, epsilon: float,
                 timeout: int, refund_fraction: float = 0.5, discard_proofs: bool = False):
        if not 0.0 < refund_fraction < 1.0:
            raise ValueError("refund_fraction must lie in (0, 1)")
        self.dag = dag
        self.store = store
        self.arch = arch
        self.epsilon = epsilon
        self.timeout = timeout
        self.refund_fraction = refund_fraction
        self.discard_proofs = discard_proofs
        self.challenges: dict[str, PolChallenge] = {}
        self.by_target: dict[str, str] = {}
        self.proofs: dict[str, PolProof] = {}
        self.verdicts: dict[str, PolVerdict] = {}
        self.verifier_hooks: dict[int, VerifierHook] = {}
        self._replays: dict[tuple[str, str], float | None] = {}

    # ------------------------------------------------------------------ challenge

    def raise_challenge(self, challenger: KeyPair, target_id: str, deposit: int, ledger: Ledger,
                        tick: int) -> PolChallenge:
        target = self.dag.nodes.get(target_id)
        if target is None or target.kind != NodeKind.MODEL_UPDATE:
            raise NotChallengeable(target_id)
        if target_id in self.by_target:
            raise AlreadyChallenged(target_id)
        if challenger.user == target.author:
            raise SelfChallenge(target_id)
        if ledger.balance(challenger.user) < deposit:
            raise InsufficientBalance(f"{challenger.user.short} cannot deposit {deposit}")
        node = DagNode.create(challenger, NodeKind.POL_CHALLENGE, tick, sources=[target_id],
                              payload={"target": target_id, "deposit": deposit})
        self.dag.append(node)
        ch = PolChallenge(node.node_id, target_id, challenger.user, deposit, tick)
        ledger.deposit(challenger.user, ch.escrow_account, deposit)
        self.challenges[ch.challenge_id] = ch
        self.by_target[target_id] = ch.challenge_id
        return ch

    def respond(self, prover: KeyPair, challenge_id: str, train_data: Dataset, sigma: float,
                seed: int, tick: int) -> PolProof:
        ch = self.challenges[challenge_id]
        if self.dag[ch.target].author != prover.user:
            raise NotAuthor(challenge_id)
        noisy = obfuscate(train_data, sigma, seed)
        digest = self.store.put_dataset(noisy)
        node = DagNode.create(prover, NodeKind.POL_PROOF, tick, sources=[challenge_id],
                              payload={"challenge": challenge_id, "dataset_commit": digest,
                                       "dataset_uri": uri_for(digest)})
        self.dag.append(node)
        proof = PolProof(node.node_id, challenge_id, prover.user, digest, uri_for(digest), tick)
        self.proofs[challenge_id] = proof
        return proof

    # ------------------------------------------------------------------ timeline

    def on_settled(self, members: Sequence[str], tick: int) -> list[PolChallenge]:
        """Start countdowns for challenges (and mark proofs) that just got settled."""
        started = []
        memberset = set(members)
        for ch in self.challenges.values():
            if ch.settled_tick is None and ch.challenge_id in memberset:
                ch.settled_tick = tick
                ch.deadline = tick + self.timeout
                started.append(ch)
        for proof in self.proofs.values():
            if proof.settled_tick is None and proof.proof_id in memberset:
                proof.settled_tick = tick
        return started

    def open_challenges(self) -> list[PolChallenge]:
        return [c for c in self.challenges.values() if c.challenge_id not in self.verdicts]

    def due(self, tick: int) -> list[PolChallenge]:
        """Challenges whose verdict the settlement at ``tick`` must decide."""
        out = []
        for ch in self.open_challenges():
            proof = self.proofs.get(ch.challenge_id)
            if proof is not None and proof.settled_tick is not None and proof.settled_tick < tick:
                out.append(ch)
            elif ch.deadline is not None and tick > ch.deadline:
                out.append(ch)
        return out

    # ------------------------------------------------------------------ verification

    def _distance(self, target: DagNode, proof: PolProof) -> float | None:
        key = (target.node_id, proof.dataset_commit)
        if key not in self._replays:
            try:
                data = self.store.get_dataset(digest_from_uri(proof.dataset_uri), verify=True)
                if data_commit_mismatch(proof, data):
                    raise CommitmentMismatch(proof.dataset_commit)
                self._replays[key] = replay_distance(self.arch, self.dag, self.store, target, data)
            except (BlobMissing, CommitmentMismatch, AggregationError, KeyError, ValueError):
                self._replays[key] = None
        return self._replays[key]

    def verify_proof(self, committee: Sequence[UserId], challenge: PolChallenge,
                     epsilon: float | None = None) -> PolVerdict:
        eps = self.epsilon if epsilon is None else epsilon
        proof = self.proofs.get(challenge.challenge_id)
        if proof is None:
            return PolVerdict(challenge.challenge_id, challenge.target, INVALIDATED, eps, reason="timeout")
        if challenge.deadline is not None and proof.tick > challenge.deadline:
            return PolVerdict(challenge.challenge_id, challenge.target, INVALIDATED, eps, reason="late-proof")
        target = self.dag[challenge.target]
        verdict = PolVerdict(challenge.challenge_id, challenge.target, INVALIDATED, eps)
        honest = self._distance(target, proof)
        for member in committee:
            d = honest
            hook = self.verifier_hooks.get(member.index)
            if hook is not None:
                d = hook(d)
            verdict.distances[member.index] = d
            if d is not None and d < eps:
                verdict.votes_for += 1
        if verdict.votes_for >= quorum(len(committee)):
            verdict.decision = PROVED
        else:
            verdict.reason = "unreachable" if honest is None else "distance"
        return verdict

    def decide(self, committee: Sequence[UserId], tick: int) -> list[PolVerdict]:
        return [self.verify_proof(committee, ch) for ch in self.due(tick)]

    def record(self, verdict: PolVerdict) -> None:
        self.verdicts[verdict.challenge_id] = verdict
        proof = self.proofs.get(verdict.challenge_id)
        if self.discard_proofs and proof is not None:
            # the verdict is final; the obfuscated set is no longer needed
            self.store.delete(proof.dataset_commit)


def data_commit_mismatch(proof: PolProof, data: Dataset) -> bool:
    from .crypto import hash_hex

    return hash_hex(data.to_bytes()) != proof.dataset_commit


def clear_challenge(verdict: PolVerdict | None, challenge: PolChallenge, author: UserId, ledger: Ledger,
                    refund_fraction: float) -> dict[UserId, int]:
    """Settle the challenge deposit; returns per-user balance deltas."""
    if verdict is None:
        return {}
    before = {u: ledger.balance(u) for u in (challenge.challenger, author)}
    acct = challenge.escrow_account
    if verdict.proved:
        refund = math.floor(refund_fraction * challenge.deposit)
        ledger.release(acct, challenge.challenger, refund)
        ledger.burn_escrow(acct, challenge.deposit - refund)
    else:
        ledger.release(acct, challenge.challenger, challenge.deposit)
        taken = ledger.seize(author, challenge.challenger, challenge.deposit)
        ledger.penalties[author] += taken
    ledger.close_escrow(acct)
    deltas = {u: ledger.balance(u) - b for u, b in before.items()}
    return {u: d for u, d in deltas.items() if d}


# --------------------------------------------------------------------------- calibration


@dataclass
class CalibrationReport:
    sigma: float
    honest: list[float]
    falsified: list[float]
    epsilon: float | None = None

    @property
    def honest_max(self) -> float:
        return max(self.honest)

    @property
    def falsified_min(self) -> float:
        return min(self.falsified)

    def to_json(self) -> dict:
        return {"sigma": self.sigma, "epsilon": self.epsilon, "honest": self.honest,
                "falsified": self.falsified, "honest_max": self.honest_max,
                "falsified_min": self.falsified_min}


def calibration_starts(arch: Architecture, settings: TrainingSettings, data: Dataset, shard_size: int,
                       seed: int, count: int = 4) -> list[ModelWeights]:
    """Starting points at several stages of training: fresh, early, later."""
    rng = np.random.default_rng([seed, 0xCA1])
    w = arch.init_weights(seed)
    starts = [w]
    rounds = 0
    while len(starts) < count:
        for _ in range(2 ** len(starts)):
            idx = rng.choice(len(data), size=min(shard_size, len(data)), replace=False)
            w = train(arch, w, TrainingSettings(settings.epochs, settings.lr, settings.batch_size,
                                                seed=int(rng.integers(1 << 31))), data.subset(idx))
            rounds += 1
        starts.append(w)
    return starts


def calibrate_epsilon(arch: Architecture, settings: TrainingSettings, data: Dataset, sigma: float,
                      trials: int = 20, shard_size: int = 100, seed: int = 0) -> CalibrationReport:
    """Separate honest replay distances from wrong-seed replay distances.

    Each trial trains a shard from one of several starting points, then replays
    it on an obfuscated copy with the true settings (honest) and with a
    different batch-order seed (falsified). The threshold is the geometric
    midpoint of the gap.
    """
    if trials < 10:
        raise ValueError("calibration needs at least 10 trials")
    starts = calibration_starts(arch, settings, data, shard_size, seed)
    rng = np.random.default_rng([seed, 0xCA2])
    honest, falsified = [], []
    for t in range(trials):
        start = starts[t % len(starts)]
        idx = rng.choice(len(data), size=min(shard_size, len(data)), replace=False)
        shard = data.subset(idx)
        s = TrainingSettings(settings.epochs, settings.lr, settings.batch_size, seed=int(rng.integers(1 << 31)))
        wrong = TrainingSettings(s.epochs, s.lr, s.batch_size, seed=s.seed + 1)
        trained = train(arch, start, s, shard)
        noisy = obfuscate(shard, sigma, int(rng.integers(1 << 31)))
        honest.append(fnorm_distance(train(arch, start, s, noisy), trained))
        falsified.append(fnorm_distance(train(arch, start, wrong, noisy), trained))
    report = CalibrationReport(sigma, honest, falsified)
    lo, hi = report.honest_max, report.falsified_min
    if hi <= lo:
        raise Inseparable(report)
    report.epsilon = hi / 2 if lo == 0 else math.sqrt(lo * hi)
    return report
