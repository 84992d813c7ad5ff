"""Periodic committee settlement: election, subtree balancing, consensus, chain.

Every ``interval`` ticks a committee is drawn by VRF lottery weighted by
balance. Members independently recompute the settlement proposal from their
own view of the DAG and accept the leader's proposal only if the canonical
bytes match. Accepted proposals are applied atomically to the ledger.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .crypto import HASH_RING, Keyring, UserId, hash_bytes, hash_hex, verify, vrf_verify
from .dag import Dag, DagNode, NodeKind, SubtreeSnapshot, find_tips, settle_subtree
from .ledger import Ledger, LedgerError
from .pol import PolManager, PolVerdict, clear_challenge


class SettlementError(Exception):
    pass


class InsufficientCommittee(SettlementError):
    pass


class ConsensusFailure(SettlementError):
    pass


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


# --------------------------------------------------------------------------- election


@dataclass(frozen=True)
class Committee:
    members: tuple[UserId, ...]
    leader: UserId
    seed: bytes
    landed: tuple[UserId, ...]
    outputs: dict = field(default_factory=dict, compare=False)  # index -> VrfOutput

    @property
    def indices(self) -> list[int]:
        return [m.index for m in self.members]


def ring_arcs(ledger: Ledger) -> list[tuple[UserId, int, int]]:
    """Contiguous arcs on [0, total) in user order, one per positive balance."""
    arcs, lo = [], 0
    for user in sorted(ledger.balances):
        b = ledger.balances[user]
        if b > 0:
            arcs.append((user, lo, lo + b))
            lo += b
    return arcs


def lands_in_arc(vrf_value: int, lo: int, hi: int, total: int) -> bool:
    # position on the ring scaled to [0, total) with exact integer arithmetic
    pos = vrf_value * total // HASH_RING
    return lo <= pos < hi


def selection_key(vrf_value: int, balance: int) -> float:
    """Weighted lottery key -ln(u)/B; smaller wins. P(min) is proportional to B.

    ``u`` is rehashed from the VRF output so the rank is independent of where
    the output landed on the ring.
    """
    u = (int.from_bytes(hash_bytes(b"rank" + vrf_value.to_bytes(32, "big")), "big") + 1) / HASH_RING
    return -math.log(u) / balance


def elect_committee(ledger: Ledger, seed: bytes, size: int, keyring: Keyring) -> Committee:
    arcs = ring_arcs(ledger)
    if len(arcs) < size or size < 1:
        raise InsufficientCommittee(f"{len(arcs)} users with positive balance, need {size}")
    total = arcs[-1][2]
    outputs, landed, rest = {}, [], []
    for user, lo, hi in arcs:
        out = keyring.key_for(user).vrf(seed)
        outputs[user.index] = out
        v = out.as_int()
        entry = (selection_key(v, hi - lo), user.index, user)
        (landed if lands_in_arc(v, lo, hi, total) else rest).append(entry)
    landed.sort()
    rest.sort()
    chosen = [u for _, _, u in landed[:size]]
    chosen += [u for _, _, u in rest[: size - len(chosen)]]
    leader = min(chosen, key=lambda u: (outputs[u.index].as_int(), u.index))
    return Committee(tuple(sorted(chosen)), leader, seed, tuple(u for _, _, u in landed), outputs)


def verify_committee(committee: Committee, ledger: Ledger) -> bool:
    return all(vrf_verify(m, committee.seed, committee.outputs[m.index]) for m in committee.members)


def settlement_seed(prev_digest: str, h: int, attempt: int = 0) -> bytes:
    return hash_bytes(f"{prev_digest}|{h}|{attempt}".encode())


# --------------------------------------------------------------------------- state


@dataclass
class Grant:
    """A minted reference reward: node ``referrer`` cited ``referred``."""

    referrer: str
    referred: str
    user: UserId
    amount: int
    h: int
    revoked: bool = False


@dataclass
class SettlementState:
    settled: set[str] = field(default_factory=set)
    pending: set[str] = field(default_factory=set)  # settled tips awaiting a child
    balanced: set[str] = field(default_factory=set)
    invalidated: set[str] = field(default_factory=set)
    collected: set[str] = field(default_factory=set)
    grants: list[Grant] = field(default_factory=list)
    grants_by_node: dict[str, list[int]] = field(default_factory=dict)
    fines: list[tuple[UserId, int, str]] = field(default_factory=list)  # queued penalties


@dataclass
class Proposal:
    content: dict
    ledger: Ledger
    snapshot: SubtreeSnapshot
    eligible: list[str]
    new_pending: set[str]
    new_grants: list[Grant]
    revoked: list[int]
    invalidated: list[str]
    collected: list[str]
    verdicts: list[PolVerdict]

    def encode(self) -> bytes:
        return _canon(self.content)

    @property
    def digest(self) -> str:
        return hash_hex(self.encode())


@dataclass
class SettlementNode:
    h: int
    tick: int
    prev: str
    content: dict
    committee: tuple[int, ...]
    leader: int
    signatures: dict[int, str]
    attempts: int
    digest: str

    def to_json(self) -> dict:
        return {"h": self.h, "tick": self.tick, "prev": self.prev, "digest": self.digest,
                "committee": list(self.committee), "leader": self.leader, "attempts": self.attempts,
                "signatures": {str(k): v for k, v in sorted(self.signatures.items())}, **self.content}


# --------------------------------------------------------------------------- balance computation


def eligible_nodes(dag: Dag, state: SettlementState, snapshot: SubtreeSnapshot, close_tick: int) -> tuple[list[str], set[str]]:
    """Settled nodes that have gained a visible child and were not yet balanced.

    Returns (eligible in DAG order, still-pending tips).
    """
    candidates = (set(snapshot.members) | state.pending) - state.balanced
    ready, waiting = set(), set()
    for nid in candidates:
        has_child = any(dag.nodes[c].timestamp < close_tick and dag.nodes[c].kind != NodeKind.SETTLEMENT
                        for c in dag.children[nid])
        (ready if has_child else waiting).add(nid)
    return [i for i in dag.order if i in ready], waiting


def reference_grants(dag: Dag, eligible: Sequence[str], invalidated: set[str], reward: int, h: int) -> list[Grant]:
    """One reward per valid cross-author citation made by an eligible model update."""
    grants = []
    if reward <= 0:
        return grants
    for nid in eligible:
        node = dag.nodes[nid]
        if node.kind != NodeKind.MODEL_UPDATE or nid in invalidated:
            continue
        for src in node.sources:
            parent = dag.nodes[src]
            if parent.kind != NodeKind.MODEL_UPDATE or src in invalidated:
                continue
            if parent.author != node.author:
                grants.append(Grant(nid, src, parent.author, reward, h))
    return grants


def compute_balance_delta(before: Ledger, after: Ledger) -> dict[UserId, int]:
    users = set(before.balances) | set(after.balances)
    return {u: after.balance(u) - before.balance(u) for u in sorted(users)
            if after.balance(u) != before.balance(u)}


def collect_termination(node: DagNode, ledger: Ledger, users: dict[int, UserId]) -> None:
    """Pay out a task's prize allocation, levy its fines and refund the rest."""
    p = node.payload
    prize_acct = p["prize_account"]
    for idx, amt in sorted(p.get("allocation", {}).items(), key=lambda kv: int(kv[0])):
        ledger.release(prize_acct, users[int(idx)], int(amt))
        ledger.rewards[users[int(idx)]] += int(amt)
    publisher = users[int(p["publisher"])]
    ledger.release(prize_acct, publisher, ledger.escrow.get(prize_acct, 0))
    ledger.close_escrow(prize_acct)
    fines = {int(k): int(v) for k, v in p.get("penalties", {}).items()}
    for idx, acct in sorted((int(k), v) for k, v in p.get("registrations", {}).items()):
        held = ledger.escrow.get(acct, 0)
        fine = min(fines.get(idx, 0), held)
        if fine:
            ledger.burn_escrow(acct, fine)
            ledger.penalties[users[idx]] += fine
        ledger.release(acct, users[idx], held - fine)
        ledger.close_escrow(acct)


def build_proposal(dag: Dag, state: SettlementState, ledger: Ledger, h: int, tick: int, prev: str,
                   verdicts: Sequence[PolVerdict], pol: PolManager | None, reward: int,
                   refund_fraction: float) -> Proposal:
    """Pure function of its inputs; every honest member computes identical bytes."""
    users = {u.index: u for u in ledger.balances}
    tips = find_tips(dag, tick)
    snapshot = settle_subtree(dag, tips, state.settled, h)
    new_ledger = ledger.copy()
    invalidated = set(state.invalidated)
    revoked: list[int] = []
    newly_invalid: list[str] = []
    verdict_rows = []

    # verdicts first so that this interval's rewards already respect them
    for v in verdicts:
        ch = pol.challenges[v.challenge_id]
        author = dag[ch.target].author
        deltas = clear_challenge(v, ch, author, new_ledger, refund_fraction)
        verdict_rows.append({**v.to_json(), "deltas": {str(u.index): d for u, d in sorted(deltas.items())}})
        if not v.proved and ch.target not in invalidated:
            invalidated.add(ch.target)
            newly_invalid.append(ch.target)
            for gi in state.grants_by_node.get(ch.target, []):
                g = state.grants[gi]
                if not g.revoked and gi not in revoked:
                    new_ledger.unmint(g.user, g.amount)
                    new_ledger.rewards[g.user] -= g.amount
                    revoked.append(gi)

    eligible, waiting = eligible_nodes(dag, state, snapshot, tick)
    grants = reference_grants(dag, eligible, invalidated, reward, h)
    for g in grants:
        new_ledger.mint(g.user, g.amount)
        new_ledger.rewards[g.user] += g.amount

    collected = []
    for nid in eligible:
        node = dag.nodes[nid]
        if node.kind == NodeKind.TASK_TERMINATION and nid not in state.collected:
            collect_termination(node, new_ledger, users)
            collected.append(nid)

    fines = []
    for user, amount, why in state.fines:
        taken = min(amount, new_ledger.balance(user))
        new_ledger.balances[user] -= taken
        new_ledger.burned += taken
        new_ledger.penalties[user] += taken
        fines.append({"user": user.index, "amount": taken, "reason": why})

    if not new_ledger.conserved():
        raise LedgerError(f"conservation broken in settlement {h}")
    content = {
        "members": list(snapshot.members),
        "tips": list(snapshot.tips),
        "eligible": eligible,
        "grants": len(grants),
        "revoked": len(revoked),
        "verdicts": verdict_rows,
        "invalidated": newly_invalid,
        "collected": collected,
        "fines": fines,
        "deltas": {str(u.index): d for u, d in compute_balance_delta(ledger, new_ledger).items()},
        "ledger": new_ledger.snapshot(),
    }
    return Proposal(content, new_ledger, snapshot, eligible, waiting, grants, sorted(revoked),
                    newly_invalid, collected, list(verdicts))


# --------------------------------------------------------------------------- consensus

ProposalHook = Callable[[dict], dict]


@dataclass
class ConsensusResult:
    accepted: bool
    proposal: Proposal
    votes: dict[int, bool]
    signatures: dict[int, str]


def quorum(n: int) -> int:
    return math.ceil(2 * n / 3)


def run_consensus(committee: Committee, keyring: Keyring, compute: Callable[[int], Proposal],
                  member_hooks: dict[int, ProposalHook] | None = None) -> ConsensusResult:
    """Leader broadcasts; each member recomputes from its view and votes on byte equality.

    ``compute(member_index)`` returns that member's honest proposal; hooks
    model faulty members (or a tampering leader) by rewriting the content.
    """
    hooks = member_hooks or {}
    cache: dict[int, Proposal] = {}

    def local(idx: int) -> tuple[Proposal, bytes]:
        if idx not in cache:
            cache[idx] = compute(idx)
        prop = cache[idx]
        hook = hooks.get(idx)
        content = hook(json.loads(prop.encode())) if hook else prop.content
        return prop, _canon(content)

    leader_prop, broadcast = local(committee.leader.index)
    digest = hash_hex(broadcast).encode()
    votes, sigs = {}, {}
    for member in committee.members:
        _, mine = local(member.index)
        ok = mine == broadcast
        votes[member.index] = ok
        if ok:
            sigs[member.index] = keyring.key_for(member).sign(digest).hex()
    accepted = sum(votes.values()) >= quorum(len(committee.members))
    return ConsensusResult(accepted, leader_prop, votes, sigs)


def verify_signatures(node: SettlementNode, users: dict[int, UserId]) -> int:
    digest = node.digest.encode()
    return sum(verify(users[i], digest, bytes.fromhex(s)) for i, s in node.signatures.items())


# --------------------------------------------------------------------------- engine


class SettlementEngine:
    """Owns the ledger's settlement path for one DAG."""

    def __init__(self, dag: Dag, ledger: Ledger, keyring: Keyring, interval: int = 20,
                 committee_size: int = 7, reward: int = 1, pol: PolManager | None = None,
                 refund_fraction: float = 0.5, max_attempts: int = 5, anchor_nodes: bool = True):
        if interval < 1:
            raise ValueError("interval must be positive")
        self.dag = dag
        self.ledger = ledger
        self.keyring = keyring
        self.interval = interval
        self.committee_size = committee_size
        self.reward = reward
        self.pol = pol
        self.refund_fraction = refund_fraction
        self.max_attempts = max_attempts
        self.anchor_nodes = anchor_nodes
        self.state = SettlementState()
        self.chain: list[SettlementNode] = []
        self.views: dict[int, Dag] = {}
        self.member_hooks: dict[int, ProposalHook] = {}
        self.last_committee: Committee | None = None
        self._anchor = None

    @property
    def prev_digest(self) -> str:
        if self.chain:
            return self.chain[-1].digest
        return hash_hex(b"settlement-genesis|" + (self.dag.genesis_id or "").encode())

    @property
    def h(self) -> int:
        return len(self.chain)

    def queue_fine(self, user: UserId, amount: int, reason: str) -> None:
        if amount > 0:
            self.state.fines.append((user, int(amount), reason))

    def _committee_size(self) -> int:
        eligible = sum(1 for b in self.ledger.balances.values() if b > 0)
        return max(1, min(self.committee_size, eligible))

    def settle_interval(self, tick: int) -> SettlementNode:
        if tick % self.interval:
            raise SettlementError(f"tick {tick} is not a settlement boundary")
        h, prev = self.h, self.prev_digest
        size = self._committee_size()
        for attempt in range(self.max_attempts):
            committee = elect_committee(self.ledger, settlement_seed(prev, h, attempt), size, self.keyring)
            verdicts = self.pol.decide(committee.members, tick) if self.pol else []

            memo: dict[int, Proposal] = {}

            def compute(idx: int, verdicts=verdicts, memo=memo) -> Proposal:
                # members sharing a view share one computation
                view = self.views.get(idx, self.dag)
                if id(view) not in memo:
                    memo[id(view)] = build_proposal(view, self.state, self.ledger, h, tick, prev, verdicts,
                                                    self.pol, self.reward, self.refund_fraction)
                return memo[id(view)]

            result = run_consensus(committee, self.keyring, compute, self.member_hooks)
            if result.accepted:
                return self._commit(result, committee, h, tick, prev, attempt + 1)
        raise ConsensusFailure(f"settlement {h} at tick {tick}: no quorum after {self.max_attempts} committees")

    def _commit(self, result: ConsensusResult, committee: Committee, h: int, tick: int, prev: str,
                attempts: int) -> SettlementNode:
        prop = result.proposal
        st = self.state
        for gi in prop.revoked:
            st.grants[gi].revoked = True
        for g in prop.new_grants:
            st.grants_by_node.setdefault(g.referrer, []).append(len(st.grants))
            st.grants_by_node.setdefault(g.referred, []).append(len(st.grants))
            st.grants.append(g)
        st.invalidated.update(prop.invalidated)
        st.settled.update(prop.snapshot.members)
        st.balanced.update(prop.eligible)
        st.pending = prop.new_pending
        st.collected.update(prop.collected)
        st.fines = []
        self.ledger.__dict__.update(prop.ledger.__dict__)
        if self.pol:
            for v in prop.verdicts:
                self.pol.record(v)
            self.pol.on_settled(prop.snapshot.members, tick)
        node = SettlementNode(h, tick, prev, prop.content, tuple(committee.indices), committee.leader.index,
                              result.signatures, attempts, prop.digest)
        self.chain.append(node)
        self.last_committee = committee
        if self.anchor_nodes:
            self._append_anchor(node, committee)
        return node

    def _append_anchor(self, node: SettlementNode, committee: Committee) -> None:
        source = self._anchor or self.dag.genesis_id
        if source is None:
            return
        if self.dag[source].timestamp >= node.tick:
            return
        anchor = DagNode.create(self.keyring.key_for(committee.leader), NodeKind.SETTLEMENT, node.tick,
                                sources=[source], payload={"h": node.h, "digest": node.digest})
        self._anchor = self.dag.append(anchor)

    def revoked_total(self, user: UserId) -> int:
        return sum(g.amount for g in self.state.grants if g.revoked and g.user == user)

    def export(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for node in self.chain:
                fh.write(json.dumps(node.to_json(), sort_keys=True) + "\n")
