"""Deterministic discrete-event simulation of contributors, settlement and baselines.

All randomness flows from the configured seed through named numpy generators,
and every collection that feeds an output is iterated in a fixed order, so a
(config, seed) pair always produces the same bytes.
"""

from __future__ import annotations

import heapq
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary as adv
from .config import ExperimentConfig, render_config
from .crypto import Keyring, UserId
from .dag import Dag, DagNode, NodeKind, verify_incoming
from .dataset import Dataset, build_non_iid_shards, load_dataset, split_train_test
from .ledger import Ledger, LedgerRegistry
from .model import Architecture, ModelWeights, TrainingSettings, aggregate, evaluate, train
from .pol import (AlreadyChallenged, PolManager, calibrate_epsilon)
from .settlement import SettlementEngine
from .baselines import LocalUpdate, block_round, async_update, sync_round
from .store import ContentStore, digest_from_uri, uri_for
from .worker import WorkerPolicy, collect_candidates, recent_pool, select_sources, worker_tick, MIN_EVAL

# event kinds; GMUE/LMUE follow the simulator's naming for global/local uploads
GMUE = "GMUE"
LMUE = "LMUE"
READY = "READY"
SETTLEMENT_DUE = "SETTLEMENT_DUE"
POL_RESPONSE = "POL_RESPONSE"
POL_TIMEOUT = "POL_TIMEOUT"
ROUND_TIMEOUT = "ROUND_TIMEOUT"

KIND_COLUMNS = tuple(f"rewards_{k}" for k in adv.KINDS)
METRIC_COLUMNS = ("tick", "framework", "accuracy", "best_accuracy", "total_rewards") + KIND_COLUMNS + (
    "node_count", "rejected", "challenges", "invalidated")


class SchedulingError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- events


@dataclass(order=True)
class Event:
    tick: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(default_factory=dict, compare=False)


class EventQueue:
    """Priority queue ordered by (tick, insertion order)."""

    def __init__(self):
        self._heap: list[Event] = []
        self._seq = 0
        self.now = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, kind: str, tick: int, **payload) -> Event:
        if tick < self.now:
            raise SchedulingError(f"cannot schedule {kind} at {tick}, clock is at {self.now}")
        ev = Event(int(tick), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def next_event(self) -> Event | None:
        """Pop the next event, or None at the end of the simulation."""
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)
        self.now = ev.tick
        return ev


# --------------------------------------------------------------------------- resources


@dataclass(frozen=True)
class RunnerProfile:
    cpu: float = 1.0
    bandwidth: float = 40000.0
    memory: int = 6
    idle_prob: float = 0.1

    def __post_init__(self):
        if self.cpu <= 0 or self.bandwidth <= 0 or self.memory < 1:
            raise ValueError(f"invalid runner profile {self}")

    @property
    def label(self) -> str:
        return f"cpu={self.cpu:g},bw={self.bandwidth:g},mem={self.memory}"


@dataclass(frozen=True)
class CostModel:
    train: float = 0.004  # ticks per epoch-sample at cpu 1
    eval: float = 0.001  # ticks per evaluated sample at cpu 1


def charge_time(profile: RunnerProfile, work: str, costs: CostModel = CostModel(), *, epochs: int = 0,
                samples: int = 0, nbytes: int = 0) -> int:
    if work == "train":
        return math.ceil(costs.train * epochs * samples / profile.cpu)
    if work == "transfer":
        return math.ceil(nbytes / profile.bandwidth)
    if work == "evaluate":
        return math.ceil(costs.eval * samples / profile.cpu)
    raise ValueError(f"unknown work kind {work!r}")


def evaluation_ticks(profile: RunnerProfile, costs: CostModel, candidates: int, samples: int) -> int:
    """Candidates are evaluated in waves bounded by the memory cap."""
    waves = math.ceil(candidates / profile.memory)
    per_wave = min(candidates, profile.memory)
    return waves * charge_time(profile, "evaluate", costs, samples=per_wave * samples)


# --------------------------------------------------------------------------- metrics


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


class MetricsLog:
    """Append-only, one row per completed tick."""

    def __init__(self, framework: str):
        self.framework = framework
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        if self.rows and row["tick"] <= self.rows[-1]["tick"]:
            raise SimulationError("metrics rows must advance in time")
        self.rows.append(row)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(METRIC_COLUMNS) + "\n")
        for row in self.rows:
            out.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
        return out.getvalue()

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: MetricsLog
    summary: dict
    dag_nodes: str = ""
    dag_edges: str = ""
    settlements: str = ""
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float:
        return self.summary["final_accuracy"]

    @property
    def best_accuracy(self) -> float:
        return self.summary["best_accuracy"]


# --------------------------------------------------------------------------- world


@dataclass
class Runner:
    index: int
    key: object
    role: str
    profile: RunnerProfile
    shard: Dataset
    validation: Dataset
    rng: np.random.Generator
    nodes: list[str] = field(default_factory=list)
    local: ModelWeights | None = None

    @property
    def user(self) -> UserId:
        return self.key.user


@dataclass
class World:
    cfg: ExperimentConfig
    arch: Architecture
    train: Dataset
    test: Dataset
    monitor: Dataset
    runners: list[Runner]
    keyring: Keyring
    settings: TrainingSettings
    costs: CostModel
    genesis_weights: ModelWeights
    model_bytes: int


def build_world(cfg: ExperimentConfig) -> World:
    seed = cfg["seed"]
    data = load_dataset(cfg["data.dataset"], seed)
    train_set, test_set = split_train_test(data, cfg["data.train_fraction"], seed)
    n = cfg["runners"]
    plan = build_non_iid_shards(train_set, n, seed, shard_size=cfg["data.shard_size"])
    arch = Architecture.from_name(cfg["model.arch"], data, cfg["model.hidden"])
    roles = adv.assign_roles(n, adv.AdversaryConfig(cfg.adversary_fractions()))
    cpus, bws, mems = cfg.profile_list("cpu"), cfg.profile_list("bandwidth"), cfg.profile_list("memory")
    keyring = Keyring(seed, n + 1)  # the extra key publishes genesis
    val_size = min(cfg["data.validation_size"], len(test_set))
    vrng = np.random.default_rng([seed, 0x7A1])
    monitor = test_set.subset(np.sort(vrng.permutation(len(test_set))[:val_size]))
    runners = []
    for i in range(n):
        rng = np.random.default_rng([seed, 0x5EED, i])
        shard = train_set.subset(plan.shards[i])
        if roles[i] == "poisoning":
            shard = adv.poison_shard(shard)
        elif roles[i] == "backdoor":
            shard = adv.backdoor_shard(shard, cfg["adversary.patch_size"], cfg["adversary.backdoor_target"],
                                       np.random.default_rng([seed, 0xBAD, i]), cfg["adversary.backdoor_fraction"])
        validation = test_set.subset(np.sort(rng.permutation(len(test_set))[:val_size]))
        profile = RunnerProfile(cpus[i], bws[i], int(mems[i]), cfg["worker.idle_prob"])
        runners.append(Runner(i, keyring[i], roles[i], profile, shard, validation, rng))
    settings = TrainingSettings(cfg["model.epochs"], cfg["model.lr"], cfg["model.batch_size"])
    genesis = arch.init_weights(seed)
    return World(cfg, arch, train_set, test_set, monitor, runners, keyring, settings,
                 CostModel(cfg["cost.train"], cfg["cost.eval"]), genesis, len(genesis.to_bytes()))


def _row_base(tick: int, framework: str) -> dict:
    row = {c: 0 for c in METRIC_COLUMNS}
    row.update(tick=tick, framework=framework, accuracy=0.0, best_accuracy=0.0)
    return row


class _Clock:
    """Emits one metrics row for every tick the simulation moves past."""

    def __init__(self, log: MetricsLog, every: int, sample):
        self.log = log
        self.every = every
        self.sample = sample  # callable(tick) -> dict of current values
        self.next_tick = 0
        self.accuracy = 0.0
        self.best = 0.0
        self.samples: list[float] = []
        self._acc_fn = None

    def measure(self, acc: float) -> None:
        self.accuracy = acc
        self.best = max(self.best, acc)
        self.samples.append(acc)

    def advance(self, to_tick: int, accuracy_fn) -> None:
        while self.next_tick < to_tick:
            t = self.next_tick
            if t % self.every == 0 and t > 0:
                self.measure(accuracy_fn())
            row = _row_base(t, self.log.framework)
            row.update(self.sample())
            row.update(accuracy=self.accuracy, best_accuracy=self.best)
            self.log.append(row)
            self.next_tick += 1


# --------------------------------------------------------------------------- DAG framework


class DagSimulation:
    def __init__(self, world: World):
        self.w = world
        cfg = world.cfg
        self.cfg = cfg
        self.queue = EventQueue()
        self.store = ContentStore()
        self.dag = Dag()
        self.rng = np.random.default_rng([cfg["seed"], 0xD06])
        users = [r.user for r in world.runners]
        self.ledger = Ledger.genesis(users, cfg["settlement.initial_balance"])
        self.genesis_key = world.keyring[len(world.runners)]
        self.ledger.add_user(self.genesis_key.user, 0)
        self.registry = LedgerRegistry(self.ledger)
        self.policy = WorkerPolicy(cfg["worker.beta"], cfg["worker.sigma"], cfg["worker.eta"], cfg["worker.idle_prob"])
        digest = self.store.put_weights(world.genesis_weights)
        genesis = DagNode.create(self.genesis_key, NodeKind.GENESIS, 0, weight_commit=digest, weight_uri=uri_for(digest))
        self.dag.append(genesis)
        interval = cfg["settlement.interval"]
        self.pol = None
        self.epsilon = None
        self.calibration = None
        if cfg["pol.enabled"]:
            self.epsilon = cfg["pol.epsilon"] or self._calibrate()
            self.pol = PolManager(self.dag, self.store, world.arch, self.epsilon,
                                  timeout=cfg["pol.timeout_intervals"] * interval,
                                  refund_fraction=cfg["pol.refund_fraction"], discard_proofs=True)
        self.engine = SettlementEngine(self.dag, self.ledger, world.keyring, interval, cfg["settlement.committee_size"],
                                       cfg["settlement.reward"], self.pol, cfg["pol.refund_fraction"],
                                       cfg["settlement.max_attempts"])
        self.by_user = {r.user: r for r in world.runners}
        self.budget = cfg["iterations"] * len(world.runners)
        self.started = 0
        self.in_flight = 0
        self.rejected = 0
        self.rejections: dict[str, int] = defaultdict(int)
        self.timeouts = 0
        self.challenger_cursor = 0
        self._models = 0
        self.done = False

    def _calibrate(self) -> float:
        cfg = self.cfg
        pool = self.w.train
        report = calibrate_epsilon(self.w.arch, self.w.settings, pool, cfg["pol.sigma"],
                                   trials=cfg["pol.calibration_trials"], shard_size=cfg["data.shard_size"],
                                   seed=cfg["seed"])
        self.calibration = report
        return report.epsilon

    # ---------------------------------------------------------------- helpers

    def model_count(self) -> int:
        return sum(1 for n in self.dag if n.kind == NodeKind.MODEL_UPDATE)

    def sample(self) -> dict:
        per_kind = defaultdict(int)
        for r in self.w.runners:
            per_kind[r.role] += self.ledger.rewards.get(r.user, 0)
        row = {f"rewards_{k}": per_kind.get(k, 0) for k in adv.KINDS}
        row.update(total_rewards=sum(per_kind.values()), node_count=self._models, rejected=self.rejected,
                   challenges=len(self.pol.challenges) if self.pol else 0,
                   invalidated=len(self.engine.state.invalidated))
        return row

    def consensus_accuracy(self) -> float:
        """Accuracy of the model a newcomer would assemble from the recent pool."""
        pool = recent_pool(self.dag, self.policy.eta, exclude=self.engine.state.invalidated)
        scored = []
        for nid in pool:
            w = self.store.get_weights(digest_from_uri(self.dag[nid].weight_uri))
            scored.append((nid, evaluate(self.w.arch, w, self.w.monitor)))
        src, evals = select_sources(scored, self.policy.sigma)
        evals = [max(e, MIN_EVAL) for e in evals]
        model = aggregate([(self.store.get_weights(digest_from_uri(self.dag[s].weight_uri)), e)
                           for s, e in zip(src, evals)])
        return evaluate(self.w.arch, model, self.w.test)

    # ---------------------------------------------------------------- jobs

    def _job_ticks(self, runner: Runner, train: bool, download: int) -> int:
        p, c = runner.profile, self.w.costs
        ticks = charge_time(p, "transfer", c, nbytes=download * self.w.model_bytes)
        ticks += charge_time(p, "transfer", c, nbytes=self.w.model_bytes)
        if train:
            ticks += evaluation_ticks(p, c, self.policy.beta, len(runner.validation))
            ticks += charge_time(p, "train", c, epochs=self.w.settings.epochs, samples=len(runner.shard))
        return max(1, ticks)

    def _honest(self, runner: Runner, now: int, pool: list[str]) -> DagNode:
        cands = collect_candidates(self.dag, self.policy, self.w.arch, self.store, runner.validation, runner.rng, pool)
        src, evals = select_sources(cands, self.policy.sigma)
        evals = [max(e, MIN_EVAL) for e in evals]
        settings = TrainingSettings(self.w.settings.epochs, self.w.settings.lr, self.w.settings.batch_size,
                                    seed=int(runner.rng.integers(1 << 31)))
        start = aggregate([(self.store.get_weights(digest_from_uri(self.dag[s].weight_uri)), e)
                           for s, e in zip(src, evals)])
        weights = train(self.w.arch, start, settings, runner.shard)
        digest = self.store.put_weights(weights)
        tick = now + self._job_ticks(runner, True, len(cands))
        return DagNode.create(runner.key, NodeKind.MODEL_UPDATE, tick, sources=src, source_evals=evals,
                              weight_commit=digest, weight_uri=uri_for(digest), training_settings=settings,
                              self_eval=evaluate(self.w.arch, weights, runner.validation))

    def _plan(self, runner: Runner, now: int) -> DagNode | None:
        """Build the node this runner will publish, or None to idle a tick."""
        invalid = self.engine.state.invalidated
        pool = recent_pool(self.dag, self.policy.eta, exclude=invalid)
        attack = runner.role in ("stealing", "colluding", "lazy") and runner.rng.random() < self.cfg["adversary.attack_prob"]
        if attack and runner.role == "stealing":
            victims = adv.stealable(self.dag, runner.key, pool)
            if not victims:
                return None
            victim = victims[int(runner.rng.integers(len(victims)))]
            return adv.steal_node(runner.key, self.dag, victim, now + self._job_ticks(runner, False, 1))
        if attack and runner.role == "lazy" and runner.nodes:
            return adv.lazy_node(runner.key, self.dag, runner.nodes[-1], now + self._job_ticks(runner, False, 0))
        if attack and runner.role == "colluding":
            non_root = [n for n in pool if self.dag[n].kind == NodeKind.MODEL_UPDATE]
            if len(non_root) < 2:
                return None
            honest = self._honest(runner, now, pool)
            mates = []
            for r in self.w.runners:
                if r.role == "colluding" and r.index != runner.index and r.nodes:
                    mates.append(r.nodes[-1])
            claimed = mates or [self.dag.genesis_id]
            return adv.collude_node(runner.key, honest, claimed)
        return self._honest(runner, now, pool)

    # ---------------------------------------------------------------- handlers

    def on_ready(self, ev: Event) -> None:
        runner = self.w.runners[ev.payload["runner"]]
        if self.started >= self.budget:
            return
        if worker_tick(runner.rng, self.policy):
            self.queue.schedule(READY, ev.tick + 1, runner=runner.index)
            return
        node = self._plan(runner, ev.tick)
        if node is None:
            self.queue.schedule(READY, ev.tick + 1, runner=runner.index)
            return
        self.started += 1
        self.in_flight += 1
        self.queue.schedule(GMUE, node.timestamp, runner=runner.index, node=node)

    def on_gmue(self, ev: Event) -> None:
        runner = self.w.runners[ev.payload["runner"]]
        node: DagNode = ev.payload["node"]
        self.in_flight -= 1
        verdict = verify_incoming(self.dag, node, self.registry)
        if verdict:
            self.dag.append(node, verify_signature=False)  # checked by verify_incoming
            runner.nodes.append(node.node_id)
            self._models += 1
        else:
            self.rejected += 1
            self.rejections[verdict.reason] += 1
        self.queue.schedule(READY, ev.tick, runner=runner.index)

    def _challenger(self, author: UserId):
        honest = [r for r in self.w.runners if r.role == "normal"]
        for k in range(len(honest)):
            r = honest[(self.challenger_cursor + k) % len(honest)]
            if r.user != author and self.ledger.balance(r.user) >= self.cfg["pol.deposit"]:
                self.challenger_cursor = (self.challenger_cursor + k + 1) % len(honest)
                return r
        return None

    def _audit(self, members: tuple[str, ...], tick: int) -> None:
        dupes = None
        for nid in members:
            node = self.dag[nid]
            if node.kind != NodeKind.MODEL_UPDATE or nid in self.pol.by_target:
                continue
            if dupes is None:
                dupes = _duplicate_set(self.dag)
            if nid in dupes or self.rng.random() < self.cfg["pol.audit_fraction"]:
                challenger = self._challenger(node.author)
                if challenger is None:
                    continue
                try:
                    self.pol.raise_challenge(challenger.key, nid, self.cfg["pol.deposit"], self.ledger, tick)
                except AlreadyChallenged:
                    pass

    def on_settlement(self, ev: Event) -> None:
        s = self.engine.settle_interval(ev.tick)
        if self.pol:
            members = tuple(s.content["members"])
            started = [c for c in self.pol.challenges.values() if c.settled_tick == ev.tick]
            for ch in started:
                author = self.dag[ch.target].author
                runner = self.by_user.get(author)
                if runner is not None and runner.role != "stealing":
                    self.queue.schedule(POL_RESPONSE, ev.tick + 1, challenge=ch.challenge_id)
                self.queue.schedule(POL_TIMEOUT, ch.deadline + 1, challenge=ch.challenge_id)
            self._audit(members, ev.tick)
        if not self._finished(ev.tick):
            self.queue.schedule(SETTLEMENT_DUE, ev.tick + self.engine.interval)
        else:
            self.done = True

    def on_response(self, ev: Event) -> None:
        ch = self.pol.challenges[ev.payload["challenge"]]
        target = self.dag[ch.target]
        runner = self.by_user[target.author]
        self.pol.respond(runner.key, ch.challenge_id, runner.shard, self.cfg["pol.sigma"],
                         int(runner.rng.integers(1 << 31)), ev.tick)

    def on_timeout(self, ev: Event) -> None:
        if ev.payload["challenge"] not in self.pol.proofs:
            self.timeouts += 1

    def _finished(self, tick: int) -> bool:
        if self.started < self.budget or self.in_flight:
            return False
        if any(n.timestamp < tick and n.node_id not in self.engine.state.settled and n.kind not in
               (NodeKind.GENESIS, NodeKind.SETTLEMENT) for n in self.dag):
            return False
        if self.pol and self.pol.open_challenges():
            return False
        return True

    # ---------------------------------------------------------------- driver

    def run(self) -> MetricsLog:
        log = MetricsLog("dag")
        clock = _Clock(log, self.cfg["metrics.eval_every"], self.sample)
        self.clock = clock
        if self.budget == 0:
            return log
        for r in self.w.runners:
            self.queue.schedule(READY, 0, runner=r.index)
        self.queue.schedule(SETTLEMENT_DUE, self.engine.interval)
        handlers = {READY: self.on_ready, GMUE: self.on_gmue, SETTLEMENT_DUE: self.on_settlement,
                    POL_RESPONSE: self.on_response, POL_TIMEOUT: self.on_timeout}
        last = 0
        while not self.done:
            ev = self.queue.next_event()
            if ev is None or ev.tick > self.cfg["max_ticks"]:
                break
            clock.advance(ev.tick, self.consensus_accuracy)
            handlers[ev.kind](ev)
            last = ev.tick
        clock.advance(last + 1, self.consensus_accuracy)
        clock.measure(self.consensus_accuracy())
        return log


def _duplicate_set(dag: Dag) -> set[str]:
    return adv.duplicate_commits(dag)


# --------------------------------------------------------------------------- baselines


class BaselineSimulation:
    def __init__(self, world: World, kind: str):
        self.w = world
        self.kind = kind
        self.cfg = world.cfg
        self.queue = EventQueue()
        self.global_w = world.genesis_weights.copy()
        self.version = 0
        self.rng = np.random.default_rng([self.cfg["seed"], 0xB10C])
        self.budget = self.cfg["iterations"] * len(world.runners)
        self.rewards: dict[int, int] = defaultdict(int)  # miner rewards (block)
        self.updates = 0
        self.rounds = 0
        self.blocks = 0

    def sample(self) -> dict:
        return {"node_count": self.updates}

    def accuracy(self) -> float:
        return evaluate(self.w.arch, self.global_w, self.w.test)

    def _local(self, runner: Runner, start: ModelWeights) -> tuple[ModelWeights, int]:
        p, c = runner.profile, self.w.costs
        ticks = charge_time(p, "transfer", c, nbytes=2 * self.w.model_bytes)
        if runner.role == "stealing":
            # free-riding: hand back the model it was given
            return start.copy(), max(1, ticks)
        if runner.role == "lazy" and runner.local is not None:
            return runner.local.copy(), max(1, ticks)
        settings = TrainingSettings(self.w.settings.epochs, self.w.settings.lr, self.w.settings.batch_size,
                                    seed=int(runner.rng.integers(1 << 31)))
        weights = train(self.w.arch, start, settings, runner.shard)
        runner.local = weights
        ticks += charge_time(p, "train", c, epochs=settings.epochs, samples=len(runner.shard))
        return weights, max(1, ticks)

    # ---------------------------------------------------------------- synchronous (google, block)

    def _start_round(self, tick: int) -> None:
        if self.rounds >= self.cfg["iterations"]:
            return
        self.rounds += 1
        self.round_updates: list[LocalUpdate] = []
        self.round_start = tick
        self.expected = 0
        deadline = tick + self.cfg["baseline.timeout"]
        for r in self.w.runners:
            if r.rng.random() < r.profile.idle_prob:
                continue
            weights, d = self._local(r, self.global_w)
            self.expected += 1
            self.queue.schedule(LMUE, tick + d, runner=r.index, weights=weights, round=self.rounds)
        self.queue.schedule(ROUND_TIMEOUT, deadline, round=self.rounds)
        self.round_open = True

    def _close_round(self, tick: int) -> None:
        self.round_open = False
        deadline = self.round_start + self.cfg["baseline.timeout"]
        if self.kind == "block":
            block, miner = block_round(self.rounds, self.global_w, self.round_updates, deadline,
                                       self.cfg["baseline.miners"], self.cfg["baseline.difficulty"], self.rng,
                                       self.cfg["baseline.block_reward"])
            if block is not None:
                self.rewards[miner] += block.reward
                self.blocks += 1
                self.queue.schedule(GMUE, max(tick, block.mined_at), weights=block.weights, round=self.rounds)
                return
        else:
            new = sync_round(self.global_w, self.round_updates, deadline)
            if new is not None:
                self.queue.schedule(GMUE, tick, weights=new, round=self.rounds)
                return
        self.queue.schedule(GMUE, tick, weights=None, round=self.rounds)

    def on_lmue_sync(self, ev: Event) -> None:
        if not self.round_open or ev.payload["round"] != self.rounds:
            return  # late update from a closed round
        self.round_updates.append(LocalUpdate(ev.payload["runner"], ev.payload["weights"], ev.tick))
        self.updates += 1
        if len(self.round_updates) == self.expected:
            self._close_round(ev.tick)

    def on_round_timeout(self, ev: Event) -> None:
        if self.round_open and ev.payload["round"] == self.rounds:
            self._close_round(ev.tick)

    def on_gmue_sync(self, ev: Event) -> None:
        if ev.payload["weights"] is not None:
            self.global_w = ev.payload["weights"]
            self.version += 1
        self._start_round(ev.tick)

    # ---------------------------------------------------------------- asynchronous

    def on_ready_async(self, ev: Event) -> None:
        r = self.w.runners[ev.payload["runner"]]
        if self.started >= self.budget:
            return
        if r.rng.random() < r.profile.idle_prob:
            self.queue.schedule(READY, ev.tick + 1, runner=r.index)
            return
        self.started += 1
        weights, d = self._local(r, self.global_w)
        self.queue.schedule(LMUE, ev.tick + d, runner=r.index, weights=weights)

    def on_lmue_async(self, ev: Event) -> None:
        # the master merges one upload at a time, in arrival order
        self.global_w = async_update(self.global_w, ev.payload["weights"], self.cfg["baseline.async_weight"])
        self.version += 1
        self.updates += 1
        self.queue.schedule(READY, ev.tick, runner=ev.payload["runner"])

    # ---------------------------------------------------------------- driver

    def run(self) -> MetricsLog:
        log = MetricsLog(self.kind)
        clock = _Clock(log, self.cfg["metrics.eval_every"], self.sample)
        self.clock = clock
        if self.budget == 0:
            return log
        if self.kind == "async":
            self.started = 0
            for r in self.w.runners:
                self.queue.schedule(READY, 0, runner=r.index)
            handlers = {READY: self.on_ready_async, LMUE: self.on_lmue_async}
        else:
            self._start_round(0)
            handlers = {LMUE: self.on_lmue_sync, ROUND_TIMEOUT: self.on_round_timeout, GMUE: self.on_gmue_sync}
        last = 0
        while True:
            ev = self.queue.next_event()
            if ev is None or ev.tick > self.cfg["max_ticks"]:
                break
            clock.advance(ev.tick, self.accuracy)
            handlers[ev.kind](ev)
            last = ev.tick
        clock.advance(last + 1, self.accuracy)
        clock.measure(self.accuracy())
        return log


# --------------------------------------------------------------------------- experiment


def _final(samples: list[float], window: int) -> float:
    if not samples:
        return 0.0
    tail = samples[-window:]
    return float(sum(tail) / len(tail))


def _chain_conserved(engine: SettlementEngine, initial: int) -> bool:
    for node in engine.chain:
        led = node.content["ledger"]
        total = sum(led["balances"].values()) + sum(led["escrow"].values()) + led["burned"] - led["minted"]
        if total != initial:
            return False
    return True


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> RunResult:
    world = build_world(cfg)
    fw = cfg.framework
    summary: dict = {"framework": fw, "seed": cfg["seed"], "iterations": cfg["iterations"], "runners": cfg["runners"]}
    roles = {r.index: r.role for r in world.runners}
    dag_nodes = dag_edges = chain = ""
    if fw == "dag":
        sim = DagSimulation(world)
        log = sim.run()
        clock = sim.clock
        rewards = {r.index: sim.ledger.rewards.get(r.user, 0) for r in world.runners}
        balances = {r.index: sim.ledger.balance(r.user) for r in world.runners}
        penalties = {r.index: sim.ledger.penalties.get(r.user, 0) for r in world.runners}
        nodes_by_user = {r.index: len(r.nodes) for r in world.runners}
        outcomes = _pol_outcomes(sim, roles)
        invariants = {
            "ledger_conserved": sim.ledger.conserved(),
            "chain_conserved": _chain_conserved(sim.engine, sim.ledger.initial_supply),
            "timestamps_monotone": all(sim.dag[s].timestamp < n.timestamp for n in sim.dag for s in n.sources),
        }
        dag_nodes = "".join(json.dumps(n.to_json(), sort_keys=True) + "\n" for n in sim.dag)
        dag_edges = "child,parent\n" + "".join(f"{n.node_id},{s}\n" for n in sim.dag for s in n.sources)
        chain = "".join(json.dumps(s.to_json(), sort_keys=True) + "\n" for s in sim.engine.chain)
        summary.update(
            epsilon=sim.epsilon, settlements=len(sim.engine.chain), node_count=sim.model_count(),
            rejected=sim.rejected, rejections=dict(sorted(sim.rejections.items())), pol_timeouts=sim.timeouts,
            minted=sim.ledger.minted, burned=sim.ledger.burned, unrecovered=sim.ledger.unrecovered,
            balances=_keyed(balances), penalties=_keyed(penalties), nodes_by_user=_keyed(nodes_by_user),
            pol=outcomes,
            calibration=None if sim.calibration is None else {
                "sigma": sim.calibration.sigma, "epsilon": sim.calibration.epsilon,
                "honest_max": sim.calibration.honest_max, "falsified_min": sim.calibration.falsified_min},
        )
    else:
        sim = BaselineSimulation(world, fw)
        log = sim.run()
        clock = sim.clock
        rewards = {r.index: 0 for r in world.runners}
        invariants = {"ledger_conserved": True, "chain_conserved": True, "timestamps_monotone": True}
        summary.update(node_count=sim.updates, rounds=sim.rounds, blocks=sim.blocks,
                       miner_rewards=_keyed(dict(sim.rewards)))
    by_kind = defaultdict(int)
    by_profile = defaultdict(list)
    for r in world.runners:
        by_kind[r.role] += rewards[r.index]
        by_profile[r.profile.label].append(rewards[r.index])
    summary.update(
        final_accuracy=_final(clock.samples, cfg["metrics.final_window"]),
        best_accuracy=clock.best,
        accuracy_samples=len(clock.samples),
        ticks=log.rows[-1]["tick"] + 1 if log.rows else 0,
        roles=_keyed(roles),
        rewards=_keyed(rewards),
        rewards_by_kind=dict(sorted(by_kind.items())),
        rewards_by_profile={k: {"mean": sum(v) / len(v), "users": len(v)} for k, v in sorted(by_profile.items())},
        invariants=invariants,
        invariants_ok=all(invariants.values()),
    )
    result = RunResult(cfg, log, summary, dag_nodes, dag_edges, chain)
    if output_dir:
        result.files = write_outputs(result, Path(output_dir))
    return result


def _keyed(d: dict) -> dict:
    return {str(k): v for k, v in sorted(d.items())}


def _pol_outcomes(sim: DagSimulation, roles: dict[int, str]) -> dict:
    out: dict[str, dict[str, int]] = {}
    if not sim.pol:
        return out
    for ch in sim.pol.challenges.values():
        author = sim.dag[ch.target].author
        role = roles.get(author.index, "system")
        row = out.setdefault(role, {"challenged": 0, "proved": 0, "invalidated": 0, "open": 0})
        row["challenged"] += 1
        v = sim.pol.verdicts.get(ch.challenge_id)
        if v is None:
            row["open"] += 1
        elif v.proved:
            row["proved"] += 1
        else:
            row["invalidated"] += 1
    return dict(sorted(out.items()))


def write_outputs(result: RunResult, out: Path) -> dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
        "config": out / "config.ini",
    }
    files["metrics"].write_text(result.metrics.to_csv())
    files["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    files["config"].write_text(render_config(result.config))
    if result.dag_nodes:
        files["dag_nodes"] = out / "dag_nodes.jsonl"
        files["dag_edges"] = out / "dag_edges.csv"
        files["settlements"] = out / "settlements.jsonl"
        files["dag_nodes"].write_text(result.dag_nodes)
        files["dag_edges"].write_text(result.dag_edges)
        files["settlements"].write_text(result.settlements)
    return files
