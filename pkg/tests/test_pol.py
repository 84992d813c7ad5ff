import pytest

from dagfl.crypto import Keyring
from dagfl.dag import Dag, DagNode, NodeKind
from dagfl.ledger import Ledger
from dagfl.model import Architecture, TrainingSettings, aggregate, train
from dagfl.pol import (INVALIDATED, PROVED, AlreadyChallenged, Inseparable, NotAuthor, NotChallengeable,
                       PolManager, PolVerdict, SelfChallenge, calibrate_epsilon, clear_challenge, replay_distance)
from dagfl.store import ContentStore, uri_for

KR = Keyring(8, 6)
AUTHOR, CHALLENGER = KR[1], KR[2]
COMMITTEE = [KR[3].user, KR[4].user, KR[5].user]


class World:
    def __init__(self, data, arch, settings, claimed=None):
        self.dag, self.store, self.arch, self.data = Dag(), ContentStore(), arch, data
        g_w = arch.init_weights(0)
        gd = self.store.put_weights(g_w)
        self.g = self.dag.append(DagNode.create(KR[0], NodeKind.GENESIS, 0, weight_commit=gd, weight_uri=uri_for(gd)))
        start = aggregate([(g_w, 0.7)])
        w = train(arch, start, settings, data)
        d = self.store.put_weights(w)
        node = DagNode.create(AUTHOR, NodeKind.MODEL_UPDATE, 1, sources=[self.g], source_evals=[0.7],
                              weight_commit=d, weight_uri=uri_for(d), training_settings=claimed or settings)
        self.target = self.dag.append(node)
        self.ledger = Ledger.genesis(KR.users, 20)
        self.pol = PolManager(self.dag, self.store, arch, epsilon=1e-6, timeout=40)

    def challenge(self, tick=3):
        ch = self.pol.raise_challenge(CHALLENGER, self.target, 2, self.ledger, tick)
        self.pol.on_settled([ch.challenge_id], 20)
        return ch


@pytest.fixture
def world(tiny, tiny_arch, fast_settings):
    return World(tiny, tiny_arch, fast_settings)


def test_challenge_errors(world):
    with pytest.raises(NotChallengeable):
        world.pol.raise_challenge(CHALLENGER, world.g, 2, world.ledger, 3)
    with pytest.raises(SelfChallenge):
        world.pol.raise_challenge(AUTHOR, world.target, 2, world.ledger, 3)
    ch = world.challenge()
    assert world.ledger.escrow[ch.escrow_account] == 2 and world.ledger.conserved()
    with pytest.raises(AlreadyChallenged):
        world.pol.raise_challenge(KR[3], world.target, 2, world.ledger, 4)
    with pytest.raises(NotAuthor):
        world.pol.respond(KR[3], ch.challenge_id, world.data, 0.0, 0, 21)


def test_zero_noise_replay_is_exact(world):
    assert replay_distance(world.arch, world.dag, world.store, world.dag[world.target], world.data) == 0.0


def test_honest_proof_is_proved(world):
    ch = world.challenge()
    assert ch.deadline == 60
    proof = world.pol.respond(AUTHOR, ch.challenge_id, world.data, 1e-8, 5, 21)
    assert world.pol.due(40) == []  # proof not yet settled
    world.pol.on_settled([proof.proof_id], 40)
    assert world.pol.due(40) == [] and world.pol.due(41) == [ch]
    [v] = world.pol.decide(COMMITTEE, 41)
    assert v.proved and v.votes_for == 3 and all(d < 1e-6 for d in v.distances.values())


def test_falsified_settings_are_invalidated(tiny, tiny_arch, fast_settings):
    lie = TrainingSettings(fast_settings.epochs, fast_settings.lr, fast_settings.batch_size, seed=fast_settings.seed + 1)
    w = World(tiny, tiny_arch, fast_settings, claimed=lie)
    ch = w.challenge()
    w.pol.respond(AUTHOR, ch.challenge_id, tiny, 1e-8, 5, 21)
    v = w.pol.verify_proof(COMMITTEE, ch)
    assert not v.proved and v.reason == "distance"


def test_unanswered_challenge_times_out(world):
    ch = world.challenge()
    assert world.pol.due(60) == []
    assert world.pol.due(61) == [ch]
    [v] = world.pol.decide(COMMITTEE, 61)
    assert v.decision == INVALIDATED and v.reason == "timeout"


def test_late_proof_is_invalidated(world):
    ch = world.challenge()
    world.pol.respond(AUTHOR, ch.challenge_id, world.data, 0.0, 5, 61)
    assert world.pol.verify_proof(COMMITTEE, ch).reason == "late-proof"


def test_missing_dataset_is_unreachable(world):
    ch = world.challenge()
    proof = world.pol.respond(AUTHOR, ch.challenge_id, world.data, 0.0, 5, 21)
    world.store.delete(proof.dataset_commit)
    v = world.pol.verify_proof(COMMITTEE, ch)
    assert not v.proved and v.reason == "unreachable"


def test_committee_quorum_with_faulty_verifiers(world):
    ch = world.challenge()
    world.pol.respond(AUTHOR, ch.challenge_id, world.data, 0.0, 5, 21)
    world.pol.verifier_hooks[3] = lambda d: None
    assert world.pol.verify_proof(COMMITTEE, ch).proved
    world.pol.verifier_hooks[4] = lambda d: 1.0
    assert not world.pol.verify_proof(COMMITTEE, ch).proved


def test_discarded_proof_data_after_record(world):
    world.pol.discard_proofs = True
    ch = world.challenge()
    proof = world.pol.respond(AUTHOR, ch.challenge_id, world.data, 0.0, 5, 21)
    world.pol.record(world.pol.verify_proof(COMMITTEE, ch))
    assert proof.dataset_commit not in world.store


@pytest.mark.parametrize("decision,expected", [(PROVED, {"c": -5}), (INVALIDATED, {"c": 10, "a": -10})])
def test_clearing_arithmetic(decision, expected):
    from dagfl.pol import PolChallenge
    a, c = KR[1].user, KR[2].user
    led = Ledger.genesis([a, c], 100)
    ch = PolChallenge("x", "t", c, 10, 0)
    led.deposit(c, ch.escrow_account, 10)
    deltas = clear_challenge(PolVerdict("x", "t", decision, 1.0), ch, a, led, 0.5)
    # deltas are relative to the post-deposit balance
    names = {a: "a", c: "c"}
    net = {names[u]: led.balance(u) - 100 for u in (a, c) if led.balance(u) != 100}
    assert net == expected
    assert led.conserved() and ch.escrow_account not in led.escrow
    # what left escrow back into balances: half the deposit, or all of it
    assert sum(deltas.values()) == (5 if decision == PROVED else 10)


def test_invalidation_fine_never_goes_negative():
    from dagfl.pol import PolChallenge
    a, c = KR[1].user, KR[2].user
    led = Ledger.genesis([a, c], 100)
    led.transfer(a, c, 97)
    ch = PolChallenge("x", "t", c, 10, 0)
    led.deposit(c, ch.escrow_account, 10)
    clear_challenge(PolVerdict("x", "t", INVALIDATED, 1.0), ch, a, led, 0.5)
    assert led.balance(a) == 0 and led.penalties[a] == 3 and led.conserved()


def test_calibration_separates_honest_and_falsified(digits_split):
    train_set, _ = digits_split
    arch = Architecture.mlp(64, 10, (16,))
    settings = TrainingSettings(epochs=2, lr=0.05, batch_size=25)
    rep = calibrate_epsilon(arch, settings, train_set, 1e-8, trials=10, shard_size=60)
    assert rep.honest_max < rep.epsilon < rep.falsified_min
    with pytest.raises(ValueError):
        calibrate_epsilon(arch, settings, train_set, 1e-8, trials=5)


def test_calibration_inseparable_at_huge_noise(digits_split):
    train_set, _ = digits_split
    arch = Architecture.mlp(64, 10, (16,))
    with pytest.raises(Inseparable) as err:
        calibrate_epsilon(arch, TrainingSettings(epochs=2, lr=0.05, batch_size=25), train_set, 50.0,
                          trials=10, shard_size=60)
    assert err.value.report.honest_max >= err.value.report.falsified_min
