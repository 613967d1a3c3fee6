import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from translog import crypto
from translog.gossip_sim import (
    DEFAULT_CURVE_BASE,
    ConfigError,
    CosignRefused,
    EquivocationEvidence,
    Operator,
    SimConfig,
    Witness,
    accept_entry,
    cosign_checkpoint,
    curve_non_decreasing,
    detect_equivocation,
    detection_curve,
    run_sim,
    simulate_multi_log,
    verify_cosigned,
    wilson_interval,
)
from translog.log_backed_map import LogBackedMap, sign_str

OP = crypto.seeded_keypair("operator", 0)


def honest_map(epochs=6):
    m = LogBackedMap(OP, salt_key=bytes(32), clock=lambda: 0)
    for e in range(epochs):
        m.commit_epoch([(b"k%d" % e, b"v")])
    return m


def prover(m):
    def prove(old, new, root):
        return m.log.prove_consistency(old, new) if m.log.root(new) == root else None

    return prove


def test_identical_strs_no_evidence():
    s = honest_map().latest
    assert detect_equivocation(s, s, OP.public) is None


def test_same_epoch_different_roots_is_evidence():
    a = honest_map().latest
    b = sign_str(OP, type(a)(a.epoch, crypto.H(b"other"), a.log_root, a.log_size, a.prev_str_hash, a.timestamp))
    ev = detect_equivocation(a, b, OP.public)
    assert ev is not None and ev.kind == "same-epoch" and ev.verify(OP.public)
    assert EquivocationEvidence.decode(ev.encode()) == ev
    assert not ev.verify(crypto.seeded_keypair("x").public)


def test_unsigned_inputs_cannot_frame_operator():
    a = honest_map().latest
    forged = type(a)(a.epoch, crypto.H(b"other"), a.log_root, a.log_size, a.prev_str_hash, a.timestamp, a.signature)
    assert detect_equivocation(a, forged, OP.public) is None
    mallory = crypto.seeded_keypair("mallory")
    b = sign_str(mallory, forged)
    assert detect_equivocation(a, b, OP.public) is None


def test_different_epochs_same_history_no_evidence():
    m = honest_map()
    for i in range(6):
        for j in range(6):
            assert detect_equivocation(m.strs[i], m.strs[j], OP.public, prover(m)) is None


def test_different_epochs_forked_history_is_evidence():
    op = Operator(OP, bytes(32))
    for e in range(6):
        op.commit(e, [(b"k%d" % e, b"v")], [(b"evil", b"x")] if e == 2 else [])
    a, b = op.forks["A"].strs[4], op.forks["B"].strs[5]
    ev = detect_equivocation(a, b, OP.public, op.prove)
    assert ev is not None and ev.kind == "inconsistent" and ev.verify(OP.public)
    # Before the fork the two views agree.
    assert detect_equivocation(op.forks["A"].strs[1], op.forks["B"].strs[5], OP.public, op.prove) is None


def test_witness_rules():
    m = honest_map()
    w = Witness("w", crypto.seeded_keypair("w"))
    assert w.consider(m.strs[2], OP.public, prover(m)) is not None
    assert w.consider(m.strs[1], OP.public, prover(m)) is None  # rollback
    assert w.consider(m.strs[2], OP.public, prover(m)) is not None  # same STR again
    assert w.consider(m.strs[5], OP.public, None) is None  # no proof available
    assert w.consider(m.strs[5], OP.public, prover(m)) is not None
    off = Witness("o", crypto.seeded_keypair("o"), "offline")
    assert off.consider(m.strs[0], OP.public, prover(m)) is None


def test_cosign_threshold_and_refusal():
    m = honest_map()
    ws = [Witness(f"w{i}", crypto.seeded_keypair(f"w{i}"), mode) for i, mode in enumerate(["honest", "honest", "offline"])]
    cs = cosign_checkpoint(ws, m.strs[0], 2, OP.public, prover(m))
    pubs = [w.key.public for w in ws]
    assert verify_cosigned(cs, OP.public, pubs, 2)
    assert not verify_cosigned(cs, OP.public, pubs, 3)
    assert not verify_cosigned(cs, OP.public, pubs[2:], 1)
    with pytest.raises(CosignRefused) as exc:
        cosign_checkpoint(ws, m.strs[1], 3, OP.public, prover(m))
    assert exc.value.dissenters == ["w2"]


def test_honest_chain_cosigned_every_epoch():
    r = run_sim(SimConfig(epochs=20, p=0.5, seed=4))
    assert all(c == {"A": True} for c in r.cosigned) and not r.witness_refusals


def test_scenarios():
    honest = run_sim(SimConfig(epochs=50, p=0.7, seed=1))
    assert not honest.detected and honest.evidence_count == 0
    cross = dict(monitors=2, clients=0, partition=("A", "B"))
    r = run_sim(SimConfig(epochs=20, p=1.0, equivocate_at=10, seed=2, **cross))
    assert r.detection_epoch == 10
    for seed in range(10):
        assert not run_sim(SimConfig(epochs=20, p=0.0, equivocate_at=10, seed=seed, **cross)).detected


def test_split_witnesses_refuse_second_fork():
    r = run_sim(SimConfig(epochs=15, p=0.0, equivocate_at=5, seed=3))
    assert r.cosigned[5] == {"A": True, "B": False}
    assert (5, "B", ("w0", "w1")) in r.witness_refusals
    assert not r.both_forks_cosigned()


def test_colluding_witnesses_cosign_both_forks():
    modes = ("colluding", "colluding", "honest")
    r = run_sim(SimConfig(epochs=15, p=0.0, equivocate_at=5, witness_modes=modes, seed=3))
    assert r.both_forks_cosigned()


def test_report_replay_is_byte_identical():
    cfg = SimConfig(epochs=25, p=0.4, equivocate_at=12, seed=99)
    assert run_sim(cfg).to_text() == run_sim(cfg).to_text()
    assert run_sim(cfg).to_text() != run_sim(SimConfig(epochs=25, p=0.4, equivocate_at=12, seed=98)).to_text()


def test_config_text_round_trip_and_validation():
    cfg = SimConfig(epochs=9, p=0.25, equivocate_at=3, partition=("A", "A", "B", "B"), witness_modes=("honest", "offline", "colluding"), seed=5)
    assert SimConfig.from_text(cfg.to_text()) == cfg
    assert SimConfig.from_text("epochs=3\n# note\n\nequivocate_at=none\n").equivocate_at is None
    for bad in ("p=1.5", "epochs=0", "equivocate_at=50", "threshold=4", "partition=A", "colour=red", "p=abc", "witness_modes=x,y,z"):
        with pytest.raises(ConfigError):
            SimConfig.from_text(bad)


def test_detection_curve_endpoints():
    curve = detection_curve(DEFAULT_CURVE_BASE, [0.0, 1.0], 15, master_seed=1)
    assert curve == [(0.0, 0.0), (1.0, 1.0)]
    with pytest.raises(ConfigError):
        detection_curve(DEFAULT_CURVE_BASE, [0.5], 0)


def test_wilson_matches_oracle():
    for k, n in [(0, 10), (3, 10), (10, 10), (57, 200)]:
        lo, hi = wilson_interval(k, n)
        olo, ohi = oracles.wilson(k, n)
        assert lo == pytest.approx(max(0.0, olo)) and hi == pytest.approx(min(1.0, ohi))


def test_curve_monotonicity_check():
    assert curve_non_decreasing([(0, 0.0), (0.5, 0.5), (1, 1.0)], 100)
    assert curve_non_decreasing([(0, 0.52), (0.5, 0.48)], 100)  # within noise
    assert not curve_non_decreasing([(0, 0.9), (0.5, 0.1)], 100)


def test_two_log_policy():
    for seed in range(5):
        r = simulate_multi_log(seed)
        assert r.mismatches == 0
        assert any(n == 1 for n in r.placements) and any(n >= 2 for n in r.placements)
        assert all(ok == (n >= 2) for n, ok in zip(r.placements, r.accepted))


def test_accept_entry_ignores_untrusted_logs():
    assert not accept_entry(b"e", [], {})


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(3, 12))
def test_honest_runs_never_produce_evidence(seed, p, epochs):
    r = run_sim(SimConfig(epochs=epochs, p=p, seed=seed))
    assert r.evidence_count == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.integers(0, 9))
def test_detection_never_precedes_equivocation(seed, p, at):
    r = run_sim(SimConfig(epochs=10, p=p, equivocate_at=at, seed=seed))
    assert r.detection_epoch is None or r.detection_epoch >= at
    if r.evidence is not None:
        assert r.evidence.verify(OP.public if seed == 0 else crypto.seeded_keypair("operator", seed).public)
