import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from translog import crypto
from translog.history_tree import (
    ConsistencyProof,
    HistoryTree,
    InclusionProof,
    SignedTreeHead,
    consistency_bound,
    inclusion_bound,
    log_id,
    sign_tree_head,
    verify_consistency,
    verify_inclusion,
)

# Computed with tests/oracles.py and frozen.
ROOT_0_TO_9 = "2f03f203d1fa3a6e1388fa4cb5187c3b4f94762e578e0106815140e6a8c6bd21"
EMPTY_ROOT = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def build(entries):
    t = HistoryTree()
    for e in entries:
        t.append(e)
    return t


def test_frozen_roots():
    assert HistoryTree().root().hex() == EMPTY_ROOT
    assert build([b"%d" % i for i in range(10)]).root().hex() == ROOT_0_TO_9


def test_single_leaf():
    t = build([b"only"])
    assert t.root() == crypto.leaf_hash(b"only")
    p = t.prove_inclusion(0)
    assert p.path == ()
    assert verify_inclusion(t.root(), 1, 0, crypto.leaf_hash(b"only"), p)


def test_prefix_roots_survive_appends():
    t = build([b"%d" % i for i in range(10)])
    t.append(b"more")
    assert t.root(10).hex() == ROOT_0_TO_9


def test_out_of_range():
    t = build([b"a", b"b"])
    with pytest.raises(IndexError):
        t.prove_inclusion(2)
    with pytest.raises(IndexError):
        t.root(3)
    with pytest.raises(IndexError):
        t.prove_consistency(3, 2)


def test_inclusion_rejects_wrong_inputs():
    t = build([b"%d" % i for i in range(13)])
    leaf = crypto.leaf_hash(b"5")
    p = t.prove_inclusion(5)
    assert verify_inclusion(t.root(), 13, 5, leaf, p)
    assert not verify_inclusion(t.root(), 13, 6, leaf, p)
    assert not verify_inclusion(t.root(), 12, 5, leaf, p)
    assert not verify_inclusion(t.root(), 13, 13, leaf, p)
    assert not verify_inclusion(t.root(), 13, 5, leaf, InclusionProof(5, 13, p.path[:-1]))
    assert not verify_inclusion(t.root(), 13, 5, leaf, InclusionProof(5, 13, p.path + (leaf,)))


def test_consistency_edge_cases():
    t = build([b"%d" % i for i in range(8)])
    empty = crypto.empty_root()
    assert verify_consistency(empty, 0, t.root(), 8, t.prove_consistency(0, 8))
    assert not verify_consistency(t.root(3), 0, t.root(), 8, ConsistencyProof(0, 8, ()))
    assert verify_consistency(t.root(), 8, t.root(), 8, ConsistencyProof(8, 8, ()))
    assert not verify_consistency(t.root(), 8, t.root(7), 8, ConsistencyProof(8, 8, ()))
    assert not verify_consistency(t.root(5), 5, t.root(3), 3, ConsistencyProof(5, 3, ()))


def test_forked_history_fails_consistency():
    a = build([b"%d" % i for i in range(6)])
    b = build([b"%d" % i for i in range(3)] + [b"x", b"y", b"z", b"w"])
    proof = b.prove_consistency(6, 7)
    assert not verify_consistency(a.root(), 6, b.root(), 7, proof)


def test_proof_encoding_round_trip():
    t = build([b"%d" % i for i in range(21)])
    p = t.prove_inclusion(17)
    assert InclusionProof.decode(p.encode()) == p
    c = t.prove_consistency(5, 21)
    assert ConsistencyProof.decode(c.encode()) == c


def test_signed_tree_head():
    k = crypto.seeded_keypair("log")
    t = build([b"a", b"b", b"c"])
    sth = sign_tree_head(k, t, "test", 1234)
    assert sth.log_id == log_id("test")
    assert sth.verify(k.public)
    assert SignedTreeHead.decode(sth.encode()) == sth
    assert not sth.verify(crypto.seeded_keypair("other").public)
    forged = SignedTreeHead(sth.log_id, 2, sth.root, sth.timestamp, sth.signature)
    assert not forged.verify(k.public)


entries_st = st.lists(st.binary(max_size=8), min_size=1, max_size=40)


@given(entries_st, st.data())
def test_inclusion_matches_oracle(entries, data):
    t = build(entries)
    n = len(entries)
    assert t.root() == oracles.mth(entries)
    m = data.draw(st.integers(0, n - 1))
    p = t.prove_inclusion(m)
    assert list(p.path) == oracles.path(m, entries)
    assert verify_inclusion(oracles.mth(entries), n, m, oracles.leaf(entries[m]), p)
    assert len(p.path) <= inclusion_bound(n)


@given(entries_st, st.data())
def test_consistency_matches_oracle(entries, data):
    t = build(entries)
    n = data.draw(st.integers(1, len(entries)))
    m = data.draw(st.integers(0, n))
    p = t.prove_consistency(m, n)
    assert list(p.nodes) == oracles.consistency(m, entries[:n])
    assert verify_consistency(oracles.mth(entries[:m]), m, oracles.mth(entries[:n]), n, p)
    assert len(p.nodes) <= consistency_bound(n)


@settings(max_examples=50)
@given(entries_st, st.integers(0, 255), st.data())
def test_bit_flip_in_path_rejected(entries, bit, data):
    t = build(entries)
    n = len(entries)
    m = data.draw(st.integers(0, n - 1))
    p = t.prove_inclusion(m)
    if not p.path:
        return
    j = data.draw(st.integers(0, len(p.path) - 1))
    node = bytearray(p.path[j])
    node[bit // 8] ^= 1 << (bit % 8)
    bad = InclusionProof(m, n, p.path[:j] + (bytes(node),) + p.path[j + 1 :])
    assert not verify_inclusion(t.root(), n, m, t.leaf(m), bad)
