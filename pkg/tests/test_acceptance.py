"""Acceptance criteria 1 to 11. Each test prints one PASS/FAIL line."""

import math
import random
import time
from fractions import Fraction

import numpy as np

import oracles
from mutations import mutate_proof
from service_fixture import build_world
from translog import crypto
from translog.gossip_sim import (
    DEFAULT_CURVE_BASE,
    SimConfig,
    curve_non_decreasing,
    detection_curve,
    run_sim,
    wilson_interval,
)
from translog.history_tree import (
    ConsistencyProof,
    HistoryTree,
    InclusionProof,
    verify_consistency,
    verify_inclusion,
)
from translog.log_backed_map import LogBackedMap, find_chain_break
from translog.release_query import Query, verify_evidence
from translog.sanitiser import BudgetLedger, BudgetRefused, dp_answer, laplace_scale
from translog.storage import LeafJournal
from translog.sum_tree import KINDS, U64_MAX, SumTree, verify_aggregate, verify_quantile


def corpus():
    rng = random.Random(20240601)
    return [[rng.randbytes(rng.randrange(1, 24)) for _ in range(rng.randint(1, 256))] for _ in range(200)]


CORPUS = corpus()


def flip(d: bytes, bit: int) -> bytes:
    b = bytearray(d)
    b[bit // 8] ^= 0x80 >> (bit % 8)
    return bytes(b)


# -- 1 -------------------------------------------------------------------------


def test_c01_merkle_oracle_equivalence(acceptance_report):
    start = time.perf_counter()
    failures, roots, incl, cons = 0, 0, 0, 0
    for entries in CORPUS:
        tree = HistoryTree()
        for e in entries:
            tree.append(e)
        for k in range(1, len(entries) + 1):
            roots += 1
            failures += tree.root(k) != oracles.mth(entries[:k])
        n, root = tree.size, tree.root()
        for i in range(n):
            incl += 1
            failures += not verify_inclusion(root, n, i, oracles.leaf(entries[i]), tree.prove_inclusion(i))
        for nn in range(1, min(n, 64) + 1):
            rn = tree.root(nn)
            for m in range(0, nn + 1):
                cons += 1
                proof = tree.prove_consistency(m, nn)
                failures += not verify_consistency(tree.root(m), m, rn, nn, proof)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    acceptance_report(
        1, ok, f"{roots} prefix roots, {incl} inclusion, {cons} consistency proofs, {failures} failures, {elapsed:.1f}s < 60s"
    )
    assert ok


# -- 2 -------------------------------------------------------------------------


def test_c02_tamper_detection(acceptance_report):
    rng = random.Random(2)
    false_accepts, mutations = 0, 0
    for entries in CORPUS:
        tree = HistoryTree()
        for e in entries:
            tree.append(e)
        n, root = tree.size, tree.root()
        for i in rng.sample(range(n), min(n, 2)):
            proof = tree.prove_inclusion(i)
            leaf = tree.leaf(i)
            assert verify_inclusion(root, n, i, leaf, proof)
            for bit in range(256):
                mutations += 2
                false_accepts += verify_inclusion(root, n, i, flip(leaf, bit), proof)
                false_accepts += verify_inclusion(flip(root, bit), n, i, leaf, proof)
            if proof.path:
                j = rng.randrange(len(proof.path))
                for bit in range(256):
                    path = list(proof.path)
                    path[j] = flip(path[j], bit)
                    mutations += 1
                    false_accepts += verify_inclusion(root, n, i, leaf, InclusionProof(i, n, tuple(path)))
        if n >= 2:
            m = rng.randrange(1, n)
            proof = tree.prove_consistency(m)
            old = tree.root(m)
            assert verify_consistency(old, m, root, n, proof)
            j = rng.randrange(len(proof.nodes))
            for bit in range(256):
                nodes = list(proof.nodes)
                nodes[j] = flip(nodes[j], bit)
                mutations += 3
                false_accepts += verify_consistency(flip(old, bit), m, root, n, proof)
                false_accepts += verify_consistency(old, m, flip(root, bit), n, proof)
                false_accepts += verify_consistency(old, m, root, n, ConsistencyProof(m, n, tuple(nodes)))
    ok = false_accepts == 0
    acceptance_report(2, ok, f"{mutations} single-bit mutations, {false_accepts} false accepts")
    assert ok


# -- 3 -------------------------------------------------------------------------


def test_c03_proof_size_bounds(acceptance_report):
    rng = random.Random(3)
    tree = HistoryTree()
    for i in range(4096):
        tree.append(i.to_bytes(4, "big"))
    worst_incl = worst_cons = 0.0
    violations, checked = 0, 0
    for n in range(1, 4097):
        lg = math.ceil(math.log2(n))
        exhaustive = n <= 256
        indices = range(n) if exhaustive else {0, n - 1, n // 2, *rng.sample(range(n), 6)}
        for i in indices:
            checked += 1
            size = len(tree.prove_inclusion(i, n).path)
            violations += size > lg + 1
            worst_incl = max(worst_incl, size - (lg + 1))
        olds = range(n + 1) if exhaustive else {0, 1, n - 1, n, n // 2, *rng.sample(range(n + 1), 6)}
        for m in olds:
            checked += 1
            size = len(tree.prove_consistency(m, n).nodes)
            violations += size > 2 * lg + 1
            worst_cons = max(worst_cons, size - (2 * lg + 1))
    ok = violations == 0
    acceptance_report(
        3, ok, f"{checked} proofs for n<=4096, {violations} over bound, max slack used incl {worst_incl:+.0f} cons {worst_cons:+.0f}"
    )
    assert ok


# -- 4 -------------------------------------------------------------------------


def test_c04_verifiable_map_agreement(acceptance_report):
    op = crypto.seeded_keypair("operator", 4)
    mismatches = chain_breaks = 0
    for run in range(50):
        rng = random.Random(run)
        salt_key = rng.randbytes(32)
        m = LogBackedMap(op, salt_key=salt_key, clock=lambda: 1_700_000_000)
        bindings: dict[bytes, bytes] = {}
        roots = []
        for _ in range(10):
            batch = [(b"key-%d" % rng.randrange(40), rng.randbytes(rng.randrange(1, 12))) for _ in range(rng.randrange(0, 8))]
            m.commit_epoch(batch)
            bindings.update(batch)
            expected = oracles.map_root(bindings, salt_key)
            roots.append(expected)
            e = m.epoch
            s = m.strs[e]
            mismatches += m.log.leaf(e) != oracles.leaf(expected)
            mismatches += s.map_root != expected or s.log_root != oracles.mth(roots) or s.log_size != e + 1
        prev = oracles.sha(b"")
        for s in m.strs:
            chain_breaks += not s.verify(op.public) or s.prev_str_hash != prev
            prev = s.hash()
        chain_breaks += find_chain_break(m.strs, op.public) is not None
    ok = mismatches == 0 and chain_breaks == 0
    acceptance_report(4, ok, f"50 runs x 10 epochs, {mismatches} root mismatches, {chain_breaks} chain breaks")
    assert ok


# -- 5 -------------------------------------------------------------------------


def test_c05_equivocation_accountability(acceptance_report):
    caught = 0
    for seed in range(100):
        at = 1 + seed % 10
        cfg = SimConfig(epochs=12, monitors=2, clients=0, p=1.0, equivocate_at=at, partition=("A", "B"), seed=seed)
        r = run_sim(cfg)
        pub = crypto.seeded_keypair("operator", seed).public
        caught += r.detection_epoch == at and r.evidence is not None and r.evidence.verify(pub)
    framed = sum(run_sim(SimConfig(epochs=12, p=random.Random(s).random(), seed=1000 + s)).evidence_count for s in range(100))
    ok = caught == 100 and framed == 0
    acceptance_report(5, ok, f"{caught}/100 equivocations caught at their epoch, {framed} evidence in 100 honest runs")
    assert ok


# -- 6 -------------------------------------------------------------------------


def test_c06_detection_curve(acceptance_report):
    start = time.perf_counter()
    trials = 200
    curve = detection_curve(DEFAULT_CURVE_BASE, [0, 0.1, 0.3, 0.5, 0.9, 1], trials, master_seed=6)
    elapsed = time.perf_counter() - start
    rates = dict(curve)
    ok = rates[0] == 0 and rates[1] == 1 and curve_non_decreasing(curve, trials) and elapsed < 300
    cis = ", ".join(f"p={p}: {r:.3f}" for p, r in curve)
    acceptance_report(6, ok, f"{cis}; {elapsed:.1f}s < 300s")
    for p, r in curve:
        lo, hi = wilson_interval(round(r * trials), trials)
        assert lo <= r <= hi
    assert ok


# -- 7 -------------------------------------------------------------------------


def test_c07_witness_cosigning(acceptance_report):
    rng = random.Random(7)
    both = 0
    for seed in range(100):
        sides = tuple(rng.choice("AB") for _ in range(3))
        cfg = SimConfig(
            epochs=10, p=rng.random(), equivocate_at=rng.randrange(10), witness_partition=sides, threshold=2, seed=seed
        )
        both += run_sim(cfg).both_forks_cosigned()
    colluded = 0
    for seed in range(10):
        modes = ("colluding", "colluding", "honest")
        cfg = SimConfig(epochs=10, p=0.0, equivocate_at=3, witness_modes=modes, threshold=2, seed=seed)
        colluded += run_sim(cfg).both_forks_cosigned()
    ok = both == 0 and colluded == 10
    acceptance_report(7, ok, f"honest 2-of-3: {both}/100 double cosigns; 2 colluders: {colluded}/10 double cosigns")
    assert ok


# -- 8 -------------------------------------------------------------------------


def test_c08_aggregate_queries(acceptance_report):
    rng = random.Random(8)
    wrong = checked = 0
    mutated = accepted_mutations = 0
    for t in range(3):
        keys = sorted(rng.sample(range(1, 1_000_000), 200))
        entries = [(k, rng.randrange(-10_000, 10_000)) for k in keys]
        tree = SumTree(entries)
        root = tree.root()
        # Every split point at a key, just inside a gap or at the extremes.
        points = sorted({0, U64_MAX, *keys[::10], *(k + 1 for k in keys[5::10]), *(k - 1 for k in keys[7::10])})
        for a in range(len(points)):
            for b in range(a, len(points)):
                lo, hi = points[a], points[b]
                for kind in KINDS:
                    checked += 1
                    ans, proof = tree.query_aggregate(lo, hi, kind)
                    wrong += ans != oracles.scan(entries, lo, hi, kind)
                    wrong += not verify_aggregate(root, lo, hi, kind, ans, proof)
        for i in range(11):
            checked += 1
            q = i / 10
            key, value, proof = tree.quantile(q)
            wrong += (key, value) != oracles.sort_quantile(entries, f"{i}/10")
            wrong += not verify_quantile(root, q, key, value, proof)
        for kind in KINDS:
            lo, hi = keys[rng.randrange(50)], keys[rng.randrange(120, 200)]
            ans, proof = tree.query_aggregate(lo, hi, kind)
            for bad in mutate_proof(proof):
                mutated += 1
                accepted_mutations += verify_aggregate(root, lo, hi, kind, ans, bad)
    ok = wrong == 0 and accepted_mutations == 0
    acceptance_report(
        8, ok, f"{checked} queries on 200-entry trees, {wrong} wrong; {mutated} mutated proofs, {accepted_mutations} accepted"
    )
    assert ok


# -- 9 -------------------------------------------------------------------------


def test_c09_dp_sanitiser(acceptance_report):
    rng = np.random.default_rng(9)
    true, sens, eps = 123.0, 1, 0.5
    xs = np.array([dp_answer(true, sens, eps, rng) for _ in range(10_000)])
    b = laplace_scale(sens, eps)
    se = math.sqrt(2) * b / math.sqrt(len(xs))
    mean_ok = abs(xs.mean() - true) < 3 * se
    var_ratio = xs.var() / (2 * b * b)
    var_ok = abs(var_ratio - 1) <= 0.1

    r = random.Random(9)
    ledger_errors = 0
    for _ in range(300):
        total = Fraction(r.randint(1, 20), r.randint(1, 10))
        led, remaining = BudgetLedger(total), total
        for _ in range(25):
            req = Fraction(r.randint(1, 10), r.randint(1, 20))
            try:
                led.charge("p", req)
                ledger_errors += remaining < req
                remaining -= req
            except BudgetRefused:
                ledger_errors += remaining >= req
    attack = {}
    for mode in ("shared", "per-principal"):
        w = build_world(n_subjects=2, seed=9, ledger=BudgetLedger(Fraction(1, 2), mode))
        while w.service.submit_query(w.public.request(Query("aggregate", "count"))).served:
            pass
        victim = next(iter(w.subjects.values()))
        attack[mode] = not w.service.submit_query(victim.request(Query("aggregate", "count"))).served
    attack_ok = attack["shared"] and not attack["per-principal"]
    ok = mean_ok and var_ok and ledger_errors == 0 and attack_ok
    acceptance_report(
        9,
        ok,
        f"mean err {abs(xs.mean() - true) / se:.2f} SE, var ratio {var_ratio:.3f}, "
        f"{ledger_errors} ledger errors, attack shared={attack['shared']} per-principal={attack['per-principal']}",
    )
    assert ok


# -- 10 ------------------------------------------------------------------------


def test_c10_access_control(acceptance_report):
    w = build_world(n_subjects=20, seed=10)
    svc = w.service
    pub = w.operator.public
    problems = requests = 0

    def submit(client, query):
        nonlocal problems, requests
        before = svc.query_log.size
        resp = svc.submit_query(client.request(query))
        requests += 1
        problems += svc.query_log.size != before + 1
        return resp

    for sid, client in w.subjects.items():
        resp = submit(client, Query("evidence", subject=sid))
        got = [bundle.proof.leaf_index for bundle in resp.evidence]
        problems += not resp.served or got != w.truth[sid]
        problems += not all(b.entry.subject_id == resp.manifest.pseudonym for b in resp.evidence)
        problems += not all(verify_evidence(b, pub) for b in resp.evidence)
        for other in w.subjects:
            if other != sid:
                resp = submit(client, Query("evidence", subject=other))
                problems += resp.served or bool(resp.evidence)
        resp = submit(client, Query("raw"))
        problems += resp.served or bool(resp.entries)
    privileged = [Query("raw"), Query("quantile", q="1/2"), Query("aggregate", "min"), Query("aggregate", "max")]
    privileged += [Query("evidence", subject=s) for s in w.subjects]
    for q in privileged:
        resp = submit(w.public, q)
        problems += resp.served or bool(resp.evidence) or bool(resp.entries) or resp.proof is not None
    head = svc.query_head
    problems += head.tree_size != svc.query_log.size or not head.verify(pub)
    ok = problems == 0
    acceptance_report(10, ok, f"20 subjects, {requests} requests, each logged; {problems} problems")
    assert ok


# -- 11 ------------------------------------------------------------------------


def test_c11_storage_crash_consistency(acceptance_report, tmp_path):
    rng = random.Random(11)
    bad = 0
    for trial in range(100):
        path = tmp_path / f"j{trial}"
        records = [rng.randbytes(rng.randrange(0, 80)) for _ in range(rng.randrange(1, 40))]
        with LeafJournal(path) as j:
            for rec in records:
                j.append(rec)
        size = path.stat().st_size
        with LeafJournal(path) as j:
            # Simulate a crash part-way through writing one more record.
            j.append(rng.randbytes(rng.randrange(1, 80)))
        full = path.read_bytes()
        cut = rng.randrange(size, len(full))
        path.write_bytes(full[:cut])
        with LeafJournal(path) as j:
            bad += len(j) != len(records) or j.verify_all() != []
            bad += list(j) != records
            bad += path.stat().st_size != size
    ok = bad == 0
    acceptance_report(11, ok, f"100 torn writes, {bad} recoveries with bad records or wrong length")
    assert ok
