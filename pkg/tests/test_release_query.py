from fractions import Fraction

import pytest

import oracles
from service_fixture import build_world
from translog import crypto
from translog.release_query import (
    AccessPolicy,
    Principal,
    Query,
    QueryRecord,
    Role,
    SignedRequest,
    authorize,
    verify_aggregate_response,
    verify_disclosure,
    verify_evidence,
    verify_manifest,
)
from translog.sanitiser import BudgetLedger, IntegrityError, Visibility


@pytest.fixture(scope="module")
def world():
    return build_world(n_subjects=6, seed=3)


def test_auditor_exact_aggregates_verify(world):
    entries = list(world.metrics.items())
    for kind in ("sum", "count", "avg", "min", "max"):
        q = Query("aggregate", kind, 10_000, 70_000)
        resp = world.service.submit_query(world.auditor.request(q))
        assert resp.served
        assert resp.answer == oracles.scan(entries, 10_000, 70_000, kind)
        assert verify_aggregate_response(resp, q, world.operator.public)


def test_auditor_quantile(world):
    q = Query("quantile", q="1/2")
    resp = world.service.submit_query(world.auditor.request(q))
    assert resp.answer == oracles.sort_quantile(list(world.metrics.items()), "1/2")
    assert verify_aggregate_response(resp, q, world.operator.public)


def test_public_gets_noise_only(world):
    q = Query("aggregate", "sum")
    resp = world.service.submit_query(world.public.request(q))
    assert resp.served and isinstance(resp.answer, float) and resp.proof is None
    for kind in ("min", "max"):
        resp = world.service.submit_query(world.public.request(Query("aggregate", kind)))
        assert resp.reason == "dp-unsupported"
    resp = world.service.submit_query(world.public.request(Query("quantile", q="1/2")))
    assert resp.reason == "public-may-not-quantile"


def test_subject_evidence_complete_and_verifiable(world):
    for sid, client in world.subjects.items():
        resp = world.service.submit_query(client.request(Query("evidence", subject=sid)))
        assert resp.served
        assert [b.proof.leaf_index for b in resp.evidence] == world.truth[sid]
        assert list(resp.manifest.indices) == world.truth[sid]
        assert verify_manifest(resp.manifest, world.operator.public)
        for b in resp.evidence:
            assert verify_evidence(b, world.operator.public)
            recipient = world.subject_boxes[sid] if b.entry.visibility == Visibility.SUBJECT_ONLY else None
            if b.entry.visibility == Visibility.AUDITOR_ONLY:
                continue
            assert verify_disclosure(b, world.operator.public, recipient) == world.payloads[b.proof.leaf_index]


def test_tampered_evidence_rejected(world):
    sid = next(s for s, idx in world.truth.items() if idx)
    bundles = world.service.get_individual_evidence(world.service.principals[f"p-{sid}"])
    b = bundles[0]
    other = world.service.entries[(b.proof.leaf_index + 1) % len(world.service.entries)]
    forged = type(b)(other, b.proof, b.head)
    assert not verify_evidence(forged, world.operator.public)
    with pytest.raises(IntegrityError):
        verify_disclosure(forged, world.operator.public)


def test_cross_subject_and_public_evidence_denied(world):
    sids = list(world.subjects)
    resp = world.service.submit_query(world.subjects[sids[0]].request(Query("evidence", subject=sids[1])))
    assert resp.status == "denied" and resp.reason == "not-own-subject" and not resp.evidence
    resp = world.service.submit_query(world.public.request(Query("evidence", subject=sids[1])))
    assert resp.reason == "public-may-not-evidence"
    resp = world.service.submit_query(world.subjects[sids[0]].request(Query("raw")))
    assert resp.reason == "subject-may-not-raw" and not resp.entries


def test_auditor_raw_access(world):
    resp = world.service.submit_query(world.auditor.request(Query("raw")))
    assert resp.served and len(resp.entries) == len(world.service.entries)


def test_authentication_and_replay(world):
    svc = world.service
    req = world.auditor.request(Query("aggregate", "count"))
    assert svc.submit_query(req).served
    assert svc.submit_query(req).reason == "replayed"
    imposter = SignedRequest.create(crypto.seeded_keypair("mallory"), "auditor", Query("raw"), 999_999)
    assert svc.submit_query(imposter).reason == "unauthenticated"
    unknown = SignedRequest.create(crypto.seeded_keypair("mallory"), "mallory", Query("raw"), 1)
    assert svc.submit_query(unknown).reason == "unauthenticated"


def test_malformed_queries(world):
    svc = world.service
    bad = [
        (Query("aggregate", "median"), "malformed:unknown-aggregate"),
        (Query("aggregate", "sum", 5, 4), "malformed:bad-range"),
        (Query("quantile", q="2"), "malformed:bad-quantile"),
        (Query("quantile", q="abc"), "malformed:bad-quantile"),
        (Query("evidence"), "malformed:missing-subject"),
        (Query("delete"), "unknown-kind"),
    ]
    for q, reason in bad:
        assert svc.submit_query(world.auditor.request(q)).reason == reason


def test_every_request_logged(world):
    svc = world.service
    before = svc.query_log.size
    svc.submit_query(world.public.request(Query("raw")))
    svc.submit_query(world.auditor.request(Query("aggregate", "sum")))
    assert svc.query_log.size == before + 2
    recs = [QueryRecord.decode(r.encode()) for r in svc.query_records[-2:]]
    assert [r.decision for r in recs] == ["denied:public-may-not-raw", "served"]
    assert svc.query_head.tree_size == svc.query_log.size
    assert svc.query_head.verify(world.operator.public)


def test_budget_exhaustion_per_principal_vs_shared():
    for mode, victim_served in (("per-principal", True), ("shared", False)):
        w = build_world(n_subjects=2, seed=5, ledger=BudgetLedger(Fraction(1, 2), mode))
        attacker = w.public
        for _ in range(5):
            assert w.service.submit_query(attacker.request(Query("aggregate", "count"))).served
        assert w.service.submit_query(attacker.request(Query("aggregate", "count"))).reason == "budget-exhausted"
        victim = next(iter(w.subjects.values()))
        resp = w.service.submit_query(victim.request(Query("aggregate", "count")))
        assert resp.served is victim_served


def test_policy_text_round_trip_and_override():
    pol = AccessPolicy.from_text("public.quantile = allow\n# comment\n")
    assert AccessPolicy.from_text(pol.to_text()).rules == pol.rules
    p = Principal("x", Role.PUBLIC, bytes(32))
    assert authorize(pol, p, Query("quantile", q="1/2")).allowed
    with pytest.raises(ValueError):
        AccessPolicy.from_text("public.raw allow")
    with pytest.raises(ValueError):
        AccessPolicy.from_text("king.raw = allow")


def test_principal_validation():
    with pytest.raises(ValueError):
        Principal("s", Role.SUBJECT, bytes(32))
    with pytest.raises(ValueError):
        Principal("a", Role.AUDITOR, bytes(32), "s1")


def test_query_and_request_encoding():
    q = Query("aggregate", "avg", 3, 9, "", "", True)
    assert Query.decode(q.encode()) == q
    k = crypto.seeded_keypair("c")
    r = SignedRequest.create(k, "c", q, 7)
    assert SignedRequest.decode(r.encode()) == r and r.verify(k.public)
