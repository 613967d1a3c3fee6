"""Role-gated release and query over the transparency log.

The service keeps four authenticated structures:

* an entry log (history tree of sanitised ``LogEntry`` encodings),
* a log-backed map binding each subject pseudonym to the list of its entry
  indices, so a subject can check that nothing was left out,
* a sum tree over keyed measurements for aggregate queries,
* a query audit log: every request, served or denied, is appended before
  the response leaves the service.
"""

from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Union

import numpy as np

from . import crypto
from .crypto import BoxKeyPair, Digest, KeyPair, leaf_hash
from .encoding import DecodeError, Reader, Writer
from .history_tree import (
    HistoryTree,
    InclusionProof,
    SignedTreeHead,
    log_id,
    sign_tree_head,
    verify_inclusion,
)
from .log_backed_map import LogBackedMap, SignedTreeRoot, client_verify_binding
from .prefix_tree import LookupProof, derive_index
from .sanitiser import (
    BudgetLedger,
    BudgetRefused,
    IntegrityError,
    LogEntry,
    SanitisePolicy,
    Visibility,
    dp_answer,
    release_payload,
    sanitise_entry,
)
from .sum_tree import (
    KINDS,
    U64_MAX,
    AggregateProof,
    EmptyTreeError,
    InputError,
    SumTree,
    verify_aggregate,
    verify_quantile,
)


class Role(str, Enum):
    PUBLIC = "public"
    SUBJECT = "subject"
    AUDITOR = "auditor"


@dataclass(frozen=True)
class Principal:
    id: str
    role: Role
    public_key: bytes
    subject_id: str | None = None

    def __post_init__(self) -> None:
        if self.role == Role.SUBJECT and not self.subject_id:
            raise ValueError("subject principals must name their subject")
        if self.role != Role.SUBJECT and self.subject_id is not None:
            raise ValueError("only subject principals carry a subject id")


QUERY_KINDS = ("aggregate", "quantile", "evidence", "raw")


@dataclass(frozen=True)
class Query:
    kind: str
    aggregate: str = ""
    lo: int = 0
    hi: int = U64_MAX
    q: str = ""
    subject: str = ""
    dp: bool = False

    def encode(self) -> bytes:
        return (
            Writer()
            .text(self.kind)
            .text(self.aggregate)
            .u64(self.lo)
            .u64(self.hi)
            .text(self.q)
            .text(self.subject)
            .u8(1 if self.dp else 0)
            .getvalue()
        )

    @classmethod
    def decode(cls, data: bytes) -> Query:
        r = Reader(data)
        out = cls(r.text(), r.text(), r.u64(), r.u64(), r.text(), r.text(), r.u8() == 1)
        r.finish()
        return out

    def validate(self) -> str | None:
        """Reason string when malformed, None otherwise."""
        if self.kind == "aggregate":
            if self.aggregate not in KINDS:
                return "unknown-aggregate"
            if self.lo > self.hi:
                return "bad-range"
        if self.kind == "quantile":
            try:
                fq = Fraction(self.q)
            except (ValueError, ZeroDivisionError):
                return "bad-quantile"
            if not 0 <= fq <= 1:
                return "bad-quantile"
        if self.kind == "evidence" and not self.subject:
            return "missing-subject"
        return None


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""
    noised: bool = False


# Rule values: allow, dp (allowed with noise), own (subject's own data only), deny.
DEFAULT_RULES: dict[tuple[str, str], str] = {
    ("public", "aggregate"): "dp",
    ("public", "quantile"): "deny",
    ("public", "evidence"): "deny",
    ("public", "raw"): "deny",
    ("subject", "aggregate"): "dp",
    ("subject", "quantile"): "deny",
    ("subject", "evidence"): "own",
    ("subject", "raw"): "deny",
    ("auditor", "aggregate"): "allow",
    ("auditor", "quantile"): "allow",
    ("auditor", "evidence"): "allow",
    ("auditor", "raw"): "allow",
}

RULE_VALUES = ("allow", "dp", "own", "deny")
DP_KINDS = ("sum", "count", "avg")


@dataclass
class AccessPolicy:
    rules: dict[tuple[str, str], str] = field(default_factory=lambda: dict(DEFAULT_RULES))

    @classmethod
    def from_text(cls, text: str) -> AccessPolicy:
        """Parse ``role.kind = rule`` lines on top of the defaults."""
        rules = dict(DEFAULT_RULES)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            lhs, sep, rhs = line.partition("=")
            role, dot, kind = lhs.strip().partition(".")
            rule = rhs.strip()
            if not sep or not dot or role not in {r.value for r in Role} or rule not in RULE_VALUES:
                raise ValueError(f"policy line {lineno}: cannot parse {line!r}")
            rules[(role, kind)] = rule
        return cls(rules)

    def to_text(self) -> str:
        return "".join(f"{r}.{k} = {v}\n" for (r, k), v in sorted(self.rules.items()))


def authorize(policy: AccessPolicy, principal: Principal, query: Query) -> Decision:
    if query.kind not in QUERY_KINDS:
        return Decision(False, "unknown-kind")
    rule = policy.rules.get((principal.role.value, query.kind), "deny")
    if rule == "deny":
        return Decision(False, f"{principal.role.value}-may-not-{query.kind}")
    if rule == "own":
        if principal.role != Role.SUBJECT or query.subject != principal.subject_id:
            return Decision(False, "not-own-subject")
        return Decision(True)
    noised = rule == "dp" or query.dp
    if noised and (query.kind != "aggregate" or query.aggregate not in DP_KINDS):
        return Decision(False, "dp-unsupported")
    return Decision(True, noised=noised)


@dataclass(frozen=True)
class QueryRecord:
    principal_id: str
    query: Query
    epoch: int
    decision: str  # "served" or "denied:<reason>"
    budget_charged: Fraction = Fraction(0)

    def encode(self) -> bytes:
        return (
            Writer()
            .raw(b"QREC")
            .text(self.principal_id)
            .blob(self.query.encode())
            .u64(self.epoch + 1)  # epoch -1 (before genesis) encodes as 0
            .text(self.decision)
            .text(str(self.budget_charged))
            .getvalue()
        )

    @classmethod
    def decode(cls, data: bytes) -> QueryRecord:
        r = Reader(data)
        if r.raw(4) != b"QREC":
            raise DecodeError("not a query record")
        out = cls(r.text(), Query.decode(r.blob()), r.u64() - 1, r.text(), Fraction(r.text()))
        r.finish()
        return out


@dataclass(frozen=True)
class SignedRequest:
    principal_id: str
    nonce: int
    query: Query
    signature: bytes = b""

    MESSAGE_TYPE = 0x01

    def body(self) -> bytes:
        return Writer().text(self.principal_id).u64(self.nonce).blob(self.query.encode()).getvalue()

    def signed_bytes(self) -> bytes:
        return bytes([self.MESSAGE_TYPE]) + self.body()

    @classmethod
    def create(cls, key: KeyPair, principal_id: str, query: Query, nonce: int = 0) -> SignedRequest:
        unsigned = cls(principal_id, nonce, query)
        return cls(principal_id, nonce, query, crypto.sign(key, unsigned.signed_bytes()))

    def verify(self, pub: bytes) -> bool:
        return crypto.verify_sig(pub, self.signed_bytes(), self.signature)

    def encode(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> SignedRequest:
        r = Reader(data)
        pid, nonce, q = r.text(), r.u64(), Query.decode(r.blob())
        sig = r.raw(crypto.SIGNATURE_SIZE)
        r.finish()
        return cls(pid, nonce, q, sig)


@dataclass(frozen=True)
class EvidenceBundle:
    entry: LogEntry
    proof: InclusionProof
    head: SignedTreeHead

    def encode(self) -> bytes:
        return Writer().blob(self.entry.encode()).blob(self.proof.encode()).blob(self.head.encode()).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> EvidenceBundle:
        r = Reader(data)
        out = cls(LogEntry.decode(r.blob()), InclusionProof.decode(r.blob()), SignedTreeHead.decode(r.blob()))
        r.finish()
        return out


@dataclass(frozen=True)
class EvidenceManifest:
    """Map binding of a subject pseudonym to its entry indices."""

    pseudonym: str
    indices: tuple[int, ...]
    signed_root: SignedTreeRoot | None
    proof: LookupProof | None


Answer = Union[int, float, tuple, None]


@dataclass(frozen=True)
class Response:
    status: str  # "served" | "denied"
    reason: str = ""
    answer: Answer = None
    proof: AggregateProof | None = None
    aggregate_head: SignedTreeHead | None = None
    evidence: tuple[EvidenceBundle, ...] = ()
    manifest: EvidenceManifest | None = None
    entries: tuple[LogEntry, ...] = ()
    record_index: int = -1
    query_head: SignedTreeHead | None = None

    @property
    def served(self) -> bool:
        return self.status == "served"


ENTRY_LOG = "entries"
QUERY_LOG = "queries"
AGGREGATE_LOG = "aggregates"


def encode_indices(indices: Iterable[int]) -> bytes:
    idx = list(indices)
    w = Writer().u32(len(idx))
    for i in idx:
        w.u64(i)
    return w.getvalue()


def decode_indices(data: bytes) -> tuple[int, ...]:
    r = Reader(data)
    out = tuple(r.u64() for _ in range(r.u32()))
    r.finish()
    return out


@dataclass(frozen=True)
class DPConfig:
    epsilon: Fraction = Fraction(1, 10)
    value_bound: int = 1000  # sensitivity of a sum: largest |value| one record contributes

    def sensitivity(self, kind: str) -> int:
        return 1 if kind == "count" else self.value_bound


class TransparencyService:
    """In-process release-and-query service.

    Budget charging and audit-log appends happen under one lock, so responses
    always reflect an audit log that already contains their own record.
    """

    def __init__(
        self,
        operator: KeyPair,
        *,
        policy: AccessPolicy | None = None,
        ledger: BudgetLedger | None = None,
        dp: DPConfig | None = None,
        pseudonym_secret: bytes | None = None,
        salt_key: bytes | None = None,
        rng_seed: int | None = None,
        clock: Callable[[], int] | None = None,
    ) -> None:
        self.operator = operator
        self.policy = policy or AccessPolicy()
        self.ledger = ledger or BudgetLedger(1)
        self.dp = dp or DPConfig()
        self._pseudonym_secret = pseudonym_secret or crypto.H(b"pseudonym" + operator.seed)
        self._clock = clock or (lambda: int(time.time()))
        self._rng = np.random.default_rng(rng_seed)
        self.principals: dict[str, Principal] = {}
        self.sanitise_policy = SanitisePolicy()
        self.entries: list[LogEntry] = []
        self.entry_log = HistoryTree()
        self._by_subject: dict[str, list[int]] = {}
        self._dirty_subjects: set[str] = set()
        self.map = LogBackedMap(operator, salt_key=salt_key, clock=self._clock)
        self.metrics: dict[int, int] = {}
        self.sum_tree = SumTree()
        self.entry_head = sign_tree_head(operator, self.entry_log, ENTRY_LOG, self._clock())
        self.aggregate_head = self._sign_aggregate_head()
        self.query_log = HistoryTree()
        self.query_records: list[QueryRecord] = []
        self.query_head = sign_tree_head(operator, self.query_log, QUERY_LOG, self._clock())
        self._lock = threading.Lock()
        self._nonces: set[tuple[str, int]] = set()

    # -- setup -------------------------------------------------------------

    def register(self, principal: Principal, box_pub: bytes | None = None) -> None:
        self.principals[principal.id] = principal
        if principal.role == Role.AUDITOR and box_pub is not None:
            self.sanitise_policy = SanitisePolicy(
                self.sanitise_policy.visibility, box_pub, self.sanitise_policy.subject_pubs
            )
        if principal.role == Role.SUBJECT and box_pub is not None:
            subs = dict(self.sanitise_policy.subject_pubs)
            subs[self.pseudonym(principal.subject_id)] = box_pub
            self.sanitise_policy = SanitisePolicy(self.sanitise_policy.visibility, self.sanitise_policy.auditor_pub, subs)

    def pseudonym(self, subject_id: str) -> str:
        return derive_index(subject_id.encode(), "private", self._pseudonym_secret).hex()

    # -- logging -----------------------------------------------------------

    def record(self, subject_id: str, payload: bytes, visibility: Visibility | str = Visibility.PUBLIC) -> int:
        """Sanitise and append one entry; returns its log index."""
        pseud = self.pseudonym(subject_id)
        pol = SanitisePolicy(Visibility(visibility), self.sanitise_policy.auditor_pub, self.sanitise_policy.subject_pubs)
        return self.append_entry(sanitise_entry(payload, pseud, pol))

    def append_entry(self, entry: LogEntry) -> int:
        """Append an already sanitised entry (its subject id is the pseudonym)."""
        pseud = entry.subject_id
        with self._lock:
            index = self.entry_log.append(entry.leaf_data())
            self.entries.append(entry)
            self._by_subject.setdefault(pseud, []).append(index)
            self._dirty_subjects.add(pseud)
        return index

    def add_measurement(self, key: int, value: int) -> None:
        with self._lock:
            self.metrics[key] = value

    def publish(self) -> SignedTreeRoot:
        """Sign new heads for every structure and commit a map epoch."""
        with self._lock:
            self.sum_tree = SumTree(self.metrics.items())
            now = self._clock()
            self.entry_head = sign_tree_head(self.operator, self.entry_log, ENTRY_LOG, now)
            self.aggregate_head = self._sign_aggregate_head(now)
            updates = [
                (p.encode(), encode_indices(self._by_subject[p])) for p in sorted(self._dirty_subjects)
            ]
            self._dirty_subjects.clear()
            return self.map.commit_epoch(updates, timestamp=now)

    def _sign_aggregate_head(self, now: int | None = None) -> SignedTreeHead:
        unsigned = SignedTreeHead(
            log_id(AGGREGATE_LOG),
            len(self.sum_tree),
            self.sum_tree.root(),
            self._clock() if now is None else now,
        )
        return SignedTreeHead(
            unsigned.log_id, unsigned.tree_size, unsigned.root, unsigned.timestamp,
            crypto.sign(self.operator, unsigned.body()),
        )

    @property
    def heads(self) -> dict[str, object]:
        return {
            "entries": self.entry_head,
            "aggregates": self.aggregate_head,
            "queries": self.query_head,
            "map": self.map.latest if self.map.strs else None,
        }

    # -- evidence ----------------------------------------------------------

    def get_individual_evidence(self, principal: Principal, subject: str | None = None) -> list[EvidenceBundle]:
        """Entries about ``principal``'s subject (or ``subject`` for auditors), with proofs."""
        if subject is None:
            if principal.role != Role.SUBJECT:
                raise PermissionError("only subject principals have their own evidence")
            subject = principal.subject_id
        pseud = self.pseudonym(subject)
        head = self.entry_head
        out = []
        for i in self._by_subject.get(pseud, ()):
            if i < head.tree_size:
                out.append(EvidenceBundle(self.entries[i], self.entry_log.prove_inclusion(i, head.tree_size), head))
        return out

    def evidence_manifest(self, subject: str) -> EvidenceManifest:
        pseud = self.pseudonym(subject)
        if not self.map.strs:
            return EvidenceManifest(pseud, (), None, None)
        key = pseud.encode()
        value = self.map.get(key)
        indices = decode_indices(value) if value is not None else ()
        return EvidenceManifest(pseud, indices, self.map.latest, self.map.prove_lookup(key))

    # -- queries -----------------------------------------------------------

    def load_query_records(self, records: Iterable[QueryRecord]) -> None:
        """Re-append previously persisted audit records (used on restart)."""
        with self._lock:
            for rec in records:
                self._append_record(rec)

    def _append_record(self, rec: QueryRecord) -> int:
        idx = self.query_log.append(rec.encode())
        self.query_records.append(rec)
        self.query_head = sign_tree_head(self.operator, self.query_log, QUERY_LOG, self._clock())
        return idx

    def _deny(self, principal_id: str, query: Query, reason: str, charged: Fraction = Fraction(0)) -> Response:
        idx = self._append_record(QueryRecord(principal_id, query, self.map.epoch, f"denied:{reason}", charged))
        return Response("denied", reason, record_index=idx, query_head=self.query_head)

    def submit_query(self, request: SignedRequest) -> Response:
        with self._lock:
            return self._submit(request)

    def _submit(self, request: SignedRequest) -> Response:
        query = request.query
        principal = self.principals.get(request.principal_id)
        if principal is None or not request.verify(principal.public_key):
            return self._deny(request.principal_id, query, "unauthenticated")
        if (principal.id, request.nonce) in self._nonces:
            return self._deny(principal.id, query, "replayed")
        self._nonces.add((principal.id, request.nonce))
        malformed = query.validate() if query.kind in QUERY_KINDS else None
        if malformed:
            return self._deny(principal.id, query, f"malformed:{malformed}")
        decision = authorize(self.policy, principal, query)
        if not decision.allowed:
            return self._deny(principal.id, query, decision.reason)
        charged = Fraction(0)
        if decision.noised:
            try:
                self.ledger.charge(principal.id, self.dp.epsilon)
            except BudgetRefused:
                return self._deny(principal.id, query, "budget-exhausted")
            charged = self.dp.epsilon
        try:
            result = self._answer(principal, query, decision)
        except (EmptyTreeError, InputError) as exc:
            return self._deny(principal.id, query, f"malformed:{exc}", charged)
        idx = self._append_record(QueryRecord(principal.id, query, self.map.epoch, "served", charged))
        return Response(
            "served",
            answer=result.get("answer"),
            proof=result.get("proof"),
            aggregate_head=result.get("aggregate_head"),
            evidence=tuple(result.get("evidence", ())),
            manifest=result.get("manifest"),
            entries=tuple(result.get("entries", ())),
            record_index=idx,
            query_head=self.query_head,
        )

    def _answer(self, principal: Principal, query: Query, decision: Decision) -> dict:
        tree = self.sum_tree
        if query.kind == "aggregate":
            answer, proof = tree.query_aggregate(query.lo, query.hi, query.aggregate)
            if not decision.noised:
                return {"answer": answer, "proof": proof, "aggregate_head": self.aggregate_head}
            eps = self.dp.epsilon
            if query.aggregate == "avg":
                s, c = answer
                half = eps / 2
                noisy = (
                    dp_answer(s, self.dp.sensitivity("sum"), half, self._rng),
                    dp_answer(c, self.dp.sensitivity("count"), half, self._rng),
                )
            else:
                noisy = dp_answer(answer, self.dp.sensitivity(query.aggregate), eps, self._rng)
            return {"answer": noisy}
        if query.kind == "quantile":
            key, value, proof = tree.quantile(Fraction(query.q))
            return {"answer": (key, value), "proof": proof, "aggregate_head": self.aggregate_head}
        if query.kind == "evidence":
            return {
                "evidence": self.get_individual_evidence(principal, query.subject),
                "manifest": self.evidence_manifest(query.subject),
            }
        # raw: every entry as logged (restricted payloads remain enveloped)
        return {"entries": list(self.entries[: self.entry_head.tree_size])}


# ---------------------------------------------------------------------------
# Third-party verification


def verify_evidence(bundle: EvidenceBundle, operator_pub: bytes) -> bool:
    if not bundle.head.verify(operator_pub):
        return False
    return verify_inclusion(
        bundle.head.root,
        bundle.head.tree_size,
        bundle.proof.leaf_index,
        leaf_hash(bundle.entry.leaf_data()),
        bundle.proof,
    )


def verify_disclosure(bundle: EvidenceBundle, operator_pub: bytes, recipient: BoxKeyPair | None = None) -> bytes:
    """Payload of a verified bundle; raises IntegrityError if anything does not check."""
    if not verify_evidence(bundle, operator_pub):
        raise IntegrityError("evidence bundle does not verify against its signed head")
    return release_payload(bundle.entry, recipient)


def verify_manifest(manifest: EvidenceManifest, operator_pub: bytes) -> bool:
    if manifest.signed_root is None or manifest.proof is None:
        return False
    value = encode_indices(manifest.indices) if manifest.indices else None
    return client_verify_binding(manifest.signed_root, manifest.pseudonym.encode(), value, manifest.proof, operator_pub)


def verify_aggregate_response(resp: Response, query: Query, operator_pub: bytes) -> bool:
    """Check an exact aggregate/quantile answer against the signed sum-tree head."""
    if resp.proof is None or resp.aggregate_head is None or not resp.aggregate_head.verify(operator_pub):
        return False
    root = resp.aggregate_head.root
    if query.kind == "quantile":
        key, value = resp.answer
        return verify_quantile(root, Fraction(query.q), key, value, resp.proof)
    return verify_aggregate(root, query.lo, query.hi, query.aggregate, resp.answer, resp.proof)


class Client:
    """Signs requests for one principal; nonces increase monotonically."""

    def __init__(self, principal_id: str, key: KeyPair, first_nonce: int = 1) -> None:
        self.principal_id = principal_id
        self.key = key
        self._nonce = itertools.count(first_nonce)

    def request(self, query: Query) -> SignedRequest:
        return SignedRequest.create(self.key, self.principal_id, query, next(self._nonce))
