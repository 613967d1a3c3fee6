"""Verifiable log-backed map: a prefix tree committed epoch by epoch to a history tree.

At every epoch the operator applies a batch of updates to the map, appends
``leaf_hash(map_root)`` to the log, and publishes a signed tree root (STR)
that chains to its predecessor by hash.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import crypto
from .crypto import Digest, KeyPair, leaf_hash
from .encoding import Reader, Writer
from .history_tree import (
    ConsistencyProof,
    HistoryTree,
    InclusionProof,
    verify_consistency,
    verify_inclusion,
)
from .prefix_tree import LookupProof, PrefixTree, verify_lookup

GENESIS_PREV = crypto.H(b"")

Update = tuple[bytes, bytes]


@dataclass(frozen=True)
class SignedTreeRoot:
    epoch: int
    map_root: Digest
    log_root: Digest
    log_size: int
    prev_str_hash: Digest
    timestamp: int
    signature: bytes = b""

    def body(self) -> bytes:
        return (
            Writer()
            .u64(self.epoch)
            .digest(self.map_root)
            .digest(self.log_root)
            .u64(self.log_size)
            .digest(self.prev_str_hash)
            .u64(self.timestamp)
            .getvalue()
        )

    def encode(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> SignedTreeRoot:
        r = Reader(data)
        out = cls(r.u64(), r.digest(), r.digest(), r.u64(), r.digest(), r.u64(), r.raw(crypto.SIGNATURE_SIZE))
        r.finish()
        return out

    def hash(self) -> Digest:
        return crypto.H(self.encode())

    def verify(self, operator_pub: bytes) -> bool:
        return crypto.verify_sig(operator_pub, self.body(), self.signature)


STR_SIZE = 120 + crypto.SIGNATURE_SIZE


def encode_str_list(strs: Sequence[SignedTreeRoot]) -> bytes:
    w = Writer().u32(len(strs))
    for s in strs:
        w.raw(s.encode())
    return w.getvalue()


def decode_str_list(data: bytes) -> list[SignedTreeRoot]:
    r = Reader(data)
    n = r.u32()
    out = [SignedTreeRoot.decode(r.raw(STR_SIZE)) for _ in range(n)]
    r.finish()
    return out


def sign_str(key: KeyPair, unsigned: SignedTreeRoot) -> SignedTreeRoot:
    sig = crypto.sign(key, unsigned.body())
    return SignedTreeRoot(
        unsigned.epoch,
        unsigned.map_root,
        unsigned.log_root,
        unsigned.log_size,
        unsigned.prev_str_hash,
        unsigned.timestamp,
        sig,
    )


class LogBackedMap:
    """Operator-side epoch state.

    Keeps every map version (they share structure) so lookups can be proven
    against any published epoch.
    """

    def __init__(
        self,
        operator: KeyPair,
        *,
        index_mode: str = "plain",
        index_secret: bytes | None = None,
        salt_key: bytes | None = None,
        clock: Callable[[], int] | None = None,
    ) -> None:
        self.operator = operator
        self._empty = PrefixTree(index_mode=index_mode, index_secret=index_secret, salt_key=salt_key)
        self.versions: list[PrefixTree] = []
        self.updates: list[list[Update]] = []
        self.log = HistoryTree()
        self.strs: list[SignedTreeRoot] = []
        self.pending: list[Update] = []
        self._clock = clock or (lambda: int(time.time()))
        self._lock = threading.Lock()

    @property
    def map(self) -> PrefixTree:
        return self.versions[-1] if self.versions else self._empty

    @property
    def epoch(self) -> int:
        """Epoch of the latest STR, -1 before genesis."""
        return len(self.strs) - 1

    @property
    def latest(self) -> SignedTreeRoot:
        return self.strs[-1]

    @property
    def salt_key(self) -> bytes:
        return self._empty.salt_key

    @property
    def index_mode(self) -> str:
        return self._empty.index_mode

    @property
    def index_secret(self) -> bytes | None:
        return self._empty.index_secret

    def stage(self, key: bytes, value: bytes) -> None:
        self.pending.append((key, value))

    def commit_epoch(
        self, updates: Iterable[Update] | None = None, timestamp: int | None = None
    ) -> SignedTreeRoot:
        with self._lock:
            if updates is None:
                batch, self.pending = list(self.pending), []
            else:
                batch = list(updates)
            tree = self.map.put_many(batch)
            epoch = len(self.strs)
            self.log.append(tree.root())
            prev = self.strs[-1].hash() if self.strs else GENESIS_PREV
            unsigned = SignedTreeRoot(
                epoch=epoch,
                map_root=tree.root(),
                log_root=self.log.root(),
                log_size=self.log.size,
                prev_str_hash=prev,
                timestamp=self._clock() if timestamp is None else timestamp,
            )
            sth = sign_str(self.operator, unsigned)
            self.versions.append(tree)
            self.updates.append(batch)
            self.strs.append(sth)
            return sth

    def _check_epoch(self, epoch: int) -> None:
        if not 0 <= epoch < len(self.strs):
            raise IndexError(f"epoch {epoch} not published (latest {self.epoch})")

    def prove_lookup(self, key: bytes, epoch: int | None = None) -> LookupProof:
        epoch = self.epoch if epoch is None else epoch
        self._check_epoch(epoch)
        return self.versions[epoch].prove_lookup(key)

    def get(self, key: bytes, epoch: int | None = None) -> bytes | None:
        epoch = self.epoch if epoch is None else epoch
        self._check_epoch(epoch)
        return self.versions[epoch].get(key)

    def prove_map_root(self, epoch: int, at_epoch: int | None = None) -> InclusionProof:
        """Inclusion of epoch ``epoch``'s map root in the log as of ``at_epoch``."""
        at_epoch = self.epoch if at_epoch is None else at_epoch
        self._check_epoch(at_epoch)
        return self.log.prove_inclusion(epoch, self.strs[at_epoch].log_size)

    def prove_log_consistency(self, old_epoch: int, new_epoch: int | None = None) -> ConsistencyProof:
        new_epoch = self.epoch if new_epoch is None else new_epoch
        self._check_epoch(old_epoch)
        self._check_epoch(new_epoch)
        return self.log.prove_consistency(self.strs[old_epoch].log_size, self.strs[new_epoch].log_size)

    def prove_log_sizes(self, old_size: int, new_size: int) -> ConsistencyProof:
        return self.log.prove_consistency(old_size, new_size)

    def audit_bundle(self, old_epoch: int, new_epoch: int | None = None) -> tuple[ConsistencyProof, InclusionProof]:
        new_epoch = self.epoch if new_epoch is None else new_epoch
        return (
            self.prove_log_consistency(old_epoch, new_epoch),
            self.prove_map_root(new_epoch, new_epoch),
        )


# ---------------------------------------------------------------------------
# Verification (pure functions usable by any third party)


def find_chain_break(strs: Sequence[SignedTreeRoot], operator_pub: bytes) -> int | None:
    """Position of the first STR that breaks the chain, or None if it holds.

    A chain that starts at epoch 0 must start from the genesis sentinel.
    """
    for k, s in enumerate(strs):
        if not s.verify(operator_pub):
            return k
        if s.log_size != s.epoch + 1:
            return k
        if k == 0:
            if s.epoch == 0 and s.prev_str_hash != GENESIS_PREV:
                return k
            continue
        prev = strs[k - 1]
        if s.epoch != prev.epoch + 1 or s.prev_str_hash != prev.hash():
            return k
    return None


def verify_str_chain(strs: Sequence[SignedTreeRoot], operator_pub: bytes) -> bool:
    return bool(strs) and find_chain_break(strs, operator_pub) is None


def audit_epoch(
    str_old: SignedTreeRoot,
    str_new: SignedTreeRoot,
    log_consistency: ConsistencyProof,
    map_root_inclusion: InclusionProof,
    operator_pub: bytes | None = None,
) -> bool:
    """Check that the log grew append-only and commits the new map root at its epoch."""
    if str_old.epoch > str_new.epoch:
        return False
    if operator_pub is not None and not (str_old.verify(operator_pub) and str_new.verify(operator_pub)):
        return False
    if not verify_consistency(
        str_old.log_root, str_old.log_size, str_new.log_root, str_new.log_size, log_consistency
    ):
        return False
    return verify_inclusion(
        str_new.log_root,
        str_new.log_size,
        str_new.epoch,
        leaf_hash(str_new.map_root),
        map_root_inclusion,
    )


def client_verify_binding(
    sth: SignedTreeRoot,
    key: bytes,
    value: bytes | None,
    lookup_proof: LookupProof,
    operator_pub: bytes,
    *,
    mode: str = "plain",
    secret: bytes | None = None,
) -> bool:
    if not sth.verify(operator_pub):
        return False
    return verify_lookup(sth.map_root, key, value, lookup_proof, mode=mode, secret=secret)


@dataclass(frozen=True)
class UpdateAuthorization:
    """Key owner's signed statement that ``key`` may take ``value`` at ``epoch``."""

    key: bytes
    value: bytes
    epoch: int
    signature: bytes = b""

    def body(self) -> bytes:
        return Writer().raw(b"AUTH").blob(self.key).blob(self.value).u64(self.epoch).getvalue()

    @classmethod
    def create(cls, owner: KeyPair, key: bytes, value: bytes, epoch: int) -> UpdateAuthorization:
        unsigned = cls(key, value, epoch)
        return cls(key, value, epoch, crypto.sign(owner, unsigned.body()))

    def verify(self, owner_pub: bytes) -> bool:
        return crypto.verify_sig(owner_pub, self.body(), self.signature)


@dataclass(frozen=True)
class Alert:
    epoch: int
    kind: str  # "chain" | "binding"
    detail: str
    signed_root: SignedTreeRoot | None = None
    proof: LookupProof | None = None
    extra: dict = field(default_factory=dict, compare=False)


def monitor_check_key(
    str_history: Sequence[SignedTreeRoot],
    key: bytes,
    expected_value: bytes | None,
    proofs_per_epoch: Sequence[LookupProof],
    operator_pub: bytes,
    *,
    authorizations: Iterable[UpdateAuthorization] = (),
    owner_pub: bytes | None = None,
    mode: str = "plain",
    secret: bytes | None = None,
) -> list[Alert]:
    """Watch one binding across epochs.

    ``expected_value`` is the binding before the first STR's epoch is applied;
    owner-signed authorizations move the expectation forward at their epoch.
    Every epoch whose proof does not support the expected binding yields an
    alert carrying the signed STR and the offending proof.
    """
    brk = find_chain_break(str_history, operator_pub) if str_history else None
    if brk is not None:
        bad = str_history[brk]
        return [Alert(bad.epoch, "chain", f"STR chain broken at position {brk}", bad)]
    allowed: dict[int, bytes] = {}
    for auth in authorizations:
        if auth.key == key and owner_pub is not None and auth.verify(owner_pub):
            allowed[auth.epoch] = auth.value
    alerts: list[Alert] = []
    expected = expected_value
    for sth, proof in zip(str_history, proofs_per_epoch, strict=True):
        if sth.epoch in allowed:
            expected = allowed[sth.epoch]
        if not verify_lookup(sth.map_root, key, expected, proof, mode=mode, secret=secret):
            alerts.append(
                Alert(sth.epoch, "binding", "binding differs from the expected value", sth, proof)
            )
    return alerts
