"""Append-only Merkle history tree with inclusion and consistency proofs.

Shape rule: a tree over ``n > 1`` leaves splits into a left subtree over the
largest power of two strictly below ``n`` and a right subtree over the rest.
Proof generation and verification follow the RFC 6962/9162 algorithms for
that shape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

from . import crypto
from .crypto import Digest, empty_root, leaf_hash, node_hash
from .encoding import Reader, Writer


def _split(n: int) -> int:
    """Largest power of two strictly less than ``n`` (``n >= 2``)."""
    return 1 << ((n - 1).bit_length() - 1)


def _ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    tree_size: int
    path: tuple[Digest, ...]

    def encode(self) -> bytes:
        w = Writer().u64(self.leaf_index).u64(self.tree_size).u16(len(self.path))
        for d in self.path:
            w.digest(d)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> InclusionProof:
        r = Reader(data)
        index, size, count = r.u64(), r.u64(), r.u16()
        path = tuple(r.digest() for _ in range(count))
        r.finish()
        return cls(index, size, path)


@dataclass(frozen=True)
class ConsistencyProof:
    old_size: int
    new_size: int
    nodes: tuple[Digest, ...]

    def encode(self) -> bytes:
        w = Writer().u64(self.old_size).u64(self.new_size).u16(len(self.nodes))
        for d in self.nodes:
            w.digest(d)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> ConsistencyProof:
        r = Reader(data)
        old, new, count = r.u64(), r.u64(), r.u16()
        nodes = tuple(r.digest() for _ in range(count))
        r.finish()
        return cls(old, new, nodes)


class HistoryTree:
    """Left-to-right growing Merkle tree storing leaf digests.

    Complete, aligned subtrees are cached under ``(level, index)`` as soon as
    their last leaf arrives; because the tree is append-only those entries
    never change.
    """

    def __init__(self, leaves: list[Digest] | None = None) -> None:
        self._nodes: dict[tuple[int, int], Digest] = {}
        self._size = 0
        self._lock = threading.Lock()
        for d in leaves or ():
            self.append_digest(d)

    def __len__(self) -> int:
        return self._size

    @property
    def size(self) -> int:
        return self._size

    def append(self, leaf_data: bytes) -> int:
        return self.append_digest(leaf_hash(leaf_data))

    def append_digest(self, digest: Digest) -> int:
        if len(digest) != 32:
            raise ValueError("leaf digest must be 32 bytes")
        with self._lock:
            index = self._size
            self._nodes[(0, index)] = digest
            level, i, h = 0, index, digest
            while i & 1:
                h = node_hash(self._nodes[(level, i - 1)], h)
                level += 1
                i >>= 1
                self._nodes[(level, i)] = h
            self._size += 1
            return index

    def leaf(self, index: int) -> Digest:
        if not 0 <= index < self._size:
            raise IndexError(f"leaf index {index} out of range [0, {self._size})")
        return self._nodes[(0, index)]

    def leaves(self, size: int | None = None) -> list[Digest]:
        size = self._size if size is None else size
        return [self._nodes[(0, i)] for i in range(size)]

    def _subtree(self, start: int, n: int) -> Digest:
        """Hash of the ``n`` leaves starting at ``start`` (always an aligned split)."""
        if n & (n - 1) == 0:
            level = n.bit_length() - 1
            return self._nodes[(level, start >> level)]
        k = _split(n)
        return node_hash(self._subtree(start, k), self._subtree(start + k, n - k))

    def _check_size(self, size: int) -> None:
        if not 0 <= size <= self._size:
            raise IndexError(f"size {size} out of range [0, {self._size}]")

    def root(self, size: int | None = None) -> Digest:
        size = self._size if size is None else size
        self._check_size(size)
        if size == 0:
            return empty_root()
        return self._subtree(0, size)

    def prove_inclusion(self, index: int, size: int | None = None) -> InclusionProof:
        size = self._size if size is None else size
        self._check_size(size)
        if not 0 <= index < size:
            raise IndexError(f"leaf index {index} out of range for size {size}")
        path: list[Digest] = []
        start, n, m = 0, size, index
        # Walk top-down, collecting siblings; reversed at the end (bottom-up order).
        while n > 1:
            k = _split(n)
            if m < k:
                path.append(self._subtree(start + k, n - k))
                n = k
            else:
                path.append(self._subtree(start, k))
                start += k
                m -= k
                n -= k
        return InclusionProof(index, size, tuple(reversed(path)))

    def prove_consistency(self, old_size: int, new_size: int | None = None) -> ConsistencyProof:
        new_size = self._size if new_size is None else new_size
        self._check_size(new_size)
        if not 0 <= old_size <= new_size:
            raise IndexError(f"old size {old_size} out of range for new size {new_size}")
        if old_size == 0 or old_size == new_size:
            return ConsistencyProof(old_size, new_size, ())
        nodes: list[Digest] = []
        start, n, m, complete = 0, new_size, old_size, True
        while m != n:
            k = _split(n)
            if m <= k:
                nodes.append(self._subtree(start + k, n - k))
                n = k
            else:
                nodes.append(self._subtree(start, k))
                start += k
                m -= k
                n -= k
                complete = False
        if not complete:
            nodes.append(self._subtree(start, m))
        return ConsistencyProof(old_size, new_size, tuple(reversed(nodes)))

    def snapshot(self, size: int | None = None) -> HistoryTree:
        """Independent copy of the first ``size`` leaves."""
        return HistoryTree(self.leaves(size))


def root_from_inclusion(size: int, index: int, leaf: Digest, path: tuple[Digest, ...]) -> Digest | None:
    """Recompute the root along ``path``; None when the path shape is wrong."""
    if not 0 <= index < size:
        return None
    fn, sn, r = index, size - 1, leaf
    for p in path:
        if sn == 0:
            return None
        if fn & 1 or fn == sn:
            r = node_hash(p, r)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            r = node_hash(r, p)
        fn >>= 1
        sn >>= 1
    if sn != 0:
        return None
    return r


def verify_inclusion(
    root: Digest, size: int, index: int, leaf_digest: Digest, proof: InclusionProof
) -> bool:
    if proof.leaf_index != index or proof.tree_size != size:
        return False
    got = root_from_inclusion(size, index, leaf_digest, proof.path)
    return got is not None and got == root


def verify_consistency(
    root_old: Digest, old_size: int, root_new: Digest, new_size: int, proof: ConsistencyProof
) -> bool:
    if proof.old_size != old_size or proof.new_size != new_size:
        return False
    if not 0 <= old_size <= new_size:
        return False
    nodes = list(proof.nodes)
    if old_size == new_size:
        return not nodes and root_old == root_new
    if old_size == 0:
        # Everything extends the empty log; only the old root is checkable.
        return not nodes and root_old == empty_root()
    if old_size & (old_size - 1) == 0:
        nodes.insert(0, root_old)
    if not nodes:
        return False
    fn, sn = old_size - 1, new_size - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = nodes[0]
    for c in nodes[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = node_hash(c, fr)
            sr = node_hash(c, sr)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = node_hash(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == root_old and sr == root_new


def inclusion_bound(size: int) -> int:
    return _ceil_log2(size) + 1


def consistency_bound(size: int) -> int:
    return 2 * _ceil_log2(size) + 1


# ---------------------------------------------------------------------------
# Signed tree heads for plain logs (entry log, query audit log)


@dataclass(frozen=True)
class SignedTreeHead:
    log_id: Digest
    tree_size: int
    root: Digest
    timestamp: int
    signature: bytes = b""

    def body(self) -> bytes:
        return (
            Writer()
            .raw(b"STH1")
            .digest(self.log_id)
            .u64(self.tree_size)
            .digest(self.root)
            .u64(self.timestamp)
            .getvalue()
        )

    def encode(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def decode(cls, data: bytes) -> SignedTreeHead:
        r = Reader(data)
        if r.raw(4) != b"STH1":
            raise ValueError("not a signed tree head")
        sth = cls(r.digest(), r.u64(), r.digest(), r.u64(), r.raw(crypto.SIGNATURE_SIZE))
        r.finish()
        return sth

    def verify(self, pub: bytes) -> bool:
        return crypto.verify_sig(pub, self.body(), self.signature)


def log_id(name: str) -> Digest:
    return crypto.H(b"translog-log\x00" + name.encode())


def sign_tree_head(
    key: crypto.KeyPair, tree: HistoryTree, name: str, timestamp: int, size: int | None = None
) -> SignedTreeHead:
    size = tree.size if size is None else size
    unsigned = SignedTreeHead(log_id(name), size, tree.root(size), timestamp)
    return SignedTreeHead(
        unsigned.log_id, size, unsigned.root, timestamp, crypto.sign(key, unsigned.body())
    )
