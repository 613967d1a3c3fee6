"""Merkle prefix tree (verifiable map) over 256-bit indices.

The tree is a compressed binary trie: a subtree holding one binding is a leaf
at the shallowest depth that separates it from every other binding, and a
subtree holding none is an empty node whose hash binds its depth and path
prefix. The resulting shape depends only on the set of bindings, so roots are
insertion-order independent. Versions are immutable; ``put`` returns a new
tree sharing unchanged subtrees.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator

from .crypto import (
    EMPTY_TAG,
    MAP_LEAF_TAG,
    Digest,
    H,
    commitment,
    keyed_hash,
    node_hash,
)
from .encoding import Reader, Writer

INDEX_BITS = 256


class ConfigurationError(Exception):
    pass


def derive_index(key: bytes, mode: str = "plain", secret: bytes | None = None) -> Digest:
    """Map ``key`` to its 256-bit position.

    ``plain`` hashes the key; ``private`` uses a keyed hash so that indices do
    not reveal which keys are present. The keyed hash is a stand-in for a VRF
    and, unlike one, cannot be checked by parties without the secret.
    """
    if mode == "plain":
        return H(key)
    if mode == "private":
        if secret is None or len(secret) != 32:
            raise ConfigurationError("private index mode needs a 32-byte secret")
        return keyed_hash(secret, b"translog-index\x00" + key)
    raise ConfigurationError(f"unknown index mode {mode!r}")


def _bit(index_int: int, depth: int) -> int:
    return (index_int >> (INDEX_BITS - 1 - depth)) & 1


def _prefix(index_int: int, depth: int) -> bytes:
    """First ``depth`` bits of the index, zero-padded to 32 bytes."""
    if depth == 0:
        return bytes(32)
    shift = INDEX_BITS - depth
    return ((index_int >> shift) << shift).to_bytes(32, "big")


def empty_hash(depth: int, prefix: bytes) -> Digest:
    return H(EMPTY_TAG + depth.to_bytes(2, "big") + prefix)


def map_leaf_hash(index: bytes, depth: int, value_commitment: Digest) -> Digest:
    return H(MAP_LEAF_TAG + index + depth.to_bytes(2, "big") + value_commitment)


class _Empty:
    __slots__ = ("depth", "hash")

    def __init__(self, depth: int, prefix: bytes) -> None:
        self.depth = depth
        self.hash = empty_hash(depth, prefix)


class _Leaf:
    __slots__ = ("index", "index_int", "key", "value", "salt", "commitment", "depth", "hash")

    def __init__(self, index: bytes, key: bytes, value: bytes, salt: bytes, depth: int) -> None:
        self.index = index
        self.index_int = int.from_bytes(index, "big")
        self.key = key
        self.value = value
        self.salt = salt
        self.commitment = commitment(salt, value)
        self.depth = depth
        self.hash = map_leaf_hash(index, depth, self.commitment)

    def at_depth(self, depth: int) -> _Leaf:
        return _Leaf(self.index, self.key, self.value, self.salt, depth)


class _Interior:
    __slots__ = ("left", "right", "hash")

    def __init__(self, left: _Node, right: _Node) -> None:
        self.left = left
        self.right = right
        self.hash = node_hash(left.hash, right.hash)


_Node = _Empty | _Leaf | _Interior


def _sibling_empty(index_int: int, depth: int) -> _Empty:
    """Empty node at ``depth + 1`` on the opposite side of ``index`` at ``depth``."""
    shift = INDEX_BITS - 1 - depth
    flipped = ((index_int >> shift) ^ 1) << shift
    return _Empty(depth + 1, flipped.to_bytes(32, "big"))


def _join(a: _Leaf, b: _Leaf, depth: int) -> _Node:
    """Smallest subtree at ``depth`` holding two leaves with distinct indices."""
    ba, bb = _bit(a.index_int, depth), _bit(b.index_int, depth)
    if ba != bb:
        la, lb = a.at_depth(depth + 1), b.at_depth(depth + 1)
        return _Interior(la, lb) if ba == 0 else _Interior(lb, la)
    child = _join(a, b, depth + 1)
    sib = _sibling_empty(a.index_int, depth)
    return _Interior(child, sib) if ba == 0 else _Interior(sib, child)


def _insert(node: _Node, depth: int, leaf: _Leaf) -> _Node:
    if isinstance(node, _Empty):
        return leaf.at_depth(depth)
    if isinstance(node, _Leaf):
        if node.index == leaf.index:
            return leaf.at_depth(depth)
        return _join(node, leaf, depth)
    if _bit(leaf.index_int, depth) == 0:
        return _Interior(_insert(node.left, depth + 1, leaf), node.right)
    return _Interior(node.left, _insert(node.right, depth + 1, leaf))


class ProofKind(IntEnum):
    INCLUSION = 0
    EMPTY = 1  # non-inclusion: path ends in an empty subtree
    OTHER_LEAF = 2  # non-inclusion: path ends in a leaf for a different index


@dataclass(frozen=True)
class LookupProof:
    kind: ProofKind
    index: Digest
    siblings: tuple[Digest, ...]  # root-first
    value_commitment: Digest | None = None
    salt: bytes | None = None
    other_index: Digest | None = None
    other_commitment: Digest | None = None

    @property
    def is_inclusion(self) -> bool:
        return self.kind == ProofKind.INCLUSION

    def encode(self) -> bytes:
        w = Writer().u8(int(self.kind)).digest(self.index).u16(len(self.siblings))
        for s in self.siblings:
            w.digest(s)
        if self.kind == ProofKind.INCLUSION:
            w.digest(self.value_commitment).digest(self.salt)
        elif self.kind == ProofKind.OTHER_LEAF:
            w.digest(self.other_index).digest(self.other_commitment)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> LookupProof:
        r = Reader(data)
        kind = ProofKind(r.u8())
        index = r.digest()
        siblings = tuple(r.digest() for _ in range(r.u16()))
        extra: dict[str, bytes] = {}
        if kind == ProofKind.INCLUSION:
            extra = {"value_commitment": r.digest(), "salt": r.digest()}
        elif kind == ProofKind.OTHER_LEAF:
            extra = {"other_index": r.digest(), "other_commitment": r.digest()}
        r.finish()
        return cls(kind, index, siblings, **extra)


class PrefixTree:
    """Immutable verifiable map version.

    Values are committed as ``H(0x03 || salt || value)``; salts derive from
    ``salt_key`` and the binding so that replaying the same bindings yields
    the same root.
    """

    __slots__ = ("_root", "_count", "index_mode", "index_secret", "salt_key")

    def __init__(
        self,
        *,
        index_mode: str = "plain",
        index_secret: bytes | None = None,
        salt_key: bytes | None = None,
        _root: _Node | None = None,
        _count: int = 0,
    ) -> None:
        if index_mode == "private" and (index_secret is None or len(index_secret) != 32):
            raise ConfigurationError("private index mode needs a 32-byte secret")
        self.index_mode = index_mode
        self.index_secret = index_secret
        self.salt_key = salt_key if salt_key is not None else os.urandom(32)
        self._root = _root if _root is not None else _Empty(0, bytes(32))
        self._count = _count

    def __len__(self) -> int:
        return self._count

    def index_of(self, key: bytes) -> Digest:
        return derive_index(key, self.index_mode, self.index_secret)

    def _derive_salt(self, index: bytes, value: bytes) -> bytes:
        return keyed_hash(self.salt_key, b"translog-salt\x00" + index + value)

    def root(self) -> Digest:
        return self._root.hash

    def _find(self, index: bytes) -> _Leaf | None:
        idx = int.from_bytes(index, "big")
        node, depth = self._root, 0
        while isinstance(node, _Interior):
            node = node.right if _bit(idx, depth) else node.left
            depth += 1
        if isinstance(node, _Leaf) and node.index == index:
            return node
        return None

    def put(self, key: bytes, value: bytes) -> PrefixTree:
        index = self.index_of(key)
        leaf = _Leaf(index, key, value, self._derive_salt(index, value), 0)
        existed = self._find(index) is not None
        return PrefixTree(
            index_mode=self.index_mode,
            index_secret=self.index_secret,
            salt_key=self.salt_key,
            _root=_insert(self._root, 0, leaf),
            _count=self._count + (0 if existed else 1),
        )

    def put_many(self, items: list[tuple[bytes, bytes]]) -> PrefixTree:
        tree = self
        for k, v in items:
            tree = tree.put(k, v)
        return tree

    def get(self, key: bytes) -> bytes | None:
        leaf = self._find(self.index_of(key))
        return None if leaf is None else leaf.value

    def __contains__(self, key: bytes) -> bool:
        return self._find(self.index_of(key)) is not None

    def items(self) -> Iterator[tuple[bytes, bytes]]:
        """Bindings in index (lexicographic) order."""
        stack: list[_Node] = [self._root]
        while stack:
            node = stack.pop()
            if isinstance(node, _Interior):
                stack.append(node.right)
                stack.append(node.left)
            elif isinstance(node, _Leaf):
                yield node.key, node.value

    def prove_lookup(self, key: bytes) -> LookupProof:
        index = self.index_of(key)
        idx = int.from_bytes(index, "big")
        siblings: list[Digest] = []
        node, depth = self._root, 0
        while isinstance(node, _Interior):
            if _bit(idx, depth):
                siblings.append(node.left.hash)
                node = node.right
            else:
                siblings.append(node.right.hash)
                node = node.left
            depth += 1
        path = tuple(siblings)
        if isinstance(node, _Empty):
            return LookupProof(ProofKind.EMPTY, index, path)
        if node.index == index:
            return LookupProof(
                ProofKind.INCLUSION, index, path, value_commitment=node.commitment, salt=node.salt
            )
        return LookupProof(
            ProofKind.OTHER_LEAF,
            index,
            path,
            other_index=node.index,
            other_commitment=node.commitment,
        )


def root_from_lookup(proof: LookupProof) -> Digest | None:
    """Root implied by a lookup proof, or None if the proof is malformed."""
    depth = len(proof.siblings)
    if depth > INDEX_BITS:
        return None
    idx = int.from_bytes(proof.index, "big")
    if proof.kind == ProofKind.INCLUSION:
        if proof.value_commitment is None:
            return None
        h = map_leaf_hash(proof.index, depth, proof.value_commitment)
    elif proof.kind == ProofKind.EMPTY:
        h = empty_hash(depth, _prefix(idx, depth))
    else:
        if proof.other_index is None or proof.other_commitment is None:
            return None
        other = int.from_bytes(proof.other_index, "big")
        if other == idx:
            return None
        # The other leaf must sit on this index's path.
        if depth and (other >> (INDEX_BITS - depth)) != (idx >> (INDEX_BITS - depth)):
            return None
        h = map_leaf_hash(proof.other_index, depth, proof.other_commitment)
    for level in range(depth - 1, -1, -1):
        sib = proof.siblings[level]
        h = node_hash(sib, h) if _bit(idx, level) else node_hash(h, sib)
    return h


def verify_lookup(
    root: Digest,
    key: bytes,
    expected: bytes | None,
    proof: LookupProof,
    *,
    mode: str = "plain",
    secret: bytes | None = None,
) -> bool:
    """Check that ``key`` maps to ``expected`` (None for absent) under ``root``."""
    try:
        index = derive_index(key, mode, secret)
    except ConfigurationError:
        return False
    if proof.index != index:
        return False
    if expected is None:
        if proof.kind == ProofKind.INCLUSION:
            return False
    else:
        if proof.kind != ProofKind.INCLUSION or proof.salt is None:
            return False
        if commitment(proof.salt, expected) != proof.value_commitment:
            return False
    got = root_from_lookup(proof)
    return got is not None and got == root
