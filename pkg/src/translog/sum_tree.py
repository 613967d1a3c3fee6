"""Merkle sum tree over integer-keyed signed 64-bit values.

Every interior node hashes its aggregates (sum, count, min, max), the key span
it covers, and its two child digests:

    leaf     = H(0x04 || 0x00 || key || value)
    interior = H(0x04 || 0x01 || sum || count || min || max || key_lo || key_hi || L || R)

A query proof is the tree pruned to the nodes that straddle the query range:
each remaining subtree is either fully inside the range (its aggregates are
taken whole) or fully outside. The verifier recomputes the root from the
pruned tree, checks key ordering, and recomputes the answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from .crypto import SUM_TAG, Digest, H
from .encoding import Reader, Writer

I64_MIN = -(2**63)
I64_MAX = 2**63 - 1
U64_MAX = 2**64 - 1

KINDS = ("sum", "count", "avg", "min", "max")

EMPTY_DIGEST = H(SUM_TAG + b"\x02")


class InputError(ValueError):
    pass


class EmptyTreeError(ValueError):
    pass


def _checked(v: int) -> int:
    if not I64_MIN <= v <= I64_MAX:
        raise InputError(f"aggregate {v} overflows a signed 64-bit integer")
    return v


def leaf_digest(key: int, value: int) -> Digest:
    return H(SUM_TAG + b"\x00" + Writer().u64(key).i64(value).getvalue())


def interior_digest(agg: Aggregate, key_lo: int, key_hi: int, left: Digest, right: Digest) -> Digest:
    w = Writer().raw(SUM_TAG + b"\x01")
    w.i64(agg.sum).u64(agg.count).i64(agg.min).i64(agg.max).u64(key_lo).u64(key_hi)
    return H(w.raw(left).raw(right).getvalue())


@dataclass(frozen=True)
class Aggregate:
    sum: int
    count: int
    min: int
    max: int

    @classmethod
    def of(cls, value: int) -> Aggregate:
        return cls(value, 1, value, value)

    def __add__(self, other: Aggregate) -> Aggregate:
        return Aggregate(
            _checked(self.sum + other.sum),
            self.count + other.count,
            min(self.min, other.min),
            max(self.max, other.max),
        )


class _Leaf:
    __slots__ = ("key", "value", "digest")

    def __init__(self, key: int, value: int) -> None:
        self.key = key
        self.value = value
        self.digest = leaf_digest(key, value)

    @property
    def agg(self) -> Aggregate:
        return Aggregate.of(self.value)

    @property
    def key_lo(self) -> int:
        return self.key

    @property
    def key_hi(self) -> int:
        return self.key


class _Interior:
    __slots__ = ("left", "right", "agg", "key_lo", "key_hi", "digest")

    def __init__(self, left: _Node, right: _Node) -> None:
        self.left = left
        self.right = right
        self.agg = left.agg + right.agg
        self.key_lo = left.key_lo
        self.key_hi = right.key_hi
        self.digest = interior_digest(self.agg, self.key_lo, self.key_hi, left.digest, right.digest)


_Node = Union[_Leaf, _Interior]


def _build(leaves: list[_Leaf]) -> _Node:
    n = len(leaves)
    if n == 1:
        return leaves[0]
    k = 1 << ((n - 1).bit_length() - 1)
    return _Interior(_build(leaves[:k]), _build(leaves[k:]))


# ---------------------------------------------------------------------------
# Proof representation: a pruned tree.


@dataclass(frozen=True)
class PLeaf:
    key: int
    value: int


@dataclass(frozen=True)
class POpaque:
    """Unexpanded interior subtree."""

    sum: int
    count: int
    min: int
    max: int
    key_lo: int
    key_hi: int
    left: Digest
    right: Digest


@dataclass(frozen=True)
class PExpanded:
    left: ProofNode
    right: ProofNode


ProofNode = Union[PLeaf, POpaque, PExpanded]

_T_EXPANDED, _T_OPAQUE, _T_LEAF, _T_EMPTY = 0, 1, 2, 3


@dataclass(frozen=True)
class AggregateProof:
    lo: int
    hi: int
    tree: ProofNode | None  # None for the empty tree

    def encode(self) -> bytes:
        w = Writer().u64(self.lo).u64(self.hi)
        if self.tree is None:
            w.u8(_T_EMPTY)
        else:
            _encode_node(w, self.tree)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> AggregateProof:
        r = Reader(data)
        lo, hi = r.u64(), r.u64()
        tree = _decode_node(r, 0)
        r.finish()
        return cls(lo, hi, tree)

    def nodes(self) -> Iterable[ProofNode]:
        stack = [self.tree] if self.tree is not None else []
        while stack:
            n = stack.pop()
            yield n
            if isinstance(n, PExpanded):
                stack.extend((n.right, n.left))


def _encode_node(w: Writer, node: ProofNode) -> None:
    if isinstance(node, PExpanded):
        w.u8(_T_EXPANDED)
        _encode_node(w, node.left)
        _encode_node(w, node.right)
    elif isinstance(node, POpaque):
        w.u8(_T_OPAQUE).i64(node.sum).u64(node.count).i64(node.min).i64(node.max)
        w.u64(node.key_lo).u64(node.key_hi).digest(node.left).digest(node.right)
    else:
        w.u8(_T_LEAF).u64(node.key).i64(node.value)


def _decode_node(r: Reader, depth: int) -> ProofNode | None:
    if depth > 64:
        raise ValueError("proof tree too deep")
    tag = r.u8()
    if tag == _T_EMPTY and depth == 0:
        return None
    if tag == _T_EXPANDED:
        left = _decode_node(r, depth + 1)
        right = _decode_node(r, depth + 1)
        if left is None or right is None:
            raise ValueError("empty marker inside proof tree")
        return PExpanded(left, right)
    if tag == _T_OPAQUE:
        return POpaque(r.i64(), r.u64(), r.i64(), r.i64(), r.u64(), r.u64(), r.digest(), r.digest())
    if tag == _T_LEAF:
        return PLeaf(r.u64(), r.i64())
    raise ValueError(f"bad proof node tag {tag}")


Answer = Union[int, tuple[int, int], None]


class SumTree:
    """Immutable sum tree; keys are unsigned 64-bit integers."""

    def __init__(self, entries: Iterable[tuple[int, int]] = ()) -> None:
        items = sorted(entries)
        keys = [k for k, _ in items]
        if len(set(keys)) != len(keys):
            raise InputError("duplicate keys")
        for k, v in items:
            if not 0 <= k <= U64_MAX:
                raise InputError(f"key {k} outside unsigned 64-bit range")
            if not I64_MIN <= v <= I64_MAX:
                raise InputError(f"value {v} outside signed 64-bit range")
        self._entries = items
        self._root: _Node | None = _build([_Leaf(k, v) for k, v in items]) if items else None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(self._entries)

    def root(self) -> Digest:
        return EMPTY_DIGEST if self._root is None else self._root.digest

    @property
    def aggregate(self) -> Aggregate | None:
        return None if self._root is None else self._root.agg

    def prove_range(self, lo: int, hi: int) -> AggregateProof:
        if lo > hi:
            raise InputError("range lower bound exceeds upper bound")
        if self._root is None:
            return AggregateProof(lo, hi, None)
        return AggregateProof(lo, hi, _prune(self._root, lo, hi))

    def query_aggregate(self, lo: int, hi: int, kind: str) -> tuple[Answer, AggregateProof]:
        if kind not in KINDS:
            raise InputError(f"unknown aggregate kind {kind!r}")
        proof = self.prove_range(lo, hi)
        agg = _evaluate(proof, self.root())
        assert agg is not None
        return _answer(agg[0], kind), proof

    def quantile(self, q: Fraction | float | int | str) -> tuple[int, int, AggregateProof]:
        if self._root is None:
            raise EmptyTreeError("quantile of an empty tree")
        rank = quantile_rank(q, len(self._entries))
        key, value = self._entries[rank - 1]
        return key, value, self.prove_range(key, key)


def _prune(node: _Node, lo: int, hi: int) -> ProofNode:
    if isinstance(node, _Leaf):
        return PLeaf(node.key, node.value)
    inside = lo <= node.key_lo and node.key_hi <= hi
    outside = node.key_hi < lo or node.key_lo > hi
    if inside or outside:
        a = node.agg
        return POpaque(a.sum, a.count, a.min, a.max, node.key_lo, node.key_hi, node.left.digest, node.right.digest)
    return PExpanded(_prune(node.left, lo, hi), _prune(node.right, lo, hi))


def _to_fraction(q: Fraction | float | int | str) -> Fraction:
    if isinstance(q, float):
        # Decimal reading of the float, so 0.1 means 1/10 rather than its binary value.
        return Fraction(repr(q))
    return Fraction(q)


def quantile_rank(q: Fraction | float | int | str, n: int) -> int:
    """1-indexed rank ``max(1, ceil(q * n))`` of the lower q-quantile."""
    fq = _to_fraction(q)
    if not 0 <= fq <= 1:
        raise InputError("quantile must lie in [0, 1]")
    return max(1, math.ceil(fq * n))


def _answer(agg: Aggregate | None, kind: str) -> Answer:
    if kind == "count":
        return 0 if agg is None else agg.count
    if kind == "sum":
        return 0 if agg is None else agg.sum
    if kind == "avg":
        return (0, 0) if agg is None else (agg.sum, agg.count)
    if agg is None:
        return None
    return agg.min if kind == "min" else agg.max


class _Walk:
    """Accumulates in-range aggregates and the count strictly left of the range."""

    def __init__(self, lo: int, hi: int) -> None:
        self.lo = lo
        self.hi = hi
        self.inside: Aggregate | None = None
        self.left_count = 0

    def _add(self, agg: Aggregate) -> None:
        self.inside = agg if self.inside is None else self.inside + agg

    def visit(self, node: ProofNode) -> tuple[Digest, Aggregate, int, int] | None:
        if isinstance(node, PLeaf):
            if not (0 <= node.key <= U64_MAX and I64_MIN <= node.value <= I64_MAX):
                return None
            agg = Aggregate.of(node.value)
            if self.lo <= node.key <= self.hi:
                self._add(agg)
            elif node.key < self.lo:
                self.left_count += 1
            return leaf_digest(node.key, node.value), agg, node.key, node.key
        if isinstance(node, POpaque):
            if node.count < 2 or node.key_lo >= node.key_hi or node.min > node.max:
                return None
            agg = Aggregate(node.sum, node.count, node.min, node.max)
            if self.lo <= node.key_lo and node.key_hi <= self.hi:
                self._add(agg)
            elif node.key_hi < self.lo:
                self.left_count += node.count
            elif node.key_lo > self.hi:
                pass
            else:
                return None  # straddles a boundary without being expanded
            return interior_digest(agg, node.key_lo, node.key_hi, node.left, node.right), agg, node.key_lo, node.key_hi
        left = self.visit(node.left)
        if left is None:
            return None
        right = self.visit(node.right)
        if right is None:
            return None
        if left[3] >= right[2]:
            return None  # keys must be strictly increasing left to right
        agg = left[1] + right[1]
        return interior_digest(agg, left[2], right[3], left[0], right[0]), agg, left[2], right[3]


def _evaluate(proof: AggregateProof, root_digest: Digest) -> tuple[Aggregate | None, int, int] | None:
    """(in-range aggregate, count left of range, total count) or None if invalid."""
    if proof.lo > proof.hi:
        return None
    if proof.tree is None:
        return (None, 0, 0) if root_digest == EMPTY_DIGEST else None
    walk = _Walk(proof.lo, proof.hi)
    try:
        got = walk.visit(proof.tree)
    except InputError:
        return None
    if got is None or got[0] != root_digest:
        return None
    return walk.inside, walk.left_count, got[1].count


def verify_aggregate(
    root_digest: Digest, lo: int, hi: int, kind: str, answer: Answer, proof: AggregateProof
) -> bool:
    if kind not in KINDS or (proof.lo, proof.hi) != (lo, hi):
        return False
    result = _evaluate(proof, root_digest)
    if result is None:
        return False
    expected = _answer(result[0], kind)
    if kind == "avg" and answer is not None:
        answer = tuple(answer)  # type: ignore[arg-type]
    return answer == expected


def verify_quantile(
    root_digest: Digest, q: Fraction | float | int | str, key: int, value: int, proof: AggregateProof
) -> bool:
    if (proof.lo, proof.hi) != (key, key):
        return False
    result = _evaluate(proof, root_digest)
    if result is None:
        return False
    inside, left_count, total = result
    if total == 0 or inside is None or inside.count != 1 or inside.sum != value:
        return False
    try:
        rank = quantile_rank(q, total)
    except InputError:
        return False
    return left_count + 1 == rank


def build(entries: Iterable[tuple[int, int]]) -> SumTree:
    return SumTree(entries)
