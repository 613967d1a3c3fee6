"""Durable storage: leaf journal, payload store and epoch snapshots.

Journal file layout::

    version(1) || record*
    record = index u64 || length u32 || data || digest(32)
    digest = H(index u64 || length u32 || data)

Snapshot layout::

    version(1) || body || SHA-256(version || body)

All integers are big-endian. Payloads live outside the Merkle structures
under their commitment digest.
"""

from __future__ import annotations

import os
import struct
import threading
from pathlib import Path
from typing import Callable, Iterator

from . import crypto
from .crypto import Digest, KeyPair
from .encoding import DecodeError, Reader, Writer
from .history_tree import HistoryTree
from .log_backed_map import STR_SIZE, LogBackedMap, SignedTreeRoot, find_chain_break

JOURNAL_VERSION = 1
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct(">QI")
_DIGEST = 32


class IntegrityError(Exception):
    """Stored bytes do not match their digest."""

    def __init__(self, message: str, index: int | None = None) -> None:
        super().__init__(message)
        self.index = index


def record_digest(index: int, data: bytes) -> Digest:
    return crypto.H(_HEADER.pack(index, len(data)) + data)


class LeafJournal:
    """Append-only record file with per-record digests.

    Opening a journal scans it once. An incomplete final record (a torn
    write) is truncated away and its bytes kept in ``<path>.tail``; complete
    records are never rewritten. A header whose index is out of sequence
    stops the scan with an IntegrityError. Digests are checked on every
    read, not during the scan, so corruption of a complete record surfaces
    as an IntegrityError naming that index.
    """

    def __init__(self, path: str | os.PathLike[str], *, fsync: bool = False) -> None:
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._offsets: list[int] = []
        self.recovered_bytes = 0
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "wb") as f:
                f.write(bytes([JOURNAL_VERSION]))
        self._fh = open(self.path, "r+b")
        self._recover()

    def _recover(self) -> None:
        fh = self._fh
        fh.seek(0, os.SEEK_END)
        size = fh.tell()
        fh.seek(0)
        version = fh.read(1)
        if version != bytes([JOURNAL_VERSION]):
            raise IntegrityError(f"unsupported journal version {version!r}")
        pos = 1
        while pos < size:
            fh.seek(pos)
            header = fh.read(_HEADER.size)
            if len(header) < _HEADER.size:
                break
            stored_index, length = _HEADER.unpack(header)
            if stored_index != len(self._offsets):
                # A torn append still starts with the right index; this is damage.
                raise IntegrityError(
                    f"journal record {len(self._offsets)} has a corrupt header", len(self._offsets)
                )
            end = pos + _HEADER.size + length + _DIGEST
            if end > size:
                break
            self._offsets.append(pos)
            pos = end
        if pos < size:
            # Keep the cut bytes beside the journal in case the tail was not torn.
            fh.seek(pos)
            Path(f"{self.path}.tail").write_bytes(fh.read())
            self.recovered_bytes = size - pos
            fh.truncate(pos)
            fh.flush()
        self._end = pos

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> LeafJournal:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self._offsets)

    def append(self, data: bytes) -> int:
        with self._lock:
            index = len(self._offsets)
            rec = _HEADER.pack(index, len(data)) + data + record_digest(index, data)
            self._fh.seek(self._end)
            self._fh.write(rec)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._offsets.append(self._end)
            self._end += len(rec)
            return index

    def read(self, index: int) -> bytes:
        if not 0 <= index < len(self._offsets):
            raise IndexError(f"journal index {index} out of range (size {len(self)})")
        with self._lock:
            self._fh.seek(self._offsets[index])
            header = self._fh.read(_HEADER.size)
            stored_index, length = _HEADER.unpack(header)
            data = self._fh.read(length)
            digest = self._fh.read(_DIGEST)
        if stored_index != index or len(data) != length or digest != record_digest(index, data):
            raise IntegrityError(f"journal record {index} failed its digest check", index)
        return data

    def __iter__(self) -> Iterator[bytes]:
        for i in range(len(self)):
            yield self.read(i)

    def verify_all(self) -> list[int]:
        """Indices whose digest check fails."""
        bad = []
        for i in range(len(self)):
            try:
                self.read(i)
            except IntegrityError:
                bad.append(i)
        return bad

    def export_text(self) -> str:
        lines = []
        for i in range(len(self)):
            try:
                data = self.read(i)
                lines.append(f"{i} ok {len(data)} {data.hex()}\n")
            except IntegrityError:
                lines.append(f"{i} corrupt\n")
        return "".join(lines)


class PayloadStore:
    """Salted payloads stored as files named by their commitment."""

    def __init__(self, root: str | os.PathLike[str]) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, comm: Digest) -> Path:
        return self.root / comm.hex()

    def put(self, salt: bytes, payload: bytes) -> Digest:
        comm = crypto.commitment(salt, payload)
        path = self._path(comm)
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(salt + payload)
            os.replace(tmp, path)
        return comm

    def get(self, comm: Digest) -> tuple[bytes, bytes]:
        """(salt, payload); raises KeyError if absent, IntegrityError if altered."""
        path = self._path(comm)
        if not path.exists():
            raise KeyError(comm.hex())
        raw = path.read_bytes()
        salt, payload = raw[:32], raw[32:]
        if crypto.commitment(salt, payload) != comm:
            raise IntegrityError(f"payload {comm.hex()} does not match its commitment")
        return salt, payload

    def __contains__(self, comm: Digest) -> bool:
        return self._path(comm).exists()


# ---------------------------------------------------------------------------
# Snapshots

_MODES = {"plain": 0, "private": 1}


def snapshot(state: LogBackedMap) -> bytes:
    w = Writer().raw(b"TSNP").digest(state.operator.public).blob(state.salt_key)
    w.u8(_MODES[state.index_mode])
    secret = state.index_secret
    if secret is None:
        w.u8(0)
    else:
        w.u8(1).blob(secret)
    w.u32(len(state.strs))
    for batch, sth in zip(state.updates, state.strs):
        w.u32(len(batch))
        for key, value in batch:
            w.blob(key).blob(value)
        w.raw(sth.encode())
    leaves = state.log.leaves()
    w.u64(len(leaves))
    for leaf in leaves:
        w.digest(leaf)
    body = bytes([SNAPSHOT_VERSION]) + w.getvalue()
    return body + crypto.H(body)


def restore(data: bytes, operator: KeyPair, clock: Callable[[], int] | None = None) -> LogBackedMap:
    """Rebuild a LogBackedMap, refusing anything that does not replay exactly.

    Nothing is returned unless the digest matches, every replayed map and
    log root equals the stored STR and the STR chain verifies.
    """
    if len(data) < 1 + _DIGEST:
        raise IntegrityError("snapshot truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if crypto.H(body) != digest:
        raise IntegrityError("snapshot digest mismatch")
    if body[0] != SNAPSHOT_VERSION:
        raise IntegrityError(f"unsupported snapshot version {body[0]}")
    try:
        r = Reader(body[1:])
        if r.raw(4) != b"TSNP":
            raise IntegrityError("not a snapshot")
        op_pub = r.digest()
        salt_key = r.blob()
        mode = {v: k for k, v in _MODES.items()}[r.u8()]
        secret = r.blob() if r.u8() else None
        epochs = []
        for _ in range(r.u32()):
            batch = [(r.blob(), r.blob()) for _ in range(r.u32())]
            epochs.append((batch, SignedTreeRoot.decode(r.raw(STR_SIZE))))
        leaves = [r.digest() for _ in range(r.u64())]
        r.finish()
    except (DecodeError, KeyError, ValueError) as exc:
        raise IntegrityError(f"malformed snapshot: {exc}") from exc
    if op_pub != operator.public:
        raise IntegrityError("snapshot belongs to a different operator key")

    state = LogBackedMap(operator, index_mode=mode, index_secret=secret, salt_key=salt_key, clock=clock)
    for epoch, (batch, sth) in enumerate(epochs):
        tree = state.map.put_many(batch)
        state.log.append(tree.root())
        if (tree.root(), state.log.root(), state.log.size, sth.epoch) != (
            sth.map_root,
            sth.log_root,
            sth.log_size,
            epoch,
        ):
            raise IntegrityError(f"replayed epoch {epoch} does not match its STR")
        state.versions.append(tree)
        state.updates.append(batch)
        state.strs.append(sth)
    if state.log.leaves() != leaves:
        raise IntegrityError("replayed history leaves differ from the snapshot")
    if find_chain_break(state.strs, operator.public) is not None:
        raise IntegrityError("STR chain in snapshot does not verify")
    return state


def save_snapshot(path: str | os.PathLike[str], state: LogBackedMap) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(snapshot(state))
    os.replace(tmp, path)


def load_snapshot(
    path: str | os.PathLike[str], operator: KeyPair, clock: Callable[[], int] | None = None
) -> LogBackedMap:
    return restore(Path(path).read_bytes(), operator, clock)


def history_from_journal(journal: LeafJournal) -> HistoryTree:
    """History tree over every journal record, each hashed as a leaf."""
    tree = HistoryTree()
    for data in journal:
        tree.append(data)
    return tree
