"""Length-prefixed request/response protocol for the release-and-query service.

Frame: 4-byte big-endian length || 1-byte message type || canonical body.
The length counts the type byte and the body. Request signatures cover the
type byte and the body up to (excluding) the trailing 64-byte signature.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from typing import Callable

from .encoding import DecodeError, Reader, Writer
from .history_tree import InclusionProof, SignedTreeHead
from .log_backed_map import SignedTreeRoot
from .prefix_tree import LookupProof
from .release_query import (
    EvidenceBundle,
    EvidenceManifest,
    Response,
    SignedRequest,
    TransparencyService,
)
from .sanitiser import LogEntry
from .sum_tree import AggregateProof

MSG_QUERY = 0x01
MSG_HEADS = 0x02
MSG_RESPONSE = 0x81
MSG_HEADS_RESPONSE = 0x82
MSG_ERROR = 0xFF

MAX_FRAME = 64 * 1024 * 1024

_A_NONE, _A_INT, _A_PAIR, _A_FLOAT, _A_FLOAT_PAIR = 0, 1, 2, 3, 4


def frame(msg_type: int, body: bytes) -> bytes:
    return struct.pack(">IB", len(body) + 1, msg_type) + body


def read_frame(recv: Callable[[int], bytes]) -> tuple[int, bytes] | None:
    """Read one frame using ``recv(n)``; None on clean EOF before a frame."""
    header = _read_exact(recv, 4, allow_eof=True)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if not 1 <= length <= MAX_FRAME:
        raise DecodeError(f"bad frame length {length}")
    payload = _read_exact(recv, length)
    return payload[0], payload[1:]


def _read_exact(recv: Callable[[int], bytes], n: int, allow_eof: bool = False) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise DecodeError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def _opt(w: Writer, data: bytes | None) -> None:
    if data is None:
        w.u8(0)
    else:
        w.u8(1).blob(data)


def _read_opt(r: Reader) -> bytes | None:
    return r.blob() if r.u8() else None


def _encode_answer(w: Writer, answer: object) -> None:
    if answer is None:
        w.u8(_A_NONE)
    elif isinstance(answer, bool):
        raise TypeError("boolean answers are not supported")
    elif isinstance(answer, int):
        w.u8(_A_INT).i64(answer)
    elif isinstance(answer, float):
        w.u8(_A_FLOAT).raw(struct.pack(">d", answer))
    elif isinstance(answer, tuple) and len(answer) == 2 and all(isinstance(x, float) for x in answer):
        w.u8(_A_FLOAT_PAIR).raw(struct.pack(">dd", *answer))
    elif isinstance(answer, tuple) and len(answer) == 2:
        a, b = answer
        w.u8(_A_PAIR).text(str(int(a))).text(str(int(b)))
    else:
        raise TypeError(f"cannot encode answer {answer!r}")


def _decode_answer(r: Reader) -> object:
    tag = r.u8()
    if tag == _A_NONE:
        return None
    if tag == _A_INT:
        return r.i64()
    if tag == _A_FLOAT:
        return struct.unpack(">d", r.raw(8))[0]
    if tag == _A_PAIR:
        return int(r.text()), int(r.text())
    if tag == _A_FLOAT_PAIR:
        return struct.unpack(">dd", r.raw(16))
    raise DecodeError(f"bad answer tag {tag}")


def encode_response(resp: Response) -> bytes:
    w = Writer().text(resp.status).text(resp.reason)
    _encode_answer(w, resp.answer)
    _opt(w, resp.proof.encode() if resp.proof else None)
    _opt(w, resp.aggregate_head.encode() if resp.aggregate_head else None)
    w.u32(len(resp.evidence))
    for b in resp.evidence:
        w.blob(b.entry.encode()).blob(b.proof.encode()).blob(b.head.encode())
    m = resp.manifest
    if m is None:
        w.u8(0)
    else:
        w.u8(1).text(m.pseudonym).u32(len(m.indices))
        for i in m.indices:
            w.u64(i)
        _opt(w, m.signed_root.encode() if m.signed_root else None)
        _opt(w, m.proof.encode() if m.proof else None)
    w.u32(len(resp.entries))
    for e in resp.entries:
        w.blob(e.encode())
    w.u64(resp.record_index + 1)
    _opt(w, resp.query_head.encode() if resp.query_head else None)
    return w.getvalue()


def decode_response(data: bytes) -> Response:
    r = Reader(data)
    status, reason = r.text(), r.text()
    answer = _decode_answer(r)
    proof = _read_opt(r)
    agg_head = _read_opt(r)
    evidence = tuple(
        EvidenceBundle(LogEntry.decode(r.blob()), InclusionProof.decode(r.blob()), SignedTreeHead.decode(r.blob()))
        for _ in range(r.u32())
    )
    manifest = None
    if r.u8():
        pseud = r.text()
        indices = tuple(r.u64() for _ in range(r.u32()))
        sroot = _read_opt(r)
        lproof = _read_opt(r)
        manifest = EvidenceManifest(
            pseud,
            indices,
            SignedTreeRoot.decode(sroot) if sroot else None,
            LookupProof.decode(lproof) if lproof else None,
        )
    entries = tuple(LogEntry.decode(r.blob()) for _ in range(r.u32()))
    record_index = r.u64() - 1
    qhead = _read_opt(r)
    r.finish()
    return Response(
        status,
        reason,
        answer,
        AggregateProof.decode(proof) if proof else None,
        SignedTreeHead.decode(agg_head) if agg_head else None,
        evidence,
        manifest,
        entries,
        record_index,
        SignedTreeHead.decode(qhead) if qhead else None,
    )


def encode_heads(service: TransparencyService) -> bytes:
    heads = service.heads
    w = Writer()
    for name in ("entries", "aggregates", "queries"):
        w.blob(heads[name].encode())
    _opt(w, heads["map"].encode() if heads["map"] is not None else None)
    return w.getvalue()


def decode_heads(data: bytes) -> dict[str, object]:
    r = Reader(data)
    out: dict[str, object] = {n: SignedTreeHead.decode(r.blob()) for n in ("entries", "aggregates", "queries")}
    m = _read_opt(r)
    out["map"] = SignedTreeRoot.decode(m) if m else None
    r.finish()
    return out


def handle_message(service: TransparencyService, msg_type: int, body: bytes) -> bytes:
    """Dispatch one decoded frame; returns the response frame."""
    try:
        if msg_type == MSG_QUERY:
            req = SignedRequest.decode(body)
            return frame(MSG_RESPONSE, encode_response(service.submit_query(req)))
        if msg_type == MSG_HEADS:
            return frame(MSG_HEADS_RESPONSE, encode_heads(service))
        return frame(MSG_ERROR, Writer().text(f"unknown message type {msg_type}").getvalue())
    except (DecodeError, ValueError) as exc:
        return frame(MSG_ERROR, Writer().text(f"malformed request: {exc}").getvalue())


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        while True:
            try:
                got = read_frame(sock.recv)
            except DecodeError:
                return
            if got is None:
                return
            sock.sendall(handle_message(self.server.service, *got))  # type: ignore[attr-defined]


class ServiceServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True

    def __init__(self, path: str, service: TransparencyService) -> None:
        self.service = service
        super().__init__(path, _Handler)

    def serve_in_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


class SocketClient:
    def __init__(self, path: str) -> None:
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(path)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> SocketClient:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _roundtrip(self, msg_type: int, body: bytes) -> tuple[int, bytes]:
        self._sock.sendall(frame(msg_type, body))
        got = read_frame(self._sock.recv)
        if got is None:
            raise ConnectionError("server closed the connection")
        if got[0] == MSG_ERROR:
            raise ValueError(Reader(got[1]).text())
        return got

    def query(self, request: SignedRequest) -> Response:
        _, body = self._roundtrip(MSG_QUERY, request.encode())
        return decode_response(body)

    def heads(self) -> dict[str, object]:
        _, body = self._roundtrip(MSG_HEADS, b"")
        return decode_heads(body)
