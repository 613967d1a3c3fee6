"""``translog`` command line.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 integrity
error in stored data. ``verify`` commands read only proof files and public
keys; they never touch the data directory.
"""

from __future__ import annotations

import argparse
import fcntl
import os
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NoReturn, Sequence

from . import crypto
from .encoding import DecodeError, Reader, Writer
from .gossip_sim import (
    DEFAULT_CURVE_BASE,
    ConfigError,
    SimConfig,
    curve_non_decreasing,
    detection_curve,
    run_sim,
    wilson_interval,
)
from .history_tree import (
    ConsistencyProof,
    HistoryTree,
    InclusionProof,
    SignedTreeHead,
    sign_tree_head,
    verify_consistency,
    verify_inclusion,
)
from .log_backed_map import (
    LogBackedMap,
    SignedTreeRoot,
    decode_str_list,
    encode_str_list,
    find_chain_break,
)
from .prefix_tree import LookupProof, verify_lookup
from .release_query import (
    Client,
    EvidenceBundle,
    Principal,
    Query,
    QueryRecord,
    Role,
    TransparencyService,
    verify_evidence,
)
from .sanitiser import BudgetLedger, LogEntry, SanitisePolicy, Visibility, sanitise_entry
from .sanitiser import IntegrityError as PayloadIntegrityError
from .storage import IntegrityError, LeafJournal, PayloadStore, load_snapshot, save_snapshot
from .sum_tree import KINDS, U64_MAX, AggregateProof, verify_aggregate, verify_quantile

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2, 3
DATA_DIR_ENV = "TRANSLOG_DATA_DIR"
LOG_NAME = "translog"


class UsageError(Exception):
    pass


class VerifyFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# Output


class Output:
    def __init__(self, machine: bool) -> None:
        self.machine = machine

    def record(self, tag: str, /, **fields: object) -> None:
        if self.machine:
            print(" ".join([tag] + [f"{k}={_fmt(v)}" for k, v in fields.items()]))
        else:
            print(f"{tag}:")
            for k, v in fields.items():
                print(f"  {k}: {_fmt(v)}")

    def text(self, s: str) -> None:
        sys.stdout.write(s)


def _fmt(v: object) -> str:
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, bool):
        return "1" if v else "0"
    if v is None:
        return "none"
    return str(v)


# ---------------------------------------------------------------------------
# Files and the data directory


def read_blob(path: str, hex_armored: bool) -> bytes:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    if hex_armored:
        try:
            return bytes.fromhex(data.decode("ascii").strip())
        except (UnicodeDecodeError, ValueError) as exc:
            raise UsageError(f"{path} is not hex-armored") from exc
    return data


def write_blob(path: str | None, data: bytes, hex_armored: bool) -> None:
    """Write to ``path`` or, without one, hex to stdout."""
    if path is None:
        print(data.hex())
        return
    Path(path).write_bytes((data.hex() + "\n").encode() if hex_armored else data)


def read_pub(path: str) -> bytes:
    data = read_blob(path, False)
    if len(data) == crypto.PUBLIC_KEY_SIZE:
        return data
    try:
        pub = bytes.fromhex(data.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        pub = b""
    if len(pub) != crypto.PUBLIC_KEY_SIZE:
        raise UsageError(f"{path} does not hold a 32-byte public key")
    return pub


def parse_hex_digest(text: str, what: str) -> bytes:
    try:
        d = bytes.fromhex(text)
    except ValueError:
        d = b""
    if len(d) != 32:
        raise UsageError(f"{what} must be 64 hex characters")
    return d


def decode_file(path: str, hex_armored: bool, decoder):  # noqa: ANN001, ANN201
    """Decode a proof file; undecodable bytes count as a failed proof."""
    data = read_blob(path, hex_armored)
    try:
        return decoder(data)
    except (DecodeError, ValueError, IndexError, KeyError) as exc:
        raise VerifyFailed(f"{path}: cannot decode ({exc})") from exc


class DataDir:
    def __init__(self, path: str) -> None:
        self.path = Path(path)

    def file(self, name: str) -> Path:
        return self.path / name

    def require(self) -> None:
        if not self.file("operator.key").exists():
            raise UsageError(f"{self.path} is not initialised (run `translog log init`)")

    def operator(self) -> crypto.KeyPair:
        self.require()
        try:
            seed = bytes.fromhex(self.file("operator.key").read_text().strip())
            return crypto.keygen(seed)
        except ValueError as exc:
            raise IntegrityError("operator.key is corrupt") from exc

    def journal(self, name: str) -> LeafJournal:
        return LeafJournal(self.file(name))

    @contextmanager
    def locked(self) -> Iterator[None]:
        self.path.mkdir(parents=True, exist_ok=True)
        with open(self.file(".lock"), "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    # -- history log --------------------------------------------------------

    def history(self) -> tuple[LeafJournal, HistoryTree]:
        self.require()
        j = self.journal("log.journal")
        tree = HistoryTree()
        for data in j:
            tree.append(data)
        return j, tree

    # -- map ----------------------------------------------------------------

    def map_state(self) -> LogBackedMap:
        op = self.operator()
        snap = self.file("map.snapshot")
        if snap.exists():
            return load_snapshot(snap, op)
        return LogBackedMap(op, salt_key=crypto.H(b"map-salt\x00" + op.seed))

    def pending(self) -> list[tuple[bytes, bytes]]:
        if not self.file("map.pending").exists():
            return []
        with self.journal("map.pending") as j:
            out = []
            for rec in j:
                r = Reader(rec)
                out.append((r.blob(), r.blob()))
            return out

    # -- service ------------------------------------------------------------

    def auditor_box(self, op: crypto.KeyPair) -> crypto.BoxKeyPair:
        return crypto.box_keygen(crypto.H(b"cli-auditor-box\x00" + op.seed))

    def subject_box(self, op: crypto.KeyPair, subject: str) -> crypto.BoxKeyPair:
        return crypto.box_keygen(crypto.H(b"cli-subject-box\x00" + op.seed + subject.encode()))

    def principal_key(self, op: crypto.KeyPair, pid: str) -> crypto.KeyPair:
        return crypto.keygen(crypto.H(b"cli-principal\x00" + op.seed + pid.encode()))

    def budget(self) -> BudgetLedger:
        ledger = BudgetLedger(1)
        path = self.file("budget.txt")
        if path.exists():
            state = {}
            for line in path.read_text().splitlines():
                if line.strip():
                    k, _, v = line.partition("=")
                    state[k] = Fraction(v)
            ledger.load(state)
        return ledger

    def save_budget(self, ledger: BudgetLedger) -> None:
        state = ledger.state()
        tmp = self.file("budget.txt.tmp")
        tmp.write_text("".join(f"{k}={v}\n" for k, v in sorted(state.items())))
        os.replace(tmp, self.file("budget.txt"))

    def service(self) -> TransparencyService:
        op = self.operator()
        records = []
        if self.file("queries.journal").exists():
            with self.journal("queries.journal") as j:
                records = [QueryRecord.decode(r) for r in j]
        svc = TransparencyService(
            op,
            ledger=self.budget(),
            salt_key=crypto.H(b"svc-salt\x00" + op.seed),
            rng_seed=len(records),
            clock=lambda: 0,
        )
        svc.register(
            Principal("cli-auditor", Role.AUDITOR, self.principal_key(op, "cli-auditor").public),
            self.auditor_box(op).public,
        )
        svc.register(Principal("cli-public", Role.PUBLIC, self.principal_key(op, "cli-public").public))
        if self.file("entries.journal").exists():
            with self.journal("entries.journal") as j:
                for rec in j:
                    svc.append_entry(LogEntry.decode(rec))
        if self.file("metrics.journal").exists():
            with self.journal("metrics.journal") as j:
                for rec in j:
                    r = Reader(rec)
                    svc.add_measurement(r.u64(), r.i64())
        svc.publish()
        svc.load_query_records(records)
        return svc

    def run_query(self, svc: TransparencyService, pid: str, query: Query):  # noqa: ANN201
        op = svc.operator
        client = Client(pid, self.principal_key(op, pid), len(svc.query_records) + 1)
        before = len(svc.query_records)
        resp = svc.submit_query(client.request(query))
        with self.journal("queries.journal") as j:
            for rec in svc.query_records[before:]:
                j.append(rec.encode())
        self.save_budget(svc.ledger)
        return resp


# ---------------------------------------------------------------------------
# Commands: log


def cmd_log_init(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    with dd.locked():
        keyfile = dd.file("operator.key")
        if keyfile.exists():
            op = dd.operator()
            created = False
        else:
            seed = parse_hex_digest(args.seed, "--seed") if args.seed else os.urandom(32)
            op = crypto.keygen(seed)
            keyfile.write_text(op.seed.hex() + "\n")
            os.chmod(keyfile, 0o600)
            dd.file("operator.pub").write_text(op.public.hex() + "\n")
            dd.journal("log.journal").close()
            created = True
    out.record("init", data_dir=dd.path, created=created, operator_pub=op.public)


def cmd_log_append(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    data = read_blob(args.file, False)
    with dd.locked():
        dd.require()
        with dd.journal("log.journal") as j:
            index = j.append(data)
    out.record("appended", index=index, leaf_hash=crypto.leaf_hash(data))


def _size(tree: HistoryTree, size: int | None) -> int:
    n = tree.size if size is None else size
    if not 0 <= n <= tree.size:
        raise UsageError(f"size {n} outside 0..{tree.size}")
    return n


def cmd_log_root(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    j, tree = dd.history()
    j.close()
    n = _size(tree, args.size)
    if args.sth_out:
        sth = sign_tree_head(dd.operator(), tree, LOG_NAME, int(time.time()), n)
        write_blob(args.sth_out, sth.encode(), args.hex)
    out.record("root", size=n, root=tree.root(n))


def cmd_log_prove_inclusion(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    j, tree = dd.history()
    j.close()
    n = _size(tree, args.size)
    if not 0 <= args.index < n:
        raise UsageError(f"index {args.index} outside 0..{n - 1}")
    write_blob(args.out, tree.prove_inclusion(args.index, n).encode(), args.hex)
    if args.out:
        out.record("inclusion-proof", index=args.index, size=n, root=tree.root(n), leaf_hash=tree.leaf(args.index))


def cmd_log_prove_consistency(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    j, tree = dd.history()
    j.close()
    n = _size(tree, args.new)
    if not 0 <= args.old <= n:
        raise UsageError(f"old size {args.old} outside 0..{n}")
    write_blob(args.out, tree.prove_consistency(args.old, n).encode(), args.hex)
    if args.out:
        out.record("consistency-proof", old=args.old, new=n, old_root=tree.root(args.old), new_root=tree.root(n))


def cmd_log_export(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    dd.require()
    with dd.journal("log.journal") as j:
        out.text(j.export_text())


# ---------------------------------------------------------------------------
# Commands: map, epoch, str


def cmd_map_put(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    value = read_blob(args.file, False)
    with dd.locked():
        dd.require()
        with dd.journal("map.pending") as j:
            j.append(Writer().blob(args.key.encode()).blob(value).getvalue())
            staged = len(j)
    out.record("staged", key=args.key, pending=staged)


def cmd_map_get(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    state = dd.map_state()
    if state.epoch < 0:
        raise UsageError("no epoch has been committed yet")
    epoch = state.epoch if args.epoch is None else args.epoch
    if not 0 <= epoch <= state.epoch:
        raise UsageError(f"epoch {epoch} outside 0..{state.epoch}")
    value = state.get(args.key.encode(), epoch)
    if args.prove:
        write_blob(args.out, state.prove_lookup(args.key.encode(), epoch).encode(), args.hex)
    fields: dict[str, object] = {"key": args.key, "epoch": epoch, "present": value is not None}
    if value is not None:
        fields["value"] = value
    if not (args.prove and args.out is None):
        out.record("lookup", **fields)


def cmd_epoch_commit(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    with dd.locked():
        state = dd.map_state()
        updates = dd.pending()
        ts = int(time.time()) if args.timestamp is None else args.timestamp
        sth = state.commit_epoch(updates, timestamp=ts)
        save_snapshot(dd.file("map.snapshot"), state)
        dd.file("map.pending").unlink(missing_ok=True)
    out.record("committed", epoch=sth.epoch, updates=len(updates), map_root=sth.map_root, log_root=sth.log_root)


def cmd_str_show(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    state = dd.map_state()
    if state.epoch < 0:
        raise UsageError("no epoch has been committed yet")
    epoch = state.epoch if args.epoch is None else args.epoch
    if not 0 <= epoch <= state.epoch:
        raise UsageError(f"epoch {epoch} outside 0..{state.epoch}")
    s = state.strs[epoch]
    if args.out:
        write_blob(args.out, s.encode(), args.hex)
    out.record(
        "str", epoch=s.epoch, map_root=s.map_root, log_root=s.log_root, log_size=s.log_size,
        prev=s.prev_str_hash, timestamp=s.timestamp, hash=s.hash(),
    )


def cmd_str_export(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    state = dd.map_state()
    write_blob(args.out, encode_str_list(state.strs), args.hex)
    if args.out:
        out.record("str-chain", epochs=len(state.strs))


# ---------------------------------------------------------------------------
# Commands: entries, metrics, evidence, query


def cmd_entry_add(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    payload = read_blob(args.file, False)
    with dd.locked():
        op = dd.operator()
        pseud = TransparencyService(op, clock=lambda: 0).pseudonym(args.subject)
        policy = SanitisePolicy(
            Visibility(args.visibility),
            dd.auditor_box(op).public,
            {pseud: dd.subject_box(op, args.subject).public},
        )
        salt = os.urandom(32)
        entry = sanitise_entry(payload, pseud, policy, salt=salt)
        PayloadStore(dd.file("payloads")).put(salt, payload)
        with dd.journal("entries.journal") as j:
            index = j.append(entry.encode())
    out.record("entry", index=index, pseudonym=pseud, visibility=args.visibility, commitment=entry.payload_commitment)


def cmd_metric_add(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    if not 0 <= args.key <= U64_MAX or not -(2**63) <= args.value < 2**63:
        raise UsageError("metric key must be u64 and value i64")
    with dd.locked():
        dd.require()
        with dd.journal("metrics.journal") as j:
            j.append(Writer().u64(args.key).i64(args.value).getvalue())
    out.record("metric", key=args.key, value=args.value)


def cmd_evidence_fetch(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    with dd.locked():
        svc = dd.service()
        op = svc.operator
        pid = f"subject:{args.subject}"
        svc.register(
            Principal(pid, Role.SUBJECT, dd.principal_key(op, pid).public, args.subject),
            dd.subject_box(op, args.subject).public,
        )
        resp = dd.run_query(svc, pid, Query("evidence", subject=args.subject))
    if not resp.served:
        out.record("denied", reason=resp.reason)
        raise VerifyFailed(resp.reason)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    for n, b in enumerate(resp.evidence):
        if args.out:
            write_blob(str(Path(args.out) / f"evidence-{n}.bin"), b.encode(), args.hex)
        out.record(
            "evidence", index=b.proof.leaf_index, visibility=b.entry.visibility.value,
            commitment=b.entry.payload_commitment, verified=verify_evidence(b, op.public),
        )
    m = resp.manifest
    out.record("manifest", pseudonym=m.pseudonym, indices=",".join(map(str, m.indices)) or "-", bundles=len(resp.evidence))


def cmd_query(args: argparse.Namespace, out: Output, dd: DataDir) -> None:
    if args.kind == "quantile":
        if args.q is None:
            raise UsageError("quantile queries need --q")
        query = Query("quantile", q=args.q)
    else:
        lo, hi = args.lo, U64_MAX if args.hi is None else args.hi
        query = Query("aggregate", args.kind, lo, hi, dp=args.dp)
    pid = "cli-public" if args.dp else "cli-auditor"
    with dd.locked():
        svc = dd.service()
        resp = dd.run_query(svc, pid, query)
    if not resp.served:
        out.record("denied", reason=resp.reason, record=resp.record_index)
        raise VerifyFailed(resp.reason)
    if resp.proof is not None and args.proof_out:
        write_blob(args.proof_out, resp.proof.encode(), args.hex)
    if resp.aggregate_head is not None and args.head_out:
        write_blob(args.head_out, resp.aggregate_head.encode(), args.hex)
    answer = resp.answer
    if isinstance(answer, tuple):
        answer = ",".join(str(x) for x in answer)
    out.record("answer", kind=args.kind, value=answer, noised=args.dp, record=resp.record_index)


# ---------------------------------------------------------------------------
# Commands: verify (data-directory free)


def _check(ok: bool, out: Output, what: str) -> None:
    out.record("verify", check=what, ok=ok)
    if not ok:
        raise VerifyFailed(what)


def _leaf(args: argparse.Namespace) -> bytes:
    if args.leaf_hash:
        return parse_hex_digest(args.leaf_hash, "--leaf-hash")
    if args.leaf:
        return crypto.leaf_hash(read_blob(args.leaf, False))
    raise UsageError("give --leaf FILE or --leaf-hash HEX")


def cmd_verify_inclusion(args: argparse.Namespace, out: Output) -> None:
    proof = decode_file(args.proof, args.hex, InclusionProof.decode)
    if args.head:
        head = decode_file(args.head, args.hex, SignedTreeHead.decode)
        if not args.pub:
            raise UsageError("--head requires --pub")
        if not head.verify(read_pub(args.pub)):
            _check(False, out, "inclusion")
        root, size = head.root, head.tree_size
    else:
        if args.root is None or args.size is None:
            raise UsageError("give --head or both --root and --size")
        root, size = parse_hex_digest(args.root, "--root"), args.size
    index = proof.leaf_index if args.index is None else args.index
    _check(verify_inclusion(root, size, index, _leaf(args), proof), out, "inclusion")


def cmd_verify_consistency(args: argparse.Namespace, out: Output) -> None:
    proof = decode_file(args.proof, args.hex, ConsistencyProof.decode)
    ok = verify_consistency(
        parse_hex_digest(args.old_root, "--old-root"), args.old,
        parse_hex_digest(args.new_root, "--new-root"), args.new, proof,
    )
    _check(ok, out, "consistency")


def cmd_verify_lookup(args: argparse.Namespace, out: Output) -> None:
    proof = decode_file(args.proof, args.hex, LookupProof.decode)
    sth = decode_file(args.str, args.hex, SignedTreeRoot.decode)
    if args.absent:
        expected = None
    elif args.value_file:
        expected = read_blob(args.value_file, False)
    elif args.value is not None:
        expected = args.value.encode()
    else:
        raise UsageError("give --value, --value-file or --absent")
    ok = sth.verify(read_pub(args.pub)) and verify_lookup(sth.map_root, args.key.encode(), expected, proof)
    _check(ok, out, "lookup")


def cmd_verify_aggregate(args: argparse.Namespace, out: Output) -> None:
    proof = decode_file(args.proof, args.hex, AggregateProof.decode)
    head = decode_file(args.head, args.hex, SignedTreeHead.decode)
    if not head.verify(read_pub(args.pub)):
        _check(False, out, "aggregate")
    if args.kind == "quantile":
        try:
            key, value = (int(x) for x in args.answer.split(","))
        except ValueError as exc:
            raise UsageError("quantile --answer is KEY,VALUE") from exc
        if args.q is None:
            raise UsageError("quantile verification needs --q")
        ok = verify_quantile(head.root, args.q, key, value, proof)
    else:
        answer: object
        if args.answer == "none":
            answer = None
        elif args.kind == "avg":
            try:
                answer = tuple(int(x) for x in args.answer.split(","))
            except ValueError as exc:
                raise UsageError("avg --answer is SUM,COUNT") from exc
        else:
            try:
                answer = int(args.answer)
            except ValueError as exc:
                raise UsageError("--answer must be an integer") from exc
        hi = U64_MAX if args.hi is None else args.hi
        ok = verify_aggregate(head.root, args.lo, hi, args.kind, answer, proof)
    _check(ok, out, "aggregate")


def cmd_verify_str_chain(args: argparse.Namespace, out: Output) -> None:
    strs = decode_file(args.strs, args.hex, decode_str_list)
    brk = find_chain_break(strs, read_pub(args.pub))
    out.record("str-chain", epochs=len(strs), first_break=brk)
    if brk is not None:
        raise VerifyFailed(f"chain breaks at position {brk}")


def cmd_verify_evidence(args: argparse.Namespace, out: Output) -> None:
    bundle = decode_file(args.bundle, args.hex, EvidenceBundle.decode)
    _check(verify_evidence(bundle, read_pub(args.pub)), out, "evidence")


# ---------------------------------------------------------------------------
# Commands: sim


def _load_config(path: str | None) -> SimConfig | None:
    if path is None:
        return None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    return SimConfig.from_text(text)


def cmd_sim_run(args: argparse.Namespace, out: Output) -> None:
    cfg = _load_config(args.config) or SimConfig()
    report = run_sim(cfg)
    text = report.to_text()
    if out.machine:
        out.text(text)
    else:
        out.text("".join(line + "\n" for line in text.splitlines() if line.startswith("summary.")))


def cmd_sim_curve(args: argparse.Namespace, out: Output) -> None:
    try:
        ps = [float(x) for x in args.p.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError("--p is a comma-separated list of probabilities") from exc
    base = _load_config(args.config) or DEFAULT_CURVE_BASE
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    curve = detection_curve(base, ps, args.trials, args.seed)
    for p, rate in curve:
        lo, hi = wilson_interval(round(rate * args.trials), args.trials)
        out.record("curve", p=p, rate=f"{rate:.4f}", ci_lo=f"{lo:.4f}", ci_hi=f"{hi:.4f}", trials=args.trials)
    out.record("monotone", ok=curve_non_decreasing(curve, args.trials))


# ---------------------------------------------------------------------------
# Parser


def _global_options(defaults: dict[str, object]) -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--data-dir", default=defaults["data_dir"], help=f"data directory (default ${DATA_DIR_ENV} or ./translog-data)")
    g.add_argument("--machine", action="store_true", default=defaults["machine"], help="one key=value record per line")
    g.add_argument("--hex", action="store_true", default=defaults["hex"], help="read and write proof files hex-armored")
    return g


def build_parser() -> argparse.ArgumentParser:
    # Options are accepted before or after the subcommand. The subcommand
    # copies suppress their defaults so they never mask an earlier value.
    common = _global_options(dict.fromkeys(("data_dir", "machine", "hex"), argparse.SUPPRESS))
    top = _global_options({"data_dir": None, "machine": False, "hex": False})
    p = argparse.ArgumentParser(prog="translog", parents=[top], description="Transparency log toolkit")
    groups = p.add_subparsers(dest="group", required=True)

    def sub(parent, name, fn, help_text):  # noqa: ANN001, ANN202
        sp = parent.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(fn=fn)
        return sp

    log = groups.add_parser("log", help="append-only history log").add_subparsers(dest="cmd", required=True)
    s = sub(log, "init", cmd_log_init, "create the data directory and operator key")
    s.add_argument("--seed", help="32-byte hex seed for a reproducible operator key")
    s = sub(log, "append", cmd_log_append, "append a file as one leaf")
    s.add_argument("file")
    s = sub(log, "root", cmd_log_root, "print the root hash")
    s.add_argument("--size", type=int)
    s.add_argument("--sth-out", help="also write a signed tree head")
    s = sub(log, "prove-inclusion", cmd_log_prove_inclusion, "inclusion proof for a leaf")
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--size", type=int)
    s.add_argument("--out")
    s = sub(log, "prove-consistency", cmd_log_prove_consistency, "consistency proof between sizes")
    s.add_argument("--old", type=int, required=True)
    s.add_argument("--new", type=int)
    s.add_argument("--out")
    sub(log, "export", cmd_log_export, "text dump of the leaf journal")

    ver = groups.add_parser("verify", help="verify proof files").add_subparsers(dest="cmd", required=True)
    s = sub(ver, "inclusion", cmd_verify_inclusion, "check an inclusion proof")
    s.add_argument("--proof", required=True)
    s.add_argument("--root")
    s.add_argument("--size", type=int)
    s.add_argument("--head", help="signed tree head file instead of --root/--size")
    s.add_argument("--pub", help="operator public key file")
    s.add_argument("--index", type=int)
    s.add_argument("--leaf", help="leaf data file")
    s.add_argument("--leaf-hash")
    s = sub(ver, "consistency", cmd_verify_consistency, "check a consistency proof")
    s.add_argument("--proof", required=True)
    s.add_argument("--old", type=int, required=True)
    s.add_argument("--old-root", required=True)
    s.add_argument("--new", type=int, required=True)
    s.add_argument("--new-root", required=True)
    s = sub(ver, "lookup", cmd_verify_lookup, "check a map lookup proof against an STR")
    s.add_argument("--proof", required=True)
    s.add_argument("--str", required=True)
    s.add_argument("--pub", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--value")
    s.add_argument("--value-file")
    s.add_argument("--absent", action="store_true")
    s = sub(ver, "aggregate", cmd_verify_aggregate, "check an aggregate or quantile proof")
    s.add_argument("--proof", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--pub", required=True)
    s.add_argument("--kind", required=True, choices=list(KINDS) + ["quantile"])
    s.add_argument("--answer", required=True)
    s.add_argument("--from", dest="lo", type=int, default=0)
    s.add_argument("--to", dest="hi", type=int)
    s.add_argument("--q")
    s = sub(ver, "str-chain", cmd_verify_str_chain, "check an exported STR chain")
    s.add_argument("--strs", required=True)
    s.add_argument("--pub", required=True)
    s = sub(ver, "evidence", cmd_verify_evidence, "check an evidence bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--pub", required=True)

    mp = groups.add_parser("map", help="verifiable map").add_subparsers(dest="cmd", required=True)
    s = sub(mp, "put", cmd_map_put, "stage a key/value update for the next epoch")
    s.add_argument("key")
    s.add_argument("file")
    s = sub(mp, "get", cmd_map_get, "look up a key")
    s.add_argument("key")
    s.add_argument("--prove", action="store_true")
    s.add_argument("--epoch", type=int)
    s.add_argument("--out")

    ep = groups.add_parser("epoch", help="map epochs").add_subparsers(dest="cmd", required=True)
    s = sub(ep, "commit", cmd_epoch_commit, "commit staged updates and sign an STR")
    s.add_argument("--timestamp", type=int)

    st = groups.add_parser("str", help="signed tree roots").add_subparsers(dest="cmd", required=True)
    s = sub(st, "show", cmd_str_show, "show one STR")
    s.add_argument("--epoch", type=int)
    s.add_argument("--out")
    s = sub(st, "export", cmd_str_export, "write the whole STR chain")
    s.add_argument("--out")

    en = groups.add_parser("entry", help="sanitised subject entries").add_subparsers(dest="cmd", required=True)
    s = sub(en, "add", cmd_entry_add, "log an entry about a subject")
    s.add_argument("file")
    s.add_argument("--subject", required=True)
    s.add_argument("--visibility", default="public", choices=[v.value for v in Visibility])

    me = groups.add_parser("metric", help="keyed measurements").add_subparsers(dest="cmd", required=True)
    s = sub(me, "add", cmd_metric_add, "record one measurement")
    s.add_argument("key", type=int)
    s.add_argument("value", type=int)

    ev = groups.add_parser("evidence", help="individual evidence").add_subparsers(dest="cmd", required=True)
    s = sub(ev, "fetch", cmd_evidence_fetch, "fetch a subject's evidence bundles")
    s.add_argument("--subject", required=True)
    s.add_argument("--out", help="directory for bundle files")

    q = groups.add_parser("query", help="aggregate and quantile queries").add_subparsers(dest="kind", required=True)
    for kind in list(KINDS) + ["quantile"]:
        s = sub(q, kind, cmd_query, f"{kind} query")
        s.add_argument("--from", dest="lo", type=int, default=0)
        s.add_argument("--to", dest="hi", type=int)
        s.add_argument("--q")
        s.add_argument("--dp", action="store_true", help="ask as a public principal with Laplace noise")
        s.add_argument("--proof-out")
        s.add_argument("--head-out")

    sm = groups.add_parser("sim", help="gossip and witness simulation").add_subparsers(dest="cmd", required=True)
    s = sub(sm, "run", cmd_sim_run, "run one simulation")
    s.add_argument("--config")
    s = sub(sm, "curve", cmd_sim_curve, "detection rate against gossip probability")
    s.add_argument("--p", default="0,0.1,0.3,0.5,0.9,1")
    s.add_argument("--trials", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    return p


_DATA_FREE = {"verify", "sim"}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Output(args.machine)

    def fail(code: int, msg: str) -> int:
        print(f"translog: {msg}", file=sys.stderr)
        return code

    try:
        if args.group in _DATA_FREE:
            args.fn(args, out)
        else:
            dd = DataDir(args.data_dir or os.environ.get(DATA_DIR_ENV) or "translog-data")
            args.fn(args, out, dd)
    except VerifyFailed as exc:
        return fail(EXIT_VERIFY, f"verification failed: {exc}")
    except (IntegrityError, PayloadIntegrityError, DecodeError) as exc:
        return fail(EXIT_INTEGRITY, f"integrity error: {exc}")
    except (UsageError, ConfigError, ValueError) as exc:
        return fail(EXIT_USAGE, str(exc))
    return EXIT_OK


def _exit() -> NoReturn:
    sys.exit(main())


if __name__ == "__main__":
    _exit()
