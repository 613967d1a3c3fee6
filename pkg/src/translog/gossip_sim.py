"""Seeded simulation of log operators, observers, gossip and witness cosigning.

Rounds run in epoch lockstep. Each epoch the operator commits one batch to
its log-backed map and serves each observer the STR of that observer's
partition. An equivocating operator keeps a second fork from
``equivocate_at`` on. Observers then gossip pairwise with probability ``p``
and run ``detect_equivocation`` on every exchanged pair. Witnesses cosign
an STR only if it extends, by a verifying consistency proof, the last STR
they signed.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

from . import crypto
from .crypto import Digest, KeyPair, leaf_hash
from .history_tree import (
    ConsistencyProof,
    HistoryTree,
    InclusionProof,
    SignedTreeHead,
    log_id,
    sign_tree_head,
    verify_consistency,
    verify_inclusion,
)
from .log_backed_map import LogBackedMap, SignedTreeRoot


class ConfigError(ValueError):
    pass


ProofSource = Callable[[int, int, Digest], "ConsistencyProof | None"]

WITNESS_MODES = ("honest", "offline", "colluding")


# ---------------------------------------------------------------------------
# Equivocation detection


@dataclass(frozen=True)
class EquivocationEvidence:
    """Two operator-signed STRs that cannot both belong to one honest history."""

    str_a: SignedTreeRoot
    str_b: SignedTreeRoot
    kind: str  # "same-epoch" | "inconsistent"

    def verify(self, operator_pub: bytes) -> bool:
        """Both signatures check and the pair is contradictory on its face.

        For ``inconsistent`` evidence the contradiction is the absence of a
        consistency proof, which the pair alone cannot show; only the
        signatures and ordering are checked.
        """
        if not (self.str_a.verify(operator_pub) and self.str_b.verify(operator_pub)):
            return False
        if self.kind == "same-epoch":
            return self.str_a.epoch == self.str_b.epoch and _conflicting(self.str_a, self.str_b)
        return self.str_a.epoch != self.str_b.epoch

    def encode(self) -> bytes:
        tag = b"\x00" if self.kind == "same-epoch" else b"\x01"
        return tag + self.str_a.encode() + self.str_b.encode()

    @classmethod
    def decode(cls, data: bytes) -> EquivocationEvidence:
        from .log_backed_map import STR_SIZE

        if len(data) != 1 + 2 * STR_SIZE or data[0] not in (0, 1):
            raise ValueError("malformed equivocation evidence")
        a = SignedTreeRoot.decode(data[1 : 1 + STR_SIZE])
        b = SignedTreeRoot.decode(data[1 + STR_SIZE :])
        return cls(a, b, "same-epoch" if data[0] == 0 else "inconsistent")


def _conflicting(a: SignedTreeRoot, b: SignedTreeRoot) -> bool:
    return (a.map_root, a.log_root, a.prev_str_hash) != (b.map_root, b.log_root, b.prev_str_hash)


def detect_equivocation(
    str_a: SignedTreeRoot,
    str_b: SignedTreeRoot,
    operator_pub: bytes,
    proof_source: ProofSource | None = None,
) -> EquivocationEvidence | None:
    """Evidence if the two signed STRs contradict each other, else None.

    Unsigned or wrongly signed inputs never produce evidence. For STRs of
    different epochs a consistency proof is requested from ``proof_source``;
    without one no judgement is made.
    """
    if not (str_a.verify(operator_pub) and str_b.verify(operator_pub)):
        return None
    if str_a == str_b:
        return None
    if str_a.epoch == str_b.epoch:
        if _conflicting(str_a, str_b):
            return EquivocationEvidence(str_a, str_b, "same-epoch")
        return None
    if proof_source is None:
        return None
    old, new = (str_a, str_b) if str_a.epoch < str_b.epoch else (str_b, str_a)
    proof = proof_source(old.log_size, new.log_size, new.log_root)
    if proof is not None and verify_consistency(old.log_root, old.log_size, new.log_root, new.log_size, proof):
        return None
    return EquivocationEvidence(old, new, "inconsistent")


# ---------------------------------------------------------------------------
# Witnesses


def cosign_body(sth: SignedTreeRoot) -> bytes:
    return b"COSIGN\x00" + sth.hash()


@dataclass
class Witness:
    name: str
    key: KeyPair
    mode: str = "honest"
    last_signed: SignedTreeRoot | None = None

    def consider(
        self, sth: SignedTreeRoot, operator_pub: bytes, proof_source: ProofSource | None
    ) -> bytes | None:
        """Cosignature on ``sth`` or None if this witness refuses."""
        if self.mode == "offline":
            return None
        if self.mode == "colluding":
            return crypto.sign(self.key, cosign_body(sth))
        if not sth.verify(operator_pub):
            return None
        last = self.last_signed
        if last is not None:
            if sth.epoch < last.epoch:
                return None
            if sth.epoch == last.epoch:
                if sth != last:
                    return None
            else:
                proof = proof_source(last.log_size, sth.log_size, sth.log_root) if proof_source else None
                if proof is None or not verify_consistency(
                    last.log_root, last.log_size, sth.log_root, sth.log_size, proof
                ):
                    return None
        self.last_signed = sth
        return crypto.sign(self.key, cosign_body(sth))


@dataclass(frozen=True)
class CosignedSTR:
    signed_root: SignedTreeRoot
    cosignatures: tuple[tuple[bytes, bytes], ...]  # (witness public key, signature)


class CosignRefused(Exception):
    def __init__(self, sth: SignedTreeRoot, signers: list[str], dissenters: list[str], threshold: int) -> None:
        super().__init__(
            f"epoch {sth.epoch}: {len(signers)} of {threshold} required cosignatures; dissenting: {', '.join(dissenters)}"
        )
        self.signed_root = sth
        self.signers = signers
        self.dissenters = dissenters


def cosign_checkpoint(
    witnesses: Sequence[Witness],
    sth: SignedTreeRoot,
    threshold: int,
    operator_pub: bytes,
    proof_source: ProofSource | None = None,
) -> CosignedSTR:
    sigs: list[tuple[bytes, bytes]] = []
    signers, dissenters = [], []
    for w in witnesses:
        sig = w.consider(sth, operator_pub, proof_source)
        if sig is None:
            dissenters.append(w.name)
        else:
            signers.append(w.name)
            sigs.append((w.key.public, sig))
    if len(sigs) < threshold:
        raise CosignRefused(sth, signers, dissenters, threshold)
    return CosignedSTR(sth, tuple(sigs))


def verify_cosigned(cs: CosignedSTR, operator_pub: bytes, witness_pubs: Iterable[bytes], threshold: int) -> bool:
    if not cs.signed_root.verify(operator_pub):
        return False
    trusted = set(witness_pubs)
    body = cosign_body(cs.signed_root)
    good = {pub for pub, sig in cs.cosignatures if pub in trusted and crypto.verify_sig(pub, body, sig)}
    return len(good) >= threshold


# ---------------------------------------------------------------------------
# Operator


class Operator:
    """Log operator with one fork per partition (a single fork when honest)."""

    def __init__(self, key: KeyPair, salt_key: bytes) -> None:
        self.key = key
        mk = lambda: LogBackedMap(key, salt_key=salt_key, clock=lambda: 0)  # noqa: E731
        self.forks: dict[str, LogBackedMap] = {"A": mk(), "B": mk()}

    def commit(self, epoch: int, updates: list[tuple[bytes, bytes]], fork_b_extra: list[tuple[bytes, bytes]]) -> dict[str, SignedTreeRoot]:
        ts = 1_700_000_000 + epoch
        return {
            "A": self.forks["A"].commit_epoch(updates, timestamp=ts),
            "B": self.forks["B"].commit_epoch(updates + fork_b_extra, timestamp=ts),
        }

    def prove(self, old_size: int, new_size: int, new_root: Digest) -> ConsistencyProof | None:
        # Answers from whichever fork produced ``new_root``; that is the best a
        # equivocating operator can do.
        for fork in self.forks.values():
            if new_size <= fork.log.size and fork.log.root(new_size) == new_root:
                return fork.log.prove_consistency(old_size, new_size)
        return None


# ---------------------------------------------------------------------------
# Configuration and report


def _tuple_field(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class SimConfig:
    epochs: int = 50
    monitors: int = 2
    clients: int = 2
    p: float = 0.5
    equivocate_at: int | None = None
    partition: tuple[str, ...] = ()  # per observer, monitors first; default alternates A,B
    n_witnesses: int = 3
    threshold: int = 2
    witness_modes: tuple[str, ...] = ()  # default all honest
    witness_partition: tuple[str, ...] = ()  # default: first half A, rest B
    seed: int = 0

    @property
    def observers(self) -> list[str]:
        return [f"m{i}" for i in range(self.monitors)] + [f"c{i}" for i in range(self.clients)]

    def observer_partition(self) -> list[str]:
        n = self.monitors + self.clients
        return list(self.partition) if self.partition else ["AB"[i % 2] for i in range(n)]

    def witness_sides(self) -> list[str]:
        if self.witness_partition:
            return list(self.witness_partition)
        half = math.ceil(self.n_witnesses / 2)
        return ["A" if i < half else "B" for i in range(self.n_witnesses)]

    def modes(self) -> list[str]:
        return list(self.witness_modes) if self.witness_modes else ["honest"] * self.n_witnesses

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.monitors < 0 or self.clients < 0:
            raise ConfigError("observer counts must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("gossip probability must lie in [0, 1]")
        if self.equivocate_at is not None and not 0 <= self.equivocate_at < self.epochs:
            raise ConfigError("equivocate_at must be an epoch of the run")
        if self.n_witnesses < 0 or not 0 <= self.threshold <= self.n_witnesses:
            raise ConfigError("threshold must satisfy 0 <= t <= n_witnesses")
        n = self.monitors + self.clients
        if self.partition and (len(self.partition) != n or set(self.partition) - {"A", "B"}):
            raise ConfigError("partition needs one A/B label per observer")
        if self.witness_partition and (
            len(self.witness_partition) != self.n_witnesses or set(self.witness_partition) - {"A", "B"}
        ):
            raise ConfigError("witness_partition needs one A/B label per witness")
        if self.witness_modes and (
            len(self.witness_modes) != self.n_witnesses or set(self.witness_modes) - set(WITNESS_MODES)
        ):
            raise ConfigError(f"witness_modes needs one of {WITNESS_MODES} per witness")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name}={v}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> SimConfig:
        kwargs: dict[str, object] = {}
        types = {f.name: f for f in fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigError(f"line {lineno}: unknown setting {key!r}")
            try:
                if key in ("partition", "witness_modes", "witness_partition"):
                    kwargs[key] = _tuple_field(value)
                elif key == "p":
                    kwargs[key] = float(value)
                elif key == "equivocate_at":
                    kwargs[key] = None if value.lower() in ("", "none") else int(value)
                else:
                    kwargs[key] = int(value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        cfg = cls(**kwargs)  # type: ignore[arg-type]
        cfg.validate()
        return cfg


@dataclass
class SimReport:
    config: SimConfig
    views: list[dict[str, str]] = field(default_factory=list)  # per epoch: observer -> STR hash prefix
    exchanges_per_epoch: list[int] = field(default_factory=list)
    detections_per_epoch: list[int] = field(default_factory=list)
    cosigned: list[dict[str, bool]] = field(default_factory=list)  # per epoch: fork -> cosigned
    witness_refusals: list[tuple[int, str, tuple[str, ...]]] = field(default_factory=list)
    detection_epoch: int | None = None
    evidence: EquivocationEvidence | None = None
    evidence_count: int = 0

    @property
    def gossip_exchanges(self) -> int:
        return sum(self.exchanges_per_epoch)

    @property
    def detected(self) -> bool:
        return self.detection_epoch is not None

    def both_forks_cosigned(self) -> bool:
        return any(c.get("A") and c.get("B") for c in self.cosigned)

    def to_text(self) -> str:
        out = ["report.version=1\n"]
        out += [f"config.{line}" for line in self.config.to_text().splitlines(keepends=True)]
        out.append(f"summary.gossip_exchanges={self.gossip_exchanges}\n")
        out.append(f"summary.detection_epoch={'none' if self.detection_epoch is None else self.detection_epoch}\n")
        out.append(f"summary.evidence_count={self.evidence_count}\n")
        if self.evidence is not None:
            out.append(f"summary.evidence.kind={self.evidence.kind}\n")
            out.append(f"summary.evidence.str_a={self.evidence.str_a.encode().hex()}\n")
            out.append(f"summary.evidence.str_b={self.evidence.str_b.encode().hex()}\n")
        out.append(f"summary.both_forks_cosigned={int(self.both_forks_cosigned())}\n")
        refusals = ";".join(f"{e}:{fork}:{'/'.join(ws)}" for e, fork, ws in self.witness_refusals)
        out.append(f"summary.witness_refusals={refusals or 'none'}\n")
        for e, view in enumerate(self.views):
            v = ",".join(f"{k}:{h}" for k, h in view.items())
            cs = "".join(f for f, ok in sorted(self.cosigned[e].items()) if ok) or "-"
            out.append(
                f"epoch={e} views={v} exchanges={self.exchanges_per_epoch[e]} "
                f"detections={self.detections_per_epoch[e]} cosigned={cs}\n"
            )
        return "".join(out)


def _updates(rng: random.Random, epoch: int) -> list[tuple[bytes, bytes]]:
    return [(f"key-{rng.randrange(64)}".encode(), f"v{epoch}-{rng.getrandbits(32):08x}".encode())]


def run_sim(config: SimConfig) -> SimReport:
    config.validate()
    rng = random.Random(config.seed)
    op_key = crypto.seeded_keypair("operator", config.seed)
    operator = Operator(op_key, crypto.H(b"sim-salt" + op_key.seed))
    pub = op_key.public
    observers = config.observers
    sides = dict(zip(observers, config.observer_partition()))
    witnesses = [
        Witness(f"w{i}", crypto.seeded_keypair(f"witness-{i}", config.seed), mode)
        for i, mode in enumerate(config.modes())
    ]
    witness_sides = config.witness_sides()
    report = SimReport(config)
    latest: dict[str, SignedTreeRoot] = {}
    verified: dict[Digest, bool] = {}

    def checked(s: SignedTreeRoot) -> bool:
        h = s.hash()
        if h not in verified:
            verified[h] = s.verify(pub)
        return verified[h]

    pairs = [(a, b) for i, a in enumerate(observers) for b in observers[i + 1 :]]
    for epoch in range(config.epochs):
        updates = _updates(rng, epoch)
        extra: list[tuple[bytes, bytes]] = []
        if config.equivocate_at is not None and epoch == config.equivocate_at:
            extra = [(b"victim", f"forged-{epoch}".encode())]
        strs = operator.commit(epoch, updates, extra)
        forked = strs["A"] != strs["B"]

        view = {}
        for name in observers:
            s = strs[sides[name]] if forked else strs["A"]
            latest[name] = s
            view[name] = s.hash().hex()[:16]
        report.views.append(view)

        # Witnesses see their own partition's STR first, then the operator
        # shops the other fork around.
        forks_to_sign = ("A", "B") if forked else ("A",)
        sigs: dict[str, int] = {f: 0 for f in forks_to_sign}
        offered: dict[str, list[str]] = {f: [] for f in forks_to_sign}
        dissent: dict[str, list[str]] = {f: [] for f in forks_to_sign}
        for phase in (0, 1):
            for w, side in zip(witnesses, witness_sides):
                fork = side if forked and phase == 0 else ("B" if side == "A" else "A")
                if not forked:
                    if phase == 1:
                        continue
                    fork = "A"
                offered[fork].append(w.name)
                if w.consider(strs[fork], pub, operator.prove) is None:
                    dissent[fork].append(w.name)
                else:
                    sigs[fork] += 1
        cosigned = {f: sigs[f] >= config.threshold for f in forks_to_sign}
        report.cosigned.append(cosigned)
        for f in forks_to_sign:
            if not cosigned[f]:
                report.witness_refusals.append((epoch, f, tuple(dissent[f])))

        exchanges = detections = 0
        for a, b in pairs:
            if rng.random() < config.p:
                exchanges += 1
                sa, sb = latest[a], latest[b]
                if not (checked(sa) and checked(sb)):
                    continue
                ev = detect_equivocation(sa, sb, pub, operator.prove)
                if ev is not None:
                    detections += 1
                    report.evidence_count += 1
                    if report.evidence is None:
                        report.evidence = ev
                        report.detection_epoch = epoch
        report.exchanges_per_epoch.append(exchanges)
        report.detections_per_epoch.append(detections)
    return report


def trial_seed(master_seed: int, p: float, trial: int) -> int:
    d = crypto.H(f"trial\x00{master_seed}\x00{p!r}\x00{trial}".encode())
    return int.from_bytes(d[:8], "big")


DEFAULT_CURVE_BASE = SimConfig(epochs=12, monitors=1, clients=1, equivocate_at=10, partition=("A", "B"))


def detection_curve(
    config_base: SimConfig, p_values: Sequence[float], trials: int, master_seed: int = 0
) -> list[tuple[float, float]]:
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    out = []
    for p in p_values:
        hits = 0
        for t in range(trials):
            cfg = replace(config_base, p=p, seed=trial_seed(master_seed, p, t))
            if run_sim(cfg).detected:
                hits += 1
        out.append((p, hits / trials))
    return out


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    phat = successes / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    # The endpoints are exact at 0 and n; rounding would otherwise leave a sliver.
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def curve_non_decreasing(curve: Sequence[tuple[float, float]], trials: int) -> bool:
    """Each rate's upper 95% bound reaches the previous rate's lower bound."""
    for (_, r0), (_, r1) in zip(curve, curve[1:]):
        lo0, _ = wilson_interval(round(r0 * trials), trials)
        _, hi1 = wilson_interval(round(r1 * trials), trials)
        if hi1 < lo0:
            return False
    return True


# ---------------------------------------------------------------------------
# Multi-log inclusion policy (an entry must appear in at least two logs)


@dataclass(frozen=True)
class LogReceipt:
    head: SignedTreeHead
    proof: InclusionProof


def accept_entry(
    entry: bytes, receipts: Iterable[LogReceipt], log_keys: dict[Digest, bytes], min_logs: int = 2
) -> bool:
    """True iff ``entry`` is provably included in ``min_logs`` distinct trusted logs."""
    logs = set()
    leaf = leaf_hash(entry)
    for r in receipts:
        pub = log_keys.get(r.head.log_id)
        if pub is None or not r.head.verify(pub):
            continue
        if verify_inclusion(r.head.root, r.head.tree_size, r.proof.leaf_index, leaf, r.proof):
            logs.add(r.head.log_id)
    return len(logs) >= min_logs


@dataclass
class MultiLogReport:
    placements: list[int]  # number of logs each entry reached
    accepted: list[bool]

    @property
    def mismatches(self) -> int:
        return sum(1 for n, ok in zip(self.placements, self.accepted) if ok != (n >= 2))


def simulate_multi_log(
    seed: int, n_logs: int = 3, n_entries: int = 40, single_log_fraction: float = 0.3, min_logs: int = 2
) -> MultiLogReport:
    """Submit entries to one or more logs and let a client apply the policy."""
    rng = random.Random(seed)
    keys = [crypto.seeded_keypair(f"ct-log-{i}", seed) for i in range(n_logs)]
    names = [f"ct-log-{i}" for i in range(n_logs)]
    trees = [HistoryTree() for _ in range(n_logs)]
    placements: list[list[tuple[int, int]]] = []
    entries = [f"entry-{seed}-{i}".encode() for i in range(n_entries)]
    for e in entries:
        k = 1 if rng.random() < single_log_fraction else rng.randint(2, n_logs)
        chosen = rng.sample(range(n_logs), k)
        placements.append([(j, trees[j].append(e)) for j in chosen])
    heads = [sign_tree_head(keys[j], trees[j], names[j], 0) for j in range(n_logs)]
    log_keys = {log_id(names[j]): keys[j].public for j in range(n_logs)}
    accepted = []
    for e, where in zip(entries, placements):
        receipts = [LogReceipt(heads[j], trees[j].prove_inclusion(i)) for j, i in where]
        # A replayed duplicate receipt must not count as a second log.
        receipts += receipts[:1]
        accepted.append(accept_entry(e, receipts, log_keys, min_logs))
    return MultiLogReport([len(w) for w in placements], accepted)
