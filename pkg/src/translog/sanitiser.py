"""Sanitisation of logged and released information.

Three things live here:

* ``sanitise_entry`` / ``open_envelope``: commit to a payload and, for
  restricted visibility classes, replace it with an envelope encrypted to the
  designated recipient.
* ``dp_answer``: Laplace-noised query answers drawn from a seeded generator.
* ``BudgetLedger``: additive privacy-budget accounting, either per principal
  or as one pool shared by everybody.

Laplace sampling uses numpy's floating-point sampler. Its known
floating-point side channels are accepted here.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Union

import numpy as np

from . import crypto
from .crypto import BoxKeyPair, DecryptionError, Digest
from .encoding import Reader, Writer

__all__ = [
    "BudgetLedger",
    "BudgetRefused",
    "ConfigurationError",
    "DecryptionError",
    "IntegrityError",
    "LogEntry",
    "ParameterError",
    "SanitisePolicy",
    "Visibility",
    "dp_answer",
    "open_envelope",
    "release_payload",
    "sanitise_entry",
]


class ConfigurationError(Exception):
    pass


class IntegrityError(Exception):
    """A released payload does not match its logged commitment."""


class ParameterError(ValueError):
    pass


class Visibility(str, Enum):
    PUBLIC = "public"
    SUBJECT_ONLY = "subject-only"
    AUDITOR_ONLY = "auditor-only"


_VIS_CODE = {Visibility.PUBLIC: 0, Visibility.SUBJECT_ONLY: 1, Visibility.AUDITOR_ONLY: 2}
_CODE_VIS = {v: k for k, v in _VIS_CODE.items()}

SALT_SIZE = 32


@dataclass(frozen=True)
class LogEntry:
    subject_id: str
    payload_commitment: Digest
    visibility: Visibility
    payload: bytes | None = None
    salt: bytes | None = None  # disclosed only for public entries
    envelope: bytes | None = None

    def encode(self) -> bytes:
        w = Writer().text(self.subject_id).digest(self.payload_commitment).u8(_VIS_CODE[self.visibility])
        if self.visibility == Visibility.PUBLIC:
            w.raw(self.salt).blob(self.payload)
        else:
            w.blob(self.envelope)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> LogEntry:
        r = Reader(data)
        subject, comm, vis = r.text(), r.digest(), _CODE_VIS[r.u8()]
        if vis == Visibility.PUBLIC:
            entry = cls(subject, comm, vis, salt=r.raw(SALT_SIZE), payload=r.blob())
        else:
            entry = cls(subject, comm, vis, envelope=r.blob())
        r.finish()
        return entry

    def leaf_data(self) -> bytes:
        return self.encode()


@dataclass(frozen=True)
class SanitisePolicy:
    """Visibility class plus the recipient keys it needs."""

    visibility: Visibility = Visibility.PUBLIC
    auditor_pub: bytes | None = None
    subject_pubs: dict[str, bytes] = field(default_factory=dict)


def sanitise_entry(raw_payload: bytes, subject_id: str, policy: SanitisePolicy, *, salt: bytes | None = None) -> LogEntry:
    salt = os.urandom(SALT_SIZE) if salt is None else salt
    if len(salt) != SALT_SIZE:
        raise ParameterError("salt must be 32 bytes")
    comm = crypto.commitment(salt, raw_payload)
    vis = Visibility(policy.visibility)
    if vis == Visibility.PUBLIC:
        return LogEntry(subject_id, comm, vis, payload=bytes(raw_payload), salt=salt)
    if vis == Visibility.AUDITOR_ONLY:
        recipient = policy.auditor_pub
        if recipient is None:
            raise ConfigurationError("auditor-only entries need an auditor key")
    else:
        recipient = policy.subject_pubs.get(subject_id)
        if recipient is None:
            raise ConfigurationError(f"no key registered for subject {subject_id!r}")
    envelope = crypto.seal(recipient, salt + raw_payload)
    return LogEntry(subject_id, comm, vis, envelope=envelope)


def open_envelope(entry: LogEntry, recipient: BoxKeyPair) -> bytes:
    """Decrypt and check against the commitment.

    Raises DecryptionError for a wrong key or tampered ciphertext, and
    IntegrityError when the plaintext does not match ``payload_commitment``.
    """
    if entry.envelope is None:
        raise ConfigurationError("entry has no envelope")
    plain = crypto.unseal(recipient, entry.envelope)
    salt, payload = plain[:SALT_SIZE], plain[SALT_SIZE:]
    if len(salt) != SALT_SIZE or crypto.commitment(salt, payload) != entry.payload_commitment:
        raise IntegrityError("envelope plaintext does not match the logged commitment")
    return payload


def release_payload(entry: LogEntry, recipient: BoxKeyPair | None = None) -> bytes:
    """Payload by whichever path applies, always commitment-checked."""
    if entry.visibility == Visibility.PUBLIC:
        if entry.payload is None or entry.salt is None:
            raise IntegrityError("public entry missing payload")
        if crypto.commitment(entry.salt, entry.payload) != entry.payload_commitment:
            raise IntegrityError("public payload does not match its commitment")
        return entry.payload
    if recipient is None:
        raise DecryptionError("restricted entry needs a recipient key")
    return open_envelope(entry, recipient)


# ---------------------------------------------------------------------------
# Differential privacy

Rational = Union[Fraction, float, int]
Seed = Union[int, np.random.Generator, None]


def _rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def laplace_scale(sensitivity: Rational, epsilon: Rational) -> float:
    if not sensitivity > 0:
        raise ParameterError("sensitivity must be positive")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    return float(sensitivity) / float(epsilon)


def dp_answer(true_value: Rational, sensitivity: Rational, epsilon: Rational, rng_seed: Seed = None) -> float:
    """``true_value`` plus Laplace noise of scale ``sensitivity / epsilon``."""
    scale = laplace_scale(sensitivity, epsilon)
    return float(true_value) + float(_rng(rng_seed).laplace(0.0, scale))


def _budget(x: Rational) -> Fraction:
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


class BudgetRefused(Exception):
    def __init__(self, principal: str, requested: Fraction, remaining: Fraction) -> None:
        super().__init__(f"budget exhausted for {principal!r}: requested {requested}, remaining {remaining}")
        self.principal = principal
        self.requested = requested
        self.remaining = remaining


class BudgetLedger:
    """Privacy budget accounting with simple additive composition.

    ``mode="per-principal"`` gives every principal its own ``total``;
    ``mode="shared"`` draws everyone from one pool, which lets a single
    principal exhaust the budget for all others.
    """

    SHARED = "*"

    def __init__(self, total: Rational, mode: str = "per-principal") -> None:
        if mode not in ("per-principal", "shared"):
            raise ParameterError(f"unknown budget mode {mode!r}")
        total = _budget(total)
        if total < 0:
            raise ParameterError("budget total must be non-negative")
        self.total = total
        self.mode = mode
        self._remaining: dict[str, Fraction] = {}
        self._lock = threading.Lock()

    def _slot(self, principal: str) -> str:
        return self.SHARED if self.mode == "shared" else principal

    def remaining(self, principal: str) -> Fraction:
        with self._lock:
            return self._remaining.get(self._slot(principal), self.total)

    def charge(self, principal: str, epsilon: Rational) -> Fraction:
        """Deduct ``epsilon``; returns what is left or raises BudgetRefused."""
        eps = _budget(epsilon)
        if eps <= 0:
            raise ParameterError("epsilon must be positive")
        with self._lock:
            slot = self._slot(principal)
            left = self._remaining.setdefault(slot, self.total)
            if left < eps:
                raise BudgetRefused(principal, eps, left)
            self._remaining[slot] = left - eps
            return left - eps

    def reset(self, principal: str | None = None) -> None:
        """Administrative reset of one principal (or everybody)."""
        with self._lock:
            if principal is None:
                self._remaining.clear()
            else:
                self._remaining.pop(self._slot(principal), None)

    def state(self) -> dict[str, Fraction]:
        with self._lock:
            return dict(self._remaining)

    def load(self, state: dict[str, Rational]) -> None:
        """Replace remaining balances with a previously saved ``state()``."""
        parsed = {k: _budget(v) for k, v in state.items()}
        if any(v < 0 or v > self.total for v in parsed.values()):
            raise ParameterError("saved balance outside [0, total]")
        with self._lock:
            self._remaining = parsed
