"""Hashing with domain separation, signatures and public-key envelopes.

Domain tags (first byte of every hash input):

    0x00  history-tree leaf
    0x01  interior node (history and prefix trees)
    0x02  empty prefix-tree subtree
    0x03  salted value / payload commitment
    0x04  sum-tree node
    0x05  prefix-tree leaf

Signatures are Ed25519 (deterministic). Envelopes use an ephemeral X25519
exchange, HKDF-SHA256 and ChaCha20-Poly1305.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

Digest = bytes

LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
EMPTY_TAG = b"\x02"
COMMIT_TAG = b"\x03"
SUM_TAG = b"\x04"
MAP_LEAF_TAG = b"\x05"

SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
NONCE_SIZE = 12


def H(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def leaf_hash(data: bytes) -> Digest:
    return hashlib.sha256(LEAF_TAG + data).digest()


def node_hash(left: Digest, right: Digest) -> Digest:
    return hashlib.sha256(NODE_TAG + left + right).digest()


def empty_root() -> Digest:
    """Root of a history tree with no leaves: the hash of the empty string."""
    return hashlib.sha256(b"").digest()


def commitment(salt: bytes, value: bytes) -> Digest:
    return hashlib.sha256(COMMIT_TAG + salt + value).digest()


def keyed_hash(secret: bytes, data: bytes) -> Digest:
    return hmac.new(secret, data, hashlib.sha256).digest()


def is_digest(value: object) -> bool:
    return isinstance(value, bytes) and len(value) == 32


# ---------------------------------------------------------------------------
# Signatures


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 signing key with its 32-byte raw public key."""

    seed: bytes
    public: bytes

    @property
    def key_id(self) -> Digest:
        return H(self.public)

    def sign(self, msg: bytes) -> bytes:
        return sign(self, msg)


def keygen(seed: bytes | None = None) -> KeyPair:
    if seed is None:
        seed = os.urandom(32)
    if len(seed) != 32:
        raise ValueError("signing seed must be 32 bytes")
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(seed=bytes(seed), public=pub)


def seeded_keypair(label: str | bytes, seed: int | bytes = 0) -> KeyPair:
    """Reproducible test/simulation key derived from a label and seed."""
    if isinstance(label, str):
        label = label.encode()
    if isinstance(seed, int):
        seed = seed.to_bytes(16, "big", signed=True)
    return keygen(H(b"translog-key\x00" + label + b"\x00" + seed))


def sign(priv: KeyPair, msg: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(priv.seed).sign(msg)


def verify_sig(pub: bytes, msg: bytes, sig: bytes) -> bool:
    """True iff `sig` is a valid signature on `msg`; never raises."""
    try:
        if len(pub) != PUBLIC_KEY_SIZE or len(sig) != SIGNATURE_SIZE:
            return False
        Ed25519PublicKey.from_public_bytes(bytes(pub)).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# ---------------------------------------------------------------------------
# Envelopes (encryption to a designated recipient)


class DecryptionError(Exception):
    """The envelope cannot be opened with the supplied key."""


@dataclass(frozen=True)
class BoxKeyPair:
    """X25519 key pair for receiving envelopes."""

    secret: bytes
    public: bytes

    @property
    def key_id(self) -> Digest:
        return H(self.public)


def box_keygen(seed: bytes | None = None) -> BoxKeyPair:
    if seed is None:
        seed = os.urandom(32)
    if len(seed) != 32:
        raise ValueError("box seed must be 32 bytes")
    priv = X25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return BoxKeyPair(secret=bytes(seed), public=pub)


def _envelope_key(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"translog-envelope" + eph_pub + recipient_pub,
    ).derive(shared)


def seal(recipient_pub: bytes, plaintext: bytes) -> bytes:
    """Encrypt to `recipient_pub`.

    Layout: recipient key id (32) || nonce (12) || ciphertext, where the
    ciphertext section is the ephemeral X25519 public key followed by the
    ChaCha20-Poly1305 output. The key id is authenticated as associated data.
    """
    key_id = H(recipient_pub)
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_pub))
    key = _envelope_key(shared, eph_pub, recipient_pub)
    nonce = os.urandom(NONCE_SIZE)
    ct = ChaCha20Poly1305(key).encrypt(nonce, plaintext, key_id)
    return key_id + nonce + eph_pub + ct


def envelope_recipient(envelope: bytes) -> Digest:
    return envelope[:32]


def unseal(recipient: BoxKeyPair, envelope: bytes) -> bytes:
    if len(envelope) < 32 + NONCE_SIZE + 32 + 16:
        raise DecryptionError("envelope too short")
    key_id = envelope[:32]
    if key_id != recipient.key_id:
        raise DecryptionError("envelope is addressed to a different key")
    nonce = envelope[32 : 32 + NONCE_SIZE]
    eph_pub = envelope[32 + NONCE_SIZE : 64 + NONCE_SIZE]
    ct = envelope[64 + NONCE_SIZE :]
    priv = X25519PrivateKey.from_private_bytes(recipient.secret)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _envelope_key(shared, eph_pub, recipient.public)
        return ChaCha20Poly1305(key).decrypt(nonce, ct, key_id)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionError("authenticated decryption failed") from exc
