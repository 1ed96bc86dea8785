"""Simulated signatures, key registry and symmetric layering.

Nothing here is real public-key cryptography. Producers "sign" with an
HMAC over the canonical name and payload using a secret held in a global
registry; verification recomputes the HMAC. The symmetric transform is an
XOR keystream, reversible and key-dependent, which is all the overlay needs.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field

from .names import Name

DIGEST_SIZE = 32
KEY_ID_SIZE = 8


class CryptoError(Exception):
    pass


@dataclass(frozen=True, order=True, slots=True)
class KeyId:
    raw: bytes

    def __post_init__(self):
        if len(self.raw) != KEY_ID_SIZE:
            raise ValueError("KeyId must be 8 bytes")

    def hex(self) -> str:
        return self.raw.hex()

    def __str__(self) -> str:
        return self.raw.hex()


@dataclass(frozen=True, slots=True)
class Signature:
    key_id: KeyId
    digest: bytes

    def __str__(self) -> str:
        return f"{self.key_id.hex()}:{self.digest.hex()}"


class Verdict(enum.Enum):
    VALID = "valid"
    INVALID = "invalid"
    UNVERIFIABLE = "unverifiable"


@dataclass
class KeyRegistry:
    """Global directory of key material, standing in for a trusted third party."""

    secrets: dict = field(default_factory=dict)
    owners: dict = field(default_factory=dict)
    ephemeral: set = field(default_factory=set)

    def register(self, principal, rng) -> KeyId:
        while True:
            kid = KeyId(rng.randbytes(KEY_ID_SIZE))
            if kid not in self.secrets:
                break
        self.secrets[kid] = rng.randbytes(32)
        self.owners[kid] = principal
        return kid

    def __contains__(self, kid: KeyId) -> bool:
        return kid in self.secrets

    def owner(self, kid: KeyId):
        return self.owners.get(kid)

    def is_ephemeral(self, kid: KeyId) -> bool:
        return kid in self.ephemeral


def _digest(secret: bytes, name: Name, payload: bytes) -> bytes:
    msg = str(name).encode() + b"\x00" + payload
    return hmac.new(secret, msg, hashlib.sha256).digest()


def sign(registry: KeyRegistry, key: KeyId, name: Name, payload: bytes) -> Signature:
    try:
        secret = registry.secrets[key]
    except KeyError:
        raise CryptoError(f"unknown key {key}") from None
    return Signature(key, _digest(secret, name, payload))


def verify(registry: KeyRegistry, name: Name, payload: bytes, sig: Signature) -> Verdict:
    secret = registry.secrets.get(sig.key_id)
    if secret is None:
        return Verdict.UNVERIFIABLE
    if hmac.compare_digest(_digest(secret, name, payload), sig.digest):
        return Verdict.VALID
    return Verdict.INVALID


def ephemeral_key(registry: KeyRegistry, principal, rng) -> KeyId:
    kid = registry.register(principal, rng)
    registry.ephemeral.add(kid)
    return kid


def _keystream(key: bytes, n: int) -> bytes:
    return hashlib.shake_256(b"ccnsim-stream" + key).digest(n)


def sym_encrypt(key: bytes, plaintext: bytes) -> bytes:
    if not key:
        raise ValueError("empty key")
    if not plaintext:
        return b""
    ks = _keystream(key, len(plaintext))
    n = len(plaintext)
    return (int.from_bytes(plaintext, "big") ^ int.from_bytes(ks, "big")).to_bytes(n, "big")


def sym_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    # XOR keystream: the transform is its own inverse.
    return sym_encrypt(key, ciphertext)
