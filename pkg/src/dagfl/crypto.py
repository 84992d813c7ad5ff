"""Hashing, user identities, signatures and a signature-based VRF.

Keys are Ed25519 and derived deterministically from the simulation seed, so a
whole run can be replayed byte-for-byte. The VRF output is the SHA-256 of the
(deterministic) Ed25519 signature over the seed; the signature itself is the
proof, so verification needs only the public key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
VRF_DOMAIN = b"dagfl/vrf/v1"
HASH_RING = 1 << 256


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True, order=True)
class UserId:
    """Public identity of a user: raw public key plus a display index."""

    index: int
    public_key: bytes = field(repr=False)

    @property
    def short(self) -> str:
        return f"U{self.index}"

    def hex(self) -> str:
        return self.public_key.hex()


@dataclass(frozen=True)
class VrfOutput:
    value: bytes  # 32-byte hash
    proof: bytes

    def as_int(self) -> int:
        return int.from_bytes(self.value, "big")

    def as_fraction(self) -> float:
        return self.as_int() / HASH_RING


class KeyPair:
    def __init__(self, index: int, secret: bytes):
        if len(secret) != 32:
            raise ValueError("secret must be 32 bytes")
        self._private = Ed25519PrivateKey.from_private_bytes(secret)
        public = self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self.user = UserId(index=index, public_key=public)

    @classmethod
    def derive(cls, seed: int, index: int) -> "KeyPair":
        secret = hash_bytes(b"dagfl/key/" + seed.to_bytes(8, "big", signed=True) + index.to_bytes(8, "big"))
        return cls(index, secret)

    def sign(self, msg: bytes) -> bytes:
        return self._private.sign(msg)

    def vrf(self, seed: bytes) -> VrfOutput:
        return vrf_eval(self, seed)


def sign(key: KeyPair, msg: bytes) -> bytes:
    return key.sign(msg)


def verify(user: UserId, msg: bytes, sig: bytes) -> bool:
    """Signature check. Malformed keys or signatures yield False, never raise."""
    try:
        Ed25519PublicKey.from_public_bytes(user.public_key).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def vrf_eval(key: KeyPair, seed: bytes) -> VrfOutput:
    proof = key.sign(VRF_DOMAIN + seed)
    return VrfOutput(value=hash_bytes(proof), proof=proof)


def vrf_verify(user: UserId, seed: bytes, output: VrfOutput) -> bool:
    if not verify(user, VRF_DOMAIN + seed, output.proof):
        return False
    return hash_bytes(output.proof) == output.value


class Keyring:
    """Deterministic keypairs for every simulated user, indexed by position."""

    def __init__(self, seed: int, count: int):
        self.seed = seed
        self._keys = [KeyPair.derive(seed, i) for i in range(count)]
        self._by_pub = {k.user.public_key: k for k in self._keys}

    def __len__(self) -> int:
        return len(self._keys)

    def __getitem__(self, index: int) -> KeyPair:
        return self._keys[index]

    def key_for(self, user: UserId) -> KeyPair:
        return self._by_pub[user.public_key]

    @property
    def users(self) -> list[UserId]:
        return [k.user for k in self._keys]

    def add(self) -> KeyPair:
        key = KeyPair.derive(self.seed, len(self._keys))
        self._keys.append(key)
        self._by_pub[key.user.public_key] = key
        return key
