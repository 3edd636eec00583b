"""Symmetric primitives shared by every role.

Three things live here: the HMAC ratchet that turns a fixed identifier into
an epoch-rotating pseudonym, an encrypt-then-MAC box built from AES-128-CTR
plus HMAC-SHA256, and the labeled subkey derivation that keeps the cipher
and MAC keys apart even though callers hold a single 32-byte secret.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass
from typing import Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

KEY_LEN = 32
ID_LEN = 32
NONCE_LEN = 16
TAG_LEN = 32

# Sealing a plaintext of n bytes always yields 48 + n bytes on the wire.
BOX_OVERHEAD = NONCE_LEN + TAG_LEN

_ENC_LABEL = b"PF-enc"
_MAC_LABEL = b"PF-mac"


class AuthFailure(Exception):
    """Tag verification failed: the box was tampered with or the key is wrong."""


def _check_key(key: bytes) -> None:
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be {KEY_LEN} bytes, got {len(key)}")


def _check_identifier(ident: bytes) -> None:
    if len(ident) != ID_LEN:
        raise ValueError(f"identifier must be {ID_LEN} bytes, got {len(ident)}")


def new_secret_key(rng=None) -> bytes:
    """Fresh 32-byte secret. `rng` is any object with randbytes(n); defaults to the OS CSPRNG."""
    return rng.randbytes(KEY_LEN) if rng is not None else secrets.token_bytes(KEY_LEN)


def new_identifier(rng=None) -> bytes:
    return rng.randbytes(ID_LEN) if rng is not None else secrets.token_bytes(ID_LEN)


def hmac_sha256(key: bytes, msg: bytes) -> bytes:
    return hmac.new(key, msg, hashlib.sha256).digest()


def ratchet_first(e2e_key: bytes, id_init: bytes) -> bytes:
    """Epoch-0 pseudonym. Defined as HMAC(e2e_key, id_init) so the whole chain
    is reconstructible from exactly what the owner stores."""
    _check_key(e2e_key)
    _check_identifier(id_init)
    return hmac_sha256(e2e_key, id_init)


def ratchet_next(e2e_key: bytes, id_prev: bytes) -> bytes:
    """Advance the pseudonym chain one epoch."""
    _check_key(e2e_key)
    _check_identifier(id_prev)
    return hmac_sha256(e2e_key, id_prev)


def ratchet_at(e2e_key: bytes, id_init: bytes, epoch: int) -> bytes:
    """Pseudonym for a given epoch number (0 = first)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    ident = ratchet_first(e2e_key, id_init)
    for _ in range(epoch):
        ident = ratchet_next(e2e_key, ident)
    return ident


def derive_subkeys(key: bytes) -> tuple[bytes, bytes]:
    """(enc_subkey, mac_subkey) via labeled HMAC; one master key, two roles."""
    _check_key(key)
    return hmac_sha256(key, _ENC_LABEL), hmac_sha256(key, _MAC_LABEL)


@dataclass(frozen=True)
class SealedBox:
    """Encrypt-then-MAC container. Wire layout: nonce[16] || ciphertext || tag[32]."""

    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def __post_init__(self):
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        if len(self.tag) != TAG_LEN:
            raise ValueError(f"tag must be {TAG_LEN} bytes")
        if not self.ciphertext:
            raise ValueError("ciphertext must be non-empty")

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedBox":
        if len(raw) < BOX_OVERHEAD + 1:
            raise ValueError(f"sealed box must be at least {BOX_OVERHEAD + 1} bytes")
        return cls(
            nonce=raw[:NONCE_LEN],
            ciphertext=raw[NONCE_LEN:-TAG_LEN],
            tag=raw[-TAG_LEN:],
        )

    def __len__(self) -> int:
        return BOX_OVERHEAD + len(self.ciphertext)


def _aes_ctr(enc_subkey: bytes, nonce: bytes, data: bytes) -> bytes:
    # AES-128 with the first 16 bytes of the derived subkey; the random nonce
    # is the initial counter block.
    cipher = Cipher(algorithms.AES(enc_subkey[:16]), modes.CTR(nonce))
    enc = cipher.encryptor()
    return enc.update(data) + enc.finalize()


def seal(key: bytes, plaintext: bytes, rng=None) -> SealedBox:
    """Encrypt and authenticate `plaintext` under `key` with a fresh random nonce.

    The tag covers nonce || ciphertext, so any bit flip anywhere in the box
    is caught by `open_box`.
    """
    _check_key(key)
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    enc_subkey, mac_subkey = derive_subkeys(key)
    nonce = rng.randbytes(NONCE_LEN) if rng is not None else secrets.token_bytes(NONCE_LEN)
    ciphertext = _aes_ctr(enc_subkey, nonce, plaintext)
    tag = hmac_sha256(mac_subkey, nonce + ciphertext)
    return SealedBox(nonce=nonce, ciphertext=ciphertext, tag=tag)


def open_box(key: bytes, box: SealedBox) -> bytes:
    """Verify then decrypt. Raises AuthFailure before touching the ciphertext."""
    _check_key(key)
    enc_subkey, mac_subkey = derive_subkeys(key)
    expected = hmac_sha256(mac_subkey, box.nonce + box.ciphertext)
    if not hmac.compare_digest(expected, box.tag):
        raise AuthFailure("sealed box failed authentication")
    return _aes_ctr(enc_subkey, box.nonce, box.ciphertext)
