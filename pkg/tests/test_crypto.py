"""Primitive-level tests, checked against an independent HMAC oracle.

The oracle below builds HMAC-SHA256 from raw sha256 calls (no stdlib hmac),
is validated against the RFC 4231 vectors, and is the source of every golden
constant frozen in this file.
"""

import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privatefind import crypto
from privatefind.crypto import AuthFailure, SealedBox, derive_subkeys, open_box, seal

_BLOCK = 64


def hmac_sha256_oracle(key: bytes, msg: bytes) -> bytes:
    """Independent HMAC-SHA256: the RFC 2104 construction written out."""
    if len(key) > _BLOCK:
        key = hashlib.sha256(key).digest()
    key = key + b"\x00" * (_BLOCK - len(key))
    ipad = bytes(b ^ 0x36 for b in key)
    opad = bytes(b ^ 0x5C for b in key)
    return hashlib.sha256(opad + hashlib.sha256(ipad + msg).digest()).digest()


RFC4231_VECTORS = [
    (b"\x0b" * 20, b"Hi There", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (
        b"Jefe",
        b"what do ya want for nothing?",
        "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843",
    ),
    (b"\xaa" * 20, b"\xdd" * 50, "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
    (
        b"\xaa" * 131,
        b"Test Using Larger Than Block-Size Key - Hash Key First",
        "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
    ),
]


@pytest.mark.parametrize("key,msg,expected", RFC4231_VECTORS)
def test_oracle_matches_rfc4231(key, msg, expected):
    assert hmac_sha256_oracle(key, msg).hex() == expected


# Computed once with hmac_sha256_oracle and frozen.
GOLDEN_ZERO_RATCHET = "33ad0a1c607ec03b09e6cd9893680ce210adf300aa1f2660e1b22e10f170f92a"
GOLDEN_ENC_SUBKEY_01 = "d8ce11f04678a392d3ebf3264a532d4714f8f601ee074a7ad53b08bf25a90be5"
GOLDEN_MAC_SUBKEY_01 = "03a58c11a330eacac1cacc51570d05f7e9fea57986f131c7d71296d8658fd12d"
GOLDEN_CHAIN_5 = [
    "62215de7bddcea7e2c4047ff6bb94f8d18262fc8b3f3648134bb7d44158ff84d",
    "8535923b792fae7e69db0a4d5e55b146ac0b0fe73789ff6ec5301ba23d9015f4",
    "3c8456ab51e09c90f916c30c171abcd9aa7c94e6dee812682e3b2acb31e0ef40",
    "0d4c19b7c066e3eca4180c1b8dbef50dbb265d224f16835c1d265e7d32516ba0",
    "6c584f0aa88d2d691f3d52ea54418caca1c41a7d447cd30212be0a7645e7cb6d",
]


class TestRatchet:
    def test_zero_golden(self):
        assert crypto.ratchet_first(b"\x00" * 32, b"\x00" * 32).hex() == GOLDEN_ZERO_RATCHET

    def test_deterministic(self):
        key, ident = b"\x07" * 32, b"\x3c" * 32
        assert crypto.ratchet_first(key, ident) == crypto.ratchet_first(key, ident)
        assert crypto.ratchet_next(key, ident) == crypto.ratchet_next(key, ident)

    def test_distinct_inputs_distinct_outputs(self):
        key = b"\x42" * 32
        a = crypto.ratchet_first(key, b"\x01" * 32)
        b = crypto.ratchet_first(key, b"\x02" * 32)
        assert a != b

    def test_chain_five_golden(self):
        key = bytes(range(32))
        ident = bytes(range(32, 64))
        got = crypto.ratchet_first(key, ident)
        chain = [got.hex()]
        for _ in range(4):
            got = crypto.ratchet_next(key, got)
            chain.append(got.hex())
        assert chain == GOLDEN_CHAIN_5

    def test_chain_matches_oracle(self):
        rng = random.Random(99)
        for _ in range(20):
            key = rng.randbytes(32)
            ident = rng.randbytes(32)
            ours = crypto.ratchet_first(key, ident)
            theirs = hmac_sha256_oracle(key, ident)
            for _ in range(100):
                assert ours == theirs
                ours = crypto.ratchet_next(key, ours)
                theirs = hmac_sha256_oracle(key, theirs)

    def test_chains_diverge_under_different_keys(self):
        ident = b"\x11" * 32
        a = crypto.ratchet_first(b"\x01" * 32, ident)
        b = crypto.ratchet_first(b"\x02" * 32, ident)
        assert a != b

    def test_ratchet_at(self):
        key, ident = b"\x05" * 32, b"\x06" * 32
        want = crypto.ratchet_first(key, ident)
        for epoch in range(4):
            assert crypto.ratchet_at(key, ident, epoch) == want
            want = crypto.ratchet_next(key, want)

    def test_rejects_bad_lengths(self):
        with pytest.raises(ValueError):
            crypto.ratchet_first(b"\x00" * 31, b"\x00" * 32)
        with pytest.raises(ValueError):
            crypto.ratchet_next(b"\x00" * 32, b"\x00" * 16)


class TestSubkeys:
    def test_golden_pair(self):
        enc, mac = derive_subkeys(b"\x01" * 32)
        assert enc.hex() == GOLDEN_ENC_SUBKEY_01
        assert mac.hex() == GOLDEN_MAC_SUBKEY_01

    def test_deterministic_and_distinct(self):
        key = b"\xde" * 32
        first = derive_subkeys(key)
        second = derive_subkeys(key)
        assert first == second
        assert first[0] != first[1]

    def test_matches_oracle(self):
        key = b"\x2a" * 32
        enc, mac = derive_subkeys(key)
        assert enc == hmac_sha256_oracle(key, b"PF-enc")
        assert mac == hmac_sha256_oracle(key, b"PF-mac")


class TestSealOpen:
    def test_round_trip(self):
        key = b"\x33" * 32
        box = seal(key, b"hello finder")
        assert open_box(key, box) == b"hello finder"

    def test_twelve_byte_plaintext_is_sixty_on_wire(self):
        box = seal(b"\x01" * 32, b"\x00" * 12)
        assert len(box.to_bytes()) == 60
        assert len(box) == 60

    def test_fresh_nonces(self):
        key = b"\x44" * 32
        a = seal(key, b"same plaintext")
        b = seal(key, b"same plaintext")
        assert a.nonce != b.nonce
        assert a.ciphertext != b.ciphertext

    def test_empty_plaintext_rejected(self):
        with pytest.raises(ValueError):
            seal(b"\x00" * 32, b"")

    def test_ciphertext_never_equals_plaintext(self):
        key = b"\x55" * 32
        plaintext = b"a known location payload"
        box = seal(key, plaintext)
        assert box.ciphertext != plaintext

    @pytest.mark.parametrize("region", ["nonce", "ciphertext", "tag"])
    def test_single_bit_flip_rejected(self, region):
        key = b"\x66" * 32
        box = seal(key, b"\xab" * 40)
        raw = bytearray(getattr(box, region))
        for bit in (0, 3, len(raw) * 8 - 1):
            corrupted = bytearray(raw)
            corrupted[bit // 8] ^= 1 << (bit % 8)
            mangled = SealedBox(
                nonce=bytes(corrupted) if region == "nonce" else box.nonce,
                ciphertext=bytes(corrupted) if region == "ciphertext" else box.ciphertext,
                tag=bytes(corrupted) if region == "tag" else box.tag,
            )
            with pytest.raises(AuthFailure):
                open_box(key, mangled)

    def test_wrong_key_rejected(self):
        box = seal(b"\x01" * 32, b"secret")
        with pytest.raises(AuthFailure):
            open_box(b"\x02" * 32, box)

    def test_key_role_separation(self):
        e2e_key, mf_key = b"\x0a" * 32, b"\x0b" * 32
        box = seal(e2e_key, b"role confusion test")
        with pytest.raises(AuthFailure):
            open_box(mf_key, box)
        box = seal(mf_key, b"role confusion test")
        with pytest.raises(AuthFailure):
            open_box(e2e_key, box)

    def test_wire_round_trip(self):
        box = seal(b"\x77" * 32, b"\x10" * 25)
        again = SealedBox.from_bytes(box.to_bytes())
        assert again == box

    def test_from_bytes_rejects_short_input(self):
        with pytest.raises(ValueError):
            SealedBox.from_bytes(b"\x00" * 48)

    def test_deterministic_rng_gives_deterministic_nonce(self):
        key = b"\x20" * 32
        a = seal(key, b"payload", rng=random.Random(5))
        b = seal(key, b"payload", rng=random.Random(5))
        assert a == b


class TestProperties:
    @given(plaintext=st.binary(min_size=1, max_size=1024))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_any_plaintext(self, plaintext):
        key = b"\x5a" * 32
        assert open_box(key, seal(key, plaintext)) == plaintext

    @given(
        plaintext=st.binary(min_size=1, max_size=256),
        bit=st.integers(min_value=0, max_value=10_000),
    )
    @settings(max_examples=50, deadline=None)
    def test_any_corruption_rejected(self, plaintext, bit):
        key = b"\xc3" * 32
        raw = bytearray(seal(key, plaintext).to_bytes())
        bit %= len(raw) * 8
        raw[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthFailure):
            open_box(key, SealedBox.from_bytes(bytes(raw)))

    @given(key=st.binary(min_size=32, max_size=32))
    @settings(max_examples=30, deadline=None)
    def test_subkeys_always_differ(self, key):
        enc, mac = derive_subkeys(key)
        assert enc != mac
