"""Secret keys and the deterministic keyed permutations they derive.

The key -> permutation mapping is fixed and platform independent so that
permutations can be regenerated bit-identically anywhere from the key alone:

    digest   = SHA-256(b"keyvote.permutation.v1" || key bytes || uint64_be(length))
    k0, k1   = digest[0:4], digest[4:8]    as little-endian uint32  (Philox key)
    t0, t1   = digest[8:12], digest[12:16] as little-endian uint32  (counter tweak)
    block i  = Philox4x32-10(counter=(i mod 2^32, i >> 32, t0, t1), key=(k0, k1))
    stream   = block 0 words, block 1 words, ...   (4 uint32 words per block)

Philox4x32-10 is a published counter-based generator; because it is counter
based, whole stretches of the stream are computed in one vectorized shot.
The permutation itself is produced by a decreasing-index Fisher-Yates shuffle
whose bounded draws use bit-mask rejection, so the shuffle is exactly unbiased
and consumes stream words strictly in order.

Permutations are stored 1-based: a mapping ``v`` of length L satisfies
``v[k] in {1..L}`` with every value appearing exactly once.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

_DERIVATION_TAG = b"keyvote.permutation.v1"

# Philox4x32 round constants (multipliers and Weyl key increments).
_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D7C)
_PHILOX_W0 = 0x9E3779B9
_PHILOX_W1 = 0xBB67AE85
_PHILOX_ROUNDS = 10

MIN_KEY_BYTES = 16


@dataclass(frozen=True)
class SecretKey:
    """An opaque secret key; at least 16 bytes of key material plus a display label."""

    data: bytes
    label: str = ""

    def __post_init__(self):
        if not isinstance(self.data, (bytes, bytearray)):
            raise ValueError("key material must be bytes")
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) < MIN_KEY_BYTES:
            raise ValueError(
                f"key must hold at least {MIN_KEY_BYTES} bytes, got {len(self.data)}"
            )

    @classmethod
    def from_hex(cls, hex_string, label=""):
        try:
            raw = bytes.fromhex(hex_string.strip())
        except ValueError as exc:
            raise ValueError(f"invalid hex key string: {exc}") from exc
        return cls(raw, label=label)

    @property
    def hex(self):
        return self.data.hex()

    def __repr__(self):
        tag = self.label or self.data[:2].hex() + "..."
        return f"SecretKey({tag!r}, {len(self.data)} bytes)"


@dataclass(frozen=True)
class Permutation:
    """A bijection on {1..L}, stored as the 1-based mapping vector."""

    mapping: tuple

    def __post_init__(self):
        mapping = tuple(int(v) for v in self.mapping)
        object.__setattr__(self, "mapping", mapping)
        n = len(mapping)
        if n == 0:
            raise ValueError("permutation must have length >= 1")
        seen = bytearray(n)
        for v in mapping:
            if not 1 <= v <= n:
                raise ValueError(f"permutation value {v} out of range 1..{n}")
            if seen[v - 1]:
                raise ValueError(f"permutation repeats value {v}; not a bijection")
            seen[v - 1] = 1

    def __len__(self):
        return len(self.mapping)

    def __iter__(self):
        return iter(self.mapping)

    def zero_based(self):
        """The mapping as a 0-based numpy index array (for fancy indexing)."""
        return np.asarray(self.mapping, dtype=np.int64) - 1

    def invert(self):
        return invert_permutation(self)

    @classmethod
    def identity(cls, length):
        return cls(tuple(range(1, length + 1)))


def _philox_blocks(counters, key):
    """Run Philox4x32-10 over an array of block indices.

    counters: 1-d uint64 array of block indices.
    key: tuple of four uint32 words (k0, k1, t0, t1); t0/t1 sit in the counter.
    Returns an (n, 4) uint32 array of output words.
    """
    n = counters.shape[0]
    mask32 = np.uint64(0xFFFFFFFF)
    c0 = (counters & mask32).astype(np.uint64)
    c1 = (counters >> np.uint64(32)).astype(np.uint64)
    c2 = np.full(n, key[2], dtype=np.uint64)
    c3 = np.full(n, key[3], dtype=np.uint64)
    k0, k1 = int(key[0]), int(key[1])
    for r in range(_PHILOX_ROUNDS):
        if r:
            k0 = (k0 + _PHILOX_W0) & 0xFFFFFFFF
            k1 = (k1 + _PHILOX_W1) & 0xFFFFFFFF
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        lo0, hi0 = p0 & mask32, p0 >> np.uint64(32)
        lo1, hi1 = p1 & mask32, p1 >> np.uint64(32)
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
    out = np.empty((n, 4), dtype=np.uint32)
    out[:, 0] = c0.astype(np.uint32)
    out[:, 1] = c1.astype(np.uint32)
    out[:, 2] = c2.astype(np.uint32)
    out[:, 3] = c3.astype(np.uint32)
    return out


def _philox_single(counter_words, key_words):
    """One Philox4x32-10 block on explicit counter words (used by the known-answer tests)."""
    mask32 = np.uint64(0xFFFFFFFF)
    c = [np.uint64(w) for w in counter_words]
    k0, k1 = int(key_words[0]), int(key_words[1])
    for r in range(_PHILOX_ROUNDS):
        if r:
            k0 = (k0 + _PHILOX_W0) & 0xFFFFFFFF
            k1 = (k1 + _PHILOX_W1) & 0xFFFFFFFF
        p0 = _PHILOX_M0 * c[0]
        p1 = _PHILOX_M1 * c[2]
        c = [
            (p1 >> np.uint64(32)) ^ c[1] ^ np.uint64(k0),
            p1 & mask32,
            (p0 >> np.uint64(32)) ^ c[3] ^ np.uint64(k1),
            p0 & mask32,
        ]
    return tuple(int(w) for w in c)


class _KeyedStream:
    """Sequential uint32 stream keyed by (key bytes, length), buffered in blocks."""

    def __init__(self, key_bytes, length):
        digest = hashlib.sha256(
            _DERIVATION_TAG + key_bytes + length.to_bytes(8, "big")
        ).digest()
        self._key = tuple(
            int.from_bytes(digest[4 * i : 4 * i + 4], "little") for i in range(4)
        )
        self._next_block = 0
        self._buf = []
        self._pos = 0

    def _refill(self, min_words):
        n_blocks = max((min_words + 3) // 4, 256)
        counters = np.arange(
            self._next_block, self._next_block + n_blocks, dtype=np.uint64
        )
        self._next_block += n_blocks
        self._buf = _philox_blocks(counters, self._key).reshape(-1).tolist()
        self._pos = 0

    def words(self, n):
        """The next n raw uint32 words, in stream order."""
        out = []
        while n:
            if self._pos == len(self._buf):
                self._refill(n)
            take = min(n, len(self._buf) - self._pos)
            out.extend(self._buf[self._pos : self._pos + take])
            self._pos += take
            n -= take
        return out


def generate_permutation(key, length):
    """Derive the keyed random permutation of {1..length}.

    Deterministic in (key bytes, length); uniform over all permutations for
    uniform stream words. Raises ValueError for length < 1.
    """
    if not isinstance(key, SecretKey):
        raise ValueError(f"expected a SecretKey, got {type(key).__name__}")
    if not isinstance(length, (int, np.integer)) or length < 1:
        raise ValueError(f"permutation length must be >= 1, got {length!r}")
    length = int(length)
    if length == 1:
        return Permutation((1,))

    stream = _KeyedStream(key.data, length)
    buf = stream.words(2 * length)
    pos = 0
    n_buf = len(buf)
    perm = list(range(1, length + 1))
    for i in range(length - 1, 0, -1):
        bound = i + 1
        mask = (1 << i.bit_length()) - 1
        while True:
            if pos == n_buf:
                buf = stream.words(length)
                n_buf = len(buf)
                pos = 0
            r = buf[pos] & mask
            pos += 1
            if r < bound:
                break
        perm[i], perm[r] = perm[r], perm[i]
    return Permutation(tuple(perm))


def invert_permutation(p):
    """The permutation q with q[p[k]] = k (1-based), i.e. the inverse bijection."""
    if not isinstance(p, Permutation):
        raise ValueError(f"expected a Permutation, got {type(p).__name__}")
    inv = [0] * len(p)
    for k, v in enumerate(p.mapping, start=1):
        inv[v - 1] = k
    return Permutation(tuple(inv))
