"""Bit-packed ±1 hash codes and exact Hamming arithmetic.

Bit ``b`` of a K-bit code lives in word ``b // 64`` at position ``b % 64``.
A set bit encodes +1, a clear bit encodes -1. Padding bits above ``K - 1``
are always zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_BITS = 4096
CODE_MAGIC = b"HSGC"
CODE_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount_swar(words: np.ndarray) -> np.ndarray:
    """Portable per-word population count (classic SWAR reduction)."""
    x = np.asarray(words, dtype=np.uint64)
    x = x - ((x >> np.uint64(1)) & _M1)
    x = (x & _M2) + ((x >> np.uint64(2)) & _M2)
    x = (x + (x >> np.uint64(4))) & _M4
    return ((x * _H01) >> np.uint64(56)).astype(np.uint8)


def _popcount_native(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint64))


# chosen once at import; both paths are checked bit-identical in the tests
if hasattr(np, "bitwise_count"):
    popcount = _popcount_native
    POPCOUNT_PATH = "native"
else:  # pragma: no cover - numpy < 2.0
    popcount = popcount_swar
    POPCOUNT_PATH = "swar"


def n_words(K: int) -> int:
    return (K + 63) // 64


def validate_bits(K: int) -> None:
    if not isinstance(K, (int, np.integer)) or K <= 0 or K % 8 or K > MAX_BITS:
        raise ValueError(f"K must be a positive multiple of 8 no larger than {MAX_BITS}, got {K!r}")


def _pad_mask(K: int) -> np.ndarray:
    mask = np.full(n_words(K), np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = K % 64
    if rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    return mask


@dataclass(frozen=True, eq=False)
class HashCode:
    """A single K-bit code stored as ``ceil(K/64)`` little-endian words."""

    words: np.ndarray
    K: int

    def __post_init__(self):
        validate_bits(self.K)
        w = np.ascontiguousarray(self.words, dtype=np.uint64).reshape(-1)
        if w.shape[0] != n_words(self.K):
            raise ValueError(f"expected {n_words(self.K)} words for K={self.K}, got {w.shape[0]}")
        w = w & _pad_mask(self.K)
        w.flags.writeable = False
        object.__setattr__(self, "words", w)

    def __eq__(self, other):
        if not isinstance(other, HashCode):
            return NotImplemented
        return self.K == other.K and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.K, self.words.tobytes()))

    def __repr__(self):
        return f"HashCode(K={self.K}, hex={to_hex(self)})"

    def unpack(self) -> np.ndarray:
        return unpack(self)


@dataclass(frozen=True, eq=False)
class CodeMatrix:
    """Row-major packed codes for a node set; row index is the dense node id."""

    words: np.ndarray
    K: int

    def __post_init__(self):
        validate_bits(self.K)
        w = np.ascontiguousarray(self.words, dtype=np.uint64)
        if w.ndim != 2 or w.shape[1] != n_words(self.K):
            raise ValueError(f"code matrix must have shape (n, {n_words(self.K)}), got {w.shape}")
        w = w & _pad_mask(self.K)[None, :]
        w.flags.writeable = False
        object.__setattr__(self, "words", w)

    def __len__(self):
        return self.words.shape[0]

    def __eq__(self, other):
        if not isinstance(other, CodeMatrix):
            return NotImplemented
        return self.K == other.K and np.array_equal(self.words, other.words)

    @property
    def node_count(self) -> int:
        return self.words.shape[0]

    def __getitem__(self, row: int) -> HashCode:
        return HashCode(self.words[row], self.K)

    def unpack(self) -> np.ndarray:
        """All rows as an ``(n, K)`` int8 array of ±1."""
        return unpack_rows(self.words, self.K)

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "CodeMatrix":
        signs = np.asarray(signs)
        if signs.ndim != 2:
            raise ValueError("expected a 2-d array of ±1 values")
        return cls(pack_rows(signs), signs.shape[1])


def pack_rows(signs: np.ndarray) -> np.ndarray:
    """Pack an ``(n, K)`` array of ±1 into ``(n, ceil(K/64))`` uint64 words."""
    signs = np.asarray(signs)
    n, K = signs.shape
    validate_bits(K)
    ok = (signs == 1) | (signs == -1)
    if not ok.all():
        bad = np.argwhere(~ok)[0]
        raise ValueError(f"code entries must be +1 or -1; found {signs[tuple(bad)]!r} at {tuple(bad)}")
    W = n_words(K)
    if n == 0:
        return np.zeros((0, W), dtype=np.uint64)
    bits = np.zeros((n, W * 64), dtype=np.uint8)
    bits[:, :K] = signs == 1
    # little bit order within each byte, little-endian bytes within each word
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64).reshape(n, W)


def unpack_rows(words: np.ndarray, K: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    n = words.shape[0]
    if n == 0:
        return np.zeros((0, K), dtype=np.int8)
    bits = np.unpackbits(words.view(np.uint8).reshape(n, -1), axis=1, bitorder="little")[:, :K]
    return bits.astype(np.int8) * 2 - 1


def pack(bits) -> HashCode:
    """Pack a ±1 vector into a :class:`HashCode`."""
    bits = np.asarray(bits).reshape(1, -1)
    return HashCode(pack_rows(bits)[0], bits.shape[1])


def unpack(code: HashCode) -> np.ndarray:
    return unpack_rows(code.words[None, :], code.K)[0]


def _check_same_bits(a, b):
    if a.K != b.K:
        raise ValueError(f"code lengths differ: {a.K} vs {b.K}")


def hamming_distance(a: HashCode, b: HashCode) -> int:
    _check_same_bits(a, b)
    return int(popcount(a.words ^ b.words).sum())


def similarity_score(a: HashCode, b: HashCode) -> int:
    """Inner product of the two ±1 vectors, ``K - 2 * hamming_distance``."""
    return a.K - 2 * hamming_distance(a, b)


def hamming_distances(codes: CodeMatrix, query: HashCode) -> np.ndarray:
    """Distance from ``query`` to every row of ``codes``."""
    _check_same_bits(codes, query)
    return popcount(codes.words ^ query.words[None, :]).sum(axis=1, dtype=np.int64)


def similarity_scores(codes: CodeMatrix, query: HashCode) -> np.ndarray:
    return codes.K - 2 * hamming_distances(codes, query)


def to_hex(code: HashCode) -> str:
    """Hex of the first K/8 little-endian bytes of the packed words."""
    return code.words.astype("<u8").tobytes()[: code.K // 8].hex()


def from_hex(text: str, K: int) -> HashCode:
    validate_bits(K)
    raw = bytes.fromhex(text.strip())
    if len(raw) != K // 8:
        raise ValueError(f"hex code has {len(raw)} bytes, expected {K // 8} for K={K}")
    raw = raw + bytes(n_words(K) * 8 - len(raw))
    return HashCode(np.frombuffer(raw, dtype="<u8").astype(np.uint64), K)


def write_codes(path, codes: CodeMatrix) -> None:
    """Write codes in the ``HSGC`` v1 binary layout."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CODE_MAGIC, CODE_VERSION, codes.K, codes.node_count))
        fh.write(codes.words.astype("<u8", copy=False).tobytes())


def read_codes(path) -> CodeMatrix:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated code file header")
    magic, version, K, count = _HEADER.unpack_from(data)
    if magic != CODE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {CODE_MAGIC!r}")
    if version != CODE_VERSION:
        raise ValueError(f"{path}: unsupported code file version {version}")
    W = n_words(K)
    expected = _HEADER.size + count * W * 8
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    words = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).reshape(count, W)
    return CodeMatrix(words.astype(np.uint64), K)


def code_file_size(K: int, node_count: int) -> int:
    return _HEADER.size + node_count * n_words(K) * 8
