"""Lossless entropy layer: uniform quantizer, canonical Huffman, bit packing.

All encode/decode pairs are exact inverses. The bitstream is MSB-first
within bytes; every serialized stream carries its exact bit length so
trailing byte padding is unambiguous.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodingError, EncodingError, InvalidSpecError

# Symbols are signed bin indices; the on-disk codebook stores them as i32.
_SYMBOL_MIN = -(2**31)
_SYMBOL_MAX = 2**31 - 1


# ---------------------------------------------------------------------------
# Uniform scalar quantizer
# ---------------------------------------------------------------------------

def quantize(values: np.ndarray, d: float) -> np.ndarray:
    """Map values to integer bin indices with bin size ``d``.

    index = round(v / d) with ties rounded half-to-even, so the dequantized
    value index*d is the center of the bin and the error is at most d/2.
    """
    if d <= 0:
        raise InvalidSpecError(f"bin size must be positive, got {d}")
    values = np.asarray(values, dtype=np.float64)
    if values.size and not np.all(np.isfinite(values)):
        raise InvalidSpecError("cannot quantize non-finite values")
    return np.rint(values / d).astype(np.int64)


def dequantize(indices: np.ndarray, d: float) -> np.ndarray:
    """Inverse of :func:`quantize`: bin center index*d."""
    if d <= 0:
        raise InvalidSpecError(f"bin size must be positive, got {d}")
    return np.asarray(indices, dtype=np.float64) * d


# ---------------------------------------------------------------------------
# Bit-level containers
# ---------------------------------------------------------------------------

@dataclass
class BitStream:
    """Packed bits with an explicit bit length (MSB-first within bytes)."""

    data: bytes = b""
    bit_length: int = 0

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise DecodingError("bit length exceeds available bytes")

    @property
    def padding_bits(self) -> int:
        return 8 * len(self.data) - self.bit_length

    def to_bytes(self) -> bytes:
        """Self-delimiting serialization: u64 bit length, then payload."""
        return struct.pack("<Q", self.bit_length) + self.data

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0) -> tuple["BitStream", int]:
        if len(raw) - offset < 8:
            raise DecodingError("truncated bitstream header")
        (bit_length,) = struct.unpack_from("<Q", raw, offset)
        nbytes = (bit_length + 7) // 8
        start = offset + 8
        if len(raw) - start < nbytes:
            raise DecodingError("truncated bitstream payload")
        return cls(raw[start:start + nbytes], bit_length), start + nbytes


class BitWriter:
    """Accumulates bits MSB-first and yields a :class:`BitStream`."""

    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0
        self._total = 0

    def write(self, code: int, length: int) -> None:
        if length < 0 or (length < code.bit_length()):
            raise EncodingError(f"code {code} does not fit in {length} bits")
        self._total += length
        acc, nacc = self._acc, self._nacc
        for i in range(length - 1, -1, -1):
            acc = (acc << 1) | ((code >> i) & 1)
            nacc += 1
            if nacc == 8:
                self._buf.append(acc)
                acc, nacc = 0, 0
        self._acc, self._nacc = acc, nacc

    def write_uint(self, value: int, bits: int) -> None:
        if value < 0 or value >= (1 << bits):
            raise EncodingError(f"value {value} does not fit in {bits} bits")
        self.write(value, bits)

    def finish(self) -> BitStream:
        data = bytes(self._buf)
        if self._nacc:
            data += bytes([self._acc << (8 - self._nacc)])
        return BitStream(data, self._total)


class BitReader:
    """Reads bits MSB-first from a :class:`BitStream`; overruns raise."""

    def __init__(self, stream: BitStream):
        self._data = stream.data
        self._bit_length = stream.bit_length
        self._pos = 0

    @property
    def position(self) -> int:
        return self._pos

    def read_bit(self) -> int:
        if self._pos >= self._bit_length:
            raise DecodingError("read past end of bitstream")
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit

    def read_uint(self, bits: int) -> int:
        value = 0
        for _ in range(bits):
            value = (value << 1) | self.read_bit()
        return value


# ---------------------------------------------------------------------------
# Canonical Huffman coding
# ---------------------------------------------------------------------------

@dataclass
class Codebook:
    """Canonical Huffman code: reconstructible from (symbol, length) pairs.

    Codes are assigned in (length, symbol) order, so two builds from the
    same frequency table serialize byte-identically.
    """

    lengths: dict[int, int]
    codes: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.codes:
            self.codes = _canonical_codes(self.lengths)

    @property
    def max_length(self) -> int:
        return max(self.lengths.values())

    def kraft_sum(self) -> float:
        return sum(2.0 ** -l for l in self.lengths.values())

    def serialize(self) -> bytes:
        items = sorted(self.lengths.items(), key=lambda kv: (kv[1], kv[0]))
        out = [struct.pack("<I", len(items))]
        for sym, length in items:
            if not _SYMBOL_MIN <= sym <= _SYMBOL_MAX:
                raise EncodingError(f"symbol {sym} outside i32 range")
            out.append(struct.pack("<iB", sym, length))
        return b"".join(out)

    @classmethod
    def deserialize(cls, raw: bytes, offset: int = 0) -> tuple["Codebook", int]:
        if len(raw) - offset < 4:
            raise DecodingError("truncated codebook header")
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if len(raw) - offset < 5 * n:
            raise DecodingError("truncated codebook table")
        lengths = {}
        for _ in range(n):
            sym, length = struct.unpack_from("<iB", raw, offset)
            offset += 5
            lengths[sym] = length
        return cls(lengths), offset


def _canonical_codes(lengths: dict[int, int]) -> dict[int, int]:
    codes = {}
    code = 0
    prev_len = 0
    for sym in sorted(lengths, key=lambda s: (lengths[s], s)):
        length = lengths[sym]
        code <<= length - prev_len
        codes[sym] = code
        code += 1
        prev_len = length
    return codes


def huffman_build(frequencies: dict[int, int]) -> Codebook:
    """Build a canonical Huffman code from symbol frequencies.

    Codeword lengths minimize the expected length over prefix codes. A
    single-symbol alphabet gets a length-1 code by convention.
    """
    freqs = {s: f for s, f in frequencies.items() if f > 0}
    if not freqs:
        raise InvalidSpecError("empty frequency table")
    if len(freqs) == 1:
        return Codebook({next(iter(freqs)): 1})

    # Heap entries carry an insertion counter so ties never compare nodes;
    # seeding in sorted symbol order keeps the tree deterministic.
    heap = []
    counter = 0
    for sym in sorted(freqs):
        heap.append((freqs[sym], counter, [sym]))
        counter += 1
    heapq.heapify(heap)
    depth = {s: 0 for s in freqs}
    while len(heap) > 1:
        f1, _, syms1 = heapq.heappop(heap)
        f2, _, syms2 = heapq.heappop(heap)
        for s in syms1 + syms2:
            depth[s] += 1
        heapq.heappush(heap, (f1 + f2, counter, syms1 + syms2))
        counter += 1
    return Codebook(depth)


def encode_stream(symbols, codebook: Codebook) -> BitStream:
    """Huffman-encode a symbol sequence; payload length is sum of code lengths."""
    writer = BitWriter()
    codes, lengths = codebook.codes, codebook.lengths
    for sym in symbols:
        try:
            writer.write(codes[sym], lengths[sym])
        except KeyError:
            raise EncodingError(f"symbol {sym} not in codebook") from None
    return writer.finish()


def decode_stream(stream: BitStream, codebook: Codebook, count: int) -> list[int]:
    """Decode exactly ``count`` symbols; truncation raises DecodingError."""
    by_length: dict[int, dict[int, int]] = {}
    for sym, length in codebook.lengths.items():
        by_length.setdefault(length, {})[codebook.codes[sym]] = sym
    max_len = codebook.max_length
    reader = BitReader(stream)
    out = []
    while len(out) < count:
        code = 0
        length = 0
        while True:
            code = (code << 1) | reader.read_bit()
            length += 1
            table = by_length.get(length)
            if table is not None and code in table:
                out.append(table[code])
                break
            if length > max_len:
                raise DecodingError("no codeword matches bit pattern")
    return out


# ---------------------------------------------------------------------------
# Basis index coding (shortest prefix of the selection bitmap)
# ---------------------------------------------------------------------------

INDEX_LENGTH_BITS = 16  # field width for the stored prefix length


def encode_indices(indices, dimension: int, writer: BitWriter) -> None:
    """Write a basis index set as (length, bitmap-prefix).

    The bitmap covers [0, max(index)] only: trailing zeros past the last
    selected index are never stored. An empty set stores length 0.
    """
    idx = sorted(set(int(i) for i in indices))
    if idx and (idx[0] < 0 or idx[-1] >= dimension):
        raise InvalidSpecError(f"index out of range [0, {dimension})")
    if dimension >= (1 << INDEX_LENGTH_BITS):
        raise InvalidSpecError("dimension too large for index length field")
    if not idx:
        writer.write_uint(0, INDEX_LENGTH_BITS)
        return
    prefix_len = idx[-1] + 1
    writer.write_uint(prefix_len, INDEX_LENGTH_BITS)
    chosen = set(idx)
    for pos in range(prefix_len):
        writer.write_uint(1 if pos in chosen else 0, 1)


def decode_indices(reader: BitReader) -> list[int]:
    """Inverse of :func:`encode_indices`; returns ascending indices."""
    prefix_len = reader.read_uint(INDEX_LENGTH_BITS)
    return [pos for pos in range(prefix_len) if reader.read_uint(1)]
