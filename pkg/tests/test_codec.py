"""Quantizer, bit I/O, canonical Huffman coding, and index-set coding."""

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gbatc.codec import (BitReader, BitStream, BitWriter, Codebook,
                         decode_indices, decode_stream, dequantize,
                         encode_indices, encode_stream, huffman_build,
                         quantize)
from gbatc.errors import DecodingError, EncodingError, InvalidSpecError


class TestQuantizer:
    def test_error_bounded_by_half_bin(self):
        rng = np.random.default_rng(0)
        for d in (1e-4, 3e-3, 0.5, 7.0):
            x = rng.uniform(-500, 500, size=200_000)
            err = np.abs(dequantize(quantize(x, d), d) - x)
            assert err.max() <= d / 2

    def test_half_to_even_ties(self):
        # bin centers at multiples of d; ties round to the even index
        d = 1.0
        x = np.array([0.5, 1.5, 2.5, -0.5, -1.5])
        np.testing.assert_array_equal(quantize(x, d), [0, 2, 2, 0, -2])

    def test_integer_output_dtype(self):
        q = quantize(np.array([0.3, -1.2]), 0.25)
        assert q.dtype == np.int64

    def test_rejects_nonpositive_bin(self):
        with pytest.raises(InvalidSpecError):
            quantize(np.zeros(3), 0.0)
        with pytest.raises(InvalidSpecError):
            dequantize(np.zeros(3, np.int64), -1.0)

    @given(st.floats(1e-6, 1e3), st.integers(0, 2 ** 31 - 1))
    def test_roundtrip_error_property(self, d, seed):
        x = np.random.default_rng(seed).normal(scale=10.0, size=64)
        err = np.abs(dequantize(quantize(x, d), d) - x)
        assert err.max() <= d / 2


class TestBitIO:
    @given(st.lists(st.integers(0, 1), max_size=200))
    def test_writer_reader_roundtrip(self, bits):
        w = BitWriter()
        for b in bits:
            w.write(b, 1)
        stream = w.finish()
        r = BitReader(stream)
        assert [r.read_bit() for _ in bits] == bits

    def test_msb_first_layout(self):
        w = BitWriter()
        for b in (1, 0, 1, 1, 0, 0, 0, 1, 1):
            w.write(b, 1)
        stream = w.finish()
        assert stream.bit_length == 9
        assert stream.data[0] == 0b10110001
        assert stream.data[1] == 0b10000000

    @given(st.lists(st.tuples(st.integers(0, 2 ** 32 - 1), st.integers(1, 32)),
                    max_size=40))
    def test_uint_roundtrip(self, fields):
        w = BitWriter()
        expect = []
        for value, width in fields:
            value %= 1 << width
            w.write_uint(value, width)
            expect.append((value, width))
        r = BitReader(w.finish())
        assert [(r.read_uint(wd), wd) for _, wd in expect] == expect

    def test_stream_framing_roundtrip(self):
        w = BitWriter()
        for b in (1, 1, 0, 1, 0):
            w.write(b, 1)
        stream = w.finish()
        raw = stream.to_bytes()
        back, offset = BitStream.from_bytes(raw, 0)
        assert offset == len(raw)
        assert back.bit_length == stream.bit_length
        assert back.data == stream.data

    def test_reader_overrun_raises(self):
        r = BitReader(BitWriter().finish())
        with pytest.raises(DecodingError):
            r.read_bit()


def exhaustive_optimal_cost(freqs: dict[int, int]) -> int:
    """Minimal total weighted length over all binary prefix codes.

    Enumerates every length assignment satisfying Kraft equality (complete
    codes), which contains an optimal code for any frequency set.
    """
    n = len(freqs)
    if n == 1:
        return sum(freqs.values())
    best = None
    weights = sorted(freqs.values(), reverse=True)
    for lengths in itertools.product(range(1, n), repeat=n):
        if sum(2.0 ** -l for l in lengths) != 1.0:
            continue
        cost = sum(w * l for w, l in zip(weights, sorted(lengths)))
        best = cost if best is None else min(best, cost)
    return best


class TestHuffman:
    def test_roundtrip_skewed_symbols(self):
        rng = np.random.default_rng(1)
        symbols = rng.choice([0, 1, 2, 3, 7, -5], size=5000,
                             p=[0.5, 0.25, 0.12, 0.08, 0.04, 0.01]).tolist()
        freqs = {s: symbols.count(s) for s in set(symbols)}
        book = huffman_build(freqs)
        stream = encode_stream(symbols, book)
        assert decode_stream(stream, book, len(symbols)) == symbols

    def test_single_symbol_alphabet(self):
        book = huffman_build({42: 17})
        assert book.lengths[42] == 1
        stream = encode_stream([42] * 5, book)
        assert stream.bit_length == 5
        assert decode_stream(stream, book, 5) == [42] * 5

    def test_kraft_equality_and_prefix_free(self):
        rng = np.random.default_rng(2)
        freqs = {i: int(f) for i, f in enumerate(rng.integers(1, 1000, size=40))}
        book = huffman_build(freqs)
        assert book.kraft_sum() == 1.0
        pairs = sorted(((book.lengths[s], book.codes[s]) for s in freqs))
        for i, (la, ca) in enumerate(pairs):
            for lb, cb in pairs[i + 1:]:
                if lb > la:
                    assert (cb >> (lb - la)) != ca
                else:
                    assert ca != cb

    def test_optimal_vs_exhaustive_small_alphabets(self):
        rng = np.random.default_rng(3)
        for n in range(2, 7):
            for _ in range(6):
                freqs = {i: int(f) for i, f in
                         enumerate(rng.integers(1, 60, size=n))}
                book = huffman_build(freqs)
                cost = sum(freqs[s] * book.lengths[s] for s in freqs)
                assert cost == exhaustive_optimal_cost(freqs)

    def test_deterministic_codebook(self):
        freqs = {3: 10, 1: 10, 7: 10, 2: 5}
        a = huffman_build(freqs).serialize()
        b = huffman_build(dict(reversed(list(freqs.items())))).serialize()
        assert a == b

    def test_serialize_roundtrip(self):
        book = huffman_build({-3: 4, 0: 9, 5: 1, 1000: 2})
        raw = book.serialize()
        back, offset = Codebook.deserialize(raw)
        assert offset == len(raw)
        assert back.lengths == book.lengths
        symbols = [-3, 0, 0, 5, 1000, 0, -3]
        assert decode_stream(encode_stream(symbols, back), book, 7) == symbols

    def test_rejects_unknown_symbol_and_bad_freq(self):
        book = huffman_build({1: 3, 2: 5})
        with pytest.raises(EncodingError):
            encode_stream([1, 9], book)
        with pytest.raises(InvalidSpecError):
            huffman_build({})
        with pytest.raises(InvalidSpecError):
            huffman_build({1: 0})

    def test_decode_detects_truncated_stream(self):
        book = huffman_build({1: 1, 2: 1, 3: 2})
        stream = encode_stream([1, 2, 3, 3], book)
        clipped = BitStream(stream.data, stream.bit_length - 1)
        with pytest.raises(DecodingError):
            decode_stream(clipped, book, 4)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 24))
    def test_roundtrip_property(self, seed, alphabet):
        rng = np.random.default_rng(seed)
        weights = rng.integers(1, 50, size=alphabet)
        symbols = rng.integers(-alphabet, alphabet, size=200).tolist()
        freqs = {}
        for s in symbols:
            freqs[s] = freqs.get(s, 0) + 1
        book = huffman_build(freqs)
        assert decode_stream(encode_stream(symbols, book), book,
                             len(symbols)) == symbols
        del weights


class TestIndexCoding:
    def roundtrip(self, indices, dimension=80):
        w = BitWriter()
        encode_indices(indices, dimension, w)
        r = BitReader(w.finish())
        return decode_indices(r)

    def test_identity_on_random_subsets(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            k = int(rng.integers(0, 81))
            subset = sorted(rng.choice(80, size=k, replace=False).tolist())
            assert self.roundtrip(subset) == subset

    def test_empty_and_full(self):
        assert self.roundtrip([]) == []
        assert self.roundtrip(list(range(80))) == list(range(80))

    def test_prefix_length_is_max_plus_one(self):
        w = BitWriter()
        encode_indices([0, 5], 80, w)
        stream = w.finish()
        # 16-bit length field, then 6 bitmap bits
        assert stream.bit_length == 16 + 6

    def test_unsorted_input_decodes_sorted(self):
        assert self.roundtrip([7, 2, 41]) == [2, 7, 41]

    def test_rejects_out_of_range(self):
        w = BitWriter()
        with pytest.raises(InvalidSpecError):
            encode_indices([80], 80, w)
        with pytest.raises(InvalidSpecError):
            encode_indices([-1], 80, w)

    @given(st.sets(st.integers(0, 79)))
    def test_roundtrip_property(self, subset):
        assert self.roundtrip(sorted(subset)) == sorted(subset)
