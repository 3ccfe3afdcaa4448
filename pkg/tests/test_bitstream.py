import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nwcodec import bitstream as bs
from nwcodec.dsp import Gain


def shannon(p):
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log2(p)).sum())


def is_prefix_free(cb):
    words = [format(int(c), f"0{int(n)}b") for c, n in zip(cb.codes, cb.lengths)]
    return not any(a != b and b.startswith(a) for a in words for b in words)


class TestHuffman:
    def test_mean_length_within_one_bit_of_entropy(self, rng):
        for _ in range(100):
            K = int(rng.integers(2, 300))
            p = rng.dirichlet(np.full(K, rng.uniform(0.05, 3.0)))
            cb = bs.build_huffman(p)
            H = shannon(p)
            assert H - 1e-9 <= cb.mean_length(p) < H + 1

    def test_dyadic_distribution_is_exact(self):
        p = np.array([0.5, 0.25, 0.125, 0.125])
        cb = bs.build_huffman(p)
        np.testing.assert_array_equal(cb.lengths, [1, 2, 3, 3])
        assert cb.mean_length(p) == 1.75

    def test_canonical_code_values(self):
        cb = bs.HuffmanCodebook.from_lengths([2, 1, 3, 3])
        np.testing.assert_array_equal(cb.codes, [0b10, 0b0, 0b110, 0b111])

    def test_zero_frequency_symbols_stay_encodable(self):
        cb = bs.build_huffman([10, 0, 0, 5])
        idx = np.array([1, 2, 0, 3, 1])
        payload, pad = bs.encode_indices(idx, cb)
        np.testing.assert_array_equal(bs.decode_indices(payload, 5, cb, pad), idx)

    def test_length_limit(self):
        p = 2.0 ** -np.arange(1, 40)
        cb = bs.build_huffman(p, max_len=12)
        assert cb.lengths.max() <= 12
        assert bs.kraft_sum(cb.lengths) <= 1.0
        assert is_prefix_free(cb)

    def test_single_symbol(self):
        cb = bs.build_huffman([3.0])
        payload, pad = bs.encode_indices(np.zeros(9, dtype=int), cb)
        assert len(payload) * 8 - pad == 9
        np.testing.assert_array_equal(bs.decode_indices(payload, 9, cb, pad), 0)

    @given(st.lists(st.integers(0, 1000), min_size=2, max_size=64))
    def test_codes_are_complete_and_prefix_free(self, freqs):
        if not any(freqs):
            freqs[0] = 1
        cb = bs.build_huffman(freqs)
        assert is_prefix_free(cb)
        assert bs.kraft_sum(cb.lengths) == pytest.approx(1.0)

    @pytest.mark.parametrize("freqs", [[], [-1, 2], [0, 0], [np.inf, 1]])
    def test_invalid_frequencies(self, freqs):
        with pytest.raises(ValueError):
            bs.build_huffman(freqs)

    def test_invalid_lengths(self):
        with pytest.raises(ValueError):
            bs.HuffmanCodebook.from_lengths([1, 1, 1])
        with pytest.raises(ValueError):
            bs.HuffmanCodebook.from_lengths([0, 1])


class TestIndexCoding:
    def test_round_trip_large(self, rng):
        K = 32
        p = rng.dirichlet(np.full(K, 0.5))
        idx = rng.choice(K, size=100_000, p=p)
        cb = bs.build_huffman(np.bincount(idx, minlength=K))
        payload, pad = bs.encode_indices(idx, cb)
        assert len(payload) * 8 - pad == int(cb.lengths[idx].sum())
        np.testing.assert_array_equal(bs.decode_indices(payload, len(idx), cb, pad), idx)

    @given(st.integers(2, 300), st.integers(0, 400), st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, K, n, seed):
        r = np.random.default_rng(seed)
        cb = bs.build_huffman(r.random(K) ** 3)
        idx = r.integers(0, K, n)
        payload, pad = bs.encode_indices(idx, cb)
        np.testing.assert_array_equal(bs.decode_indices(payload, n, cb, pad), idx)

    def test_out_of_range_symbol(self):
        cb = bs.build_huffman([1, 1, 1, 1])
        with pytest.raises(ValueError):
            bs.encode_indices([0, 4], cb)

    def test_truncated_payload(self, rng):
        cb = bs.build_huffman(np.ones(16))
        payload, pad = bs.encode_indices(rng.integers(0, 16, 40), cb)
        with pytest.raises(bs.BitstreamError):
            bs.decode_indices(payload[:-3], 40, cb, 0)


def make_container(rng, n_frames=7):
    mods = []
    for kind, per_frame, K in (("lpc", 16, 256), ("nwc", 256, 32), ("nwc", 256, 32)):
        cent = np.sort(rng.uniform(-1, 1, K)).astype(np.float32)
        mods.append(bs.ModuleDescriptor(kind, per_frame, cent, bs.build_huffman(rng.random(K) + 0.01).lengths))
    frames = []
    for _ in range(n_frames):
        frames.append([bs.encode_indices(rng.integers(0, m.K, m.codes_per_frame), m.codebook()) for m in mods])
    return bs.Container(mods, frames, 3333, Gain(0.12, 3.4, False))


class TestContainer:
    def test_round_trip_is_bit_exact(self, rng):
        c = make_container(rng)
        data = bs.write_container(c)
        back = bs.read_container(data)
        assert bs.write_container(back) == data
        assert back.num_samples == 3333 and back.gain == c.gain and back.use_lpc
        assert back.frames == c.frames
        for a, b in zip(back.modules, c.modules):
            assert a.kind == b.kind and a.codes_per_frame == b.codes_per_frame
            np.testing.assert_array_equal(a.centroids, b.centroids)
            np.testing.assert_array_equal(a.code_lengths, b.code_lengths)

    def test_rate_accounting(self, rng):
        c = make_container(rng, 4)
        per_module = c.module_bits_per_frame()
        assert sum(per_module) == pytest.approx(c.bits_per_frame)
        assert c.bitrate == pytest.approx(c.bits_per_frame * 16000 / 480)

    def test_empty_container(self, rng):
        c = make_container(rng, 0)
        back = bs.read_container(bs.write_container(c))
        assert back.frames == [] and back.bits_per_frame == 0.0

    def test_bad_magic(self, rng):
        data = bytearray(bs.write_container(make_container(rng)))
        data[0:4] = b"WAVE"
        with pytest.raises(bs.BitstreamError, match="magic"):
            bs.read_container(bytes(data))

    def test_truncation_detected(self, rng):
        data = bs.write_container(make_container(rng))
        for cut in (3, 30, len(data) // 2, len(data) - 1):
            with pytest.raises(bs.BitstreamError):
                bs.read_container(data[:cut])

    def test_payload_corruption_detected(self, rng):
        data = bytearray(bs.write_container(make_container(rng)))
        data[-10] ^= 0x40
        with pytest.raises(bs.BitstreamError, match="checksum"):
            bs.read_container(bytes(data))

    def test_trailing_bytes_rejected(self, rng):
        with pytest.raises(bs.BitstreamError, match="trailing"):
            bs.read_container(bs.write_container(make_container(rng)) + b"\0")

    def test_module_count_mismatch_rejected(self, rng):
        c = make_container(rng, 2)
        c.frames[1] = c.frames[1][:2]
        with pytest.raises(ValueError):
            bs.write_container(c)
