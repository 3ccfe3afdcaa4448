"""Huffman coding of quantizer indices and the ``.nwc`` container format.

Layout (all integers little-endian)::

    header
      4s   magic  b"NWCF"
      u16  version (1)
      u16  frame length T        u16 overlap o       u32 sample rate F
      u8   use_lpc flag          u8  module count M
      u64  original sample count
      f64  normalization std     f64 normalization peak     u8 silent flag
    module descriptor, repeated M times
      u8   kind (0 = LSP quantizer, 1 = NWC)
      u16  codes per frame       u16 K (centroid count)
      f32  x K   centroids
      u8   x K   canonical Huffman code lengths
    u32  frame count
    frame, repeated: for each module
      u16  payload byte length   u8  pad bits in the last byte   payload bytes
    u32  CRC-32 of every payload byte, in stream order

Codebooks travel as code lengths only; the canonical code assignment is
recomputed on read.  Reported bitrates count payload bits only.
"""

from __future__ import annotations

import heapq
import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dsp import FRAME_LEN, OVERLAP, SAMPLE_RATE, Gain

MAGIC = b"NWCF"
VERSION = 1
MAX_CODE_LEN = 24
ZERO_FREQ_WEIGHT = 1e-9
KIND_CODES = {"lpc": 0, "nwc": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class BitstreamError(ValueError):
    """Malformed, truncated or corrupted bitstream."""


# ---------------------------------------------------------------------------
# Huffman


@dataclass(frozen=True)
class HuffmanCodebook:
    """Canonical prefix code described by per-symbol code lengths."""

    lengths: np.ndarray
    codes: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.lengths)

    @classmethod
    def from_lengths(cls, lengths) -> "HuffmanCodebook":
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.ndim != 1 or len(lengths) == 0:
            raise ValueError("need a non-empty 1-D array of code lengths")
        if np.any(lengths < 1) or np.any(lengths > MAX_CODE_LEN):
            raise ValueError(f"code lengths must lie in [1, {MAX_CODE_LEN}]")
        if kraft_sum(lengths) > 1.0 + 1e-12:
            raise ValueError("code lengths violate the Kraft inequality")
        codes = np.zeros(len(lengths), dtype=np.int64)
        code, prev = 0, 0
        for s in sorted(range(len(lengths)), key=lambda i: (lengths[i], i)):
            code <<= int(lengths[s]) - prev
            codes[s] = code
            prev = int(lengths[s])
            code += 1
        lengths.setflags(write=False)
        codes.setflags(write=False)
        return cls(lengths, codes)

    def mean_length(self, probabilities) -> float:
        p = np.asarray(probabilities, dtype=np.float64)
        return float(np.dot(p / p.sum(), self.lengths))


def kraft_sum(lengths) -> float:
    return float(np.sum(2.0 ** -np.asarray(lengths, dtype=np.float64)))


def _package_merge(weights, max_len):
    """Optimal code lengths with every length <= ``max_len`` (Larmore-Hirschberg)."""
    n = len(weights)
    order = np.argsort(weights, kind="stable")
    leaves = [(float(weights[i]), (int(i),)) for i in order]
    current = list(leaves)
    for _ in range(max_len - 1):
        packages = [(current[i][0] + current[i + 1][0], current[i][1] + current[i + 1][1])
                    for i in range(0, len(current) - 1, 2)]
        current = list(heapq.merge(leaves, packages, key=lambda t: t[0]))
    lengths = np.zeros(n, dtype=np.int64)
    for _, syms in current[:2 * n - 2]:
        for s in syms:
            lengths[s] += 1
    return lengths


def build_huffman(frequencies, max_len: int = MAX_CODE_LEN) -> HuffmanCodebook:
    """Canonical Huffman code for ``frequencies``, length-limited to ``max_len`` bits.

    Symbols of zero frequency still receive (long) codes so that any index
    remains encodable.  A single-symbol alphabet gets a 1-bit code.
    """
    f = np.asarray(frequencies, dtype=np.float64)
    if f.ndim != 1 or len(f) == 0:
        raise ValueError("frequencies must be a non-empty 1-D array")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("frequencies must be finite and non-negative")
    if not np.any(f > 0):
        raise ValueError("at least one frequency must be positive")
    if len(f) == 1:
        return HuffmanCodebook.from_lengths([1])
    if len(f) > 2 ** max_len:
        raise ValueError(f"{len(f)} symbols cannot fit in {max_len}-bit codes")
    w = f / f.sum()
    w = np.where(w > 0, w, ZERO_FREQ_WEIGHT * w[w > 0].min())
    return HuffmanCodebook.from_lengths(_package_merge(w, max_len))


def encode_indices(indices, codebook: HuffmanCodebook) -> tuple[bytes, int]:
    """Concatenate the codes of ``indices``.  Returns ``(payload, pad_bits)``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return b"", 0
    if idx.min() < 0 or idx.max() >= codebook.K:
        bad = idx[(idx < 0) | (idx >= codebook.K)][0]
        raise ValueError(f"symbol {bad} outside alphabet of size {codebook.K}")
    lens = codebook.lengths[idx]
    codes = codebook.codes[idx]
    width = int(lens.max())
    j = np.arange(width)
    shift = lens[:, None] - 1 - j[None, :]
    bits = (codes[:, None] >> np.maximum(shift, 0)) & 1
    bits = bits[shift >= 0].astype(np.uint8)
    pad = (-len(bits)) % 8
    return np.packbits(bits).tobytes(), pad


def _decode_tables(codebook: HuffmanCodebook):
    """Per-length first code, symbol count and offset into the canonical symbol order."""
    order = sorted(range(codebook.K), key=lambda i: (codebook.lengths[i], i))
    max_len = int(codebook.lengths.max())
    count = np.bincount(codebook.lengths, minlength=max_len + 1)
    first = [0] * (max_len + 2)
    offset = [0] * (max_len + 2)
    code, pos = 0, 0
    for L in range(1, max_len + 1):
        code = (code + int(count[L - 1])) << 1 if L > 1 else 0
        first[L] = code
        offset[L] = pos
        pos += int(count[L])
    return order, [int(c) for c in count], first, offset, max_len


def decode_indices(payload: bytes, count: int, codebook: HuffmanCodebook, pad_bits: int = 0) -> np.ndarray:
    """Inverse of :func:`encode_indices`; reads exactly ``count`` symbols."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8)).tolist()
    avail = len(bits) - pad_bits
    order, cnt, first, offset, max_len = _decode_tables(codebook)
    out = np.empty(count, dtype=np.int64)
    pos = 0
    for n in range(count):
        code, L = 0, 0
        while True:
            if pos >= avail:
                raise BitstreamError(f"bitstream truncated at bit {pos} while decoding symbol {n} of {count}")
            code = (code << 1) | bits[pos]
            pos += 1
            L += 1
            if code - first[L] < cnt[L]:
                out[n] = order[offset[L] + code - first[L]]
                break
            if L >= max_len:
                raise BitstreamError(f"invalid code ending at bit {pos} (symbol {n})")
    return out


# ---------------------------------------------------------------------------
# container


@dataclass
class ModuleDescriptor:
    kind: str
    codes_per_frame: int
    centroids: np.ndarray
    code_lengths: np.ndarray

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown module kind {self.kind!r}")
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        self.code_lengths = np.asarray(self.code_lengths, dtype=np.uint8)
        if len(self.centroids) != len(self.code_lengths):
            raise ValueError("one code length per centroid required")

    @property
    def K(self) -> int:
        return len(self.centroids)

    def codebook(self) -> HuffmanCodebook:
        return HuffmanCodebook.from_lengths(self.code_lengths)


@dataclass
class Container:
    """Everything needed to decode an utterance, given the decoder weights."""

    modules: list[ModuleDescriptor]
    frames: list[list[tuple[bytes, int]]]
    num_samples: int
    gain: Gain
    use_lpc: bool = True
    frame_len: int = FRAME_LEN
    overlap: int = OVERLAP
    sample_rate: int = SAMPLE_RATE

    @property
    def payload_bits(self) -> int:
        return sum(8 * len(p) - pad for fr in self.frames for p, pad in fr)

    @property
    def bits_per_frame(self) -> float:
        return self.payload_bits / len(self.frames) if self.frames else 0.0

    @property
    def bitrate(self) -> float:
        """Payload bits per second, counting the hop as each frame's duration."""
        return self.bits_per_frame * self.sample_rate / (self.frame_len - self.overlap)

    def module_bits_per_frame(self) -> list[float]:
        if not self.frames:
            return [0.0] * len(self.modules)
        return [sum(8 * len(fr[m][0]) - fr[m][1] for fr in self.frames) / len(self.frames)
                for m in range(len(self.modules))]


def write_container(c: Container) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HHHI", VERSION, c.frame_len, c.overlap, c.sample_rate))
    buf.write(struct.pack("<BB", int(bool(c.use_lpc)), len(c.modules)))
    buf.write(struct.pack("<QddB", int(c.num_samples), float(c.gain.std), float(c.gain.peak), int(c.gain.silent)))
    for m in c.modules:
        buf.write(struct.pack("<BHH", KIND_CODES[m.kind], m.codes_per_frame, m.K))
        buf.write(m.centroids.astype("<f4").tobytes())
        buf.write(m.code_lengths.astype(np.uint8).tobytes())
    buf.write(struct.pack("<I", len(c.frames)))
    crc = 0
    for fr in c.frames:
        if len(fr) != len(c.modules):
            raise ValueError(f"frame carries {len(fr)} payloads for {len(c.modules)} modules")
        for payload, pad in fr:
            if len(payload) > 0xFFFF or not 0 <= pad < 8 or (pad and not payload):
                raise ValueError("payload too long or inconsistent pad count")
            buf.write(struct.pack("<HB", len(payload), pad))
            buf.write(payload)
            crc = zlib.crc32(payload, crc)
    buf.write(struct.pack("<I", crc))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BitstreamError(f"container truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(data: bytes) -> Container:
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise BitstreamError("not an NWC container (bad magic)")
    version, T, o, F = r.unpack("<HHHI")
    if version != VERSION:
        raise BitstreamError(f"unsupported container version {version}")
    use_lpc, n_mod = r.unpack("<BB")
    n_samples, std, peak, silent = r.unpack("<QddB")
    modules = []
    for _ in range(n_mod):
        kind, per_frame, K = r.unpack("<BHH")
        if kind not in KIND_NAMES:
            raise BitstreamError(f"unknown module kind code {kind}")
        cent = np.frombuffer(r.take(4 * K), dtype="<f4").astype(np.float32)
        lens = np.frombuffer(r.take(K), dtype=np.uint8).copy()
        modules.append(ModuleDescriptor(KIND_NAMES[kind], per_frame, cent, lens))
    (n_frames,) = r.unpack("<I")
    frames = []
    crc = 0
    for _ in range(n_frames):
        fr = []
        for _ in range(n_mod):
            length, pad = r.unpack("<HB")
            payload = r.take(length)
            crc = zlib.crc32(payload, crc)
            fr.append((payload, pad))
        frames.append(fr)
    (stored,) = r.unpack("<I")
    if stored != crc:
        raise BitstreamError(f"payload checksum mismatch (stored {stored:08x}, computed {crc:08x})")
    if r.pos != len(r.data):
        raise BitstreamError(f"{len(r.data) - r.pos} trailing bytes after container")
    return Container(modules, frames, n_samples, Gain(std, peak, bool(silent)), bool(use_lpc), T, o, F)
