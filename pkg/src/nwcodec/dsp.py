"""Deterministic signal-processing primitives.

Framing, gain normalization, overlap-add resynthesis, the fixed
high-pass / pre-emphasis filters and mel filterbank analysis.  Everything
here is a pure function of its arguments; IIR filters accept and return
their state explicitly (``zi`` / ``zf``, same convention as
:func:`scipy.signal.lfilter`).
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 16000
FRAME_LEN = 512
OVERLAP = 32
HOP = FRAME_LEN - OVERLAP
N_FFT = 512
MEL_BANK_SIZES = (8, 16, 32, 128)

HIGHPASS_B = np.array([0.989502, -1.979004, 0.989502])
HIGHPASS_A = np.array([1.0, -1.978882, 0.979126])
PREEMPH = 0.68


@dataclass(frozen=True)
class Frame:
    samples: np.ndarray
    start_index: int
    padded: bool = False

    def __post_init__(self):
        if len(self.samples) != FRAME_LEN:
            raise ValueError(f"frame must hold {FRAME_LEN} samples, got {len(self.samples)}")


@dataclass(frozen=True)
class Gain:
    """Scale factors applied by :func:`normalize`, kept for exact inversion."""

    std: float
    peak: float
    silent: bool = False


def hann(n: int) -> np.ndarray:
    """Symmetric Hann window, ``0.5 * (1 - cos(2 pi k / (n - 1)))``."""
    if n == 1:
        return np.ones(1)
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))


def num_frames(length: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    if length <= frame_len:
        return 1
    return -(-(length - frame_len) // hop) + 1


def frame_signal(x, frame_len: int = FRAME_LEN, hop: int = HOP) -> list[Frame]:
    """Cut ``x`` into frames of ``frame_len`` advancing by ``hop``.

    The final frame is zero-padded (and flagged) when the signal does not
    end on a frame boundary.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if len(x) < frame_len:
        raise ValueError(f"signal has {len(x)} samples, need at least one frame of {frame_len}")
    frames = []
    for i in range(num_frames(len(x), frame_len, hop)):
        start = i * hop
        chunk = x[start:start + frame_len]
        padded = len(chunk) < frame_len
        if padded:
            chunk = np.concatenate([chunk, np.zeros(frame_len - len(chunk))])
        frames.append(Frame(chunk.copy(), start, padded))
    return frames


def normalize(x) -> tuple[np.ndarray, Gain]:
    """Scale to unit variance, then divide by the resulting peak amplitude."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty signal")
    std = float(np.std(x))
    if std == 0.0 or not np.any(x):
        return x.copy(), Gain(1.0, 1.0, silent=True)
    y = x / std
    peak = float(np.max(np.abs(y)))
    return y / peak, Gain(std, peak)


def denormalize(y, gain: Gain) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if gain.silent:
        return y.copy()
    return y * gain.peak * gain.std


def crossfade(overlap: int = OVERLAP) -> np.ndarray:
    """Rising raised-cosine half; its complement ``1 - f`` is the fade-out."""
    n = np.arange(overlap)
    return 0.5 * (1.0 - np.cos(np.pi * (n + 0.5) / overlap))


def overlap_add(frames, hop: int = HOP) -> np.ndarray:
    """Crossfade adjacent frames over their overlap and concatenate.

    Accepts :class:`Frame` objects or plain arrays.  The fades are
    amplitude-complementary, so constant frames reconstruct exactly; the
    outer edges of the first and last frame are left untouched.
    """
    data = [np.asarray(f.samples if isinstance(f, Frame) else f, dtype=np.float64) for f in frames]
    if not data:
        return np.zeros(0)
    frame_len = len(data[0])
    if any(len(d) != frame_len for d in data):
        raise ValueError("all frames must share one length")
    overlap = frame_len - hop
    if overlap < 0:
        raise ValueError("hop exceeds frame length")
    fade_in = crossfade(overlap)
    fade_out = 1.0 - fade_in
    out = np.zeros(frame_len + hop * (len(data) - 1))
    for i, d in enumerate(data):
        w = np.ones(frame_len)
        if i > 0:
            w[:overlap] = fade_in
        if i < len(data) - 1:
            w[frame_len - overlap:] = fade_out
        out[i * hop:i * hop + frame_len] += w * d
    return out


def highpass(x, zi=None):
    """Second-order high-pass pre-filter.  Returns ``(y, zf)`` when ``zi`` is given."""
    if zi is None:
        return sps.lfilter(HIGHPASS_B, HIGHPASS_A, np.asarray(x, dtype=np.float64))
    return sps.lfilter(HIGHPASS_B, HIGHPASS_A, np.asarray(x, dtype=np.float64), zi=zi)


def preemphasis(x, zi=None):
    """``y[n] = x[n] - 0.68 x[n-1]``."""
    b, a = np.array([1.0, -PREEMPH]), np.array([1.0])
    if zi is None:
        return sps.lfilter(b, a, np.asarray(x, dtype=np.float64))
    return sps.lfilter(b, a, np.asarray(x, dtype=np.float64), zi=zi)


def deemphasis(x, zi=None):
    """Exact inverse of :func:`preemphasis`: ``y[n] = x[n] + 0.68 y[n-1]``."""
    b, a = np.array([1.0]), np.array([1.0, -PREEMPH])
    if zi is None:
        return sps.lfilter(b, a, np.asarray(x, dtype=np.float64))
    return sps.lfilter(b, a, np.asarray(x, dtype=np.float64), zi=zi)


# ---------------------------------------------------------------------------
# mel analysis


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    bank_size: int
    weights: np.ndarray  # (bank_size, n_fft // 2 + 1)
    centers_hz: np.ndarray


@functools.lru_cache(maxsize=None)
def mel_filterbank(bank_size: int, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> MelFilterbank:
    """Triangular mel filters, each row normalized to unit sum.

    Filters too narrow to straddle any FFT bin collapse onto the bin
    nearest their center so no row is empty.
    """
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), bank_size + 2))
    w = np.zeros((bank_size, n_bins))
    for i in range(bank_size):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        w[i] = np.clip(np.minimum(rise, fall), 0.0, None)
        if not np.any(w[i] > 0):
            w[i, int(np.argmin(np.abs(freqs - c)))] = 1.0
        w[i] /= w[i].sum()
    w.setflags(write=False)
    return MelFilterbank(bank_size, w, edges[1:-1])


@functools.lru_cache(maxsize=None)
def dft_matrices(n: int = N_FFT, dtype=np.float64):
    """Real/imag parts of the one-sided DFT as ``(n, n//2 + 1)`` matrices."""
    t = np.arange(n)[:, None]
    k = np.arange(n // 2 + 1)[None, :]
    ang = 2.0 * np.pi * t * k / n
    c, s = np.cos(ang).astype(dtype), (-np.sin(ang)).astype(dtype)
    c.setflags(write=False)
    s.setflags(write=False)
    return c, s


def magnitude_spectrum(frame) -> np.ndarray:
    return np.abs(np.fft.rfft(np.asarray(frame, dtype=np.float64), n=N_FFT, axis=-1))


def mel_spectrum(frame, bank: MelFilterbank | int) -> np.ndarray:
    """Mel energies (linear magnitude) of one frame or a stack of frames."""
    if isinstance(frame, Frame):
        frame = frame.samples
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != FRAME_LEN:
        raise ValueError(f"frame must hold {FRAME_LEN} samples")
    if isinstance(bank, int):
        bank = mel_filterbank(bank)
    return magnitude_spectrum(frame) @ bank.weights.T


# ---------------------------------------------------------------------------
# WAV I/O (16 kHz, 16-bit, mono)


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getframerate() != SAMPLE_RATE:
            raise ValueError(
                f"{path}: need 16 kHz 16-bit mono PCM, got {w.getframerate()} Hz, "
                f"{8 * w.getsampwidth()}-bit, {w.getnchannels()} channel(s)"
            )
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, x) -> None:
    pcm = np.clip(np.round(np.asarray(x, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())
