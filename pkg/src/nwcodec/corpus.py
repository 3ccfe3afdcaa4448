"""Seeded synthetic speech corpus.

A source-filter generator: a jittered glottal pulse train (or noise, for
unvoiced segments) drives a cascade of time-varying formant resonators.
Segments imitate vowels, nasals, fricatives, plosive bursts and pauses so
that frames have speech-like spectral envelopes, pitch structure and level
changes.  Used for tests, demos and desk-scale training when no recorded
speech is at hand.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import SAMPLE_RATE, read_wav, write_wav

BLOCK = 80  # formant trajectories are updated every 5 ms

# (F1, F2, F3) centers for a handful of vowels
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240], [530, 1840, 2480],
    [660, 1720, 2410], [570, 840, 2410], [440, 1020, 2240], [490, 1350, 1690],
])
NASALS = np.array([[250, 1200, 2300], [250, 1700, 2500]])
FRIC_BANDS = [(2500, 7500), (3500, 7800), (1200, 5000), (4500, 7900)]


def _glottal_source(n, f0, rng, sr=SAMPLE_RATE):
    """Pulse train following the ``f0`` contour (Hz, one value per sample) with jitter and shimmer."""
    phase = np.cumsum(f0 / sr)
    marks = np.nonzero(np.diff(np.floor(phase)) > 0)[0] + 1
    src = np.zeros(n)
    for m in marks:
        m2 = m + int(rng.integers(-1, 2))
        if 0 <= m2 < n:
            src[m2] += 1.0 + 0.1 * rng.standard_normal()
    # open-phase smoothing: a short decaying glottal pulse shape, then spectral tilt
    pulse = np.hanning(24) * np.linspace(1.0, 0.3, 24)
    src = np.convolve(src, pulse)[:n]
    return sps.lfilter([1.0], [1.0, -0.9], src)


def _resonator(freq, bw, sr=SAMPLE_RATE):
    r = np.exp(-np.pi * bw / sr)
    return np.array([1.0, -2.0 * r * np.cos(2.0 * np.pi * freq / sr), r * r])


def _formant_filter(excitation, tracks, bandwidths):
    """Apply resonators whose center frequencies follow ``tracks`` (n, 3) block by block."""
    y = excitation.copy()
    n = len(y)
    for j in range(tracks.shape[1]):
        zi = np.zeros(2)
        out = np.empty(n)
        for s in range(0, n, BLOCK):
            e = min(n, s + BLOCK)
            a = _resonator(tracks[s, j], bandwidths[j])
            out[s:e], zi = sps.lfilter([1.0 - a[2]], a, y[s:e], zi=zi)
        y = out
    return y


def _segment(kind, n, rng):
    t = np.arange(n)
    if kind == "pause":
        return 1e-4 * rng.standard_normal(n)
    if kind == "fricative":
        lo, hi = FRIC_BANDS[rng.integers(len(FRIC_BANDS))]
        b, a = sps.butter(4, [lo / (SAMPLE_RATE / 2), min(hi / (SAMPLE_RATE / 2), 0.99)], btype="band")
        env = np.hanning(n) ** 0.5
        return 0.08 * sps.lfilter(b, a, rng.standard_normal(n)) * env
    if kind == "plosive":
        y = np.zeros(n)
        onset = n // 3
        burst = rng.standard_normal(n - onset) * np.exp(-np.arange(n - onset) / 120.0)
        b, a = sps.butter(2, 1500 / (SAMPLE_RATE / 2), btype="high")
        y[onset:] = 0.2 * sps.lfilter(b, a, burst)
        return y
    # voiced: vowel glide or nasal
    f0_base = rng.uniform(90, 230)
    f0 = f0_base * (1.0 + 0.08 * np.sin(2 * np.pi * t / n * rng.uniform(0.5, 1.5)) + 0.01 * rng.standard_normal())
    src = _glottal_source(n, f0, rng)
    table = NASALS if kind == "nasal" else VOWELS
    v0 = table[rng.integers(len(table))].astype(float)
    v1 = table[rng.integers(len(table))].astype(float)
    w = (t / max(n - 1, 1))[:, None]
    tracks = (1 - w) * v0 + w * v1
    tracks *= rng.uniform(0.9, 1.15)
    bws = np.array([80.0, 110.0, 160.0]) * (1.8 if kind == "nasal" else 1.0)
    y = _formant_filter(src, tracks, bws)
    env = np.minimum(1.0, np.minimum(t, n - 1 - t) / 400.0) if n > 800 else np.hanning(n)
    gain = 0.05 if kind == "nasal" else 0.1
    return gain * y / (np.std(y) + 1e-12) * env * rng.uniform(0.5, 1.2)


def synth_utterance(duration: float, seed: int) -> np.ndarray:
    """One utterance of roughly ``duration`` seconds, peak-limited to 0.9."""
    rng = np.random.default_rng(seed)
    total = int(duration * SAMPLE_RATE)
    kinds = ["vowel", "vowel", "vowel", "nasal", "fricative", "plosive", "pause"]
    parts, n = [], 0
    while n < total:
        kind = kinds[rng.integers(len(kinds))]
        lo, hi = {"pause": (0.05, 0.25), "plosive": (0.04, 0.09), "fricative": (0.08, 0.2)}.get(kind, (0.12, 0.35))
        seg = _segment(kind, int(rng.uniform(lo, hi) * SAMPLE_RATE), rng)
        parts.append(seg)
        n += len(seg)
    y = np.concatenate(parts)[:total]
    y += 3e-4 * rng.standard_normal(len(y))
    return 0.9 * y / np.max(np.abs(y))


def write_corpus(root, minutes: float = 10.0, val_minutes: float = 1.0, utterance_seconds: float = 6.0,
                 seed: int = 0) -> dict[str, list[Path]]:
    """Write ``train/`` and ``validation/`` WAV folders under ``root``."""
    root = Path(root)
    out: dict[str, list[Path]] = {}
    seq = np.random.SeedSequence(seed)
    for split, mins in (("train", minutes), ("validation", val_minutes)):
        count = max(1, int(np.ceil(mins * 60 / utterance_seconds)))
        child = seq.spawn(1)[0]
        seeds = child.generate_state(count)
        paths = []
        for i, s in enumerate(seeds):
            p = root / split / f"utt{i:04d}.wav"
            write_wav(p, synth_utterance(utterance_seconds, int(s)))
            paths.append(p)
        out[split] = paths
    return out


def load_corpus(root) -> dict[str, list[np.ndarray]]:
    """Read ``train`` and ``validation`` WAVs (sorted by name).

    A directory without those subfolders is treated as training data only.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    splits = {}
    subdirs = [d for d in ("train", "validation") if (root / d).is_dir()]
    if not subdirs:
        splits["train"] = [read_wav(p) for p in sorted(root.glob("*.wav"))]
        splits["validation"] = []
    else:
        for d in ("train", "validation"):
            splits[d] = [read_wav(p) for p in sorted((root / d).glob("*.wav"))] if (root / d).is_dir() else []
    if not splits["train"]:
        raise FileNotFoundError(f"no training WAV files under {root}")
    return splits
