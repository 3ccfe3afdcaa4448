"""Trainable soft-to-hard scalar quantization, its regularizers and bitrate math.

Plain-array functions (``distance_matrix`` ... ``entropy_estimate``)
implement the quantizer for inference and analysis.
:class:`SoftQuantizer` holds trainable centroids and sharpness and builds
the same computation as differentiable graph nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .dsp import FRAME_LEN, OVERLAP, SAMPLE_RATE

ALPHA_INIT = 300.0


def distance_matrix(h, beta) -> np.ndarray:
    """``D[n, k] = |h[n] - beta[k]|``."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    return np.abs(h[:, None] - beta[None, :])


def soft_assign(D, alpha: float) -> np.ndarray:
    """Row-wise ``softmax(-alpha * D)``."""
    z = -alpha * np.asarray(D, dtype=np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def hard_assign(A) -> tuple[np.ndarray, np.ndarray]:
    """One-hot rows at the row maximum (lowest index wins ties) and the indices."""
    A = np.asarray(A)
    idx = np.argmax(A, axis=1)
    onehot = np.zeros(A.shape)
    onehot[np.arange(A.shape[0]), idx] = 1.0
    return onehot, idx


def nearest_indices(h, beta) -> np.ndarray:
    """Same indices as ``hard_assign(soft_assign(distance_matrix(h, beta), alpha))``
    for any alpha > 0, without forming the soft matrix."""
    return np.argmin(distance_matrix(h, beta), axis=1)


def penalty_lq(A) -> float:
    A = np.asarray(A, dtype=np.float64)
    return float(np.sqrt(A).sum() / A.shape[0])


def entropy_estimate(A, beta=None) -> float:
    """Entropy (bits) of centroid usage estimated from the column means of ``A``.

    ``beta`` is accepted for symmetry with the graph version but only the
    assignment matrix determines the usage distribution.
    """
    p = np.asarray(A, dtype=np.float64).mean(axis=0)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def index_entropy(indices, K: int) -> float:
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=K).astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def bitrate(avg_bits_per_code: float, N: int = 256, F: int = SAMPLE_RATE, T: int = FRAME_LEN,
            o: int = OVERLAP) -> float:
    """Bits per second: ``g * N * F / (T - o)``."""
    if T <= o:
        raise ValueError("frame size must exceed the overlap")
    return avg_bits_per_code * N * F / (T - o)


def bits_per_frame_to_bps(bits_per_frame: float, F: int = SAMPLE_RATE, T: int = FRAME_LEN,
                          o: int = OVERLAP) -> float:
    return bitrate(bits_per_frame, 1, F, T, o)


def bps_to_bits_per_frame(bps: float, F: int = SAMPLE_RATE, T: int = FRAME_LEN, o: int = OVERLAP) -> float:
    return bps * (T - o) / F


@dataclass
class QuantizerState:
    centroids: np.ndarray
    alpha: float

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 1 or len(self.centroids) < 2:
            raise ValueError("need at least two centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def K(self) -> int:
        return len(self.centroids)


def quantize(h, state: QuantizerState, mode: str = "test"):
    """Soft (``mode="train"``) or hard (``mode="test"``) quantization of ``h``.

    Train mode returns the soft reconstruction; test mode returns
    ``(reconstruction, indices)``.
    """
    h = np.asarray(h, dtype=np.float64)
    D = distance_matrix(h, state.centroids)
    A = soft_assign(D, state.alpha)
    if mode == "train":
        return (A @ state.centroids).reshape(h.shape)
    if mode != "test":
        raise ValueError(f"mode must be 'train' or 'test', not {mode!r}")
    _, idx = hard_assign(A)
    return state.centroids[idx].reshape(h.shape), idx.reshape(h.shape)


def uniform_centroids(K: int, lo: float, hi: float, open_interval: bool = False) -> np.ndarray:
    if open_interval:
        step = (hi - lo) / K
        return lo + step * (np.arange(K) + 0.5)
    return np.linspace(lo, hi, K)


class SoftQuantizer:
    """Trainable quantizer: centroids ``beta`` and sharpness ``alpha = exp(log_alpha)``.

    Parameters live in the caller's :class:`~nwcodec.diffgraph.ParamStore`
    under ``prefix``.
    """

    def __init__(self, store: dg.ParamStore, prefix: str, centroids, alpha: float = ALPHA_INIT,
                 dtype=np.float32):
        self.store = store
        self.prefix = prefix
        self.beta = store.add(f"{prefix}.centroids", np.asarray(centroids, dtype=dtype))
        self.log_alpha = store.add(f"{prefix}.log_alpha", np.array([np.log(alpha)], dtype=dtype))

    @property
    def K(self) -> int:
        return self.beta.value.shape[0]

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value[0]))

    def state(self) -> QuantizerState:
        return QuantizerState(self.beta.value.astype(np.float64), self.alpha)

    def soft(self, h: dg.Node):
        """Graph for train mode.

        Returns ``(h_soft, A_soft)`` with ``h_soft`` shaped like ``h``.
        """
        shape = h.shape
        flat = dg.reshape(h, (-1,))
        D = dg.absolute(dg.pairwise_diff(flat, self.beta))
        alpha = dg.exp(self.log_alpha)
        A = dg.softmax_rows(dg.scalar_mul(D, dg.scale(alpha, -1.0)))
        hq = dg.matvec(A, self.beta)
        return dg.reshape(hq, shape), A

    def hard(self, h) -> tuple[np.ndarray, np.ndarray]:
        """Test mode on plain arrays: ``(reconstruction, indices)``."""
        h = np.asarray(h.value if isinstance(h, dg.Node) else h)
        idx = nearest_indices(h.reshape(-1), self.beta.value).reshape(h.shape)
        return self.beta.value[idx], idx

    def dequantize(self, indices) -> np.ndarray:
        return self.beta.value[np.asarray(indices)]


def penalty_node(A: dg.Node) -> dg.Node:
    """Soft-to-hard penalty ``(1/N) sum sqrt(A)`` as a graph node."""
    return dg.scale(dg.reduce_sum(dg.sqrt(A)), 1.0 / A.shape[0])


def entropy_node(A: dg.Node) -> dg.Node:
    return dg.column_mean_entropy(A)
