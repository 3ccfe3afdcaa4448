"""Linear-predictive analysis/synthesis with line-spectral-pair conversion.

Conventions: ``coeffs`` are predictor coefficients ``l_k`` so that
``x_t ~ sum_k l_k x_{t-k}``; the analysis polynomial is
``A(z) = 1 - sum_k l_k z^-k``.  One analysis context is 1024 samples; the
frame it codes is the middle span ``[256:768]``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from . import diffgraph as dg
from .dsp import hann

ORDER = 16
CONTEXT_LEN = 1024
SPAN_START = 256
SPAN_LEN = 512
SUBFRAME_LEN = 128
SUBFRAME_HOP = 64
N_SUBFRAMES = 7
WHITE_NOISE_FLOOR = 1.0001
LSP_MIN_GAP = 1e-4
# Packed LSP clusters give direct-form filters that float64 cannot keep
# stable; rows that come out unstable are re-spaced with wider gaps.
LSP_STABLE_GAPS = (4e-4, 1.6e-3, 6.4e-3, 0.0256, 0.05)
LSP_GRID = 512


class LspError(ValueError):
    """LPC <-> LSP conversion failed (unstable filter, bad ordering, missed roots)."""


@dataclass
class LpcFrameState:
    coeffs: np.ndarray
    lsp: np.ndarray
    lsp_indices: np.ndarray
    residual: np.ndarray
    analysis_window_start: int


# ---------------------------------------------------------------------------
# windows


@functools.lru_cache(maxsize=None)
def analysis_window() -> np.ndarray:
    """1024-point window: flat middle half, ends tapered by halves of a 512-point Hann."""
    h = hann(512)
    w = np.ones(CONTEXT_LEN)
    w[:256] = h[:256]
    w[-256:] = h[256:]
    w.setflags(write=False)
    return w


def cross_frame_window(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[-1] != CONTEXT_LEN:
        raise ValueError(f"expected {CONTEXT_LEN} samples, got {samples.shape[-1]}")
    return samples * analysis_window()


@functools.lru_cache(maxsize=None)
def subframe_windows() -> tuple[np.ndarray, np.ndarray]:
    """Offsets within the span and the seven 128-point sub-frame windows.

    Periodic Hann halves keep the set exactly complementary; the first and
    last windows are flat on their outer halves.
    """
    n = np.arange(SUBFRAME_LEN)
    base = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / SUBFRAME_LEN))
    offsets = np.arange(N_SUBFRAMES) * SUBFRAME_HOP
    wins = np.tile(base, (N_SUBFRAMES, 1))
    wins[0, :SUBFRAME_HOP] = 1.0
    wins[-1, SUBFRAME_HOP:] = 1.0
    wins.setflags(write=False)
    return offsets, wins


@functools.lru_cache(maxsize=None)
def subframe_envelope() -> np.ndarray:
    """Sum of the sub-frame windows over the 512-sample span."""
    offsets, wins = subframe_windows()
    env = np.zeros(SPAN_LEN)
    for o, w in zip(offsets, wins):
        env[o:o + SUBFRAME_LEN] += w
    env.setflags(write=False)
    return env


# ---------------------------------------------------------------------------
# analysis


def autocorrelation(x, max_lag: int = ORDER) -> np.ndarray:
    """``r[k] = sum_n x[n] x[n-k]`` for ``k = 0..max_lag`` (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    return np.stack([np.sum(x[..., k:] * x[..., :n - k], axis=-1) for k in range(max_lag + 1)], axis=-1)


def levinson_durbin(r, order: int | None = None, return_reflection: bool = False):
    """Solve the Toeplitz normal equations for predictor coefficients.

    Works on a single autocorrelation vector or a stack of them (last
    axis).  When the prediction error vanishes at some order the recursion
    stops there and the remaining coefficients are zero.
    """
    r = np.asarray(r, dtype=np.float64)
    order = r.shape[-1] - 1 if order is None else order
    if np.any(r[..., 0] <= 0):
        raise ValueError("levinson_durbin: r[0] must be positive")
    batch = r.shape[:-1]
    a = np.zeros(batch + (order,))
    ks = np.zeros(batch + (order,))
    err = r[..., 0].copy()
    alive = np.ones(batch, dtype=bool)
    for i in range(order):
        acc = r[..., i + 1] - np.sum(a[..., :i] * r[..., i:0:-1], axis=-1)
        safe = np.where(alive, err, 1.0)
        k = np.where(alive, acc / safe, 0.0)
        prev = a[..., :i].copy()
        a[..., :i] = prev - k[..., None] * prev[..., ::-1]
        a[..., i] = k
        ks[..., i] = k
        err = err * (1.0 - k * k)
        alive &= err > 1e-12 * r[..., 0]
    if return_reflection:
        return a, ks
    return a


def reflection_coefficients(coeffs) -> np.ndarray:
    """Step-down recursion from predictor coefficients to reflection coefficients."""
    a = np.array(coeffs, dtype=np.float64)
    m = a.shape[-1]
    ks = np.zeros(a.shape)
    for i in range(m, 0, -1):
        k = a[..., i - 1].copy()
        ks[..., i - 1] = k
        if i == 1:
            break
        denom = 1.0 - k * k
        denom = np.where(np.abs(denom) < 1e-300, np.nan, denom)
        head = a[..., :i - 1]
        a[..., :i - 1] = (head + k[..., None] * head[..., ::-1]) / denom[..., None]
    return ks


def is_stable(coeffs) -> np.ndarray:
    ks = reflection_coefficients(coeffs)
    return np.all(np.abs(ks) < 1.0, axis=-1) & np.all(np.isfinite(ks), axis=-1)


def analyze(context) -> np.ndarray:
    """Predictor coefficients for one 1024-sample context (or a stack)."""
    r = autocorrelation(cross_frame_window(context))
    r[..., 0] *= WHITE_NOISE_FLOOR
    silent = r[..., 0] <= 0
    r[..., 0] = np.where(silent, 1.0, r[..., 0])
    a = levinson_durbin(r)
    a[silent] = 0.0
    return a


# ---------------------------------------------------------------------------
# LSP conversion


def _sum_diff_polys(coeffs):
    """Symmetric/antisymmetric polynomials with trivial roots removed.

    Returns ``(p, q)`` each of length ``M + 1`` (coefficients in ``z^-1``).
    """
    l = np.asarray(coeffs, dtype=np.float64)
    m = l.shape[-1]
    a = np.concatenate([np.ones(l.shape[:-1] + (1,)), -l, np.zeros(l.shape[:-1] + (1,))], axis=-1)
    rev = a[..., ::-1]
    P, Q = a + rev, a - rev
    p = np.zeros(l.shape[:-1] + (m + 1,))
    q = np.zeros(l.shape[:-1] + (m + 1,))
    p[..., 0], q[..., 0] = P[..., 0], Q[..., 0]
    for k in range(1, m + 1):
        p[..., k] = P[..., k] - p[..., k - 1]
        q[..., k] = Q[..., k] + q[..., k - 1]
    return p, q


def _cos_series(poly):
    """Coefficients ``c`` with ``e^{j h w} poly(e^{jw}) = sum_k c_k cos(k w)``."""
    h = (poly.shape[-1] - 1) // 2
    c = np.empty(poly.shape[:-1] + (h + 1,))
    c[..., 0] = poly[..., h]
    c[..., 1:] = 2.0 * poly[..., h - 1::-1]
    return c


def _eval_grid(c, grid):
    return c @ np.cos(np.outer(np.arange(c.shape[-1]), grid))


def _roots(c, grid, iters: int = 40) -> tuple[np.ndarray, np.ndarray]:
    """Sign-change roots of cosine series (rows of ``c``) on ``grid``, refined by bisection.

    Returns ``(roots, ok)``; rows whose sign changes on the grid do not
    number exactly ``len(c) - 1`` are flagged in ``ok`` and left as NaN.
    """
    vals = _eval_grid(c, grid)
    pos = vals > 0
    change = pos[:, 1:] != pos[:, :-1]
    want = c.shape[-1] - 1
    ok = change.sum(axis=-1) == want
    roots = np.full((len(c), want), np.nan)
    if not np.any(ok):
        return roots, ok
    c, vals, change = c[ok], vals[ok], change[ok]
    idx = np.nonzero(change)[1].reshape(len(c), want)
    lo, hi = grid[idx], grid[idx + 1]
    f_lo = np.take_along_axis(vals, idx, axis=-1)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        f_mid = np.sum(c[:, None, :] * np.cos(mid[:, :, None] * np.arange(c.shape[-1])), axis=-1)
        same = (f_mid > 0) == (f_lo > 0)
        lo = np.where(same, mid, lo)
        f_lo = np.where(same, f_mid, f_lo)
        hi = np.where(same, hi, mid)
        if np.max(hi - lo) < 1e-12:
            break
    roots[ok] = 0.5 * (lo + hi)
    return roots, ok


# successive grid refinements tried for rows whose roots are closer than a grid step
LSP_GRID_REFINE = (1, 8, 64)


def lpc_to_lsp(coeffs, grid_points: int = LSP_GRID) -> np.ndarray:
    """Line spectral pairs (radians, increasing in ``(0, pi)``) of a stable filter.

    Roots are bracketed on a uniform grid; rows with roots closer than a
    grid step are retried on finer grids.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[-1] % 2:
        raise ValueError("LSP conversion implemented for even orders only")
    if not np.all(is_stable(coeffs)):
        raise LspError("lpc_to_lsp: analysis filter is not minimum phase")
    flat = coeffs.reshape(-1, coeffs.shape[-1])
    out = np.full(flat.shape, np.nan)
    todo = np.arange(len(flat))
    for factor in LSP_GRID_REFINE:
        grid = np.linspace(0.0, np.pi, grid_points * factor)
        p, q = _sum_diff_polys(flat[todo])
        wp, ok_p = _roots(_cos_series(p), grid)
        wq, ok_q = _roots(_cos_series(q), grid)
        ok = ok_p & ok_q
        out[todo[ok]] = np.sort(np.concatenate([wp[ok], wq[ok]], axis=-1), axis=-1)
        todo = todo[~ok]
        if not len(todo):
            break
    if len(todo):
        raise LspError(f"root search failed for {len(todo)} of {len(flat)} filters")
    return out.reshape(coeffs.shape)


def lpc_to_lsp_robust(coeffs, chunk: int = 256) -> np.ndarray:
    """Batched :func:`lpc_to_lsp` that never gives up on a frame.

    Rows whose roots are too close for the default grid are retried on
    finer grids; if that still fails (or the filter is marginally
    unstable) the poles are pulled inward by bandwidth expansion until the
    conversion succeeds.
    """
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    out = np.empty_like(coeffs)
    for s in range(0, len(coeffs), chunk):
        block = coeffs[s:s + chunk]
        try:
            out[s:s + chunk] = lpc_to_lsp(block)
            continue
        except LspError:
            pass
        for i, c in enumerate(block):
            out[s + i] = _lsp_one(c)
    return out


def _lsp_one(c):
    k = np.arange(1, c.shape[-1] + 1)
    for gamma in (1.0, 0.999, 0.995, 0.99, 0.98, 0.95, 0.9):
        cg = c * gamma ** k
        if not is_stable(cg):
            continue
        try:
            w = lpc_to_lsp(cg)
        except LspError:
            continue
        if np.all(np.diff(w) > 0):
            return w
    raise LspError("could not convert LPC coefficients to LSP even after bandwidth expansion")


def _quad_factors(w):
    """``1 - 2 cos(w) z^-1 + z^-2`` for each angle: shape ``w.shape + (3,)``."""
    f = np.empty(w.shape + (3,))
    f[..., 0] = 1.0
    f[..., 1] = -2.0 * np.cos(w)
    f[..., 2] = 1.0
    return f


def _polymul(a, b):
    n = a.shape[-1] + b.shape[-1] - 1
    out = np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (n,))
    for i in range(b.shape[-1]):
        out[..., i:i + a.shape[-1]] += a * b[..., i:i + 1]
    return out


def _poly_product(factors):
    """Product over axis -2 of a stack of polynomials."""
    out = factors[..., 0, :]
    for i in range(1, factors.shape[-2]):
        out = _polymul(out, factors[..., i, :])
    return out


def check_lsp(lsp) -> None:
    lsp = np.asarray(lsp, dtype=np.float64)
    if np.any(lsp <= 0) or np.any(lsp >= np.pi) or np.any(np.diff(lsp, axis=-1) <= 0):
        raise LspError("LSP values must be strictly increasing inside (0, pi)")


def lsp_to_lpc(lsp, check: bool = True) -> np.ndarray:
    """Predictor coefficients from line spectral pairs."""
    lsp = np.asarray(lsp, dtype=np.float64)
    if check:
        check_lsp(lsp)
    fp = _quad_factors(lsp[..., 0::2])
    fq = _quad_factors(lsp[..., 1::2])
    one = np.ones(lsp.shape[:-1] + (1,))
    P = _polymul(_poly_product(fp), np.concatenate([one, one], axis=-1))
    Q = _polymul(_poly_product(fq), np.concatenate([one, -one], axis=-1))
    a = 0.5 * (P + Q)
    return -a[..., 1:lsp.shape[-1] + 1]


def lsp_to_lpc_jacobian(lsp) -> np.ndarray:
    """``d coeffs / d lsp`` with shape ``lsp.shape + (M,)``: ``J[..., i, k] = dl_k/dw_i``."""
    lsp = np.asarray(lsp, dtype=np.float64)
    m = lsp.shape[-1]
    jac = np.zeros(lsp.shape + (m,))
    one = np.ones(lsp.shape[:-1] + (1,))
    for parity, tail in ((0, np.concatenate([one, one], axis=-1)), (1, np.concatenate([one, -one], axis=-1))):
        ws = lsp[..., parity::2]
        f = _quad_factors(ws)
        h = ws.shape[-1]
        for j in range(h):
            others = np.delete(f, j, axis=-2)
            prod = _poly_product(others) if h > 1 else np.ones(ws.shape[:-1] + (1,))
            dfac = np.zeros(ws.shape[:-1] + (3,))
            dfac[..., 1] = 2.0 * np.sin(ws[..., j])
            d = _polymul(_polymul(prod, dfac), tail)
            jac[..., parity + 2 * j, :] = -0.5 * d[..., 1:m + 1]
    return jac


def repair_lsp(lsp, min_gap: float = LSP_MIN_GAP, stabilize: bool = True) -> np.ndarray:
    """Sort and enforce a minimum spacing (and margins from 0 and pi).

    With ``stabilize`` any row whose synthesis filter is still numerically
    unstable is re-spaced with the wider gaps of ``LSP_STABLE_GAPS`` until
    it is stable.
    """
    w = _space_lsp(lsp, min_gap)
    if not stabilize:
        return w
    flat = w.reshape(-1, w.shape[-1])
    bad = ~is_stable(lsp_to_lpc(flat, check=False))
    for gap in LSP_STABLE_GAPS:
        if not bad.any() or gap <= min_gap:
            continue
        rows = np.nonzero(bad)[0]
        flat[rows] = _space_lsp(flat[rows], gap)
        bad[rows] = ~is_stable(lsp_to_lpc(flat[rows], check=False))
    return flat.reshape(w.shape)


def _space_lsp(lsp, min_gap: float) -> np.ndarray:
    w = np.sort(np.asarray(lsp, dtype=np.float64), axis=-1)
    m = w.shape[-1]
    w[..., 0] = np.maximum(w[..., 0], min_gap)
    for i in range(1, m):
        w[..., i] = np.maximum(w[..., i], w[..., i - 1] + min_gap)
    w[..., -1] = np.minimum(w[..., -1], np.pi - min_gap)
    for i in range(m - 2, -1, -1):
        w[..., i] = np.minimum(w[..., i], w[..., i + 1] - min_gap)
    return w


# ---------------------------------------------------------------------------
# residual and synthesis


def lag_matrix(context) -> np.ndarray:
    """``X[..., t, k] = context[..., 256 + t - 1 - k]`` for the 512-sample span."""
    context = np.asarray(context)
    t = np.arange(SPAN_LEN)[:, None]
    k = np.arange(ORDER)[None, :]
    return context[..., SPAN_START + t - 1 - k]


def compute_residual(samples, quantized_coeffs) -> np.ndarray:
    """Windowed inverse filtering of the span over seven overlapping sub-frames.

    Each sub-frame's filter history comes from the real samples preceding it.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape != (CONTEXT_LEN,):
        raise ValueError(f"expected {CONTEXT_LEN} samples")
    l = np.asarray(quantized_coeffs, dtype=np.float64)
    a = np.concatenate([[1.0], -l])
    offsets, wins = subframe_windows()
    out = np.zeros(SPAN_LEN)
    for o, w in zip(offsets, wins):
        start = SPAN_START + o
        seg = x[start - ORDER:start + SUBFRAME_LEN]
        e = np.convolve(seg, a, mode="valid")
        out[o:o + SUBFRAME_LEN] += w * e
    return out


def residual_batch(contexts, coeffs) -> np.ndarray:
    """Vectorized :func:`compute_residual` over a stack of contexts."""
    contexts = np.asarray(contexts, dtype=np.float64)
    X = lag_matrix(contexts)
    span = contexts[..., SPAN_START:SPAN_START + SPAN_LEN]
    pred = np.einsum("...tk,...k->...t", X, np.asarray(coeffs, dtype=np.float64))
    return subframe_envelope() * (span - pred)


def synthesize(residual, quantized_coeffs, history=None) -> np.ndarray:
    """All-pole synthesis ``y_t = e_t + sum_k l_k y_{t-k}``.

    ``history`` holds the 16 output samples immediately preceding the
    span, oldest first.
    """
    e = np.asarray(residual, dtype=np.float64)
    l = np.asarray(quantized_coeffs, dtype=np.float64)
    a = np.concatenate([[1.0], -l])
    if history is None or not np.any(history):
        return sps.lfilter([1.0], a, e)
    zi = sps.lfiltic([1.0], a, np.asarray(history, dtype=np.float64)[::-1])
    y, _ = sps.lfilter([1.0], a, e, zi=zi)
    return y


# ---------------------------------------------------------------------------
# differentiable pieces for collaborative quantization


def lsp_to_lpc_node(lsp: dg.Node) -> dg.Node:
    """Graph op for :func:`lsp_to_lpc` over a ``(B, 16)`` batch."""
    w = lsp.value.astype(np.float64)
    y = lsp_to_lpc(w, check=False).astype(lsp.value.dtype)

    def fn(g):
        jac = lsp_to_lpc_jacobian(w)
        dg._accum(lsp, np.einsum("bik,bk->bi", jac, g))

    return dg._make(y, (lsp,), fn)


def repair_lsp_node(lsp: dg.Node, min_gap: float = LSP_MIN_GAP) -> dg.Node:
    """:func:`repair_lsp` in the forward pass, identity (straight-through) gradient."""
    y = repair_lsp(lsp.value.astype(np.float64), min_gap).astype(lsp.value.dtype)
    return dg._make(y, (lsp,), lambda g: dg._accum(lsp, g))


def residual_node(contexts, coeffs: dg.Node, lags=None) -> dg.Node:
    """Graph op: sub-frame residual of fixed contexts as a function of coefficients."""
    contexts = np.asarray(contexts)
    X = lag_matrix(contexts) if lags is None else lags
    env = subframe_envelope().astype(coeffs.value.dtype)
    span = contexts[:, SPAN_START:SPAN_START + SPAN_LEN]
    y = (env * (span - np.einsum("btk,bk->bt", X, coeffs.value))).astype(coeffs.value.dtype)

    def fn(g):
        dg._accum(coeffs, -np.einsum("bt,btk->bk", g * env, X))

    return dg._make(y, (coeffs,), fn)


def synthesis_node(u: dg.Node, coeffs: dg.Node) -> dg.Node:
    """Graph op: zero-state all-pole filtering of each row of ``u`` with its own coefficients."""
    u, coeffs = dg.constant(u), dg.constant(coeffs)
    U = u.value.astype(np.float64)
    L = coeffs.value.astype(np.float64)
    B, T = U.shape
    Y = np.empty_like(U)
    for b in range(B):
        Y[b] = sps.lfilter([1.0], np.concatenate([[1.0], -L[b]]), U[b])

    def fn(g):
        g = g.astype(np.float64)
        V = np.empty_like(g)
        for b in range(B):
            V[b] = sps.lfilter([1.0], np.concatenate([[1.0], -L[b]]), g[b, ::-1])[::-1]
        if u.requires_grad:
            dg._accum(u, V)
        if coeffs.requires_grad:
            gl = np.empty_like(L)
            for k in range(1, ORDER + 1):
                gl[:, k - 1] = np.sum(V[:, k:] * Y[:, :T - k], axis=1)
            dg._accum(coeffs, gl)

    return dg._make(Y.astype(u.value.dtype), (u, coeffs), fn)
