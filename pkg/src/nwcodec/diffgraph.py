"""A small reverse-mode autodiff engine for the codec's layer set.

Values are numpy arrays; activations are laid out ``(batch, length,
channels)``.  Each operation returns a :class:`Node` that remembers its
parents and a closure that pushes the output gradient back to them.
There is no broadcasting beyond what the layers below need.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def parameter(x, name=None) -> Node:
    return Node(np.array(x), requires_grad=True, name=name)


def _accum(node: Node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


# While a list, the nonsmooth ops (absolute, leaky_relu) append the sign
# pattern of their input so gradient_check can notice a probe step that
# crosses a kink.
_kink_log: list | None = None


def _log_kink(x: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(x > 0)


def _make(value, parents, fn) -> Node:
    parents = tuple(parents)
    out = Node(value, parents)
    if out.requires_grad:
        out.backward_fn = fn
    return out


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node.parents:
                # intermediate gradients are not needed once propagated
                node.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Node, b: Node) -> Node:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def fn(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.value + b.value, (a, b), fn)


def sub(a: Node, b: Node) -> Node:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def fn(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.value - b.value, (a, b), fn)


def mul(a: Node, b: Node) -> Node:
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def fn(g):
        if a.requires_grad:
            _accum(a, g * b.value)
        if b.requires_grad:
            _accum(b, g * a.value)

    return _make(a.value * b.value, (a, b), fn)


def scale(a: Node, c: float) -> Node:
    a = constant(a)
    return _make(a.value * c, (a,), lambda g: _accum(a, g * c))


def scalar_mul(a: Node, s: Node) -> Node:
    """Multiply ``a`` by a size-1 node ``s`` (e.g. a loss weight or alpha)."""
    a, s = constant(a), constant(s)
    sv = s.value.reshape(())

    def fn(g):
        if a.requires_grad:
            _accum(a, g * sv)
        if s.requires_grad:
            _accum(s, np.sum(g * a.value).reshape(s.shape))

    return _make(a.value * sv, (a, s), fn)


def exp(a: Node) -> Node:
    a = constant(a)
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: _accum(a, g * y))


def square(a: Node) -> Node:
    a = constant(a)
    return _make(a.value * a.value, (a,), lambda g: _accum(a, 2.0 * g * a.value))


def sqrt(a: Node) -> Node:
    """Square root; the gradient at exact zeros is taken as 0."""
    a = constant(a)
    y = np.sqrt(a.value)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        _accum(a, g * d)

    return _make(y, (a,), fn)


def absolute(a: Node) -> Node:
    a = constant(a)
    _log_kink(a.value)
    return _make(np.abs(a.value), (a,), lambda g: _accum(a, g * np.sign(a.value)))


def tanh(a: Node) -> Node:
    a = constant(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def sigmoid(a: Node) -> Node:
    a = constant(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(y, (a,), lambda g: _accum(a, g * y * (1.0 - y)))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    a = constant(a)
    _log_kink(a.value)
    if 0.0 <= slope <= 1.0:
        y = np.maximum(a.value, slope * a.value)
    else:
        y = np.where(a.value > 0, a.value, slope * a.value)
    return _make(y, (a,), lambda g: _accum(a, np.where(a.value > 0, g, slope * g)))


# ---------------------------------------------------------------------------
# reductions and reshapes


def reduce_sum(a: Node) -> Node:
    a = constant(a)
    return _make(np.sum(a.value), (a,), lambda g: _accum(a, np.broadcast_to(g, a.shape)))


def reduce_mean(a: Node) -> Node:
    a = constant(a)
    n = a.value.size
    return _make(np.mean(a.value), (a,), lambda g: _accum(a, np.broadcast_to(g / n, a.shape)))


def sum_last(a: Node) -> Node:
    """Sum over every axis except the first; keeps one value per batch row."""
    a = constant(a)
    axes = tuple(range(1, a.value.ndim))

    def fn(g):
        _accum(a, np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), a.shape))

    return _make(np.sum(a.value, axis=axes), (a,), fn)


def reshape(a: Node, shape) -> Node:
    a = constant(a)
    return _make(a.value.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def stack_sum(nodes) -> Node:
    """Sum of equally shaped nodes."""
    nodes = [constant(n) for n in nodes]
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise ValueError("stack_sum: shape mismatch")
    value = nodes[0].value.copy()
    for n in nodes[1:]:
        value = value + n.value

    def fn(g):
        for n in nodes:
            _accum(n, g)

    return _make(value, nodes, fn)


# ---------------------------------------------------------------------------
# matrix ops used by the quantizer


def softmax_rows(z: Node) -> Node:
    """Softmax along the last axis (max-subtracted)."""
    z = constant(z)
    e = np.exp(z.value - np.max(z.value, axis=-1, keepdims=True))
    y = e / np.sum(e, axis=-1, keepdims=True)

    def fn(g):
        _accum(z, y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _make(y, (z,), fn)


def pairwise_diff(h: Node, beta: Node) -> Node:
    """``D[n, k] = h[n] - beta[k]`` for 1-D ``h`` and ``beta``."""
    h, beta = constant(h), constant(beta)
    y = h.value[:, None] - beta.value[None, :]

    def fn(g):
        if h.requires_grad:
            _accum(h, np.sum(g, axis=1))
        if beta.requires_grad:
            _accum(beta, -np.sum(g, axis=0))

    return _make(y, (h, beta), fn)


def matvec(A: Node, v: Node) -> Node:
    """``A @ v`` for ``A`` of shape ``(N, K)`` and ``v`` of shape ``(K,)``."""
    A, v = constant(A), constant(v)

    def fn(g):
        if A.requires_grad:
            _accum(A, np.outer(g, v.value))
        if v.requires_grad:
            _accum(v, A.value.T @ g)

    return _make(A.value @ v.value, (A, v), fn)


def column_mean_entropy(A: Node) -> Node:
    """Entropy in bits of the column means of ``A`` (0 log 0 = 0)."""
    A = constant(A)
    n = A.shape[0]
    p = np.mean(A.value, axis=0)
    nz = p > 0
    h = -np.sum(p[nz] * np.log2(p[nz]))

    def fn(g):
        d = -(np.log2(np.maximum(p, 1e-30)) + 1.0 / np.log(2.0)) / n
        _accum(A, np.broadcast_to(g * d, A.shape))

    return _make(np.asarray(h, dtype=A.value.dtype), (A,), fn)


def linear_map(x: Node, W) -> Node:
    """``x @ W`` along the last axis for a fixed matrix ``W``."""
    x = constant(x)
    return _make(x.value @ W, (x,), lambda g: _accum(x, g @ W.T))


def magnitude_dft(x: Node, eps: float = 1e-12) -> Node:
    """One-sided DFT magnitude of rows of ``x`` (shape ``(B, n)``)."""
    from .dsp import dft_matrices

    x = constant(x)
    C, S = dft_matrices(x.shape[-1], x.value.dtype.type)
    re, im = x.value @ C, x.value @ S
    mag = np.sqrt(re * re + im * im)

    def fn(g):
        inv = g / np.maximum(mag, eps)
        _accum(x, (inv * re) @ C.T + (inv * im) @ S.T)

    return _make(mag, (x,), fn)


# ---------------------------------------------------------------------------
# convolutions


def _same_padding(k: int, dilation: int) -> tuple[int, int]:
    total = dilation * (k - 1)
    return total // 2, total - total // 2


def _windows(xp: np.ndarray, k: int, out_len: int, stride: int, dilation: int) -> np.ndarray:
    b, _, c = xp.shape
    sb, sl, sc = xp.strides
    return as_strided(xp, (b, out_len, k, c), (sb, sl * stride, sl * dilation, sc), writeable=False)


def _conv_forward(xp, w, out_len, stride, dilation):
    """Correlate padded ``xp`` with ``w``, choosing the cheaper GEMM layout.

    With more input than output channels it is cheaper to project every
    input sample onto all ``k * C_out`` taps first and shift-add the
    results than to materialize ``k * C_in`` columns.
    """
    B = xp.shape[0]
    k, cin, cout = w.shape
    if cout >= cin or k == 1:
        cols = _windows(xp, k, out_len, stride, dilation).reshape(B * out_len, k * cin)
        return (cols @ w.reshape(k * cin, cout)).reshape(B, out_len, cout)
    Lp = xp.shape[1]
    z = (xp.reshape(B * Lp, cin) @ w.transpose(1, 0, 2).reshape(cin, k * cout)).reshape(B, Lp, k, cout)
    y = np.zeros((B, out_len, cout), dtype=z.dtype)
    for t in range(k):
        s = t * dilation
        y += z[:, s:s + (out_len - 1) * stride + 1:stride, t, :]
    return y


def conv1d(x: Node, w: Node, bias: Node | None = None, stride: int = 1, dilation: int = 1) -> Node:
    """Zero-padded "same" 1-D convolution.

    ``x``: ``(B, L, C_in)``; ``w``: ``(k, C_in, C_out)``; output length is
    ``ceil(L / stride)``.  Output sample ``i`` is centered on input sample
    ``i * stride``.
    """
    x, w = constant(x), constant(w)
    if x.value.ndim != 3:
        raise ValueError(f"conv1d input must be (B, L, C), got {x.shape}")
    k, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ValueError(f"conv1d: input has {x.shape[2]} channels, kernel expects {cin}")
    if k % 2 == 0 or stride < 1 or dilation < 1:
        raise ValueError("conv1d needs an odd kernel, stride >= 1 and dilation >= 1")
    B, L, _ = x.shape
    out_len = -(-L // stride)
    left, right = _same_padding(k, dilation)
    need = (out_len - 1) * stride + dilation * (k - 1) + 1
    right = max(right, need - L - left)
    xp = np.pad(x.value, ((0, 0), (left, right), (0, 0)))
    y = _conv_forward(xp, w.value, out_len, stride, dilation)
    if bias is not None:
        bias = constant(bias)
        y += bias.value
    parents = (x, w) if bias is None else (x, w, bias)

    def fn(g):
        g2 = g.reshape(B * out_len, cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        narrow = cout < cin
        gz = None
        if x.requires_grad or (w.requires_grad and narrow):
            # zero-stuff the output gradient back onto the padded input grid;
            # gz[:, span + j] holds the gradient of the output centered at j
            span = dilation * (k - 1)
            Lp = xp.shape[1]
            gz = np.zeros((B, span + Lp, cout), dtype=g.dtype)
            gz[:, span:span + (out_len - 1) * stride + 1:stride, :] = g
        if w.requires_grad:
            if narrow:
                gcols = _windows(gz, k, Lp, 1, dilation).reshape(B * Lp, k, cout)
                xt = xp.reshape(B * Lp, cin).T
                gw = np.stack([xt @ gcols[:, k - 1 - t, :] for t in range(k)])
            else:
                cols = _windows(xp, k, out_len, stride, dilation).reshape(B * out_len, k * cin)
                gw = (cols.T @ g2).reshape(k, cin, cout)
            _accum(w, gw)
        if x.requires_grad:
            # transposed convolution: correlate with the flipped, channel-transposed kernel
            wf = w.value[::-1].transpose(0, 2, 1).reshape(k * cout, cin)
            gcols = _windows(gz[:, left:], k, L, 1, dilation).reshape(B * L, k * cout)
            _accum(x, (gcols @ wf).reshape(B, L, cin))

    return _make(y, parents, fn)


def depthwise_conv1d(x: Node, w: Node, bias: Node | None = None) -> Node:
    """Per-channel "same" convolution; ``w`` has shape ``(k, C)``."""
    x, w = constant(x), constant(w)
    k, c = w.shape
    if x.shape[2] != c:
        raise ValueError(f"depthwise_conv1d: expected {c} channels, got {x.shape[2]}")
    B, L, _ = x.shape
    left, right = _same_padding(k, 1)
    xp = np.pad(x.value, ((0, 0), (left, right), (0, 0)))
    y = np.zeros((B, L, c), dtype=np.result_type(x.value, w.value))
    for t in range(k):
        y += xp[:, t:t + L, :] * w.value[t]
    if bias is not None:
        bias = constant(bias)
        y += bias.value
    parents = (x, w) if bias is None else (x, w, bias)

    def fn(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1)))
        if w.requires_grad:
            _accum(w, np.stack([np.einsum("blc,blc->c", xp[:, t:t + L, :], g) for t in range(k)]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for t in range(k):
                gxp[:, t:t + L, :] += g * w.value[t]
            _accum(x, gxp[:, left:left + L, :])

    return _make(y, parents, fn)


def subpixel_shuffle(x: Node) -> Node:
    """Interlace channel pairs ``(2j, 2j+1)`` into one channel of twice the length.

    ``(B, N, 2C) -> (B, 2N, C)`` with ``out[:, 2n + s, j] = x[:, n, 2j + s]``.
    """
    x = constant(x)
    B, N, C2 = x.shape
    if C2 % 2:
        raise ValueError(f"subpixel_shuffle needs an even channel count, got {C2}")
    y = x.value.reshape(B, N, C2 // 2, 2).transpose(0, 1, 3, 2).reshape(B, 2 * N, C2 // 2)

    def fn(g):
        _accum(x, g.reshape(B, N, 2, C2 // 2).transpose(0, 1, 3, 2).reshape(B, N, C2))

    return _make(y, (x,), fn)


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named parameters plus Adam moment accumulators."""

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        node = parameter(value, name=name)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_optimizer(self):
        """Forget Adam moments and the step count (a fresh optimizer)."""
        for name in self.params:
            self.m[name][...] = 0
            self.v[name][...] = 0
        self.step = 0

    def astype(self, dtype):
        for name, p in self.params.items():
            p.value = p.value.astype(dtype)
            self.m[name] = self.m[name].astype(dtype)
            self.v[name] = self.v[name].astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            a = np.asarray(arrays[name])
            if a.shape != p.value.shape:
                raise ValueError(f"{name}: shape {a.shape} != {p.value.shape}")
            p.value = a.astype(p.value.dtype)


def adam_step(store: ParamStore, learning_rate: float, names=None) -> ParamStore:
    """One bias-corrected Adam update over parameters that received gradients."""
    store.step += 1
    t = store.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name in names if names is not None else store.params:
        p = store.params[name]
        if p.grad is None:
            continue
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.value = (p.value - update).astype(p.value.dtype)
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    labels: list
    steps: np.ndarray | None = None
    roundoff: np.ndarray | None = None

    def relative_errors(self, floor: float = 0.0) -> np.ndarray:
        """Disagreement beyond the rounding bound of each difference quotient,
        relative to the larger gradient magnitude (never below ``floor``)."""
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), floor)
        scale = np.where(scale > 0, scale, 1.0)
        err = np.abs(self.analytic - self.numeric)
        if self.roundoff is not None:
            err = np.maximum(err - self.roundoff, 0.0)
        return err / scale

    def max_relative_error(self, floor: float = 0.0) -> float:
        return float(self.relative_errors(floor).max()) if len(self.analytic) else 0.0


# evaluation error of the loss assumed by the rounding bound, in units of
# the loss's relative machine precision
ROUNDOFF_ULPS = 8.0


def _evaluate(build) -> tuple[float, list]:
    global _kink_log
    _kink_log = []
    try:
        value = float(build().value)
        return value, _kink_log
    finally:
        _kink_log = None


def _same_side(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(build, params, n_samples: int = 100, eps: float = 1e-6, seed: int = 0,
                   max_refine: int = 3) -> GradCheck:
    """Backprop gradients of the scalar ``build()`` against central differences.

    ``params`` is a list of nodes ``build`` reads.  Entries are sampled
    round-robin over the tensors (random position within each), so every
    tensor is probed when ``n_samples >= len(params)``.

    A central difference is only valid where the function is smooth.  When
    either probe flips the sign of an input to ``absolute`` or
    ``leaky_relu`` the step is divided by ten and the probe repeated, up to
    ``max_refine`` times; the step actually used is kept in ``steps``.
    ``roundoff`` bounds the error that rounding of the two loss values alone
    can put into each difference quotient.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    _, base = _evaluate(build)
    out = build()
    backward(out)
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    analytic, numeric, labels, steps, roundoff = [], [], [], [], []
    for i in range(n_samples):
        j = i % len(params)
        p = params[j]
        flat = int(rng.integers(p.value.size))
        idx = np.unravel_index(flat, p.value.shape)
        orig = p.value[idx].copy()
        h = eps
        for attempt in range(max_refine + 1):
            p.value[idx] = orig + h
            up, up_kinks = _evaluate(build)
            p.value[idx] = orig - h
            down, down_kinks = _evaluate(build)
            p.value[idx] = orig
            if attempt == max_refine or (_same_side(base, up_kinks) and _same_side(base, down_kinks)):
                break
            h /= 10.0
        analytic.append(float(grads[j][idx]))
        numeric.append((up - down) / (2.0 * h))
        labels.append((p.name or j, idx))
        steps.append(h)
        ulp = np.finfo(np.result_type(p.value.dtype, np.float32)).eps
        roundoff.append(ROUNDOFF_ULPS * ulp * max(abs(up), abs(down)) / (2.0 * h))
    return GradCheck(np.array(analytic), np.array(numeric), labels, np.array(steps), np.array(roundoff))


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian):
#   b"NWCK"  u16 version
#   u32 header length, header bytes (UTF-8 ``key=value`` lines)
#   u32 array count, then per array:
#     u16 name length, name (UTF-8), u8 ndim, u32 * ndim dims, f32 data (C order)

CKPT_MAGIC = b"NWCK"
CKPT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], header: dict[str, str] | None = None) -> None:
    head = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HI", CKPT_VERSION, len(head)) + head
    out += struct.pack("<I", len(arrays))
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f4")
        raw = name.encode()
        out += struct.pack("<HB", len(raw), a.ndim) + raw
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = {}
    for line in data[pos:pos + hlen].decode().splitlines():
        key, _, val = line.partition("=")
        header[key] = val
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        name = data[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return arrays, header
