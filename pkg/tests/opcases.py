"""Gradient-check cases shared by the unit and acceptance suites.

Each case returns ``(build, params)``: ``build()`` evaluates a scalar that
depends on every node in ``params`` through one operation, contracted with
a fixed random weighting so that all output entries matter.
"""

import numpy as np

from nwcodec import diffgraph as dg
from nwcodec import lpc

FLOOR = 1e-7


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _stable_lpc(rng, max_reflection):
    ks = rng.uniform(-max_reflection, max_reflection, lpc.ORDER)
    a = np.zeros(0)
    for k in ks:
        a = np.concatenate([a - k * a[::-1], [k]])
    return a


def case(name, seed=0):
    rng = np.random.default_rng(seed)
    P = dg.parameter
    if name == "add":
        a, b = P(rng.standard_normal((3, 4))), P(rng.standard_normal((3, 4)))
        op = lambda: dg.add(a, b)
        params = [a, b]
    elif name == "sub":
        a, b = P(rng.standard_normal((3, 4))), P(rng.standard_normal((3, 4)))
        op = lambda: dg.sub(a, b)
        params = [a, b]
    elif name == "mul":
        a, b = P(rng.standard_normal((3, 4))), P(rng.standard_normal((3, 4)))
        op = lambda: dg.mul(a, b)
        params = [a, b]
    elif name == "scale":
        a = P(rng.standard_normal((5, 3)))
        op = lambda: dg.scale(a, -1.7)
        params = [a]
    elif name == "scalar_mul":
        a, s = P(rng.standard_normal((4, 3))), P(rng.standard_normal(1))
        op = lambda: dg.scalar_mul(a, s)
        params = [a, s]
    elif name == "exp":
        a = P(rng.standard_normal((4, 4)))
        op = lambda: dg.exp(a)
        params = [a]
    elif name == "square":
        a = P(rng.standard_normal((4, 4)))
        op = lambda: dg.square(a)
        params = [a]
    elif name == "sqrt":
        a = P(rng.uniform(0.1, 2.0, (4, 4)))
        op = lambda: dg.sqrt(a)
        params = [a]
    elif name == "absolute":
        a = P(_away_from_zero(rng, (4, 4)))
        op = lambda: dg.absolute(a)
        params = [a]
    elif name == "tanh":
        a = P(rng.standard_normal((4, 4)))
        op = lambda: dg.tanh(a)
        params = [a]
    elif name == "sigmoid":
        a = P(rng.standard_normal((4, 4)))
        op = lambda: dg.sigmoid(a)
        params = [a]
    elif name == "leaky_relu":
        a = P(_away_from_zero(rng, (4, 4)))
        op = lambda: dg.leaky_relu(a, 0.2)
        params = [a]
    elif name == "reduce_sum":
        a = P(rng.standard_normal((3, 5)))
        op = lambda: dg.scale(dg.reduce_sum(dg.square(a)), 1.0)
        params = [a]
    elif name == "reduce_mean":
        a = P(rng.standard_normal((3, 5)))
        op = lambda: dg.reduce_mean(dg.square(a))
        params = [a]
    elif name == "sum_last":
        a = P(rng.standard_normal((3, 4, 2)))
        op = lambda: dg.sum_last(a)
        params = [a]
    elif name == "reshape":
        a = P(rng.standard_normal((3, 4)))
        op = lambda: dg.reshape(a, (2, 6))
        params = [a]
    elif name == "stack_sum":
        a, b, c = (P(rng.standard_normal((2, 3))) for _ in range(3))
        op = lambda: dg.stack_sum([a, b, dg.square(c)])
        params = [a, b, c]
    elif name == "softmax_rows":
        z = P(rng.standard_normal((4, 6)))
        op = lambda: dg.softmax_rows(z)
        params = [z]
    elif name == "pairwise_diff":
        h, beta = P(rng.standard_normal(5)), P(rng.standard_normal(4))
        op = lambda: dg.pairwise_diff(h, beta)
        params = [h, beta]
    elif name == "matvec":
        A, v = P(rng.standard_normal((5, 4))), P(rng.standard_normal(4))
        op = lambda: dg.matvec(A, v)
        params = [A, v]
    elif name == "column_mean_entropy":
        z = P(rng.standard_normal((6, 5)))
        op = lambda: dg.column_mean_entropy(dg.softmax_rows(z))
        params = [z]
    elif name == "linear_map":
        x = P(rng.standard_normal((3, 6)))
        W = rng.standard_normal((6, 4))
        op = lambda: dg.linear_map(x, W)
        params = [x]
    elif name == "magnitude_dft":
        x = P(rng.standard_normal((2, 32)))
        op = lambda: dg.magnitude_dft(x)
        params = [x]
    elif name.startswith("conv1d"):
        stride, dilation = {"conv1d": (1, 1), "conv1d_stride": (2, 1), "conv1d_dilated": (1, 2),
                            "conv1d_narrow": (1, 1)}[name]
        cin, cout = (6, 2) if name == "conv1d_narrow" else (3, 4)
        x = P(rng.standard_normal((2, 12, cin)))
        w = P(rng.standard_normal((5, cin, cout)) * 0.5)
        b = P(rng.standard_normal(cout))
        op = lambda: dg.conv1d(x, w, b, stride=stride, dilation=dilation)
        params = [x, w, b]
    elif name == "depthwise_conv1d":
        x = P(rng.standard_normal((2, 10, 3)))
        w = P(rng.standard_normal((5, 3)))
        b = P(rng.standard_normal(3))
        op = lambda: dg.depthwise_conv1d(x, w, b)
        params = [x, w, b]
    elif name == "subpixel_shuffle":
        x = P(rng.standard_normal((2, 5, 6)))
        op = lambda: dg.subpixel_shuffle(x)
        params = [x]
    elif name == "lsp_to_lpc_node":
        w = P(lpc.lpc_to_lsp(np.stack([_stable_lpc(rng, 0.9) for _ in range(3)])))
        op = lambda: lpc.lsp_to_lpc_node(w)
        params = [w]
    elif name == "residual_node":
        ctx = rng.standard_normal((2, lpc.CONTEXT_LEN))
        c = P(np.stack([_stable_lpc(rng, 0.9) for _ in range(2)]))
        op = lambda: lpc.residual_node(ctx, c)
        params = [c]
    elif name == "synthesis_node":
        u = P(rng.standard_normal((2, 64)))
        c = P(np.stack([_stable_lpc(rng, 0.6) for _ in range(2)]))
        op = lambda: lpc.synthesis_node(u, c)
        params = [u, c]
    else:
        raise KeyError(name)
    wrng = np.random.default_rng(seed + 100)
    probe = op()
    weights = dg.constant(wrng.standard_normal(probe.shape))

    def build():
        out = op()
        if out.value.ndim == 0 or out.value.size == 1:
            return dg.scale(dg.reshape(out, ()), 1.3)
        return dg.reduce_sum(dg.mul(out, weights))

    return build, params


OPS = ["add", "sub", "mul", "scale", "scalar_mul", "exp", "square", "sqrt", "absolute", "tanh", "sigmoid",
       "leaky_relu", "reduce_sum", "reduce_mean", "sum_last", "reshape", "stack_sum", "softmax_rows",
       "pairwise_diff", "matvec", "column_mean_entropy", "linear_map", "magnitude_dft", "conv1d",
       "conv1d_stride", "conv1d_dilated", "conv1d_narrow", "depthwise_conv1d", "subpixel_shuffle",
       "lsp_to_lpc_node", "residual_node", "synthesis_node"]
