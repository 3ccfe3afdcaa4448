"""The convolutional autoencoder coding module and its training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .dsp import FRAME_LEN, MEL_BANK_SIZES, mel_filterbank
from .softquant import SoftQuantizer, entropy_node, penalty_node, uniform_centroids

CODE_LEN = FRAME_LEN // 2
NWC_CENTROIDS = 32
BOTTLENECK = 20
LEAK = 0.2
GLU_DILATIONS = (1, 2)
# Fixed gain between the signal domain and the network's internal scale.
# Normalized-speech LPC residuals have a standard deviation of about 0.02;
# scaling by this gain lets the tanh code use its range from the first step
# instead of waiting for Adam to grow the outer weights.
INPUT_GAIN = 30.0


@dataclass
class LossWeights:
    mse: float = 1.0
    mel: float = 0.1
    q: float = 0.5
    ent: float = 0.0


def _init(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv:
    """Weights and bias of one ``(k, C_in, C_out)`` convolution."""

    def __init__(self, store, name, k, cin, cout, rng, dtype, stride=1, dilation=1):
        self.w = store.add(f"{name}.w", _init(rng, (k, cin, cout), k * cin, k * cout, dtype))
        self.b = store.add(f"{name}.b", np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.dilation = dilation
        self.name = name

    def __call__(self, x):
        return dg.conv1d(x, self.w, self.b, self.stride, self.dilation)


class GluBlock:
    """Bottleneck -> two dilated convs -> expansion, gated by a sigmoid path, plus identity."""

    def __init__(self, store, name, channels, rng, dtype):
        self.reduce = Conv(store, f"{name}.reduce", 1, channels, BOTTLENECK, rng, dtype)
        self.dilated = [
            Conv(store, f"{name}.dil{d}", 15, BOTTLENECK, BOTTLENECK, rng, dtype, dilation=d)
            for d in GLU_DILATIONS
        ]
        self.expand = Conv(store, f"{name}.expand", 9, BOTTLENECK, channels, rng, dtype)
        self.gate = Conv(store, f"{name}.gate", 1, BOTTLENECK, channels, rng, dtype)

    def __call__(self, x):
        b = dg.leaky_relu(self.reduce(x), LEAK)
        h = b
        for conv in self.dilated:
            h = dg.leaky_relu(conv(h), LEAK)
        return dg.add(x, dg.mul(self.expand(h), dg.sigmoid(self.gate(b))))


class NwcModule:
    """Encoder, quantizer and decoder for 512-sample frames and 256 codes.

    Graph methods (``encode_graph`` etc.) take and return
    :class:`~nwcodec.diffgraph.Node`; ``encode``/``decode`` work on arrays.
    """

    def __init__(self, store: dg.ParamStore, prefix: str = "nwc", seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.store = store
        self.prefix = prefix
        p = prefix
        self.enc_expand = Conv(store, f"{p}.enc.expand", 55, 1, 100, rng, dtype)
        self.enc_glu1 = [GluBlock(store, f"{p}.enc.glu1.{i}", 100, rng, dtype) for i in range(2)]
        self.enc_down = Conv(store, f"{p}.enc.down", 9, 100, 100, rng, dtype, stride=2)
        self.enc_glu2 = [GluBlock(store, f"{p}.enc.glu2.{i}", 100, rng, dtype) for i in range(2)]
        self.enc_reduce = Conv(store, f"{p}.enc.reduce", 9, 100, 1, rng, dtype)
        self.dec_expand = Conv(store, f"{p}.dec.expand", 9, 1, 100, rng, dtype)
        self.dec_glu1 = [GluBlock(store, f"{p}.dec.glu1.{i}", 100, rng, dtype) for i in range(2)]
        self.dec_up_dw = store.add(f"{p}.dec.up.depthwise.w", _init(rng, (9, 100), 9, 9, dtype))
        self.dec_up_dw_b = store.add(f"{p}.dec.up.depthwise.b", np.zeros(100, dtype=dtype))
        self.dec_up_pw = Conv(store, f"{p}.dec.up.pointwise", 1, 100, 100, rng, dtype)
        self.dec_glu2 = [GluBlock(store, f"{p}.dec.glu2.{i}", 50, rng, dtype) for i in range(2)]
        self.dec_reduce = Conv(store, f"{p}.dec.reduce", 55, 50, 1, rng, dtype)
        centroids = uniform_centroids(NWC_CENTROIDS, -1.0, 1.0, open_interval=True)
        self.quantizer = SoftQuantizer(store, f"{p}.quant", centroids, dtype=dtype)

    @property
    def param_names(self) -> list[str]:
        return [n for n in self.store if n.startswith(self.prefix + ".")]

    # -- graph ---------------------------------------------------------------

    def encode_graph(self, x):
        x = dg.constant(x)
        if x.value.ndim == 2:
            x = dg.reshape(x, x.shape + (1,))
        if x.shape[1] != FRAME_LEN:
            raise ValueError(f"encode expects frames of {FRAME_LEN} samples, got {x.shape[1]}")
        h = dg.leaky_relu(self.enc_expand(dg.scale(x, INPUT_GAIN)), LEAK)
        for blk in self.enc_glu1:
            h = blk(h)
        h = dg.leaky_relu(self.enc_down(h), LEAK)
        for blk in self.enc_glu2:
            h = blk(h)
        h = dg.tanh(self.enc_reduce(h))
        return dg.reshape(h, (h.shape[0], CODE_LEN))

    def upsample_graph(self, h):
        """Depthwise 9-tap conv, pointwise 100x100 mix, then subpixel shuffle to (2N, 50)."""
        h = dg.depthwise_conv1d(h, self.dec_up_dw, self.dec_up_dw_b)
        h = dg.leaky_relu(self.dec_up_pw(h), LEAK)
        return dg.subpixel_shuffle(h)

    def decode_graph(self, code):
        code = dg.constant(code)
        if code.shape[-1] != CODE_LEN:
            raise ValueError(f"decode expects {CODE_LEN} codes, got {code.shape[-1]}")
        h = dg.reshape(code, (code.shape[0], CODE_LEN, 1))
        h = dg.leaky_relu(self.dec_expand(h), LEAK)
        for blk in self.dec_glu1:
            h = blk(h)
        h = self.upsample_graph(h)
        for blk in self.dec_glu2:
            h = blk(h)
        h = dg.scale(self.dec_reduce(h), 1.0 / INPUT_GAIN)
        return dg.reshape(h, (h.shape[0], FRAME_LEN))

    def forward_train(self, x, quantize: bool = True):
        """Soft-quantized pass; returns ``(reconstruction, soft assignment or None)``."""
        code = self.encode_graph(x)
        if not quantize:
            return self.decode_graph(code), None
        q, A = self.quantizer.soft(code)
        return self.decode_graph(q), A

    # -- arrays --------------------------------------------------------------

    def _dtype(self):
        return self.enc_expand.w.value.dtype

    def encode(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        single = frames.ndim == 1
        x = np.atleast_2d(frames).astype(self._dtype())
        if x.shape[-1] != FRAME_LEN:
            raise ValueError(f"encode expects frames of {FRAME_LEN} samples")
        out = self.encode_graph(dg.constant(x)).value
        return out[0] if single else out

    def decode(self, codes) -> np.ndarray:
        codes = np.asarray(codes)
        single = codes.ndim == 1
        c = np.atleast_2d(codes).astype(self._dtype())
        if c.shape[-1] != CODE_LEN:
            raise ValueError(f"decode expects {CODE_LEN} codes")
        out = self.decode_graph(dg.constant(c)).value
        return out[0] if single else out

    def quantize_indices(self, codes) -> np.ndarray:
        return self.quantizer.hard(codes)[1]

    def decode_indices(self, indices) -> np.ndarray:
        return self.decode(self.quantizer.dequantize(indices))

    def code_frames(self, frames) -> tuple[np.ndarray, np.ndarray]:
        """Test-mode coding: ``(indices, reconstruction)``."""
        idx = self.quantize_indices(self.encode(frames))
        return idx, self.decode_indices(idx)


def param_count(module: NwcModule) -> int:
    return sum(module.store[n].value.size for n in module.param_names)


def param_breakdown(module: NwcModule) -> dict[str, int]:
    """Trainable scalars grouped by layer (GLU blocks aggregated)."""
    groups: dict[str, int] = {}
    for n in module.param_names:
        parts = n[len(module.prefix) + 1:].split(".")
        if parts[0] in ("enc", "dec"):
            key = ".".join(parts[:3]) if parts[1].startswith("glu") else ".".join(parts[:2])
        else:
            key = parts[0]
        groups[key] = groups.get(key, 0) + module.store[n].value.size
    return groups


def layer_shapes(module: NwcModule, batch: int = 1) -> list[tuple[str, tuple, tuple]]:
    """``(layer, input shape, output shape)`` rows for a forward pass, per-sample shapes."""
    rows = []
    x = dg.constant(np.zeros((batch, FRAME_LEN, 1), dtype=module._dtype()))

    def rec(name, a, b):
        rows.append((name, a.shape[1:], b.shape[1:]))

    h = dg.leaky_relu(module.enc_expand(x), LEAK)
    rec("enc.expand", x, h)
    g = h
    for blk in module.enc_glu1:
        g = blk(g)
    rec("enc.glu1", h, g)
    d = dg.leaky_relu(module.enc_down(g), LEAK)
    rec("enc.down", g, d)
    g = d
    for blk in module.enc_glu2:
        g = blk(g)
    rec("enc.glu2", d, g)
    c = dg.tanh(module.enc_reduce(g))
    rec("enc.reduce", g, c)
    h = dg.leaky_relu(module.dec_expand(c), LEAK)
    rec("dec.expand", c, h)
    g = h
    for blk in module.dec_glu1:
        g = blk(g)
    rec("dec.glu1", h, g)
    u = module.upsample_graph(g)
    rec("dec.up", g, u)
    g = u
    for blk in module.dec_glu2:
        g = blk(g)
    rec("dec.glu2", u, g)
    y = module.dec_reduce(g)
    rec("dec.reduce", g, y)
    return rows


# ---------------------------------------------------------------------------
# loss


# DFT magnitudes enter the mel term divided by sqrt(N), which puts spectral
# energy on the same scale as the waveform (Parseval).  Unscaled, the four
# banks outweigh the squared error by two orders of magnitude and the codec
# learns magnitude matching with arbitrary phase, which does not add up
# across a residual cascade.
MEL_MAGNITUDE_SCALE = 1.0 / np.sqrt(FRAME_LEN)


def _mel_weights(dtype):
    return [(mel_filterbank(b).weights.T * MEL_MAGNITUDE_SCALE).astype(dtype) for b in MEL_BANK_SIZES]


def reconstruction_terms(x, xhat) -> tuple[dg.Node, dg.Node]:
    """Per-batch means of the waveform squared error sum and the four-bank mel error sum."""
    x, xhat = dg.constant(x), dg.constant(xhat)
    dtype = xhat.value.dtype
    mse = dg.reduce_mean(dg.sum_last(dg.square(dg.sub(x, xhat))))
    mx = dg.magnitude_dft(x)
    my = dg.magnitude_dft(xhat)
    mel_terms = []
    for W in _mel_weights(dtype):
        diff = dg.sub(dg.linear_map(mx, W), dg.linear_map(my, W))
        mel_terms.append(dg.reduce_mean(dg.sum_last(dg.square(diff))))
    return mse, dg.stack_sum(mel_terms)


def loss(x, xhat, assignments, weights: LossWeights, quant_terms: bool = True):
    """Training objective.

    ``assignments`` is a list of soft assignment nodes (one per quantizer);
    their penalties and entropies are summed.  Returns ``(total, parts)``
    where ``parts`` holds float values of each term.
    """
    mse, mel = reconstruction_terms(x, xhat)
    total = dg.add(dg.scale(mse, weights.mse), dg.scale(mel, weights.mel))
    parts = {"mse": float(mse.value), "mel": float(mel.value)}
    if assignments:
        pen = dg.stack_sum([penalty_node(A) for A in assignments])
        ent = dg.stack_sum([entropy_node(A) for A in assignments])
        parts["lq"] = float(pen.value)
        parts["entropy"] = float(ent.value)
        if quant_terms:
            total = dg.add(total, dg.scale(pen, weights.q))
            if weights.ent:
                total = dg.add(total, dg.scale(ent, weights.ent))
    parts["recon"] = weights.mse * parts["mse"] + weights.mel * parts["mel"]
    parts["total"] = float(total.value)
    return total, parts
