"""Cascaded residual coding: an optional LPC stage followed by NWC modules.

Each module codes what its predecessors left behind.  With LPC enabled
the first stage transmits quantized LSPs and hands the LPC residual to
the NWC chain; the receiver sums the decoded residual estimates and runs
them through the all-pole synthesis filter.

Training follows two phases.  Phase I trains the modules one after
another on their own input (the LSP quantizer against the LPC prediction,
every NWC against the residual stream left by the frozen modules before
it).  Phase II fine-tunes everything jointly against the signal-domain
reconstruction.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffgraph as dg
from . import dsp
from . import lpc
from .bitstream import Container, ModuleDescriptor, build_huffman, decode_indices, encode_indices
from .nwc import CODE_LEN, LossWeights, NwcModule, loss, reconstruction_terms
from .softquant import (SoftQuantizer, bits_per_frame_to_bps, bps_to_bits_per_frame, entropy_estimate,
                        index_entropy, uniform_centroids)

LSP_CENTROIDS = 256
MAX_NWC = 5
INFER_CHUNK = 64
ENTROPY_STEP = 0.015
RATE_TOLERANCE = 0.1
REFERENCE_BATCH = 128

# mode -> (use_lpc, number of NWC modules, target bitrate in bps)
MODES = {
    "low": (True, 1, 12000.0),
    "mid": (True, 1, 20000.0),
    "high": (True, 2, 32000.0),
}


@dataclass
class CascadeConfig:
    use_lpc: bool = True
    num_nwc: int = 1
    target_bitrate_bps: float = 12000.0

    def __post_init__(self):
        if not 1 <= int(self.num_nwc) <= MAX_NWC:
            raise ValueError(f"num_nwc must be between 1 and {MAX_NWC}, got {self.num_nwc}")
        if not self.target_bitrate_bps > 0:
            raise ValueError("target bitrate must be positive")
        self.num_nwc = int(self.num_nwc)
        self.use_lpc = bool(self.use_lpc)

    @classmethod
    def from_mode(cls, mode: str) -> "CascadeConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
        use_lpc, n, bps = MODES[mode]
        return cls(use_lpc, n, bps)

    @property
    def target_bits_per_frame(self) -> float:
        return bps_to_bits_per_frame(self.target_bitrate_bps)


@dataclass
class EntropyController:
    """Nudges the entropy weight once per epoch toward a bits-per-frame target."""

    target_bits_per_frame: float
    lam: float = 0.0
    step_size: float = ENTROPY_STEP

    def step(self, measured_bits_per_frame: float) -> float:
        if measured_bits_per_frame > self.target_bits_per_frame:
            self.lam += self.step_size
        else:
            self.lam = max(0.0, self.lam - self.step_size)
        return self.lam


def entropy_controller_step(controller: EntropyController, measured_bits_per_frame: float) -> float:
    return controller.step(measured_bits_per_frame)


@dataclass
class TrainConfig:
    """Schedule and optimizer settings for both training phases."""

    epochs: int = 60
    lpc_epochs: int = 10
    phase2_epochs: int = 20
    batch_size: int = 128
    batches_per_epoch: int | None = None
    lr_first: float = 2e-3
    lr_next: float = 2e-4
    lr_lpc: float = 2e-3
    lr_finetune: float = 2e-5
    quant_delay: int = 5
    patience: int | None = 10
    val_frames: int | None = 512
    mse_weight: float = 1.0
    mel_weight: float = 0.1
    q_weight: float = 0.5
    seed: int = 0

    def weights(self, ent: float = 0.0) -> LossWeights:
        return LossWeights(self.mse_weight, self.mel_weight, self.q_weight, ent)

    def scaled_lr(self, lr: float) -> float:
        """Learning rates are quoted for batches of ``REFERENCE_BATCH`` frames and scale linearly."""
        return lr * self.batch_size / REFERENCE_BATCH


# ---------------------------------------------------------------------------
# configuration files

_CASCADE_KEYS = {"use_lpc", "num_nwc", "target_bitrate"}


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    if kind is int:
        return int(raw)
    return float(raw)


def parse_config_text(text: str) -> tuple[dict, TrainConfig, dict]:
    """Read ``key = value`` lines (``#`` starts a comment).

    Returns ``(cascade overrides, TrainConfig, other keys)``; the cascade
    part understands ``use_lpc``, ``num_nwc``, ``target_bitrate`` (bps)
    and ``mode``.  Unknown keys raise ``ValueError``.
    """
    kinds = {"epochs": int, "lpc_epochs": int, "phase2_epochs": int, "batch_size": int,
             "batches_per_epoch": int, "quant_delay": int, "patience": int, "val_frames": int, "seed": int}
    train_names = {f.name for f in fields(TrainConfig)}
    cascade: dict = {}
    train: dict = {}
    other: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        try:
            if key == "use_lpc":
                cascade[key] = _parse_value(val, bool)
            elif key == "num_nwc":
                cascade[key] = int(val)
            elif key == "target_bitrate":
                cascade["target_bitrate_bps"] = float(val)
            elif key == "mode":
                if val not in MODES:
                    raise ValueError(f"unknown mode {val!r}")
                other["mode"] = val
            elif key in ("corpus", "train_corpus", "validation_corpus", "checkpoint"):
                other[key] = val
            elif key in train_names:
                train[key] = _parse_value(val, kinds.get(key, float))
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return cascade, TrainConfig(**train), other


# ---------------------------------------------------------------------------
# signal preparation


def prepare_signal(x) -> tuple[np.ndarray, dsp.Gain]:
    """Normalize, high-pass and pre-emphasize an utterance."""
    y, gain = dsp.normalize(x)
    return dsp.preemphasis(dsp.highpass(y)), gain


def frame_contexts(s) -> np.ndarray:
    """``(n_frames, 1024)`` analysis contexts; frame ``i`` codes ``s[480 i : 480 i + 512]``."""
    s = np.asarray(s, dtype=np.float64)
    n = dsp.num_frames(len(s))
    total = (n - 1) * dsp.HOP + lpc.CONTEXT_LEN
    padded = np.zeros(total)
    padded[lpc.SPAN_START:lpc.SPAN_START + len(s)] = s[:total - lpc.SPAN_START]
    idx = np.arange(n)[:, None] * dsp.HOP + np.arange(lpc.CONTEXT_LEN)[None, :]
    return padded[idx]


@dataclass
class FrameSet:
    """Analysis contexts of many frames plus their unquantized LSPs."""

    contexts: np.ndarray
    lsp: np.ndarray | None = None

    def __len__(self):
        return len(self.contexts)

    @property
    def spans(self) -> np.ndarray:
        return self.contexts[:, lpc.SPAN_START:lpc.SPAN_START + lpc.SPAN_LEN]

    def subset(self, idx) -> "FrameSet":
        return FrameSet(self.contexts[idx], None if self.lsp is None else self.lsp[idx])


def analyze_lsp(contexts) -> np.ndarray:
    return lpc.lpc_to_lsp_robust(lpc.analyze(np.atleast_2d(contexts)))


def build_frames(signals, use_lpc: bool = True) -> FrameSet:
    ctx = [frame_contexts(prepare_signal(x)[0]) for x in signals if len(x)]
    contexts = np.concatenate(ctx) if ctx else np.zeros((0, lpc.CONTEXT_LEN))
    lsp = analyze_lsp(contexts) if use_lpc and len(contexts) else None
    return FrameSet(contexts, lsp)


# ---------------------------------------------------------------------------
# the cascade


@dataclass
class EncodedFrames:
    """Per-module index arrays (``(n, codes)`` each) plus encoder-side reconstructions."""

    indices: list[np.ndarray]
    residual_estimates: list[np.ndarray] = field(default_factory=list)
    coeffs: np.ndarray | None = None


class Cascade:
    """LPC stage (optional) plus a chain of NWC modules sharing one parameter store."""

    def __init__(self, config: CascadeConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.store = dg.ParamStore()
        self.lsp_quantizer = None
        if config.use_lpc:
            self.lsp_quantizer = SoftQuantizer(
                self.store, "lpc.quant", uniform_centroids(LSP_CENTROIDS, 0.0, math.pi, open_interval=True),
                dtype=dtype)
        self.nwcs: list[NwcModule] = []
        for _ in range(config.num_nwc):
            self._new_nwc()
        self.frequencies: dict[str, np.ndarray] = {}

    def _new_nwc(self) -> NwcModule:
        i = len(self.nwcs)
        m = NwcModule(self.store, f"nwc{i}", seed=self.seed * 7919 + i, dtype=self.dtype)
        self.nwcs.append(m)
        return m

    def add_nwc(self) -> NwcModule:
        """Append one more (untrained) NWC module to the chain."""
        if len(self.nwcs) >= MAX_NWC:
            raise ValueError(f"at most {MAX_NWC} NWC modules")
        m = self._new_nwc()
        self.config = CascadeConfig(self.config.use_lpc, len(self.nwcs), self.config.target_bitrate_bps)
        return m

    # -- module bookkeeping --------------------------------------------------

    @property
    def module_names(self) -> list[str]:
        return (["lpc"] if self.lsp_quantizer is not None else []) + [m.prefix for m in self.nwcs]

    def module_codes(self) -> list[int]:
        return ([lpc.ORDER] if self.lsp_quantizer is not None else []) + [CODE_LEN] * len(self.nwcs)

    def quantizers(self) -> list[SoftQuantizer]:
        return ([self.lsp_quantizer] if self.lsp_quantizer is not None else []) + [m.quantizer for m in self.nwcs]

    def param_names(self, module: str) -> list[str]:
        return [n for n in self.store if n.startswith(module + ".")]

    def codebooks(self):
        out = []
        for name, q in zip(self.module_names, self.quantizers()):
            freq = self.frequencies.get(name)
            out.append(build_huffman(np.ones(q.K) if freq is None else freq))
        return out

    # -- LPC helpers -----------------------------------------------------------

    def quantize_lsp(self, lsp) -> tuple[np.ndarray, np.ndarray]:
        """Hard LSP indices and the stable coefficients they decode to."""
        _, idx = self.lsp_quantizer.hard(np.asarray(lsp, dtype=np.float64))
        return idx, self.coeffs_from_indices(idx)

    def coeffs_from_indices(self, idx) -> np.ndarray:
        w = self.lsp_quantizer.dequantize(idx).astype(np.float64)
        return lpc.lsp_to_lpc(lpc.repair_lsp(w))

    # -- inference -----------------------------------------------------------

    def encode_frames(self, contexts, lsp=None, final_estimate: bool = True) -> EncodedFrames:
        """Test-mode cascade encoding of a stack of contexts.

        Runs the modules' decoders as well, since each module's input is
        what its predecessors failed to reconstruct.  The last module's
        reconstruction feeds nothing, so ``final_estimate=False`` skips it
        (``residual_estimates`` then lacks that entry).
        """
        contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        n = len(contexts)
        idx_lists = [[] for _ in self.module_names]
        est = [[] for _ in self.nwcs]
        coeffs_all = []
        for s in range(0, n, INFER_CHUNK):
            ctx = contexts[s:s + INFER_CHUNK]
            m = 0
            if self.lsp_quantizer is not None:
                w = analyze_lsp(ctx) if lsp is None else lsp[s:s + INFER_CHUNK]
                li, coeffs = self.quantize_lsp(w)
                idx_lists[0].append(li)
                coeffs_all.append(coeffs)
                x = lpc.residual_batch(ctx, coeffs)
                m = 1
            else:
                x = ctx[:, lpc.SPAN_START:lpc.SPAN_START + lpc.SPAN_LEN].copy()
            for j, mod in enumerate(self.nwcs):
                ci = mod.quantize_indices(mod.encode(x))
                idx_lists[m + j].append(ci)
                if j == len(self.nwcs) - 1 and not final_estimate:
                    break
                xh = mod.decode_indices(ci).astype(np.float64)
                est[j].append(xh)
                x = x - xh
        cat = [np.concatenate(v) if v else np.zeros((0, c), dtype=np.int64)
               for v, c in zip(idx_lists, self.module_codes())]
        kept = est if final_estimate else est[:-1]
        ests = [np.concatenate(v) if v else np.zeros((0, lpc.SPAN_LEN)) for v in kept]
        return EncodedFrames(cat, ests, np.concatenate(coeffs_all) if coeffs_all else None)

    def decode_residuals(self, indices) -> np.ndarray:
        """Sum of the NWC reconstructions, chunked exactly as in :meth:`encode_frames`."""
        nwc_idx = indices[1:] if self.lsp_quantizer is not None else indices
        if len(nwc_idx) != len(self.nwcs):
            raise ValueError(f"payload has {len(nwc_idx)} NWC streams, cascade has {len(self.nwcs)}")
        n = len(nwc_idx[0]) if nwc_idx else 0
        total = np.zeros((n, lpc.SPAN_LEN))
        for s in range(0, n, INFER_CHUNK):
            for mod, ci in zip(self.nwcs, nwc_idx):
                total[s:s + INFER_CHUNK] += mod.decode_indices(ci[s:s + INFER_CHUNK]).astype(np.float64)
        return total

    def decode_frames(self, indices, history=None) -> np.ndarray:
        """Decoded 512-sample spans, synthesized frame by frame with carried filter history."""
        if len(indices) != len(self.module_names):
            raise ValueError(f"payload has {len(indices)} module streams, cascade expects {len(self.module_names)}")
        ehat = self.decode_residuals(indices)
        if self.lsp_quantizer is None:
            return ehat
        coeffs = self.coeffs_from_indices(np.asarray(indices[0]))
        out = np.empty_like(ehat)
        hist = np.zeros(lpc.ORDER) if history is None else np.asarray(history, dtype=np.float64)
        for i in range(len(ehat)):
            out[i] = lpc.synthesize(ehat[i], coeffs[i], hist)
            hist = out[i, dsp.HOP - lpc.ORDER:dsp.HOP]
        return out

    def encode_signal(self, x) -> Container:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("expected a mono signal")
        if len(x) == 0:
            return self._container([], 0, dsp.Gain(1.0, 1.0, True))
        s, gain = prepare_signal(x)
        enc = self.encode_frames(frame_contexts(s), final_estimate=False)
        books = self.codebooks()
        frames = []
        for i in range(len(enc.indices[0])):
            frames.append([encode_indices(ix[i], cb) for ix, cb in zip(enc.indices, books)])
        return self._container(frames, len(x), gain)

    def _container(self, frames, n, gain) -> Container:
        mods = [ModuleDescriptor("lpc" if name == "lpc" else "nwc", codes, q.beta.value, cb.lengths)
                for name, codes, q, cb in zip(self.module_names, self.module_codes(), self.quantizers(),
                                              self.codebooks())]
        return Container(mods, frames, n, gain, self.lsp_quantizer is not None)

    def check_container(self, c: Container) -> None:
        if (c.frame_len, c.overlap, c.sample_rate) != (dsp.FRAME_LEN, dsp.OVERLAP, dsp.SAMPLE_RATE):
            raise ValueError(f"container geometry T={c.frame_len} o={c.overlap} F={c.sample_rate} "
                             f"does not match the codec ({dsp.FRAME_LEN}, {dsp.OVERLAP}, {dsp.SAMPLE_RATE})")
        if c.use_lpc != (self.lsp_quantizer is not None) or len(c.modules) != len(self.module_names):
            raise ValueError("container module layout does not match the checkpoint")
        for d, codes, q in zip(c.modules, self.module_codes(), self.quantizers()):
            if d.codes_per_frame != codes or d.K != q.K or not np.array_equal(d.centroids, q.beta.value):
                raise ValueError("container quantizer tables do not match the checkpoint")

    def container_indices(self, c: Container) -> list[np.ndarray]:
        self.check_container(c)
        books = [d.codebook() for d in c.modules]
        out = []
        for m, (d, cb) in enumerate(zip(c.modules, books)):
            rows = [decode_indices(fr[m][0], d.codes_per_frame, cb, fr[m][1]) for fr in c.frames]
            out.append(np.array(rows, dtype=np.int64).reshape(len(c.frames), d.codes_per_frame))
        return out

    def decode_container(self, c: Container) -> np.ndarray:
        indices = self.container_indices(c)
        if not c.frames:
            return np.zeros(c.num_samples)
        spans = self.decode_frames(indices)
        y = dsp.overlap_add(spans)[:c.num_samples]
        if len(y) < c.num_samples:
            y = np.concatenate([y, np.zeros(c.num_samples - len(y))])
        return dsp.denormalize(dsp.deemphasis(y), c.gain)

    # -- Huffman statistics ----------------------------------------------------

    def fit_codebooks(self, frames: FrameSet) -> dict[str, np.ndarray]:
        """Index histograms on ``frames`` (the training set) for every module."""
        enc = self.encode_frames(frames.contexts, frames.lsp, final_estimate=False)
        self.frequencies = {name: np.bincount(ix.reshape(-1), minlength=q.K).astype(np.float64)
                            for name, ix, q in zip(self.module_names, enc.indices, self.quantizers())}
        return self.frequencies

    # -- checkpoints -----------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        arrays = self.store.state_dict()
        for name, f in self.frequencies.items():
            arrays[f"huffman.{name}"] = f
        header = {"format": "nwcodec", "use_lpc": int(self.config.use_lpc), "num_nwc": len(self.nwcs),
                  "target_bitrate_bps": self.config.target_bitrate_bps, "frame_len": dsp.FRAME_LEN,
                  "overlap": dsp.OVERLAP, "sample_rate": dsp.SAMPLE_RATE, "seed": self.seed}
        header.update(extra or {})
        dg.save_arrays(path, arrays, {k: str(v) for k, v in header.items()})

    @classmethod
    def load(cls, path) -> "Cascade":
        arrays, header = dg.load_arrays(path)
        if header.get("format") != "nwcodec":
            raise ValueError(f"{path}: not a codec checkpoint")
        geometry = (int(header["frame_len"]), int(header["overlap"]), int(header["sample_rate"]))
        if geometry != (dsp.FRAME_LEN, dsp.OVERLAP, dsp.SAMPLE_RATE):
            raise ValueError(f"{path}: checkpoint geometry {geometry} not supported")
        cfg = CascadeConfig(bool(int(header["use_lpc"])), int(header["num_nwc"]),
                            float(header["target_bitrate_bps"]))
        cas = cls(cfg, seed=int(header.get("seed", 0)))
        cas.store.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("huffman.")})
        cas.frequencies = {k[len("huffman."):]: v.astype(np.float64)
                           for k, v in arrays.items() if k.startswith("huffman.")}
        cas.header = header
        return cas


# ---------------------------------------------------------------------------
# functional entry points


def cascade_encode(cascade: Cascade, context) -> EncodedFrames:
    """Encode a single 1024-sample context (or a stack)."""
    return cascade.encode_frames(np.atleast_2d(context))


def cascade_decode(cascade: Cascade, indices, history=None) -> np.ndarray:
    """Decode per-module indices of one frame (or a stack) into 512-sample spans."""
    indices = [np.atleast_2d(ix) for ix in indices]
    out = cascade.decode_frames(indices, history)
    return out[0] if len(out) == 1 else out


def bit_allocation_report(cascade: Cascade, frames: FrameSet) -> list[dict]:
    """Average Huffman and entropy bits per frame per module, plus the total row."""
    enc = cascade.encode_frames(frames.contexts, frames.lsp, final_estimate=False)
    rows = []
    for name, ix, cb, q in zip(cascade.module_names, enc.indices, cascade.codebooks(), cascade.quantizers()):
        huff = float(cb.lengths[ix].sum(axis=1).mean()) if len(ix) else 0.0
        ent = index_entropy(ix, q.K) * ix.shape[1]
        rows.append({"module": name, "huffman_bits_per_frame": huff, "entropy_bits_per_frame": ent,
                     "bps": bits_per_frame_to_bps(huff)})
    total = sum(r["huffman_bits_per_frame"] for r in rows)
    rows.append({"module": "total", "huffman_bits_per_frame": total,
                 "entropy_bits_per_frame": sum(r["entropy_bits_per_frame"] for r in rows),
                 "bps": bits_per_frame_to_bps(total)})
    return rows


# ---------------------------------------------------------------------------
# training


LogFn = Callable[[dict], None]


def _batches(n, cfg: TrainConfig, rng):
    order = rng.permutation(n)
    count = max(1, n // cfg.batch_size) if n >= cfg.batch_size else 1
    if cfg.batches_per_epoch is not None:
        count = min(count, cfg.batches_per_epoch)
    for b in range(count):
        yield order[b * cfg.batch_size:(b + 1) * cfg.batch_size]


def _as(x, dtype):
    return np.ascontiguousarray(x, dtype=dtype)


class Trainer:
    """Runs both training phases on one :class:`Cascade`."""

    def __init__(self, cascade: Cascade, train: FrameSet, validation: FrameSet | None = None,
                 cfg: TrainConfig | None = None, log: LogFn | None = None):
        self.cascade = cascade
        self.train = train
        self.validation = validation if validation is not None and len(validation) else None
        self.cfg = cfg or TrainConfig()
        self.log = log or (lambda rec: None)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.history: list[dict] = []
        self.module_bits: dict[str, float] = {}

    def _emit(self, rec):
        self.history.append(rec)
        self.log(rec)

    # -- phase I: LPC quantizer ---------------------------------------------

    def lpc_graph(self, frames: FrameSet, lam: float, quant_terms: bool):
        cas = self.cascade
        dt = cas.dtype
        q, A = cas.lsp_quantizer.soft(dg.constant(_as(frames.lsp, dt)))
        coeffs = lpc.lsp_to_lpc_node(lpc.repair_lsp_node(q))
        e = lpc.residual_node(_as(frames.contexts, dt), coeffs)
        span = dg.constant(_as(frames.spans, dt))
        total, parts = loss(span, dg.sub(span, e), [A], self.cfg.weights(lam), quant_terms)
        parts["bits_per_frame"] = parts["entropy"] * lpc.ORDER
        return total, parts

    def train_lpc(self) -> None:
        cas, cfg = self.cascade, self.cfg
        names = cas.param_names("lpc")
        cas.store.reset_optimizer()
        for epoch in range(1, cfg.lpc_epochs + 1):
            on = epoch >= cfg.quant_delay
            t0 = time.perf_counter()
            recs = []
            for bidx in _batches(len(self.train), cfg, self.rng):
                cas.store.zero_grad()
                total, parts = self.lpc_graph(self.train.subset(bidx), 0.0, on)
                dg.backward(total)
                dg.adam_step(cas.store, cfg.scaled_lr(cfg.lr_lpc), names)
                recs.append(parts)
            rec = _epoch_record("phase1", "lpc", epoch, recs, 0.0, time.perf_counter() - t0)
            self._emit(rec)
        probe = self.train.subset(np.arange(min(len(self.train), 4 * cfg.batch_size)))
        self.module_bits["lpc"] = self.lpc_graph(probe, 0.0, False)[1]["bits_per_frame"]

    # -- phase I: NWC modules --------------------------------------------------

    def module_inputs(self, frames: FrameSet, module: int) -> np.ndarray:
        """Input of NWC ``module``: the residual left by all earlier (frozen) modules, test mode."""
        cas = self.cascade
        saved = cas.nwcs
        cas.nwcs = saved[:module]
        try:
            enc = cas.encode_frames(frames.contexts, frames.lsp)
        finally:
            cas.nwcs = saved
        if cas.lsp_quantizer is not None:
            x = lpc.residual_batch(frames.contexts, enc.coeffs)
        else:
            x = frames.spans.copy()
        for est in enc.residual_estimates:
            x = x - est
        return x

    def _val_subset(self):
        if self.validation is None:
            return None
        n = len(self.validation)
        if self.cfg.val_frames is not None and n > self.cfg.val_frames:
            idx = np.random.default_rng(self.cfg.seed + 1).choice(n, self.cfg.val_frames, replace=False)
            return self.validation.subset(np.sort(idx))
        return self.validation

    def validation_loss(self, mod: NwcModule, x_val) -> float:
        """Reconstruction terms of the module under hard (test-mode) quantization."""
        w = self.cfg.weights()
        total, count = 0.0, 0
        for s in range(0, len(x_val), self.cfg.batch_size):
            xb = _as(x_val[s:s + self.cfg.batch_size], self.cascade.dtype)
            _, xh = mod.code_frames(xb)
            mse, mel = reconstruction_terms(xb, xh)
            total += (w.mse * float(mse.value) + w.mel * float(mel.value)) * len(xb)
            count += len(xb)
        return total / count

    def nwc_target(self, module: int) -> float:
        """Bits/frame budget for NWC ``module`` given what frozen predecessors already use."""
        used = sum(v for k, v in self.module_bits.items() if k != f"nwc{module}" and
                   (k == "lpc" or int(k[3:]) < module))
        remaining = len(self.cascade.nwcs) - module
        return max(1.0, (self.cascade.config.target_bits_per_frame - used) / remaining)

    def train_nwc(self, module: int, epochs: int | None = None) -> dict:
        cas, cfg = self.cascade, self.cfg
        mod = cas.nwcs[module]
        names = cas.param_names(mod.prefix)
        lr = cfg.scaled_lr(cfg.lr_first if module == 0 else cfg.lr_next)
        epochs = cfg.epochs if epochs is None else epochs
        x_train = self.module_inputs(self.train, module)
        val = self._val_subset()
        x_val = self.module_inputs(val, module) if val is not None else None
        ctl = EntropyController(self.nwc_target(module))
        cas.store.reset_optimizer()
        best, stale, was_armed = math.inf, 0, False
        last: dict = {}
        initial = self.validation_loss(mod, x_val) if x_val is not None else None
        if initial is not None:
            self._emit({"phase": "phase1", "module": mod.prefix, "epoch": 0, "val_loss": initial,
                        "lambda_ent": 0.0, "target_bits_per_frame": ctl.target_bits_per_frame})
        for epoch in range(1, epochs + 1):
            on = epoch >= cfg.quant_delay
            lam = ctl.lam if on else 0.0
            t0 = time.perf_counter()
            recs = []
            for bidx in _batches(len(x_train), cfg, self.rng):
                xb = _as(x_train[bidx], cas.dtype)
                cas.store.zero_grad()
                xh, A = mod.forward_train(xb)
                total, parts = loss(xb, xh, [A], cfg.weights(lam), on)
                parts["bits_per_frame"] = parts["entropy"] * CODE_LEN
                dg.backward(total)
                dg.adam_step(cas.store, lr, names)
                recs.append(parts)
            rec = _epoch_record("phase1", mod.prefix, epoch, recs, lam, time.perf_counter() - t0)
            if on:
                ctl.step(rec["bits_per_frame"])
            rec["target_bits_per_frame"] = ctl.target_bits_per_frame
            if x_val is not None:
                rec["val_loss"] = self.validation_loss(mod, x_val)
            self._emit(rec)
            last = rec
            # convergence is only judged at the operating point: while the
            # controller is still pulling the rate down the loss must rise
            armed = on and rec["bits_per_frame"] <= ctl.target_bits_per_frame * (1.0 + RATE_TOLERANCE)
            if x_val is not None:
                if armed and not was_armed:
                    best, stale = math.inf, 0
                was_armed = was_armed or armed
                if rec["val_loss"] < best:
                    best, stale = rec["val_loss"], 0
                elif armed:
                    stale += 1
                    if cfg.patience is not None and stale >= cfg.patience:
                        self._emit({"phase": "phase1", "module": mod.prefix, "event": "early_stop",
                                    "epoch": epoch})
                        break
        self.module_bits[mod.prefix] = last.get("bits_per_frame", 0.0)
        return {"initial_val_loss": initial, "best_val_loss": best if x_val is not None else None}

    def phase1(self) -> None:
        if self.cascade.lsp_quantizer is not None:
            self.train_lpc()
        for i in range(len(self.cascade.nwcs)):
            self.train_nwc(i)

    # -- phase II ----------------------------------------------------------------

    def global_graph(self, frames: FrameSet, lam: float = 0.0, quant_terms: bool = True):
        """Joint train-mode graph: soft LSPs, residual, NWC chain, synthesis, signal-domain loss."""
        cas = self.cascade
        dt = cas.dtype
        span = dg.constant(_as(frames.spans, dt))
        assignments = []
        if cas.lsp_quantizer is not None:
            q, A = cas.lsp_quantizer.soft(dg.constant(_as(frames.lsp, dt)))
            assignments.append(A)
            coeffs = lpc.lsp_to_lpc_node(lpc.repair_lsp_node(q))
            x = lpc.residual_node(_as(frames.contexts, dt), coeffs)
        else:
            coeffs = None
            x = span
        for mod in cas.nwcs:
            xh, A = mod.forward_train(x)
            assignments.append(A)
            x = dg.sub(x, xh)
        # x now holds the residual-domain error e - sum of estimates
        if coeffs is not None:
            xhat = dg.sub(span, lpc.synthesis_node(x, coeffs))
        else:
            xhat = dg.sub(span, x)
        total, parts = loss(span, xhat, assignments, self.cfg.weights(lam), quant_terms)
        counts = cas.module_codes()
        parts["bits_per_frame"] = sum(entropy_estimate(A.value) * c for A, c in zip(assignments, counts))
        return total, parts

    def global_loss(self, frames: FrameSet, batch: int | None = None) -> dict:
        """Average train-mode reconstruction terms (no parameter update) over ``frames``."""
        batch = batch or self.cfg.batch_size
        acc: dict[str, float] = {}
        for s in range(0, len(frames), batch):
            sub = frames.subset(np.arange(s, min(len(frames), s + batch)))
            _, parts = self.global_graph(sub)
            for k, v in parts.items():
                acc[k] = acc.get(k, 0.0) + v * len(sub)
        return {k: v / len(frames) for k, v in acc.items()}

    def phase2(self, epochs: int | None = None) -> None:
        cas, cfg = self.cascade, self.cfg
        epochs = cfg.phase2_epochs if epochs is None else epochs
        ctl = EntropyController(cas.config.target_bits_per_frame)
        cas.store.reset_optimizer()
        for epoch in range(1, epochs + 1):
            on = epoch >= cfg.quant_delay
            lam = ctl.lam if on else 0.0
            t0 = time.perf_counter()
            recs = []
            for bidx in _batches(len(self.train), cfg, self.rng):
                cas.store.zero_grad()
                total, parts = self.global_graph(self.train.subset(bidx), lam, on)
                dg.backward(total)
                dg.adam_step(cas.store, cfg.scaled_lr(cfg.lr_finetune))
                recs.append(parts)
            rec = _epoch_record("phase2", "all", epoch, recs, lam, time.perf_counter() - t0)
            if on:
                ctl.step(rec["bits_per_frame"])
            rec["target_bits_per_frame"] = ctl.target_bits_per_frame
            self._emit(rec)

    def run(self) -> None:
        self.phase1()
        self.phase2()
        self.cascade.fit_codebooks(self.train)


def _epoch_record(phase, module, epoch, recs, lam, seconds) -> dict:
    keys = recs[0].keys()
    rec = {"phase": phase, "module": module, "epoch": epoch}
    rec.update({k: float(np.mean([r[k] for r in recs])) for k in keys})
    rec["lambda_ent"] = lam
    rec["bps"] = bits_per_frame_to_bps(rec.get("bits_per_frame", 0.0))
    rec["batches"] = len(recs)
    rec["seconds"] = seconds
    return rec


def load_frames(root, use_lpc: bool = True) -> tuple[FrameSet, FrameSet]:
    """Training and validation frame sets from a corpus directory."""
    from .corpus import load_corpus

    splits = load_corpus(Path(root))
    return build_frames(splits["train"], use_lpc), build_frames(splits["validation"], use_lpc)
