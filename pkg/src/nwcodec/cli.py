"""Command-line interface: ``nwcodec {init,train,encode,decode,eval,bench}``.

Every subcommand writes machine-readable progress to stdout as one record
per line, ``event=<name>`` followed by space-separated ``key=value``
tokens (values never contain spaces; floats use ``%.6g``; infinity is
written ``inf``).  Errors go to stderr as an ``event=error`` record.

Exit codes: 0 success, 2 bad input data (missing or malformed files,
length mismatch), 3 bad configuration (flags, config files, checkpoint and
container that do not match), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dsp
from .bitstream import BitstreamError, read_container, write_container
from .cmrl import MODES, Cascade, CascadeConfig, TrainConfig, Trainer, build_frames, parse_config_text
from .dsp import MEL_BANK_SIZES, SAMPLE_RATE, read_wav, write_wav

EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4
DEFAULT_SEED = 0
BENCH_REPEATS = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(format_record({"event": "error", "kind": "config", "message": message}) + "\n")
        sys.exit(EXIT_CONFIG)


# ---------------------------------------------------------------------------
# log records


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return "_".join(str(v).split())


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in rec.items())


def parse_record(line: str) -> dict[str, str]:
    """Inverse of :func:`format_record` (values stay strings)."""
    out = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep or not key:
            raise ValueError(f"malformed token {tok!r}")
        out[key] = val
    return out


def _emit(event: str, **fields) -> None:
    print(format_record({"event": event, **fields}), flush=True)


# ---------------------------------------------------------------------------
# helpers


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CliError(f"--{what} is required", EXIT_CONFIG)
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file {p} does not exist", EXIT_INPUT)
    return p


def _read_wav(path) -> np.ndarray:
    try:
        return read_wav(path)
    except (ValueError, EOFError, OSError) as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_INPUT) from None


def _load_checkpoint(path) -> Cascade:
    p = _require_file(path, "checkpoint")
    try:
        return Cascade.load(p)
    except (ValueError, KeyError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {p}: {exc}", EXIT_CONFIG) from None


def _wav_list(path) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.rglob("*.wav"))
        if not files:
            raise CliError(f"no WAV files under {p}", EXIT_INPUT)
        return files
    return [_require_file(p, "in")]


def _read_split(files: list[Path]) -> list[np.ndarray]:
    bad, out = [], []
    for f in files:
        try:
            out.append(read_wav(f))
        except (ValueError, EOFError, OSError):
            bad.append(str(f))
    if bad:
        raise CliError("unreadable WAV files: " + ", ".join(bad), EXIT_INPUT)
    return out


def _corpus(root) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if root is None:
        raise CliError("--corpus is required", EXIT_CONFIG)
    root = Path(root)
    if not root.is_dir():
        raise CliError(f"corpus directory {root} does not exist", EXIT_INPUT)
    if (root / "train").is_dir():
        train = sorted((root / "train").glob("*.wav"))
        val = sorted((root / "validation").glob("*.wav")) if (root / "validation").is_dir() else []
    else:
        train, val = sorted(root.glob("*.wav")), []
    if not train:
        raise CliError(f"corpus {root} holds no training WAV files", EXIT_INPUT)
    return _read_split(train), _read_split(val)


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


# ---------------------------------------------------------------------------
# subcommands


def _cascade_config(args, overrides: dict) -> CascadeConfig:
    mode = args.mode or "low"
    base = CascadeConfig.from_mode(mode)
    try:
        return CascadeConfig(overrides.get("use_lpc", base.use_lpc), overrides.get("num_nwc", base.num_nwc),
                             overrides.get("target_bitrate_bps", base.target_bitrate_bps))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def cmd_init(args) -> int:
    """Write a randomly initialized checkpoint (useful for pipeline checks)."""
    if args.checkpoint is None:
        raise CliError("--checkpoint is required", EXIT_CONFIG)
    cas = Cascade(_cascade_config(args, {}), seed=args.seed)
    cas.save(args.checkpoint, {"mode": args.mode or "low", "trained": 0})
    _emit("init", checkpoint=args.checkpoint, modules=",".join(cas.module_names), seed=args.seed)
    return 0


def cmd_train(args) -> int:
    overrides, cfg, other = {}, TrainConfig(), {}
    if args.config:
        path = _require_file(args.config, "config")
        try:
            overrides, cfg, other = parse_config_text(path.read_text())
        except ValueError as exc:
            raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    if args.mode is None and "mode" in other:
        args.mode = other["mode"]
    corpus = args.corpus or other.get("corpus")
    checkpoint = args.checkpoint or other.get("checkpoint")
    if checkpoint is None:
        raise CliError("--checkpoint is required", EXIT_CONFIG)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.batches_per_epoch is not None:
        cfg.batches_per_epoch = args.batches_per_epoch
    config = _cascade_config(args, overrides)
    train_sig, val_sig = _corpus(corpus)
    t0 = time.perf_counter()
    train, val = build_frames(train_sig, config.use_lpc), build_frames(val_sig, config.use_lpc)
    _emit("data", train_frames=len(train), validation_frames=len(val), seconds=time.perf_counter() - t0)
    cas = Cascade(config, seed=cfg.seed)

    def log(rec):
        rec = dict(rec)
        _emit(rec.pop("event", "epoch"), **rec)

    trainer = Trainer(cas, train, val, cfg, log)
    trainer.run()
    cas.save(checkpoint, {"mode": args.mode or "custom", "trained": 1})
    _emit("saved", checkpoint=checkpoint, modules=",".join(cas.module_names))
    return 0


def cmd_encode(args) -> int:
    cas = _load_checkpoint(args.checkpoint)
    src = _require_file(args.input, "in")
    if args.output is None:
        raise CliError("--out is required", EXIT_CONFIG)
    x = _read_wav(src)
    t0 = time.perf_counter()
    container = cas.encode_signal(x)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Path(args.output).write_bytes(write_container(container))
    _emit("encode", input=src, output=args.output, samples=len(x), frames=len(container.frames),
          bits_per_frame=container.bits_per_frame, bps=container.bitrate,
          seconds=time.perf_counter() - t0)
    return 0


def _read_container(path):
    try:
        return read_container(Path(path).read_bytes())
    except BitstreamError as exc:
        raise CliError(f"{path}: {exc}", EXIT_INPUT) from None


def cmd_decode(args) -> int:
    cas = _load_checkpoint(args.checkpoint)
    src = _require_file(args.input, "in")
    if args.output is None:
        raise CliError("--out is required", EXIT_CONFIG)
    container = _read_container(src)
    try:
        cas.check_container(container)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    t0 = time.perf_counter()
    y = cas.decode_container(container)
    write_wav(args.output, y)
    _emit("decode", input=src, output=args.output, samples=len(y), seconds=time.perf_counter() - t0)
    return 0


def snr_db(reference, decoded) -> float:
    """``10 log10(sum x^2 / sum (x - y)^2)``; ``inf`` for a perfect match."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(decoded, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    err = float(np.sum((x - y) ** 2))
    sig = float(np.sum(x ** 2))
    if err == 0.0:
        return math.inf
    if sig == 0.0:
        return -math.inf
    return 10.0 * math.log10(sig / err)


def mel_distortion(reference, decoded) -> dict[int, float]:
    """Mean per-frame squared mel-energy error for every filter bank size."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(decoded, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    fx = np.stack([f.samples for f in dsp.frame_signal(x)]) if len(x) else np.zeros((0, dsp.FRAME_LEN))
    fy = np.stack([f.samples for f in dsp.frame_signal(y)]) if len(y) else np.zeros((0, dsp.FRAME_LEN))
    out = {}
    for b in MEL_BANK_SIZES:
        if not len(fx):
            out[b] = 0.0
            continue
        d = dsp.mel_spectrum(fx, b) - dsp.mel_spectrum(fy, b)
        out[b] = float(np.mean(np.sum(d ** 2, axis=-1)))
    return out


def cmd_eval(args) -> int:
    ref = _read_wav(_require_file(args.ref, "ref"))
    dec = _read_wav(_require_file(args.input, "in"))
    if len(ref) != len(dec):
        raise CliError(f"length mismatch: reference {len(ref)} samples, decoded {len(dec)}", EXIT_INPUT)
    rec = {"snr_db": snr_db(ref, dec)}
    for b, v in mel_distortion(ref, dec).items():
        rec[f"mel{b}"] = v
    if args.container:
        c = _read_container(_require_file(args.container, "container"))
        rec["bits_per_frame"] = c.bits_per_frame
        rec["bps"] = c.bitrate
    _emit("eval", **rec)
    return 0


def bench_ratio(cascade: Cascade, signals, repeats: int = BENCH_REPEATS,
                workers: int = 1) -> tuple[float, list[float]]:
    """Median (over ``repeats``) of encode+decode wall time divided by audio duration, in percent.

    With ``workers > 1`` distinct utterances are coded concurrently.
    """
    duration = sum(len(x) for x in signals) / SAMPLE_RATE
    if duration == 0:
        raise ValueError("benchmark signals are empty")

    def code(x):
        cascade.decode_container(cascade.encode_signal(x))

    ratios = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for _ in range(repeats):
            t0 = time.perf_counter()
            if workers > 1:
                list(pool.map(code, signals))
            else:
                for x in signals:
                    code(x)
            ratios.append(100.0 * (time.perf_counter() - t0) / duration)
    return float(np.median(ratios)), ratios


def cmd_bench(args) -> int:
    cas = _load_checkpoint(args.checkpoint)
    if args.input is None:
        raise CliError("--in is required", EXIT_CONFIG)
    signals = _read_split(_wav_list(args.input))
    if args.repeats < 1 or args.workers < 1:
        raise CliError("--repeats and --workers must be positive", EXIT_CONFIG)
    median, ratios = bench_ratio(cas, signals, args.repeats, args.workers)
    _emit("bench", modules=",".join(cas.module_names), seconds_audio=sum(map(len, signals)) / SAMPLE_RATE,
          repeats=len(ratios), rtf_percent=median, rtf_min=min(ratios), rtf_max=max(ratios), threads=args.threads,
          workers=args.workers)
    return 0


COMMANDS = {"init": cmd_init, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
            "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nwcodec", description="Neural waveform speech codec with LPC and cascaded residual coding.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--checkpoint", help="model checkpoint path")
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")

    sp = sub.add_parser("init", help="write a randomly initialized checkpoint")
    common(sp)
    sp.add_argument("--mode", choices=sorted(MODES))

    sp = sub.add_parser("train", help="train a cascade on a WAV corpus")
    common(sp)
    sp.add_argument("--mode", choices=sorted(MODES))
    sp.add_argument("--corpus", help="directory with train/ and validation/ WAV folders")
    sp.add_argument("--config", help="key=value training configuration file")
    sp.add_argument("--epochs", type=int, help="maximum epochs per NWC module")
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--batches-per-epoch", type=int)

    for name, helptext in (("encode", "WAV -> container"), ("decode", "container -> WAV")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--mode", choices=sorted(MODES), help="accepted for symmetry; the checkpoint decides")
        sp.add_argument("--in", dest="input")
        sp.add_argument("--out", dest="output")

    sp = sub.add_parser("eval", help="SNR, mel distortion and bitrate")
    sp.add_argument("--ref", help="reference WAV")
    sp.add_argument("--in", dest="input", help="decoded WAV")
    sp.add_argument("--container", help="container whose bitrate to report")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("bench", help="real-time factor of encode+decode")
    common(sp)
    sp.add_argument("--in", dest="input", help="WAV file or directory")
    sp.add_argument("--repeats", type=int, default=BENCH_REPEATS)
    sp.add_argument("--workers", type=int, default=1, help="code distinct utterances concurrently (default 1)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    if getattr(args, "seed", None) is None and args.command != "train":
        args.seed = DEFAULT_SEED
    try:
        with _limit_threads(args.threads):
            return COMMANDS[args.command](args)
    except CliError as exc:
        kind = {EXIT_INPUT: "input", EXIT_CONFIG: "config"}.get(exc.code, "runtime")
        sys.stderr.write(format_record({"event": "error", "kind": kind, "message": str(exc)}) + "\n")
        return exc.code
    except (BitstreamError, ValueError) as exc:
        sys.stderr.write(format_record({"event": "error", "kind": "input", "message": str(exc)}) + "\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level guard maps everything else to a runtime failure
        sys.stderr.write(format_record({"event": "error", "kind": "runtime", "message": repr(exc)}) + "\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
