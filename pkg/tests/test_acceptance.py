"""Acceptance suite: one test per numbered criterion.

Each test stores a one-line summary of what it measured under the
``detail`` user property; ``conftest.py`` prints a PASS/FAIL line per
criterion at the end of the run.  Criterion 10 trains a small cascade on a
ten-minute synthetic corpus and takes on the order of half an hour on one
core.
"""

import time

import numpy as np
import pytest
from scipy import linalg, signal

from nwcodec import bitstream as bs
from nwcodec import cli, cmrl, dsp, lpc, nwc
from nwcodec import diffgraph as dg
from nwcodec import softquant as sq
from nwcodec.corpus import synth_utterance, write_corpus
from nwcodec.study import desk_study

from conftest import random_stable_lpc
from opcases import FLOOR, OPS, case
from test_nwc import train_graph_check


def detail(record_property, text):
    record_property("detail", text)
    print(text)


@pytest.mark.criterion(1, "bitrate arithmetic")
def test_bitrate_arithmetic(record_property):
    a = sq.bitrate(3, 256, 16000, 512, 32)
    b = sq.bitrate(16, 512, 16000, 512, 0)
    detail(record_property, f"{a:g} bps, {b:g} bps")
    assert a == 25600.0
    assert b == 256000.0


@pytest.mark.criterion(2, "bit allocation table consistency")
def test_table_consistency(record_property):
    low = sq.bits_per_frame_to_bps(353)
    mid = sq.bits_per_frame_to_bps(576)
    detail(record_property, f"353 b/f -> {low:.2f} bps, 576 b/f -> {mid:.2f} bps")
    assert abs(low - 11766.67) <= 0.01
    assert abs(mid - 19200.0) <= 0.01


@pytest.mark.criterion(3, "quantizer penalty bounds")
def test_penalty_bounds(record_property):
    rng = np.random.default_rng(0)
    worst = 0.0
    for K in (4, 32, 256):
        onehot = np.eye(K)[rng.integers(0, K, 100)]
        assert sq.penalty_lq(onehot) == 1.0
        worst = max(worst, abs(sq.penalty_lq(np.full((100, K), 1.0 / K)) - np.sqrt(K)))
    detail(record_property, f"one-hot exactly 1.0; uniform max |L_Q - sqrt(K)| = {worst:.2e}")
    assert worst <= 1e-9


@pytest.mark.criterion(4, "soft-to-hard convergence")
def test_soft_to_hard(record_property):
    rng = np.random.default_rng(1)
    K = 32
    D = rng.uniform(0, 2, (1000, K))
    nearest = rng.integers(0, K, 1000)
    others = np.ones((1000, K), dtype=bool)
    others[np.arange(1000), nearest] = False
    # every other distance sits at least 1e-3 above the nearest one
    D[np.arange(1000), nearest] = D[others].reshape(1000, K - 1).min(axis=1) - rng.uniform(1e-3, 0.5, 1000)
    A_soft = sq.soft_assign(D, 1e6)
    A_hard, idx = sq.hard_assign(A_soft)
    err = float(np.max(np.abs(A_soft - A_hard)))
    detail(record_property, f"max |A_soft - A_hard| = {err:.2e} over 1000 rows")
    np.testing.assert_array_equal(idx, nearest)
    assert err < 1e-6


@pytest.mark.criterion(5, "entropy bounds")
def test_entropy_bounds(record_property):
    rng = np.random.default_rng(2)
    lo, hi_gap = np.inf, np.inf
    for _ in range(500):
        K = int(rng.integers(2, 257))
        A = rng.dirichlet(np.full(K, rng.uniform(0.01, 10.0)), size=int(rng.integers(1, 64)))
        H = sq.entropy_estimate(A)
        lo = min(lo, H)
        hi_gap = min(hi_gap, np.log2(K) - H)
    uniform = sq.entropy_estimate(np.full((50, 32), 1.0 / 32))
    degenerate = sq.entropy_estimate(np.eye(32)[np.full(50, 4)])
    detail(record_property, f"min H = {lo:.3g}, min (log2 K - H) = {hi_gap:.3g}, "
                            f"uniform K=32 -> {uniform}, degenerate -> {degenerate}")
    assert lo >= 0.0 and hi_gap >= -1e-12
    assert uniform == 5.0
    assert degenerate == 0.0


@pytest.mark.criterion(6, "gradient checks")
def test_gradient_checks(record_property):
    t0 = time.perf_counter()
    worst, name = 0.0, ""
    counts = []
    for op in OPS:
        build, params = case(op)
        res = dg.gradient_check(build, params, n_samples=100)
        counts.append(len(res.analytic))
        if res.max_relative_error(FLOOR) > worst:
            worst, name = res.max_relative_error(FLOOR), op

    store = dg.ParamStore()
    q = sq.SoftQuantizer(store, "q", sq.uniform_centroids(8, -1, 1, True), 5.0, dtype=np.float64)
    rng = np.random.default_rng(3)
    h = dg.parameter(rng.uniform(-0.85, 0.85, 60))
    w = dg.constant(rng.standard_normal(60))

    def quant_build():
        hq, A = q.soft(h)
        return dg.add(dg.reduce_sum(dg.mul(hq, w)), dg.add(sq.penalty_node(A), sq.entropy_node(A)))

    quant = dg.gradient_check(quant_build, [h, q.beta, q.log_alpha], n_samples=100)
    full = train_graph_check()
    errors = {"ops": worst, "soft quantizer": quant.max_relative_error(FLOOR),
              "NWC train graph": full.max_relative_error(FLOOR)}
    seconds = time.perf_counter() - t0
    detail(record_property, f"{len(OPS)} ops (worst {name} {worst:.1e}), soft quantizer "
                            f"{errors['soft quantizer']:.1e}, NWC train graph {errors['NWC train graph']:.1e}; "
                            f"{seconds:.0f} s")
    assert min(counts) >= 100 and len(quant.analytic) >= 100 and len(full.analytic) >= 100
    assert all(v < 1e-4 for v in errors.values()), errors
    assert seconds < 120


@pytest.mark.criterion(7, "LPC round trip")
def test_lpc_round_trip(record_property):
    rng = np.random.default_rng(4)
    worst_rt = 0.0
    for _ in range(500):
        a = random_stable_lpc(rng)
        x = signal.lfilter([1.0], np.concatenate([[1.0], -a]), rng.standard_normal(lpc.CONTEXT_LEN))
        e = lpc.compute_residual(x, a)
        y = lpc.synthesize(e, a, x[lpc.SPAN_START - lpc.ORDER:lpc.SPAN_START])
        span = x[lpc.SPAN_START:lpc.SPAN_START + lpc.SPAN_LEN]
        worst_rt = max(worst_rt, np.linalg.norm(y - span) / np.linalg.norm(span))
    worst_ld = 0.0
    for _ in range(500):
        x = signal.lfilter([1.0], [1.0, -rng.uniform(-0.95, 0.95)], rng.standard_normal(400))
        r = lpc.autocorrelation(x, lpc.ORDER)
        dense = linalg.solve(linalg.toeplitz(r[:-1]), r[1:])
        worst_ld = max(worst_ld, np.max(np.abs(lpc.levinson_durbin(r) - dense)))
    a = np.stack([random_stable_lpc(rng) for _ in range(500)])
    worst_lsp = float(np.max(np.abs(lpc.lsp_to_lpc(lpc.lpc_to_lsp(a)) - a)))
    detail(record_property, f"synthesis rel err {worst_rt:.1e}, Levinson vs dense {worst_ld:.1e}, "
                            f"LSP round trip {worst_lsp:.1e}")
    assert worst_rt < 1e-6
    assert worst_ld < 1e-8
    assert worst_lsp < 1e-6


@pytest.mark.criterion(8, "DSP identities")
def test_dsp_identities(record_property):
    rng = np.random.default_rng(5)
    x = np.full(7777, 0.37)
    cola = float(np.max(np.abs(dsp.overlap_add(dsp.frame_signal(x))[:len(x)] - x)))
    s = rng.standard_normal(9000)
    emph = float(np.max(np.abs(dsp.deemphasis(dsp.preemphasis(s)) - s)))
    y, gain = dsp.normalize(0.2 * s + 0.01)
    norm = float(np.max(np.abs(dsp.denormalize(y, gain) - (0.2 * s + 0.01))))
    detail(record_property, f"COLA {cola:.1e}, emphasis {emph:.1e}, normalize {norm:.1e}")
    assert cola <= 1e-12
    assert emph <= 1e-9
    assert norm <= 1e-9


@pytest.mark.criterion(9, "bitstream losslessness")
def test_bitstream_lossless(record_property):
    rng = np.random.default_rng(6)
    K = 32
    idx = rng.choice(K, size=100_000, p=rng.dirichlet(np.full(K, 0.4)))
    cb = bs.build_huffman(np.bincount(idx, minlength=K))
    payload, pad = bs.encode_indices(idx, cb)
    assert np.array_equal(bs.decode_indices(payload, len(idx), cb, pad), idx)

    cas = cmrl.Cascade(cmrl.CascadeConfig.from_mode("high"), seed=6)
    speech = synth_utterance(2.0, seed=6)
    s, _ = cmrl.prepare_signal(speech)
    enc = cas.encode_frames(cmrl.frame_contexts(s))
    data = bs.write_container(cas.encode_signal(speech))
    back = cas.container_indices(bs.read_container(data))
    assert all(np.array_equal(a, b) for a, b in zip(enc.indices, back))
    assert bs.write_container(bs.read_container(data)) == data

    gaps = []
    for _ in range(100):
        n = int(rng.integers(2, 300))
        p = rng.dirichlet(np.full(n, rng.uniform(0.05, 3.0)))
        q = p[p > 0]
        H = float(-(q * np.log2(q)).sum())
        gaps.append(bs.build_huffman(p).mean_length(p) - H)
    detail(record_property, f"1e5 indices and {len(enc.indices[0])} real frames bit-exact; "
                            f"mean length - H in [{min(gaps):.3f}, {max(gaps):.3f}]")
    assert min(gaps) >= -1e-9 and max(gaps) < 1.0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_corpus")
    write_corpus(root, minutes=10.0, val_minutes=1.0, seed=0)
    t0 = time.perf_counter()
    report, cascade = desk_study(root, mode="low", seed=0)
    return report, time.perf_counter() - t0


@pytest.mark.criterion(10, "desk-scale training behaviour")
def test_desk_training(record_property, desk):
    report, seconds = desk
    drop = report.val_drop(20)
    reached = report.epochs_to_target(0.1)
    p1, p2 = report.phase1_train_loss, report.phase2_train_loss
    one, two = report.one_nwc_recon, report.two_nwc_recon
    checks = {
        "a": drop >= 0.30,
        "b": reached is not None and reached <= 60,
        "c": p2 <= p1 * 1.02,
        "d": two <= one,
    }
    detail(record_property,
           f"(a) val drop {100 * drop:.0f}% in 20 epochs; (b) within 10% of {report.target_bits_per_frame:.0f} b/f "
           f"at epoch {reached}; (c) phase II {p2:.4f} vs phase I {p1:.4f}; (d) recon two NWC {two:.4f} "
           f"(pretrained only {report.two_nwc_pretrained_recon:.4f}) vs one {one:.4f}; {seconds / 60:.0f} min")
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}
    assert seconds <= 2 * 3600


@pytest.mark.criterion(11, "real-time factor")
def test_real_time_factor(record_property, tmp_path, capsys):
    ckpt = tmp_path / "low.ckpt"
    assert cli.main(["init", "--mode", "low", "--checkpoint", str(ckpt)]) == 0
    audio = tmp_path / "audio"
    for i in range(3):
        dsp.write_wav(audio / f"u{i}.wav", synth_utterance(4.0, seed=100 + i))
    capsys.readouterr()
    assert cli.main(["bench", "--checkpoint", str(ckpt), "--in", str(audio), "--threads", "1"]) == 0
    rec = cli.parse_record(capsys.readouterr().out.strip().splitlines()[-1])
    ratio = float(rec["rtf_percent"])
    detail(record_property, f"encode+decode {ratio:.1f}% of real time (median of {rec['repeats']}, one thread; "
                            f"published reference 42.44%)")
    assert ratio < 100.0


@pytest.mark.criterion(12, "parameter count")
def test_parameter_count(record_property):
    module = nwc.NwcModule(dg.ParamStore(), "nwc")
    count = nwc.param_count(module)
    breakdown = ", ".join(f"{k} {v}" for k, v in nwc.param_breakdown(module).items())
    detail(record_property, f"{count} parameters ({breakdown})")
    assert 300_000 <= count <= 400_000
