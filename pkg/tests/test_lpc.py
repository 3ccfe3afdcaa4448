import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import linalg, signal

from nwcodec import diffgraph as dg
from nwcodec import lpc
from conftest import random_stable_lpc


def roots_oracle_lsp(coeffs):
    """LSPs from numpy's polynomial root finder on the full P and Q polynomials."""
    a = np.concatenate([[1.0], -np.asarray(coeffs), [0.0]])
    p = a + a[::-1]
    q = a - a[::-1]
    ang = np.concatenate([np.angle(np.roots(p)), np.angle(np.roots(q))])
    ang = ang[(ang > 1e-9) & (ang < np.pi - 1e-9)]
    return np.sort(ang)


class TestWindows:
    def test_cross_frame_window_flat_region(self):
        w = lpc.cross_frame_window(np.ones(1024))
        np.testing.assert_array_equal(w[256:768], 1.0)
        assert w[0] == 0.0 and w[1023] == 0.0

    def test_cross_frame_window_symmetric(self):
        w = lpc.cross_frame_window(np.ones(1024))
        np.testing.assert_allclose(w, w[::-1], atol=1e-15)

    def test_cross_frame_window_length_checked(self):
        with pytest.raises(ValueError):
            lpc.cross_frame_window(np.ones(1000))

    def test_subframe_offsets(self):
        offsets, wins = lpc.subframe_windows()
        np.testing.assert_array_equal(offsets, [0, 64, 128, 192, 256, 320, 384])
        assert wins.shape == (7, 128)

    def test_subframe_windows_sum_to_one(self):
        np.testing.assert_allclose(lpc.subframe_envelope(), 1.0, atol=1e-15)

    def test_outer_edges_untapered(self):
        _, wins = lpc.subframe_windows()
        np.testing.assert_array_equal(wins[0, :64], 1.0)
        np.testing.assert_array_equal(wins[-1, 64:], 1.0)


class TestAutocorrelation:
    def test_zero(self):
        np.testing.assert_array_equal(lpc.autocorrelation(np.zeros(1024)), 0.0)

    def test_impulse(self):
        x = np.zeros(1024)
        x[300] = 1.0
        np.testing.assert_array_equal(lpc.autocorrelation(x), np.r_[1.0, np.zeros(16)])

    def test_white_noise_nearly_uncorrelated(self):
        x = np.random.default_rng(5).standard_normal(200000)
        r = lpc.autocorrelation(x)
        assert np.max(np.abs(r[1:])) / r[0] < 0.01

    def test_matches_numpy_correlate(self, rng):
        x = rng.standard_normal(1024)
        full = np.correlate(x, x, mode="full")[1023:1040]
        np.testing.assert_allclose(lpc.autocorrelation(x), full, rtol=1e-12)


class TestLevinsonDurbin:
    def test_order_one(self):
        np.testing.assert_allclose(lpc.levinson_durbin([1.0, 0.5]), [0.5])

    def test_order_two(self):
        np.testing.assert_allclose(lpc.levinson_durbin([1.0, 0.5, 0.25]), [0.5, 0.0], atol=1e-15)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            order = int(rng.integers(1, 17))
            x = signal.lfilter([1.0], [1.0, -rng.uniform(-0.95, 0.95)], rng.standard_normal(400))
            r = lpc.autocorrelation(x, order)
            dense = linalg.solve(linalg.toeplitz(r[:-1]), r[1:])
            worst = max(worst, np.max(np.abs(lpc.levinson_durbin(r) - dense)))
        assert worst < 1e-8

    def test_batched_equals_loop(self, rng):
        r = np.stack([lpc.autocorrelation(rng.standard_normal(300)) for _ in range(5)])
        np.testing.assert_allclose(lpc.levinson_durbin(r), [lpc.levinson_durbin(ri) for ri in r], atol=1e-14)

    def test_rejects_nonpositive_energy(self):
        with pytest.raises(ValueError):
            lpc.levinson_durbin([0.0, 0.0, 0.0])

    def test_early_exit_on_perfect_prediction(self):
        # r[k] = 0.5**k is exactly AR(1): the order-1 error is nonzero, but a
        # fully predictable sequence (|k| = 1) stops the recursion
        a = lpc.levinson_durbin([1.0, 1.0, 1.0, 1.0])
        np.testing.assert_allclose(a, [1.0, 0.0, 0.0])

    def test_reflection_magnitudes_below_one(self, rng):
        x = rng.standard_normal(1024)
        _, ks = lpc.levinson_durbin(lpc.autocorrelation(x), return_reflection=True)
        assert np.all(np.abs(ks) < 1)


class TestStability:
    def test_reflection_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            ks = rng.uniform(-0.9, 0.9, 16)
            a = np.zeros(0)
            for k in ks:
                a = np.concatenate([a - k * a[::-1], [k]])
            np.testing.assert_allclose(lpc.reflection_coefficients(a), ks, atol=1e-9)

    def test_agrees_with_pole_radius(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            a = rng.normal(0, 0.4, 16)
            poles = np.roots(np.concatenate([[1.0], -a]))
            assert bool(lpc.is_stable(a)) == bool(np.all(np.abs(poles) < 1))


class TestLsp:
    def test_flat_filter_equally_spaced(self):
        w = lpc.lpc_to_lsp(np.zeros(16))
        np.testing.assert_allclose(w, np.arange(1, 17) * np.pi / 17, atol=1e-10)

    def test_matches_polynomial_roots(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            a = random_stable_lpc(rng)
            np.testing.assert_allclose(lpc.lpc_to_lsp(a), roots_oracle_lsp(a), atol=1e-7)

    def test_round_trip(self):
        rng = np.random.default_rng(22)
        a = np.stack([random_stable_lpc(rng) for _ in range(200)])
        w = lpc.lpc_to_lsp(a)
        assert np.all(np.diff(w, axis=-1) > 0)
        np.testing.assert_allclose(lpc.lsp_to_lpc(w), a, atol=1e-6)

    def test_close_roots_use_finer_grid(self):
        # two line spectral frequencies closer together than one coarse grid step
        w = np.arange(1, 17) * np.pi / 17
        w[7] = w[6] + 0.3 * np.pi / lpc.LSP_GRID
        a = lpc.lsp_to_lpc(w)
        np.testing.assert_allclose(lpc.lpc_to_lsp(a), w, atol=1e-8)

    def test_non_monotone_rejected(self):
        w = np.arange(1, 17) * np.pi / 17
        w[[3, 4]] = w[[4, 3]]
        with pytest.raises(lpc.LspError):
            lpc.lsp_to_lpc(w)

    def test_unstable_rejected(self):
        a = np.zeros(16)
        a[0] = 1.5
        with pytest.raises(lpc.LspError):
            lpc.lpc_to_lsp(a)

    def test_jacobian_matches_differences(self, rng):
        w = lpc.lpc_to_lsp(random_stable_lpc(rng))
        jac = lpc.lsp_to_lpc_jacobian(w)
        eps = 1e-6
        for i in range(16):
            d = np.zeros(16)
            d[i] = eps
            num = (lpc.lsp_to_lpc(w + d) - lpc.lsp_to_lpc(w - d)) / (2 * eps)
            np.testing.assert_allclose(jac[i], num, atol=1e-7)

    def test_robust_conversion_handles_sharp_resonances(self):
        # two nearly coincident pole pairs close to the unit circle
        poles = [0.9995 * np.exp(1j * 0.8), 0.9995 * np.exp(1j * 0.8005)]
        poly = np.poly(poles + [np.conj(p) for p in poles]).real
        a = np.concatenate([-poly[1:], np.zeros(12)])
        w = lpc.lpc_to_lsp_robust(a)[0]
        assert np.all(np.diff(w) > 0) and w[0] > 0 and w[-1] < np.pi
        assert np.all(lpc.is_stable(lpc.lsp_to_lpc(w)))

    @given(st.lists(st.floats(0.0, np.pi), min_size=16, max_size=16))
    def test_repair_yields_valid_lsp(self, values):
        w = lpc.repair_lsp(np.array(values))
        assert np.all(np.diff(w) >= lpc.LSP_MIN_GAP - 1e-12)
        assert w[0] > 0 and w[-1] < np.pi
        lpc.check_lsp(w)
        assert lpc.is_stable(lpc.lsp_to_lpc(w))

    def test_repair_keeps_valid_input(self):
        w = np.arange(1, 17) * np.pi / 17
        np.testing.assert_array_equal(lpc.repair_lsp(w), w)


class TestResidualSynthesis:
    def test_zero_coefficients_return_span(self, rng):
        x = rng.standard_normal(1024)
        np.testing.assert_allclose(lpc.compute_residual(x, np.zeros(16)), x[256:768], atol=1e-15)

    def test_impulse_response(self):
        e = np.zeros(512)
        e[0] = 1.0
        y = lpc.synthesize(e, np.r_[0.5, np.zeros(15)])
        np.testing.assert_allclose(y[:5], [1, 0.5, 0.25, 0.125, 0.0625])

    def test_zero_in_zero_out(self):
        np.testing.assert_array_equal(lpc.synthesize(np.zeros(512), np.ones(16) * 0.01, np.zeros(16)), 0.0)

    def test_round_trip_random_frames(self):
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(500):
            a = random_stable_lpc(rng)
            x = signal.lfilter([1.0], np.concatenate([[1.0], -a]), rng.standard_normal(1024))
            e = lpc.compute_residual(x, a)
            y = lpc.synthesize(e, a, x[240:256])
            worst = max(worst, np.linalg.norm(y - x[256:768]) / np.linalg.norm(x[256:768]))
        assert worst < 1e-6

    def test_batch_matches_single(self, rng):
        ctx = rng.standard_normal((4, 1024))
        a = np.stack([random_stable_lpc(rng) for _ in range(4)])
        batch = lpc.residual_batch(ctx, a)
        for i in range(4):
            np.testing.assert_allclose(batch[i], lpc.compute_residual(ctx[i], a[i]), atol=1e-12)

    def test_residual_absorbs_quantization_error(self, rng):
        # analysis with perturbed (quantized) coefficients still round-trips exactly
        a = random_stable_lpc(rng)
        aq = lpc.lsp_to_lpc(lpc.repair_lsp(np.round(lpc.lpc_to_lsp(a) * 40) / 40))
        x = rng.standard_normal(1024)
        y = lpc.synthesize(lpc.compute_residual(x, aq), aq, x[240:256])
        np.testing.assert_allclose(y, x[256:768], atol=1e-9)

    def test_context_length_checked(self):
        with pytest.raises(ValueError):
            lpc.compute_residual(np.zeros(512), np.zeros(16))

    def test_analyze_silence(self):
        np.testing.assert_array_equal(lpc.analyze(np.zeros(1024)), 0.0)


class TestGraphOps:
    def test_lsp_to_lpc_node_gradient(self, rng):
        w = dg.parameter(lpc.lpc_to_lsp(np.stack([random_stable_lpc(rng) for _ in range(3)])))
        G = rng.standard_normal((3, 16))
        chk = dg.gradient_check(lambda: dg.reduce_sum(dg.mul(lpc.lsp_to_lpc_node(w), dg.constant(G))), [w], 48)
        assert chk.max_relative_error() < 1e-4

    def test_residual_node_gradient(self, rng):
        ctx = rng.standard_normal((2, 1024))
        c = dg.parameter(np.stack([random_stable_lpc(rng) for _ in range(2)]))
        G = rng.standard_normal((2, 512))
        chk = dg.gradient_check(lambda: dg.reduce_sum(dg.mul(lpc.residual_node(ctx, c), dg.constant(G))), [c], 32)
        assert chk.max_relative_error() < 1e-4

    def test_synthesis_node_gradient(self, rng):
        u = dg.parameter(rng.standard_normal((2, 64)))
        c = dg.parameter(np.stack([random_stable_lpc(rng, max_reflection=0.6) for _ in range(2)]))
        G = rng.standard_normal((2, 64))
        chk = dg.gradient_check(lambda: dg.reduce_sum(dg.mul(lpc.synthesis_node(u, c), dg.constant(G))),
                                [u, c], 100)
        assert chk.max_relative_error(floor=1e-8) < 1e-4

    def test_synthesis_node_matches_lfilter(self, rng):
        a = random_stable_lpc(rng)
        u = rng.standard_normal((1, 100))
        y = lpc.synthesis_node(dg.constant(u), dg.constant(a[None])).value
        np.testing.assert_allclose(y[0], lpc.synthesize(u[0], a), atol=1e-12)

    def test_repair_node_straight_through(self):
        w = dg.parameter(np.r_[np.arange(1, 16) * 0.19, 0.1])
        out = lpc.repair_lsp_node(w)
        assert np.all(np.diff(out.value) > 0)
        dg.backward(dg.reduce_sum(out))
        np.testing.assert_array_equal(w.grad, 1.0)
