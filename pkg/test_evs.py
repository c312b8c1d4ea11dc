"""Tests for modulation classification, hard decisions, EVS calibration and feature extraction."""

import math

import numpy as np
import pytest

from baseband import equalize, estimate_csi, estimate_rfo
from channel_sim import build_profile
from errors import InsufficientDataError, RejectedInputError, SingularEqualizerError
from evs import (CalibrationWindow, FeatureExtractor, FeatureKind, FeatureSet, PipelineConfig, RawEvsVector,
                 average_evs, calibrate, classify_modulation, extract_features, features_from_components,
                 hard_decide, raw_evs)
from ofdm_core import constellation


def _equalized(packet):
    csi = estimate_csi(packet.ltf_rx, packet.layout.ltf_matrix())
    rfo = estimate_rfo(packet.df_rx, csi, packet.grid, packet.layout.pilot_ref)
    return equalize(packet.df_rx, csi, rfo), rfo


# ============================================================================
# MODULATION CLASSIFICATION
# ============================================================================


class TestClassifyModulation:

    @pytest.mark.parametrize("order", [2, 4, 16, 64])
    def test_noise_free(self, grid, simulate_packet, order):
        x_bar, _ = _equalized(simulate_packet(order=order, seed=order))
        assert classify_modulation(x_bar, grid) == order

    def test_invariant_to_symbol_order(self, grid, simulate_packet):
        x_bar, _ = _equalized(simulate_packet(order=16, snr_db=20.0, seed=5))
        permuted = x_bar.x_bar[:, np.random.default_rng(0).permutation(x_bar.x_bar.shape[1])]
        assert classify_modulation(permuted, grid) == classify_modulation(x_bar, grid)

    def test_insufficient_symbols(self, grid):
        with pytest.raises(InsufficientDataError, match="needs >= 64"):
            classify_modulation(np.ones((grid.K, 1), dtype=complex), grid)

    @pytest.mark.slow
    def test_qpsk_at_25_db(self, grid, simulate_packet):
        hits = 0
        for seed in range(1000):
            x_bar, _ = _equalized(simulate_packet(order=4, snr_db=25.0, seed=seed))
            hits += classify_modulation(x_bar, grid) == 4
        assert hits >= 990


# ============================================================================
# HARD DECISION
# ============================================================================


class TestHardDecide:

    def _single(self, grid, layout, value, order):
        x_bar = np.zeros((grid.K, 1), dtype=complex)
        row = grid.data_rows[0]
        x_bar[row, 0] = value
        return hard_decide(x_bar, order, grid, layout)[row, 0]

    def test_bpsk(self, grid, layout):
        assert self._single(grid, layout, 0.9 + 0.1j, 2) == 1.0

    def test_qpsk(self, grid, layout):
        assert self._single(grid, layout, -0.6 - 0.8j, 4) == pytest.approx((-1 - 1j) / np.sqrt(2))

    def test_tie_goes_to_first_point(self, grid, layout):
        assert self._single(grid, layout, 0j, 2) == -1.0

    def test_pilots_take_reference(self, grid, layout):
        decided = hard_decide(np.zeros((grid.K, 50), dtype=complex), 16, grid, layout)
        np.testing.assert_array_equal(decided[grid.pilot_rows, :], layout.pilot_matrix())

    def test_matches_brute_force(self, grid, layout):
        rng = np.random.default_rng(1)
        x_bar = (rng.standard_normal((grid.K, 200)) + 1j * rng.standard_normal((grid.K, 200))) * 0.8
        decided = hard_decide(x_bar, 64, grid, layout)
        points = constellation(64).points
        for row in grid.data_rows:
            for col in range(200):
                nearest = min(points, key=lambda p: abs(x_bar[row, col] - p))
                assert decided[row, col] == nearest

    def test_idempotent(self, grid, layout):
        rng = np.random.default_rng(2)
        x_bar = rng.standard_normal((grid.K, 50)) + 1j * rng.standard_normal((grid.K, 50))
        once = hard_decide(x_bar, 16, grid, layout)
        np.testing.assert_array_equal(hard_decide(once, 16, grid, layout), once)


# ============================================================================
# RAW EVS, AVERAGING AND CALIBRATION
# ============================================================================


class TestRawEvs:

    def test_exact_zero(self):
        x = np.exp(1j * np.arange(12.0)).reshape(4, 3)
        np.testing.assert_array_equal(raw_evs(x, x).e_r, 0)

    def test_noise_free_chain(self, scene, grid, layout, simulate_packet):
        h = build_profile(scene, 20, grid).frequency_response(grid)
        x_bar, _ = _equalized(simulate_packet(h, order=16, cfo_hz=2200.0, phi0=5.0, seed=3))
        x_hat = hard_decide(x_bar, 16, grid, layout)
        assert np.max(np.abs(raw_evs(x_bar, x_hat).e_r)) <= 1e-9

    def test_error_is_rotated_noise_over_channel(self, grid):
        rng = np.random.default_rng(7)
        x = constellation(16).points[rng.integers(0, 16, size=(grid.K, 50))]
        h = (0.5 + rng.uniform(size=grid.K)) * np.exp(1j * rng.uniform(-np.pi, np.pi, grid.K))
        phi_hat = rng.uniform(-np.pi, np.pi, 50)
        w = 0.01 * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
        expected = np.exp(-1j * phi_hat)[None, :] * w / h[:, None]
        np.testing.assert_allclose(raw_evs(x + expected, x).e_r, expected, rtol=0, atol=1e-12)

    def test_error_matches_received_samples(self, scene, grid, layout, simulate_packet):
        h = build_profile(scene, 7, grid).frequency_response(grid)
        packet = simulate_packet(h, order=4, cfo_hz=1500.0, phi0=1.2, snr_db=30.0, seed=9)
        csi = estimate_csi(packet.ltf_rx, packet.layout.ltf_matrix())
        x_bar, rfo = _equalized(packet)
        x_hat = hard_decide(x_bar, 4, grid, layout)
        expected = np.exp(-1j * rfo.phi_hat)[None, :] * packet.df_rx / csi.h_hat[:, None] - x_hat
        np.testing.assert_allclose(raw_evs(x_bar, x_hat).e_r, expected, rtol=0, atol=1e-12)

    def test_noise_variance_with_perfect_equalization(self, grid):
        rng = np.random.default_rng(4)
        x = constellation(4).points[rng.integers(0, 4, size=(grid.K, 200))]
        sigma2 = 0.01
        noise = np.sqrt(sigma2 / 2) * (rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape))
        e_r = raw_evs(x + noise, x).e_r
        assert np.var(e_r) == pytest.approx(sigma2, rel=0.05)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(RejectedInputError, match="differs"):
            raw_evs(np.zeros((4, 3)), np.zeros((4, 2)))


class TestAverageEvs:

    def test_constant(self):
        np.testing.assert_allclose(average_evs(np.full((5, 7), 0.3 - 0.2j)).eps_bar, 0.3 - 0.2j)

    def test_cancellation(self):
        np.testing.assert_array_equal(average_evs(np.array([[1.0, -1.0], [1.0, -1.0]])).eps_bar, 0)

    def test_column_permutation(self):
        rng = np.random.default_rng(3)
        e_r = rng.standard_normal((6, 9)) + 1j * rng.standard_normal((6, 9))
        np.testing.assert_allclose(average_evs(e_r[:, ::-1]).eps_bar, average_evs(e_r).eps_bar, atol=1e-15)


class TestCalibrate:

    def setup_method(self):
        rng = np.random.default_rng(7)
        self.history = [rng.standard_normal(8) + 1j * rng.standard_normal(8) for _ in range(5)]
        self.current = self.history[-1]
        self.mean = np.mean(self.history, axis=0)

    def test_gamma_zero_is_identity(self):
        np.testing.assert_array_equal(calibrate(self.current, self.history, 0).eps, self.current)

    def test_gamma_one(self):
        np.testing.assert_allclose(calibrate(self.current, self.history, 1).eps,
                                   self.current / 2 + self.mean / 2, atol=1e-15)

    def test_gamma_twelve_approaches_mean(self):
        eps = calibrate(self.current, self.history, 12).eps
        assert np.all(np.abs(eps - self.mean) <= np.abs(self.current - self.mean) / 4096 + 1e-12)

    def test_linear(self):
        other = [h * (0.5 - 2j) for h in self.history]
        combined = calibrate(2 * self.current + other[-1], [2 * a + b for a, b in zip(self.history, other)], 3).eps
        expected = 2 * calibrate(self.current, self.history, 3).eps + calibrate(other[-1], other, 3).eps
        np.testing.assert_allclose(combined, expected, atol=1e-12)

    def test_empty_history(self):
        with pytest.raises(RejectedInputError, match="history is empty"):
            calibrate(self.current, [], 2)

    @pytest.mark.parametrize("gamma", [-1, 1.5])
    def test_rejects_bad_gamma(self, gamma):
        with pytest.raises(RejectedInputError, match="gamma"):
            calibrate(self.current, self.history, gamma)

    def test_window_slides(self):
        window = CalibrationWindow(size=3)
        for h in self.history:
            eps = window.push(RawEvsVector(eps_bar=h), 1).eps
        assert len(window) == 3
        np.testing.assert_allclose(eps, self.current / 2 + np.mean(self.history[-3:], axis=0) / 2, atol=1e-15)


# ============================================================================
# FEATURE EXTRACTION
# ============================================================================


class TestExtractFeatures:

    def test_csi_amp_identity_channel(self, simulate_packet):
        values = extract_features(simulate_packet(), PipelineConfig(kind='csi-amp')).values
        np.testing.assert_allclose(values, 1.0, atol=1e-12)

    def test_evs_amp_noise_free(self, scene, grid, simulate_packet):
        h = build_profile(scene, 3, grid).frequency_response(grid)
        packet = simulate_packet(h, order=64, cfo_hz=1200.0, phi0=0.7, seed=1)
        assert np.max(extract_features(packet, PipelineConfig(kind='evs-amp')).values) <= 1e-9

    def test_rfo_invariance(self, scene, grid, simulate_packet):
        h = build_profile(scene, 9, grid).frequency_response(grid)
        a = simulate_packet(h, phi0=0.2, cfo_hz=500.0, seed=4)
        b = simulate_packet(h, phi0=1.0, cfo_hz=-1500.0, seed=4)
        for kind in ('evs-amp', 'evs-phase'):
            config = PipelineConfig(kind=kind, order_hint=4)
            np.testing.assert_allclose(extract_features(a, config).values, extract_features(b, config).values,
                                       atol=1e-6)
        phase = PipelineConfig(kind='csi-phase')
        delta = np.angle(np.exp(1j * (extract_features(b, phase).values - extract_features(a, phase).values)))
        np.testing.assert_allclose(delta, -0.8, atol=1e-9)

    def test_phase_range(self, simulate_packet):
        values = extract_features(simulate_packet(snr_db=10.0, seed=2), PipelineConfig(kind='evs-phase')).values
        assert values.shape == (52,)
        assert np.all(values > -math.pi) and np.all(values <= math.pi)

    def test_unknown_kind(self):
        with pytest.raises(RejectedInputError, match="unknown feature kind"):
            PipelineConfig(kind='evm')


class TestFeatureExtractor:

    def test_windows_are_per_label(self, simulate_packet):
        packets = [simulate_packet(label=label, snr_db=20.0, seed=i) for i, label in enumerate([0, 1, 0, 0, 1])]
        extractor = FeatureExtractor(PipelineConfig(kind='evs-amp', gamma=2, window=50, order_hint=4))
        features = extractor.extract_all(packets)
        assert len(extractor.windows[0]) == 3
        assert len(extractor.windows[1]) == 2
        assert features.kind is FeatureKind.EVS_AMP
        np.testing.assert_array_equal(features.labels, [0, 1, 0, 0, 1])

    def test_session_vote(self, simulate_packet):
        extractor = FeatureExtractor(PipelineConfig(kind='evs-amp', session_vote=3))
        for seed in range(4):
            extractor.extract(simulate_packet(order=16, seed=seed))
        assert extractor.session_order == 16

    def test_components_match_streaming(self, simulate_packet):
        packets = [simulate_packet(label=i % 2, snr_db=15.0, seed=i) for i in range(8)]
        streaming = FeatureExtractor(PipelineConfig(kind='evs-phase', gamma=2, window=3, order_hint=4))
        expected = streaming.extract_all(packets)
        collector = FeatureExtractor(PipelineConfig(kind='evs-amp', order_hint=4))
        raws = [collector.components(p) for p in packets]
        actual = features_from_components(raws, 'evs-phase', gamma=2, window=3)
        np.testing.assert_array_equal(actual.values, expected.values)
        csi = features_from_components(raws, 'csi-amp')
        assert csi.kind is FeatureKind.CSI_AMP and csi.values.shape == (8, 52)

    def test_failing_packet_index(self, grid, simulate_packet):
        h = np.ones(grid.K, dtype=complex)
        h[0] = 0
        packets = [simulate_packet(), simulate_packet(seed=1), simulate_packet(h)]
        with pytest.raises(SingularEqualizerError) as info:
            FeatureExtractor(PipelineConfig(kind='evs-amp', order_hint=4)).extract_all(packets)
        assert info.value.packet_index == 2

    def test_feature_set_subset(self):
        features = FeatureSet(kind='csi-amp', labels=[0, 1, 2], values=np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(features.subset([2, 0]).labels, [2, 0])
