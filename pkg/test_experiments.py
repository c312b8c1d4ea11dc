"""Tests for the sweep, comparison and benchmark drivers."""

import numpy as np
import pandas as pd
import pytest

from baseband import CsiVector
from channel_sim import RfoConfig, generate_packets
from classifier import TrainConfig, knn_predict
from data_processing import RESULT_COLUMNS, RUN_COLUMNS, read_capture, write_capture
from evs import FeatureKind, PipelineConfig, RawComponents, RawEvsVector, features_from_components, raw_components
from experiments import capture_components, format_results, run_benchmark, run_feature_comparison, \
    run_gamma_sweep

QUICK = TrainConfig(learning_rate=0.05, momentum=0.5, batch_size=16, max_epochs=8, patience=3, hidden=(8,), seed=4)


def _components(per_label: int, seed: int):
    """Three well separated synthetic locations, interleaved in stream order."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(per_label):
        for label in range(3):
            noise = 0.01 * (rng.standard_normal(52) + 1j * rng.standard_normal(52))
            h = (1.0 + label) * np.exp(0.3j * label) + noise
            eps = 0.1 * (label + 1) * np.exp(0.7j * label) + noise
            out.append(RawComponents(label=label, csi=CsiVector(h_hat=h), raw=RawEvsVector(eps_bar=eps)))
    return out


@pytest.fixture(scope="module")
def raws():
    return _components(20, 0), _components(5, 1)


class TestGammaSweep:

    def test_table_shapes(self, raws):
        summary, per_run = run_gamma_sweep(*raws, [FeatureKind.EVS_AMP, 'evs-phase'], [0, 3], 2, QUICK)
        assert list(summary.columns) == RESULT_COLUMNS
        assert list(per_run.columns) == RUN_COLUMNS
        assert len(summary) == 4 and len(per_run) == 8
        assert set(summary['experiment']) == {'sweep-gamma'}
        assert list(summary['gamma']) == [0, 3, 0, 3]
        assert summary['accuracy'].between(0, 1).all()

    def test_summary_matches_runs(self, raws):
        summary, per_run = run_gamma_sweep(*raws, ['evs-amp'], [0, 1], 3, QUICK)
        grouped = per_run.groupby(['kind', 'gamma'])['accuracy']
        np.testing.assert_allclose(summary['accuracy'], grouped.mean().to_numpy())
        np.testing.assert_allclose(summary['std'], grouped.std(ddof=1).to_numpy())

    def test_single_run_has_zero_std(self, raws):
        summary, _ = run_gamma_sweep(*raws, ['csi-amp'], [0], 1, QUICK)
        assert summary['std'].iloc[0] == 0.0

    def test_reproducible(self, raws):
        first, _ = run_gamma_sweep(*raws, ['evs-amp'], [2], 2, QUICK)
        second, _ = run_gamma_sweep(*raws, ['evs-amp'], [2], 2, QUICK)
        pd.testing.assert_frame_equal(first, second)

    def test_callbacks(self, raws):
        progress, status = [], []
        run_gamma_sweep(*raws, ['evs-amp'], [0, 2], 1, QUICK, progress_callback=progress.append,
                        status_callback=status.append)
        assert progress == sorted(progress) and progress[-1] == 1.0
        assert "Config 2/2" in status[1]
        assert status[-1].startswith("Sweep complete")


class TestComparisonAndBenchmark:

    def test_comparison_covers_all_kinds(self, raws):
        summary, per_run = run_feature_comparison(*raws, 1, QUICK, gamma=2)
        assert list(summary['kind']) == ['csi-amp', 'csi-phase', 'evs-amp', 'evs-phase']
        assert set(summary['experiment']) == {'compare'} and set(per_run['experiment']) == {'compare'}
        assert set(summary['gamma']) == {2}

    def test_benchmark_rows(self, raws):
        summary, per_run = run_benchmark(*raws, 2, 3, QUICK)
        assert len(summary) == 12
        counts = per_run.groupby('experiment').size().to_dict()
        assert counts == {'benchmark-dnn': 8, 'benchmark-knn': 4, 'benchmark-linear': 8}
        knn = summary[summary['experiment'] == 'benchmark-knn']
        assert (knn['accuracy'] == 1.0).all() and (knn['std'] == 0.0).all()


class TestHelpers:

    def test_format_results(self):
        table = pd.DataFrame([{'experiment': 'compare', 'kind': 'evs-amp', 'gamma': 0, 'seed': 0,
                               'accuracy': 0.87654, 'std': 0.0123}])
        formatted = format_results(table)
        assert formatted['accuracy_formatted'].iloc[0] == '87.65%'
        assert formatted['std_formatted'].iloc[0] == '1.23%'
        assert 'accuracy_formatted' not in table

    def test_capture_components_keeps_raw_evs_for_csi_kind(self, scene, grid, layout, tmp_path):
        packets = list(generate_packets(scene, RfoConfig(), 1, 20.0, 4, seed=3))
        path = write_capture(tmp_path / 'c.evsc', packets, len(packets), grid, layout)
        comps = capture_components(read_capture(path), PipelineConfig(kind='csi-amp', order_hint=4))
        assert [c.label for c in comps] == [p.label for p in packets]
        assert all(c.raw is not None and c.order == 4 for c in comps)


@pytest.mark.slow
class TestSimulatedSeparability:
    """Accuracy directions that hold for the AWGN-only room simulator.

    The simulated EVS is e^{-j phi_hat} w / h_hat with circular w, so its
    phase is independent of the location while the CSI amplitude is not.
    """

    @pytest.fixture(scope="class")
    def simulated(self, scene, grid, layout):
        rfo = RfoConfig(cfo_hz=2000.0, cfo_std_hz=500.0)
        config = PipelineConfig(kind='evs-amp', order_hint=4)

        def components(count, split):
            packets = generate_packets(scene, rfo, count, 20.0, 4, seed=11, split=split, grid=grid, layout=layout)
            return [raw_components(packet, config) for packet in packets]
        return components(40, 'train'), components(20, 'test')

    @staticmethod
    def _knn_accuracy(simulated, kind, gamma):
        train_raws, test_raws = simulated
        train_set = features_from_components(train_raws, kind, gamma)
        test_set = features_from_components(test_raws, kind, gamma)
        return float(np.mean(knn_predict(train_set, test_set, 5) == test_set.labels))

    def test_csi_amplitude_separates_locations(self, simulated):
        assert self._knn_accuracy(simulated, 'csi-amp', 0) >= 0.5

    @pytest.mark.parametrize("gamma", [0, 4])
    def test_evs_phase_stays_at_chance(self, simulated, gamma):
        assert self._knn_accuracy(simulated, 'evs-phase', gamma) <= 0.12

    def test_csi_amplitude_beats_evs_phase(self, simulated):
        gap = self._knn_accuracy(simulated, 'csi-amp', 0) - self._knn_accuracy(simulated, 'evs-phase', 4)
        assert gap >= 0.3
