"""
Experiment drivers.

Gamma sweeps, the four-feature comparison and the classifier benchmark.
The gamma-independent part of the receiver chain is computed once per
packet; each configuration only re-runs calibration, training and
evaluation.
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from classifier import TrainConfig, knn_predict, predict, split_validation, train
from data_processing import RESULT_COLUMNS, RUN_COLUMNS, Capture
from evs import ALL_KINDS, DEFAULT_WINDOW, FeatureExtractor, FeatureKind, PipelineConfig, RawComponents, \
    features_from_components

logger = logging.getLogger(__name__)

ProgressCallback = Optional[Callable[[float], None]]
StatusCallback = Optional[Callable[[str], None]]


def capture_components(capture: Capture, config: PipelineConfig, progress: bool = False) -> List[RawComponents]:
    """Receiver chain up to the raw EVS for every packet of a capture, in file order.

    The config's kind is forced to an EVS kind so that CSI and raw EVS are
    both available afterwards.
    """
    if not config.kind.uses_evs:
        config = replace(config, kind=FeatureKind.EVS_AMP)
    extractor = FeatureExtractor(config)
    out = []
    for index in tqdm(range(len(capture)), desc='receiver chain', disable=not progress):
        try:
            out.append(extractor.components(capture.packet(index)))
        except Exception as e:
            e.packet_index = index
            raise
    return out


def run_training(train_raws: Sequence[RawComponents], test_raws: Sequence[RawComponents], kind: FeatureKind,
                 gamma: int, runs: int, train_config: TrainConfig, window: int = DEFAULT_WINDOW,
                 val_frac: float = 0.1, n_classes: Optional[int] = None) -> List[float]:
    """Train ``runs`` networks on one feature configuration and return their test accuracies.

    The validation split is fixed by ``train_config.seed``; run r reinitializes
    the weights and the shuffle stream with seed + r.
    """
    train_set = features_from_components(train_raws, kind, gamma, window)
    test_set = features_from_components(test_raws, kind, gamma, window)
    fit_set, val_set = split_validation(train_set, val_frac, train_config.seed)
    if n_classes is None:
        n_classes = int(max(train_set.labels.max(), test_set.labels.max())) + 1
    accuracies = []
    for run in range(runs):
        model, _ = train(fit_set, val_set, replace(train_config, seed=train_config.seed + run), n_classes=n_classes)
        accuracies.append(predict(model, test_set).accuracy)
    return accuracies


def _summarize(experiment: str, kind: FeatureKind, gamma: int, seed: int,
               accuracies: Sequence[float]) -> Tuple[Dict, List[Dict]]:
    values = pd.Series(accuracies, dtype=float)
    summary = {'experiment': experiment, 'kind': kind.value, 'gamma': gamma, 'seed': seed,
               'accuracy': float(values.mean()), 'std': float(values.std(ddof=1)) if len(values) > 1 else 0.0}
    per_run = [{'experiment': experiment, 'kind': kind.value, 'gamma': gamma, 'seed': seed, 'run': run,
                'accuracy': float(acc)} for run, acc in enumerate(accuracies)]
    return summary, per_run


def run_gamma_sweep(train_raws: Sequence[RawComponents], test_raws: Sequence[RawComponents],
                    kinds: Sequence[FeatureKind], gammas: Sequence[int], runs: int, train_config: TrainConfig,
                    window: int = DEFAULT_WINDOW, val_frac: float = 0.1,
                    progress_callback: ProgressCallback = None,
                    status_callback: StatusCallback = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Mean and standard deviation of test accuracy for every (kind, gamma).

    Args:
        train_raws, test_raws: Precomputed receiver-chain components
        kinds: Feature kinds to sweep
        gammas: Calibration exponents
        runs: Training runs per configuration
        train_config: Optimizer settings (seed is the base seed)
        window: Calibration window T
        val_frac: Validation share of the training packets
        progress_callback: Optional callback for progress updates
        status_callback: Optional callback for status updates

    Returns:
        Tuple of (summary rows with RESULT_COLUMNS, per-run rows with RUN_COLUMNS)
    """
    configs = [(FeatureKind.parse(k), g) for k in kinds for g in gammas]
    summaries, per_run = [], []
    for i, (kind, gamma) in enumerate(configs):
        if progress_callback:
            progress_callback((i + 0.5) / len(configs))
        if status_callback:
            status_callback(f"Training {kind.value}, gamma = {gamma} - Config {i + 1}/{len(configs)}")
        accuracies = run_training(train_raws, test_raws, kind, gamma, runs, train_config, window, val_frac)
        summary, rows = _summarize('sweep-gamma', kind, gamma, train_config.seed, accuracies)
        logger.info("%s gamma=%d: accuracy %.4f +- %.4f", kind.value, gamma, summary['accuracy'], summary['std'])
        summaries.append(summary)
        per_run.extend(rows)
    if progress_callback:
        progress_callback(1.0)
    if status_callback:
        status_callback(f"Sweep complete: {len(configs)} configurations x {runs} runs")
    return pd.DataFrame(summaries, columns=RESULT_COLUMNS), pd.DataFrame(per_run, columns=RUN_COLUMNS)


def run_feature_comparison(train_raws: Sequence[RawComponents], test_raws: Sequence[RawComponents], runs: int,
                           train_config: TrainConfig, gamma: int = 0, window: int = DEFAULT_WINDOW,
                           val_frac: float = 0.1, progress_callback: ProgressCallback = None,
                           status_callback: StatusCallback = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """All four feature kinds through the same network configuration."""
    summary, per_run = run_gamma_sweep(train_raws, test_raws, ALL_KINDS, [gamma], runs, train_config, window,
                                       val_frac, progress_callback, status_callback)
    summary['experiment'] = 'compare'
    per_run['experiment'] = 'compare'
    return summary, per_run


def run_benchmark(train_raws: Sequence[RawComponents], test_raws: Sequence[RawComponents], runs: int, k: int,
                  train_config: TrainConfig, gamma: int = 0, window: int = DEFAULT_WINDOW, val_frac: float = 0.1,
                  progress_callback: ProgressCallback = None,
                  status_callback: StatusCallback = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """DNN, KNN and zero-hidden-layer network on every feature kind.

    Experiments are tagged benchmark-dnn, benchmark-knn and benchmark-linear.
    KNN is deterministic and runs once.
    """
    linear_config = replace(train_config, hidden=())
    summaries, per_run = [], []
    steps = len(ALL_KINDS) * 3
    for i, kind in enumerate(ALL_KINDS):
        if status_callback:
            status_callback(f"Benchmarking {kind.value} - Kind {i + 1}/{len(ALL_KINDS)}")
        results = {
            'benchmark-dnn': run_training(train_raws, test_raws, kind, gamma, runs, train_config, window, val_frac),
        }
        if progress_callback:
            progress_callback((3 * i + 1) / steps)
        train_set = features_from_components(train_raws, kind, gamma, window)
        test_set = features_from_components(test_raws, kind, gamma, window)
        predicted = knn_predict(train_set, test_set, min(k, len(train_set)))
        results['benchmark-knn'] = [float(np.mean(predicted == test_set.labels))]
        if progress_callback:
            progress_callback((3 * i + 2) / steps)
        results['benchmark-linear'] = run_training(train_raws, test_raws, kind, gamma, runs, linear_config,
                                                   window, val_frac)
        for experiment, accuracies in results.items():
            summary, rows = _summarize(experiment, kind, gamma, train_config.seed, accuracies)
            summaries.append(summary)
            per_run.extend(rows)
        if progress_callback:
            progress_callback((3 * i + 3) / steps)
    return pd.DataFrame(summaries, columns=RESULT_COLUMNS), pd.DataFrame(per_run, columns=RUN_COLUMNS)


def format_results(results: pd.DataFrame) -> pd.DataFrame:
    """Add percentage columns for printing.

    Args:
        results: DataFrame with RESULT_COLUMNS

    Returns:
        DataFrame with additional formatted columns
    """
    result_df = results.copy()
    result_df['accuracy_formatted'] = result_df['accuracy'].apply(lambda x: f"{x * 100:.2f}%")
    result_df['std_formatted'] = result_df['std'].apply(lambda x: f"{x * 100:.2f}%")
    return result_df
