#!/usr/bin/env python3
"""
Command line front end for EVS device-free localization.

Subcommands generate simulated captures, extract feature files, train and
evaluate the classifier, and run the gamma sweep, feature comparison and
benchmark experiments.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from tqdm import tqdm

from channel_sim import RfoConfig, generate_dataset
from classifier import TrainConfig, confusion_counts, knn_predict, load_model, predict, save_model, \
    split_validation, train
from data_processing import append_results, append_runs, capture_header, read_capture, read_features, \
    write_features
from errors import EvsError
from evs import ALL_KINDS, DEFAULT_WINDOW, FeatureExtractor, FeatureKind, PipelineConfig
from experiments import capture_components, format_results, run_benchmark, run_feature_comparison, \
    run_gamma_sweep
from ofdm_core import MODULATION_NAMES, MODULATION_ORDERS
from scene_config import geometry_for, load_scene
from utils import format_large_number

logger = logging.getLogger(__name__)

RULE = '=' * 80


def _banner(title: str) -> None:
    print(f"\n{RULE}")
    print(title)
    print(f"{RULE}\n")


def _int_list(text: str) -> List[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _kind_list(text: str) -> List[FeatureKind]:
    try:
        return [FeatureKind.parse(v.strip()) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                       max_epochs=args.epochs, patience=args.patience, seed=args.seed, hidden=tuple(args.hidden))


def _pipeline_config(args: argparse.Namespace, kind: FeatureKind, gamma: int = 0) -> PipelineConfig:
    return PipelineConfig(kind=kind, gamma=gamma, window=args.window, order_hint=args.order,
                          literal_rfo=args.literal_rfo, fill_degenerate=args.fill_degenerate,
                          session_vote=args.session_vote)


def _load_capture(path: Path):
    grid, layout = geometry_for(path)
    return read_capture(path, grid, layout)


def _print_accuracy(accuracy: float, truth, predicted, n_classes: int) -> None:
    print(f"Accuracy: {accuracy * 100:.2f}% over {format_large_number(len(truth))} packets\n")
    counts = confusion_counts(truth, predicted, n_classes)
    table = pd.DataFrame(counts, index=[f"true {i}" for i in range(n_classes)],
                         columns=[str(i) for i in range(n_classes)])
    print("Confusion counts (rows = true label, columns = predicted):")
    print(table.to_string())


def cmd_gen(args: argparse.Namespace) -> int:
    scene = load_scene(args.scene)
    rfo = RfoConfig(cfo_hz=args.cfo_hz, cfo_std_hz=args.cfo_std_hz, hold_ltf_phase=not args.ramp_ltf)
    _banner("GENERATE SIMULATED CAPTURES")
    print(f"Scene: {args.scene or 'built-in conference room'}, {scene.n_labels} labels")
    print(f"Modulation: {MODULATION_NAMES[args.order]}, SNR {args.snr_db} dB, CFO {args.cfo_hz} Hz "
          f"(std {args.cfo_std_hz} Hz), seed {args.seed}")
    paths = generate_dataset(scene, rfo, args.train_per_label, args.test_per_label, args.snr_db, args.order,
                             args.seed, args.out, precision=args.precision, workers=args.workers)
    counts = pd.DataFrame({'label': range(scene.n_labels), 'train': args.train_per_label,
                           'test': args.test_per_label})
    print(counts.to_string(index=False))
    print(f"\nTrain: {paths['train']} ({capture_header(paths['train']).count:,} packets)")
    print(f"Test:  {paths['test']} ({capture_header(paths['test']).count:,} packets)")
    print(f"Manifest: {paths['manifest']}")
    return 0


def cmd_info(args: argparse.Namespace) -> int:
    capture = _load_capture(args.input)
    header = capture.header
    _banner(f"CAPTURE {args.input}")
    print(f"Format version: {header.version}")
    print(f"K = {header.K}, N_L = {header.n_ltf}, N_D = {header.n_df}")
    print(f"Packets: {header.count:,}, metadata: {'yes' if header.has_meta else 'no'}, "
          f"precision: {header.precision}")
    print("\nPackets per label:")
    print(capture.label_counts().rename('packets').to_string())
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    capture = _load_capture(args.input)
    config = _pipeline_config(args, args.kind, args.gamma)
    extractor = FeatureExtractor(config)
    features = extractor.extract_all(capture.packets(), total=len(capture), progress=not args.quiet)
    write_features(args.out, features)
    print(f"Wrote {len(features):,} {config.kind.value} feature vectors (K = {features.K}) to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    features = read_features(args.features)
    fit_set, val_set = split_validation(features, args.val_frac, args.seed)
    config = _train_config(args)
    model, history = train(fit_set, val_set, config)
    save_model(model, args.model_out)
    history_path = args.history_out or Path(args.model_out).with_suffix('.history.csv')
    history.to_csv(history_path, index=False, float_format='%.10g')
    last = history.iloc[-1]
    print(f"Trained {features.kind.value} model {model.layer_dims} for {len(history)} epochs "
          f"(train accuracy {last['train_accuracy'] * 100:.2f}%)")
    print(f"Model: {args.model_out}\nHistory: {history_path}")
    return 0


def _results_row(args: argparse.Namespace, experiment: str, kind: FeatureKind, accuracy: float) -> pd.DataFrame:
    return pd.DataFrame([{'experiment': experiment, 'kind': kind.value, 'gamma': args.gamma, 'seed': args.seed,
                          'accuracy': accuracy, 'std': 0.0}])


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    features = read_features(args.features)
    result = predict(model, features)
    _banner(f"EVALUATE {args.model} ON {args.features}")
    _print_accuracy(result.accuracy, features.labels, result.labels, model.n_classes)
    if args.results:
        append_results(args.results, _results_row(args, 'eval', features.kind, result.accuracy))
    return 0


def cmd_knn(args: argparse.Namespace) -> int:
    train_set = read_features(args.train)
    test_set = read_features(args.test)
    predicted = knn_predict(train_set, test_set, args.k)
    accuracy = float((predicted == test_set.labels).mean())
    n_classes = int(max(train_set.labels.max(), test_set.labels.max())) + 1
    _banner(f"KNN (k = {args.k}) ON {test_set.kind.value}")
    _print_accuracy(accuracy, test_set.labels, predicted, n_classes)
    if args.results:
        append_results(args.results, _results_row(args, 'knn', test_set.kind, accuracy))
    return 0


def _dataset_components(args: argparse.Namespace):
    data_dir = Path(args.input)
    config = _pipeline_config(args, FeatureKind.EVS_AMP)
    train_raws = capture_components(_load_capture(data_dir / 'train.evsc'), config, progress=not args.quiet)
    test_raws = capture_components(_load_capture(data_dir / 'test.evsc'), config, progress=not args.quiet)
    return train_raws, test_raws


def _report(title: str, summary: pd.DataFrame, per_run: pd.DataFrame, results: Optional[Path]) -> None:
    _banner(title)
    table = format_results(summary)
    print(table[['experiment', 'kind', 'gamma', 'accuracy_formatted', 'std_formatted']].to_string(index=False))
    if results:
        append_results(results, summary)
        append_runs(results, per_run)
        print(f"\nResults appended to {results}")


def _status(args: argparse.Namespace):
    return None if args.quiet else (lambda text: logger.info(text))


@contextmanager
def _progress(args: argparse.Namespace, desc: str):
    """Yield a fraction-complete callback that drives a tqdm bar."""
    with tqdm(total=1.0, desc=desc, disable=args.quiet, bar_format='{l_bar}{bar}| {elapsed}') as bar:
        def update(fraction: float) -> None:
            bar.update(fraction - bar.n)
        yield update


def cmd_sweep_gamma(args: argparse.Namespace) -> int:
    train_raws, test_raws = _dataset_components(args)
    with _progress(args, 'sweep-gamma') as progress:
        summary, per_run = run_gamma_sweep(train_raws, test_raws, args.kinds, args.gammas, args.runs,
                                           _train_config(args), args.window, args.val_frac,
                                           progress_callback=progress, status_callback=_status(args))
    _report("GAMMA SWEEP", summary, per_run, args.results)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    train_raws, test_raws = _dataset_components(args)
    with _progress(args, 'compare') as progress:
        summary, per_run = run_feature_comparison(train_raws, test_raws, args.runs, _train_config(args),
                                                  args.gamma, args.window, args.val_frac,
                                                  progress_callback=progress, status_callback=_status(args))
    _report("FEATURE COMPARISON", summary, per_run, args.results)
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    train_raws, test_raws = _dataset_components(args)
    with _progress(args, 'benchmark') as progress:
        summary, per_run = run_benchmark(train_raws, test_raws, args.runs, args.k, _train_config(args),
                                         args.gamma, args.window, args.val_frac,
                                         progress_callback=progress, status_callback=_status(args))
    _report("CLASSIFIER BENCHMARK", summary, per_run, args.results)
    return 0


def _chain_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument('--window', type=int, default=DEFAULT_WINDOW, help='Calibration window T in packets (default: 50)')
    p.add_argument('--order', type=int, choices=MODULATION_ORDERS, default=None,
                   help='Known modulation order; skips k-means classification')
    p.add_argument('--session-vote', type=int, default=0,
                   help='Classify only the first N packets and reuse their majority order')
    p.add_argument('--literal-rfo', action='store_true', help='Literal pilot product for RFO tracking')
    p.add_argument('--fill-degenerate', action='store_true',
                   help='Reuse the previous phase when a pilot accumulator is zero')
    return p


def _training_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument('--val-frac', type=float, default=0.1, help='Validation share for early stopping (default: 0.1)')
    p.add_argument('--hidden', type=_int_list, default=[128, 64], help='Hidden layer sizes (default: 128,64)')
    p.add_argument('--epochs', type=int, default=100, help='Maximum epochs (default: 100)')
    p.add_argument('--lr', type=float, default=1e-3, help='Learning rate (default: 1e-3)')
    p.add_argument('--momentum', type=float, default=0.9, help='Momentum (default: 0.9)')
    p.add_argument('--batch-size', type=int, default=64, help='Mini-batch size (default: 64)')
    p.add_argument('--patience', type=int, default=10, help='Early-stop patience in epochs (default: 10)')
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='evs-loc', description='Error vector spectrum device-free localization')
    parser.add_argument('-v', '--verbose', action='store_true', help='Verbose output')
    parser.add_argument('-q', '--quiet', action='store_true', help='No progress bars')
    seed = argparse.ArgumentParser(add_help=False)
    seed.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    chain, training = _chain_parser(), _training_parser()

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    p = subparsers.add_parser('gen', parents=[seed], help='Simulate train/test captures')
    p.add_argument('--scene', type=Path, default=None, help='Scene JSON (default: built-in room)')
    p.add_argument('--out', type=Path, required=True, help='Output directory')
    p.add_argument('--train-per-label', type=int, default=400, help='Training packets per label (default: 400)')
    p.add_argument('--test-per-label', type=int, default=100, help='Test packets per label (default: 100)')
    p.add_argument('--snr-db', type=float, default=20.0, help="Channel SNR in dB, 'inf' for no noise (default: 20)")
    p.add_argument('--cfo-hz', type=float, default=2000.0, help='Mean residual CFO in Hz (default: 2000)')
    p.add_argument('--cfo-std-hz', type=float, default=500.0, help='Per-packet CFO spread in Hz (default: 500)')
    p.add_argument('--ramp-ltf', action='store_true', help='Let the CFO ramp run through the LTF symbols too')
    p.add_argument('--order', type=int, choices=MODULATION_ORDERS, default=4, help='Data modulation order (default: 4)')
    p.add_argument('--precision', choices=['single', 'double'], default='single',
                   help="Sample precision (default: single); use 'double' with --snr-db inf to keep noise-free "
                        "EVS within 1e-9")
    p.add_argument('--workers', type=int, default=1, help='Worker processes (default: 1)')
    p.set_defaults(func=cmd_gen)

    p = subparsers.add_parser('info', parents=[seed], help='Show capture header and per-label counts')
    p.add_argument('--in', dest='input', type=Path, required=True, help='Capture file')
    p.set_defaults(func=cmd_info)

    p = subparsers.add_parser('extract', parents=[seed, chain], help='Extract a feature file from a capture')
    p.add_argument('--in', dest='input', type=Path, required=True, help='Capture file')
    p.add_argument('--kind', type=FeatureKind.parse, required=True, help=f"One of {[k.value for k in ALL_KINDS]}")
    p.add_argument('--gamma', type=int, default=0, help='Calibration exponent (default: 0)')
    p.add_argument('--out', type=Path, required=True, help='Feature CSV')
    p.set_defaults(func=cmd_extract)

    p = subparsers.add_parser('train', parents=[seed, training], help='Train the MLP on a feature file')
    p.add_argument('--features', type=Path, required=True, help='Training feature CSV')
    p.add_argument('--model-out', type=Path, required=True, help='Model JSON')
    p.add_argument('--history-out', type=Path, default=None, help='Epoch history CSV (default: next to the model)')
    p.set_defaults(func=cmd_train)

    p = subparsers.add_parser('eval', parents=[seed], help='Evaluate a trained model')
    p.add_argument('--model', type=Path, required=True, help='Model JSON')
    p.add_argument('--features', type=Path, required=True, help='Test feature CSV')
    p.add_argument('--gamma', type=int, default=0, help='Gamma recorded in the results row')
    p.add_argument('--results', type=Path, default=None, help='Results CSV to append to')
    p.set_defaults(func=cmd_eval)

    p = subparsers.add_parser('knn', parents=[seed], help='KNN baseline on two feature files')
    p.add_argument('--train', type=Path, required=True, help='Training feature CSV')
    p.add_argument('--test', type=Path, required=True, help='Test feature CSV')
    p.add_argument('--k', type=int, default=5, help='Neighbours (default: 5)')
    p.add_argument('--gamma', type=int, default=0, help='Gamma recorded in the results row')
    p.add_argument('--results', type=Path, default=None, help='Results CSV to append to')
    p.set_defaults(func=cmd_knn)

    experiment_parents = [seed, chain, training]
    p = subparsers.add_parser('sweep-gamma', parents=experiment_parents, help='Accuracy versus gamma')
    p.add_argument('--in', dest='input', type=Path, required=True, help='Dataset directory from gen')
    p.add_argument('--kinds', type=_kind_list, default=[FeatureKind.EVS_AMP, FeatureKind.EVS_PHASE])
    p.add_argument('--gammas', type=_int_list, default=[0, 2, 4, 6, 8])
    p.add_argument('--runs', type=int, default=5, help='Training runs per configuration (default: 5)')
    p.add_argument('--results', type=Path, default=None, help='Results CSV to append to')
    p.set_defaults(func=cmd_sweep_gamma)

    p = subparsers.add_parser('compare', parents=experiment_parents, help='Compare the four feature kinds')
    p.add_argument('--in', dest='input', type=Path, required=True, help='Dataset directory from gen')
    p.add_argument('--gamma', type=int, default=0, help='Calibration exponent for EVS kinds (default: 0)')
    p.add_argument('--runs', type=int, default=5, help='Training runs per kind (default: 5)')
    p.add_argument('--results', type=Path, default=None, help='Results CSV to append to')
    p.set_defaults(func=cmd_compare)

    p = subparsers.add_parser('benchmark', parents=experiment_parents, help='DNN vs KNN vs linear on all kinds')
    p.add_argument('--in', dest='input', type=Path, required=True, help='Dataset directory from gen')
    p.add_argument('--gamma', type=int, default=0, help='Calibration exponent for EVS kinds (default: 0)')
    p.add_argument('--runs', type=int, default=5, help='Training runs per network (default: 5)')
    p.add_argument('--k', type=int, default=5, help='KNN neighbours (default: 5)')
    p.add_argument('--results', type=Path, default=None, help='Results CSV to append to')
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 2

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s"
    )

    try:
        return args.func(args)
    except (EvsError, OSError) as e:
        index = getattr(e, 'packet_index', None)
        where = f"packet {index}: " if index is not None else ''
        print(f"ERROR: {where}{e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
