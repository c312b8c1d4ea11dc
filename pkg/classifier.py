"""
Error vector based location classifier.

A numpy multilayer perceptron (SeLU hidden layers, softmax output,
cross-entropy loss, hand-written backpropagation, SGD with momentum) and a
brute-force KNN baseline. Parameters are held in a flat dict keyed
W0, b0, W1, b1, ... with weights shaped (out, in).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax
from sklearn.metrics import confusion_matrix
from sklearn.neighbors import NearestNeighbors

from errors import FeatureKindMismatchError, InsufficientDataError, RejectedInputError
from evs import FeatureKind, FeatureSet
from utils import atomic_write, chunks

logger = logging.getLogger(__name__)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
LOSS_FLOOR = 1e-12
DEFAULT_HIDDEN = (128, 64)
MODEL_FORMAT = 'evs-mlp'
MODEL_VERSION = 1

# Number of cross-entropy evaluations clamped at LOSS_FLOOR since import.
clamped_loss_count = 0


def selu(x: np.ndarray) -> np.ndarray:
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_derivative(x: np.ndarray) -> np.ndarray:
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


@dataclass
class MlpModel:
    """Fully connected network plus the input standardization learned on the training split.

    Attributes:
        layer_dims: [K, H1, ..., C]; no hidden entries gives multinomial logistic regression
        params: W{i} (out x in) and b{i} (out) for every layer i
        kind: Feature kind the model was trained on
        mean, scale: Per-feature standardization applied before ``forward``
    """
    layer_dims: List[int]
    params: Dict[str, np.ndarray]
    kind: Optional[FeatureKind] = None
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise RejectedInputError(f"invalid layer dims {self.layer_dims}")
        for i, (n_in, n_out) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            W, b = self.params[f"W{i}"], self.params[f"b{i}"]
            if W.shape != (n_out, n_in) or b.shape != (n_out,):
                raise RejectedInputError(f"layer {i} has shapes {W.shape}, {b.shape}; expected {(n_out, n_in)}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> 'MlpModel':
        return MlpModel(layer_dims=list(self.layer_dims), params={k: v.copy() for k, v in self.params.items()},
                        kind=self.kind, mean=None if self.mean is None else self.mean.copy(),
                        scale=None if self.scale is None else self.scale.copy())


def init_model(layer_dims: Sequence[int], seed: int, kind: Optional[FeatureKind] = None) -> MlpModel:
    """Fan-in scaled normal weights (sigma = 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng([seed, 0])
    params = {}
    for i, (n_in, n_out) in enumerate(zip(layer_dims, layer_dims[1:])):
        params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        params[f"b{i}"] = np.zeros(n_out)
    return MlpModel(layer_dims=list(layer_dims), params=params, kind=kind)


def _as_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    batch = x[None, :] if x.ndim == 1 else x
    if batch.ndim != 2 or batch.shape[1] != model.n_inputs:
        raise RejectedInputError(f"input has shape {x.shape}, model expects {model.n_inputs} features")
    if not np.all(np.isfinite(batch)):
        raise RejectedInputError("input contains non-finite values")
    return batch


def _forward_pass(model: MlpModel, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    activations, pre_activations = [batch], []
    a = batch
    for i in range(model.n_layers):
        z = a @ model.params[f"W{i}"].T + model.params[f"b{i}"]
        pre_activations.append(z)
        if i < model.n_layers - 1:
            a = selu(z)
            activations.append(a)
    return activations, pre_activations, softmax(pre_activations[-1], axis=1)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one input (K,) or a batch (N, K)."""
    x = np.asarray(x)
    _, _, probs = _forward_pass(model, _as_batch(model, x))
    return probs[0] if x.ndim == 1 else probs


def loss(probs: np.ndarray, label: Union[int, np.ndarray]) -> float:
    """Cross-entropy -log(probs[label]), summed over a batch.

    Probabilities below 1e-12 are clamped and counted in ``clamped_loss_count``.
    """
    global clamped_loss_count
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        picked = np.array([probs[int(label)]])
    else:
        labels = np.asarray(label, dtype=int)
        picked = probs[np.arange(labels.shape[0]), labels]
    low = picked < LOSS_FLOOR
    if np.any(low):
        clamped_loss_count += int(low.sum())
        logger.warning("Clamped %d cross-entropy terms at probability %g", int(low.sum()), LOSS_FLOOR)
    return float(-np.log(np.maximum(picked, LOSS_FLOOR)).sum())


def backward(model: MlpModel, x: np.ndarray, label: Union[int, np.ndarray]) -> Dict[str, np.ndarray]:
    """Analytic gradients of the summed cross-entropy with respect to every parameter.

    Args:
        model: Network
        x: One input (K,) or a batch (N, K)
        label: Class id or N class ids

    Returns:
        Dict with the same keys and shapes as ``model.params``
    """
    batch = _as_batch(model, x)
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    if labels.shape[0] != batch.shape[0]:
        raise RejectedInputError(f"{labels.shape[0]} labels for {batch.shape[0]} inputs")
    if np.any((labels < 0) | (labels >= model.n_classes)):
        raise RejectedInputError(f"labels must lie in [0, {model.n_classes})")
    activations, pre_activations, probs = _forward_pass(model, batch)

    delta = probs.copy()
    delta[np.arange(labels.shape[0]), labels] -= 1.0
    grads = {}
    for i in reversed(range(model.n_layers)):
        grads[f"W{i}"] = delta.T @ activations[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.params[f"W{i}"]) * selu_derivative(pre_activations[i - 1])
    return grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise RejectedInputError("learning rate must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise RejectedInputError("batch size, epochs and patience must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise RejectedInputError(f"hidden layer sizes must be >= 1, got {self.hidden}")


def standardize(values: np.ndarray, mean: Optional[np.ndarray], scale: Optional[np.ndarray]) -> np.ndarray:
    if mean is None or scale is None:
        return np.asarray(values, dtype=float)
    return (np.asarray(values, dtype=float) - mean) / scale


def split_validation(features: FeatureSet, val_frac: float = 0.1,
                     seed: int = 0) -> Tuple[FeatureSet, Optional[FeatureSet]]:
    """Deterministic holdout of ``val_frac`` of the rows (None when val_frac is 0)."""
    if not 0 <= val_frac < 1:
        raise RejectedInputError(f"validation fraction must lie in [0, 1), got {val_frac}")
    n = len(features)
    n_val = int(round(val_frac * n))
    if val_frac > 0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    if n_val == 0:
        return features, None
    order = np.random.default_rng([seed, 2]).permutation(n)
    return features.subset(np.sort(order[n_val:])), features.subset(np.sort(order[:n_val]))


def _check_kind(model_kind: Optional[FeatureKind], features: FeatureSet) -> None:
    if model_kind is not None and features.kind is not model_kind:
        raise FeatureKindMismatchError(
            f"model was trained on {model_kind.value} features, got {features.kind.value}")


def _epoch_metrics(model: MlpModel, features: FeatureSet) -> Tuple[float, float]:
    probs = forward(model, standardize(features.values, model.mean, model.scale))
    return loss(probs, features.labels) / len(features), float(np.mean(np.argmax(probs, axis=1) == features.labels))


def train(train_set: FeatureSet, val_set: Optional[FeatureSet], config: TrainConfig,
          n_classes: Optional[int] = None) -> Tuple[MlpModel, pd.DataFrame]:
    """Mini-batch SGD with momentum and early stopping on validation loss.

    Args:
        train_set: Training features
        val_set: Validation features for early stopping (None disables it)
        config: Optimizer settings
        n_classes: Output size (default: largest label + 1)

    Returns:
        Tuple of (model with the best validation weights, per-epoch history DataFrame)
    """
    if len(train_set) == 0:
        raise InsufficientDataError("training set is empty")
    if val_set is not None:
        if val_set.K != train_set.K:
            raise RejectedInputError(f"validation features have K = {val_set.K}, training K = {train_set.K}")
        _check_kind(train_set.kind, val_set)
    labels = train_set.labels
    if n_classes is None:
        n_classes = int(labels.max()) + 1
        if val_set is not None and len(val_set):
            n_classes = max(n_classes, int(val_set.labels.max()) + 1)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise RejectedInputError(f"training labels must lie in [0, {n_classes})")

    model = init_model([train_set.K, *config.hidden, n_classes], config.seed, kind=train_set.kind)
    model.mean = train_set.values.mean(axis=0)
    std = train_set.values.std(axis=0)
    model.scale = np.where(std > 0, std, 1.0)
    x = standardize(train_set.values, model.mean, model.scale)

    n = len(train_set)
    batch_size = min(config.batch_size, n)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    best_model, best_val, stale = None, np.inf, 0
    rows = []

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for idx in chunks(order, batch_size):
            grads = backward(model, x[idx], labels[idx])
            for key, grad in grads.items():
                velocity[key] = config.momentum * velocity[key] - config.learning_rate * grad / len(idx)
                model.params[key] += velocity[key]

        train_loss, train_acc = _epoch_metrics(model, train_set)
        row = {'epoch': epoch, 'train_loss': train_loss, 'train_accuracy': train_acc,
               'val_loss': np.nan, 'val_accuracy': np.nan}
        if val_set is not None and len(val_set):
            row['val_loss'], row['val_accuracy'] = _epoch_metrics(model, val_set)
        rows.append(row)
        logger.debug("Epoch %d: train loss %.4f acc %.4f, val loss %.4f", epoch, train_loss, train_acc,
                     row['val_loss'])

        if val_set is None or not len(val_set):
            continue
        if row['val_loss'] < best_val:
            best_model, best_val, stale = model.copy(), row['val_loss'], 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("Early stop at epoch %d, restoring epoch %d weights", epoch, epoch - stale)
                break

    return (best_model or model), pd.DataFrame(rows)


@dataclass
class PredictionResult:
    labels: np.ndarray
    probabilities: np.ndarray = field(repr=False)
    accuracy: Optional[float] = None


def predict(model: MlpModel, features: Union[FeatureSet, np.ndarray]) -> PredictionResult:
    """Argmax class per row (ties toward the smaller index); accuracy when labels are known."""
    if isinstance(features, FeatureSet):
        _check_kind(model.kind, features)
        values, truth = features.values, features.labels
    else:
        values, truth = np.atleast_2d(np.asarray(features, dtype=float)), None
    probs = forward(model, standardize(values, model.mean, model.scale))
    predicted = np.argmax(probs, axis=1)
    accuracy = None
    if truth is not None and len(truth):
        accuracy = float(np.mean(predicted == truth))
    return PredictionResult(labels=predicted, probabilities=probs, accuracy=accuracy)


def knn_predict(train_set: FeatureSet, test_set: Union[FeatureSet, np.ndarray], k: int) -> np.ndarray:
    """Brute-force Euclidean k-nearest-neighbour vote, ties toward the smaller label."""
    if len(train_set) == 0:
        raise InsufficientDataError("KNN training set is empty")
    if not 1 <= k <= len(train_set):
        raise RejectedInputError(f"k must lie in [1, {len(train_set)}], got {k}")
    if isinstance(test_set, FeatureSet):
        if test_set.kind is not train_set.kind:
            raise FeatureKindMismatchError(
                f"KNN train features are {train_set.kind.value}, test features are {test_set.kind.value}")
        queries = test_set.values
    else:
        queries = np.atleast_2d(np.asarray(test_set, dtype=float))
    if queries.shape[1] != train_set.K:
        raise RejectedInputError(f"query features have K = {queries.shape[1]}, training K = {train_set.K}")

    index = NearestNeighbors(n_neighbors=k, algorithm='brute', metric='euclidean').fit(train_set.values)
    _, neighbours = index.kneighbors(queries)
    n_labels = int(train_set.labels.max()) + 1
    votes = [np.bincount(train_set.labels[row], minlength=n_labels) for row in neighbours]
    return np.array([int(np.argmax(v)) for v in votes], dtype=int)


def confusion_counts(true: np.ndarray, predicted: np.ndarray, n_classes: int) -> np.ndarray:
    """n_classes x n_classes counts, rows = true label, columns = predicted label."""
    return confusion_matrix(np.asarray(true, dtype=int), np.asarray(predicted, dtype=int),
                            labels=list(range(n_classes)))


def save_model(model: MlpModel, path: Union[str, Path]) -> Path:
    """Write the model as JSON; floats keep their shortest repr so a reload is exact."""
    document = {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        'layer_dims': list(model.layer_dims),
        'activation': {'name': 'selu', 'lambda': SELU_LAMBDA, 'alpha': SELU_ALPHA},
        'kind': None if model.kind is None else model.kind.value,
        'mean': None if model.mean is None else model.mean.tolist(),
        'scale': None if model.scale is None else model.scale.tolist(),
        'weights': [model.params[f"W{i}"].tolist() for i in range(model.n_layers)],
        'biases': [model.params[f"b{i}"].tolist() for i in range(model.n_layers)],
    }
    with atomic_write(path, 'w') as handle:
        json.dump(document, handle)
    return Path(path)


def load_model(path: Union[str, Path]) -> MlpModel:
    from scene_config import load_local_json

    document = load_local_json(path)
    if document.get('format') != MODEL_FORMAT:
        raise RejectedInputError(f"{path} is not an {MODEL_FORMAT} model file")
    if document.get('version') != MODEL_VERSION:
        raise RejectedInputError(f"unsupported model version {document.get('version')}")
    activation = document.get('activation', {})
    if activation.get('lambda') != SELU_LAMBDA or activation.get('alpha') != SELU_ALPHA:
        raise RejectedInputError("model file uses different SeLU constants")
    params = {}
    for i, (W, b) in enumerate(zip(document['weights'], document['biases'])):
        params[f"W{i}"] = np.array(W, dtype=float)
        params[f"b{i}"] = np.array(b, dtype=float)
    kind = document.get('kind')
    return MlpModel(
        layer_dims=[int(d) for d in document['layer_dims']],
        params=params,
        kind=None if kind is None else FeatureKind.parse(kind),
        mean=None if document.get('mean') is None else np.array(document['mean'], dtype=float),
        scale=None if document.get('scale') is None else np.array(document['scale'], dtype=float),
    )
