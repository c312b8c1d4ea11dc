"""Tests for the MLP classifier and the KNN baseline."""

import math

import numpy as np
import pytest

import classifier
from classifier import (MlpModel, TrainConfig, backward, confusion_counts, forward, init_model, knn_predict,
                        load_model, loss, predict, save_model, selu, selu_derivative, split_validation, train)
from errors import FeatureKindMismatchError, InsufficientDataError, RejectedInputError
from evs import FeatureKind, FeatureSet


def _toy_set(n_per_class=100, seed=0, kind='evs-amp'):
    """Two classes at -1 / +1 on feature 0, noise elsewhere."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    values = 0.3 * rng.standard_normal((2 * n_per_class, 4))
    values[:, 0] = np.where(labels == 0, -1.0, 1.0)
    return FeatureSet(kind=kind, labels=labels, values=values)


def _zero_model(dims):
    model = init_model(dims, seed=0)
    for value in model.params.values():
        value[...] = 0.0
    return model


class TestActivations:

    def test_selu_values(self):
        assert selu(np.array(0.0)) == 0.0
        assert selu(np.array(1.0)) == pytest.approx(classifier.SELU_LAMBDA)
        assert selu(np.array(-50.0)) == pytest.approx(-classifier.SELU_LAMBDA * classifier.SELU_ALPHA)

    def test_selu_derivative(self):
        np.testing.assert_allclose(selu_derivative(np.array([2.0, -1.0])),
                                   [classifier.SELU_LAMBDA,
                                    classifier.SELU_LAMBDA * classifier.SELU_ALPHA * math.exp(-1.0)])


class TestForward:

    def test_probabilities_sum_to_one(self):
        model = init_model([52, 128, 64, 26], seed=3)
        x = np.random.default_rng(0).standard_normal((10, 52)) * 5
        probs = forward(model, x)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((probs > 0) & (probs < 1))

    def test_zero_model_is_uniform(self):
        probs = forward(_zero_model([52, 16, 26]), np.ones(52))
        np.testing.assert_allclose(probs, 1 / 26, atol=1e-15)

    def test_logit_shift_invariance(self):
        model = init_model([5, 4, 3], seed=1)
        x = np.random.default_rng(1).standard_normal(5)
        shifted = model.copy()
        shifted.params['b1'] = shifted.params['b1'] + 7.5
        np.testing.assert_allclose(forward(shifted, x), forward(model, x), atol=1e-9)

    def test_rejects_non_finite(self):
        with pytest.raises(RejectedInputError, match="non-finite"):
            forward(init_model([3, 2], seed=0), np.array([1.0, np.nan, 0.0]))

    def test_rejects_wrong_width(self):
        with pytest.raises(RejectedInputError, match="expects 3 features"):
            forward(init_model([3, 2], seed=0), np.ones(4))


class TestLoss:

    def test_values(self):
        assert loss(np.array([0.0, 1.0]), 1) == 0.0
        assert loss(np.full(26, 1 / 26), 3) == pytest.approx(math.log(26))
        assert loss(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2))

    def test_clamped_probability_is_counted(self):
        before = classifier.clamped_loss_count
        assert loss(np.array([1.0, 0.0]), 1) == pytest.approx(-math.log(1e-12))
        assert classifier.clamped_loss_count == before + 1


class TestBackward:

    @staticmethod
    def _numeric(model, x, labels, key, index, step=1e-5):
        original = model.params[key][index]
        model.params[key][index] = original + step
        plus = loss(forward(model, x), labels)
        model.params[key][index] = original - step
        minus = loss(forward(model, x), labels)
        model.params[key][index] = original
        return (plus - minus) / (2 * step)

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        checked, passed = 0, 0
        for trial in range(10):
            model = init_model([6, 5, 4, 3], seed=trial)
            for value in model.params.values():
                value += 0.1 * rng.standard_normal(value.shape)
            x = rng.standard_normal((4, 6))
            labels = rng.integers(0, 3, size=4)
            grads = backward(model, x, labels)
            keys = sorted(model.params)
            for _ in range(100):
                key = keys[rng.integers(len(keys))]
                index = tuple(rng.integers(0, d) for d in model.params[key].shape)
                numeric = self._numeric(model, x, labels, key, index)
                analytic = grads[key][index]
                checked += 1
                scale = max(abs(numeric), abs(analytic))
                if abs(numeric - analytic) < 1e-9 or abs(numeric - analytic) / scale < 1e-4:
                    passed += 1
        assert passed >= 0.99 * checked

    def test_duplicate_sample_doubles_gradient(self):
        model = init_model([4, 3, 2], seed=2)
        x = np.array([0.5, -1.0, 2.0, 0.1])
        single = backward(model, x, 1)
        double = backward(model, np.vstack([x, x]), [1, 1])
        for key in single:
            np.testing.assert_allclose(double[key], 2 * single[key], atol=1e-12)

    def test_zero_input_zero_first_layer_gradient(self):
        model = init_model([4, 3, 2], seed=2)
        np.testing.assert_array_equal(backward(model, np.zeros(4), 0)['W0'], 0.0)

    def test_shapes(self):
        model = init_model([4, 3, 2], seed=0)
        grads = backward(model, np.ones((5, 4)), np.zeros(5, dtype=int))
        assert {k: v.shape for k, v in grads.items()} == {k: v.shape for k, v in model.params.items()}


class TestTrain:

    def test_separable_toy_set(self):
        data = _toy_set()
        config = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=20, hidden=(8, 8), seed=1)
        model, history = train(data, None, config)
        assert predict(model, data).accuracy == 1.0
        assert len(history) == 20

    def test_loss_mostly_decreasing(self):
        config = TrainConfig(learning_rate=0.05, momentum=0.0, batch_size=256, max_epochs=40, hidden=(8,), seed=2)
        _, history = train(_toy_set(seed=2), None, config)
        upticks = int((np.diff(history['train_loss'].to_numpy()) > 0).sum())
        assert upticks <= 2

    def test_deterministic(self):
        config = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=5, hidden=(8,), seed=3)
        a, _ = train(_toy_set(), None, config)
        b, _ = train(_toy_set(), None, config)
        for key in a.params:
            np.testing.assert_array_equal(a.params[key], b.params[key])

    def test_zero_learning_rate_keeps_weights(self):
        config = TrainConfig(learning_rate=0.0, max_epochs=3, hidden=(8,), seed=4)
        model, _ = train(_toy_set(), None, config)
        initial = init_model([4, 8, 2], seed=4)
        for key in initial.params:
            np.testing.assert_array_equal(model.params[key], initial.params[key])

    def test_early_stopping_restores_best(self):
        fit, val = split_validation(_toy_set(n_per_class=60, seed=5), 0.2, seed=0)
        config = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=100, patience=3, hidden=(8,), seed=0)
        model, history = train(fit, val, config)
        best = history['val_loss'].min()
        assert forward_loss(model, val) == pytest.approx(best, rel=1e-12)

    def test_zero_hidden_layers(self):
        config = TrainConfig(learning_rate=0.1, batch_size=16, max_epochs=30, hidden=(), seed=0)
        model, _ = train(_toy_set(), None, config)
        assert model.layer_dims == [4, 2]
        assert predict(model, _toy_set()).accuracy == 1.0

    def test_empty_dataset(self):
        empty = FeatureSet(kind='csi-amp', labels=np.zeros(0, dtype=int), values=np.zeros((0, 4)))
        with pytest.raises(InsufficientDataError, match="empty"):
            train(empty, None, TrainConfig())

    def test_dimension_mismatch(self):
        other = FeatureSet(kind='evs-amp', labels=[0], values=np.zeros((1, 3)))
        with pytest.raises(RejectedInputError, match="K = 3"):
            train(_toy_set(), other, TrainConfig())


def forward_loss(model, features):
    probs = forward(model, classifier.standardize(features.values, model.mean, model.scale))
    return loss(probs, features.labels) / len(features)


class TestPredict:

    def test_kind_mismatch(self):
        config = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=2, hidden=(4,))
        model, _ = train(_toy_set(kind='evs-phase'), None, config)
        with pytest.raises(FeatureKindMismatchError, match="evs-phase"):
            predict(model, _toy_set(kind='csi-phase'))

    def test_uniform_model_predicts_class_zero(self):
        result = predict(_zero_model([4, 3, 5]), np.random.default_rng(0).standard_normal((7, 4)))
        np.testing.assert_array_equal(result.labels, 0)
        assert result.accuracy is None

    def test_random_guessing_accuracy(self):
        rng = np.random.default_rng(9)
        labels = np.repeat(np.arange(26), 40)
        features = FeatureSet(kind='evs-amp', labels=labels, values=rng.standard_normal((labels.size, 52)))
        model = init_model([52, 16, 26], seed=9)
        accuracy = predict(model, features).accuracy
        sigma = math.sqrt((1 / 26) * (25 / 26) / labels.size)
        # random weights are not a uniform guesser per class, so allow a wide band
        assert abs(accuracy - 1 / 26) <= 3 * sigma + 0.03


class TestKnn:

    def test_exact_match(self):
        train_set = _toy_set()
        predicted = knn_predict(train_set, train_set.values[[5, 150]], k=1)
        np.testing.assert_array_equal(predicted, train_set.labels[[5, 150]])

    def test_global_majority_tie(self):
        train_set = _toy_set(n_per_class=10)
        predicted = knn_predict(train_set, np.zeros((3, 4)), k=len(train_set))
        np.testing.assert_array_equal(predicted, 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 5, size=300)
        train_set = FeatureSet(kind='csi-amp', labels=labels, values=rng.standard_normal((300, 6)))
        queries = rng.standard_normal((100, 6))
        predicted = knn_predict(train_set, queries, k=7)
        for query, label in zip(queries, predicted):
            nearest = np.argsort(np.linalg.norm(train_set.values - query, axis=1), kind='stable')[:7]
            votes = np.bincount(labels[nearest], minlength=5)
            assert label == int(np.argmax(votes))

    def test_rejects_bad_k(self):
        with pytest.raises(RejectedInputError, match="k must lie"):
            knn_predict(_toy_set(n_per_class=2), np.zeros((1, 4)), k=5)

    def test_kind_mismatch(self):
        with pytest.raises(FeatureKindMismatchError):
            knn_predict(_toy_set(kind='evs-amp'), _toy_set(kind='csi-amp'), k=1)


class TestPersistenceAndHelpers:

    def test_save_load_preserves_predictions(self, tmp_path):
        config = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=3, hidden=(6, 5))
        model, _ = train(_toy_set(), None, config)
        path = save_model(model, tmp_path / 'model.json')
        loaded = load_model(path)
        assert loaded.kind is FeatureKind.EVS_AMP
        assert loaded.layer_dims == model.layer_dims
        data = _toy_set(seed=8)
        np.testing.assert_array_equal(predict(loaded, data).probabilities, predict(model, data).probabilities)

    def test_load_rejects_other_json(self, tmp_path):
        path = tmp_path / 'other.json'
        path.write_text('{"format": "something"}')
        with pytest.raises(RejectedInputError, match="not an evs-mlp model"):
            load_model(path)

    def test_split_validation(self):
        data = _toy_set(n_per_class=50)
        fit, val = split_validation(data, 0.1, seed=3)
        assert len(fit) == 90 and len(val) == 10
        again_fit, _ = split_validation(data, 0.1, seed=3)
        np.testing.assert_array_equal(fit.values, again_fit.values)
        assert split_validation(data, 0.0)[1] is None

    def test_confusion_counts(self):
        counts = confusion_counts([0, 1, 1, 2], [0, 2, 1, 2], 4)
        assert counts.shape == (4, 4)
        assert counts[1, 2] == 1 and counts[2, 2] == 1 and counts.sum() == 4

    def test_model_rejects_bad_shapes(self):
        with pytest.raises(RejectedInputError, match="layer 0"):
            MlpModel(layer_dims=[3, 2], params={'W0': np.zeros((3, 2)), 'b0': np.zeros(2)})
