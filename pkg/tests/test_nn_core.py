import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from varprune.data_pipeline import WindowedDataset
from varprune.errors import ConfigError, DataError, ShapeError
from varprune.nn_core import (
    AdamState,
    BackwardTrace,
    LayerSpec,
    TrainConfig,
    adam_step,
    backward,
    forward,
    init_model,
    load_model,
    mlp_specs,
    model_from_dict,
    model_to_dict,
    save_model,
    train,
)

from conftest import random_model
from oracles import finite_difference_grads, loop_forward, max_relative_error, smooth_batch


def linear_model(w, b=0.0):
    model = init_model([LayerSpec(len(w), 1, "linear")], 0)
    model.weights[0] = np.array([w], dtype=np.float64)
    model.biases[0] = np.array([b], dtype=np.float64)
    return model


class TestInit:
    def test_single_linear_layer(self):
        model = init_model([LayerSpec(3, 1, "linear")], seed=7)
        np.testing.assert_array_equal(model.biases[0], [0.0])
        np.testing.assert_array_equal(model.masks[0], np.ones((1, 3)))

    def test_two_layer_shootout_width(self):
        model = init_model(mlp_specs(346, [256]), seed=0)
        assert [w.shape for w in model.weights] == [(256, 346), (1, 256)]
        assert model.layers[0].activation == "relu"
        assert model.layers[-1].activation == "linear"

    def test_he_variance_five_layer(self):
        specs = mlp_specs(504, [768, 512, 384, 192])
        assert [(s.input_dim, s.output_dim) for s in specs] == [
            (504, 768), (768, 512), (512, 384), (384, 192), (192, 1)]
        w = init_model(specs, seed=0).weights[0]
        assert w.size >= 100_000
        # sample variance oracle
        var = np.sum((w - w.mean()) ** 2) / (w.size - 1)
        assert abs(var - 2 / 504) / (2 / 504) < 0.10

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            init_model([LayerSpec(3, 4), LayerSpec(5, 1, "linear")], 0)

    def test_output_must_be_scalar_linear(self):
        with pytest.raises(ConfigError):
            init_model([LayerSpec(3, 2, "linear")], 0)
        with pytest.raises(ConfigError):
            init_model([LayerSpec(3, 1, "relu")], 0)

    def test_seeded(self):
        a = init_model(mlp_specs(5, [4]), 3)
        b = init_model(mlp_specs(5, [4]), 3)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)


class TestForward:
    def test_identity_arithmetic(self):
        assert forward(linear_model([1.0, 1.0]), [[2.0, 3.0]]).predictions[0] == 5.0

    def test_masked_weight(self):
        model = linear_model([1.0, 1.0])
        model.masks[0] = np.array([[1.0, 0.0]])
        assert forward(model, [[2.0, 3.0]]).predictions[0] == 2.0

    def test_matches_loop_oracle(self, rng):
        model = random_model(rng, [4, 3])
        x = rng.normal(size=(25, 4))
        np.testing.assert_allclose(forward(model, x).predictions, loop_forward(model, x), rtol=1e-12, atol=0)

    def test_trace_shapes(self, rng):
        model = random_model(rng, [4, 6, 3])
        x = rng.normal(size=(7, 4))
        tr = forward(model, x)
        np.testing.assert_array_equal(tr.activations[0], x)
        assert [a.shape for a in tr.activations] == [(7, 4), (7, 6), (7, 3)]
        assert [z.shape for z in tr.preactivations] == [(7, 6), (7, 3), (7, 1)]

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            forward(random_model(rng, [4, 3]), np.zeros((2, 5)))

    def test_depends_on_w_only_through_mask(self, rng):
        model = random_model(rng, [5, 4])
        model.masks[0][rng.uniform(size=model.masks[0].shape) < 0.5] = 0.0
        other = model.copy()
        other.weights[0] = np.where(model.masks[0] == 0, rng.normal(size=model.weights[0].shape) * 100,
                                    model.weights[0])
        x = rng.normal(size=(10, 5))
        np.testing.assert_array_equal(forward(model, x).predictions, forward(other, x).predictions)

    def test_mask_idempotent(self, rng):
        model = random_model(rng, [5, 4])
        mask = (rng.uniform(size=(4, 5)) < 0.6).astype(float)
        once = model.with_masks([mask, model.masks[1]])
        twice = once.with_masks([mask, model.masks[1]])
        x = rng.normal(size=(10, 5))
        np.testing.assert_array_equal(forward(once, x).predictions, forward(twice, x).predictions)


class TestBackward:
    def test_zero_at_minimum(self, rng):
        model = random_model(rng, [3, 4])
        x = rng.normal(size=(6, 3))
        tr = forward(model, x)
        grads = backward(model, tr, tr.predictions.copy())
        assert grads.loss == 0.0
        for g in grads.grad_weights + grads.grad_biases:
            assert np.all(g == 0.0)

    def test_single_weight(self):
        model = linear_model([1.0])
        grads = backward(model, forward(model, [[1.0]]), [0.0])
        assert grads.grad_weights[0][0, 0] == 2.0

    def test_matches_finite_differences(self, rng):
        model = random_model(rng, [5, 4])
        x = smooth_batch(model, rng, 12)
        y = rng.normal(size=12)
        grads = backward(model, forward(model, x), y)
        fw, fb = finite_difference_grads(model, x, y)
        for a, n in zip(grads.grad_weights + grads.grad_biases, fw + fb):
            assert max_relative_error(a, n) < 1e-4

    def test_sum_reduction_rows_are_per_sample(self, rng):
        model = random_model(rng, [3, 4])
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=5)
        full = backward(model, forward(model, x), y, reduction="sum")
        for n in range(5):
            single = backward(model, forward(model, x[n:n + 1]), y[n:n + 1], reduction="sum")
            for a, b in zip(full.dz, single.dz):
                np.testing.assert_allclose(a[n], b[0], rtol=1e-14, atol=1e-15)

    def test_target_length_mismatch(self, rng):
        model = random_model(rng, [3, 4])
        with pytest.raises(ShapeError):
            backward(model, forward(model, np.zeros((4, 3))), np.zeros(3))


class TestAdam:
    def _grads(self, model, gw, gb=None):
        gb = gb if gb is not None else [np.zeros_like(b) for b in model.biases]
        return BackwardTrace(0.0, [], gw, gb)

    def test_zero_gradient(self, rng):
        model = random_model(rng, [3, 4])
        before = model.copy()
        state = AdamState.zeros_like(model)
        adam_step(model, self._grads(model, [np.zeros_like(w) for w in model.weights]), state, TrainConfig())
        for a, b in zip(model.weights + model.biases, before.weights + before.biases):
            np.testing.assert_array_equal(a, b)
        assert state.step == 1

    def test_first_step_closed_form(self):
        model = linear_model([0.5])
        state = AdamState.zeros_like(model)
        cfg = TrainConfig(learning_rate=1e-3)
        adam_step(model, self._grads(model, [np.array([[1.0]])]), state, cfg)
        # m_hat = v_hat = 1 after bias correction
        expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8)
        assert model.weights[0][0, 0] == pytest.approx(expected, abs=1e-15)
        assert abs(model.weights[0][0, 0] - (0.5 - 1e-3)) < 1e-10

    def test_masked_weight_stays_zero(self):
        model = linear_model([0.7, 0.3])
        model.masks[0] = np.array([[0.0, 1.0]])
        model.weights[0] = model.weights[0] * model.masks[0]
        state = AdamState.zeros_like(model)
        for _ in range(5):
            adam_step(model, self._grads(model, [np.array([[3.0, -1.0]])]), state, TrainConfig())
        assert model.weights[0][0, 0] == 0.0
        assert model.weights[0][0, 1] != 0.3


class TestTrain:
    def _linear_data(self, rng, n=1000):
        x = rng.uniform(0, 1, (n, 1))
        return WindowedDataset(x, 2 * x[:, 0], np.full(n, "p"), ["x"])

    def test_fits_linear_target(self, rng):
        data = self._linear_data(rng)
        model = init_model(mlp_specs(1, []), seed=1)
        trained, history = train(model, data, TrainConfig(epochs=100, batch_size=10, seed=1))
        assert len(history) == 100
        pred = forward(trained, data.features).predictions
        assert np.mean((pred - data.targets) ** 2) < 1e-4

    def test_deterministic(self, rng):
        data = self._linear_data(rng, 300)
        model = init_model(mlp_specs(1, [8]), seed=2)
        cfg = TrainConfig(epochs=5, batch_size=32, seed=4)
        a, ha = train(model, data, cfg)
        b, hb = train(model, data, cfg)
        assert ha == hb
        for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
            assert wa.tobytes() == wb.tobytes()

    def test_epochs_zero_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)

    def test_empty_dataset(self):
        data = WindowedDataset(np.empty((0, 1)), np.empty(0), np.empty(0, dtype=str), ["x"])
        with pytest.raises(DataError):
            train(init_model(mlp_specs(1, []), 0), data, TrainConfig(epochs=1))

    def test_pruned_weights_not_resurrected(self, rng):
        data = self._linear_data(rng, 200)
        model = init_model(mlp_specs(1, [6]), seed=3)
        model.masks[0][:3] = 0.0
        model = model.with_masks(model.masks)
        trained, _ = train(model, data, TrainConfig(epochs=3, batch_size=16))
        assert np.all(trained.weights[0][:3] == 0.0)

    def test_unmasked_equals_reference(self, rng):
        """All-ones masks reproduce a plain numpy MLP forward."""
        model = random_model(rng, [4, 5, 3])
        x = rng.normal(size=(9, 4))
        a = x
        for l, (w, b) in enumerate(zip(model.weights, model.biases)):
            a = a @ w.T + b
            if l < model.n_layers - 1:
                a = np.maximum(a, 0)
        np.testing.assert_array_equal(forward(model, x).predictions, a[:, 0])


class TestCheckpoint:
    def test_round_trip_exact(self, rng, tmp_path):
        model = random_model(rng, [6, 5, 4])
        model.masks[1][0, 0] = 0.0
        path = tmp_path / "m.json"
        save_model(model, path)
        back = load_model(path)
        assert back.layers == model.layers
        for a, b in zip(model.weights + model.biases + model.masks, back.weights + back.biases + back.masks):
            assert a.tobytes() == b.tobytes()

    def test_rejects_non_binary_mask(self, rng):
        doc = model_to_dict(random_model(rng, [2, 2]))
        doc["masks"][0][0][0] = 0.5
        with pytest.raises(DataError):
            model_from_dict(json.loads(json.dumps(doc)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), widths=st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_gradient_property(seed, widths):
    rng = np.random.default_rng(seed)
    model = random_model(rng, widths)
    x = smooth_batch(model, rng, 6)
    y = rng.normal(size=6)
    grads = backward(model, forward(model, x), y)
    fw, fb = finite_difference_grads(model, x, y)
    for a, n in zip(grads.grad_weights + grads.grad_biases, fw + fb):
        assert max_relative_error(a, n) < 1e-4
