import numpy as np
import pytest

import driftadapt as da
from driftadapt import (AdaptableMask, ConfigError, LinearPredictor, MlpPredictor,
                        RecurrentPredictor, UnsupportedModelError, fd_jacobian,
                        flatten_params)
from driftadapt.models import load_model, save_model
from driftadapt.params import ParameterVector
from scipy.special import expit


def _rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), 1e-12)


def _set_block(params, name, array):
    values = params.values.copy()
    values[params.block_slice(name)] = np.asarray(array, dtype=float).ravel()
    return params.with_values(values)


class TestFlatten:
    def test_linear_layout_size(self):
        model = LinearPredictor(d_in=3, d_out=1)
        assert flatten_params(model).size == 4  # weight length 3 plus bias

    def test_roundtrip_identity(self, model_zoo):
        from driftadapt.params import flatten
        for model in model_zoo:
            pv = flatten_params(model)
            arrays = model.views(pv)
            np.testing.assert_array_equal(flatten(arrays, pv.layout), pv.values)

    def test_same_seed_same_params(self):
        a = RecurrentPredictor(window=4, d_in=2, d_out=2, hidden=5, seed=42).init_params()
        b = RecurrentPredictor(window=4, d_in=2, d_out=2, hidden=5, seed=42).init_params()
        np.testing.assert_array_equal(a.values, b.values)
        c = RecurrentPredictor(window=4, d_in=2, d_out=2, hidden=5, seed=43).init_params()
        assert not np.array_equal(a.values, c.values)


class TestPredictOneStep:
    def test_identity_weights(self):
        model = LinearPredictor(d_in=2, d_out=2, window=3)
        params = _set_block(model.init_params(), "weight", np.eye(2))
        params = _set_block(params, "bias", [0.0, 0.0])
        window = np.array([[1.0, 2.0], [9.0, 9.0], [9.0, 9.0]])
        np.testing.assert_array_equal(model.predict_one_step(params, window), [1.0, 2.0])

    def test_zero_params_zero_output(self, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params().with_values(np.zeros(model.num_params))
            window = rng.normal(size=(model.window, model.d_in))
            np.testing.assert_array_equal(model.predict_one_step(params, window),
                                          np.zeros(model.d_out))

    def test_recurrent_matches_straight_line_reimplementation(self, rng):
        """Independent per-gate loop must agree with the fused kernels."""
        model = RecurrentPredictor(window=5, d_in=3, d_out=2, hidden=4, classes=0, seed=9)
        params = model.init_params()
        window = rng.normal(size=(5, 3))
        v = model.views(params)
        h = np.zeros(4)
        for idx in range(4, -1, -1):
            x = window[idx]
            r = expit(v["encoder.reset_in"] @ x + v["encoder.reset_rec"] @ h
                      + v["encoder.reset_bias"])
            z = expit(v["encoder.update_in"] @ x + v["encoder.update_rec"] @ h
                      + v["encoder.update_bias"])
            c = np.tanh(v["encoder.cand_in"] @ x + r * (v["encoder.cand_rec"] @ h)
                        + v["encoder.cand_bias"])
            h = (1 - z) * c + z * h
        expected = v["decoder.weight"] @ h + v["decoder.bias"]
        np.testing.assert_allclose(model.predict_one_step(params, window), expected,
                                   rtol=1e-12, atol=1e-14)

    def test_deterministic(self, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params()
            window = rng.normal(size=(model.window, model.d_in))
            a = model.predict_one_step(params, window)
            b = model.predict_one_step(params, window)
            np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self):
        model = LinearPredictor(d_in=2, d_out=2, window=3)
        params = model.init_params()
        with pytest.raises(ConfigError):
            model.predict_one_step(params, np.zeros((3, 5)))
        other = MlpPredictor(window=3, d_in=2, d_out=2, hidden=4).init_params()
        with pytest.raises(ConfigError):
            model.predict_one_step(other, np.zeros((3, 2)))


class TestRollout:
    def test_horizon_one_equals_one_step(self, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params()
            window = rng.normal(size=(model.window, model.d_in))
            np.testing.assert_array_equal(model.rollout(params, window, 1)[0],
                                          model.predict_one_step(params, window))

    def test_fixed_point(self):
        model = LinearPredictor(d_in=1, d_out=1, window=2)
        params = _set_block(model.init_params(), "weight", [[1.0]])
        params = _set_block(params, "bias", [0.0])
        window = np.array([[3.0], [3.0]])
        np.testing.assert_array_equal(model.rollout(params, window, 5),
                                      np.full((5, 1), 3.0))

    def test_doubling(self):
        model = LinearPredictor(d_in=1, d_out=1, window=1)
        params = _set_block(model.init_params(), "weight", [[2.0]])
        params = _set_block(params, "bias", [0.0])
        np.testing.assert_array_equal(model.rollout(params, np.array([[1.0]]), 3),
                                      [[2.0], [4.0], [8.0]])

    def test_held_exogenous_features(self, rng):
        """Coordinates beyond d_out stay at their last observed value."""
        model = LinearPredictor(d_in=3, d_out=1, window=2)
        params = _set_block(model.init_params(), "weight", [[1.0, 1.0, 1.0]])
        params = _set_block(params, "bias", [0.0])
        window = np.array([[5.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        out = model.rollout(params, window, 2)
        assert out[0, 0] == 10.0           # 5 + 2 + 3
        assert out[1, 0] == 15.0           # fed back 10 plus held 2 + 3

    def test_bad_horizon(self, model_zoo):
        model = model_zoo[0]
        params = model.init_params()
        with pytest.raises(ConfigError):
            model.rollout(params, np.zeros((model.window, model.d_in)), 0)


class TestJacobian:
    def test_linear_jacobian_is_regressor(self, rng):
        model = LinearPredictor(d_in=3, d_out=1, window=2)
        params = model.init_params()
        window = rng.normal(size=(2, 3))
        mask = AdaptableMask.all_of(params)
        jac = model.jacobian(params, window, mask)
        np.testing.assert_allclose(jac[0, :3], window[0], rtol=1e-14)
        np.testing.assert_allclose(jac[0, 3], 1.0, rtol=1e-14)

    def test_mask_projection_single_column(self, rng):
        model = MlpPredictor(window=3, d_in=2, d_out=2, hidden=5, seed=4)
        params = model.init_params()
        window = rng.normal(size=(3, 2))
        full = model.jacobian(params, window, AdaptableMask.all_of(params))
        one = model.jacobian(params, window, AdaptableMask(np.array([7]), params.size))
        np.testing.assert_array_equal(one, full[:, [7]])

    def test_matches_finite_differences(self, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params()
            mask = AdaptableMask.all_of(params)
            for _ in range(10):
                window = rng.normal(size=(model.window, model.d_in))
                values = params.values + 0.1 * rng.normal(size=params.size)
                point = params.with_values(values)
                jac = model.jacobian(point, window, mask)
                ref = fd_jacobian(model, point, window, mask, h=1e-5)
                assert _rel_err(jac, ref) < 1e-4

    def test_fused_call_consistent(self, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params()
            mask = AdaptableMask.all_of(params)
            window = rng.normal(size=(model.window, model.d_in))
            y, jac = model.one_step_with_jacobian(params, window, mask)
            np.testing.assert_allclose(y, model.predict_one_step(params, window),
                                       rtol=1e-12, atol=1e-14)
            np.testing.assert_array_equal(jac, model.jacobian(params, window, mask))


class _QuadraticScalar:
    """Stub with one parameter and the map y = theta^2 (mask oracle target)."""

    d_out = 1

    def predict_one_step(self, params, window):
        return np.array([params.values[0] ** 2])


class TestFdJacobian:
    def test_exact_for_linear(self, rng):
        model = LinearPredictor(d_in=2, d_out=2, window=1)
        params = model.init_params()
        window = rng.normal(size=(1, 2))
        mask = AdaptableMask.all_of(params)
        jac = model.jacobian(params, window, mask)
        ref = fd_jacobian(model, params, window, mask, h=1e-4)
        np.testing.assert_allclose(jac, ref, atol=1e-9)

    def test_second_order_convergence(self, rng):
        model = MlpPredictor(window=2, d_in=2, d_out=1, hidden=4, seed=5)
        params = model.init_params()
        params = params.with_values(params.values * 2.0)
        window = rng.normal(size=(2, 2))
        mask = AdaptableMask.all_of(params)
        exact = model.jacobian(params, window, mask)
        err_big = np.abs(fd_jacobian(model, params, window, mask, h=2e-3) - exact).max()
        err_small = np.abs(fd_jacobian(model, params, window, mask, h=1e-3) - exact).max()
        assert 2.5 < err_big / err_small < 6.0

    def test_quadratic_hand_value(self):
        stub = _QuadraticScalar()
        params = ParameterVector(np.array([3.0]), (("theta", 0, 1),))
        mask = AdaptableMask.all_of(params)
        jac = fd_jacobian(stub, params, np.zeros((1, 1)), mask, h=1e-4)
        assert abs(jac[0, 0] - 6.0) < 1e-6

    def test_rejects_bad_step(self, model_zoo):
        model = model_zoo[0]
        params = model.init_params()
        with pytest.raises(ConfigError):
            fd_jacobian(model, params, np.zeros((model.window, model.d_in)),
                        AdaptableMask.all_of(params), h=0.0)


class TestClassifier:
    def _model(self):
        return RecurrentPredictor(window=4, d_in=2, d_out=2, hidden=5, classes=3, seed=2)

    def test_zero_logits_uniform(self):
        model = self._model()
        params = model.init_params()
        for name in ("classifier.hidden_weight", "classifier.hidden_bias",
                     "classifier.out_weight", "classifier.out_bias"):
            params = _set_block(params, name, np.zeros(params.block(name).shape))
        probs = model.classify_intent(params, np.ones((4, 2)))
        np.testing.assert_allclose(probs, np.ones(3) / 3, atol=1e-15)

    def test_dominant_logit(self):
        model = self._model()
        params = model.init_params()
        params = _set_block(params, "classifier.out_weight", np.zeros((3, 5)))
        params = _set_block(params, "classifier.out_bias", [50.0, 0.0, 0.0])
        probs = model.classify_intent(params, np.ones((4, 2)))
        assert probs[0] > 0.999

    def test_normalized_on_random_inputs(self, rng):
        model = self._model()
        params = model.init_params()
        for _ in range(25):
            probs = model.classify_intent(params, rng.normal(size=(4, 2)))
            assert abs(probs.sum() - 1.0) < 1e-9
            assert np.all(probs >= 0)

    def test_headless_models_raise(self, rng):
        window = rng.normal(size=(4, 2))
        for model in (LinearPredictor(d_in=2, d_out=2, window=4),
                      MlpPredictor(window=4, d_in=2, d_out=2, hidden=4),
                      RecurrentPredictor(window=4, d_in=2, d_out=2, hidden=4, classes=0)):
            with pytest.raises(UnsupportedModelError):
                model.classify_intent(model.init_params(), window)


class TestSerialization:
    def test_roundtrip(self, tmp_path, model_zoo, rng):
        for model in model_zoo:
            params = model.init_params().with_values(
                model.init_params().values + rng.normal(size=model.num_params))
            path = tmp_path / f"{model.kind}.json"
            save_model(model, params, path)
            loaded, loaded_params = load_model(path)
            assert loaded.to_config() == model.to_config()
            np.testing.assert_array_equal(loaded_params.values, params.values)
            window = rng.normal(size=(model.window, model.d_in))
            np.testing.assert_array_equal(loaded.predict_one_step(loaded_params, window),
                                          model.predict_one_step(params, window))

    def test_layout_mismatch_rejected(self, tmp_path):
        model = MlpPredictor(window=2, d_in=2, d_out=1, hidden=3, seed=0)
        path = tmp_path / "m.json"
        save_model(model, model.init_params(), path)
        import json
        doc = json.loads(path.read_text())
        doc["hidden"] = 4
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            load_model(path)
