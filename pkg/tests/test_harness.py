import copy

import numpy as np
import pytest

from driftadapt import (ConfigError, FixedEpochCriterion, KalmanHyper,
                        LinearPredictor, NumericsError, RecurrentPredictor,
                        UnsupportedModelError, accuracy, collect_validation_errors,
                        default_config, drift_linear_config, gen_drifting_series,
                        make_adapter, mse, mse_squared, offline_train,
                        run_matrix, run_online_adaptation, split, windowize)
from driftadapt.adapters import FrozenAdapter, MekfAdapter
from driftadapt.harness import (PredictionLog, StepRecord, enumerate_cells,
                                format_table, prepare_run, run_seed_cells)


def _tiny_config():
    cfg = default_config()
    cfg["dataset"].update({"trials": 5, "length": 60, "seed": 11})
    cfg["model"].update({"kind": "linear", "window": 3, "horizon": 2})
    cfg["train"].update({"epochs": 3, "batch": 64})
    cfg["run"].update({"seeds": [0, 1], "split": [0.6, 0.2, 0.2]})
    cfg["bench"]["adapters"] = ["none", "mekf"]
    return cfg


def _stream(trials=2, length=50, seed=3, n=3, m=2):
    trajectories = gen_drifting_series(drift_linear_config(
        trials=trials, length=length, seed=seed))
    return [s for traj in trajectories for s in windowize(traj, n, m)]


def _linear_setup(seed=0):
    model = LinearPredictor(d_in=2, d_out=2, window=3, seed=seed)
    return model, model.init_params()


class TestRunOnlineAdaptation:
    def test_frozen_adapter_matches_frozen_model(self):
        model, params = _linear_setup()
        stream = _stream()
        log = run_online_adaptation(model, params, stream, FrozenAdapter())
        assert len(log) == len(stream)
        for record, sample in zip(log.records, stream):
            expected = model.rollout(params, sample.x, sample.y.shape[0])
            np.testing.assert_array_equal(record.prediction, expected)

    def test_first_step_of_each_trial_skips_adaptation(self):
        model, params = _linear_setup()
        stream = _stream(trials=3)
        log = run_online_adaptation(model, params, stream, MekfAdapter())
        starts = {r.trial for r in log.records}
        seen = set()
        for record in log.records:
            if record.trial not in seen:
                seen.add(record.trial)
                assert record.kappa == 0 and np.isnan(record.error_norm)
                assert record.observed is None
            else:
                assert record.kappa == 1 and not np.isnan(record.error_norm)
        assert seen == starts

    def test_error_norm_recomputable_from_stored_vectors(self):
        model, params = _linear_setup()
        log = run_online_adaptation(model, params, _stream(), MekfAdapter())
        checked = 0
        for record in log.records:
            if record.observed is None:
                continue
            np.testing.assert_allclose(
                record.error_norm,
                np.linalg.norm(record.observed - record.one_step_pred), rtol=1e-12)
            checked += 1
        assert checked > 0

    def test_adapt_then_predict_ordering(self):
        """The logged prediction must come from the post-update parameters."""
        model, params = _linear_setup()
        stream = _stream(trials=1)

        class Stamper(FrozenAdapter):
            def adapt(self, state, model, window, observed):
                values = state.params.values.copy()
                values[:] = 0.0
                return type(state)(params=state.params.with_values(values),
                                   mask=state.mask)

        log = run_online_adaptation(model, params, stream, Stamper())
        for record in log.records[1:]:
            np.testing.assert_array_equal(record.prediction,
                                          np.zeros_like(record.prediction))

    def test_adaptation_state_resets_per_trial_by_default(self):
        model, params = _linear_setup()
        stream = _stream(trials=2)
        trials = list(dict.fromkeys(s.trial for s in stream))
        full = run_online_adaptation(model, params, stream, MekfAdapter())
        solo = run_online_adaptation(
            model, params, [s for s in stream if s.trial == trials[1]], MekfAdapter())
        tail = [r for r in full.records if r.trial == trials[1]]
        for a, b in zip(tail, solo.records):
            np.testing.assert_array_equal(a.prediction, b.prediction)

    def test_carry_state_changes_second_trial(self):
        model, params = _linear_setup()
        stream = _stream(trials=2)
        reset = run_online_adaptation(model, params, stream, MekfAdapter())
        carried = run_online_adaptation(model, params, stream, MekfAdapter(),
                                        carry_state=True)
        trials = list(dict.fromkeys(s.trial for s in stream))
        second_reset = [r for r in reset.records if r.trial == trials[1]]
        second_carried = [r for r in carried.records if r.trial == trials[1]]
        assert any(not np.array_equal(a.prediction, b.prediction)
                   for a, b in zip(second_reset, second_carried))

    def test_numerics_failure_reports_step(self):
        model, params = _linear_setup()

        class Exploder(FrozenAdapter):
            def adapt(self, state, model, window, observed):
                raise NumericsError("boom", lam=0.9)

        with pytest.raises(NumericsError, match="step"):
            run_online_adaptation(model, params, _stream(trials=1), Exploder())

    def test_dme_criterion_drives_kappa(self):
        model, params = _linear_setup()
        log = run_online_adaptation(model, params, _stream(trials=1), MekfAdapter(),
                                    criterion=FixedEpochCriterion(2))
        assert set(log.kappas()[1:]) == {2}


class TestMetrics:
    def _log_with(self, target, prediction):
        log = PredictionLog()
        log.append(StepRecord(trial="t", t=0, target=np.asarray(target, float),
                              prediction=np.asarray(prediction, float),
                              observed=None, one_step_pred=None,
                              error_norm=float("nan"), kappa=0))
        return log

    def test_perfect_prediction_zero(self):
        log = self._log_with(np.ones((4, 1)), np.ones((4, 1)))
        assert mse(log) == 0.0

    def test_hand_value(self):
        """Horizon 4, unit residual everywhere: norm 2 over m=4 gives 0.5."""
        log = self._log_with(np.ones((4, 1)), np.zeros((4, 1)))
        assert abs(mse(log) - 0.5) < 1e-12
        assert abs(mse_squared(log) - 1.0) < 1e-12

    def test_homogeneity(self):
        a = self._log_with(np.ones((3, 2)), np.zeros((3, 2)))
        b = self._log_with(2 * np.ones((3, 2)), np.zeros((3, 2)))
        assert abs(mse(b) - 2 * mse(a)) < 1e-12

    def test_accuracy_all_correct(self):
        log = PredictionLog()
        for label in (0, 1, 2):
            probs = np.full(3, 0.1)
            probs[label] = 0.8
            log.append(StepRecord(trial="t", t=label, target=np.zeros((1, 1)),
                                  prediction=np.zeros((1, 1)), observed=None,
                                  one_step_pred=None, error_norm=0.0, kappa=1,
                                  intent_label=label, intent_probs=probs))
        assert accuracy(log) == 1.0

    def test_accuracy_uniform_predictor_hits_base_rate(self, rng):
        log = PredictionLog()
        labels = rng.integers(0, 3, 3000)
        for i, label in enumerate(labels):
            log.append(StepRecord(trial="t", t=i, target=np.zeros((1, 1)),
                                  prediction=np.zeros((1, 1)), observed=None,
                                  one_step_pred=None, error_norm=0.0, kappa=1,
                                  intent_label=int(label),
                                  intent_probs=np.ones(3) / 3))
        assert abs(accuracy(log) - np.mean(labels == 0)) < 1e-12
        assert abs(accuracy(log) - 1 / 3) < 0.05

    def test_accuracy_scale_invariant(self):
        log = PredictionLog()
        for scale in (1.0, 7.5):
            log.records.clear()
            log.append(StepRecord(trial="t", t=0, target=np.zeros((1, 1)),
                                  prediction=np.zeros((1, 1)), observed=None,
                                  one_step_pred=None, error_norm=0.0, kappa=1,
                                  intent_label=2,
                                  intent_probs=scale * np.array([0.1, 0.2, 0.7])))
            assert accuracy(log) == 1.0

    def test_accuracy_requires_labels(self):
        log = self._log_with(np.ones((2, 1)), np.ones((2, 1)))
        with pytest.raises(UnsupportedModelError):
            accuracy(log)

    def test_empty_log_rejected(self):
        with pytest.raises(ConfigError):
            mse(PredictionLog())


class TestOfflineTrain:
    def test_linear_model_recovers_generating_map(self):
        """Noise-free data from one identifiable linear system: training must
        land on the generating weights, which equal the lstsq solution."""
        from driftadapt import DriftConfig, Regime
        coeff = np.array([[0.6, 0.2], [-0.1, 0.8]])
        offset = np.array([0.1, -0.05])
        cfg = DriftConfig(regimes=(Regime(coeff, offset),), length=40, trials=6,
                          noise_std=0.0, seed=21, x0_std=1.0)
        trajectories = gen_drifting_series(cfg)
        samples = [s for t in trajectories for s in windowize(t, 1, 1)]
        model = LinearPredictor(d_in=2, d_out=2, window=1, seed=1)
        params, trace = offline_train(model, samples, epochs=2000, batch=256,
                                      lr=0.01, seed=0)
        views = model.views(params)
        np.testing.assert_allclose(views["weight"], coeff, atol=1e-3)
        np.testing.assert_allclose(views["bias"], offset, atol=1e-3)
        inputs = np.hstack([np.stack([s.x[0] for s in samples]),
                            np.ones((len(samples), 1))])
        targets = np.stack([s.y[0] for s in samples])
        batch_fit = np.linalg.lstsq(inputs, targets, rcond=None)[0]
        np.testing.assert_allclose(np.hstack([views["weight"],
                                              views["bias"][:, None]]).T,
                                   batch_fit, atol=1e-3)

    def test_loss_trace_decreases(self):
        stream = _stream(trials=3, length=80)
        model = RecurrentPredictor(window=3, d_in=2, d_out=2, hidden=4, classes=3,
                                   seed=2)
        params, trace = offline_train(model, stream, epochs=10, batch=64, lr=0.01,
                                      seed=3)
        assert trace[9] <= trace[0]

    def test_deterministic(self):
        stream = _stream(trials=2, length=60)
        model = LinearPredictor(d_in=2, d_out=2, window=3, seed=0)
        a, _ = offline_train(model, stream, epochs=3, batch=32, lr=0.01, seed=5)
        b, _ = offline_train(model, stream, epochs=3, batch=32, lr=0.01, seed=5)
        np.testing.assert_array_equal(a.values, b.values)

    def test_empty_training_set(self):
        model = LinearPredictor(d_in=2, d_out=2, window=3)
        with pytest.raises(ConfigError):
            offline_train(model, [], epochs=1, batch=8, lr=0.01, seed=0)


class TestCalibrationPass:
    def test_adapted_and_frozen_differ(self):
        model, params = _linear_setup()
        stream = _stream(trials=1)
        adapted = collect_validation_errors(model, params, stream, MekfAdapter(),
                                            adapted=True)
        frozen = collect_validation_errors(model, params, stream, MekfAdapter(),
                                           adapted=False)
        assert adapted.shape == frozen.shape
        assert not np.array_equal(adapted, frozen)
        assert np.all(adapted >= 0) and np.all(np.isfinite(adapted))


class TestRunMatrix:
    def test_default_cell_enumeration(self):
        cfg = default_config()
        cells = enumerate_cells(cfg)
        assert len(cells) == 12
        labels = [c[2] for c in cells]
        assert "mekf_ema+proposed" in labels and "none" in labels

    def test_only_filter(self):
        cfg = default_config()
        assert len(enumerate_cells(cfg, only="mekf_ema+dme")) == 1
        assert len(enumerate_cells(cfg, only="adam")) == 1
        assert len(enumerate_cells(cfg, only="adam,mekf")) == 2
        with pytest.raises(ConfigError):
            enumerate_cells(cfg, only="bogus")

    def test_results_reproducible_and_order_invariant(self):
        cfg = _tiny_config()
        first = run_matrix(copy.deepcopy(cfg))
        second = run_matrix(copy.deepcopy(cfg))
        assert [r.to_dict() for r in first] == [r.to_dict() for r in second]
        flipped = copy.deepcopy(cfg)
        flipped["bench"]["adapters"] = list(reversed(cfg["bench"]["adapters"]))
        third = {r.label: r.to_dict() for r in run_matrix(flipped)}
        for result in first:
            mine = result.to_dict()
            other = third[result.label]
            # the digest hashes the (reordered) config; metrics must not move
            mine.pop("config_digest"), other.pop("config_digest")
            assert other == mine

    def test_failed_cell_recorded_matrix_continues(self):
        cfg = _tiny_config()
        cfg["bench"]["adapters"] = ["rls", "mekf"]   # rls rejects the mlp model
        cfg["bench"]["dme"] = ["none"]
        cfg["model"].update({"kind": "mlp", "hidden": 4})
        results = {r.label: r for r in run_matrix(cfg)}
        assert results["rls"].error is not None
        assert results["mekf"].error is None and np.isfinite(results["mekf"].mse)

    def test_format_table_lists_each_cell(self):
        cfg = _tiny_config()
        table = format_table(run_matrix(cfg))
        for label in ("none", "mekf", "none+proposed", "mekf+proposed"):
            assert f"\n{label} " in "\n" + table


class TestDriftRecovery:
    def test_error_recovers_after_mid_trial_shift(self):
        """Golden behavior on the stock benchmark, frozen from seed 0.

        The one-step error must spike at the dynamics shift and its level
        over the following 20..50 steps must drop back below twice the
        pre-shift mean.
        """
        cfg = default_config()
        prep = prepare_run(cfg, 0)
        stream = prep["streams"]["test"]
        trial = next(iter(dict.fromkeys(s.trial for s in stream)))
        one = [s for s in stream if s.trial == trial]
        log = run_online_adaptation(prep["model"], prep["params"], one,
                                    MekfAdapter(), mask=prep["mask"])
        errors = {r.t: r.error_norm for r in log.records if not np.isnan(r.error_norm)}
        shift = cfg["dataset"]["length"] // 2
        pre = np.mean([errors[t] for t in range(shift - 50, shift) if t in errors])
        spike = max(errors[t] for t in range(shift, shift + 5) if t in errors)
        settled = np.mean([errors[t] for t in range(shift + 20, shift + 50)
                           if t in errors])
        assert spike > 2 * pre
        assert settled < 2 * pre


class TestSeedCells:
    def test_payload_structure(self):
        cfg = _tiny_config()
        cells = enumerate_cells(cfg, only="mekf")
        payload = run_seed_cells(cfg, 0, cells)
        cell = payload["mekf"]
        assert set(cell) >= {"mse", "mse_squared", "trial_mse", "mean_seconds"}
        assert cell["mse"] > 0
