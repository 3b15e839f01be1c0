import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrbpred.evaluation import (BASELINES, ComparisonTable, evaluate, models_needed, run_pipeline,
                                split_scene_generalization, split_scene_overfitting)
from rrbpred.losses import LOG_2PI, closest_mode, gaussian_nll, wta_loss
from rrbpred.metrics import MultiModalPrediction, aggregate, metric_ade_fde, metric_ct, metric_rv
from rrbpred.nn import CheckpointError, numerical_gradient, relative_error
from rrbpred.predictors import KdVariancePrior
from rrbpred.residual import ArchConfig
from rrbpred.scene import T_PRED
from rrbpred.synthetic import generate_suite
from rrbpred.training import RrbModel, TrainConfig, TrainingError, fit_and_train, learning_rate, train

from conftest import straight_map, tiny_gradient_check

STEPS = np.arange(1, T_PRED + 1, dtype=float)


def along_x(dist):
    return np.column_stack([dist, np.zeros_like(dist)])


class TestGaussianNll:
    def test_zero_residual(self):
        gt = np.random.default_rng(1).normal(size=(T_PRED, 2))
        nll, _, _ = gaussian_nll(gt, np.ones_like(gt), gt)
        assert nll == pytest.approx(T_PRED * 2 * 0.5 * LOG_2PI, abs=1e-12)

    def test_single_entry(self):
        nll, d_mean, d_var = gaussian_nll([[1.0]], [[1.0]], [[2.0]])
        assert nll == pytest.approx(0.5 * (LOG_2PI + 1.0), abs=1e-15)
        assert (d_mean[0, 0], d_var[0, 0]) == (-1.0, 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        mean, gt = rng.normal(size=(2, T_PRED, 2))
        var = rng.uniform(0.3, 3.0, (T_PRED, 2))
        _, d_mean, d_var = gaussian_nll(mean, var, gt)
        f = lambda: float(gaussian_nll(mean, var, gt)[0])  # noqa: E731
        assert relative_error(numerical_gradient(f, mean, 1e-5), d_mean) <= 1e-6
        assert relative_error(numerical_gradient(f, var, 1e-5), d_var) <= 1e-6

    def test_nonpositive_variance(self):
        with pytest.raises(ValueError):
            gaussian_nll(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_nll(np.zeros((3, 2)), np.ones((3, 2)), np.zeros((4, 2)))


class TestWta:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_single_mode_is_nll(self, seed):
        rng = np.random.default_rng(seed)
        mean, gt = rng.normal(0, 5, (2, T_PRED, 2))
        var = rng.uniform(1e-3, 10, (T_PRED, 2))
        loss, dm, dv, best = wta_loss(mean[None], var[None], gt)
        nll, gm, gv = gaussian_nll(mean, var, gt)
        assert best == 0 and loss == nll
        np.testing.assert_array_equal(dm[0], gm)
        np.testing.assert_array_equal(dv[0], gv)

    def test_exact_mode_selected_other_untouched(self, rng):
        gt = rng.normal(size=(T_PRED, 2))
        means = np.stack([gt + 3.0, gt])
        loss, dm, dv, best = wta_loss(means, np.ones_like(means), gt)
        assert best == 1
        assert np.all(dm[0] == 0.0) and np.all(dv[0] == 0.0)
        assert loss == pytest.approx(T_PRED * LOG_2PI, abs=1e-12)

    def test_tie_goes_to_first_mode(self):
        # mirror images about the ground truth: identical mean distances
        gt = along_x(STEPS)
        means = np.stack([gt + [0.0, 1.0], gt - [0.0, 1.0]])
        assert closest_mode(means, gt) == 0
        _, dm, _, best = wta_loss(means, np.ones_like(means), gt)
        assert best == 0 and np.all(dm[1] == 0.0)

    def test_batched(self, rng):
        gt = rng.normal(size=(4, T_PRED, 2))
        means = np.stack([gt + 1.0, gt + 0.1], axis=1)
        _, _, _, best = wta_loss(means, np.ones_like(means), gt)
        np.testing.assert_array_equal(best, 1)


class TestEndToEndGradient:
    @pytest.mark.parametrize("fusion", ["ivw", "simple_add"])
    @pytest.mark.parametrize("n_modes", [1, 2])
    def test_matches_finite_differences(self, fusion, n_modes):
        errs = [e for e in (tiny_gradient_check(s, fusion, n_modes) for s in range(12)) if e is not None]
        assert len(errs) >= 5
        assert max(errs) <= 1e-4


class TestSchedule:
    def test_halving(self):
        cfg = TrainConfig()
        assert learning_rate(cfg, 0) == 1e-3
        assert learning_rate(cfg, 9) == 1e-3
        assert learning_rate(cfg, 10) == 5e-4
        assert learning_rate(cfg, 25) == 0.00025

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="epoch"):
            TrainConfig.from_dict({"epoch": 3})


class TestTraining:
    def test_deterministic(self, small_states):
        cfg = TrainConfig(epochs=3)
        a = fit_and_train(small_states[:80], ArchConfig(), cfg)
        b = fit_and_train(small_states[:80], ArchConfig(), cfg)
        assert a.loss_curve == b.loss_curve
        for name in a.net.bundles:
            np.testing.assert_array_equal(a.net.bundles[name].flat(), b.net.bundles[name].flat())

    def test_seed_matters(self, small_states):
        a = fit_and_train(small_states[:40], ArchConfig(), TrainConfig(epochs=1, seed=0))
        b = fit_and_train(small_states[:40], ArchConfig(), TrainConfig(epochs=1, seed=1))
        assert a.loss_curve != b.loss_curve

    @pytest.mark.slow
    def test_loss_falls_over_fifty_epochs(self):
        states = generate_suite(50, 1).scenarios()
        model = fit_and_train(states, ArchConfig(), TrainConfig(epochs=50))
        curve = model.loss_curve
        assert len(curve) == 50
        assert curve[-1] < curve[0]
        assert np.mean(curve[-10:]) < np.mean(curve[:10])

    def test_empty(self):
        with pytest.raises(TrainingError):
            fit_and_train([], ArchConfig())

    def test_missing_ground_truth(self, small_states):
        model = RrbModel.create(ArchConfig(), KdVariancePrior.default())
        samples = model.samples(small_states[:2])
        samples[1].gt = None
        with pytest.raises(TrainingError, match="ground truth"):
            train(model, samples, TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch_and_norms(self, small_states):
        model = RrbModel.create(ArchConfig(), KdVariancePrior.default())
        samples = model.samples(small_states[:8])
        for s in samples:
            s.gt[:] = np.inf
        with pytest.raises(TrainingError, match="epoch 0, batch 0.*hist="):
            train(model, samples, TrainConfig(epochs=1))

    def test_checkpoint_round_trip(self, small_states, tmp_path):
        model = fit_and_train(small_states[:40], ArchConfig(n_modes=2), TrainConfig(epochs=1))
        model.save(tmp_path / "m.npz")
        back = RrbModel.load(tmp_path / "m.npz", expect_arch=ArchConfig(n_modes=2))
        assert back.loss_curve == model.loss_curve
        a, b = model.predict(small_states[:5]), back.predict(small_states[:5])
        for p, q in zip(a, b):
            np.testing.assert_array_equal(p.means, q.means)

    def test_checkpoint_arch_mismatch(self, small_states, tmp_path):
        model = RrbModel.create(ArchConfig(), KdVariancePrior.default())
        model.save(tmp_path / "m.npz")
        with pytest.raises(CheckpointError, match="does not match"):
            RrbModel.load(tmp_path / "m.npz", expect_arch=ArchConfig(n_modes=2))


class TestAdeFde:
    def test_exact(self):
        gt = along_x(STEPS)
        assert metric_ade_fde(gt, gt) == (0.0, 0.0)

    def test_constant_offset(self):
        gt = along_x(STEPS)
        assert metric_ade_fde(gt + [0.0, 1.0], gt) == (1.0, 1.0)

    def test_growing_offset(self):
        gt = along_x(STEPS)
        ade, fde = metric_ade_fde(gt + np.column_stack([np.zeros(T_PRED), STEPS]), gt)
        assert abs(ade - 5.5) <= 1e-9 and abs(fde - 10.0) <= 1e-9

    def test_closest_mode_used(self):
        gt = along_x(STEPS)
        pred = MultiModalPrediction(np.stack([gt + 5.0, gt + [0.0, 1.0]]))
        assert metric_ade_fde(pred, gt) == (1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = rng.normal(0, 4, (2, T_PRED, 2))
        ade, fde = metric_ade_fde(pred, gt)
        disp = np.linalg.norm(pred - gt, axis=1)
        assert 0 <= ade <= disp.max() and fde == disp[-1]


class TestRoadViolation:
    def test_on_road(self):
        assert metric_rv(along_x(10 + STEPS), straight_map()) == 0.0

    def test_one_of_ten(self):
        pts = along_x(10 + STEPS)
        pts[4, 1] = 10.0
        assert abs(metric_rv(pts, straight_map()) - 10.0) <= 1e-9

    def test_probability_weighted(self):
        on = along_x(10 + STEPS)
        off = on.copy()
        off[:2, 1] = -9.0
        pred = MultiModalPrediction(np.stack([on, off]))
        assert abs(metric_rv(pred, straight_map()) - 10.0) <= 1e-9

    def test_custom_probabilities(self):
        on = along_x(10 + STEPS)
        off = on + [0.0, 20.0]
        pred = MultiModalPrediction(np.stack([on, off]), probs=[0.75, 0.25])
        assert abs(metric_rv(pred, straight_map()) - 25.0) <= 1e-9

    def test_bad_probabilities(self):
        with pytest.raises(ValueError):
            MultiModalPrediction(np.zeros((2, T_PRED, 2)), probs=[0.7, 0.7])


class TestCrossTrack:
    def test_identical(self):
        gt = along_x(STEPS)
        assert metric_ct(gt, gt, [0.0, 0.0]) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.05, 9.95), min_size=T_PRED - 2, max_size=T_PRED - 2))
    def test_retimed_path_on_a_bend(self, arcs):
        # gt and prediction share the path (0,0) -> (5,0) -> (5,5) at different speeds;
        # both pass the corner and end at the same destination
        def on_path(s):
            s = np.asarray(s)
            return np.where(s[:, None] <= 5, np.column_stack([s, 0 * s]), np.column_stack([5 + 0 * s, s - 5]))

        gt = on_path(np.linspace(1.0, 10.0, T_PRED))
        pred = on_path(np.sort(np.concatenate([arcs, [5.0, 10.0]])))
        assert metric_ct(pred, gt, [0.0, 0.0]) <= 1e-9

    def test_short_prediction_is_extrapolated(self):
        gt = along_x(STEPS)
        pred = along_x(0.6 * STEPS)
        assert metric_ct(pred, gt, [0.0, 0.0]) <= 1e-9

    @pytest.mark.parametrize("theta", [0.1, 0.5, 1.0, 2.0])
    def test_chord(self, theta):
        gt = along_x(STEPS)
        pred = STEPS[:, None] * [np.cos(theta), np.sin(theta)]
        assert abs(metric_ct(pred, gt, [0.0, 0.0]) - 2 * 10 * np.sin(theta / 2)) <= 1e-9

    def test_stationary_prediction(self):
        gt = along_x(STEPS)
        assert metric_ct(np.zeros((T_PRED, 2)), gt, [0.0, 0.0]) == 10.0


class TestAggregate:
    def test_categories_weighted_equally(self):
        rows = [("a", 1.0, 1.0, 0.0, 0.0)] + [("b", 3.0, 3.0, 0.0, 0.0)] * 5
        report = aggregate(rows)
        assert report.ade == 2.0
        assert report.counts == {"a": 1, "b": 5}

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestSplits:
    def test_generalization_holds_out_template(self, small_states):
        train_, test = split_scene_generalization(small_states)
        assert test and train_
        assert {s.category for s in test} == {"t_intersection"}
        assert "t_intersection" not in {s.category for s in train_}

    def test_overfitting_keeps_scenes_whole(self):
        states = generate_suite(60, 2).scenarios()
        train_, test = split_scene_overfitting(states)
        assert not {s.map.scene_id for s in train_} & {s.map.scene_id for s in test}
        frac = len({s.map.scene_id for s in test}) / len({s.map.scene_id for s in states})
        assert 0.05 <= frac <= 0.4

    def test_overfitting_is_stable(self, small_states):
        a = split_scene_overfitting(small_states)
        b = split_scene_overfitting(list(reversed(small_states)))
        assert {s.key for s in a[1]} == {s.key for s in b[1]}


class TestEvaluate:
    def test_kd1_never_leaves_the_road(self, small_states):
        table = evaluate(small_states, ["kd1"])
        assert table.reports["kd1"].rv == 0.0

    def test_baseline_rows(self, small_states):
        table = evaluate(small_states[:30])
        assert list(table.reports) == list(BASELINES)
        text = table.to_text()
        assert "RV%" in text and "kd2" in text

    def test_deterministic_and_order_free(self, small_states):
        a = evaluate(small_states, BASELINES).to_json()
        b = evaluate(list(reversed(small_states)), BASELINES).to_json()
        assert a == b

    def test_jobs_do_not_change_report(self, small_states):
        a = evaluate(small_states[:40], ["kd1", "cv"], jobs=1).to_json()
        b = evaluate(small_states[:40], ["kd1", "cv"], jobs=3).to_json()
        assert a == b

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate([])

    def test_unknown_pipeline(self, small_states):
        with pytest.raises(ValueError, match="unknown pipeline"):
            evaluate(small_states[:3], ["kd7"])

    def test_model_pipeline_needs_model(self, small_states):
        with pytest.raises(ValueError, match="rrb"):
            run_pipeline("rrb", small_states[:3])

    def test_models_needed(self):
        assert models_needed(["kd1", "rrb_m+mpc", "vi1", "lin+rrb"]) == ["edn", "rrb", "rrb_m"]

    def test_trained_pipelines_run(self, small_states):
        model = fit_and_train(small_states[:40], ArchConfig(), TrainConfig(epochs=1))
        names = ["rrb", "lin+rrb", "kd2+rrb", "rrb+mpc"]
        table = evaluate(small_states[:10], names, {"rrb": model})
        assert isinstance(table, ComparisonTable) and list(table.reports) == names
        for r in table.reports.values():
            assert r.ade >= 0 and 0 <= r.rv <= 100 and r.ct >= 0
