import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrbpred import nn
from rrbpred.geometry import rotation
from rrbpred.predictors import KdVariancePrior, predict_kd1
from rrbpred.residual import (ArchConfig, Batch, HistoryScaler, ResidualModel, decode_residual, encode,
                              make_sample, preprocess_interactions, to_ego_frame)
from rrbpred.scene import T_OBS, T_PRED, Centerline, ScenarioState, SceneMap
from rrbpred.training import RrbModel

from conftest import history, lane_state, line_track, straight_map


def agent_at(x, y, agent_id):
    return history(line_track([x - 8, y], [2, 0], T_OBS), agent_id)


def transformed(state, theta=0.0, shift=(0.0, 0.0)):
    """The whole scene rotated by ``theta`` about the origin, then shifted."""
    R, t = rotation(theta), np.asarray(shift, dtype=float)
    f = lambda p: np.asarray(p) @ R.T + t  # noqa: E731
    m = state.map
    lines = tuple(Centerline(c.id, f(c.polyline), c.width, c.successors) for c in m.centerlines)
    new_map = SceneMap(m.scene_id, lines, m.cell_size, m.confinement_c, m.category)
    mv = lambda h: history(f(h.xy), h.agent_id, h.t[0])  # noqa: E731
    return ScenarioState(mv(state.ego), tuple(mv(o) for o in state.others), new_map,
                         None if state.ground_truth is None else f(state.ground_truth), state.anchor_time)


def busy_state():
    return lane_state(others=(agent_at(40, 1, 2), agent_at(35, -1, 3), agent_at(10, 0, 4), agent_at(60, 2, 5)))


def tiny_model(arch=ArchConfig(), seed=0):
    return RrbModel.create(arch, KdVariancePrior.default(), seed=seed)


class TestEgoFrame:
    def test_along_x_is_translation(self):
        s = lane_state()
        frame, hist, _, _ = to_ego_frame(s)
        assert frame.heading == 0.0
        np.testing.assert_array_equal(hist, s.ego.xy - s.ego.last)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.floats(-100, 100), st.floats(-100, 100))
    def test_rigid_motion_leaves_inputs_unchanged(self, theta, tx, ty):
        s = busy_state()
        t = transformed(s, theta, (tx, ty))
        _, h1, o1, k1 = to_ego_frame(s, predict_kd1(s).means)
        _, h2, o2, k2 = to_ego_frame(t, predict_kd1(t).means)
        np.testing.assert_allclose(h1, h2, atol=1e-9)
        np.testing.assert_allclose(k1, k2, atol=1e-9)
        for aid in o1:
            np.testing.assert_allclose(o1[aid], o2[aid], atol=1e-9)

    def test_round_trip(self, rng):
        frame, _, _, _ = to_ego_frame(transformed(busy_state(), 1.1, (5, -3)))
        p = rng.normal(0, 50, (20, 2))
        np.testing.assert_allclose(frame.to_world(frame.to_ego(p)), p, atol=1e-9)


class TestInteractions:
    def test_all_behind_is_empty(self):
        s = lane_state(others=(agent_at(5, 0, 2), agent_at(10, 2, 3)))
        inter = preprocess_interactions(s, to_ego_frame(s)[0])
        np.testing.assert_array_equal(inter.mask, 0.0)
        np.testing.assert_array_equal(inter.positions, 0.0)

    def test_three_nearest_in_order(self):
        # ego at (28, 0); front agents at distances 4, 20, 12, 7, 30 (hand-placed)
        xs = {2: 32.0, 3: 48.0, 4: 40.0, 5: 35.0, 6: 58.0}
        s = lane_state(others=tuple(agent_at(x, 0, aid) for aid, x in xs.items()))
        inter = preprocess_interactions(s, to_ego_frame(s)[0])
        assert inter.agent_ids == (2, 5, 4)
        np.testing.assert_array_equal(inter.mask, 1.0)

    def test_abeam_is_kept(self):
        s = lane_state(others=(agent_at(28, 3, 2),))
        inter = preprocess_interactions(s, to_ego_frame(s)[0])
        assert inter.agent_ids == (2,)

    def test_removing_agent_behind_changes_nothing(self):
        a = busy_state()
        b = ScenarioState(a.ego, tuple(o for o in a.others if o.agent_id != 4), a.map, a.ground_truth,
                          a.anchor_time)
        model = tiny_model()
        out_a = model.forward(model.batch(model.samples([a])))
        out_b = model.forward(model.batch(model.samples([b])))
        np.testing.assert_array_equal(out_a[0], out_b[0])
        np.testing.assert_array_equal(out_a[1], out_b[1])

    def test_empty_slots_are_zeroed(self):
        # whatever sits behind the ego, empty slots carry the same (zero) inputs
        flats = [preprocess_interactions(s, to_ego_frame(s)[0]).flat()
                 for s in (lane_state(others=(agent_at(40, 0, 2), agent_at(x, 1, 3))) for x in (0.0, 10.0, 20.0))]
        np.testing.assert_array_equal(flats[0], flats[1])
        np.testing.assert_array_equal(flats[0], flats[2])


class TestEncodeDecode:
    def test_zero_encoders(self, rng):
        bundles = ResidualModel.create(ArchConfig(), 0).bundles
        for name in ("hist", "int", "kd"):
            for w in bundles[name].weights:
                w.fill(0.0)
        hist_dim, int_dim, kd_dim = ArchConfig().input_dims
        feats, _ = encode(bundles, rng.normal(size=hist_dim), rng.normal(size=int_dim), rng.normal(size=kd_dim))
        for f in feats:
            np.testing.assert_array_equal(f, 0.0)

    def test_deterministic(self, rng):
        bundles = ResidualModel.create(ArchConfig(), 0).bundles
        x = [rng.normal(size=d) for d in ArchConfig().input_dims]
        a, _ = encode(bundles, *x)
        b, _ = encode(bundles, *x)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_zero_decoder(self):
        dec = nn.init_params(nn.MlpSpec((6, 8, 4 * T_PRED)), 0)
        for w in dec.weights:
            w.fill(0.0)
        mu, var, _ = decode_residual(dec, [np.ones(6)], 2.0)
        assert mu.shape == (T_PRED, 2)
        np.testing.assert_array_equal(mu, 0.0)
        np.testing.assert_array_equal(var, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1.0, 1e3))
    def test_confined_and_linear_in_c(self, seed, scale):
        rng = np.random.default_rng(seed)
        dec = nn.init_params(nn.MlpSpec((6, 8, 4 * T_PRED)), seed)
        for w in dec.weights:
            w *= scale
        x = [rng.normal(0, scale, 6)]
        mu2, _, _ = decode_residual(dec, x, 2.0)
        mu4, _, _ = decode_residual(dec, x, 4.0)
        assert np.abs(mu2).max() <= 2.0
        np.testing.assert_array_equal(mu4, 2.0 * mu2)

    def test_variance_clamped(self):
        dec = nn.init_params(nn.MlpSpec((2, 4 * T_PRED)), 0)
        dec.biases[0][:] = 100.0
        _, var, _ = decode_residual(dec, [np.zeros(2)], 1.0)
        np.testing.assert_allclose(var, 1e4)


class TestResidualModel:
    def test_translation_invariance(self):
        s = busy_state()
        model = tiny_model()
        a = model.forward(model.batch(model.samples([s])))
        b = model.forward(model.batch(model.samples([transformed(s, 0.0, (123.0, -77.0))])))
        np.testing.assert_allclose(a[0], b[0], atol=1e-9)
        np.testing.assert_allclose(a[1], b[1], atol=1e-9)

    def test_gradients_reach_every_encoder(self, small_states):
        model = tiny_model(ArchConfig(n_modes=2))
        batch = model.batch(model.samples(small_states[:16]))
        model.net.zero_grad()
        assert model.loss_and_backward(batch) != 0.0
        for name, b in model.net.bundles.items():
            if name.startswith("dec") and name != "dec0":
                continue  # a non-winning mode may legitimately receive nothing
            assert b.grad_norm() > 0, name

    def test_multimodal_shares_encoders(self):
        names = set(ResidualModel.create(ArchConfig(n_modes=2), 0).bundles)
        assert names == {"hist", "int", "kd", "dec0", "dec1"}

    def test_edn_has_no_kd_encoder(self):
        assert "kd" not in ResidualModel.create(ArchConfig(use_kd=False), 0).bundles

    def test_padding_missing_branches(self):
        s = lane_state()
        sample = make_sample(s, [predict_kd1(s).means], KdVariancePrior.default().table)
        batch = Batch.of([sample], 3)
        assert batch.kd.shape == (1, 3, T_PRED, 2)
        np.testing.assert_array_equal(batch.kd[0, 2], batch.kd[0, 0])

    def test_history_scaler_round_trip(self, rng):
        sc = HistoryScaler.fit(rng.normal(3, 2, (50, 10)))
        back = HistoryScaler.from_dict(sc.to_dict())
        x = rng.normal(size=(4, 10))
        np.testing.assert_array_equal(sc(x), back(x))
        np.testing.assert_allclose(sc(rng.normal(3, 2, (50, 10))).mean(), 0.0, atol=0.5)

    def test_arch_round_trip(self):
        a = ArchConfig(n_modes=2, confined=False)
        assert ArchConfig.from_dict(a.to_dict()) == a
