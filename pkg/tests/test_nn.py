import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrbpred import nn
from rrbpred.residual import ArchConfig, build_bundles


def loss_of(bundle, x, upstream):
    out, _ = nn.forward(bundle, x)
    return float(np.sum(out * upstream))


class TestInit:
    def test_deterministic(self):
        spec = nn.MlpSpec((4, 8, 3))
        a, b = nn.init_params(spec, 3), nn.init_params(spec, 3)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_shapes_and_zero_bias(self):
        b = nn.init_params(nn.MlpSpec((2, 3)), 0)
        assert [w.shape for w in b.weights] == [(3, 2)]
        assert [x.shape for x in b.biases] == [(3,)]
        assert np.all(b.biases[0] == 0)

    def test_fan_in_bound(self):
        b = nn.init_params(nn.MlpSpec((16, 64)), 0)
        assert np.abs(b.weights[0]).max() <= 0.25

    @pytest.mark.parametrize("widths", [(3,), (3, 0), ()])
    def test_invalid_spec(self, widths):
        with pytest.raises(ValueError):
            nn.MlpSpec(widths)


class TestForward:
    def test_zero_params(self):
        b = nn.init_params(nn.MlpSpec((3, 5, 2)), 0)
        for w in b.weights:
            w.fill(0.0)
        out, _ = nn.forward(b, np.ones(3))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity(self):
        b = nn.init_params(nn.MlpSpec((3, 3)), 0)
        b.weights[0][:] = np.eye(3)
        x = np.array([1.0, -2.0, 3.5])
        np.testing.assert_array_equal(nn.forward(b, x)[0], x)

    def test_tanh_range(self, rng):
        b = nn.init_params(nn.MlpSpec((4, 8, 6), output_activation="tanh"), 1)
        for w in b.weights:
            w *= 50
        out, _ = nn.forward(b, rng.normal(0, 10, (100, 4)))
        assert np.all(np.abs(out) <= 1.0)

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            nn.forward(nn.init_params(nn.MlpSpec((3, 2)), 0), np.ones(4))

    def test_batch_matches_rows(self, rng):
        b = nn.init_params(nn.MlpSpec((4, 8, 3)), 2)
        x = rng.normal(size=(5, 4))
        out, _ = nn.forward(b, x)
        for i in range(5):
            np.testing.assert_allclose(out[i], nn.forward(b, x[i])[0], rtol=1e-14)


class TestBackward:
    def test_linear_weight_grad_is_input(self):
        b = nn.init_params(nn.MlpSpec((3, 1)), 0)
        x = np.array([0.5, -1.0, 2.0])
        _, tape = nn.forward(b, x)
        nn.backward(b, tape, np.ones(1))
        np.testing.assert_array_equal(b.grad_w[0][0], x)
        np.testing.assert_array_equal(b.grad_b[0], [1.0])

    def test_zero_upstream(self, rng):
        b = nn.init_params(nn.MlpSpec((4, 6, 3)), 0)
        _, tape = nn.forward(b, rng.normal(size=4))
        nn.backward(b, tape, np.zeros(3))
        assert b.grad_norm() == 0.0

    def test_stale_tape(self, rng):
        b = nn.init_params(nn.MlpSpec((4, 3)), 0)
        _, tape = nn.forward(b, rng.normal(size=4))
        nn.adam_step(b, 1e-3)
        with pytest.raises(nn.StaleTapeError):
            nn.backward(b, tape, np.ones(3))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 8), min_size=2, max_size=4), st.integers(0, 2**31 - 1),
           st.sampled_from(["none", "tanh"]))
    def test_finite_difference_property(self, widths, seed, head):
        spec = nn.MlpSpec(tuple(widths), output_activation=head)
        b = nn.init_params(spec, seed)
        rng = np.random.default_rng(seed)
        for bias in b.biases:
            bias[:] = rng.normal(0, 0.5, bias.shape)
        x = rng.normal(size=(3, widths[0]))
        up = rng.normal(size=(3, widths[-1]))
        _, tape = nn.forward(b, x)
        # skip draws that sit within h of a ReLU kink: the finite difference straddles it
        if any(np.min(np.abs(z)) < 1e-4 for z in tape.pre[:-1]):
            return
        nn.backward(b, tape, up)
        for k in range(b.n_layers):
            num = nn.numerical_gradient(lambda: loss_of(b, x, up), b.weights[k], 1e-5)
            assert nn.relative_error(num, b.grad_w[k]) <= 1e-4
            num = nn.numerical_gradient(lambda: loss_of(b, x, up), b.biases[k], 1e-5)
            assert nn.relative_error(num, b.grad_b[k]) <= 1e-4


class TestAdam:
    def test_zero_grad_keeps_params(self):
        b = nn.init_params(nn.MlpSpec((3, 4, 2)), 0)
        before = b.flat().copy()
        nn.adam_step(b, 1e-2)
        np.testing.assert_array_equal(b.flat(), before)

    def test_constant_gradient_step_is_lr(self):
        b = nn.init_params(nn.MlpSpec((2, 2)), 0)
        lr = 1e-3
        for _ in range(200):
            before = b.flat().copy()
            b.grad_w[0].fill(0.3)
            b.grad_b[0].fill(-2.0)
            nn.adam_step(b, lr)
        np.testing.assert_allclose(np.abs(b.flat() - before), lr, rtol=1e-6)

    def test_deterministic(self, rng):
        x = rng.normal(size=(6, 3))

        def run():
            b = nn.init_params(nn.MlpSpec((3, 5, 1)), 9)
            for _ in range(5):
                out, tape = nn.forward(b, x)
                nn.backward(b, tape, out)
                nn.adam_step(b, 1e-2)
            return b.flat()

        np.testing.assert_array_equal(run(), run())


class TestCheckpoint:
    def make(self):
        b = {"a": nn.init_params(nn.MlpSpec((3, 4, 2), output_activation="tanh"), 1),
             "b": nn.init_params(nn.MlpSpec((2, 5)), 2)}
        b["a"].grad_w[0].fill(0.1)
        nn.adam_step(b["a"], 1e-2)
        return b

    def test_round_trip_bit_identical(self, tmp_path):
        bundles = self.make()
        nn.save_checkpoint(bundles, tmp_path / "m.npz", {"note": "x"})
        back, meta = nn.load_checkpoint(tmp_path / "m.npz", with_metadata=True)
        assert meta == {"note": "x"}
        for name in bundles:
            assert back[name].spec == bundles[name].spec and back[name].step == bundles[name].step
            for p, q in zip(bundles[name].weights + bundles[name].biases + bundles[name].m_w,
                            back[name].weights + back[name].biases + back[name].m_w):
                np.testing.assert_array_equal(p, q)

    def test_bytes_reproducible(self, tmp_path):
        nn.save_checkpoint(self.make(), tmp_path / "1.npz")
        nn.save_checkpoint(self.make(), tmp_path / "2.npz")
        assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.npz"
        nn.save_checkpoint(self.make(), path)
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(tmp_path / "none.npz")

    def test_records_decoder_widths(self, tmp_path):
        nn.save_checkpoint(build_bundles(ArchConfig(), 0), tmp_path / "r.npz")
        dec = nn.load_checkpoint(tmp_path / "r.npz")["dec0"]
        assert dec.spec.layer_widths[1:5] == (256, 128, 128, 64)
