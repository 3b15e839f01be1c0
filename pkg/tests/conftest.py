import numpy as np
import pytest

from rrbpred.scene import DT, T_OBS, T_PRED, AgentHistory, Centerline, ScenarioState, SceneMap


def history(xy, agent_id=1, t0=0.0):
    xy = np.asarray(xy, dtype=float)
    return AgentHistory(agent_id, xy, t0 + DT * np.arange(len(xy)))


def straight_map(width=6.0, length=200.0, scene_id="straight", category="straight"):
    return SceneMap(scene_id, (Centerline(1, [[0.0, 0.0], [length, 0.0]], width),), category=category)


def line_track(start, step, n):
    """``n`` points from ``start`` advancing ``step`` per frame."""
    return np.asarray(start, dtype=float) + np.arange(n)[:, None] * np.asarray(step, dtype=float)


def lane_state(scene_map=None, x0=20.0, speed=4.0, y=0.0, others=(), gt=True):
    """Ego driving along +x at constant ``speed`` (m/s) on a straight map."""
    scene_map = scene_map or straight_map()
    step = speed * DT
    track = line_track([x0, y], [step, 0.0], T_OBS + T_PRED)
    return ScenarioState(history(track[:T_OBS]), tuple(others), scene_map,
                         track[T_OBS:] if gt else None, DT * (T_OBS - 1))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_suite():
    from rrbpred.synthetic import generate_suite

    return generate_suite(12, 5)


@pytest.fixture(scope="session")
def small_states(small_suite):
    return small_suite.scenarios()


def tiny_gradient_check(seed, fusion="ivw", n_modes=1, batch=4, kink=1e-3):
    """Largest relative error between backprop and central differences on a reduced RRB.

    Horizon 3, all layer widths <= 8, random inputs, end-to-end loss
    (WTA NLL of the fused output). Returns None when a hidden pre-activation
    sits within ``kink`` of a ReLU corner, where finite differences are
    meaningless. Central differences of a loss near 14 carry ~1e-11 of
    round-off, so entries are compared against a 1e-6 denominator floor.
    """
    from rrbpred import nn
    from rrbpred.predictors import KdVariancePrior
    from rrbpred.residual import ArchConfig, Batch
    from rrbpred.training import RrbModel

    rng = np.random.default_rng(seed)
    arch = ArchConfig(n_modes=n_modes, hist_widths=(8, 6), int_widths=(8, 4), kd_widths=(6, 4),
                      dec_widths=(8, 8), t_pred=3)
    model = RrbModel.create(arch, KdVariancePrior.default(), fusion=fusion, seed=seed)
    for b in model.net.bundles.values():
        for bias in b.biases:
            bias[:] = rng.normal(0, 0.3, bias.shape)
    hist_dim, int_dim, kd_dim = arch.input_dims
    kd = rng.normal(0, 5, (batch, n_modes, 3, 2))
    data = Batch(rng.normal(size=(batch, hist_dim)), rng.normal(size=(batch, int_dim)), kd,
                 rng.uniform(0.2, 3.0, (batch, 3, 2)), rng.uniform(1.0, 3.0, batch),
                 kd[:, 0] + rng.normal(0, 1.5, (batch, 3, 2)))
    _, _, (cache, _) = model.forward(data)
    tapes = [cache["hist"], cache["int"], cache["kd"]] + [m.tape for m in cache["modes"]]
    if any(np.min(np.abs(z)) < kink for t in tapes for z in t.pre[:-1]):
        return None
    model.net.zero_grad()
    model.loss_and_backward(data)
    worst = 0.0
    for b in model.net.bundles.values():
        for params, grads in ((b.weights, b.grad_w), (b.biases, b.grad_b)):
            for p, g in zip(params, grads):
                num = nn.numerical_gradient(lambda: model.loss(data), p, 1e-4)
                worst = max(worst, nn.relative_error(num, g, floor=1e-6))
    return worst


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
