"""Knowledge-driven predictors: Lin (Kalman), CV, lane-following KD1 and KD2."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Polyline, history_heading, rotation
from .scene import DT, T_PRED, AgentHistory, ScenarioState, SceneMap, project_to_centerline

VARIANCE_FLOOR = 1e-4

# leader-follower law
KD2_GAIN = 0.5
KD2_DESIRED_GAP = 8.0
KD2_V_MAX = 20.0
KD2_CORRIDOR = 2.0

# constant-velocity Kalman filter
KF_MEAS_STD = 0.3
KF_ACCEL_STD = 1.0


@dataclass(frozen=True, eq=False)
class GaussianTrajectory:
    """Per-step 2D mean and diagonal variance over the prediction horizon."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        m = np.array(self.means, dtype=float)
        v = np.array(self.variances, dtype=float)
        if m.shape != (T_PRED, 2) or v.shape != (T_PRED, 2):
            raise ValueError(f"expected ({T_PRED}, 2) means and variances")
        if not np.all(v > 0):
            raise ValueError("variances must be strictly positive")
        m.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)


def isotonic_nondecreasing(y) -> np.ndarray:
    """Least-squares non-decreasing fit (pool adjacent violators)."""
    blocks = []  # [mean, weight]
    for v in np.asarray(y, dtype=float):
        blocks.append([v, 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2 = blocks.pop()
            m1, w1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])
    return np.concatenate([np.full(int(w), m) for m, w in blocks])


@dataclass(frozen=True, eq=False)
class KdVariancePrior:
    """Fixed per-step variance of a KD predictor, in the ego-aligned frame.

    Column 0 is along the ego heading, column 1 to its left.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.shape != (T_PRED, 2):
            raise ValueError(f"variance table must be ({T_PRED}, 2)")
        t = np.column_stack([isotonic_nondecreasing(t[:, 0]), isotonic_nondecreasing(t[:, 1])])
        t = np.maximum(t, VARIANCE_FLOOR)
        t.flags.writeable = False
        object.__setattr__(self, "table", t)

    @classmethod
    def default(cls) -> "KdVariancePrior":
        j = np.arange(1, T_PRED + 1)
        return cls(np.column_stack([(0.5 * j) ** 2, (0.25 * j) ** 2]))

    def world(self, heading: float) -> np.ndarray:
        """Diagonal of the covariance rotated into the world frame."""
        c2, s2 = np.cos(heading) ** 2, np.sin(heading) ** 2
        lon, lat = self.table[:, 0], self.table[:, 1]
        return np.column_stack([c2 * lon + s2 * lat, s2 * lon + c2 * lat])


def current_speed(xy) -> float:
    """Mean of the last two per-step speeds."""
    xy = np.asarray(xy, dtype=float)
    steps = np.linalg.norm(np.diff(xy[-3:], axis=0), axis=1)
    return float(steps.mean() / DT)


def predict_cv(ego: AgentHistory, prior: KdVariancePrior | None = None) -> GaussianTrajectory:
    prior = prior or KdVariancePrior.default()
    vel = (ego.xy[-1] - ego.xy[-2]) / DT
    j = np.arange(1, T_PRED + 1)[:, None]
    means = ego.xy[-1] + vel * DT * j
    return GaussianTrajectory(means, prior.world(history_heading(ego.xy)))


def predict_linear_kalman(ego: AgentHistory, meas_std: float = KF_MEAS_STD,
                          accel_std: float = KF_ACCEL_STD) -> GaussianTrajectory:
    """Constant-velocity Kalman filter over the history, then open-loop prediction.

    The filter starts from two-point differencing (the exact diffuse-prior
    initialization), so a noiseless constant-velocity track is reproduced
    exactly.
    """
    z = ego.xy
    r = meas_std**2
    q = accel_std**2
    F = np.array([[1.0, DT], [0.0, 1.0]])
    Q = q * np.array([[DT**4 / 4, DT**3 / 2], [DT**3 / 2, DT**2]])
    H = np.array([[1.0, 0.0]])
    means, variances = [], []
    for axis in range(2):
        x = np.array([z[1, axis], (z[1, axis] - z[0, axis]) / DT])
        P = np.array([[r, r / DT], [r / DT, 2 * r / DT**2]])
        for k in range(2, len(z)):
            x = F @ x
            P = F @ P @ F.T + Q
            S = P[0, 0] + r
            K = P[:, 0] / S
            x = x + K * (z[k, axis] - x[0])
            P = P - np.outer(K, H @ P)
        mu, var = [], []
        for _ in range(T_PRED):
            x = F @ x
            P = F @ P @ F.T + Q
            mu.append(x[0])
            var.append(P[0, 0])
        means.append(mu)
        variances.append(var)
    return GaussianTrajectory(np.array(means).T, np.array(variances).T)


# ---------------------------------------------------------------------------
# lane-following
# ---------------------------------------------------------------------------

def lane_routes(scene_map: SceneMap, start_id: int, s0: float, travel: float) -> list[tuple]:
    """Successor chains from ``start_id`` long enough to cover ``travel`` meters past ``s0``."""
    routes = []

    def grow(route, remaining):
        lane = scene_map.centerline(route[-1])
        succ = [sid for sid in lane.successors if sid in scene_map._by_id and sid not in route]
        if remaining <= 0 or not succ:
            routes.append(tuple(route))
            return
        for sid in sorted(succ):
            grow(route + [sid], remaining - scene_map.centerline(sid).line.length)

    first = scene_map.centerline(start_id).line
    grow([start_id], travel - (first.length - s0))
    return routes


def route_polyline(scene_map: SceneMap, route: Sequence[int]) -> Polyline:
    verts = [scene_map.centerline(route[0]).polyline]
    for lid in route[1:]:
        v = scene_map.centerline(lid).polyline
        if np.linalg.norm(v[0] - verts[-1][-1]) < 1e-9:
            v = v[1:]
        verts.append(v)
    return Polyline(np.vstack(verts))


@dataclass(frozen=True)
class _LanePlan:
    route: tuple
    line: Polyline
    s0: float
    d0: float


def _lane_plans(state: ScenarioState) -> list[_LanePlan]:
    """Candidate lane continuations ordered by |initial lateral offset|, then route ids."""
    p = state.ego.last
    cid, s, _ = project_to_centerline(p, state.map)
    v = current_speed(state.ego.xy)
    plans = []
    for route in lane_routes(state.map, cid, s, v * DT * T_PRED):
        line = route_polyline(state.map, route)
        s0, d0 = line.project(p)
        plans.append(_LanePlan(route, line, s0, d0))
    plans.sort(key=lambda pl: (round(abs(pl.d0), 9), pl.route))
    return plans


def _follow(plan: _LanePlan, arc_positions: np.ndarray) -> np.ndarray:
    """Points at the given arc lengths, lateral offset decaying to 0 over two steps."""
    out = np.empty((len(arc_positions), 2))
    for k, s in enumerate(arc_positions):
        decay = max(0.0, 1.0 - (k + 1) / 2.0)
        out[k] = plan.line.point_at(s) + plan.d0 * decay * plan.line.normal_at(s)
    return out


def _kd1_from_plan(state: ScenarioState, plan: _LanePlan, prior: KdVariancePrior) -> GaussianTrajectory:
    v = current_speed(state.ego.xy)
    s = plan.s0 + v * DT * np.arange(1, T_PRED + 1)
    return GaussianTrajectory(_follow(plan, s), prior.world(history_heading(state.ego.xy)))


def predict_kd1(state: ScenarioState, prior: KdVariancePrior | None = None) -> GaussianTrajectory:
    """Constant speed along the nearest lane (and its lowest-offset continuation)."""
    prior = prior or KdVariancePrior.default()
    return _kd1_from_plan(state, _lane_plans(state)[0], prior)


def find_leader(state: ScenarioState, plan: _LanePlan, corridor: float = KD2_CORRIDOR):
    """Nearest other agent ahead on the ego's lane path: ``(arc length, speed)`` or None."""
    best = None
    for other in state.others:
        s, d = plan.line.project(other.last)
        if abs(d) <= corridor and s > plan.s0 and (best is None or s < best[0]):
            best = (s, current_speed(other.xy))
    return best


def leader_follower_speeds(v0: float, s_ego: float, s_lead: float, v_lead: float,
                           gain: float = KD2_GAIN, desired_gap: float = KD2_DESIRED_GAP,
                           v_max: float = KD2_V_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Iterate the proportional gap law; returns per-step speeds and ego arc lengths."""
    v = v0
    speeds, arcs = [], []
    for _ in range(T_PRED):
        gap = s_lead - s_ego
        v = min(max(v + gain * (gap - desired_gap) * DT, 0.0), v_max)
        s_ego += v * DT
        s_lead += v_lead * DT
        speeds.append(v)
        arcs.append(s_ego)
    return np.array(speeds), np.array(arcs)


def predict_kd2(state: ScenarioState, prior: KdVariancePrior | None = None, **law) -> GaussianTrajectory:
    """KD1 path with a leader-follower speed profile; KD1 when no leader is found."""
    prior = prior or KdVariancePrior.default()
    plan = _lane_plans(state)[0]
    leader = find_leader(state, plan)
    if leader is None:
        return _kd1_from_plan(state, plan, prior)
    _, s = leader_follower_speeds(current_speed(state.ego.xy), plan.s0, leader[0], leader[1], **law)
    return GaussianTrajectory(_follow(plan, s), prior.world(history_heading(state.ego.xy)))


def enumerate_lane_branches(state: ScenarioState, max_modes: int,
                            prior: KdVariancePrior | None = None) -> list[GaussianTrajectory]:
    if max_modes < 1:
        raise ValueError("max_modes must be >= 1")
    prior = prior or KdVariancePrior.default()
    return [_kd1_from_plan(state, plan, prior) for plan in _lane_plans(state)[:max_modes]]


PREDICTORS: dict[str, Callable] = {
    "lin": lambda state, prior=None: predict_linear_kalman(state.ego),
    "cv": lambda state, prior=None: predict_cv(state.ego, prior),
    "kd1": predict_kd1,
    "kd2": predict_kd2,
}


def get_predictor(name: str) -> Callable:
    try:
        return PREDICTORS[name]
    except KeyError:
        raise ValueError(f"unknown predictor {name!r}; expected one of {sorted(PREDICTORS)}") from None


def ego_frame_errors(states: Sequence[ScenarioState], kd) -> np.ndarray:
    """(N, T_PRED, 2) ground-truth minus KD mean, rotated into each ego frame."""
    errs = []
    for st in states:
        err = st.ground_truth - kd(st).means
        errs.append(err @ rotation(history_heading(st.ego.xy)))
    return np.array(errs)


def fit_kd_variance(training: Sequence[ScenarioState], kd: Callable | str = "kd1") -> KdVariancePrior:
    """Empirical per-step variance of KD errors in the ego frame, made non-decreasing."""
    if isinstance(kd, str):
        kd = get_predictor(kd)
    usable = [s for s in training if s.ground_truth is not None]
    if len(usable) < 2:
        raise ValueError("fit_kd_variance needs at least 2 scenarios with ground truth")
    errs = ego_frame_errors(usable, kd)
    return KdVariancePrior(np.var(errs, axis=0))
