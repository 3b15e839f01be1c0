"""Kinematic bicycle-model MPC that projects a reference onto feasible motion.

The program is single-shooting over the control sequence::

    min_u  sum_k ||p_k - ref_k||^2 + lam * ||u_k - u_{k-1}||^2
    s.t.   s_{k+1} = F_bic(s_k, u_k),  s_0 = s_init,  u_min <= u_k <= u_max

solved by projected Gauss-Newton steps (Levenberg-Marquardt damping, box
clipping, accept-only-if-better). Gradients and the position Jacobian come
from an adjoint / forward-sensitivity pass through the rollout.
Problems are batched along the leading axis; each problem keeps its own
step length and stopping state, so results do not depend on batching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .scene import DT, AgentHistory


class MpcError(RuntimeError):
    pass


@dataclass(frozen=True)
class KinematicState:
    x: float
    y: float
    phi: float
    v: float

    def __post_init__(self):
        object.__setattr__(self, "phi", float(wrap_angle(self.phi)))
        if self.v < 0:
            raise ValueError("speed must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi, self.v])


@dataclass(frozen=True)
class MpcConfig:
    lam: float = 0.1
    wheelbase: float = 2.7
    u_min: tuple = (-6.0, -0.6)
    u_max: tuple = (4.0, 0.6)
    iterations: int = 200
    step_size: float = 1e-2  # initial damping
    dt: float = DT
    rel_tol: float = 1e-8
    max_backtracks: int = 40

    def __post_init__(self):
        if self.lam < 0 or self.wheelbase <= 0:
            raise ValueError("need lam >= 0 and wheelbase > 0")
        if not all(lo < hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("u_min must be below u_max")
        object.__setattr__(self, "u_min", tuple(float(v) for v in self.u_min))
        object.__setattr__(self, "u_max", tuple(float(v) for v in self.u_max))


def bicycle_step(s, u, dt: float = DT, wheelbase: float = 2.7) -> np.ndarray:
    """One explicit-Euler step of the kinematic bicycle; works on batches."""
    s = np.asarray(s, dtype=float)
    u = np.asarray(u, dtype=float)
    x, y, phi, v = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    a, gamma = u[..., 0], u[..., 1]
    out = np.empty(np.broadcast_shapes(s.shape, u.shape[:-1] + (4,)))
    out[..., 0] = x + v * np.cos(phi) * dt
    out[..., 1] = y + v * np.sin(phi) * dt
    out[..., 2] = wrap_angle(phi + v / wheelbase * np.tan(gamma) * dt)
    out[..., 3] = np.maximum(0.0, v + a * dt)
    return out


def rollout(s_init, controls, cfg: MpcConfig = MpcConfig()) -> np.ndarray:
    """States ``s_1..s_T`` for controls ``u_0..u_{T-1}``; shape (..., T, 4)."""
    s = s_init.as_array() if isinstance(s_init, KinematicState) else np.asarray(s_init, dtype=float)
    u = np.asarray(controls, dtype=float)
    states = []
    for k in range(u.shape[-2]):
        s = bicycle_step(s, u[..., k, :], cfg.dt, cfg.wheelbase)
        states.append(s)
    return np.stack(states, axis=-2)


def init_state_from_history(ego: AgentHistory | np.ndarray) -> KinematicState:
    xy = np.asarray(getattr(ego, "xy", ego), dtype=float)
    step = xy[-1] - xy[-2]
    dist = float(np.hypot(step[0], step[1]))
    phi = float(np.arctan2(step[1], step[0])) if dist > 1e-9 else 0.0
    return KinematicState(float(xy[-1, 0]), float(xy[-1, 1]), phi, dist / DT)


def initial_control_from_history(xy, cfg: MpcConfig = MpcConfig()) -> np.ndarray:
    """Control implied by the last two history steps (speed change and curvature), clipped."""
    xy = np.asarray(xy, dtype=float)
    s1, s2 = xy[-2] - xy[-3], xy[-1] - xy[-2]
    d1, d2 = np.hypot(*s1), np.hypot(*s2)
    a = (d2 - d1) / cfg.dt**2
    gamma = 0.0
    if d1 > 1e-9 and d2 > 1e-9:
        dphi = wrap_angle(np.arctan2(s2[1], s2[0]) - np.arctan2(s1[1], s1[0]))
        gamma = float(np.arctan(cfg.wheelbase * dphi / d1))
    return np.clip(np.array([a, gamma]), cfg.u_min, cfg.u_max)


def reference_controls(refs, s_init, cfg: MpcConfig = MpcConfig()) -> np.ndarray:
    """Controls that reproduce a reference exactly when it is a bicycle rollout (clipped to the box).

    Step ``k`` of the reference fixes the speed and heading of state ``k``;
    their differences give the acceleration and steering of step ``k - 1``.
    The last control does not move any position and repeats its predecessor.
    """
    refs = np.asarray(refs, dtype=float)
    s0 = np.asarray(s_init, dtype=float)
    N, T, _ = refs.shape
    dt, L = cfg.dt, cfg.wheelbase
    d = np.diff(refs, axis=1)                                # displacement of states 1..T-1
    v = np.concatenate([s0[:, 3:4], np.hypot(d[..., 0], d[..., 1]) / dt], axis=1)
    moving = v > 1e-9
    phi = np.full((N, T), np.nan)
    phi[:, 0] = s0[:, 2]
    phi[:, 1:] = np.where(moving[:, 1:], np.arctan2(d[..., 1], d[..., 0]), np.nan)
    # a stopped vehicle cannot turn: its heading is the one it leaves with,
    # or, if it never moves again, the one it arrived with
    for k in range(T - 2, 0, -1):
        phi[:, k] = np.where(np.isnan(phi[:, k]), phi[:, k + 1], phi[:, k])
    for k in range(1, T):
        phi[:, k] = np.where(np.isnan(phi[:, k]), phi[:, k - 1], phi[:, k])
    u = np.zeros((N, T, 2))
    u[:, :-1, 0] = np.diff(v, axis=1) / dt
    dphi = wrap_angle(np.diff(phi, axis=1))
    vk = v[:, :-1]
    u[:, :-1, 1] = np.where(moving[:, :-1], np.arctan(L * dphi / np.maximum(vk, 1e-9) / dt), 0.0)
    u[:, -1] = u[:, -2]
    return np.clip(u, cfg.u_min, cfg.u_max)


def _cost_and_grad(u, s0, ref, u_prev, cfg: MpcConfig, want_grad=True):
    """Batched cost (N,) and gradient (N, T, 2)."""
    N, T, _ = u.shape
    L, dt = cfg.wheelbase, cfg.dt
    states = np.empty((N, T + 1, 4))
    states[:, 0] = s0
    for k in range(T):
        states[:, k + 1] = bicycle_step(states[:, k], u[:, k], dt, L)
    err = states[:, 1:, :2] - ref
    du = np.diff(np.concatenate([u_prev[:, None], u], axis=1), axis=1)
    cost = np.sum(err**2, axis=(1, 2)) + cfg.lam * np.sum(du**2, axis=(1, 2))
    if not want_grad:
        return cost, None
    grad = np.zeros_like(u)
    lam_s = np.zeros((N, 4))
    for k in range(T - 1, -1, -1):
        lam_s[:, :2] += 2.0 * err[:, k]
        x, y, phi, v = states[:, k].T
        a, gamma = u[:, k].T
        moving = (v + a * dt) > 0.0
        sec2 = 1.0 / np.cos(gamma) ** 2
        # d s_{k+1} / d u_k
        grad[:, k, 0] = lam_s[:, 3] * dt * moving
        grad[:, k, 1] = lam_s[:, 2] * v / L * sec2 * dt
        # propagate to s_k
        lx, ly, lphi, lv = lam_s.T
        new = np.empty_like(lam_s)
        new[:, 0] = lx
        new[:, 1] = ly
        new[:, 2] = lx * (-v * np.sin(phi) * dt) + ly * (v * np.cos(phi) * dt) + lphi
        new[:, 3] = lx * np.cos(phi) * dt + ly * np.sin(phi) * dt + lphi * np.tan(gamma) * dt / L + lv * moving
        lam_s = new
    # smoothness: d/du_k of lam*(||u_k-u_{k-1}||^2 + ||u_{k+1}-u_k||^2)
    grad += 2.0 * cfg.lam * du
    grad[:, :-1] -= 2.0 * cfg.lam * du[:, 1:]
    return cost, grad


def mpc_cost(controls, s_init, ref, u_prev, cfg: MpcConfig = MpcConfig()) -> float:
    u = np.asarray(controls, dtype=float)[None]
    c, _ = _cost_and_grad(u, np.asarray(s_init, dtype=float)[None], np.asarray(ref)[None],
                          np.asarray(u_prev, dtype=float)[None], cfg, want_grad=False)
    return float(c[0])


@dataclass
class MpcResult:
    states: np.ndarray    # (..., T, 4)
    controls: np.ndarray  # (..., T, 2)
    cost: np.ndarray
    warm_cost: np.ndarray
    iterations: np.ndarray = field(default=None)

    @property
    def positions(self) -> np.ndarray:
        return self.states[..., :2]


def _jacobian(u, s0, cfg: MpcConfig):
    """States (N, T+1, 4) and position sensitivities d p_k / d u, shape (N, T, 2, 2T)."""
    N, T, _ = u.shape
    L, dt = cfg.wheelbase, cfg.dt
    states = np.empty((N, T + 1, 4))
    states[:, 0] = s0
    S = np.zeros((N, 4, 2 * T))
    J = np.zeros((N, T, 2, 2 * T))
    for k in range(T):
        x, y, phi, v = states[:, k].T
        a, gamma = u[:, k].T
        moving = ((v + a * dt) > 0.0).astype(float)
        A = np.zeros((N, 4, 4))
        A[:, 0, 0] = A[:, 1, 1] = A[:, 2, 2] = 1.0
        A[:, 0, 2] = -v * np.sin(phi) * dt
        A[:, 0, 3] = np.cos(phi) * dt
        A[:, 1, 2] = v * np.cos(phi) * dt
        A[:, 1, 3] = np.sin(phi) * dt
        A[:, 2, 3] = np.tan(gamma) * dt / L
        A[:, 3, 3] = moving
        S = A @ S
        S[:, 3, 2 * k] += moving * dt
        S[:, 2, 2 * k + 1] += v / L / np.cos(gamma) ** 2 * dt
        states[:, k + 1] = bicycle_step(states[:, k], u[:, k], dt, L)
        J[:, k] = S[:, :2]
    return states, J


def _difference_matrix(T: int) -> np.ndarray:
    """Maps flattened u (2T) to u_k - u_{k-1} with u_{-1} treated as a constant."""
    D = np.eye(2 * T)
    D[np.arange(2, 2 * T), np.arange(0, 2 * T - 2)] = -1.0
    return D


def solve_mpc_batch(refs, s_init, u_prev=None, cfg: MpcConfig = MpcConfig()) -> MpcResult:
    """Projected Gauss-Newton (Levenberg-Marquardt damped) descent on the controls.

    Two starts are descended: zero controls and :func:`reference_controls`;
    the cheaper result is kept and ``warm_cost`` is the cheaper start.
    Controls at a bound whose gradient points outward are held fixed for the
    step; every trial point is clipped to the box and only accepted when it
    lowers the cost, so the result never costs more than the warm start.
    """
    refs = np.asarray(refs, dtype=float)
    N, T, _ = refs.shape
    s0 = np.asarray(s_init, dtype=float).reshape(N, 4)
    up = np.zeros((N, 2)) if u_prev is None else np.asarray(u_prev, dtype=float).reshape(N, 2)
    a = _descend(np.zeros((N, T, 2)), refs, s0, up, cfg)
    b = _descend(reference_controls(refs, s0, cfg), refs, s0, up, cfg)
    pick = b.cost < a.cost
    sel = lambda x, y: np.where(pick.reshape((N,) + (1,) * (x.ndim - 1)), y, x)  # noqa: E731
    return MpcResult(sel(a.states, b.states), sel(a.controls, b.controls), np.where(pick, b.cost, a.cost),
                     np.minimum(a.warm_cost, b.warm_cost), a.iterations + b.iterations)


def _descend(u_init, refs, s0, up, cfg: MpcConfig) -> MpcResult:
    N, T, _ = refs.shape
    n = 2 * T
    lo = np.tile(np.array(cfg.u_min), T)
    hi = np.tile(np.array(cfg.u_max), T)
    D = _difference_matrix(T)
    sq = np.sqrt(cfg.lam)
    u = np.clip(np.asarray(u_init, dtype=float).reshape(N, n), lo, hi)
    cost, _ = _cost_and_grad(u.reshape(N, T, 2), s0, refs, up, cfg, want_grad=False)
    warm = cost.copy()
    mu = np.full(N, cfg.step_size)
    active = np.ones(N, dtype=bool)
    iters = np.zeros(N, dtype=int)
    eye = np.eye(n)
    for _ in range(cfg.iterations):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        ua = u[idx]
        states, Jp = _jacobian(ua.reshape(-1, T, 2), s0[idx], cfg)
        r_track = (states[:, 1:, :2] - refs[idx]).reshape(len(idx), n)
        prev = np.concatenate([up[idx], ua[:, :-2]], axis=1)
        r_smooth = sq * (ua - prev)
        Jt = Jp.transpose(0, 1, 2, 3).reshape(len(idx), n, n)
        JtJ = Jt.transpose(0, 2, 1) @ Jt + cfg.lam * (D.T @ D)
        grad = np.einsum("bij,bi->bj", Jt, r_track) + sq * (r_smooth @ D)
        fixed = ((ua <= lo) & (grad > 0)) | ((ua >= hi) & (grad < 0))
        ca = cost[idx]
        accepted = np.zeros(len(idx), dtype=bool)
        new_u, new_c = ua.copy(), ca.copy()
        mua = mu[idx]
        diag = np.maximum(np.einsum("bii->bi", JtJ), 1e-9)
        for _ in range(cfg.max_backtracks):
            todo = np.nonzero(~accepted)[0]
            if len(todo) == 0:
                break
            H = JtJ[todo] + mua[todo, None, None] * (diag[todo][:, :, None] * eye)
            g = grad[todo].copy()
            f = fixed[todo]
            H = np.where(f[:, :, None] | f[:, None, :], 0.0, H) + f[:, :, None] * eye
            g[f] = 0.0
            step = -np.linalg.solve(H, g[..., None])[..., 0]
            trial = np.clip(ua[todo] + step, lo, hi)
            ct, _ = _cost_and_grad(trial.reshape(-1, T, 2), s0[idx[todo]], refs[idx[todo]],
                                   up[idx[todo]], cfg, want_grad=False)
            if not np.all(np.isfinite(ct)):
                raise MpcError("non-finite MPC cost during descent; step size too large")
            ok = ct < ca[todo]
            new_u[todo[ok]] = trial[ok]
            new_c[todo[ok]] = ct[ok]
            accepted[todo[ok]] = True
            mua[todo[ok]] /= 3.0
            mua[todo[~ok]] *= 4.0
        rel = (ca - new_c) / np.maximum(ca, 1e-300)
        u[idx], cost[idx] = new_u, new_c
        mu[idx] = np.clip(mua, 1e-12, 1e12)
        iters[idx] += 1
        done = ~accepted | (rel < cfg.rel_tol) | (new_c <= 1e-16)
        active[idx[done]] = False
    controls = u.reshape(N, T, 2)
    states = np.empty((N, T, 4))
    s = s0.copy()
    for k in range(T):
        s = bicycle_step(s, controls[:, k], cfg.dt, cfg.wheelbase)
        states[:, k] = s
    return MpcResult(states, controls, cost, warm, iters)


def solve_mpc(y_ref, s_init, cfg: MpcConfig = MpcConfig(), u_prev=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Track reference means ``y_ref`` (T, 2) from ``s_init``; returns (states, controls, cost)."""
    ref = np.asarray(getattr(y_ref, "means", y_ref), dtype=float)
    s0 = s_init.as_array() if isinstance(s_init, KinematicState) else np.asarray(s_init, dtype=float)
    res = solve_mpc_batch(ref[None], s0[None], None if u_prev is None else np.asarray(u_prev)[None], cfg)
    return res.states[0], res.controls[0], float(res.cost[0])
