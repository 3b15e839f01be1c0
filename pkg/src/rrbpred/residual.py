"""Residual estimator: ego-frame inputs, three encoders and a confined decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .geometry import history_heading, rotation
from .scene import T_OBS, T_PRED, ScenarioState

K_AGENTS = 3
INPUT_SCALE = 0.1  # meters -> network units
EDN_OUTPUT_SCALE = 10.0
LOGVAR_MIN = float(np.log(1e-4))
LOGVAR_MAX = float(np.log(1e4))

HIST_WIDTHS = (32, 32, 64)
INT_WIDTHS = (32, 32, 64)
KD_WIDTHS = (32, 64)
DEC_WIDTHS = (256, 128, 128, 64)

HIST_DIM = 2 * T_OBS
INT_DIM = K_AGENTS * 2 * T_OBS + K_AGENTS
KD_DIM = 2 * T_PRED


@dataclass(frozen=True)
class EgoFrame:
    """Pose of the ego at its last observation; heading in (-pi, pi]."""

    origin: np.ndarray
    heading: float

    @property
    def R(self) -> np.ndarray:
        return rotation(self.heading)

    def to_ego(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.R

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.origin

    def variances_to_world(self, var) -> np.ndarray:
        """Diagonal of R diag(var) R^T for per-step ego-frame variances."""
        c2, s2 = np.cos(self.heading) ** 2, np.sin(self.heading) ** 2
        var = np.asarray(var, dtype=float)
        return np.stack([c2 * var[..., 0] + s2 * var[..., 1], s2 * var[..., 0] + c2 * var[..., 1]], axis=-1)


@dataclass(frozen=True)
class InteractionSet:
    positions: np.ndarray  # (K, T_OBS, 2) ego frame, zero for empty slots
    mask: np.ndarray       # (K,)
    agent_ids: tuple = ()

    def flat(self) -> np.ndarray:
        return np.concatenate([(self.positions * INPUT_SCALE).ravel(), self.mask])


@dataclass(frozen=True)
class ResidualDistribution:
    means: np.ndarray      # (T_PRED, 2) ego frame
    variances: np.ndarray  # (T_PRED, 2)


def ego_frame(state: ScenarioState) -> EgoFrame:
    return EgoFrame(np.array(state.ego.last, dtype=float), history_heading(state.ego.xy))


def to_ego_frame(state: ScenarioState, kd_means=None):
    """Normalize the scene to the ego pose.

    Returns ``(frame, ego_history, others, kd)`` where ``others`` maps agent
    id to its history in the ego frame and ``kd`` is the normalized KD mean
    (None when not given).
    """
    frame = ego_frame(state)
    hist = frame.to_ego(state.ego.xy)
    others = {o.agent_id: frame.to_ego(o.xy) for o in state.others}
    kd = None if kd_means is None else frame.to_ego(kd_means)
    return frame, hist, others, kd


def preprocess_interactions(state: ScenarioState, frame: EgoFrame, k: int = K_AGENTS) -> InteractionSet:
    """Keep the ``k`` nearest agents not behind the ego (longitudinal >= 0)."""
    cand = []
    for o in state.others:
        rel = frame.to_ego(o.xy)
        if rel[-1, 0] >= 0.0:
            cand.append((float(np.hypot(*rel[-1])), o.agent_id, rel))
    cand.sort(key=lambda c: (c[0], c[1]))
    pos = np.zeros((k, T_OBS, 2))
    mask = np.zeros(k)
    for i, (_, _, rel) in enumerate(cand[:k]):
        pos[i] = rel
        mask[i] = 1.0
    return InteractionSet(pos, mask, tuple(c[1] for c in cand[:k]))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    """Which network to build.

    ``use_kd=False`` gives the plain encoder-decoder (EDN) whose decoder
    predicts the full trajectory. ``confined=False`` drops the tanh bound
    on the residual mean (NC-RRB).
    """

    n_modes: int = 1
    use_kd: bool = True
    confined: bool = True
    hist_widths: tuple = HIST_WIDTHS
    int_widths: tuple = INT_WIDTHS
    kd_widths: tuple = KD_WIDTHS
    dec_widths: tuple = DEC_WIDTHS
    k_agents: int = K_AGENTS
    t_obs: int = T_OBS
    t_pred: int = T_PRED

    @property
    def input_dims(self) -> tuple:
        return 2 * self.t_obs, self.k_agents * (2 * self.t_obs + 1), 2 * self.t_pred

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def build_bundles(arch: ArchConfig, seed: int) -> dict:
    hist_dim, int_dim, kd_dim = arch.input_dims
    specs = {
        "hist": nn.MlpSpec((hist_dim,) + tuple(arch.hist_widths)),
        "int": nn.MlpSpec((int_dim,) + tuple(arch.int_widths)),
    }
    feat = arch.hist_widths[-1] + arch.int_widths[-1]
    if arch.use_kd:
        specs["kd"] = nn.MlpSpec((kd_dim,) + tuple(arch.kd_widths))
        feat += arch.kd_widths[-1]
    for m in range(arch.n_modes):
        specs[f"dec{m}"] = nn.MlpSpec((feat,) + tuple(arch.dec_widths) + (4 * arch.t_pred,))
    return {name: nn.init_params(spec, seed + i) for i, (name, spec) in enumerate(specs.items())}


def encode(bundles: dict, hist, interactions, kd=None):
    """Run the encoders on flattened, scaled inputs; returns features and tapes."""
    e_hist, t_hist = nn.forward(bundles["hist"], hist)
    e_int, t_int = nn.forward(bundles["int"], interactions)
    feats, tapes = [e_hist, e_int], {"hist": t_hist, "int": t_int}
    if kd is not None:
        e_kd, t_kd = nn.forward(bundles["kd"], kd)
        feats.append(e_kd)
        tapes["kd"] = t_kd
    return feats, tapes


@dataclass
class DecodeTape:
    tape: nn.Tape
    raw_mean: np.ndarray
    logvar: np.ndarray
    scale: np.ndarray
    confined: bool


def decode_residual(decoder: nn.MlpBundle, features, c, confined: bool = True):
    """Residual Gaussian from concatenated features.

    The mean head is ``c * tanh(raw)`` (``c * raw`` when not confined); the
    variance head is a log-variance clamped to [log 1e-4, log 1e4]. Returns
    ``(mean, var, tape)`` with trailing shape ``(horizon, 2)``.
    """
    x = np.concatenate(features, axis=-1)
    out, tape = nn.forward(decoder, x)
    half = out.shape[-1] // 2
    raw_mean = out[..., :half]
    logvar = out[..., half:]
    scale = np.asarray(c, dtype=float)
    if scale.ndim:
        scale = scale[..., None]
    mean = scale * (np.tanh(raw_mean) if confined else raw_mean)
    var = np.exp(np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX))
    shape = out.shape[:-1] + (half // 2, 2)
    return mean.reshape(shape), var.reshape(shape), DecodeTape(tape, raw_mean, logvar, scale, confined)


def decode_backward(decoder: nn.MlpBundle, dt: DecodeTape, d_mean, d_var) -> np.ndarray:
    shape = dt.raw_mean.shape
    d_mean = np.asarray(d_mean).reshape(shape)
    d_var = np.asarray(d_var).reshape(shape)
    if dt.confined:
        th = np.tanh(dt.raw_mean)
        g_raw = d_mean * dt.scale * (1.0 - th * th)
    else:
        g_raw = d_mean * dt.scale
    inside = (dt.logvar > LOGVAR_MIN) & (dt.logvar < LOGVAR_MAX)
    g_lv = np.where(inside, d_var * np.exp(np.clip(dt.logvar, LOGVAR_MIN, LOGVAR_MAX)), 0.0)
    return nn.backward(decoder, dt.tape, np.concatenate([g_raw, g_lv], axis=-1))


# ---------------------------------------------------------------------------
# batched samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """Network-ready view of one scenario (everything in the ego frame)."""

    key: str
    frame: EgoFrame
    hist: np.ndarray       # (HIST_DIM,)
    inter: np.ndarray      # (INT_DIM,)
    kd: np.ndarray         # (M, T_PRED, 2) KD means, ego frame
    kd_var: np.ndarray     # (T_PRED, 2) ego frame
    c: float
    gt: Optional[np.ndarray] = None  # (T_PRED, 2) ego frame
    state: Optional[ScenarioState] = field(default=None, repr=False)


def make_sample(state: ScenarioState, kd_modes, kd_var, c: Optional[float] = None) -> Sample:
    """``kd_modes``: list of world-frame KD mean arrays (one per mode)."""
    frame, hist, _, _ = to_ego_frame(state)
    inter = preprocess_interactions(state, frame)
    kd = np.stack([frame.to_ego(m) for m in kd_modes])
    gt = None if state.ground_truth is None else frame.to_ego(state.ground_truth)
    return Sample(state.key, frame, (hist * INPUT_SCALE).ravel(), inter.flat(), kd,
                  np.asarray(kd_var, dtype=float), state.map.confinement_c if c is None else float(c), gt, state)


@dataclass
class Batch:
    hist: np.ndarray   # (B, HIST_DIM)
    inter: np.ndarray  # (B, INT_DIM)
    kd: np.ndarray     # (B, M, T_PRED, 2)
    kd_var: np.ndarray  # (B, T_PRED, 2)
    c: np.ndarray      # (B,)
    gt: Optional[np.ndarray]  # (B, T_PRED, 2)

    @classmethod
    def of(cls, samples, n_modes: int):
        def modes(s):
            kd = s.kd
            if len(kd) < n_modes:  # pad missing lane branches with the last one
                kd = np.concatenate([kd, np.repeat(kd[-1:], n_modes - len(kd), axis=0)])
            return kd[:n_modes]
        gt = None if samples[0].gt is None else np.stack([s.gt for s in samples])
        return cls(np.stack([s.hist for s in samples]), np.stack([s.inter for s in samples]),
                   np.stack([modes(s) for s in samples]), np.stack([s.kd_var for s in samples]),
                   np.array([s.c for s in samples]), gt)


@dataclass(frozen=True, eq=False)
class HistoryScaler:
    """Per-feature standardization of the flattened ego history.

    The ego's future speed change shows up as small second differences of
    the history, which are swamped by the raw positions; z-scoring each
    coordinate against the training set makes that signal learnable.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, hist_rows, floor: float = 1e-3) -> "HistoryScaler":
        h = np.asarray(hist_rows, dtype=float)
        return cls(h.mean(axis=0), np.maximum(h.std(axis=0), floor))

    def __call__(self, hist) -> np.ndarray:
        return (np.asarray(hist, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "HistoryScaler":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


class ResidualModel:
    """Encoders plus one decoder per mode; forward/backward over a Batch.

    ``forward`` returns per-mode second estimates in the ego frame: the
    residual ``(mu_res, s_res)`` for RRB variants, or a full trajectory for
    the plain encoder-decoder.
    """

    def __init__(self, arch: ArchConfig, bundles: dict, scaler: Optional[HistoryScaler] = None):
        self.arch = arch
        self.bundles = bundles
        self.scaler = scaler  # None: history used as is

    @classmethod
    def create(cls, arch: ArchConfig, seed: int) -> "ResidualModel":
        return cls(arch, build_bundles(arch, seed))

    def forward(self, batch: Batch):
        M = self.arch.n_modes
        hist = batch.hist if self.scaler is None else self.scaler(batch.hist)
        e_hist, t_hist = nn.forward(self.bundles["hist"], hist)
        e_int, t_int = nn.forward(self.bundles["int"], batch.inter)
        cache = {"hist": t_hist, "int": t_int, "modes": []}
        means, vars_ = [], []
        kd_tape = None
        if self.arch.use_kd:
            B = batch.kd.shape[0]
            kd_in = batch.kd.reshape(B * M, -1) * INPUT_SCALE
            e_kd_all, kd_tape = nn.forward(self.bundles["kd"], kd_in)
            e_kd_all = e_kd_all.reshape(B, M, -1)
        cache["kd"] = kd_tape
        for m in range(M):
            feats = [e_hist, e_int]
            if self.arch.use_kd:
                feats.append(e_kd_all[:, m])
                scale, confined = batch.c, self.arch.confined
            else:
                scale, confined = np.full(len(batch.c), EDN_OUTPUT_SCALE), False
            mu, var, dtape = decode_residual(self.bundles[f"dec{m}"], feats, scale, confined)
            means.append(mu)
            vars_.append(var)
            cache["modes"].append(dtape)
        return np.stack(means, axis=1), np.stack(vars_, axis=1), cache

    def backward(self, cache, d_mean, d_var):
        """``d_mean``/``d_var``: (B, M, T_PRED, 2) gradients of the loss."""
        M = self.arch.n_modes
        h = self.arch.hist_widths[-1]
        i = self.arch.int_widths[-1]
        g_hist = g_int = 0.0
        g_kd = []
        for m in range(M):
            g = decode_backward(self.bundles[f"dec{m}"], cache["modes"][m], d_mean[:, m], d_var[:, m])
            g_hist = g_hist + g[:, :h]
            g_int = g_int + g[:, h:h + i]
            if self.arch.use_kd:
                g_kd.append(g[:, h + i:])
        nn.backward(self.bundles["hist"], cache["hist"], g_hist)
        nn.backward(self.bundles["int"], cache["int"], g_int)
        if self.arch.use_kd:
            g = np.stack(g_kd, axis=1)
            nn.backward(self.bundles["kd"], cache["kd"], g.reshape(-1, g.shape[-1]))

    def zero_grad(self):
        for b in self.bundles.values():
            b.zero_grad()

    def step(self, lr: float):
        for b in self.bundles.values():
            nn.adam_step(b, lr)

    def all_finite(self) -> bool:
        return all(b.all_finite() for b in self.bundles.values())
