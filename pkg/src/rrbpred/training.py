"""Training loop and the trained-model wrapper (KD + residual + fusion)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import nn
from .fusion import FusionMode, fuse
from .losses import wta_loss
from .metrics import MultiModalPrediction
from .predictors import KdVariancePrior, enumerate_lane_branches, fit_kd_variance, get_predictor
from .residual import ArchConfig, Batch, HistoryScaler, ResidualModel, Sample, make_sample
from .scene import ScenarioState

log = logging.getLogger(__name__)

MODEL_FORMAT = "rrb-model/1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    halve_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.halve_every < 1:
            raise ValueError("epochs, batch_size and halve_every must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ValueError(f"unknown train config key(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: halve every ``halve_every`` epochs (epochs count from 0)."""
    return cfg.learning_rate * 0.5 ** (epoch // cfg.halve_every)


def _take(batch: Batch, idx) -> Batch:
    return Batch(batch.hist[idx], batch.inter[idx], batch.kd[idx], batch.kd_var[idx], batch.c[idx],
                 None if batch.gt is None else batch.gt[idx])


@dataclass
class RrbModel:
    """A residual network bound to its KD predictor, KD variance prior and fusion rule.

    ``fusion=None`` marks a stand-alone encoder-decoder whose output is used
    as is (it can still be merged with a KD at prediction time through the
    ``vi_*`` fusion modes).
    """

    net: ResidualModel
    prior: KdVariancePrior
    kd: str = "kd1"
    fusion: Optional[FusionMode] = FusionMode.IVW
    sigma_cross: float = 0.0
    loss_curve: list = field(default_factory=list)

    @classmethod
    def create(cls, arch: ArchConfig, prior: KdVariancePrior, kd: str = "kd1",
               fusion=FusionMode.IVW, sigma_cross: float = 0.0, seed: int = 0) -> "RrbModel":
        get_predictor(kd)
        if fusion is not None:
            fusion = FusionMode(fusion)
        if fusion is None and arch.use_kd:
            raise ValueError("a residual network needs a fusion mode")
        if fusion in (FusionMode.IVW, FusionMode.SIMPLE_ADD) and not arch.use_kd:
            raise ValueError(f"fusion {fusion.value!r} needs a residual network (use_kd=True)")
        return cls(ResidualModel.create(arch, seed), prior, kd, fusion, sigma_cross)

    @property
    def arch(self) -> ArchConfig:
        return self.net.arch

    # -- data ---------------------------------------------------------------

    def kd_modes(self, state: ScenarioState, kd: str | None = None) -> list[np.ndarray]:
        kd = kd or self.kd
        M = self.arch.n_modes
        if M > 1 and kd == "kd1":
            return [t.means for t in enumerate_lane_branches(state, M, self.prior)]
        return [get_predictor(kd)(state, self.prior).means]

    def samples(self, states: Sequence[ScenarioState], kd: str | None = None) -> list[Sample]:
        return [make_sample(s, self.kd_modes(s, kd), self.prior.table) for s in states]

    def batch(self, samples: Sequence[Sample]) -> Batch:
        return Batch.of(list(samples), self.arch.n_modes)

    # -- forward / backward -------------------------------------------------

    def forward(self, batch: Batch, fusion=None):
        """Ego-frame output ``(mean, var)`` of shape (B, M, T, 2) plus a cache."""
        mode = self.fusion if fusion is None else FusionMode(fusion)
        out_mean, out_var, cache = self.net.forward(batch)
        if mode is None:
            return out_mean, out_var, (cache, None)
        if mode in (FusionMode.IVW, FusionMode.SIMPLE_ADD) and not self.arch.use_kd:
            raise ValueError(f"fusion {mode.value!r} needs a residual network")
        kd_var = batch.kd_var[:, None]
        kd = batch.kd if self.arch.use_kd else batch.kd[:, :1]
        res = fuse(kd, kd_var, out_mean, out_var, mode, self.sigma_cross)
        return res.mean, res.var, (cache, res)

    def loss_and_backward(self, batch: Batch) -> float:
        """Mean WTA loss over the batch; accumulates parameter gradients."""
        mean, var, (cache, res) = self.forward(batch)
        loss, d_mean, d_var, _ = wta_loss(mean, var, batch.gt)
        B = len(loss)
        d_mean, d_var = d_mean / B, d_var / B
        if res is not None:
            d_mean, d_var = res.backward(d_mean, d_var)
        self.net.backward(cache, d_mean, d_var)
        return float(loss.mean())

    def loss(self, batch: Batch) -> float:
        mean, var, _ = self.forward(batch)
        return float(wta_loss(mean, var, batch.gt)[0].mean())

    def predict(self, states: Sequence[ScenarioState], fusion=None, kd: str | None = None) -> list[MultiModalPrediction]:
        """World-frame multimodal predictions with uniform mode probabilities.

        ``kd`` swaps in another knowledge-driven predictor without retraining.
        """
        if not states:
            return []
        samples = self.samples(states, kd)
        mean, var, _ = self.forward(self.batch(samples), fusion)
        out = []
        for i, s in enumerate(samples):
            out.append(MultiModalPrediction(s.frame.to_world(mean[i]), s.frame.variances_to_world(var[i])))
        return out

    # -- persistence ------------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "model_format": MODEL_FORMAT,
            "arch": self.arch.to_dict(),
            "kd": self.kd,
            "fusion": None if self.fusion is None else self.fusion.value,
            "sigma_cross": self.sigma_cross,
            "kd_variance": self.prior.table.tolist(),
            "history_scaler": None if self.net.scaler is None else self.net.scaler.to_dict(),
            "loss_curve": list(self.loss_curve),
        }

    def save(self, path, extra: dict | None = None) -> None:
        meta = self.metadata()
        if extra:
            meta["extra"] = extra
        nn.save_checkpoint(self.net.bundles, path, meta)

    @classmethod
    def load(cls, path, expect_arch: ArchConfig | None = None) -> "RrbModel":
        bundles, meta = nn.load_checkpoint(path, with_metadata=True)
        if meta.get("model_format") != MODEL_FORMAT:
            raise nn.CheckpointError(f"{path}: not a trained model checkpoint")
        arch = ArchConfig.from_dict(meta["arch"])
        if expect_arch is not None and arch != expect_arch:
            raise nn.CheckpointError(f"{path}: architecture {arch} does not match the requested {expect_arch}")
        expected = ResidualModel.create(arch, 0).bundles
        if set(expected) != set(bundles):
            raise nn.CheckpointError(f"{path}: bundles {sorted(bundles)} do not match architecture "
                                     f"(expected {sorted(expected)})")
        for name, b in bundles.items():
            if b.spec.layer_widths != expected[name].spec.layer_widths:
                raise nn.CheckpointError(f"{path}: bundle {name!r} widths {b.spec.layer_widths} "
                                         f"do not match architecture {expected[name].spec.layer_widths}")
        fusion = None if meta["fusion"] is None else FusionMode(meta["fusion"])
        scaler = meta.get("history_scaler")
        scaler = None if scaler is None else HistoryScaler.from_dict(scaler)
        model = cls(ResidualModel(arch, bundles, scaler), KdVariancePrior(np.array(meta["kd_variance"])),
                    meta["kd"], fusion, float(meta["sigma_cross"]), list(meta.get("loss_curve", [])))
        return model


def _param_norms(model: RrbModel) -> str:
    return ", ".join(f"{k}={b.param_norm():.3g}" for k, b in model.net.bundles.items())


def train(model: RrbModel, samples: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
          callback=None) -> list[float]:
    """Mini-batch Adam on the WTA loss of the fused output.

    A model without a history scaler gets one fitted on ``samples`` first.
    Returns the per-epoch mean loss (also stored on ``model.loss_curve``).
    Raises ``TrainingError`` on a non-finite loss or parameters.
    """
    samples = list(samples)
    if not samples:
        raise TrainingError("training set is empty")
    if any(s.gt is None for s in samples):
        raise TrainingError("every training sample needs ground truth")
    full = model.batch(samples)
    if model.net.scaler is None:
        model.net.scaler = HistoryScaler.fit(full.hist)
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    curve = []
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            model.net.zero_grad()
            loss = model.loss_and_backward(_take(full, idx))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}; "
                                    f"parameter norms: {_param_norms(model)}")
            model.net.step(lr)
            if not model.net.all_finite():
                raise TrainingError(f"non-finite parameters after epoch {epoch}, batch {b}; "
                                    f"parameter norms: {_param_norms(model)}")
            total += loss * len(idx)
        curve.append(total / n)
        log.debug("epoch %d lr %.2e loss %.4f", epoch, lr, curve[-1])
        if callback is not None:
            callback(epoch, curve[-1])
    model.loss_curve = list(model.loss_curve) + curve
    return curve


def fit_and_train(states: Sequence[ScenarioState], arch: ArchConfig, cfg: TrainConfig = TrainConfig(),
                  kd: str = "kd1", fusion=FusionMode.IVW, sigma_cross: float = 0.0,
                  prior: KdVariancePrior | None = None) -> RrbModel:
    """Fit the KD variance prior on ``states`` (unless given), then train."""
    states = list(states)
    if not states:
        raise TrainingError("training set is empty")
    if prior is None:
        prior = fit_kd_variance(states, kd)
    model = RrbModel.create(arch, prior, kd, fusion, sigma_cross, seed=cfg.seed)
    train(model, model.samples(states), cfg)
    return model
