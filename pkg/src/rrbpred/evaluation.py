"""Named prediction pipelines, dataset splits and the comparison report."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .fusion import FusionMode
from .metrics import MetricsReport, MultiModalPrediction, aggregate, metric_ade_fde, metric_ct, metric_rv
from .losses import closest_mode
from .mpc import MpcConfig, init_state_from_history, initial_control_from_history, solve_mpc_batch
from .predictors import KdVariancePrior, get_predictor
from .residual import ArchConfig
from .scene import ScenarioState


@dataclass(frozen=True)
class ModelRecipe:
    """How to build and train one network variant."""

    arch: ArchConfig
    kd: str = "kd1"
    fusion: Optional[FusionMode] = FusionMode.IVW


MODEL_RECIPES: dict[str, ModelRecipe] = {
    "rrb": ModelRecipe(ArchConfig()),
    "rrb_m": ModelRecipe(ArchConfig(n_modes=2)),
    "nc_rrb": ModelRecipe(ArchConfig(confined=False)),
    "a_rrb": ModelRecipe(ArchConfig(), fusion=FusionMode.SIMPLE_ADD),
    "edn": ModelRecipe(ArchConfig(use_kd=False), fusion=None),
}


@dataclass(frozen=True)
class Pipeline:
    name: str
    model: Optional[str] = None          # key into the trained models (None: closed form)
    predictor: Optional[str] = None      # closed-form predictor
    fusion: Optional[FusionMode] = None  # override of the model's own fusion
    kd: Optional[str] = None             # swap the model's KD predictor (no retraining)
    mpc: bool = False


PIPELINES: dict[str, Pipeline] = {p.name: p for p in (
    Pipeline("lin", predictor="lin"),
    Pipeline("cv", predictor="cv"),
    Pipeline("kd1", predictor="kd1"),
    Pipeline("kd2", predictor="kd2"),
    Pipeline("edn", model="edn"),
    Pipeline("rrb", model="rrb"),
    Pipeline("rrb+mpc", model="rrb", mpc=True),
    Pipeline("rrb_m", model="rrb_m"),
    Pipeline("rrb_m+mpc", model="rrb_m", mpc=True),
    Pipeline("nc_rrb", model="nc_rrb"),
    Pipeline("a_rrb", model="a_rrb"),
    Pipeline("vi1", model="edn", fusion=FusionMode.VI_INDEPENDENT),
    Pipeline("vi2", model="edn", fusion=FusionMode.VI_FIXED),
    Pipeline("lin+rrb", model="rrb", kd="lin"),
    Pipeline("kd2+rrb", model="rrb", kd="kd2"),
)}

BASELINES = ("lin", "cv", "kd1", "kd2")
DEFAULT_PIPELINES = ("lin", "cv", "kd1", "kd2", "edn", "rrb", "rrb_m", "rrb_m+mpc")


def get_pipeline(name: str) -> Pipeline:
    try:
        return PIPELINES[name]
    except KeyError:
        raise ValueError(f"unknown pipeline {name!r}; expected one of {sorted(PIPELINES)}") from None


def models_needed(pipelines: Sequence[str]) -> list[str]:
    return sorted({get_pipeline(p).model for p in pipelines} - {None})


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def _unit_hash(text: str) -> float:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") / 2.0**64


def split_scene_overfitting(states: Sequence[ScenarioState], test_fraction: float = 0.2):
    """Hash each scene id into [0, 1); scenes below ``test_fraction`` go to the test set.

    Whole scenes move together so overlapping windows never straddle the split.
    """
    train, test = [], []
    for s in states:
        (test if _unit_hash(s.map.scene_id) < test_fraction else train).append(s)
    return train, test


def split_scene_generalization(states: Sequence[ScenarioState], held_out: str = "t_intersection"):
    """Hold out every scene of one category (map template)."""
    train = [s for s in states if s.category != held_out]
    test = [s for s in states if s.category == held_out]
    return train, test


SPLITS = {"scene-overfitting": split_scene_overfitting, "scene-generalization": split_scene_generalization}


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def apply_mpc(states: Sequence[ScenarioState], preds: Sequence[MultiModalPrediction],
              cfg: MpcConfig = MpcConfig()) -> list[MultiModalPrediction]:
    """Replace every mode's means by the MPC rollout tracking them (variances kept)."""
    if not preds:
        return []
    refs, s0, up, owner = [], [], [], []
    for i, (st, p) in enumerate(zip(states, preds)):
        init = init_state_from_history(st.ego).as_array()
        u0 = initial_control_from_history(st.ego.xy, cfg)
        for m in p.means:
            refs.append(m)
            s0.append(init)
            up.append(u0)
            owner.append(i)
    res = solve_mpc_batch(np.array(refs), np.array(s0), np.array(up), cfg)
    pos = res.positions
    out, k = [], 0
    for p in preds:
        out.append(MultiModalPrediction(pos[k:k + p.n_modes], p.variances, p.probs))
        k += p.n_modes
    return out


def run_pipeline(name: str, states: Sequence[ScenarioState], models: Mapping | None = None,
                 prior: KdVariancePrior | None = None, mpc_cfg: MpcConfig = MpcConfig()) -> list[MultiModalPrediction]:
    pl = get_pipeline(name)
    states = list(states)
    if pl.predictor is not None:
        fn = get_predictor(pl.predictor)
        preds = [MultiModalPrediction.from_trajectories([fn(s, prior)]) for s in states]
    else:
        if not models or pl.model not in models:
            raise ValueError(f"pipeline {name!r} needs a trained {pl.model!r} model")
        preds = models[pl.model].predict(states, pl.fusion, pl.kd)
    if pl.mpc:
        preds = apply_mpc(states, preds, mpc_cfg)
    return preds


def score(state: ScenarioState, pred: MultiModalPrediction) -> tuple:
    gt = state.ground_truth
    ade, fde = metric_ade_fde(pred, gt)
    best = int(closest_mode(pred.means, gt))
    ct = metric_ct(pred.means[best], gt, state.ego.last)
    return state.category, ade, fde, metric_rv(pred, state.map), ct


def _score_chunk(args):
    names, states, models, prior, mpc_cfg = args
    return {n: [score(s, p) for s, p in zip(states, run_pipeline(n, states, models, prior, mpc_cfg))]
            for n in names}


@dataclass
class ComparisonTable:
    reports: dict  # pipeline name -> MetricsReport

    def to_dict(self) -> dict:
        return {name: r.to_dict() for name, r in self.reports.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        head = f"{'pipeline':<12}{'ADE':>9}{'FDE':>9}{'RV%':>9}{'CT':>9}"
        lines = [head, "-" * len(head)]
        for name, r in self.reports.items():
            lines.append(f"{name:<12}{r.ade:>9.3f}{r.fde:>9.3f}{r.rv:>9.3f}{r.ct:>9.3f}")
        cats = sorted({c for r in self.reports.values() for c in r.counts})
        if cats:
            first = next(iter(self.reports.values()))
            lines.append("")
            lines.append("samples: " + ", ".join(f"{c}={first.counts.get(c, 0)}" for c in cats))
        return "\n".join(lines) + "\n"


def evaluate(states: Sequence[ScenarioState], pipelines: Sequence[str] = BASELINES,
             models: Mapping | None = None, prior: KdVariancePrior | None = None,
             mpc_cfg: MpcConfig = MpcConfig(), jobs: int = 1) -> ComparisonTable:
    """Score each pipeline on ``states``; categories are weighted equally.

    With ``jobs > 1`` the scenarios are split into contiguous chunks scored in
    worker processes and concatenated in scenario-key order, so the report
    does not depend on the job count.
    """
    states = sorted(states, key=lambda s: s.key)
    if not states:
        raise ValueError("cannot evaluate an empty dataset")
    if any(s.ground_truth is None for s in states):
        raise ValueError("every evaluated scenario needs ground truth")
    names = list(pipelines)
    for n in names:
        get_pipeline(n)
    jobs = max(1, min(int(jobs), len(states)))
    bounds = np.linspace(0, len(states), jobs + 1).astype(int)
    chunks = [(names, states[a:b], models, prior, mpc_cfg) for a, b in zip(bounds[:-1], bounds[1:])]
    if jobs == 1:
        parts = [_score_chunk(chunks[0])]
    else:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_score_chunk, chunks))
    reports = {n: aggregate([row for part in parts for row in part[n]]) for n in names}
    return ComparisonTable(reports)


__all__ = ["MODEL_RECIPES", "PIPELINES", "BASELINES", "DEFAULT_PIPELINES", "ModelRecipe", "Pipeline",
           "get_pipeline", "models_needed", "split_scene_overfitting", "split_scene_generalization", "SPLITS",
           "apply_mpc", "run_pipeline", "score", "ComparisonTable", "evaluate", "MetricsReport"]
