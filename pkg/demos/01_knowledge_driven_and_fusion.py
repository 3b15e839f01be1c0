"""
Lane-following predictions and inverse-variance fusion
======================================================

A synthetic T-intersection, the closed-form predictors on one ego vehicle,
and how a bounded residual is merged with the lane-following guess.
"""

import numpy as np

from rrbpred import (SyntheticSpec, fit_kd_variance, fuse, generate_synthetic_scene, get_predictor,
                     ivw_weights, merged_variance)
from rrbpred.predictors import enumerate_lane_branches

# one T-intersection scene with a handful of interacting vehicles
scene_map, states = generate_synthetic_scene(SyntheticSpec("t_intersection", n_agents=4), seed=2)
print(f"scene {scene_map.scene_id}: {len(states)} scenarios, confinement C = {scene_map.confinement_c} m")

# the empirical KD variance is fitted on the scene's own windows here
prior = fit_kd_variance(states)
print("KD variance (along, across) at steps 1, 5, 10:", prior.table[[0, 4, 9]].round(3).tolist())

state = max(states, key=lambda s: len(enumerate_lane_branches(s, 2)))
gt = state.ground_truth
for name in ("lin", "cv", "kd1", "kd2"):
    pred = get_predictor(name)(state, prior)
    err = np.linalg.norm(pred.means - gt, axis=1)
    on_road = state.map.is_drivable(pred.means).mean() * 100
    print(f"{name:>4}: ADE {err.mean():6.2f} m  FDE {err[-1]:6.2f} m  on road {on_road:5.1f}%")

# at a junction the lane graph offers one KD branch per successor lane
for k, branch in enumerate(enumerate_lane_branches(state, 2, prior)):
    print(f"branch {k}: ends at {branch.means[-1].round(1)}")

# inverse-variance weights: the more certain estimate dominates
for s_kd, s_ad in ((1.0, 1.0), (1.0, 3.0), (4.0, 0.5)):
    w, wt = ivw_weights(s_kd, s_ad, 0.0)
    print(f"s_kd={s_kd} s_ad={s_ad}: w_kd={w:.3f} w_ad={wt:.3f} merged={merged_variance(s_kd, s_ad, 0.0, w, wt):.3f}")

# a residual bounded by C moves the fused mean by at most C per axis
kd = get_predictor("kd1")(state, prior).means
rng = np.random.default_rng(0)
mu_res = scene_map.confinement_c * np.tanh(rng.normal(0, 3, kd.shape))
res = fuse(kd, prior.table, mu_res, rng.uniform(0.1, 2.0, kd.shape))
print("max |fused - kd| =", float(np.abs(res.mean - kd).max().round(3)), "<= C")
