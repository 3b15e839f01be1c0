"""
Drawing a scenario
==================

History, ground truth and a few pipelines' means over the shaded drivable
area, written as a static SVG.
"""

import sys

import numpy as np

from rrbpred import MultiModalPrediction, fit_kd_variance, generate_suite, get_predictor
from rrbpred.render import write_figure

out = sys.argv[1] if len(sys.argv) > 1 else "scenario.svg"
states = generate_suite(6, 1).scenarios()
prior = fit_kd_variance(states)
state = next(s for s in states if s.category == "curve")

preds = {name: MultiModalPrediction.from_trajectories([get_predictor(name)(state, prior)])
         for name in ("cv", "kd1")}
# an unconstrained guess that drifts sideways, as a plain regressor might
kd = preds["kd1"].means[0]
preds["drifting"] = MultiModalPrediction(kd + np.outer(np.arange(1, 11), [0.0, 1.5]))
for name, p in preds.items():
    print(f"{name}: {state.map.is_drivable(p.means[0]).mean() * 100:.0f}% of points on the road")
print("wrote", write_figure(out, state, preds))
