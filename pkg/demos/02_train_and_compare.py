"""
Training the residual network and comparing pipelines
=====================================================

Generate a synthetic suite, hold out the T-intersection template, train
RRB and the plain encoder-decoder, and print the comparison table.

The defaults run in well under a minute; pass ``--scenes 200 --epochs 50`` for
the full-size experiment (a few minutes on a desktop CPU).
"""

import argparse
import time

from rrbpred import MODEL_RECIPES, TrainConfig, evaluate, fit_and_train, fit_kd_variance, generate_suite
from rrbpred import split_scene_generalization

parser = argparse.ArgumentParser()
parser.add_argument("--scenes", type=int, default=60)
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

t0 = time.perf_counter()
states = generate_suite(args.scenes, args.seed).scenarios()
train, test = split_scene_generalization(states)
print(f"{len(train)} training and {len(test)} held-out scenarios")

# the KD variance prior is fitted on training data only and shared by every model
prior = fit_kd_variance(train)
models = {}
for name in ("rrb", "edn"):
    r = MODEL_RECIPES[name]
    models[name] = fit_and_train(train, r.arch, TrainConfig(epochs=args.epochs, seed=args.seed),
                                 kd=r.kd, fusion=r.fusion, prior=prior)
    curve = models[name].loss_curve
    print(f"{name}: loss {curve[0]:.2f} -> {curve[-1]:.2f}")

table = evaluate(test, ["cv", "kd1", "edn", "rrb", "rrb+mpc", "vi1"], models, prior)
print(table.to_text())
print(f"done in {time.perf_counter() - t0:.0f} s")
