"""Knowledge-driven trajectory prediction with a confined learned residual.

A lane-following (KD) predictor is corrected by a bounded Gaussian residual
from a small numpy MLP; the two are merged by inverse-variance weighting and
optionally projected onto kinematically feasible paths by an MPC refiner.
"""

from .evaluation import (BASELINES, MODEL_RECIPES, PIPELINES, ComparisonTable, evaluate, run_pipeline,
                         split_scene_generalization, split_scene_overfitting)
from .fusion import FusionMode, FusionResult, fuse, ivw_weights, merged_variance
from .losses import closest_mode, gaussian_nll, wta_loss
from .metrics import MetricsReport, MultiModalPrediction, aggregate, metric_ade_fde, metric_ct, metric_rv
from .mpc import KinematicState, MpcConfig, MpcResult, bicycle_step, rollout, solve_mpc, solve_mpc_batch
from .predictors import (GaussianTrajectory, KdVariancePrior, enumerate_lane_branches, fit_kd_variance,
                         get_predictor, predict_cv, predict_kd1, predict_kd2, predict_linear_kalman)
from .residual import ArchConfig, HistoryScaler, ResidualModel
from .scene import (DT, T_OBS, T_PRED, AgentHistory, Centerline, ScenarioState, SceneMap, build_scenarios,
                    compute_confinement_c, project_to_centerline, rasterize_drivable, walk_centerline)
from .synthetic import SyntheticSpec, generate_suite, generate_synthetic_scene
from .training import RrbModel, TrainConfig, fit_and_train, train

__version__ = "0.1.0"
