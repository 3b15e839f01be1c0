"""Command-line entry point: ``rrbpred gen-data | train | eval | predict | render``.

Every subcommand takes ``--config FILE`` (JSON) plus flags; flags win over
the file, the file wins over built-in defaults. Outputs default to
``$RRBPRED_OUTPUT_DIR`` (else ``./rrb-output``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import dataio, nn
from .dataio import ParseError
from .evaluation import (BASELINES, DEFAULT_PIPELINES, MODEL_RECIPES, PIPELINES, SPLITS, evaluate,
                         get_pipeline, run_pipeline)
from .fusion import FusionMode
from .mpc import MpcConfig
from .predictors import fit_kd_variance
from .render import RenderError, write_figure
from .residual import ArchConfig
from .synthetic import TEMPLATES, ConfigError, SyntheticSpec, generate_suite
from .training import RrbModel, TrainConfig, TrainingError, fit_and_train

log = logging.getLogger("rrbpred")

OUTPUT_ENV = "RRBPRED_OUTPUT_DIR"
DEFAULT_OUTPUT = "rrb-output"
EXIT_ERROR = 2
EXIT_DIVERGED = 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _check_keys(d, allowed, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    bad = sorted(set(d) - set(allowed))
    if bad:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(bad)}")
    return d


SYNTHETIC_KEYS = {"n_scenes", "templates", "agents"} | {f.name for f in fields(SyntheticSpec)} - {"template", "n_agents"}
DATASET_KEYS = {"dir", "csv", "map"}
MODEL_KEYS = {"variant", "fusion", "modes", "confined", "kd", "sigma_cross"}


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    synthetic: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    scenario: str = "scene-generalization"
    held_out: str = "t_intersection"
    test_fraction: float = 0.2
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    pipelines: list | None = None
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        _check_keys(d, {f.name for f in fields(cls)}, "config")
        cfg = cls(**d)
        _check_keys(cfg.synthetic, SYNTHETIC_KEYS, "config.synthetic")
        _check_keys(cfg.dataset, DATASET_KEYS, "config.dataset")
        _check_keys(cfg.model, MODEL_KEYS, "config.model")
        _check_keys(cfg.train, {f.name for f in fields(TrainConfig)}, "config.train")
        _check_keys(cfg.mpc, {f.name for f in fields(MpcConfig)}, "config.mpc")
        if cfg.scenario not in SPLITS:
            raise ConfigError(f"config.scenario: unknown split {cfg.scenario!r}; expected one of {sorted(SPLITS)}")
        # relative dataset paths are taken relative to the config file; they must exist
        ds = dict(cfg.dataset)
        for key in ("dir", "map"):
            if key in ds:
                ds[key] = str(base / ds[key])
        if "csv" in ds:
            ds["csv"] = [str(base / p) for p in ds["csv"]]
        for p in ([ds["dir"]] if "dir" in ds else []) + ([ds["map"]] if "map" in ds else []) + ds.get("csv", []):
            if not Path(p).exists():
                raise ConfigError(f"config.dataset: path {p!r} does not exist")
        cfg.dataset = ds
        return cfg

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
        return cls.from_dict(d, p.parent)


def _pick(flag, config_value, default=None):
    if flag is not None:
        return flag
    return default if config_value is None else config_value


def _output_root(args, cfg: RunConfig) -> Path:
    return Path(_pick(getattr(args, "output_dir", None), cfg.output_dir, os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_states(args, cfg: RunConfig):
    """Scenarios from ``--data DIR``, else the config's dataset, else ``<output>/data``."""
    if args.data is not None:
        d = Path(args.data)
    elif "dir" in cfg.dataset:
        d = Path(cfg.dataset["dir"])
    elif "csv" in cfg.dataset:
        if "map" not in cfg.dataset:
            raise ConfigError("config.dataset: 'csv' needs a 'map' document")
        states = []
        for track_file in cfg.dataset["csv"]:
            states += dataio.load_interaction_csv(track_file, cfg.dataset["map"])
        return states
    else:
        d = _output_root(args, cfg) / "data"
    if not (d / dataio.SCENES_FILE).exists() or not (d / dataio.MAP_FILE).exists():
        raise UsageError(f"{d}: no dataset ({dataio.SCENES_FILE} + {dataio.MAP_FILE}); run gen-data first")
    return dataio.load_dataset(d)


def split_states(states, args, cfg: RunConfig):
    name = _pick(getattr(args, "scenario", None), cfg.scenario)
    if name == "scene-generalization":
        return SPLITS[name](states, cfg.held_out)
    return SPLITS[name](states, cfg.test_fraction)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def recipe_name(arch: ArchConfig, kd: str, fusion) -> str:
    for name, r in MODEL_RECIPES.items():
        if r.arch == arch and r.kd == kd and r.fusion == fusion:
            return name
    return "custom"


def parse_checkpoint_args(specs) -> list[tuple[str | None, Path]]:
    out = []
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        out.append((name, Path(path)) if sep else (None, Path(spec)))
    return out


def load_models(args) -> dict[str, RrbModel]:
    """Checkpoints named ``NAME=PATH`` (checked against the recipe) or ``PATH`` (stored name)."""
    entries = parse_checkpoint_args(args.checkpoint)
    models_dir = getattr(args, "models_dir", None)
    if models_dir is not None:
        d = Path(models_dir)
        if not d.is_dir():
            raise UsageError(f"{d}: models directory does not exist")
        entries += [(None, p) for p in sorted(d.glob("*.npz"))]
    models = {}
    for name, path in entries:
        if name is not None and name not in MODEL_RECIPES:
            raise UsageError(f"unknown model name {name!r}; expected one of {sorted(MODEL_RECIPES)}")
        expect = None if name is None else MODEL_RECIPES[name].arch
        model = RrbModel.load(path, expect_arch=expect)
        stored = recipe_name(model.arch, model.kd, model.fusion)
        if name is None:
            name = stored
        elif stored != name:
            raise nn.CheckpointError(f"{path}: checkpoint holds a {stored!r} model, not {name!r}")
        if name in models:
            raise UsageError(f"two checkpoints for model {name!r}")
        models[name] = model
    return models


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    syn = dict(cfg.synthetic)
    n_scenes = _pick(args.n_scenes, syn.pop("n_scenes", None), 200)
    templates = _pick(args.templates.split(",") if args.templates else None, syn.pop("templates", None), list(TEMPLATES))
    agents = tuple(syn.pop("agents", (3, 6)))
    for t in templates:
        if t not in TEMPLATES:
            raise ConfigError(f"templates: unknown template {t!r}; expected one of {list(TEMPLATES)}")
    if n_scenes < 1:
        raise ConfigError("n_scenes: must be >= 1")
    if len(agents) != 2 or not 1 <= agents[0] <= agents[1]:
        raise ConfigError("agents: expected [min, max] with 1 <= min <= max")
    seed = _pick(args.seed, cfg.seed)
    out = Path(args.out) if args.out else _output_root(args, cfg) / "data"
    suite = generate_suite(n_scenes, seed, tuple(templates), agents, **syn)
    try:
        dataio.write_dataset(out, suite.scenes)
    except OSError as exc:
        raise UsageError(f"{out}: cannot write dataset ({exc.strerror or exc})") from exc
    cats = Counter(m.category for m, _, _ in suite.scenes)
    n_agents = sum(len(t) for _, t, _ in suite.scenes)
    n_scen = len(suite.scenarios())
    print(f"scenes: {len(suite.scenes)} (" + ", ".join(f"{c}={cats[c]}" for c in sorted(cats)) + ")")
    print(f"agents: {n_agents}; scenarios: {n_scen}")
    print(f"wrote {out / dataio.SCENES_FILE} and {out / dataio.MAP_FILE}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    m = dict(cfg.model)
    variant = _pick(args.variant, m.get("variant"), "rrb")
    if variant not in MODEL_RECIPES:
        raise ConfigError(f"variant: unknown model {variant!r}; expected one of {sorted(MODEL_RECIPES)}")
    recipe = MODEL_RECIPES[variant]
    fusion = _pick(args.fusion, m.get("fusion"), None if recipe.fusion is None else recipe.fusion.value)
    fusion = None if fusion in (None, "none") else FusionMode(fusion)
    modes = int(_pick(args.modes, m.get("modes"), recipe.arch.n_modes))
    confined = bool(m.get("confined", recipe.arch.confined))
    kd = m.get("kd", recipe.kd)
    arch = ArchConfig(n_modes=modes, use_kd=recipe.arch.use_kd, confined=confined)
    tc = dict(cfg.train)
    tc.setdefault("seed", cfg.seed)
    for key, flag in (("epochs", args.epochs), ("learning_rate", args.lr), ("batch_size", args.batch_size),
                      ("seed", args.seed)):
        if flag is not None:
            tc[key] = flag
    train_cfg = TrainConfig.from_dict(tc)

    train_states, _ = split_states(load_states(args, cfg), args, cfg)
    if not train_states:
        raise UsageError("training split is empty")
    name = args.name or recipe_name(arch, kd, fusion)
    out = Path(args.out) if args.out else _output_root(args, cfg) / "models"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"{out}: cannot create output directory ({exc.strerror or exc})") from exc
    log.info("training %s on %d scenarios", name, len(train_states))
    model = fit_and_train(train_states, arch, train_cfg, kd=kd, fusion=fusion,
                          sigma_cross=float(m.get("sigma_cross", 0.0)))
    ckpt = out / f"{name}.npz"
    model.save(ckpt, extra={"name": name, "train": train_cfg.to_dict(),
                            "scenario": _pick(args.scenario, cfg.scenario), "n_train": len(train_states)})
    curve = out / f"{name}_loss.csv"
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(model.loss_curve):
            w.writerow([e, repr(float(loss))])
    print(f"trained {name}: {len(train_states)} scenarios, {train_cfg.epochs} epochs, "
          f"final loss {model.loss_curve[-1]:.4f}")
    print(f"wrote {ckpt} and {curve}")
    return 0


def _select_pipelines(args, cfg: RunConfig, models: dict) -> list[str]:
    if args.pipelines:
        names = args.pipelines.split(",")
    elif cfg.pipelines is not None:
        names = list(cfg.pipelines)
    else:
        names = [p for p in DEFAULT_PIPELINES if PIPELINES[p].model is None or PIPELINES[p].model in models]
        names += [p for p in PIPELINES if p not in names and PIPELINES[p].model in models
                  and not PIPELINES[p].kd]
    if getattr(args, "no_mpc", False):
        names = [p for p in names if not get_pipeline(p).mpc]
    for p in names:
        pl = get_pipeline(p)
        if pl.model is not None and pl.model not in models:
            raise UsageError(f"pipeline {p!r} needs a {pl.model!r} checkpoint (pass --checkpoint {pl.model}=PATH)")
    return names


def cmd_eval(args, cfg: RunConfig) -> int:
    models = load_models(args)
    names = _select_pipelines(args, cfg, models)
    train_states, test_states = split_states(load_states(args, cfg), args, cfg)
    if not test_states:
        raise UsageError("test split is empty")
    prior = fit_kd_variance(train_states, "kd1") if train_states else None
    jobs = int(_pick(args.jobs, cfg.jobs))
    table = evaluate(test_states, names, models, prior, MpcConfig(**cfg.mpc), jobs=jobs)
    out = Path(args.out) if args.out else _output_root(args, cfg) / "eval"
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(table.to_json())
        (out / "metrics.txt").write_text(table.to_text())
    except OSError as exc:
        raise UsageError(f"{out}: cannot write report ({exc.strerror or exc})") from exc
    sys.stdout.write(table.to_text())
    print(f"wrote {out / 'metrics.json'} and {out / 'metrics.txt'}")
    return 0


def _predictions_for(names, states, models, prior, cfg: RunConfig) -> dict:
    return {n: run_pipeline(n, states, models, prior, MpcConfig(**cfg.mpc)) for n in names}


def cmd_predict(args, cfg: RunConfig) -> int:
    models = load_models(args)
    name = args.pipeline or ("rrb" if "rrb" in models else "kd1")
    pl = get_pipeline(name)
    if pl.model is not None and pl.model not in models:
        raise UsageError(f"pipeline {name!r} needs a {pl.model!r} checkpoint")
    states = load_states(args, cfg)
    train_states, test_states = split_states(states, args, cfg)
    chosen = {"test": test_states, "train": train_states, "all": states}[args.split]
    chosen = sorted(chosen, key=lambda s: s.key)
    if args.limit is not None:
        chosen = chosen[:args.limit]
    prior = fit_kd_variance(train_states, "kd1") if train_states else None
    preds = run_pipeline(name, chosen, models, prior, MpcConfig(**cfg.mpc))
    doc = {"format": "rrb-predictions/1", "pipeline": name, "predictions": [
        {"key": s.key, "scene_id": s.map.scene_id, "agent_id": s.ego.agent_id, "anchor_time": s.anchor_time,
         "means": p.means.tolist(), "variances": None if p.variances is None else p.variances.tolist(),
         "probs": p.probs.tolist()} for s, p in zip(chosen, preds)]}
    out = Path(args.out) if args.out else _output_root(args, cfg) / "predictions.json"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, sort_keys=True) + "\n")
    except OSError as exc:
        raise UsageError(f"{out}: cannot write predictions ({exc.strerror or exc})") from exc
    print(f"{name}: {len(preds)} predictions -> {out}")
    return 0


def read_predictions(path) -> tuple[str, dict]:
    """``(pipeline, {scenario key: MultiModalPrediction})`` from a ``predict`` output file."""
    from .metrics import MultiModalPrediction

    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not a JSON predictions file ({exc})") from exc
    if doc.get("format") != "rrb-predictions/1":
        raise ParseError(f"{path}: not a predictions file")
    return doc["pipeline"], {r["key"]: MultiModalPrediction(r["means"], r["variances"], r["probs"])
                             for r in doc["predictions"]}


def cmd_render(args, cfg: RunConfig) -> int:
    models = load_models(args)
    states = load_states(args, cfg)
    if args.key is not None:
        match = [s for s in states if s.key == args.key]
        if not match:
            raise UsageError(f"no scenario with key {args.key!r}")
        state = match[0]
    else:
        _, test_states = split_states(states, args, cfg)
        state = min(test_states or states, key=lambda s: s.key)
    if args.pipelines:
        names = args.pipelines.split(",")
    elif args.predictions:
        names = []
    else:
        names = ["kd1"] + sorted(p for p in PIPELINES if PIPELINES[p].model in models and not PIPELINES[p].mpc
                                 and PIPELINES[p].kd is None and PIPELINES[p].fusion is None)
    train_states, _ = split_states(states, args, cfg)
    prior = fit_kd_variance(train_states, "kd1") if train_states else None
    preds = {}
    for n in names:
        pl = get_pipeline(n)
        if pl.model is not None and pl.model not in models:
            raise UsageError(f"pipeline {n!r} needs a {pl.model!r} checkpoint")
        preds[n] = run_pipeline(n, [state], models, prior, MpcConfig(**cfg.mpc))[0]
    for path in args.predictions or []:
        name, by_key = read_predictions(path)
        if state.key not in by_key:
            raise UsageError(f"{path}: no prediction for scenario {state.key!r}")
        preds[name] = by_key[state.key]
    out = Path(args.out) if args.out else _output_root(args, cfg) / "figure.svg"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_figure(out, state, preds)
    except OSError as exc:
        raise UsageError(f"{out}: cannot write figure ({exc.strerror or exc})") from exc
    print(f"rendered {state.key} ({', '.join(preds) or 'no predictions'}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--output-dir", help=f"default output root (else ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory written by gen-data")
    data.add_argument("--scenario", choices=sorted(SPLITS), help="train/test split")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH",
                      help="trained model; NAME checks it against a known variant (repeatable)")
    ckpt.add_argument("--models-dir", help="load every checkpoint in this directory")

    p = argparse.ArgumentParser(prog="rrbpred", description="Residual trajectory prediction on lane maps.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--templates", help=f"comma-separated subset of {','.join(TEMPLATES)}")
    g.add_argument("--out", help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, data], help="fit the KD variance prior and train a network")
    t.add_argument("--variant", choices=sorted(MODEL_RECIPES))
    t.add_argument("--fusion", choices=[m.value for m in FusionMode] + ["none"])
    t.add_argument("--modes", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--name", help="checkpoint name (default: the variant matching the options)")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, data, ckpt], help="score pipelines on the test split")
    e.add_argument("--pipelines", help=f"comma-separated subset of {','.join(PIPELINES)}")
    e.add_argument("--no-mpc", action="store_true", help="drop pipelines with the MPC refiner")
    e.add_argument("--jobs", type=int)
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common, data, ckpt], help="write predictions as JSON")
    r.add_argument("--pipeline")
    r.add_argument("--split", choices=("test", "train", "all"), default="test")
    r.add_argument("--limit", type=int)
    r.add_argument("--out", help="output file")
    r.set_defaults(func=cmd_predict)

    f = sub.add_parser("render", parents=[common, data, ckpt], help="draw one scenario as SVG")
    f.add_argument("--key", help="scenario key scene_id/agent_id/anchor_time (default: first test scenario)")
    f.add_argument("--pipelines", help="comma-separated pipelines to draw")
    f.add_argument("--predictions", action="append", help="predictions file from `predict` (repeatable)")
    f.add_argument("--out", help="output .svg file")
    f.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ParseError, nn.CheckpointError, RenderError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
