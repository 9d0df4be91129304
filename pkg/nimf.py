"""
Command-line entry point: build splits, train base models, compute scores,
fuse, evaluate, interpolate and report.
"""
import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from config import Config
from core.data import (Dataset, SplitPlan, dirichlet_split, full_split, load_idx, sample_rows, sharded_split,
                       synthetic_blobs, train_test_split)
from core.errors import ConfigError, FusionNotApplicableError, NimfError
from core.manifest_loader import ManifestLoader, RunManifest
from core.metrics import Run, comparison_report, evaluate_run, interpolation_curve
from core.model_io import load_model, save_model
from core.network import ModelSpec, mlp
from core.report_writer import ReportWriter
from core.training import FINETUNE_DEFAULTS, TrainConfig, evaluate, finetune, train
from fusion.attribution import ImportanceVector, compute_scores, scores_from_frame, scores_to_frame
from fusion.baselines import last_layer_kd, vanilla_average
from fusion.orchestrator import FusionOrchestrator
from fusion.settings import FusionConfig, GRADIENT_PRESETS
from utils.logger import LEVELS, set_global_level, setup_logger

logger = setup_logger(__name__, Config.LOG_LEVEL)

loader = ManifestLoader(Config.DOCS_DIR)


def load_datasets(manifest: RunManifest, seed: int) -> Tuple[Dataset, Dataset]:
    """(train, test) for a manifest's dataset section; synthetic data is drawn from the run seed."""
    spec = manifest.dataset
    n_classes = int(spec.get("n_classes", 10))
    test_fraction = float(spec.get("test_fraction", 0.2))
    if spec.get("kind", "synthetic") == "idx":
        try:
            train_set = load_idx(spec["train_images"], spec["train_labels"], n_classes)
        except KeyError as e:
            raise ConfigError(f"idx dataset needs {e.args[0]}") from e
        if spec.get("test_images") and spec.get("test_labels"):
            return train_set, load_idx(spec["test_images"], spec["test_labels"], n_classes)
        return train_test_split(train_set, test_fraction, seed)

    full = synthetic_blobs(n_classes, int(spec.get("dim", 20)), int(spec.get("per_class", 200)),
                           float(spec.get("spread", 1.0)), seed, float(spec.get("center_scale", 4.0)))
    return train_test_split(full, test_fraction, seed)


def make_split(manifest: RunManifest, train_set: Dataset, seed: int) -> SplitPlan:
    split = manifest.split
    n_models = int(split["n_models"])
    if split["regime"] == "dirichlet":
        return dirichlet_split(train_set.labels, n_models, float(split.get("alpha_min", 1.0)),
                               float(split.get("min_max_ratio", 0.2)), seed)
    if split["regime"] == "sharded":
        return sharded_split(train_set.labels, n_models, seed, train_set.n_classes)
    if split["regime"] == "full":
        return full_split(len(train_set), n_models, seed)
    # duplicate: one model trained on everything, copied n_models times
    return SplitPlan("duplicate", seed, {"n_models": n_models}, [np.arange(len(train_set))])


def model_seed(seed: int, index: int) -> int:
    return seed * 1000 + index


def train_base(manifest: RunManifest, data: Dataset, seed: int, index: int,
               log_path: Optional[Path] = None) -> ModelSpec:
    """Train base model `index` of a run on its share of the data."""
    cfg = TrainConfig.from_mapping({**manifest.training, "seed": model_seed(seed, index)})
    hidden = [int(w) for w in manifest.model["hidden"]]
    init = mlp(data.dim, hidden, data.n_classes, seed=model_seed(seed, index),
               activation=manifest.model.get("activation", "relu"))
    logger.info("Training base model %d on %d samples", index, len(data))
    return train(init, data, cfg, log_path=log_path)


def fusion_config(run: Dict[str, Any], seed: int) -> FusionConfig:
    """FusionConfig for one manifest fusion entry; presets come from docs/presets when present."""
    mapping = {k: v for k, v in run.items() if k != "name"}
    preset = mapping.pop("preset", None)
    values: Dict[str, Any] = {}
    if preset is not None:
        try:
            values.update(loader.load_preset(preset))
        except FileNotFoundError:
            if preset not in GRADIENT_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            values["preset"] = preset
    values.update(mapping)
    values["seed"] = seed
    return FusionConfig.from_mapping(values)


def _fusion_samples(args, manifest: Optional[RunManifest] = None) -> int:
    if getattr(args, "fusion_samples", None):
        return int(args.fusion_samples)
    if manifest is not None and manifest.fusion_samples:
        return int(manifest.fusion_samples)
    return Config.fusion_samples()


def _seed(args) -> int:
    return Config.seed() if args.seed is None else int(args.seed)


def _out_path(value: Optional[str], default: str) -> Path:
    return Path(value) if value else Config.out_dir() / default


def cmd_split(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    train_set, _ = load_datasets(manifest, seed)
    plan = make_split(manifest, train_set, seed)
    if plan.regime != "duplicate":
        plan.validate(len(train_set), cover=True)
    plan.save(_out_path(args.out, f"{manifest.name}/seed{seed}/split.json"))
    return 0


def cmd_train(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    train_set, test_set = load_datasets(manifest, seed)
    data = train_set
    if args.split:
        plan = SplitPlan.load(args.split)
        if not 0 <= args.index < plan.n_models:
            raise ConfigError(f"--index {args.index} is outside the split's {plan.n_models} models")
        data = train_set.subset(plan.indices[args.index])
    out = _out_path(args.out, f"{manifest.name}/seed{seed}/base_{args.index}.nimf")
    model = train_base(manifest, data, seed, args.index, out.with_suffix(".log.csv"))
    save_model(model, out)
    accuracy, loss = evaluate(model, test_set)
    logger.info("Base model %d: test accuracy %.4f, loss %.4f", args.index, accuracy, loss)
    return 0


def cmd_scores(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    train_set, _ = load_datasets(manifest, seed)
    samples = sample_rows(train_set, _fusion_samples(args, manifest), seed)
    vectors = []
    for m, path in enumerate(args.models):
        model = load_model(path)
        vectors.extend(compute_scores(args.kind, model, samples.features, samples.labels,
                                      model_id=f"m{m}", steps=args.steps, normalize=args.normalize))
    ReportWriter.write_table(scores_to_frame(vectors), _out_path(args.out, f"{manifest.name}/seed{seed}/scores.csv"))
    return 0


def _class_counts(plan: Optional[SplitPlan], train_set: Dataset, n_models: int) -> Optional[List[np.ndarray]]:
    if plan is None:
        return None
    if plan.regime == "duplicate":
        return [train_set.class_counts()] * n_models
    return [train_set.subset(idx).class_counts() for idx in plan.indices]


def cmd_fuse(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    train_set, test_set = load_datasets(manifest, seed)
    models = [load_model(path) for path in args.models]
    samples = sample_rows(train_set, _fusion_samples(args, manifest), seed)

    run: Dict[str, Any] = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            run.update(yaml.safe_load(f) or {})
    if args.preset:
        run["preset"] = args.preset
    if args.variant:
        run["variant"] = args.variant
    if args.widths:
        run["widths"] = args.widths
    if args.score_kind:
        run["score_kind"] = args.score_kind
    cfg = fusion_config(run, seed)

    scores = None
    if args.scores:
        by_model = scores_from_frame(pd.read_csv(args.scores))
        missing = [f"m{m}" for m in range(len(models)) if f"m{m}" not in by_model]
        if missing:
            raise ConfigError(f"score file {args.scores} has no rows for model(s) {', '.join(missing)}")
        scores = [by_model[f"m{m}"] for m in range(len(models))]
    plan = SplitPlan.load(args.split) if args.split else None

    orchestrator = FusionOrchestrator(cfg)
    fused, report = orchestrator.fuse(models, samples.features, samples.labels, scores,
                                      _class_counts(plan, train_set, len(models)), test_set)
    out = _out_path(args.out, f"{manifest.name}/seed{seed}/fused_{cfg.variant}.nimf")
    save_model(fused, out)
    report.save(args.report or out.with_suffix(".report.json"))
    if args.clusters:
        ReportWriter.write_table(orchestrator.cluster_frame(), args.clusters)
    print(pd.DataFrame([vars(level) for level in report.levels]).to_string(index=False))
    return 0


def cmd_eval(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    _, test_set = load_datasets(manifest, seed)
    models = [load_model(path) for path in args.models]
    names = args.names or [Path(p).stem for p in args.models]
    if len(names) != len(models):
        raise ConfigError("--names must give one name per model")

    rows = [{"method": name, "seed": seed, **evaluate_run(model, test_set)} for name, model in zip(names, models)]
    if args.ensemble:
        rows.append({"method": "ensemble", "seed": seed, **evaluate_run(models, test_set)})
    frame = pd.DataFrame(rows, columns=["method", "seed", "accuracy", "loss"])
    print(frame.to_string(index=False))
    if args.out:
        ReportWriter.write_table(frame, args.out)
    return 0


def cmd_report(args) -> int:
    results = pd.concat([pd.read_csv(path) for path in args.results], ignore_index=True)
    report = comparison_report([], results=results)
    ReportWriter.write_comparison(report, _out_path(args.out, "report"))
    print(report.to_text())
    return 0


def cmd_interpolate(args) -> int:
    manifest = loader.load_manifest(args.manifest)
    seed = _seed(args)
    _, test_set = load_datasets(manifest, seed)
    start = load_model(args.a)
    out_dir = _out_path(args.out, f"{manifest.name}/seed{seed}/interpolation")
    for path in args.b:
        curve = interpolation_curve(start, load_model(path), test_set, args.points)
        curve.save(Path(out_dir) / f"{Path(args.a).stem}__{Path(path).stem}.csv")
        logger.info("Barrier %s -> %s: %.4f", args.a, path, curve.barrier())
    return 0


def _score_runs(manifest: RunManifest, seed: int, models: List[ModelSpec], samples: Dataset,
                out_dir: Path) -> List[List[List[ImportanceVector]]]:
    """Scores for every fusion run, written per base model; runs with equal score settings share them."""
    computed: Dict[Tuple, List[List[ImportanceVector]]] = {}
    per_run = []
    for run in manifest.fusion:
        cfg = fusion_config(run, seed)
        key = (cfg.score_kind, cfg.boundary, cfg.attribution_steps, cfg.normalize_scores)
        if key not in computed:
            tag = cfg.score_kind
            if any(k[0] == cfg.score_kind for k in computed):
                tag = f"{cfg.score_kind}-{run['name']}"
            computed[key] = FusionOrchestrator(cfg).model_scores(models, samples.features, samples.labels)
            for i, vectors in enumerate(computed[key]):
                ReportWriter.write_table(scores_to_frame(vectors), out_dir / f"base_{i}.{tag}.scores.csv")
        per_run.append(computed[key])
    return per_run


def _fuse_run(run: Dict[str, Any], seed: int, models: List[ModelSpec], samples: Dataset,
              scores: List[List[ImportanceVector]], counts: List[np.ndarray], test_set: Dataset,
              out_dir: Path) -> Optional[ModelSpec]:
    cfg = fusion_config(run, seed)
    orchestrator = FusionOrchestrator(cfg)
    try:
        fused, report = orchestrator.fuse(models, samples.features, samples.labels, scores, counts, test_set)
    except FusionNotApplicableError as e:
        logger.warning("%s not applicable: %s", run["name"], e)
        return None
    save_model(fused, out_dir / f"fused_{run['name']}.nimf")
    report.save(out_dir / f"fused_{run['name']}.report.json")
    ReportWriter.write_table(orchestrator.cluster_frame(), out_dir / f"fused_{run['name']}.clusters.csv")
    return fused


def run_seed(manifest: RunManifest, seed: int, out_dir: Path, fusion_samples: int) -> List[Run]:
    """split -> train -> scores -> fuse -> baselines for one seed; returns the runs to evaluate."""
    train_set, test_set = load_datasets(manifest, seed)
    plan = make_split(manifest, train_set, seed)
    plan.save(out_dir / "split.json")
    n_models = int(manifest.split["n_models"])

    if plan.regime == "duplicate":
        model = train_base(manifest, train_set, seed, 0, out_dir / "base_0.log.csv")
        models = [model] * n_models
    else:
        plan.validate(len(train_set), cover=True)
        models = [train_base(manifest, train_set.subset(idx), seed, i, out_dir / f"base_{i}.log.csv")
                  for i, idx in enumerate(plan.indices)]
    for i, model in enumerate(models):
        save_model(model, out_dir / f"base_{i}.nimf")

    samples = sample_rows(train_set, fusion_samples, seed)
    counts = _class_counts(plan, train_set, n_models)
    runs = [Run("base", model, seed) for model in models]

    if "vanilla" in manifest.baselines:
        same = all(m.architecture() == models[0].architecture() for m in models)
        runs.append(Run("vanilla", vanilla_average(models) if same else None, seed))
    if "ensemble" in manifest.baselines:
        runs.append(Run("ensemble", list(models), seed))
    if "kd" in manifest.baselines:
        best = max(models, key=lambda m: evaluate(m, train_set)[0])
        kd = manifest.kd
        distilled = last_layer_kd(models, best, samples.features, epochs=int(kd.get("epochs", 100)),
                                  lr=float(kd.get("lr", 1e-3)), batch_size=int(kd.get("batch_size", 32)),
                                  seed=seed)
        save_model(distilled, out_dir / "kd.nimf")
        runs.append(Run("kd", distilled, seed))

    for run, scores in zip(manifest.fusion, _score_runs(manifest, seed, models, samples, out_dir)):
        fused = _fuse_run(run, seed, models, samples, scores, counts, test_set, out_dir)
        runs.append(Run(run["name"], fused, seed))
        if manifest.finetune_epochs and fused is not None:
            cfg = TrainConfig.from_mapping({**FINETUNE_DEFAULTS.to_dict(), "epochs": manifest.finetune_epochs,
                                            "seed": seed})
            tuned = finetune(fused, train_set, cfg, log_path=out_dir / f"fused_{run['name']}.ft.log.csv")
            runs.append(Run(f"{run['name']}+ft", tuned, seed))

    evaluated = comparison_report(runs, test_set)
    ReportWriter.write_table(evaluated.rows, out_dir / "results.csv")
    return runs


def cmd_experiment(args) -> int:
    manifest_path = loader.resolve(args.manifest, "manifests")
    manifest = loader.load_manifest(manifest_path)
    out_root = Path(args.out) if args.out else Path(manifest.out_dir or Config.out_dir() / manifest.name)
    fusion_samples = _fusion_samples(args, manifest)

    frames = []
    for seed in manifest.seeds:
        seed_dir = out_root / f"seed{seed}"
        logger.info("Experiment %s: seed %d", manifest.name, seed)
        run_seed(manifest, seed, seed_dir, fusion_samples)
        frames.append(pd.read_csv(seed_dir / "results.csv"))

    report = comparison_report([], results=pd.concat(frames, ignore_index=True))
    ReportWriter.write_comparison(report, out_root)

    text = manifest_path.read_text(encoding="utf-8")
    stamp = {
        "manifest": yaml.safe_load(text),
        "manifest_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "fusion_samples": fusion_samples,
        "seeds": manifest.seeds,
    }
    (out_root / "run.json").write_text(json.dumps(stamp, indent=2, sort_keys=True), encoding="utf-8")
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nimf", description="Neuron-interpolation model fusion for MLPs")
    parser.add_argument("--log-level", default=None, type=str.upper,
                        choices=LEVELS)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_run(p):
        p.add_argument("--manifest", required=True, help="Manifest name under docs/manifests or a path")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = with_run(sub.add_parser("split", help="Partition the training data across base models"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = with_run(sub.add_parser("train", help="Train one base model"))
    p.add_argument("--split", help="Split plan JSON; the full training set when omitted")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = with_run(sub.add_parser("scores", help="Per-neuron importance scores"))
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--kind", choices=["uniform", "conductance", "deeplift"], default="conductance")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--fusion-samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scores)

    p = with_run(sub.add_parser("fuse", help="Fuse base models"))
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--config", help="YAML fusion config")
    p.add_argument("--preset", help="setting1 or setting2")
    p.add_argument("--variant", choices=["hf_linear", "kf_linear", "kf_gradient"])
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--score-kind", choices=["uniform", "conductance", "deeplift"])
    p.add_argument("--scores", help="Score CSV from the scores command")
    p.add_argument("--split", help="Split plan JSON, for head weights")
    p.add_argument("--fusion-samples", type=int)
    p.add_argument("--clusters", help="Write the cluster assignment CSV here")
    p.add_argument("--report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fuse)

    p = with_run(sub.add_parser("eval", help="Accuracy and loss on the test set"))
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--ensemble", action="store_true", help="Also evaluate the ensemble of the models")
    p.add_argument("--out", help="Write per-seed rows (.csv, .json or .xlsx)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Aggregate per-seed result rows")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = with_run(sub.add_parser("interpolate", help="Loss and accuracy along weight-space segments"))
    p.add_argument("--a", required=True, help="Model at lambda = 0")
    p.add_argument("--b", nargs="+", required=True, help="Models at lambda = 1")
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("experiment", help="split -> train -> scores -> fuse -> eval -> report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fusion-samples", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        Config.validate()
        set_global_level(args.log_level or Config.LOG_LEVEL)
        return args.func(args)
    except (NimfError, OSError, ValueError, yaml.YAMLError) as e:
        message = " ".join(str(e).split())
        print(f"nimf: error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
