# preview_cli.py

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from data_pipeline.camera import default_rig
from data_pipeline.dataio import DatasetHandle, DatasetSplit, load_manifest, partition, subsample_labeled, subsample_validation
from data_pipeline.synthgen import KinematicModel, PoseSampling, generate_dataset
from errors import ArgumentError, ConfigurationError, DatasetIOError, NumericalFailure, PreviewError, format_validation_error
from eval_pipeline.analysis import DEFAULT_NEIGHBORS, DEFAULT_TOP_SAMPLES, dataset_neighbors, prediction_grid, top_activating
from eval_pipeline.metrics import evaluate_predictions, load_predictions, write_eval_report, write_predictions
from feature_pipeline.preprocess import PreprocessConfig
from model_pipeline.trainer import (
    ProbeConfig,
    TrainConfig,
    adversarial_defaults,
    latent_size_sweep,
    linear_probe,
    predict_joints,
    train,
)
from settings import configure_logging, deterministic_requested

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class SynthSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(1000, ge=1)
    labeled_fraction: float = Field(1.0, ge=0, le=1)
    seed: int = 0
    out: Optional[str] = None
    noise_std_mm: float = Field(0.0, ge=0)
    workers: int = Field(1, ge=1)
    resolution: int = Field(64, ge=1)
    focal_px: float = Field(80.0, gt=0)
    distance_mm: float = Field(500.0, gt=0)
    azimuth_deg: float = 60.0
    model: KinematicModel = Field(default_factory=KinematicModel)
    sampling: PoseSampling = Field(default_factory=PoseSampling)


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    partition_seed: int = 0
    test_fraction: float = Field(0.1, ge=0, lt=1)
    validation_fraction: float = Field(0.1, ge=0, lt=1)
    n: Optional[int] = Field(None, ge=0)
    subsample_seed: int = 0
    split: Literal["test", "validation", "all"] = "test"


class ProbeSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoints: List[str] = Field(default_factory=list)
    n: int = Field(100, ge=1)
    repeats: int = Field(10, ge=1)
    seed: int = 0
    settings: ProbeConfig = Field(default_factory=ProbeConfig)


class EvalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: Optional[str] = None
    predictions: Optional[str] = None


class AnalyzeSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["nn", "neurons", "grid"] = "nn"
    k: Optional[int] = Field(None, ge=0)
    neuron: int = Field(0, ge=0)
    count: int = Field(16, ge=1)


class RunConfig(BaseModel):
    """Everything one invocation needs; the JSON config file has this schema."""

    model_config = ConfigDict(extra="forbid")

    run_dir: str = "runs/default"
    data: DataSection = Field(default_factory=DataSection)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    analyze: AnalyzeSection = Field(default_factory=AnalyzeSection)


def _set_dotted(target: Dict[str, Any], dotted: str, value: Any):
    *parents, leaf = dotted.split(".")
    for key in parents:
        target = target.setdefault(key, {})
    target[leaf] = value


def _append(parser, *flags, dest, **kwargs):
    """Flags default to None so only values given on the command line override the config file."""
    parser.add_argument(*flags, dest=dest, default=None, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preview", description="Cross-view pretraining and semi-supervised depth pose toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub, dataset: bool = True):
        sub.add_argument("--config", default=None, help="JSON run configuration; flags override its values")
        _append(sub, "--run-dir", dest="run_dir", help="Output directory of this run")
        if dataset:
            _append(sub, "--dataset", dest="data.dataset", help="Dataset directory or manifest.json")
            _append(sub, "--partition-seed", dest="data.partition_seed", type=int)
            _append(sub, "--test-fraction", dest="data.test_fraction", type=float)
            _append(sub, "--validation-fraction", dest="data.validation_fraction", type=float)
            _append(sub, "--crop-cube-side", dest="preprocess.crop_cube_side", type=float)
            _append(sub, "--depth-range", dest="preprocess.depth_range", type=float)
            _append(sub, "--foreground-band", dest="preprocess.foreground_band", type=float)

    synth = subparsers.add_parser("synth-gen", help="Render a synthetic two-view dataset")
    common(synth, dataset=False)
    _append(synth, "--n", dest="synth.n", type=int)
    _append(synth, "--labeled-fraction", dest="synth.labeled_fraction", type=float)
    _append(synth, "--seed", dest="synth.seed", type=int)
    _append(synth, "--out", dest="synth.out")
    _append(synth, "--noise-std-mm", dest="synth.noise_std_mm", type=float)
    _append(synth, "--workers", dest="synth.workers", type=int)
    _append(synth, "--resolution", dest="synth.resolution", type=int)
    _append(synth, "--azimuth-deg", dest="synth.azimuth_deg", type=float)

    train_cmd = subparsers.add_parser("train", help="Pretrain or train a pose model")
    common(train_cmd)
    _append(train_cmd, "--mode", dest="train.mode", choices=["preview", "autoencoder", "semi", "semi_adversarial", "supervised"])
    _append(train_cmd, "--n", dest="data.n", type=int, help="Keep n labeled samples, the rest become unlabeled")
    _append(train_cmd, "--subsample-seed", dest="data.subsample_seed", type=int)
    _append(train_cmd, "--epochs", dest="train.epochs", type=int)
    _append(train_cmd, "--batch-size", dest="train.batch_size", type=int)
    _append(train_cmd, "--lr", dest="train.learning_rate", type=float)
    _append(train_cmd, "--seed", dest="train.seed", type=int)
    _append(train_cmd, "--d-t", dest="train.network.d_T", type=int)
    _append(train_cmd, "--base-channels", dest="train.network.base_channels", type=int)
    _append(train_cmd, "--condition", dest="train.network.discriminator_condition", choices=["none", "input", "pose", "input_pose"])
    _append(train_cmd, "--lambda-l", dest="train.weights.lambda_l", type=float)
    _append(train_cmd, "--lambda-a", dest="train.weights.lambda_a", type=float)
    _append(train_cmd, "--huber-epsilon", dest="train.weights.huber_epsilon", type=float)
    _append(train_cmd, "--com-jitter-mm", dest="preprocess.com_jitter_mm", type=float)
    _append(train_cmd, "--patience", dest="train.patience", type=int)
    _append(train_cmd, "--device", dest="train.device")
    train_cmd.add_argument("--no-early-stopping", dest="train.early_stopping", action="store_const", const=False, default=None)
    train_cmd.add_argument("--deterministic", dest="train.deterministic", action="store_const", const=True, default=None)

    probe = subparsers.add_parser("probe", help="Linear probe of frozen encoders")
    common(probe)
    _append(probe, "--checkpoint", dest="probe.checkpoints", action="append", help="Repeat for a latent-size sweep")
    _append(probe, "--n", dest="probe.n", type=int)
    _append(probe, "--repeats", dest="probe.repeats", type=int)
    _append(probe, "--seed", dest="probe.seed", type=int)
    _append(probe, "--probe-steps", dest="probe.settings.steps", type=int)
    _append(probe, "--probe-lr", dest="probe.settings.learning_rate", type=float)

    predict = subparsers.add_parser("predict", help="Export joint predictions of a trained model")
    common(predict)
    _append(predict, "--checkpoint", dest="eval.checkpoint")
    _append(predict, "--split", dest="data.split", choices=["test", "validation", "all"])
    _append(predict, "--out", dest="eval.predictions")

    evaluate = subparsers.add_parser("eval", help="Score a predictions file")
    common(evaluate)
    _append(evaluate, "--predictions", dest="eval.predictions")
    _append(evaluate, "--split", dest="data.split", choices=["test", "validation", "all"])

    analyze = subparsers.add_parser("analyze", help="Latent-space introspection")
    common(analyze)
    _append(analyze, "--mode", dest="analyze.mode", choices=["nn", "neurons", "grid"])
    _append(analyze, "--checkpoint", dest="eval.checkpoint")
    _append(analyze, "--k", dest="analyze.k", type=int)
    _append(analyze, "--neuron", dest="analyze.neuron", type=int)
    _append(analyze, "--count", dest="analyze.count", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file with command-line flags (flags win) and validate once."""
    merged: Dict[str, Any] = {}
    if args.config:
        try:
            with open(args.config, "r") as f:
                merged = json.load(f)
        except FileNotFoundError as e:
            raise DatasetIOError(f"config file {args.config} does not exist") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {args.config} is not valid JSON: {e}") from e
    for dest, value in vars(args).items():
        if value is None or dest in ("command", "config"):
            continue
        _set_dotted(merged, dest, value)
    if deterministic_requested():
        _set_dotted(merged, "train.deterministic", True)

    try:
        return RunConfig(**merged)
    except ValidationError as e:
        field, message = format_validation_error(e)
        raise ConfigurationError(f"{field}: {message}") from e


def write_snapshot(config: RunConfig, command: str, dataset: Optional[DatasetHandle] = None, seeds: Optional[Dict] = None):
    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "command": command,
        "config": config.model_dump(mode="json"),
        "manifest_sha256": dataset.manifest_hash() if dataset is not None else None,
        "seeds": seeds or {},
    }
    with open(run_dir / "config.json", "w") as f:
        json.dump(snapshot, f, indent=2)


def _open_dataset(config: RunConfig) -> DatasetHandle:
    if not config.data.dataset:
        raise ConfigurationError("data.dataset: a dataset path is required")
    return load_manifest(config.data.dataset)


def _base_split(config: RunConfig, dataset: DatasetHandle) -> DatasetSplit:
    return partition(dataset, config.data.test_fraction, config.data.validation_fraction, config.data.partition_seed)


def _split_ids(config: RunConfig, dataset: DatasetHandle) -> List[str]:
    if config.data.split == "all":
        return dataset.labeled_ids()
    split = _base_split(config, dataset)
    return split.test if config.data.split == "test" else split.validation


def run_synth_gen(config: RunConfig) -> int:
    synth = config.synth
    if not synth.out:
        raise ConfigurationError("synth.out: an output directory is required")
    rig = default_rig(synth.resolution, synth.focal_px, synth.distance_mm, synth.azimuth_deg)
    generate_dataset(
        synth.model,
        rig,
        synth.n,
        synth.labeled_fraction,
        synth.seed,
        synth.out,
        sampling=synth.sampling,
        noise_std_mm=synth.noise_std_mm,
        workers=synth.workers,
    )
    return EXIT_OK


def run_train(config: RunConfig) -> int:
    dataset = _open_dataset(config)
    split = _base_split(config, dataset)
    if config.data.n is not None:
        pool = len(split.train_labeled)
        if config.data.n >= pool:
            logger.warning(f"--n {config.data.n} covers the whole labeled pool of {pool}, keeping every label")
        else:
            split = subsample_labeled(split, config.data.n, config.data.subsample_seed)
        split = subsample_validation(split, seed=config.data.subsample_seed)

    train_config = config.train
    weights, network = train_config.weights, train_config.network
    if train_config.mode == "semi_adversarial":
        lambda_a, condition = adversarial_defaults(len(split.train_labeled))
        update_weights = {} if "lambda_a" in weights.model_fields_set else {"lambda_a": lambda_a}
        update_network = {} if "discriminator_condition" in network.model_fields_set else {"discriminator_condition": condition}
        if update_weights or update_network:
            logger.info(f"Adversarial defaults for n={len(split.train_labeled)}: {update_weights} {update_network}")
            train_config = train_config.model_copy(
                update={
                    "weights": weights.model_copy(update=update_weights),
                    "network": network.model_copy(update=update_network),
                }
            )
            config = config.model_copy(update={"train": train_config})

    seeds = {
        "partition": config.data.partition_seed,
        "subsample": config.data.subsample_seed,
        "train": train_config.seed,
    }
    write_snapshot(config, "train", dataset, seeds)
    train(dataset, split, train_config, config.run_dir, config.preprocess)
    return EXIT_OK


def run_probe(config: RunConfig) -> int:
    probe = config.probe
    if not probe.checkpoints:
        raise ConfigurationError("probe.checkpoints: at least one --checkpoint is required")
    dataset = _open_dataset(config)
    split = _base_split(config, dataset)
    write_snapshot(config, "probe", dataset, {"partition": config.data.partition_seed, "probe": probe.seed})
    run_dir = Path(config.run_dir)

    if len(probe.checkpoints) == 1:
        report = linear_probe(
            probe.checkpoints[0], dataset, probe.n, probe.repeats, probe.settings, split, config.preprocess, probe.seed
        )
        with open(run_dir / "probe_report.json", "w") as f:
            f.write(report.model_dump_json(indent=2))
        return EXIT_OK

    sweep = latent_size_sweep(probe.checkpoints, dataset, probe.n, probe.repeats, probe.settings, split, probe.seed)
    sweep.to_csv(run_dir / "latent_sweep.csv", index=False)
    logger.success(f"Latent-size sweep over {len(sweep)} checkpoints written to {run_dir / 'latent_sweep.csv'}")
    return EXIT_OK


def run_predict(config: RunConfig) -> int:
    if not config.eval.checkpoint:
        raise ConfigurationError("eval.checkpoint: --checkpoint is required")
    dataset = _open_dataset(config)
    ids = _split_ids(config, dataset)
    write_snapshot(config, "predict", dataset, {"partition": config.data.partition_seed})
    predictions = predict_joints(config.eval.checkpoint, dataset, ids, config.preprocess)
    out = config.eval.predictions or str(Path(config.run_dir) / "predictions.json")
    write_predictions(out, predictions)
    logger.success(f"{len(predictions)} predictions written to {out}")
    return EXIT_OK


def run_eval(config: RunConfig) -> int:
    if not config.eval.predictions:
        raise ConfigurationError("eval.predictions: --predictions is required")
    dataset = _open_dataset(config)
    ids = _split_ids(config, dataset)
    write_snapshot(config, "eval", dataset, {"partition": config.data.partition_seed})
    ground_truth = {sample_id: np.asarray(dataset.entry(sample_id).joints, dtype=np.float64) for sample_id in ids}
    report = evaluate_predictions(load_predictions(config.eval.predictions), ground_truth, ids)
    write_eval_report(report, config.run_dir)
    return EXIT_OK


def run_analyze(config: RunConfig) -> int:
    checkpoint = config.eval.checkpoint
    if not checkpoint:
        raise ConfigurationError("eval.checkpoint: --checkpoint is required")
    dataset = _open_dataset(config)
    split = _base_split(config, dataset)
    write_snapshot(config, "analyze", dataset, {"partition": config.data.partition_seed})
    run_dir = Path(config.run_dir)
    analyze = config.analyze

    if analyze.mode == "grid":
        prediction_grid(checkpoint, dataset, (split.test or dataset.ids)[: analyze.count], run_dir / "grid.png", config.preprocess)
        return EXIT_OK

    if analyze.mode == "nn":
        k = DEFAULT_NEIGHBORS if analyze.k is None else analyze.k
        results = dataset_neighbors(checkpoint, dataset, split.test, split.training_ids, k, config.preprocess)
        out = run_dir / "neighbors.json"
    else:
        k = DEFAULT_TOP_SAMPLES if analyze.k is None else analyze.k
        ids = split.validation or dataset.ids
        results = top_activating(checkpoint, dataset, analyze.neuron, k, ids, config.preprocess)
        out = run_dir / "neurons.json"
    with open(out, "w") as f:
        json.dump([r.model_dump() for r in results], f, indent=2)
    logger.success(f"{analyze.mode} results written to {out}")
    return EXIT_OK


COMMANDS = {
    "synth-gen": run_synth_gen,
    "train": run_train,
    "probe": run_probe,
    "predict": run_predict,
    "eval": run_eval,
    "analyze": run_analyze,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        config = resolve_config(args)
        # synth-gen output must stay byte-identical, so its log never goes into the dataset
        if args.command != "synth-gen":
            configure_logging(Path(config.run_dir))
        return COMMANDS[args.command](config)
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (DatasetIOError, OSError) as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (ConfigurationError, ArgumentError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except PreviewError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
