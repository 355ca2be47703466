# trainer.py

import copy
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from data_pipeline.dataio import DatasetHandle, DatasetSplit, SplitView, partition, subsample_labeled, subsample_validation
from errors import ArgumentError, ConfigurationError, NumericalFailure
from eval_pipeline.metrics import mean_joint_error
from feature_pipeline.preprocess import CropArrays, CropPipeline, PreprocessConfig, denormalize_joints
from model_pipeline.losses import (
    LossWeights,
    adversarial_discriminator_loss,
    adversarial_generator_loss,
    pose_loss,
    recon_loss,
    semi_loss,
)
from model_pipeline.nets import (
    NetworkConfig,
    PoseHead,
    PreViewModel,
    build_networks,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from settings import deterministic_requested, resolve_device, seed_everything

Mode = Literal["preview", "autoencoder", "semi", "semi_adversarial", "supervised"]
PRETRAIN_MODES = ("preview", "autoencoder")
SEMI_MODES = ("semi", "semi_adversarial")
SECOND_VIEW_MODES = ("preview", "semi", "semi_adversarial")
SMALL_LABELED_SET = 1000
INFERENCE_BATCH = 256


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Mode = "preview"
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    seed: int = 0
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    early_stopping: bool = True
    patience: Optional[int] = Field(None, ge=1)
    deterministic: bool = False
    device: Optional[str] = None
    log_every: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _check_balanced_batches(self) -> "TrainConfig":
        if self.mode in SEMI_MODES and self.batch_size % 2:
            raise ValueError(f"batch_size must be even in {self.mode} mode, got {self.batch_size}")
        return self


class ProbeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Adam steps after the least-squares start; independent of the labeled set size
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    huber_epsilon: float = Field(0.1, gt=0)
    least_squares_init: bool = True
    eval_every: int = Field(50, ge=1)
    early_stopping: bool = True


class BatchRecord(BaseModel):
    epoch: int
    batch: int
    l_u: Optional[float] = None
    l_l: Optional[float] = None
    l_a: Optional[float] = None
    l_h: Optional[float] = None
    total: float
    n_labeled: int
    n_unlabeled: int


class EpochRecord(BaseModel):
    epoch: int
    loss: float
    l_u: Optional[float] = None
    l_l: Optional[float] = None
    l_a: Optional[float] = None
    l_h: Optional[float] = None
    val_me_mm: Optional[float] = None


class TrainReport(BaseModel):
    mode: Mode
    seed: int
    epochs: List[EpochRecord] = Field(default_factory=list)
    batch_log: List[BatchRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_me_mm: Optional[float] = None
    parameter_counts: Dict[str, int] = Field(default_factory=dict)
    fallback: Optional[str] = None
    checkpoint_path: Optional[str] = None
    wall_clock_s: float = 0.0

    @property
    def epochs_completed(self) -> int:
        return len(self.epochs)

    def comparable(self) -> Dict:
        """Report content that must match across deterministic reruns."""
        return self.model_dump(exclude={"wall_clock_s", "checkpoint_path"})

    def write(self, run_dir: Union[str, Path]) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "report.json", "w") as f:
            f.write(self.model_dump_json(indent=2))
        pd.DataFrame([e.model_dump() for e in self.epochs]).to_csv(run_dir / "epochs.csv", index=False)
        return run_dir / "report.json"


class ProbeReport(BaseModel):
    checkpoint: str
    d_T: int
    n: int
    repeats: int
    per_repeat_me_mm: List[float]
    validation_sizes: List[int]
    mean_me_mm: float
    std_me_mm: float


@dataclass
class Batch:
    inputs: torch.Tensor  # B x 1 x S x S
    targets: Optional[torch.Tensor]
    coms: torch.Tensor  # B x 3 mm
    joints: torch.Tensor  # B x K x 3 normalized
    labeled: torch.Tensor  # B bool

    @classmethod
    def from_crops(cls, crops: CropArrays, indices: np.ndarray, device: torch.device) -> "Batch":
        def tensor(array, dtype=torch.float32):
            return torch.as_tensor(array[indices], dtype=dtype, device=device)

        return cls(
            inputs=tensor(crops.inputs).unsqueeze(1),
            targets=None if crops.targets is None else tensor(crops.targets).unsqueeze(1),
            coms=tensor(crops.coms),
            joints=tensor(crops.joints_norm),
            labeled=tensor(crops.labeled, torch.bool),
        )

    @classmethod
    def concat(cls, first: "Batch", second: "Batch") -> "Batch":
        targets = None
        if first.targets is not None and second.targets is not None:
            targets = torch.cat([first.targets, second.targets])
        return cls(
            inputs=torch.cat([first.inputs, second.inputs]),
            targets=targets,
            coms=torch.cat([first.coms, second.coms]),
            joints=torch.cat([first.joints, second.joints]),
            labeled=torch.cat([first.labeled, second.labeled]),
        )

    def __len__(self) -> int:
        return self.inputs.shape[0]


class PoolCycler:
    """Hands out indices of a pool in seeded permutations, reshuffling whenever the pool is exhausted."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._position = 0

    def take(self, count: int) -> np.ndarray:
        taken = []
        while len(taken) < count:
            if self._position >= len(self._order):
                self._order = self.rng.permutation(self.size)
                self._position = 0
            step = min(count - len(taken), len(self._order) - self._position)
            taken.extend(self._order[self._position:self._position + step].tolist())
            self._position += step
        return np.asarray(taken, dtype=np.int64)


@dataclass
class TrainingData:
    labeled: Optional[CropArrays]
    unlabeled: Optional[CropArrays]
    validation: Optional[CropArrays]
    target_view: str
    crop_cube_side: float
    com_mean: np.ndarray
    view: Optional[SplitView] = None
    pipeline: Optional[CropPipeline] = None

    @property
    def jittered(self) -> bool:
        return self.pipeline is not None and self.pipeline.config.com_jitter_mm > 0

    def rejitter(self, epoch: int) -> None:
        """Re-crop the training pools with fresh CoM offsets; validation crops stay untouched."""
        if not self.jittered:
            return
        second_view = self.labeled is not None and self.labeled.targets is not None
        second_view = second_view or (self.unlabeled is not None and self.unlabeled.targets is not None)
        if self.labeled is not None:
            self.labeled = self.pipeline.process(self.view, self.labeled.ids, second_view, epoch=epoch)
        if self.unlabeled is not None:
            self.unlabeled = self.pipeline.process(self.view, self.unlabeled.ids, second_view, epoch=epoch)


def prepare_training_data(
    dataset: DatasetHandle,
    split: DatasetSplit,
    mode: str,
    preprocess: PreprocessConfig,
    seed: int = 0,
) -> TrainingData:
    """Crop every sample a training mode touches; pretraining reads no annotations at all."""
    view_ids = dataset.rig.view_ids
    second_view = mode in SECOND_VIEW_MODES
    if second_view and not dataset.is_multi_view:
        raise ConfigurationError(f"{mode} mode needs a two-view dataset, {dataset.manifest.name} has views {view_ids}")

    if mode in PRETRAIN_MODES:
        split = split.model_copy(update={"train_labeled": [], "train_unlabeled": split.training_ids})
    pipeline = CropPipeline(preprocess, dataset.joint_count, seed)
    view = SplitView(dataset, split)

    labeled = unlabeled = validation = None
    if mode not in PRETRAIN_MODES and split.train_labeled:
        labeled = pipeline.process(view, split.train_labeled, second_view)
    if mode != "supervised" and split.train_unlabeled:
        unlabeled = pipeline.process(view, split.train_unlabeled, second_view)
    if mode not in PRETRAIN_MODES and split.validation and not split.validation_disabled:
        validation = CropPipeline(preprocess.without_jitter(), dataset.joint_count).process(
            view, split.validation, with_second_view=False
        )

    pools = [pool for pool in (labeled, unlabeled) if pool is not None]
    if not pools:
        raise ArgumentError(f"split holds no training samples for {mode} mode")
    com_mean = np.concatenate([pool.coms for pool in pools]).mean(axis=0)
    return TrainingData(
        labeled=labeled,
        unlabeled=unlabeled,
        validation=validation,
        target_view=view_ids[1] if second_view else view_ids[0],
        crop_cube_side=preprocess.crop_cube_side,
        com_mean=com_mean,
        view=view,
        pipeline=pipeline,
    )


def encode_crops(model: PreViewModel, inputs: np.ndarray, device: Optional[torch.device] = None) -> np.ndarray:
    """Latent codes of stacked crops with frozen (evaluation-mode) statistics."""
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    codes = []
    with torch.no_grad():
        for start in range(0, len(inputs), INFERENCE_BATCH):
            chunk = torch.as_tensor(inputs[start:start + INFERENCE_BATCH], dtype=torch.float32, device=device)
            codes.append(model.encode(chunk.unsqueeze(1)).cpu().numpy())
    model.train(was_training)
    return np.concatenate(codes).astype(np.float64)


def predict_from_crops(model: PreViewModel, crops: CropArrays, device: Optional[torch.device] = None) -> np.ndarray:
    """Joint predictions in mm (view-1 camera frame) for stacked crops."""
    device = device or next(model.parameters()).device
    codes = encode_crops(model, crops.inputs, device)
    with torch.no_grad():
        normalized = model.predict_pose(torch.as_tensor(codes, dtype=torch.float32, device=device)).cpu().numpy()
    return denormalize_joints(normalized, crops.coms, crops.crop_cube_side)


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _item(value: Optional[torch.Tensor]) -> Optional[float]:
    return None if value is None else float(value.detach().item())


class TrainingRun:
    def __init__(
        self,
        config: TrainConfig,
        data: TrainingData,
        preprocess: Optional[PreprocessConfig] = None,
        run_dir: Optional[Union[str, Path]] = None,
    ):
        """
        One optimisation run of any mode over pre-cropped data.

        :param config: run parameters; network.joint_count must match the data
        :param data: crops produced by prepare_training_data
        :param preprocess: crop parameters, stored in the checkpoint for later probing
        :param run_dir: where checkpoint.pt, report.json and epochs.csv go (nothing is written when None)
        """
        self.config = config
        self.data = data
        self.preprocess = preprocess or PreprocessConfig()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.weights = config.weights
        self.device = resolve_device(config.device)
        seed_everything(config.seed, config.deterministic or deterministic_requested())
        self.rng = np.random.default_rng(config.seed)

        self.model, self.discriminator = build_networks(
            config.network,
            config.seed,
            with_discriminator=config.mode == "semi_adversarial",
            target_view=data.target_view,
        )
        self.model.set_com_normalization(data.com_mean, data.crop_cube_side)
        self.model.to(self.device).train()

        betas = (config.beta1, config.beta2)
        self.optimizer = torch.optim.Adam(self._trainable_parameters(), lr=config.learning_rate, betas=betas)
        self.d_optimizer = None
        if self.discriminator is not None:
            self.discriminator.to(self.device).train()
            self.d_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=config.learning_rate, betas=betas)

        if config.mode in SEMI_MODES:
            self.labeled_cycle = PoolCycler(len(data.labeled), self.rng)
            self.unlabeled_cycle = PoolCycler(len(data.unlabeled), self.rng)

    def _trainable_parameters(self) -> List[torch.nn.Parameter]:
        mode = self.config.mode
        modules = [self.model.encoder]
        if mode != "supervised":
            modules.append(self.model.decoder)
        if mode not in PRETRAIN_MODES:
            modules.append(self.model.pose_head)
        return [p for module in modules for p in module.parameters()]

    @property
    def parameter_counts(self) -> Dict[str, int]:
        counts = {
            "encoder": count_parameters(self.model.encoder),
            "decoder": count_parameters(self.model.decoder),
            "pose_head": count_parameters(self.model.pose_head),
        }
        if self.discriminator is not None:
            counts["discriminator"] = count_parameters(self.discriminator)
        return counts

    def epoch_batches(self) -> Iterator[Batch]:
        """Batches of one epoch: balanced halves in semi modes, a seeded shuffle of the single pool otherwise."""
        batch_size = self.config.batch_size
        if self.config.mode in SEMI_MODES:
            half = batch_size // 2
            for _ in range(math.ceil(len(self.data.unlabeled) / half)):
                labeled = Batch.from_crops(self.data.labeled, self.labeled_cycle.take(half), self.device)
                unlabeled = Batch.from_crops(self.data.unlabeled, self.unlabeled_cycle.take(half), self.device)
                yield Batch.concat(labeled, unlabeled)
            return

        pool = self.data.labeled if self.config.mode == "supervised" else self.data.unlabeled
        order = self.rng.permutation(len(pool))
        for start in range(0, len(order), batch_size):
            yield Batch.from_crops(pool, order[start:start + batch_size], self.device)

    def _adversarial_terms(self, batch: Batch, code: torch.Tensor, recon: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """One discriminator update, then the generator's adversarial term on the updated discriminator."""
        network = self.config.network
        condition = batch.inputs if network.conditions_on_input else None
        fake_pose = self.model.predict_pose(code) if network.conditions_on_pose else None
        # pose-conditioned real samples need an annotated pose
        real = batch.labeled if network.conditions_on_pose else torch.ones_like(batch.labeled)

        self.d_optimizer.zero_grad(set_to_none=True)
        score_real = self.discriminator(
            batch.targets[real],
            None if condition is None else condition[real],
            batch.joints[real] if network.conditions_on_pose else None,
        )
        score_fake = self.discriminator(
            recon.detach(), condition, None if fake_pose is None else fake_pose.detach()
        )
        l_h = adversarial_discriminator_loss(score_real, score_fake, self.weights.l_r, self.weights.l_g)
        l_h.backward()
        self.d_optimizer.step()

        if self.weights.lambda_a > 0:
            l_a = adversarial_generator_loss(self.discriminator(recon, condition, fake_pose), self.weights.l_r)
        else:
            with torch.no_grad():
                pose = None if fake_pose is None else fake_pose.detach()
                l_a = adversarial_generator_loss(self.discriminator(recon.detach(), condition, pose), self.weights.l_r)
        return l_h.detach(), l_a

    def step(self, batch: Batch, epoch: int = 0, index: int = 0) -> BatchRecord:
        mode = self.config.mode
        self.model.train()
        code = self.model.encode(batch.inputs)

        l_u = recon = None
        if mode != "supervised":
            recon = self.model.decode(code, batch.coms)
            target = batch.inputs if mode == "autoencoder" else batch.targets
            l_u = recon_loss(recon, target)

        l_l = None
        if mode not in PRETRAIN_MODES and bool(batch.labeled.any()):
            prediction = self.model.predict_pose(code[batch.labeled])
            l_l = pose_loss(prediction, batch.joints[batch.labeled], self.weights.huber_epsilon)

        l_h = l_a = None
        if mode == "semi_adversarial":
            l_h, l_a = self._adversarial_terms(batch, code, recon)

        total = semi_loss(
            l_u if l_u is not None else 0.0,
            l_l if l_l is not None else 0.0,
            self.weights,
            labeled=l_l is not None,
            l_a=l_a if l_a is not None and self.weights.lambda_a > 0 else None,
        )
        if not isinstance(total, torch.Tensor) or not total.requires_grad:
            raise ArgumentError(f"batch {index} of epoch {epoch} carries nothing to learn from in {mode} mode")
        value = float(total.detach().item())
        if not math.isfinite(value):
            logger.error(f"Non-finite loss {value} at epoch {epoch}, batch {index}")
            raise NumericalFailure(epoch, index, value)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        n_labeled = int(batch.labeled.sum().item())
        return BatchRecord(
            epoch=epoch,
            batch=index,
            l_u=_item(l_u),
            l_l=_item(l_l),
            l_a=_item(l_a),
            l_h=_item(l_h),
            total=value,
            n_labeled=n_labeled,
            n_unlabeled=len(batch) - n_labeled,
        )

    def validate(self) -> Optional[float]:
        if self.data.validation is None:
            return None
        predictions = predict_from_crops(self.model, self.data.validation, self.device)
        return mean_joint_error(predictions, self.data.validation.joints_mm)

    def run(self) -> TrainReport:
        config = self.config
        report = TrainReport(mode=config.mode, seed=config.seed, parameter_counts=self.parameter_counts)
        started = time.perf_counter()
        best_state, since_best = None, 0

        logger.info(f"Training {config.mode} for {config.epochs} epochs on {self.device}")
        for epoch in range(1, config.epochs + 1):
            if epoch > 1:
                self.data.rejitter(epoch - 1)
            records = [self.step(batch, epoch, i) for i, batch in enumerate(self.epoch_batches())]
            report.batch_log.extend(records)
            val_me = self.validate()
            record = EpochRecord(
                epoch=epoch,
                loss=float(np.mean([r.total for r in records])),
                l_u=_mean_or_none([r.l_u for r in records]),
                l_l=_mean_or_none([r.l_l for r in records]),
                l_a=_mean_or_none([r.l_a for r in records]),
                l_h=_mean_or_none([r.l_h for r in records]),
                val_me_mm=val_me,
            )
            report.epochs.append(record)

            if val_me is not None and (report.best_val_me_mm is None or val_me < report.best_val_me_mm):
                report.best_epoch, report.best_val_me_mm = epoch, val_me
                best_state, since_best = copy.deepcopy(self.model.state_dict()), 0
            elif val_me is not None:
                since_best += 1

            if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
                summary = f"Epoch {epoch}/{config.epochs} loss {record.loss:.5f}"
                if val_me is not None:
                    summary += f" val ME {val_me:.2f} mm"
                logger.info(summary)
            if config.early_stopping and config.patience and since_best >= config.patience:
                logger.info(f"No validation improvement for {since_best} epochs, stopping at epoch {epoch}")
                break

        if config.early_stopping and best_state is not None:
            self.model.load_state_dict(best_state)
            logger.info(f"Restored epoch {report.best_epoch} (val ME {report.best_val_me_mm:.2f} mm)")
        if report.best_epoch is None and report.epochs:
            report.best_epoch = report.epochs[-1].epoch
        report.wall_clock_s = time.perf_counter() - started

        if self.run_dir is not None:
            extra = {
                "mode": config.mode,
                "seed": config.seed,
                "epochs_completed": report.epochs_completed,
                "preprocess": self.preprocess.model_dump(),
            }
            path = save_checkpoint(self.run_dir / "checkpoint.pt", self.model, self.discriminator, extra)
            report.checkpoint_path = str(path)
            report.write(self.run_dir)
        logger.success(f"{config.mode} training finished after {report.epochs_completed} epochs")
        return report


def _adopt_joint_count(config: TrainConfig, dataset: DatasetHandle) -> TrainConfig:
    joint_count = dataset.joint_count
    if joint_count is None or joint_count == config.network.joint_count:
        return config
    logger.info(f"Using joint_count={joint_count} from the dataset")
    network = config.network.model_copy(update={"joint_count": joint_count})
    return config.model_copy(update={"network": network})


def _run(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]],
    preprocess: Optional[PreprocessConfig],
) -> TrainReport:
    preprocess = preprocess or PreprocessConfig()
    if config.network.input_resolution != preprocess.output_size:
        raise ConfigurationError(
            f"network input_resolution {config.network.input_resolution} differs from crop size {preprocess.output_size}"
        )
    config = _adopt_joint_count(config, dataset)
    data = prepare_training_data(dataset, split, config.mode, preprocess, config.seed)
    return TrainingRun(config, data, preprocess, run_dir).run()


def pretrain(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> TrainReport:
    """Unsupervised pretraining: predict the second view (preview) or reconstruct the input (autoencoder)."""
    if config.mode not in PRETRAIN_MODES:
        raise ArgumentError(f"pretrain runs preview or autoencoder mode, got {config.mode}")
    return _run(dataset, split, config, run_dir, preprocess)


def train_supervised(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> TrainReport:
    if not split.train_labeled:
        raise ArgumentError("supervised training needs at least one labeled sample")
    config = config.model_copy(update={"mode": "supervised"})
    return _run(dataset, split, config, run_dir, preprocess)


def train_semi(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> TrainReport:
    """End-to-end semi-supervised training on balanced labeled/unlabeled batches."""
    if not split.train_labeled:
        raise ArgumentError("semi-supervised training needs at least one labeled sample")
    if not split.train_unlabeled:
        logger.warning("No unlabeled samples in the split, falling back to supervised training")
        report = train_supervised(dataset, split, config, run_dir, preprocess)
        report.fallback = "supervised"
        if run_dir is not None:
            report.write(run_dir)
        return report
    if config.mode not in SEMI_MODES:
        config = config.model_copy(update={"mode": "semi"})
    return _run(dataset, split, config, run_dir, preprocess)


def adversarial_defaults(n_labeled: int) -> Tuple[float, str]:
    """(lambda_a, discriminator condition): input conditioning at 0.01 for small labeled sets, pose at 0.1 otherwise."""
    if n_labeled < SMALL_LABELED_SET:
        return 0.01, "input"
    return 0.1, "pose"


def train_semi_adversarial(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> TrainReport:
    config = config.model_copy(update={"mode": "semi_adversarial"})
    if config.network.conditions_on_pose and not split.train_labeled:
        raise ConfigurationError("pose-conditioned discriminator needs labeled samples")
    if not split.train_unlabeled:
        raise ArgumentError("adversarial semi-supervised training needs unlabeled samples")
    return train_semi(dataset, split, config, run_dir, preprocess)


def train(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> TrainReport:
    if config.mode in PRETRAIN_MODES:
        return pretrain(dataset, split, config, run_dir, preprocess)
    if config.mode == "supervised":
        return train_supervised(dataset, split, config, run_dir, preprocess)
    if config.mode == "semi_adversarial":
        return train_semi_adversarial(dataset, split, config, run_dir, preprocess)
    return train_semi(dataset, split, config, run_dir, preprocess)


def compare_pretraining(
    dataset: DatasetHandle,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> Dict[str, TrainReport]:
    """Pretrain PreView and the autoencoder baseline with identical networks and optimizer settings."""
    configs = {mode: config.model_copy(update={"mode": mode}) for mode in PRETRAIN_MODES}
    counts = {mode: count_parameters(build_networks(c.network, c.seed)[0]) for mode, c in configs.items()}
    if len(set(counts.values())) != 1:
        raise ConfigurationError(f"pretraining variants differ in parameter count: {counts}")
    optimizer_settings = {
        mode: (c.learning_rate, c.beta1, c.beta2, c.batch_size, c.epochs) for mode, c in configs.items()
    }
    if len(set(optimizer_settings.values())) != 1:
        raise ConfigurationError(f"pretraining variants differ in optimizer settings: {optimizer_settings}")

    reports = {}
    for mode, mode_config in configs.items():
        mode_dir = None if run_dir is None else Path(run_dir) / mode
        reports[mode] = pretrain(dataset, split, mode_config, mode_dir, preprocess)
    return reports


def _probe_me(head: PoseHead, codes: torch.Tensor, crops: CropArrays, positions: np.ndarray) -> float:
    with torch.no_grad():
        normalized = head(codes[positions]).cpu().numpy()
    predictions = denormalize_joints(normalized, crops.coms[positions], crops.crop_cube_side)
    return mean_joint_error(predictions, crops.joints_mm[positions])


def _fit_probe(
    codes: torch.Tensor,
    crops: CropArrays,
    split: DatasetSplit,
    probe: ProbeConfig,
    seed: int,
) -> float:
    position = {sample_id: i for i, sample_id in enumerate(crops.ids)}
    train = np.asarray([position[i] for i in split.train_labeled if i in position], dtype=np.int64)
    val = np.asarray([position[i] for i in split.validation if i in position], dtype=np.int64)
    test = np.asarray([position[i] for i in split.test if i in position], dtype=np.int64)
    if len(train) == 0 or len(test) == 0:
        raise ArgumentError("linear probe needs labeled training and test samples")

    torch.manual_seed(seed)
    head = PoseHead(NetworkConfig(d_T=codes.shape[1], joint_count=crops.joints_mm.shape[1]))
    targets = torch.as_tensor(crops.joints_norm, dtype=torch.float32)
    if probe.least_squares_init:
        _least_squares_init(head, codes[train], targets[train])
    optimizer = torch.optim.Adam(head.parameters(), lr=probe.learning_rate)
    cycle = PoolCycler(len(train), np.random.default_rng(seed))
    track = probe.early_stopping and len(val) > 0

    best_me, best_state = math.inf, None
    for step in range(probe.steps + 1):
        if track and (step % probe.eval_every == 0 or step == probe.steps):
            me = _probe_me(head, codes, crops, val)
            if me < best_me:
                best_me, best_state = me, copy.deepcopy(head.state_dict())
        if step == probe.steps:
            break
        chunk = train[cycle.take(min(probe.batch_size, len(train)))]
        loss = pose_loss(head(codes[chunk]), targets[chunk], probe.huber_epsilon)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    if best_state is not None:
        head.load_state_dict(best_state)
    return _probe_me(head, codes, crops, test)


def _least_squares_init(head: PoseHead, codes: torch.Tensor, targets: torch.Tensor) -> None:
    """Minimum-norm least-squares fit of the affine head, the start point of the Huber refinement."""
    design = np.concatenate([codes.numpy().astype(np.float64), np.ones((len(codes), 1))], axis=1)
    solution, *_ = np.linalg.lstsq(design, targets.reshape(len(targets), -1).numpy().astype(np.float64), rcond=None)
    with torch.no_grad():
        head.linear.weight.copy_(torch.as_tensor(solution[:-1].T, dtype=torch.float32))
        head.linear.bias.copy_(torch.as_tensor(solution[-1], dtype=torch.float32))


def linear_probe(
    checkpoint: Union[str, Path],
    dataset: DatasetHandle,
    n: int,
    repeats: int = 10,
    probe: Optional[ProbeConfig] = None,
    base_split: Optional[DatasetSplit] = None,
    preprocess: Optional[PreprocessConfig] = None,
    seed: int = 0,
    code_fn: Optional[Callable[[CropArrays], np.ndarray]] = None,
) -> ProbeReport:
    """
    Frozen-encoder evaluation: train only a linear pose head on n labeled samples.

    Each repeat draws its own labeled subset and shrunken validation set with
    seed + repeat; codes are computed once since the encoder is frozen.

    Args:
        checkpoint: Pretrained checkpoint; its encoder stays in evaluation mode.
        dataset: Dataset handle with annotations.
        n: Labeled samples per repeat.
        repeats: Number of independent draws.
        probe: Optimisation settings of the head.
        base_split: Fixed test/validation partition; defaults to partition(dataset).
        preprocess: Crop parameters; default is the ones stored in the checkpoint.
        seed: Base seed of the repeats.
        code_fn: Replaces the encoder, mapping crops to an (N, d) code array.

    Returns:
        ProbeReport with the per-repeat test ME and their mean and standard deviation.
    """
    if repeats < 1:
        raise ArgumentError(f"repeats must be >= 1, got {repeats}")
    probe = probe or ProbeConfig()
    model, _, extra = load_checkpoint(checkpoint)
    preprocess = (preprocess or PreprocessConfig(**extra.get("preprocess", {}))).without_jitter()
    base_split = base_split or partition(dataset)
    if n > len(base_split.train_labeled):
        raise ArgumentError(f"requested n={n} labeled samples but the labeled pool holds {len(base_split.train_labeled)}")

    for parameter in model.parameters():
        parameter.requires_grad_(False)
    crops = CropPipeline(preprocess, dataset.joint_count, seed).process(
        SplitView(dataset, base_split), base_split.annotated_ids, with_second_view=False
    )
    codes = code_fn(crops) if code_fn is not None else encode_crops(model, crops.inputs)
    codes = torch.as_tensor(np.asarray(codes), dtype=torch.float32)

    errors, validation_sizes = [], []
    for repeat in range(repeats):
        repeat_seed = seed + repeat
        split = subsample_labeled(base_split, n, repeat_seed)
        split = subsample_validation(split, seed=repeat_seed)
        me = _fit_probe(codes, crops, split, probe, repeat_seed)
        errors.append(me)
        validation_sizes.append(len(split.validation))
        logger.info(f"Probe repeat {repeat + 1}/{repeats}: test ME {me:.2f} mm (|V| = {len(split.validation)})")

    report = ProbeReport(
        checkpoint=str(checkpoint),
        d_T=int(codes.shape[1]),
        n=n,
        repeats=repeats,
        per_repeat_me_mm=errors,
        validation_sizes=validation_sizes,
        mean_me_mm=float(np.mean(errors)),
        std_me_mm=float(np.std(errors)),
    )
    logger.success(f"Linear probe n={n}: {report.mean_me_mm:.2f} +- {report.std_me_mm:.2f} mm")
    return report


def latent_size_sweep(
    checkpoints: List[Union[str, Path]],
    dataset: DatasetHandle,
    n: int,
    repeats: int = 10,
    probe: Optional[ProbeConfig] = None,
    base_split: Optional[DatasetSplit] = None,
    seed: int = 0,
) -> pd.DataFrame:
    """Probe one checkpoint per latent size; one row per checkpoint, sorted by d_T."""
    base_split = base_split or partition(dataset)
    rows = []
    for checkpoint in checkpoints:
        report = linear_probe(checkpoint, dataset, n, repeats, probe, base_split, seed=seed)
        rows.append(
            {
                "d_T": report.d_T,
                "checkpoint": report.checkpoint,
                "n": n,
                "mean_me_mm": report.mean_me_mm,
                "std_me_mm": report.std_me_mm,
            }
        )
    return pd.DataFrame(rows).sort_values("d_T", kind="stable").reset_index(drop=True)


def predict_joints(
    checkpoint: Union[str, Path],
    dataset: DatasetHandle,
    ids: Optional[List[str]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> Dict[str, np.ndarray]:
    """{sample id: K x 3 mm} predictions of a trained model; samples that cannot be cropped are skipped."""
    model, _, extra = load_checkpoint(checkpoint)
    preprocess = (preprocess or PreprocessConfig(**extra.get("preprocess", {}))).without_jitter()
    ids = dataset.ids if ids is None else ids
    crops = CropPipeline(preprocess, model.config.joint_count).process(
        SplitView(dataset, DatasetSplit()), ids, with_second_view=False
    )
    predictions = predict_from_crops(model, crops)
    return {sample_id: predictions[i] for i, sample_id in enumerate(crops.ids)}
