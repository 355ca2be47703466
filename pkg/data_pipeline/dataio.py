# dataio.py

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data_pipeline.camera import CameraRig, CameraView
from errors import (
    ArgumentError,
    DatasetIOError,
    ManifestParseError,
    ShapeError,
    format_validation_error,
)

MANIFEST_NAME = "manifest.json"
DEPTH_DTYPE = np.dtype("<f4")
VALIDATION_CAP = (3, 10)  # |V| <= 0.3 |L|


@dataclass
class DepthImage:
    """Single-view depth map in millimetres; invalid pixels hold exactly 0."""

    values: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != self.validity.shape:
            raise ShapeError(f"depth values {self.values.shape} and validity {self.validity.shape} must be equal 2-D shapes")
        valid_values = self.values[self.validity]
        if not (np.all(np.isfinite(valid_values)) and np.all(valid_values > 0)):
            raise ValueError("valid depth pixels must be finite and strictly positive")
        if np.any(self.values[~self.validity] != 0):
            raise ValueError("invalid depth pixels must be encoded as 0")

    @classmethod
    def from_values(cls, values: np.ndarray) -> "DepthImage":
        values = np.array(values, copy=True)
        validity = np.isfinite(values) & (values > 0)
        values[~validity] = 0
        return cls(values=values, validity=validity)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_float32(self) -> "DepthImage":
        return DepthImage.from_values(self.values.astype(np.float32))


@dataclass
class MultiViewSample:
    id: str
    view1: DepthImage
    view2: Optional[DepthImage]
    rig: CameraRig
    joints: Optional[np.ndarray]
    labeled: bool

    @property
    def view_ids(self) -> List[str]:
        return self.rig.view_ids


class SampleEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    files: Dict[str, str]
    joints: Optional[List[List[float]]] = None
    labeled: bool

    @model_validator(mode="after")
    def _check_annotation(self) -> "SampleEntry":
        if self.labeled != (self.joints is not None):
            raise ValueError("labeled must be true exactly when joints are present")
        if self.joints is not None:
            joints = np.asarray(self.joints, dtype=np.float64)
            if joints.ndim != 2 or joints.shape[1] != 3:
                raise ValueError("joints must be a K x 3 list")
            if not np.all(np.isfinite(joints)):
                raise ValueError("joints must be finite")
        return self


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    num_samples: int = Field(ge=0)
    units: Literal["mm"] = "mm"
    resolution: Tuple[int, int]
    depth_format: Literal["f32le"] = "f32le"
    views: List[CameraView]
    samples: List[SampleEntry]

    @model_validator(mode="after")
    def _check_consistency(self) -> "Manifest":
        if self.num_samples != len(self.samples):
            raise ValueError(f"num_samples={self.num_samples} but {len(self.samples)} samples listed")
        ids = [sample.id for sample in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        view_ids = {view.id for view in self.views}
        joint_counts = set()
        for sample in self.samples:
            unknown = set(sample.files) - view_ids
            if unknown:
                raise ValueError(f"sample {sample.id} references unknown views {sorted(unknown)}")
            if sample.joints is not None:
                joint_counts.add(len(sample.joints))
        if len(joint_counts) > 1:
            raise ValueError(f"inconsistent joint counts {sorted(joint_counts)}")
        return self

    def rig(self) -> CameraRig:
        return CameraRig(resolution=self.resolution, views=self.views)


class DatasetSplit(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_labeled: List[str] = Field(default_factory=list)
    train_unlabeled: List[str] = Field(default_factory=list)
    validation: List[str] = Field(default_factory=list)
    test: List[str] = Field(default_factory=list)
    validation_disabled: bool = False
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_disjoint(self) -> "DatasetSplit":
        seen: Dict[str, str] = {}
        for role in ("train_labeled", "train_unlabeled", "validation", "test"):
            for sample_id in getattr(self, role):
                if sample_id in seen:
                    raise ValueError(f"sample {sample_id} appears in both {seen[sample_id]} and {role}")
                seen[sample_id] = role
        return self

    @property
    def training_ids(self) -> List[str]:
        return self.train_labeled + self.train_unlabeled

    @property
    def annotated_ids(self) -> List[str]:
        return self.train_labeled + self.validation + self.test


def write_depth(image: DepthImage, path: Path):
    np.ascontiguousarray(image.values, dtype=DEPTH_DTYPE).tofile(path)


def read_depth(path: Path, resolution: Tuple[int, int], sample_id: Optional[str] = None) -> DepthImage:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"depth file {path} does not exist", sample_id)
    height, width = resolution
    values = np.fromfile(path, dtype=DEPTH_DTYPE)
    if values.size != height * width:
        raise DatasetIOError(
            f"depth file {path.name} holds {values.size} values, expected {height}x{width}={height * width}",
            sample_id,
        )
    return DepthImage.from_values(values.reshape(height, width))


def write_manifest(manifest: Manifest, root: Path) -> Path:
    root = Path(root)
    path = root / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2)
        f.write("\n")
    return path


class DatasetHandle:
    """Lazy view of a dataset directory: the manifest is parsed eagerly, depth files on demand."""

    def __init__(self, root: Path, manifest: Manifest):
        self.root = Path(root)
        self.manifest = manifest
        self._rig = manifest.rig()
        self._entries = {sample.id: sample for sample in manifest.samples}

    def __len__(self) -> int:
        return self.manifest.num_samples

    @property
    def ids(self) -> List[str]:
        return [sample.id for sample in self.manifest.samples]

    @property
    def rig(self) -> CameraRig:
        return self._rig

    @property
    def joint_count(self) -> Optional[int]:
        for sample in self.manifest.samples:
            if sample.joints is not None:
                return len(sample.joints)
        return None

    @property
    def is_multi_view(self) -> bool:
        if len(self._rig.views) < 2:
            return False
        first, second = self._rig.view_ids[:2]
        return all(first in s.files and second in s.files for s in self.manifest.samples)

    def labeled_ids(self) -> List[str]:
        return [sample.id for sample in self.manifest.samples if sample.labeled]

    def unlabeled_ids(self) -> List[str]:
        return [sample.id for sample in self.manifest.samples if not sample.labeled]

    def entry(self, sample_id: str) -> SampleEntry:
        try:
            return self._entries[sample_id]
        except KeyError:
            raise ArgumentError(f"unknown sample id {sample_id!r}") from None

    def depth_path(self, sample_id: str, view_id: str) -> Path:
        return self.root / self.entry(sample_id).files[view_id]

    def check_files(self) -> Dict[str, str]:
        """Stat every referenced depth file; returns {sample id: problem} for corrupt entries."""
        height, width = self.manifest.resolution
        expected = height * width * DEPTH_DTYPE.itemsize
        problems: Dict[str, str] = {}
        for sample in self.manifest.samples:
            for view_id, relative in sample.files.items():
                path = self.root / relative
                if not path.is_file():
                    problems[sample.id] = f"missing depth file {relative}"
                    break
                size = path.stat().st_size
                if size != expected:
                    problems[sample.id] = f"depth file {relative} has {size // DEPTH_DTYPE.itemsize} values, expected {height * width}"
                    break
        return problems

    def load_sample(self, sample_id: str) -> MultiViewSample:
        entry = self.entry(sample_id)
        view_ids = self._rig.view_ids
        first = read_depth(self.root / entry.files[view_ids[0]], self.manifest.resolution, sample_id)
        second = None
        if len(view_ids) > 1 and view_ids[1] in entry.files:
            second = read_depth(self.root / entry.files[view_ids[1]], self.manifest.resolution, sample_id)
        joints = np.asarray(entry.joints, dtype=np.float64) if entry.joints is not None else None
        return MultiViewSample(
            id=sample_id, view1=first, view2=second, rig=self._rig, joints=joints, labeled=entry.labeled
        )

    def manifest_hash(self) -> str:
        with open(self.root / MANIFEST_NAME, "rb") as f:
            return hashlib.sha256(f.read()).hexdigest()


def load_manifest(path: Union[str, Path], verify_files: bool = True) -> DatasetHandle:
    """
    Parse and validate a dataset manifest.

    Args:
        path: The dataset directory or the manifest.json inside it.
        verify_files: Stat every depth file (existence and size) before returning.

    Returns:
        DatasetHandle: lazy handle over the dataset.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise DatasetIOError(f"manifest {manifest_path} does not exist")

    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestParseError("<root>", f"invalid JSON: {e}") from e

    try:
        manifest = Manifest.model_validate(raw)
    except ValidationError as e:
        field_path, message = format_validation_error(e)
        logger.error(f"Manifest {manifest_path} failed validation at {field_path}: {message}")
        raise ManifestParseError(field_path, message) from e

    handle = DatasetHandle(manifest_path.parent, manifest)
    if verify_files:
        problems = handle.check_files()
        if problems:
            for sample_id, problem in problems.items():
                logger.error(f"Corrupt entry {sample_id}: {problem}")
            first_id = next(iter(problems))
            raise DatasetIOError(problems[first_id], first_id)

    logger.info(f"Loaded manifest {manifest.name} with {manifest.num_samples} samples")
    return handle


def partition(
    dataset: DatasetHandle,
    test_fraction: float = 0.1,
    validation_fraction: float = 0.1,
    seed: int = 0,
) -> DatasetSplit:
    """Fixed test/validation sets drawn from the labeled pool; everything else is training data."""
    if not (0 <= test_fraction < 1 and 0 <= validation_fraction < 1 and test_fraction + validation_fraction < 1):
        raise ArgumentError("test_fraction and validation_fraction must be in [0, 1) and sum below 1")
    labeled = dataset.labeled_ids()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labeled))
    n_test = int(round(test_fraction * len(labeled)))
    n_val = int(round(validation_fraction * len(labeled)))
    test_idx = sorted(order[:n_test])
    val_idx = sorted(order[n_test:n_test + n_val])
    train_idx = sorted(order[n_test + n_val:])
    return DatasetSplit(
        train_labeled=[labeled[i] for i in train_idx],
        train_unlabeled=dataset.unlabeled_ids(),
        validation=[labeled[i] for i in val_idx],
        test=[labeled[i] for i in test_idx],
        seed=seed,
    )


def subsample_labeled(
    dataset: Union[DatasetHandle, DatasetSplit],
    n: int,
    seed: int,
    base_split: Optional[DatasetSplit] = None,
) -> DatasetSplit:
    """
    Keep n uniformly drawn labeled training samples; the rest of the labeled
    training pool moves to train_unlabeled (annotations masked by SplitView).

    Args:
        dataset: A dataset handle (partitioned with default fractions) or an existing base split.
        n: Number of labeled samples to keep.
        seed: Seed of the draw.
        base_split: Explicit base split; overrides the partition of a dataset handle.
    """
    if base_split is None:
        base_split = dataset if isinstance(dataset, DatasetSplit) else partition(dataset)
    pool = base_split.train_labeled
    if n < 0 or n > len(pool):
        raise ArgumentError(f"requested n={n} labeled samples but the labeled pool holds {len(pool)}")

    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(pool), size=n, replace=False).tolist())
    kept = [pool[i] for i in range(len(pool)) if i in chosen]
    moved = [pool[i] for i in range(len(pool)) if i not in chosen]
    return DatasetSplit(
        train_labeled=kept,
        train_unlabeled=base_split.train_unlabeled + moved,
        validation=list(base_split.validation),
        test=list(base_split.test),
        validation_disabled=base_split.validation_disabled,
        seed=seed,
    )


def subsample_validation(
    split: DatasetSplit,
    original_validation_size: Optional[int] = None,
    seed: Optional[int] = None,
) -> DatasetSplit:
    """Shrink the validation set to min(original size, floor(0.3 |L|))."""
    n_labeled = len(split.train_labeled)
    if n_labeled < 1:
        raise ArgumentError("validation subsampling needs at least one labeled training sample")
    original = len(split.validation) if original_validation_size is None else original_validation_size
    cap = (VALIDATION_CAP[0] * n_labeled) // VALIDATION_CAP[1]
    size = min(original, cap, len(split.validation))

    if cap == 0:
        logger.warning(f"Validation disabled: floor(0.3 * {n_labeled}) = 0")
        return split.model_copy(update={"validation": [], "validation_disabled": True})

    draw_seed = seed if seed is not None else (split.seed or 0)
    rng = np.random.default_rng(draw_seed)
    chosen = sorted(rng.choice(len(split.validation), size=size, replace=False).tolist())
    return split.model_copy(update={"validation": [split.validation[i] for i in chosen]})


class SplitView:
    """Sample access through a split; ids in train_unlabeled never expose joints."""

    def __init__(self, dataset: DatasetHandle, split: DatasetSplit):
        self.dataset = dataset
        self.split = split
        self._masked = set(split.train_unlabeled)

    @property
    def rig(self) -> CameraRig:
        return self.dataset.rig

    def is_masked(self, sample_id: str) -> bool:
        return sample_id in self._masked

    def sample(self, sample_id: str) -> MultiViewSample:
        sample = self.dataset.load_sample(sample_id)
        if sample_id in self._masked:
            sample.joints = None
            sample.labeled = False
        return sample

    def joints(self, sample_id: str) -> Optional[np.ndarray]:
        if sample_id in self._masked:
            return None
        entry = self.dataset.entry(sample_id)
        return np.asarray(entry.joints, dtype=np.float64) if entry.joints is not None else None
