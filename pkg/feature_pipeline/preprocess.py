# preprocess.py

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from data_pipeline.camera import CameraRig, CameraView
from data_pipeline.dataio import DepthImage, MultiViewSample, SplitView
from errors import ArgumentError, EmptyCropError, EmptyFrameError, PreviewError

BACKGROUND_VALUE = 1.0


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    crop_cube_side: float = Field(300.0, gt=0)
    depth_range: float = Field(150.0, gt=0)
    foreground_band: float = Field(200.0, gt=0)
    output_size: int = Field(64, ge=1)
    com_jitter_mm: float = Field(0.0, ge=0)

    def without_jitter(self) -> "PreprocessConfig":
        """Crop parameters of every evaluation path: the detected CoM is used as is."""
        return self.model_copy(update={"com_jitter_mm": 0.0})



@dataclass
class CropMeta:
    com: np.ndarray  # mm, camera frame of source_view
    crop_cube_side: float
    depth_range: float
    source_view: Optional[str] = None


@dataclass
class NormalizedCrop:
    pixels: np.ndarray  # output_size x output_size in [-1, 1]
    meta: CropMeta


def compute_com(image: DepthImage, camera: CameraView, foreground_band: float = 200.0) -> np.ndarray:
    """
    Centre of mass of the closest object.

    Foreground is every valid pixel within foreground_band mm behind the closest
    valid depth; the CoM is the mean of their back-projected 3D points.
    """
    if not np.any(image.validity):
        raise EmptyFrameError("depth frame has no valid pixels")
    z_min = image.values[image.validity].min()
    foreground = image.validity & (image.values <= z_min + foreground_band)
    rows, cols = np.nonzero(foreground)
    points = camera.back_project(cols, rows, image.values[rows, cols].astype(np.float64))
    return points.mean(axis=0)


def crop_window(camera: CameraView, com: np.ndarray, crop_cube_side: float):
    """Pixel bounds (u0, u1, v0, v1) of the cube face of side crop_cube_side centred at the CoM."""
    half = crop_cube_side / 2.0
    u_centre = camera.fx * com[0] / com[2] + camera.cx
    v_centre = camera.fy * com[1] / com[2] + camera.cy
    half_u = half * abs(camera.fx) / com[2]
    half_v = half * abs(camera.fy) / com[2]
    return u_centre - half_u, u_centre + half_u, v_centre - half_v, v_centre + half_v


def crop_and_normalize(
    image: DepthImage,
    camera: CameraView,
    com: np.ndarray,
    crop_cube_side: float = 300.0,
    depth_range: float = 150.0,
    output_size: int = 64,
) -> NormalizedCrop:
    """
    Metric crop around the CoM, nearest-neighbour resampled to output_size^2.

    Depth maps to clamp((v - com_z) / depth_range, -1, 1); invalid pixels and
    pixels outside the source image map to +1.
    """
    com = np.asarray(com, dtype=np.float64)
    if com.shape != (3,) or not np.all(np.isfinite(com)) or com[2] <= 0:
        raise ArgumentError(f"CoM must be a finite 3-vector in front of the camera, got {com}")
    if crop_cube_side <= 0 or depth_range <= 0:
        raise ArgumentError("crop_cube_side and depth_range must be positive")
    camera.check_intrinsics()

    height, width = image.shape
    u0, u1, v0, v1 = crop_window(camera, com, crop_cube_side)
    if np.ceil(u0) > width - 1 or np.floor(u1) < 0 or np.ceil(v0) > height - 1 or np.floor(v1) < 0:
        raise EmptyCropError(f"crop window u=[{u0:.1f}, {u1:.1f}] v=[{v0:.1f}, {v1:.1f}] lies outside the image")

    steps = (np.arange(output_size) + 0.5) / output_size
    cols = np.floor(u0 + steps * (u1 - u0) + 0.5).astype(np.int64)
    rows = np.floor(v0 + steps * (v1 - v0) + 0.5).astype(np.int64)
    col_ok = (cols >= 0) & (cols < width)
    row_ok = (rows >= 0) & (rows < height)

    pixels = np.full((output_size, output_size), BACKGROUND_VALUE, dtype=np.float32)
    inside = row_ok[:, None] & col_ok[None, :]
    src_rows = np.clip(rows, 0, height - 1)[:, None]
    src_cols = np.clip(cols, 0, width - 1)[None, :]
    values = image.values[src_rows, src_cols].astype(np.float64)
    valid = image.validity[src_rows, src_cols] & inside
    normalized = np.clip((values - com[2]) / depth_range, -1.0, 1.0)
    pixels[valid] = normalized[valid]

    meta = CropMeta(com=com, crop_cube_side=crop_cube_side, depth_range=depth_range, source_view=camera.id)
    return NormalizedCrop(pixels=pixels, meta=meta)


def jitter_com(com: np.ndarray, sigma_mm: float, rng: np.random.Generator) -> np.ndarray:
    """Randomly perturbed detection: Gaussian offset of the CoM."""
    if sigma_mm <= 0:
        return np.asarray(com, dtype=np.float64)
    return np.asarray(com, dtype=np.float64) + rng.normal(0.0, sigma_mm, 3)


def normalize_joints(joints_mm: np.ndarray, com: np.ndarray, crop_cube_side: float) -> np.ndarray:
    return (np.asarray(joints_mm, dtype=np.float64) - com) / (crop_cube_side / 2.0)


def denormalize_joints(joints_norm: np.ndarray, com: np.ndarray, crop_cube_side: float) -> np.ndarray:
    com = np.asarray(com, dtype=np.float64)
    if com.ndim == 2:
        com = com[:, None, :]
    return np.asarray(joints_norm, dtype=np.float64) * (crop_cube_side / 2.0) + com


@dataclass
class PreparedSample:
    id: str
    input_crop: NormalizedCrop
    target_crop: Optional[NormalizedCrop]
    joints_mm: Optional[np.ndarray]


def prepare_sample(
    sample: MultiViewSample,
    rig: CameraRig,
    config: PreprocessConfig,
    with_second_view: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> PreparedSample:
    """Crop view 1 around its CoM and view 2 around the same point seen from view 2."""
    first, second = rig.views[0], (rig.views[1] if len(rig.views) > 1 else None)
    com = compute_com(sample.view1, first, config.foreground_band)
    if rng is not None:
        com = jitter_com(com, config.com_jitter_mm, rng)
    crop_args = dict(crop_cube_side=config.crop_cube_side, depth_range=config.depth_range, output_size=config.output_size)
    input_crop = crop_and_normalize(sample.view1, first, com, **crop_args)

    target_crop = None
    if with_second_view:
        if sample.view2 is None or second is None:
            raise ArgumentError(f"sample {sample.id} has no second view")
        com_second = rig.transfer(com[None, :], first.id, second.id)[0]
        target_crop = crop_and_normalize(sample.view2, second, com_second, **crop_args)
    return PreparedSample(id=sample.id, input_crop=input_crop, target_crop=target_crop, joints_mm=sample.joints)


@dataclass
class CropArrays:
    """Stacked crops of a list of samples, ready to become tensors."""

    ids: List[str]
    inputs: np.ndarray  # N x S x S
    targets: Optional[np.ndarray]  # N x S x S
    coms: np.ndarray  # N x 3 mm
    joints_mm: np.ndarray  # N x K x 3, zeros where unlabeled
    labeled: np.ndarray  # N bool
    crop_cube_side: float

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def joints_norm(self) -> np.ndarray:
        normalized = (self.joints_mm - self.coms[:, None, :]) / (self.crop_cube_side / 2.0)
        return np.where(self.labeled[:, None, None], normalized, 0.0)

    def subset(self, indices) -> "CropArrays":
        indices = np.asarray(indices, dtype=np.int64)
        return CropArrays(
            ids=[self.ids[i] for i in indices],
            inputs=self.inputs[indices],
            targets=None if self.targets is None else self.targets[indices],
            coms=self.coms[indices],
            joints_mm=self.joints_mm[indices],
            labeled=self.labeled[indices],
            crop_cube_side=self.crop_cube_side,
        )

    def select(self, ids: List[str]) -> "CropArrays":
        position = {sample_id: i for i, sample_id in enumerate(self.ids)}
        return self.subset([position[sample_id] for sample_id in ids if sample_id in position])


class CropPipeline:
    def __init__(self, config: PreprocessConfig, joint_count: Optional[int] = None, seed: int = 0):
        """
        Turns samples of a split into stacked normalized crops.

        :param config: crop and normalization parameters
        :param joint_count: K, used to shape joint arrays when no sample is labeled
        :param seed: seed of the optional CoM jitter
        """
        self.config = config
        self.joint_count = joint_count
        self.seed = seed

    def process(
        self,
        view: SplitView,
        ids: List[str],
        with_second_view: bool = True,
        log_every: int = 1000,
        epoch: int = 0,
    ) -> CropArrays:
        """Crop ids in order; with CoM jitter on, every epoch draws fresh offsets."""
        joint_count = self.joint_count or view.dataset.joint_count or 1
        jitter = self.config.com_jitter_mm > 0

        kept_ids, inputs, targets, coms, joints, labeled = [], [], [], [], [], []
        error_count = 0
        for i, sample_id in enumerate(ids):
            if i and i % log_every == 0:
                logger.info(f"Cropped {i}/{len(ids)} samples")
            try:
                sample = view.sample(sample_id)
                try:
                    rng = np.random.default_rng([self.seed, epoch, i]) if jitter else None
                    prepared = prepare_sample(sample, view.rig, self.config, with_second_view, rng)
                except EmptyCropError:
                    if not jitter:
                        raise
                    # a jittered window that misses the hand falls back to the detected CoM
                    prepared = prepare_sample(sample, view.rig, self.config, with_second_view)
            except (EmptyFrameError, EmptyCropError) as e:
                logger.warning(f"Skipping sample {sample_id}: {e}")
                error_count += 1
                continue
            kept_ids.append(sample_id)
            inputs.append(prepared.input_crop.pixels)
            if with_second_view:
                targets.append(prepared.target_crop.pixels)
            coms.append(prepared.input_crop.meta.com)
            has_joints = prepared.joints_mm is not None
            joints.append(prepared.joints_mm if has_joints else np.zeros((joint_count, 3)))
            labeled.append(has_joints)

        if not kept_ids:
            raise PreviewError(f"none of the {len(ids)} requested samples could be cropped")
        if error_count:
            logger.warning(f"Cropping finished with {error_count} skipped samples")
        return CropArrays(
            ids=kept_ids,
            inputs=np.stack(inputs).astype(np.float32),
            targets=np.stack(targets).astype(np.float32) if with_second_view else None,
            coms=np.stack(coms),
            joints_mm=np.stack(joints).astype(np.float64),
            labeled=np.asarray(labeled, dtype=bool),
            crop_cube_side=self.config.crop_cube_side,
        )
