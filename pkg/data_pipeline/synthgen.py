# synthgen.py

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from data_pipeline.camera import CameraRig, CameraView
from data_pipeline.dataio import DepthImage, Manifest, SampleEntry, write_depth, write_manifest
from errors import ConfigurationError, DatasetIOError, LimitViolationError, ShapeError

FLEXION_LIMITS = (0.0, math.radians(100.0))
ABDUCTION_LIMITS = (-math.radians(20.0), math.radians(20.0))
LIMIT_TOLERANCE = 1e-12


class KinematicModel(BaseModel):
    """
    Articulated capsule "hand": a palm sphere plus fingers made of capsules.

    Joint order: palm centre, then per finger its root followed by the end
    point of every segment (the last one is the fingertip).
    """

    model_config = ConfigDict(extra="forbid")

    finger_count: int = Field(3, ge=0)
    segments_per_finger: int = Field(2, ge=1)
    segment_lengths: List[float] = Field(default_factory=lambda: [45.0, 35.0])
    segment_radii: List[float] = Field(default_factory=lambda: [8.0, 7.0])
    palm_radius: float = Field(30.0, ge=0)
    finger_spacing: float = Field(24.0, ge=0)

    @field_validator("segment_lengths", "segment_radii")
    @classmethod
    def _check_positive(cls, value: List[float]) -> List[float]:
        if any(not (v > 0 and math.isfinite(v)) for v in value):
            raise ValueError("segment lengths and radii must be strictly positive")
        return value

    @model_validator(mode="after")
    def _check_lengths(self) -> "KinematicModel":
        if self.finger_count > 0:
            for name in ("segment_lengths", "segment_radii"):
                if len(getattr(self, name)) != self.segments_per_finger:
                    raise ValueError(f"{name} needs one entry per segment ({self.segments_per_finger})")
        return self

    @property
    def joint_count(self) -> int:
        return 1 + self.finger_count * (self.segments_per_finger + 1)

    @property
    def articulated_segments(self) -> int:
        return self.finger_count * self.segments_per_finger

    def finger_root(self, finger: int) -> np.ndarray:
        offset = (finger - (self.finger_count - 1) / 2.0) * self.finger_spacing
        return np.array([offset, self.palm_radius, 0.0])


@dataclass
class PoseParams:
    global_rotation: np.ndarray  # axis-angle, radians
    global_translation: np.ndarray  # mm
    flexion_angles: np.ndarray  # one per articulated segment
    abduction_angles: np.ndarray  # one per finger root

    @classmethod
    def rest(cls, model: KinematicModel, translation=(0.0, 0.0, 0.0)) -> "PoseParams":
        return cls(
            global_rotation=np.zeros(3),
            global_translation=np.asarray(translation, dtype=np.float64),
            flexion_angles=np.zeros(model.articulated_segments),
            abduction_angles=np.zeros(model.finger_count),
        )


@dataclass
class JointSet:
    positions: np.ndarray  # K x 3 mm


@dataclass
class Capsule:
    start: np.ndarray
    end: np.ndarray
    radius: float
    finger: int  # -1 for the palm
    segment: int


class PoseSampling(BaseModel):
    """Ranges of the uniform pose distribution."""

    model_config = ConfigDict(extra="forbid")

    centre_mm: Tuple[float, float, float] = (0.0, 0.0, 500.0)
    translation_range_mm: Tuple[float, float, float] = (40.0, 40.0, 50.0)
    orientation_range_deg: Tuple[float, float, float] = (30.0, 30.0, 30.0)
    max_attempts: int = Field(200, ge=1)


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def check_pose_limits(model: KinematicModel, pose: PoseParams):
    flexion = np.asarray(pose.flexion_angles, dtype=np.float64)
    abduction = np.asarray(pose.abduction_angles, dtype=np.float64)
    if flexion.shape != (model.articulated_segments,):
        raise ShapeError(f"expected {model.articulated_segments} flexion angles, got {flexion.shape}")
    if abduction.shape != (model.finger_count,):
        raise ShapeError(f"expected {model.finger_count} abduction angles, got {abduction.shape}")
    for name, values, (low, high) in (
        ("flexion_angles", flexion, FLEXION_LIMITS),
        ("abduction_angles", abduction, ABDUCTION_LIMITS),
    ):
        for index, value in enumerate(values):
            if not (low - LIMIT_TOLERANCE <= value <= high + LIMIT_TOLERANCE):
                raise LimitViolationError(name, index, float(value), low, high)


def _hand_frame_chain(model: KinematicModel, pose: PoseParams) -> List[np.ndarray]:
    positions = [np.zeros(3)]
    segments = model.segments_per_finger
    for finger in range(model.finger_count):
        point = model.finger_root(finger)
        rotation = _rot_z(float(pose.abduction_angles[finger]))
        positions.append(point)
        for segment in range(segments):
            rotation = rotation @ _rot_x(float(pose.flexion_angles[finger * segments + segment]))
            point = point + rotation @ np.array([0.0, model.segment_lengths[segment], 0.0])
            positions.append(point)
    return positions


def forward_kinematics(model: KinematicModel, pose: PoseParams) -> JointSet:
    """
    Joint positions of a pose, composing rigid transforms along every finger.

    Flexion rotates a segment about the finger's local x axis, abduction turns
    the whole finger about the local z axis at its root. The global rotation
    (axis-angle) and translation place the hand frame in the world frame.
    """
    check_pose_limits(model, pose)
    hand = np.stack(_hand_frame_chain(model, pose))
    rotation = Rotation.from_rotvec(np.asarray(pose.global_rotation, dtype=np.float64)).as_matrix()
    world = hand @ rotation.T + np.asarray(pose.global_translation, dtype=np.float64)
    return JointSet(positions=world)


def capsules_from_joints(model: KinematicModel, joints: np.ndarray) -> List[Capsule]:
    capsules = []
    if model.palm_radius > 0:
        capsules.append(Capsule(joints[0], joints[0], model.palm_radius, -1, -1))
    stride = model.segments_per_finger + 1
    for finger in range(model.finger_count):
        base = 1 + finger * stride
        for segment in range(model.segments_per_finger):
            capsules.append(
                Capsule(joints[base + segment], joints[base + segment + 1], model.segment_radii[segment], finger, segment)
            )
    return capsules


def segment_distance(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> float:
    """Closest distance between segments p1q1 and p2q2."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    eps = 1e-12
    if a <= eps and e <= eps:
        return float(np.linalg.norm(p1 - p2))
    if a <= eps:
        s, t = 0.0, float(np.clip(f / e, 0.0, 1.0))
    else:
        c = d1 @ r
        if e <= eps:
            t, s = 0.0, float(np.clip(-c / a, 0.0, 1.0))
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, float(np.clip(-c / a, 0.0, 1.0))
            elif t > 1.0:
                t, s = 1.0, float(np.clip((b - c) / a, 0.0, 1.0))
    return float(np.linalg.norm((p1 + d1 * s) - (p2 + d2 * t)))


def _adjacent(first: Capsule, second: Capsule) -> bool:
    if first.finger == -1 or second.finger == -1:
        finger_capsule = second if first.finger == -1 else first
        return finger_capsule.segment == 0
    return first.finger == second.finger and abs(first.segment - second.segment) == 1


def self_intersects(model: KinematicModel, joints: np.ndarray) -> bool:
    capsules = capsules_from_joints(model, joints)
    for i in range(len(capsules)):
        for j in range(i + 1, len(capsules)):
            first, second = capsules[i], capsules[j]
            if _adjacent(first, second):
                continue
            if segment_distance(first.start, first.end, second.start, second.end) < first.radius + second.radius:
                return True
    return False


def pixel_rays(camera: CameraView, resolution: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    """Unit ray directions (H*W, 3) through integer pixel positions, plus their z components."""
    height, width = resolution
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    directions = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    norms = np.linalg.norm(directions, axis=1)
    return directions / norms[:, None], 1.0 / norms


def _sphere_hit(rays: np.ndarray, centre: np.ndarray, radius: float) -> np.ndarray:
    b = rays @ centre
    h = b * b - (centre @ centre - radius * radius)
    t = np.full(rays.shape[0], np.inf)
    hit = h >= 0
    t_hit = b[hit] - np.sqrt(h[hit])
    t[hit] = np.where(t_hit > 0, t_hit, np.inf)
    return t


def _cylinder_hit(rays: np.ndarray, start: np.ndarray, end: np.ndarray, radius: float) -> np.ndarray:
    # Body of the capsule only; the caps are handled as spheres.
    ba = end - start
    oa = -start
    baba = ba @ ba
    bard = rays @ ba
    baoa = ba @ oa
    rdoa = rays @ oa
    oaoa = oa @ oa
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - radius * radius * baba
    h = b * b - a * c
    t = np.full(rays.shape[0], np.inf)
    ok = (h >= 0) & (a > 1e-12)
    t_hit = (-b[ok] - np.sqrt(h[ok])) / a[ok]
    y = baoa + t_hit * bard[ok]
    inside = (y > 0) & (y < baba) & (t_hit > 0)
    t[np.flatnonzero(ok)[inside]] = t_hit[inside]
    return t


def capsule_ray_distance(rays: np.ndarray, capsule: Capsule) -> np.ndarray:
    """Distance along unit rays from the camera centre to the first capsule surface hit (inf if missed)."""
    t = np.minimum(_sphere_hit(rays, capsule.start, capsule.radius), _sphere_hit(rays, capsule.end, capsule.radius))
    if np.any(capsule.end != capsule.start):
        t = np.minimum(t, _cylinder_hit(rays, capsule.start, capsule.end, capsule.radius))
    return t


def render_depth(
    model: KinematicModel,
    pose: PoseParams,
    camera: CameraView,
    resolution: Tuple[int, int] = (64, 64),
    joints: Optional[np.ndarray] = None,
) -> DepthImage:
    """
    Analytic depth map of the capsule hand seen by one camera.

    Depth is measured along the optical axis to the nearest capsule surface hit
    by each pixel ray; pixels whose ray misses every capsule are invalid (0).
    """
    camera.check_intrinsics()
    if joints is None:
        joints = forward_kinematics(model, pose).positions
    joints_cam = camera.world_to_camera(joints)
    rays, ray_z = pixel_rays(camera, resolution)
    nearest = np.full(rays.shape[0], np.inf)
    for capsule in capsules_from_joints(model, joints_cam):
        nearest = np.minimum(nearest, capsule_ray_distance(rays, capsule))
    depth = np.where(np.isfinite(nearest), nearest * ray_z, 0.0)
    return DepthImage.from_values(depth.reshape(resolution))


def sample_pose(model: KinematicModel, sampling: PoseSampling, rng: np.random.Generator) -> PoseParams:
    euler = rng.uniform(-1.0, 1.0, 3) * np.radians(sampling.orientation_range_deg)
    rotation = Rotation.from_euler("zxy", euler).as_rotvec()
    translation = np.asarray(sampling.centre_mm) + rng.uniform(-1.0, 1.0, 3) * np.asarray(sampling.translation_range_mm)
    return PoseParams(
        global_rotation=rotation,
        global_translation=translation,
        flexion_angles=rng.uniform(*FLEXION_LIMITS, model.articulated_segments),
        abduction_angles=rng.uniform(*ABDUCTION_LIMITS, model.finger_count),
    )


def joints_visible(rig: CameraRig, joints_world: np.ndarray) -> bool:
    """Every joint projects inside the image bounds of at least one view."""
    height, width = rig.resolution
    seen = np.zeros(len(joints_world), dtype=bool)
    for view in rig.views:
        cam = view.world_to_camera(joints_world)
        in_front = cam[:, 2] > 0
        pixels = view.project(np.where(in_front[:, None], cam, 1.0))
        inside = in_front & (pixels[:, 0] >= 0) & (pixels[:, 0] <= width - 1) & (pixels[:, 1] >= 0) & (pixels[:, 1] <= height - 1)
        seen |= inside
    return bool(np.all(seen))


@dataclass
class RenderedSample:
    index: int
    pose: PoseParams
    joints_world: np.ndarray
    views: Dict[str, DepthImage]
    attempts: int


def render_sample(
    model: KinematicModel,
    rig: CameraRig,
    sampling: PoseSampling,
    seed: int,
    index: int,
    noise_std_mm: float = 0.0,
) -> RenderedSample:
    """Draw and render one sample from its own counter-based stream (seed, index)."""
    rng = np.random.default_rng([seed, index])
    for attempt in range(1, sampling.max_attempts + 1):
        pose = sample_pose(model, sampling, rng)
        joints = forward_kinematics(model, pose).positions
        if self_intersects(model, joints) or not joints_visible(rig, joints):
            continue
        views = {}
        for view in rig.views:
            image = render_depth(model, pose, view, rig.resolution, joints=joints)
            if noise_std_mm > 0:
                noisy = image.values + rng.normal(0.0, noise_std_mm, image.shape) * image.validity
                image = DepthImage.from_values(np.where(image.validity, np.maximum(noisy, 1e-3), 0.0))
            views[view.id] = image.to_float32()
        return RenderedSample(index=index, pose=pose, joints_world=joints, views=views, attempts=attempt)
    logger.warning(f"Sample {index}: no valid pose after {sampling.max_attempts} draws")
    raise ConfigurationError(
        f"could not draw a valid pose for sample {index} in {sampling.max_attempts} attempts; widen the sampling ranges"
    )


def labeled_count(n_samples: int, labeled_fraction: float) -> int:
    # round first so 0.3 * 10 does not become 4
    return int(math.ceil(round(labeled_fraction * n_samples, 9)))


def generate_dataset(
    model: KinematicModel,
    rig: CameraRig,
    n_samples: int,
    labeled_fraction: float,
    seed: int,
    out_path,
    sampling: Optional[PoseSampling] = None,
    noise_std_mm: float = 0.0,
    workers: int = 1,
    name: Optional[str] = None,
) -> Path:
    """
    Generate a synchronized multi-view depth dataset in the manifest format.

    Args:
        model: Kinematic hand model (K >= 4 joints).
        rig: Camera rig; joints are stored in the frame of its first view.
        n_samples: Number of samples (>= 1).
        labeled_fraction: Exactly ceil(fraction * n) samples carry joint annotations.
        seed: Seed; sample i draws from the stream (seed, i) so output does not depend on workers.
        out_path: Dataset directory (created if missing).
        sampling: Pose distribution ranges.
        noise_std_mm: Optional additive Gaussian depth noise on valid pixels.
        workers: Rendering threads.

    Returns:
        Path: the written manifest.json.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigurationError(f"labeled_fraction must be in [0, 1], got {labeled_fraction}")
    if model.joint_count < 4:
        raise ConfigurationError(f"kinematic model has K={model.joint_count} joints, at least 4 are required")
    sampling = sampling or PoseSampling()
    out_path = Path(out_path)
    depth_dir = out_path / "depth"
    try:
        depth_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directory {out_path}: {e}") from e

    n_labeled = labeled_count(n_samples, labeled_fraction)
    label_rng = np.random.default_rng(seed)
    labeled = set(label_rng.choice(n_samples, size=n_labeled, replace=False).tolist())
    first_view = rig.views[0]

    logger.info(f"Generating {n_samples} samples ({n_labeled} labeled) into {out_path}")

    def _render(index: int) -> RenderedSample:
        return render_sample(model, rig, sampling, seed, index, noise_std_mm)

    entries: List[SampleEntry] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for rendered in pool.map(_render, range(n_samples)):
            sample_id = f"{rendered.index:06d}"
            files = {}
            try:
                for view_id, image in rendered.views.items():
                    relative = f"depth/{sample_id}_{view_id}.f32"
                    write_depth(image, out_path / relative)
                    files[view_id] = relative
            except OSError as e:
                logger.error(f"Failed to write depth for sample {sample_id}: {e}")
                raise DatasetIOError(f"cannot write depth files: {e}", sample_id) from e

            joints = None
            if rendered.index in labeled:
                joints = first_view.world_to_camera(rendered.joints_world).tolist()
            entries.append(SampleEntry(id=sample_id, files=files, joints=joints, labeled=joints is not None))

            if (rendered.index + 1) % 500 == 0:
                logger.info(f"Rendered {rendered.index + 1}/{n_samples} samples")

    manifest = Manifest(
        name=name or out_path.name or "synthetic",
        num_samples=n_samples,
        resolution=rig.resolution,
        views=rig.views,
        samples=entries,
    )
    try:
        manifest_path = write_manifest(manifest, out_path)
    except OSError as e:
        raise DatasetIOError(f"cannot write manifest: {e}") from e
    logger.success(f"Dataset {manifest.name} written: {n_samples} samples, {n_labeled} labeled")
    return manifest_path
