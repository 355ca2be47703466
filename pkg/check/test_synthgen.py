# test_synthgen.py

import math

import numpy as np
import pytest

from data_pipeline.camera import CameraRig, CameraView, default_rig
from data_pipeline.dataio import load_manifest
from data_pipeline.synthgen import (
    KinematicModel,
    PoseParams,
    PoseSampling,
    capsules_from_joints,
    capsule_ray_distance,
    forward_kinematics,
    generate_dataset,
    joints_visible,
    labeled_count,
    pixel_rays,
    render_depth,
    render_sample,
    sample_pose,
    segment_distance,
    self_intersects,
)
from errors import ConfigurationError, LimitViolationError
from feature_pipeline.preprocess import compute_com


def _rodrigues(rotvec):
    angle = np.linalg.norm(rotvec)
    if angle == 0:
        return np.eye(3)
    k = rotvec / angle
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * cross + (1 - math.cos(angle)) * cross @ cross


def _homogeneous(rotation=np.eye(3), translation=np.zeros(3)):
    matrix = np.eye(4)
    matrix[:3, :3] = rotation
    matrix[:3, 3] = translation
    return matrix


def _rx(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rz(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def fk_oracle(model, pose):
    """Joint positions from chained 4x4 transforms."""
    world = _homogeneous(_rodrigues(np.asarray(pose.global_rotation, dtype=float)), pose.global_translation)
    points = [world @ np.array([0.0, 0.0, 0.0, 1.0])]
    for finger in range(model.finger_count):
        offset = (finger - (model.finger_count - 1) / 2.0) * model.finger_spacing
        frame = world @ _homogeneous(translation=[offset, model.palm_radius, 0.0]) @ _homogeneous(_rz(pose.abduction_angles[finger]))
        points.append(frame @ np.array([0.0, 0.0, 0.0, 1.0]))
        for segment in range(model.segments_per_finger):
            frame = frame @ _homogeneous(_rx(pose.flexion_angles[finger * model.segments_per_finger + segment]))
            frame = frame @ _homogeneous(translation=[0.0, model.segment_lengths[segment], 0.0])
            points.append(frame @ np.array([0.0, 0.0, 0.0, 1.0]))
    return np.stack(points)[:, :3]


def ray_march_depth(model, joints_cam, camera, resolution, t_near=200.0, t_far=800.0):
    """Depth per pixel found by marching the signed distance of the capsule union along each ray."""
    rays, ray_z = pixel_rays(camera, resolution)
    capsules = capsules_from_joints(model, joints_cam)

    def sdf(points):
        distance = np.full(points.shape[:-1], np.inf)
        for capsule in capsules:
            axis = capsule.end - capsule.start
            length2 = axis @ axis
            if length2 > 0:
                t = np.clip(((points - capsule.start) @ axis) / length2, 0.0, 1.0)
            else:
                t = np.zeros(points.shape[:-1])
            closest = capsule.start + t[..., None] * axis
            distance = np.minimum(distance, np.linalg.norm(points - closest, axis=-1) - capsule.radius)
        return distance

    coarse = np.arange(t_near, t_far, 0.5)
    inside = sdf(coarse[:, None, None] * rays[None, :, :]) < 0
    hit = inside.any(axis=0)
    first = np.argmax(inside, axis=0)

    depth = np.zeros(len(rays))
    for ray_index in np.flatnonzero(hit):
        start = coarse[max(first[ray_index] - 1, 0)]
        fine = start + np.arange(0, 11) * 0.05
        fine_inside = sdf(fine[:, None] * rays[ray_index][None, :]) < 0
        depth[ray_index] = fine[np.argmax(fine_inside)] * ray_z[ray_index]
    return depth.reshape(resolution)


def test_rest_pose_joint_positions():
    model = KinematicModel()
    joints = forward_kinematics(model, PoseParams.rest(model)).positions

    assert joints.shape == (model.joint_count, 3)
    np.testing.assert_allclose(joints[0], [0.0, 0.0, 0.0])
    for finger in range(model.finger_count):
        root = joints[1 + finger * 3]
        np.testing.assert_allclose(root, [(finger - 1) * 24.0, 30.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(joints[2 + finger * 3], root + [0.0, 45.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(joints[3 + finger * 3], root + [0.0, 80.0, 0.0], atol=1e-12)


def test_single_segment_flexed_ninety_degrees_points_along_z():
    model = KinematicModel(finger_count=1, segments_per_finger=1, segment_lengths=[50.0], segment_radii=[5.0])
    pose = PoseParams.rest(model)
    pose.flexion_angles = np.array([math.pi / 2])

    joints = forward_kinematics(model, pose).positions

    np.testing.assert_allclose(joints[2], joints[1] + [0.0, 0.0, 50.0], atol=1e-12)


def test_forward_kinematics_matches_homogeneous_chain():
    model = KinematicModel()
    rng = np.random.default_rng(0)
    for _ in range(100):
        pose = sample_pose(model, PoseSampling(orientation_range_deg=(180.0, 90.0, 180.0)), rng)
        np.testing.assert_allclose(forward_kinematics(model, pose).positions, fk_oracle(model, pose), atol=1e-9)


def test_limit_violation_names_parameter_and_index():
    model = KinematicModel()
    pose = PoseParams.rest(model)
    pose.flexion_angles[2] = 2.0

    with pytest.raises(LimitViolationError) as excinfo:
        forward_kinematics(model, pose)

    assert excinfo.value.parameter == "flexion_angles"
    assert excinfo.value.index == 2


def test_empty_model_renders_all_invalid():
    model = KinematicModel(finger_count=0, palm_radius=0.0)
    camera = default_rig().view("view1")

    image = render_depth(model, PoseParams.rest(model, (0.0, 0.0, 500.0)), camera)

    assert not image.validity.any()
    assert np.all(image.values == 0)


def test_sphere_on_optical_axis_has_exact_depth():
    model = KinematicModel(finger_count=0, palm_radius=20.0)
    camera = default_rig().view("view1")

    image = render_depth(model, PoseParams.rest(model, (0.0, 0.0, 500.0)), camera)

    assert image.values[32, 32] == pytest.approx(480.0, abs=1e-6)


def test_degenerate_intrinsics_rejected():
    model = KinematicModel()
    camera = CameraView(id="bad", fx=0.0, fy=80.0, cx=32.0, cy=32.0, extrinsics=np.eye(4).reshape(-1).tolist())

    with pytest.raises(ConfigurationError):
        render_depth(model, PoseParams.rest(model, (0.0, 0.0, 500.0)), camera)


def test_segment_distance_parallel_and_crossing():
    assert segment_distance(
        np.array([0.0, 0, 0]), np.array([10.0, 0, 0]), np.array([0.0, 5, 0]), np.array([10.0, 5, 0])
    ) == pytest.approx(5.0)
    assert segment_distance(
        np.array([-5.0, 0, 0]), np.array([5.0, 0, 0]), np.array([0.0, -5, 3]), np.array([0.0, 5, 3])
    ) == pytest.approx(3.0)


def test_closely_spaced_fingers_self_intersect():
    model = KinematicModel(finger_spacing=4.0)
    assert self_intersects(model, forward_kinematics(model, PoseParams.rest(model)).positions)
    assert not self_intersects(KinematicModel(), forward_kinematics(KinematicModel(), PoseParams.rest(KinematicModel())).positions)


def test_capsule_ray_distance_misses_are_infinite():
    model = KinematicModel(finger_count=0, palm_radius=10.0)
    capsule = capsules_from_joints(model, np.array([[0.0, 0.0, 500.0]]))[0]
    rays = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])

    distances = capsule_ray_distance(rays, capsule)

    assert distances[0] == pytest.approx(490.0)
    assert np.isinf(distances[1])


def test_render_matches_ray_march():
    model = KinematicModel()
    rig = default_rig(resolution=32, focal_px=40.0)
    camera = rig.view("view1")
    rng = np.random.default_rng(1)
    agree, total = 0, 0
    for _ in range(20):
        pose = sample_pose(model, PoseSampling(), rng)
        joints = forward_kinematics(model, pose).positions
        analytic = render_depth(model, pose, camera, rig.resolution, joints=joints)
        oracle = ray_march_depth(model, camera.world_to_camera(joints), camera, rig.resolution)
        both = analytic.validity & (oracle > 0)
        agree += int(np.sum(np.abs(analytic.values[both] - oracle[both]) <= 0.5))
        total += int(both.sum())

    assert total > 0
    assert agree / total >= 0.99


def test_views_are_geometrically_consistent():
    model = KinematicModel()
    rig = default_rig(resolution=128, focal_px=160.0)
    first, second = rig.views
    consistent, total = 0, 0
    for index in range(5):
        rendered = render_sample(model, rig, PoseSampling(), seed=7, index=index)
        view1, view2 = rendered.views["view1"], rendered.views["view2"]
        capsules = capsules_from_joints(model, second.world_to_camera(rendered.joints_world))

        rows, cols = np.nonzero(view1.validity)
        points = rig.transfer(first.back_project(cols, rows, view1.values[rows, cols]), "view1", "view2")
        pixels = second.project(points)
        for point, (u, v) in zip(points, pixels):
            col, row = int(np.floor(u)), int(np.floor(v))
            if not (0 <= col < 127 and 0 <= row < 127):
                continue
            # the four pixel centres around (u, v); a silhouette among them leaves the depth undefined
            if not view2.validity[row:row + 2, col:col + 2].all():
                continue
            direction = point / np.linalg.norm(point)
            nearest = min(capsule_ray_distance(direction[None, :], capsule)[0] for capsule in capsules)
            if nearest < np.linalg.norm(point) - 2.0:
                continue  # occluded in view 2
            total += 1
            cell = view2.values[row:row + 2, col:col + 2]
            if cell.min() - 2.0 <= point[2] <= cell.max() + 2.0:
                consistent += 1

    assert total > 0
    assert consistent / total >= 0.9


def test_generated_joints_visible_in_some_view(tiny_dataset):
    for sample_id in tiny_dataset.labeled_ids():
        joints = np.asarray(tiny_dataset.entry(sample_id).joints)
        world = tiny_dataset.rig.view("view1").camera_to_world(joints)
        assert joints_visible(tiny_dataset.rig, world)


def test_labeled_count_rounds_up():
    assert labeled_count(10, 0.3) == 3
    assert labeled_count(10, 0.25) == 3
    assert labeled_count(1, 0.0) == 0
    assert labeled_count(7, 1.0) == 7


def test_generate_labeled_fraction(tmp_path, hand_model, rig):
    generate_dataset(hand_model, rig, n_samples=10, labeled_fraction=0.3, seed=0, out_path=tmp_path)

    dataset = load_manifest(tmp_path)

    assert len(dataset.labeled_ids()) == 3
    assert len(dataset) == 10
    assert dataset.joint_count == hand_model.joint_count


def _file_bytes(root):
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


def test_generation_is_byte_identical(tmp_path, hand_model, rig):
    generate_dataset(hand_model, rig, n_samples=1, labeled_fraction=1.0, seed=4, out_path=tmp_path / "a", name="d")
    generate_dataset(hand_model, rig, n_samples=1, labeled_fraction=1.0, seed=4, out_path=tmp_path / "b", name="d")

    assert _file_bytes(tmp_path / "a") == _file_bytes(tmp_path / "b")


def test_generation_independent_of_workers(tmp_path, hand_model, rig):
    generate_dataset(hand_model, rig, n_samples=6, labeled_fraction=0.5, seed=2, out_path=tmp_path / "a", name="d")
    generate_dataset(hand_model, rig, n_samples=6, labeled_fraction=0.5, seed=2, out_path=tmp_path / "b", name="d", workers=3)

    assert _file_bytes(tmp_path / "a") == _file_bytes(tmp_path / "b")


def test_generation_rejects_bad_arguments(tmp_path, rig):
    with pytest.raises(ConfigurationError):
        generate_dataset(KinematicModel(finger_count=0), rig, 1, 1.0, 0, tmp_path)
    with pytest.raises(ConfigurationError):
        generate_dataset(KinematicModel(), rig, 1, 1.5, 0, tmp_path)


def test_single_view_rig_generates_single_view_dataset(tmp_path, hand_model, rig):
    single = CameraRig(resolution=rig.resolution, views=rig.views[:1])
    generate_dataset(hand_model, single, n_samples=2, labeled_fraction=1.0, seed=0, out_path=tmp_path)

    dataset = load_manifest(tmp_path)

    assert not dataset.is_multi_view
    assert dataset.load_sample(dataset.ids[0]).view2 is None


def test_dataset_coms_cover_translation_range(tmp_path, rig):
    # a near-spherical hand keeps the surface CoM at a fixed offset from the palm centre
    stub = KinematicModel(finger_count=1, segments_per_finger=1, segment_lengths=[1.0], segment_radii=[1.0])
    sampling = PoseSampling(orientation_range_deg=(0.0, 0.0, 0.0))
    generate_dataset(stub, rig, n_samples=1000, labeled_fraction=0.0, seed=5, out_path=tmp_path, sampling=sampling, workers=4)
    dataset = load_manifest(tmp_path)
    camera = dataset.rig.views[0]

    coms = np.stack([compute_com(dataset.load_sample(i).view1, camera) for i in dataset.ids])

    low = np.asarray(sampling.centre_mm) - sampling.translation_range_mm
    high = np.asarray(sampling.centre_mm) + sampling.translation_range_mm
    span = high - low
    centred = coms - (np.median(coms, axis=0) - np.asarray(sampling.centre_mm))
    assert np.all(np.abs(centred.min(axis=0) - low) <= 0.05 * span)
    assert np.all(np.abs(centred.max(axis=0) - high) <= 0.05 * span)
