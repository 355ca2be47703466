# test_dataio.py

import json
import shutil

import numpy as np
import pytest

from data_pipeline.dataio import (
    DatasetSplit,
    DepthImage,
    SplitView,
    load_manifest,
    partition,
    read_depth,
    subsample_labeled,
    subsample_validation,
    write_depth,
)
from errors import ArgumentError, DatasetIOError, ManifestParseError


def _ids(prefix, n):
    return [f"{prefix}{i:06d}" for i in range(n)]


def test_load_tiny_dataset(tiny_dataset):
    assert len(tiny_dataset) == 40
    assert tiny_dataset.is_multi_view
    assert len(tiny_dataset.labeled_ids()) == 20
    assert tiny_dataset.rig.view_ids == ["view1", "view2"]

    sample = tiny_dataset.load_sample(tiny_dataset.labeled_ids()[0])
    assert sample.view1.shape == (64, 64)
    assert sample.joints.shape == (10, 3)


def test_depth_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.uniform(300.0, 700.0, (64, 64)).astype(np.float32)
    values[rng.random((64, 64)) < 0.3] = 0.0
    image = DepthImage.from_values(values)

    write_depth(image, tmp_path / "x.f32")
    loaded = read_depth(tmp_path / "x.f32", (64, 64))

    assert np.array_equal(loaded.values, image.values)
    assert np.array_equal(loaded.validity, image.validity)


def test_truncated_depth_file_names_sample(tmp_path, tiny_dataset_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_path, root)
    target = root / "depth" / "000005_view2.f32"
    target.write_bytes(target.read_bytes()[: 63 * 64 * 4])

    with pytest.raises(DatasetIOError) as excinfo:
        load_manifest(root)

    assert excinfo.value.sample_id == "000005"


def test_non_orthonormal_extrinsics_rejected(tmp_path, tiny_dataset_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset_path, root)
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["views"][1]["extrinsics"][0] *= 2.0
    (root / "manifest.json").write_text(json.dumps(manifest))

    with pytest.raises(ManifestParseError) as excinfo:
        load_manifest(root)

    assert excinfo.value.field_path.startswith("views.1")


def test_invalid_json_rejected(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")

    with pytest.raises(ManifestParseError):
        load_manifest(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetIOError):
        load_manifest(tmp_path)


def test_partition_is_disjoint_and_deterministic(tiny_dataset):
    split = partition(tiny_dataset, seed=1)

    assert split == partition(tiny_dataset, seed=1)
    assert len(split.test) == 2 and len(split.validation) == 2
    assert sorted(split.train_labeled + split.validation + split.test) == sorted(tiny_dataset.labeled_ids())
    assert sorted(split.train_unlabeled) == sorted(tiny_dataset.unlabeled_ids())


def test_overlapping_split_rejected():
    with pytest.raises(ValueError):
        DatasetSplit(train_labeled=["a"], test=["a"])


def test_subsample_full_pool_keeps_everything(tiny_dataset):
    base = partition(tiny_dataset)

    split = subsample_labeled(base, len(base.train_labeled), seed=0)

    assert sorted(split.train_labeled) == sorted(base.train_labeled)
    assert split.train_unlabeled == base.train_unlabeled


def test_subsample_too_many_rejected(tiny_dataset):
    base = partition(tiny_dataset)

    with pytest.raises(ArgumentError):
        subsample_labeled(base, len(base.train_labeled) + 1, seed=0)


def test_subsample_moves_rest_to_unlabeled(tiny_dataset):
    base = partition(tiny_dataset)

    split = subsample_labeled(base, 5, seed=3)

    assert len(split.train_labeled) == 5
    assert len(split.train_unlabeled) == len(base.train_unlabeled) + len(base.train_labeled) - 5
    assert split.test == base.test and split.validation == base.validation
    assert split == subsample_labeled(base, 5, seed=3)
    assert any(subsample_labeled(base, 5, seed=s).train_labeled != split.train_labeled for s in range(4, 10))


def test_masked_samples_never_expose_joints(tiny_dataset):
    split = subsample_labeled(partition(tiny_dataset), 3, seed=0)
    view = SplitView(tiny_dataset, split)

    for sample_id in split.train_unlabeled:
        assert view.joints(sample_id) is None
        sample = view.sample(sample_id)
        assert sample.joints is None and not sample.labeled
    for sample_id in split.train_labeled:
        assert view.joints(sample_id).shape == (10, 3)


@pytest.mark.parametrize(
    "n_labeled, original, expected",
    [(100, 8252, 30), (10, 8252, 3), (43640, 8252, 8252)],
)
def test_validation_size(n_labeled, original, expected):
    split = DatasetSplit(train_labeled=_ids("l", n_labeled), validation=_ids("v", original), seed=0)

    shrunk = subsample_validation(split)

    assert len(shrunk.validation) == expected
    assert not shrunk.validation_disabled
    assert set(shrunk.validation) <= set(split.validation)


def test_validation_disabled_for_three_labels():
    split = DatasetSplit(train_labeled=_ids("l", 3), validation=_ids("v", 50), seed=0)

    shrunk = subsample_validation(split)

    assert shrunk.validation == []
    assert shrunk.validation_disabled
