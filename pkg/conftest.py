# conftest.py

from typing import Dict, NamedTuple

import pytest

from data_pipeline.camera import default_rig
from data_pipeline.dataio import DatasetHandle, DatasetSplit, load_manifest, partition
from data_pipeline.synthgen import KinematicModel, generate_dataset
from feature_pipeline.preprocess import PreprocessConfig
from model_pipeline.nets import NetworkConfig, build_networks, load_checkpoint, save_checkpoint
from model_pipeline.trainer import TrainConfig, TrainReport, compare_pretraining, pretrain
from settings import RUN_SLOW_TESTS, configure_logging


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs, enabled with PREVIEW_RUN_SLOW=1")
    configure_logging(level="WARNING")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="set PREVIEW_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def hand_model():
    return KinematicModel()


@pytest.fixture(scope="session")
def tiny_dataset_path(tmp_path_factory, hand_model, rig):
    """40 two-view samples, half of them annotated."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    generate_dataset(hand_model, rig, n_samples=40, labeled_fraction=0.5, seed=3, out_path=out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_path):
    return load_manifest(tiny_dataset_path)


@pytest.fixture(scope="session")
def labeled_dataset_path(tmp_path_factory, hand_model, rig):
    out = tmp_path_factory.mktemp("labeled_dataset")
    generate_dataset(hand_model, rig, n_samples=30, labeled_fraction=1.0, seed=5, out_path=out)
    return out


@pytest.fixture(scope="session")
def labeled_dataset(labeled_dataset_path):
    return load_manifest(labeled_dataset_path)


@pytest.fixture
def tiny_network():
    return NetworkConfig(d_T=16, base_channels=8, joint_count=10)


@pytest.fixture(scope="session")
def probe_dataset(tmp_path_factory, hand_model, rig):
    """80 annotated samples: enough for a linear probe with n = 60."""
    out = tmp_path_factory.mktemp("probe_dataset")
    generate_dataset(hand_model, rig, n_samples=80, labeled_fraction=1.0, seed=11, out_path=out)
    return load_manifest(out)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_dataset):
    """A one-epoch PreView checkpoint of the tiny network."""
    run_dir = tmp_path_factory.mktemp("tiny_run")
    network = NetworkConfig(d_T=16, base_channels=8, joint_count=10)
    config = TrainConfig(mode="preview", epochs=1, batch_size=8, seed=0, network=network)
    report = pretrain(tiny_dataset, partition(tiny_dataset), config, run_dir)
    return report.checkpoint_path


class PretrainedPair(NamedTuple):
    dataset: DatasetHandle
    split: DatasetSplit
    reports: Dict[str, TrainReport]
    untrained_checkpoint: str


@pytest.fixture(scope="session")
def pretrained_pair(tmp_path_factory, hand_model, rig):
    """PreView and autoencoder pretrained alike on 4000 samples, plus the untrained network they start from."""
    root = tmp_path_factory.mktemp("pretrained_pair")
    generate_dataset(hand_model, rig, n_samples=4000, labeled_fraction=0.3, seed=21, out_path=root / "data", workers=4)
    dataset = load_manifest(root / "data")
    split = partition(dataset)
    network = NetworkConfig(d_T=50, base_channels=16)
    config = TrainConfig(mode="preview", epochs=20, batch_size=64, learning_rate=1e-3, network=network)
    reports = compare_pretraining(dataset, split, config, root / "runs")

    trained, _, _ = load_checkpoint(reports["preview"].checkpoint_path)
    untrained, _ = build_networks(trained.config, seed=config.seed, target_view=trained.target_view)
    untrained.set_com_normalization(trained.com_mean.numpy(), float(trained.com_scale))
    path = save_checkpoint(root / "untrained.pt", untrained, extra={"preprocess": PreprocessConfig().model_dump()})
    return PretrainedPair(dataset, split, reports, str(path))
