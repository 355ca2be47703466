# analysis.py

from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger
from PIL import Image
from pydantic import BaseModel
from scipy.spatial.distance import cdist

from data_pipeline.dataio import DatasetHandle, DatasetSplit, SplitView
from errors import ArgumentError, DatasetIOError, ShapeError
from feature_pipeline.preprocess import BACKGROUND_VALUE, CropArrays, CropPipeline, PreprocessConfig
from model_pipeline.nets import PreViewModel, load_checkpoint
from model_pipeline.trainer import encode_crops

DEFAULT_NEIGHBORS = 8
DEFAULT_TOP_SAMPLES = 10


class NeighborResult(BaseModel):
    query_id: str
    neighbor_ids: List[str]
    distances: List[float]


class Activation(BaseModel):
    id: str
    activation: float


def nearest_neighbors(
    query_codes: np.ndarray,
    gallery_codes: np.ndarray,
    k: int = DEFAULT_NEIGHBORS,
    query_ids: Optional[Sequence[str]] = None,
    gallery_ids: Optional[Sequence[str]] = None,
) -> List[NeighborResult]:
    """Exact k nearest gallery codes per query by Euclidean distance; ties go to the lower gallery index."""
    query_codes = np.atleast_2d(np.asarray(query_codes, dtype=np.float64))
    gallery_codes = np.atleast_2d(np.asarray(gallery_codes, dtype=np.float64))
    if query_codes.shape[1] != gallery_codes.shape[1]:
        raise ShapeError(f"query codes have d={query_codes.shape[1]}, gallery codes d={gallery_codes.shape[1]}")
    if k < 0 or k > len(gallery_codes):
        raise ArgumentError(f"k={k} must lie in [0, {len(gallery_codes)}] (gallery size)")
    query_ids = [str(i) for i in range(len(query_codes))] if query_ids is None else list(query_ids)
    gallery_ids = [str(i) for i in range(len(gallery_codes))] if gallery_ids is None else list(gallery_ids)

    distances = cdist(query_codes, gallery_codes, "euclidean")
    order = np.argsort(distances, axis=1, kind="stable")[:, :k]
    return [
        NeighborResult(
            query_id=query_ids[q],
            neighbor_ids=[gallery_ids[g] for g in order[q]],
            distances=distances[q, order[q]].tolist(),
        )
        for q in range(len(query_codes))
    ]


def rank_activations(codes: np.ndarray, ids: Sequence[str], neuron: int, k: int = DEFAULT_TOP_SAMPLES) -> List[Activation]:
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if not 0 <= neuron < codes.shape[1]:
        raise ArgumentError(f"neuron index {neuron} out of range for d_T={codes.shape[1]}")
    if k < 0:
        raise ArgumentError(f"k must be non-negative, got {k}")
    ranked = sorted(zip(ids, codes[:, neuron].tolist()), key=lambda pair: (-pair[1], pair[0]))
    return [Activation(id=sample_id, activation=value) for sample_id, value in ranked[:k]]


def _crops(dataset: DatasetHandle, ids: List[str], preprocess: PreprocessConfig, second_view: bool) -> CropArrays:
    return CropPipeline(preprocess, dataset.joint_count).process(
        SplitView(dataset, DatasetSplit()), ids, with_second_view=second_view
    )


def _load(checkpoint: Union[str, Path], preprocess: Optional[PreprocessConfig]) -> Tuple[PreViewModel, PreprocessConfig]:
    model, _, extra = load_checkpoint(checkpoint)
    return model, (preprocess or PreprocessConfig(**extra.get("preprocess", {}))).without_jitter()


def dataset_neighbors(
    checkpoint: Union[str, Path],
    dataset: DatasetHandle,
    query_ids: List[str],
    gallery_ids: List[str],
    k: int = DEFAULT_NEIGHBORS,
    preprocess: Optional[PreprocessConfig] = None,
) -> List[NeighborResult]:
    model, preprocess = _load(checkpoint, preprocess)
    queries = _crops(dataset, query_ids, preprocess, second_view=False)
    gallery = _crops(dataset, gallery_ids, preprocess, second_view=False)
    return nearest_neighbors(
        encode_crops(model, queries.inputs), encode_crops(model, gallery.inputs), k, queries.ids, gallery.ids
    )


def top_activating(
    checkpoint: Union[str, Path],
    dataset: DatasetHandle,
    neuron: int,
    k: int = DEFAULT_TOP_SAMPLES,
    ids: Optional[List[str]] = None,
    preprocess: Optional[PreprocessConfig] = None,
) -> List[Activation]:
    """Samples that drive one latent unit the most, in descending activation order."""
    model, preprocess = _load(checkpoint, preprocess)
    if not 0 <= neuron < model.config.d_T:
        raise ArgumentError(f"neuron index {neuron} out of range for d_T={model.config.d_T}")
    crops = _crops(dataset, dataset.ids if ids is None else ids, preprocess, second_view=False)
    return rank_activations(encode_crops(model, crops.inputs), crops.ids, neuron, k)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Linear map of [-1, 1] onto 0..255; background (+1) renders white."""
    return np.clip(np.round((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def grid_image(inputs: np.ndarray, targets: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """One row per sample: input, target, prediction tiles side by side."""
    if not (inputs.shape == targets.shape == predictions.shape) or inputs.ndim != 3:
        raise ShapeError("grid tiles must be equally shaped N x S x S arrays")
    rows = [np.concatenate([x, t, p], axis=1) for x, t, p in zip(inputs, targets, predictions)]
    return to_uint8(np.concatenate(rows, axis=0))


def predict_views(model: PreViewModel, crops: CropArrays) -> np.ndarray:
    device = next(model.parameters()).device
    model.eval()
    with torch.no_grad():
        inputs = torch.as_tensor(crops.inputs, dtype=torch.float32, device=device).unsqueeze(1)
        coms = torch.as_tensor(crops.coms, dtype=torch.float32, device=device)
        predicted = model.decode(model.encode(inputs), coms)
    return predicted[:, 0].cpu().numpy()


def prediction_grid(
    checkpoint: Union[str, Path],
    dataset: DatasetHandle,
    ids: List[str],
    out_path: Union[str, Path],
    preprocess: Optional[PreprocessConfig] = None,
) -> Path:
    """Write an 8-bit grayscale grid of input, target and predicted view per sample."""
    model, preprocess = _load(checkpoint, preprocess)
    predicts_input = model.target_view == dataset.rig.view_ids[0]
    crops = _crops(dataset, ids, preprocess, second_view=not predicts_input)
    targets = crops.inputs if predicts_input else crops.targets
    image = grid_image(crops.inputs, targets, predict_views(model, crops))

    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image, mode="L").save(out_path)
    except OSError as e:
        logger.error(f"Could not write grid image {out_path}: {e}")
        raise DatasetIOError(f"could not write {out_path}: {e}") from e
    logger.success(f"Prediction grid of {len(crops)} samples written to {out_path}")
    return out_path


def foreground_correlation(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean per-sample Pearson correlation between predicted and target views over target foreground pixels."""
    scores = []
    for prediction, target in zip(predictions, targets):
        foreground = target < BACKGROUND_VALUE
        if foreground.sum() < 2:
            continue
        p, t = prediction[foreground].astype(np.float64), target[foreground].astype(np.float64)
        if p.std() == 0 or t.std() == 0:
            scores.append(0.0)
            continue
        scores.append(float(np.corrcoef(p, t)[0, 1]))
    return float(np.mean(scores)) if scores else 0.0
