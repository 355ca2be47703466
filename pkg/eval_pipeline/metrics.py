# metrics.py

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from errors import ArgumentError, ConfigurationError, DatasetIOError, MissingPredictionsError, ShapeError

AUC_MAX_THRESHOLD = 80.0
DEFAULT_THRESHOLDS = np.arange(0.0, AUC_MAX_THRESHOLD + 1.0, 1.0)


class EvalReport(BaseModel):
    me_mm: float
    js_curve: List[Tuple[float, float]]
    fs_curve: List[Tuple[float, float]]
    js80: float
    fs80: float
    frame_count: int
    joint_count: int


def joint_errors(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Per-joint Euclidean errors (frames x K) in mm."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 3 or preds.shape[-1] != 3:
        raise ShapeError(f"predictions {preds.shape} and ground truth {gts.shape} must both be frames x K x 3")
    if not (np.all(np.isfinite(preds)) and np.all(np.isfinite(gts))):
        raise ArgumentError("predictions and ground truth must be finite")
    return np.linalg.norm(preds - gts, axis=2)


def mean_joint_error(preds: np.ndarray, gts: np.ndarray) -> float:
    return float(joint_errors(preds, gts).mean())


def _check_thresholds(thresholds: Sequence[float]) -> np.ndarray:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ArgumentError("success curves need at least one threshold")
    if np.any(thresholds < 0) or np.any(np.diff(thresholds) <= 0):
        raise ArgumentError("thresholds must be non-negative and strictly increasing")
    return thresholds


def success_curves(
    preds: np.ndarray,
    gts: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Joint- and frame-based success rates.

    A joint counts as a success when its error is <= the threshold; a frame when
    all of its joints do.

    Returns:
        (js_curve, fs_curve), each an array of (threshold, rate) rows.
    """
    thresholds = _check_thresholds(thresholds)
    errors = joint_errors(preds, gts)
    within = errors[None, :, :] <= thresholds[:, None, None]
    js = within.mean(axis=(1, 2))
    fs = within.all(axis=2).mean(axis=1)
    return np.stack([thresholds, js], axis=1), np.stack([thresholds, fs], axis=1)


def auc80(curve: np.ndarray, max_threshold: float = AUC_MAX_THRESHOLD) -> float:
    """Trapezoidal area under a success curve on a 1 mm grid over [0, 80] mm, divided by 80."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 2 or curve.shape[1] != 2 or len(curve) == 0:
        raise ShapeError(f"a success curve is a list of (threshold, rate) rows, got shape {curve.shape}")
    if curve[0, 0] > 0 or curve[-1, 0] < max_threshold:
        raise ArgumentError(f"curve covers [{curve[0, 0]}, {curve[-1, 0]}] mm, needs [0, {max_threshold}]")
    grid = np.arange(0.0, max_threshold + 1.0, 1.0)
    rates = np.interp(grid, curve[:, 0], curve[:, 1])
    return float(np.trapz(rates, grid) / max_threshold)


def evaluate(preds: np.ndarray, gts: np.ndarray, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    preds = np.asarray(preds, dtype=np.float64)
    js_curve, fs_curve = success_curves(preds, gts, thresholds)
    # AUCs always integrate the standard grid, whatever thresholds are reported
    js_grid, fs_grid = success_curves(preds, gts, DEFAULT_THRESHOLDS)
    return EvalReport(
        me_mm=mean_joint_error(preds, gts),
        js_curve=[tuple(row) for row in js_curve.tolist()],
        fs_curve=[tuple(row) for row in fs_curve.tolist()],
        js80=auc80(js_grid),
        fs80=auc80(fs_grid),
        frame_count=preds.shape[0],
        joint_count=preds.shape[1],
    )


def load_predictions(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a {sample id: K x 3 mm} predictions document."""
    path = Path(path)
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise DatasetIOError(f"predictions file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"predictions file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"predictions file {path} must map sample ids to K x 3 joint lists")
    return {sample_id: np.asarray(joints, dtype=np.float64) for sample_id, joints in raw.items()}


def write_predictions(path: Union[str, Path], predictions: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({sample_id: np.asarray(j).tolist() for sample_id, j in predictions.items()}, f, indent=2)
    return path


def evaluate_predictions(
    predictions: Dict[str, np.ndarray],
    ground_truth: Dict[str, np.ndarray],
    ids: Optional[List[str]] = None,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Evaluate manifest-keyed predictions; every requested id must have a prediction."""
    ids = list(ground_truth) if ids is None else ids
    missing = [sample_id for sample_id in ids if sample_id not in predictions]
    if missing:
        raise MissingPredictionsError(missing)
    preds = np.stack([predictions[sample_id] for sample_id in ids])
    gts = np.stack([ground_truth[sample_id] for sample_id in ids])
    report = evaluate(preds, gts, thresholds)
    logger.info(f"ME {report.me_mm:.2f} mm, JS80 {report.js80:.3f}, FS80 {report.fs80:.3f} over {len(ids)} frames")
    return report


def write_eval_report(report: EvalReport, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_report.json", "w") as f:
        f.write(report.model_dump_json(indent=2))
    pd.DataFrame(report.js_curve, columns=["threshold_mm", "rate"]).to_csv(out_dir / "js_curve.csv", index=False)
    pd.DataFrame(report.fs_curve, columns=["threshold_mm", "rate"]).to_csv(out_dir / "fs_curve.csv", index=False)
    logger.success(f"Evaluation report written to {out_dir}")
    return out_dir / "eval_report.json"
