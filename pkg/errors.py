# errors.py

from typing import Iterable, Optional, Tuple


class PreviewError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(PreviewError, ValueError):
    pass


class ManifestParseError(ConfigurationError):
    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class ArgumentError(PreviewError, ValueError):
    pass


class ShapeError(PreviewError, ValueError):
    pass


class LimitViolationError(PreviewError, ValueError):
    def __init__(self, parameter: str, index: int, value: float, low: float, high: float):
        self.parameter = parameter
        self.index = index
        super().__init__(
            f"{parameter}[{index}] = {value:.6g} outside joint limits [{low:.6g}, {high:.6g}]"
        )


class EmptyFrameError(PreviewError, ValueError):
    pass


class EmptyCropError(PreviewError, ValueError):
    pass


class DatasetIOError(PreviewError, OSError):
    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        prefix = f"sample {sample_id}: " if sample_id is not None else ""
        super().__init__(prefix + message)


class MissingPredictionsError(ArgumentError):
    def __init__(self, missing_ids: Iterable[str]):
        self.missing_ids = sorted(missing_ids)
        super().__init__(f"predictions missing for {len(self.missing_ids)} sample(s): {', '.join(self.missing_ids)}")


class NumericalFailure(PreviewError, RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def format_validation_error(exc) -> Tuple[str, str]:
    """Turn the first pydantic error into a dotted field path plus message."""
    first = exc.errors()[0]
    path = ".".join(str(part) for part in first.get("loc", ())) or "<root>"
    return path, first.get("msg", str(exc))
