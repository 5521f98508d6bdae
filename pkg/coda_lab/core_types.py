"""
Shared data vocabulary: probability fields, label fields, distribution matrices, dataset splits.

All arrays are row-major, value objects are frozen and their arrays are read-only.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from coda_lab import settings
from coda_lab.exceptions import DimensionMismatchError, InvalidLabelError, NonFiniteError


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ProbabilityMap:
    """
    Per-pixel class probability field of shape (H, W, K).
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DimensionMismatchError("probability map", "(H, W, K)", values.shape)
        if values.shape[2] < 2:
            raise DimensionMismatchError("probability map classes", ">= 2", values.shape[2])
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.classes)

    @staticmethod
    def from_pixels(probs: np.ndarray) -> "ProbabilityMap":
        """
        Wrap an (N, K) pixel batch as a 1×N strip.
        """
        return ProbabilityMap(np.asarray(probs)[np.newaxis, :, :])

    @staticmethod
    def from_flat(probs: np.ndarray, height: int, width: int) -> "ProbabilityMap":
        probs = np.asarray(probs)
        return ProbabilityMap(probs.reshape(height, width, probs.shape[-1]))


@dataclass(frozen=True)
class LabelMap:
    """
    Per-pixel class index field of shape (H, W).
    """

    labels: np.ndarray
    classes: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise DimensionMismatchError("label map", "(H, W)", labels.shape)
        if self.classes < 2:
            raise DimensionMismatchError("label map classes", ">= 2", self.classes)
        if labels.size:
            if labels.min() < 0:
                raise InvalidLabelError(int(labels.min()), self.classes)
            if labels.max() >= self.classes:
                raise InvalidLabelError(int(labels.max()), self.classes)
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.labels.reshape(-1)

    @staticmethod
    def from_pixels(labels: np.ndarray, classes: int) -> "LabelMap":
        return LabelMap(np.asarray(labels)[np.newaxis, :], classes)


class Role(str, Enum):
    LABELED = "labeled"
    UNLABELED = "unlabeled"


def floor_simplex(row: np.ndarray, floor: float = settings.EPS_FLOOR) -> np.ndarray:
    """
    Project a non-negative vector onto the simplex with every entry >= `floor`.

    Entries below the floor are lifted to it, the remaining mass is rescaled among the others.
    A vector already satisfying the floor is only renormalized.

    :param row: non-negative vector with positive sum
    :param floor: minimum entry
    :return: simplex vector
    """
    row = np.asarray(row, dtype=np.float64)
    row = row / row.sum()
    if row.min() >= floor:
        return row

    pinned = np.zeros(row.shape, dtype=bool)
    # Each pass pins at least one more entry, so K passes are enough
    for _ in range(row.size):
        pinned |= row < floor
        free_mass = 1.0 - floor * pinned.sum()
        free = row[~pinned]
        row = np.where(pinned, floor, row * free_mass / free.sum())
        if row[~pinned].min(initial=np.inf) >= floor:
            break
    return row


@dataclass(frozen=True)
class DistributionMatrix:
    """
    K×K matrix of class-conditional marginal prediction distributions, one simplex row per class.

    Rows are floored and renormalized when stored.
    """

    rows: np.ndarray
    role: Role

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise DimensionMismatchError("distribution matrix", "(K, K)", rows.shape)
        rows = np.stack([floor_simplex(row) for row in rows])
        object.__setattr__(self, "rows", _frozen(rows))

    @property
    def classes(self) -> int:
        return self.rows.shape[0]

    @staticmethod
    def uniform(classes: int, role: Role) -> "DistributionMatrix":
        return DistributionMatrix(np.full((classes, classes), 1.0 / classes), role)

    def row(self, i: int) -> np.ndarray:
        return self.rows[i]

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.rows).copy()

    def with_row(self, i: int, row: np.ndarray) -> "DistributionMatrix":
        rows = self.rows.copy()
        rows[i] = row
        return DistributionMatrix(rows, self.role)


@dataclass(frozen=True)
class PixelFeatures:
    """
    Per-pixel feature vectors of shape (H, W, d).
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise DimensionMismatchError("pixel features", "(H, W, d)", values.shape)
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[:5]
            raise NonFiniteError("pixel features", [str(index.tolist()) for index in bad])
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.dim)


def compute_features(intensity: np.ndarray) -> PixelFeatures:
    """
    Build the default d=5 feature stack: intensity, row, column, 3×3 mean, 3×3 variance.

    Coordinates are normalized to [0, 1]. Neighborhood statistics use mirrored borders,
    so a horizontally flipped image has the same statistics, flipped.

    :param intensity: (H, W) image
    :return: `PixelFeatures` of dimension `settings.FEATURE_DIM`
    """
    intensity = np.asarray(intensity, dtype=np.float64)
    height, width = intensity.shape
    rows, cols = np.meshgrid(
        np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1),
        np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1),
        indexing="ij",
    )
    mean = ndimage.uniform_filter(intensity, size=3, mode="reflect")
    mean_sq = ndimage.uniform_filter(intensity**2, size=3, mode="reflect")
    variance = np.maximum(mean_sq - mean**2, 0.0)
    return PixelFeatures(np.stack([intensity, rows, cols, mean, variance], axis=-1))


@dataclass(frozen=True)
class ValidityReport:
    passed: bool
    max_deviation: float
    min_entry: float
    max_entry: float


def validate_probability_map(prob_map: ProbabilityMap) -> ValidityReport:
    """
    Report how far a probability map is from holding a simplex vector at every pixel.

    :param prob_map: map to check
    :return: `ValidityReport`, passed iff every vector sums to 1 within tolerance and entries are in [0, 1]
    """
    flat = prob_map.flat
    if flat.size == 0:
        return ValidityReport(True, 0.0, 0.0, 0.0)
    deviation = float(np.max(np.abs(flat.sum(axis=1) - 1.0)))
    min_entry = float(flat.min())
    max_entry = float(flat.max())
    passed = (
        bool(np.all(np.isfinite(flat)))
        and deviation <= settings.SIMPLEX_TOL
        and min_entry >= 0.0
        and max_entry <= 1.0
    )
    return ValidityReport(passed, deviation, min_entry, max_entry)


def one_hot(labels: LabelMap, classes: int) -> ProbabilityMap:
    flat = labels.flat
    if flat.size and flat.max() >= classes:
        raise InvalidLabelError(int(flat.max()), classes)
    encoded = np.eye(classes, dtype=np.float64)[flat]
    return ProbabilityMap.from_flat(encoded, labels.height, labels.width)


def argmax_labels(prob_map: ProbabilityMap) -> LabelMap:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    labels = np.argmax(prob_map.values, axis=2)
    return LabelMap(labels, prob_map.classes)


@dataclass(frozen=True)
class LabeledImage:
    features: PixelFeatures
    labels: LabelMap


@dataclass(frozen=True)
class TrainingData:
    """
    Everything a training run may see. Carries no hidden ground truth.
    """

    labeled: tuple[LabeledImage, ...]
    unlabeled: tuple[PixelFeatures, ...]
    classes: int


@dataclass(frozen=True)
class DatasetSplit:
    """
    Labeled and unlabeled training images, hidden truth of the unlabeled ones, held-out evaluation set.
    """

    labeled: tuple[LabeledImage, ...]
    unlabeled: tuple[PixelFeatures, ...]
    hidden_truth: tuple[LabelMap, ...]
    evaluation: tuple[LabeledImage, ...]
    classes: int
    labeled_ids: tuple[str, ...] = field(default=())
    unlabeled_ids: tuple[str, ...] = field(default=())
    evaluation_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.hidden_truth) != len(self.unlabeled):
            raise DimensionMismatchError("hidden truth", len(self.unlabeled), len(self.hidden_truth))
        groups = [set(self.labeled_ids), set(self.unlabeled_ids), set(self.evaluation_ids)]
        if (groups[0] & groups[1]) or (groups[0] & groups[2]) or (groups[1] & groups[2]):
            raise ValueError("Labeled, unlabeled and evaluation images must be disjoint")

    def training_view(self) -> TrainingData:
        return TrainingData(self.labeled, self.unlabeled, self.classes)
