"""
Segmentation metrics: confusion counts, mIoU, Dice, Jaccard, and surface distances (ASD, HD, 95HD).

Surface distances are Euclidean, in grid units (isotropic spacing).
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from coda_lab import settings
from coda_lab.core_types import LabelMap
from coda_lab.exceptions import DimensionMismatchError, EmptyEvaluationError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    """
    One-vs-rest pixel counts per class.
    """

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


def confusion_matrix(pred: LabelMap, truth: LabelMap, classes: int | None = None) -> np.ndarray:
    """
    K×K matrix, rows = truth, columns = prediction.
    """
    if pred.labels.shape != truth.labels.shape:
        raise DimensionMismatchError("label maps", truth.labels.shape, pred.labels.shape)
    classes = classes or max(pred.classes, truth.classes)
    index = truth.flat * classes + pred.flat
    return np.bincount(index, minlength=classes * classes).reshape(classes, classes)


def confusion(pred: LabelMap, truth: LabelMap, classes: int | None = None) -> ConfusionCounts:
    matrix = confusion_matrix(pred, truth, classes)
    tp = np.diagonal(matrix).copy()
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    tn = matrix.sum() - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(numerator: float, denominator: float) -> float:
    # Class absent from both prediction and truth: full agreement
    return 1.0 if denominator == 0 else numerator / denominator


def jaccard(counts: ConfusionCounts, cls: int) -> float:
    tp, fp, fn = counts.tp[cls], counts.fp[cls], counts.fn[cls]
    return _ratio(float(tp), float(tp + fp + fn))


def dice(counts: ConfusionCounts, cls: int) -> float:
    tp, fp, fn = counts.tp[cls], counts.fp[cls], counts.fn[cls]
    return _ratio(2.0 * tp, float(2 * tp + fp + fn))


def iou(counts: ConfusionCounts, cls: int) -> float:
    return jaccard(counts, cls)


def miou(counts: ConfusionCounts, absent: str = "one") -> float:
    """
    Mean IoU over classes.

    :param counts: confusion counts
    :param absent: "one" scores classes absent from both maps as IoU 1, "skip" leaves them out
    """
    values = []
    for cls in range(counts.classes):
        present = counts.tp[cls] + counts.fp[cls] + counts.fn[cls] > 0
        if present or absent == "one":
            values.append(iou(counts, cls))
    return float(np.mean(values)) if values else 1.0


@dataclass(frozen=True)
class VoxelSet:
    """
    Unique integer coordinates (2D or 3D) of foreground cells.
    """

    points: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        points = np.array(self.points, dtype=np.int64)
        if points.ndim != 2:
            raise DimensionMismatchError("voxel coordinates", "(N, D)", points.shape)
        if len(points):
            points = np.unique(points, axis=0)
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def from_mask(mask: np.ndarray) -> "VoxelSet":
        return VoxelSet(np.argwhere(mask))


def extract_surface(mask: np.ndarray) -> VoxelSet:
    """
    Foreground cells with at least one background or out-of-bounds face neighbor.

    Face connectivity: 4 neighbors in 2D, 6 in 3D.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return VoxelSet.from_mask(mask & ~interior)


def _require_points(a: VoxelSet, b: VoxelSet):
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("surface distance needs two non-empty point sets")


def _nearest_brute_force(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = source[:, np.newaxis, :].astype(np.float64) - target[np.newaxis, :, :]
    return np.sqrt(np.min(np.sum(diff**2, axis=2), axis=1))


def _nearest_kdtree(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(target.astype(np.float64)).query(source.astype(np.float64))
    return np.asarray(distances, dtype=np.float64)


def directed_distances(a: VoxelSet, b: VoxelSet, method: str = "auto") -> np.ndarray:
    """
    Distance from every point of `a` to its nearest point of `b`.

    :param method: "brute" (O(N·M)), "kdtree", or "auto" (brute below the configured limit)
    """
    _require_points(a, b)
    if method == "auto":
        large = max(len(a), len(b)) >= settings.BRUTE_FORCE_LIMIT
        method = "kdtree" if large else "brute"
    nearest = _nearest_kdtree if method == "kdtree" else _nearest_brute_force
    return nearest(a.points, b.points) * a.spacing


def asd(a: VoxelSet, b: VoxelSet, method: str = "auto") -> float:
    d_ab = directed_distances(a, b, method)
    d_ba = directed_distances(b, a, method)
    return float((d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba)))


def hausdorff(a: VoxelSet, b: VoxelSet, method: str = "auto") -> float:
    return float(max(directed_distances(a, b, method).max(), directed_distances(b, a, method).max()))


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """
    Nearest-rank percentile: the ⌈p/100·n⌉-th smallest value.
    """
    ordered = np.sort(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd95(a: VoxelSet, b: VoxelSet, pooled: bool = True, method: str = "auto") -> float:
    """
    95th percentile Hausdorff distance.

    :param pooled: percentile of the pooled a→b and b→a distances; otherwise the larger of
        the two directed percentiles
    """
    d_ab = directed_distances(a, b, method)
    d_ba = directed_distances(b, a, method)
    if pooled:
        return nearest_rank(np.concatenate([d_ab, d_ba]), settings.HD_PERCENTILE)
    return max(nearest_rank(d_ab, settings.HD_PERCENTILE), nearest_rank(d_ba, settings.HD_PERCENTILE))


@dataclass(frozen=True)
class ClassScores:
    dice: float
    jaccard: float
    iou: float


@dataclass(frozen=True)
class MetricReport:
    per_class: dict[int, ClassScores]
    miou: float
    asd: float | None
    hd: float | None
    hd95: float | None

    def as_dict(self) -> dict:
        return {
            "per_class": {
                str(cls): {"dice": s.dice, "jaccard": s.jaccard, "iou": s.iou}
                for cls, s in self.per_class.items()
            },
            "miou": self.miou,
            "asd": self.asd,
            "hd": self.hd,
            "hd95": self.hd95,
        }


def metric_report(
    preds: Sequence[LabelMap], truths: Sequence[LabelMap], absent: str = "one"
) -> MetricReport:
    """
    Full report over a set of image pairs.

    Overlap scores come from confusion counts summed over all images. Surface distances are
    averaged over (image, foreground class) pairs where both prediction and truth are non-empty;
    they are None when no such pair exists.
    """
    if len(preds) != len(truths):
        raise DimensionMismatchError("prediction/truth pairs", len(truths), len(preds))
    if not truths:
        raise EmptyEvaluationError()
    classes = truths[0].classes
    counts = confusion(preds[0], truths[0], classes)
    for pred, truth in zip(preds[1:], truths[1:]):
        counts = counts + confusion(pred, truth, classes)

    surface = {"asd": [], "hd": [], "hd95": []}
    for pred, truth in zip(preds, truths):
        for cls in range(1, classes):
            pred_surface = extract_surface(pred.labels == cls)
            truth_surface = extract_surface(truth.labels == cls)
            if len(pred_surface) == 0 or len(truth_surface) == 0:
                continue
            surface["asd"].append(asd(truth_surface, pred_surface))
            surface["hd"].append(hausdorff(truth_surface, pred_surface))
            surface["hd95"].append(hd95(truth_surface, pred_surface))

    def mean_or_none(values: list[float]) -> float | None:
        return float(np.mean(values)) if values else None

    return MetricReport(
        per_class={
            cls: ClassScores(dice(counts, cls), jaccard(counts, cls), iou(counts, cls))
            for cls in range(classes)
        },
        miou=miou(counts, absent),
        asd=mean_or_none(surface["asd"]),
        hd=mean_or_none(surface["hd"]),
        hd95=mean_or_none(surface["hd95"]),
    )
