"""
Class-wise distribution bookkeeping and transformation.

Each segmenter owns one `AlignmentState`: an EMA estimate of labeled (M^l) and unlabeled (M^u)
class-conditional prediction distributions. Unlabeled predictions are re-weighted row by row
towards the labeled estimate, with an adaptive temperature, and filtered by a dynamic threshold.
The single-distribution baseline (`NaiveDAState`) lives here too.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from coda_lab import settings
from coda_lab.core_types import (
    DistributionMatrix,
    LabelMap,
    ProbabilityMap,
    Role,
    floor_simplex,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignmentState:
    labeled: DistributionMatrix
    unlabeled: DistributionMatrix
    alpha: float = settings.DEFAULT_ALPHA
    # How many times an unlabeled row was rebuilt from the labeled one
    fallback_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"EMA momentum must be in (0, 1), got {self.alpha}")

    @property
    def classes(self) -> int:
        return self.labeled.classes

    @staticmethod
    def uniform(classes: int, alpha: float = settings.DEFAULT_ALPHA) -> "AlignmentState":
        return AlignmentState(
            labeled=DistributionMatrix.uniform(classes, Role.LABELED),
            unlabeled=DistributionMatrix.uniform(classes, Role.UNLABELED),
            alpha=alpha,
        )


def ema(previous: np.ndarray, batch_mean: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * previous + (1.0 - alpha) * batch_mean


def class_mean(probs: np.ndarray, labels: np.ndarray, i: int) -> np.ndarray | None:
    """
    Mean prediction vector over the pixels labeled `i`, or None when there are none.
    """
    members = labels == i
    if not np.any(members):
        return None
    return probs[members].mean(axis=0)


def fallback_row(labeled_row: np.ndarray, unlabeled_row: np.ndarray) -> np.ndarray:
    """
    Rebuild an unlabeled row from the labeled one: M^l_i × mean(M^u_i ⊘ M^l_i).

    The mean runs over the vector components, skipping components where M^l_i sits at the floor.
    Once renormalized, the result is proportional to M^l_i whatever the scalar.
    """
    usable = labeled_row > 2 * settings.EPS_FLOOR
    ratio = float(np.mean(unlabeled_row[usable] / labeled_row[usable]))
    return labeled_row * ratio


def _ema_rows(
    matrix: DistributionMatrix, probs: np.ndarray, labels: np.ndarray, alpha: float
) -> tuple[np.ndarray, list[int]]:
    rows = matrix.rows.copy()
    empty = []
    for i in range(matrix.classes):
        mean = class_mean(probs, labels, i)
        if mean is None:
            empty.append(i)
        else:
            rows[i] = ema(rows[i], mean, alpha)
    return rows, empty


def update_labeled_row(
    state: AlignmentState, batch_probs: ProbabilityMap, batch_labels: LabelMap, i: int
) -> AlignmentState:
    """
    EMA update of M^l_i from the mean prediction over pixels whose ground truth is `i`.

    A class absent from the batch leaves the row unchanged.
    """
    mean = class_mean(batch_probs.flat, batch_labels.flat, i)
    if mean is None:
        return state
    row = ema(state.labeled.row(i), mean, state.alpha)
    return replace(state, labeled=state.labeled.with_row(i, row))


def update_unlabeled_row(
    state: AlignmentState, batch_probs: ProbabilityMap, pseudo_labels: LabelMap, i: int
) -> AlignmentState:
    """
    EMA update of M^u_i from the mean prediction over pixels pseudo-labeled `i`.

    If no pixel carries pseudo-label `i`, the row is rebuilt from M^l_i (`fallback_row`).

    :param pseudo_labels: argmax of the raw, unaligned predictions
    """
    mean = class_mean(batch_probs.flat, pseudo_labels.flat, i)
    if mean is None:
        row = fallback_row(state.labeled.row(i), state.unlabeled.row(i))
        return replace(
            state,
            unlabeled=state.unlabeled.with_row(i, row),
            fallback_count=state.fallback_count + 1,
        )
    row = ema(state.unlabeled.row(i), mean, state.alpha)
    return replace(state, unlabeled=state.unlabeled.with_row(i, row))


def update_distributions(
    state: AlignmentState,
    labeled_probs: np.ndarray,
    labels: np.ndarray,
    unlabeled_probs: np.ndarray,
) -> AlignmentState:
    """
    Update every row of M^l and M^u from one iteration's forward pass.

    Both updates read the previous iteration's matrices, so the fallback uses the labeled
    row as it was before this iteration.

    :param labeled_probs: (N, K) predictions on labeled pixels
    :param labels: (N,) ground truth
    :param unlabeled_probs: (M, K) raw predictions on unlabeled pixels
    :return: new `AlignmentState`
    """
    labeled_rows, _ = _ema_rows(state.labeled, labeled_probs, labels, state.alpha)
    if len(unlabeled_probs) == 0:
        return replace(state, labeled=DistributionMatrix(labeled_rows, Role.LABELED))

    pseudo = np.argmax(unlabeled_probs, axis=1)
    unlabeled_rows, empty = _ema_rows(state.unlabeled, unlabeled_probs, pseudo, state.alpha)
    for i in empty:
        unlabeled_rows[i] = fallback_row(state.labeled.row(i), state.unlabeled.row(i))
    if empty:
        logger.debug("Unlabeled rows rebuilt from labeled rows: %s", empty)

    return replace(
        state,
        labeled=DistributionMatrix(labeled_rows, Role.LABELED),
        unlabeled=DistributionMatrix(unlabeled_rows, Role.UNLABELED),
        fallback_count=state.fallback_count + len(empty),
    )


def temperature(state: AlignmentState, i: int) -> float:
    return 1.0 - float(state.labeled.rows[i, i])


def temperatures(state: AlignmentState) -> np.ndarray:
    return 1.0 - state.labeled.diagonal()


def transform_distribution(
    probs: np.ndarray, labeled_row: np.ndarray, unlabeled_row: np.ndarray, tau
) -> np.ndarray:
    """
    Normalize(F ⊗ (M^l_i)^τ ⊘ M^u_i), broadcast over leading pixel axes.
    """
    factors = labeled_row ** np.asarray(tau)[..., np.newaxis] / unlabeled_row
    aligned = probs * factors
    return aligned / aligned.sum(axis=-1, keepdims=True)


def alignment_factors(state: AlignmentState, rows: np.ndarray) -> np.ndarray:
    """
    Per-pixel multiplicative factors (M^l_i)^τ_i ⊘ M^u_i for the selected rows.

    :param rows: (N,) class index selecting the row per pixel
    :return: (N, K) factors
    """
    tau = temperatures(state)[rows]
    return state.labeled.rows[rows] ** tau[:, np.newaxis] / state.unlabeled.rows[rows]


def align_prediction(state: AlignmentState, pixel_prob: np.ndarray, i: int) -> np.ndarray:
    """
    Align one pixel's prediction using row `i` (the raw argmax of that prediction).
    """
    return transform_distribution(
        np.asarray(pixel_prob, dtype=np.float64),
        state.labeled.row(i),
        state.unlabeled.row(i),
        temperature(state, i),
    )


def dynamic_threshold(state: AlignmentState, i: int) -> float:
    return float(state.unlabeled.rows[i, i])


def expectation_mask(
    state: AlignmentState, confidence: np.ndarray, pseudo: np.ndarray, threshold: float | None = None
) -> np.ndarray:
    """
    Keep pixels whose confidence is strictly above the threshold of their pseudo-label class.

    :param threshold: static value, or None for the dynamic threshold t(i) = M^u_ii
    """
    if threshold is None:
        thresholds = state.unlabeled.diagonal()[pseudo]
    else:
        thresholds = np.full(np.shape(pseudo), float(threshold))
    return confidence > thresholds


@dataclass(frozen=True)
class AlignedMap:
    aligned: ProbabilityMap
    pseudo_labels: LabelMap
    confidence: np.ndarray
    mask: np.ndarray
    factors: np.ndarray


def align_map(
    state: AlignmentState,
    prob_map: ProbabilityMap,
    threshold: float | None = None,
    confidence_source: str = "raw",
) -> AlignedMap:
    """
    Align a whole map and build its pseudo-labels and over-expectation mask.

    Per pixel: the raw argmax selects the alignment row; the pseudo-label is the argmax of the
    aligned vector; the confidence is the raw maximum (or the aligned one); the mask keeps
    pixels whose confidence exceeds the threshold of their pseudo-label class.

    :param state: alignment state of the model that produced `prob_map`
    :param prob_map: raw predictions
    :param threshold: static threshold, None for the dynamic one (diagonal of M^u)
    :param confidence_source: "raw" or "aligned"
    :return: `AlignedMap`
    """
    flat = prob_map.flat
    rows = np.argmax(flat, axis=1)
    factors = alignment_factors(state, rows)
    aligned = flat * factors
    aligned /= aligned.sum(axis=1, keepdims=True)
    pseudo = np.argmax(aligned, axis=1)

    confidence = aligned.max(axis=1) if confidence_source == "aligned" else flat.max(axis=1)
    mask = expectation_mask(state, confidence, pseudo, threshold)

    shape = (prob_map.height, prob_map.width)
    return AlignedMap(
        aligned=ProbabilityMap.from_flat(aligned, *shape),
        pseudo_labels=LabelMap(pseudo.reshape(shape), prob_map.classes),
        confidence=confidence.reshape(shape),
        mask=mask.reshape(shape),
        factors=factors.reshape(prob_map.values.shape),
    )


@dataclass(frozen=True)
class NaiveDAState:
    """
    Single overall labeled distribution and a running average of unlabeled predictions.
    """

    labeled_dist: np.ndarray
    unlabeled_dist: np.ndarray
    alpha: float = settings.DEFAULT_ALPHA

    def __post_init__(self):
        object.__setattr__(self, "labeled_dist", floor_simplex(self.labeled_dist))
        object.__setattr__(self, "unlabeled_dist", floor_simplex(self.unlabeled_dist))

    @staticmethod
    def from_labeled(labeled_dist: np.ndarray, alpha: float = settings.DEFAULT_ALPHA) -> "NaiveDAState":
        classes = len(labeled_dist)
        return NaiveDAState(labeled_dist, np.full(classes, 1.0 / classes), alpha)

    @property
    def factors(self) -> np.ndarray:
        return self.labeled_dist / self.unlabeled_dist


def update_naive_da(state: NaiveDAState, unlabeled_probs: np.ndarray) -> NaiveDAState:
    mean = unlabeled_probs.mean(axis=0)
    return replace(state, unlabeled_dist=ema(state.unlabeled_dist, mean, state.alpha))


def naive_da_align(state: NaiveDAState, prob_map: ProbabilityMap) -> ProbabilityMap:
    """
    Scale every pixel by labeled_dist ⊘ unlabeled_dist and renormalize.
    """
    aligned = prob_map.values * state.factors
    return ProbabilityMap(aligned / aligned.sum(axis=-1, keepdims=True))
