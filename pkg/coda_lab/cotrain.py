"""
Co-training engine.

Two segmenters see the same pixel batches. Each iteration updates the class-wise distributions,
computes the supervised loss on labeled pixels and the over-expectation cross-pseudo loss on
unlabeled pixels, then takes one SGD step for both models. Mode flags switch pieces off for the
ablation rows (plain co-training, naive alignment, no threshold, static thresholds).
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from tqdm import tqdm

from coda_lab import settings
from coda_lab.alignment import (
    AlignmentState,
    NaiveDAState,
    align_map,
    expectation_mask,
    naive_da_align,
    update_distributions,
    update_naive_da,
)
from coda_lab.config import TrainConfig
from coda_lab.core_types import (
    DatasetSplit,
    LabeledImage,
    LabelMap,
    ProbabilityMap,
    TrainingData,
    one_hot,
)
from coda_lab.exceptions import (
    DimensionMismatchError,
    EmptyEvaluationError,
    EmptyInputError,
    NonFiniteLossError,
)
from coda_lab.metrics import MetricReport, confusion, metric_report, miou
from coda_lab.segmenter import (
    SegmenterDims,
    SegmenterState,
    backpropagate,
    cross_entropy,
    forward,
    forward_pass,
    init,
    predict_labels,
    sgd_step,
)
from coda_lab.synthdata import augment_pixels, empirical_distribution, minority_classes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossTerms:
    value: float
    dlogits: tuple[np.ndarray, np.ndarray]
    mask_fractions: tuple[float, float] | None = None


def supervised_loss(probs_1: ProbabilityMap, probs_2: ProbabilityMap, labels: LabelMap) -> LossTerms:
    """
    Mean over labeled pixels of −y·log F1 plus −y·log F2.

    :return: loss value and the logit gradient of each model
    """
    if probs_1.values.shape != probs_2.values.shape or probs_1.values.shape[:2] != labels.labels.shape:
        raise DimensionMismatchError("supervised batch", labels.labels.shape, probs_1.values.shape[:2])
    targets = one_hot(labels, probs_1.classes).flat
    weights = np.ones(len(targets))
    loss_1, dlogits_1 = cross_entropy(probs_1.flat, targets, weights)
    loss_2, dlogits_2 = cross_entropy(probs_2.flat, targets, weights)
    return LossTerms(loss_1 + loss_2, (dlogits_1, dlogits_2))


@dataclass(frozen=True)
class PseudoView:
    """
    One model's side of the cross supervision on an unlabeled batch.

    `student` is the distribution this model is trained through, `targets` and `mask` are what
    it hands to the other model.
    """

    student: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def pseudo_view(
    config: TrainConfig,
    probs: np.ndarray,
    alignment: AlignmentState,
    naive: NaiveDAState | None = None,
) -> PseudoView:
    """
    Build a model's aligned distribution, pseudo-labels and mask for its raw predictions.

    :param config: mode, threshold and confidence settings
    :param probs: (N, K) raw predictions on unlabeled pixels
    :param alignment: this model's alignment state
    :param naive: this model's naive alignment state, required for `cotrain+naiveDA`
    """
    mode = config.mode
    prob_map = ProbabilityMap.from_pixels(probs)
    if mode.class_alignment:
        aligned = align_map(alignment, prob_map, config.threshold, config.confidence_source).aligned.flat
    elif mode.naive_alignment:
        aligned = naive_da_align(naive, prob_map).flat
    else:
        aligned = probs

    pseudo = np.argmax(aligned, axis=1)
    if mode.over_expectation:
        confidence = aligned.max(axis=1) if config.confidence_source == "aligned" else probs.max(axis=1)
        mask = expectation_mask(alignment, confidence, pseudo, config.threshold)
    else:
        mask = np.ones(len(probs), dtype=bool)

    if config.soft_targets:
        targets = aligned
    else:
        targets = np.eye(probs.shape[1])[pseudo]
    return PseudoView(student=aligned, targets=targets, mask=mask)


def oe_cross_loss(
    config: TrainConfig,
    alignments: Sequence[AlignmentState],
    probs_1: np.ndarray,
    probs_2: np.ndarray,
    naive_states: Sequence[NaiveDAState] | None = None,
) -> LossTerms:
    """
    Over-expectation cross-pseudo loss on one unlabeled batch.

    Each model's aligned output is supervised by the other model's masked pseudo-labels. The
    teacher side is a constant target, so each gradient reaches only the student. The aligned
    output equals softmax(logits + log w) with w fixed, hence the logit gradient is aligned − target.
    Both directional terms are normalized by their mask count and summed.

    :return: loss value, logit gradient per model, mask fraction per model
    """
    naive_states = naive_states or (None, None)
    views = [
        pseudo_view(config, probs, alignment, naive)
        for probs, alignment, naive in zip((probs_1, probs_2), alignments, naive_states)
    ]
    # 2 → 1, then 1 → 2
    loss_1, dlogits_1 = cross_entropy(views[0].student, views[1].targets, views[1].mask)
    loss_2, dlogits_2 = cross_entropy(views[1].student, views[0].targets, views[0].mask)
    fractions = (float(np.mean(views[0].mask)), float(np.mean(views[1].mask)))
    return LossTerms(loss_1 + loss_2, (dlogits_1, dlogits_2), fractions)


def lr_at(config: TrainConfig, step: int) -> float:
    """
    Learning rate at a 0-based step.

     - poly: lr·(1 − step/I_max)^power
     - exponential: lr·0.001^(step/I_max)
     - constant: lr
    """
    progress = step / config.max_iterations
    if config.lr_schedule == "poly":
        return config.lr * (1.0 - progress) ** config.lr_power
    if config.lr_schedule == "exponential":
        return config.lr * settings.EXPONENTIAL_LR_FLOOR**progress
    return config.lr


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loss_s: float
    loss_u: float | None
    mask_frac_1: float | None
    mask_frac_2: float | None
    # diag(M^l_1), diag(M^u_1), diag(M^l_2), diag(M^u_2)
    diagonals: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    miou_1: float | None = None
    miou_2: float | None = None

    def csv_row(self) -> list[str]:
        def cell(value) -> str:
            return "" if value is None else repr(float(value))

        row = [str(self.iteration)]
        row += [cell(v) for v in (self.loss_s, self.loss_u, self.mask_frac_1, self.mask_frac_2)]
        row += [cell(self.miou_1), cell(self.miou_2)]
        for diagonal in self.diagonals:
            row += [cell(v) for v in diagonal]
        return row


def csv_header(classes: int) -> list[str]:
    columns = list(settings.CSV_BASE_COLUMNS)
    for model in (1, 2):
        for role in ("Ml", "Mu"):
            columns += [f"{role}_{model}_{i}" for i in range(classes)]
    return columns


def _pixel_pool(images: Sequence) -> np.ndarray:
    return np.concatenate([image.flat for image in images]) if images else np.empty((0, 0))


class CoTrainer:
    """
    Per-iteration state of a co-training run: both models, both alignment states and the
    data sampler.
    """

    def __init__(self, config: TrainConfig, data: TrainingData):
        if not data.labeled:
            raise EmptyInputError("Labeled image set")
        self.config = config
        self.classes = data.classes
        dims = SegmenterDims(
            features=data.labeled[0].features.dim, hidden=config.hidden, classes=data.classes
        )
        self.models = [init(config.seed_1, dims), init(config.seed_2, dims)]
        self.alignments = [AlignmentState.uniform(data.classes, config.alpha) for _ in range(2)]

        labeled_dist = empirical_distribution([image.labels for image in data.labeled])
        self.naive = [NaiveDAState.from_labeled(labeled_dist, config.alpha) for _ in range(2)]
        self.minority = minority_classes(labeled_dist)

        self.labeled_pixels = _pixel_pool([image.features for image in data.labeled])
        self.labeled_targets = np.concatenate([image.labels.flat for image in data.labeled])
        self.unlabeled_pixels = _pixel_pool(data.unlabeled)
        self.rng = np.random.default_rng(config.data_seed)
        self.iteration = 0

    @property
    def has_unlabeled(self) -> bool:
        return len(self.unlabeled_pixels) > 0

    def sample(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Draw labeled pixels with their labels and unlabeled pixels, with replacement.
        """
        labeled = self.rng.integers(0, len(self.labeled_pixels), size=self.config.labeled_batch)
        x_l = self.labeled_pixels[labeled]
        y_l = self.labeled_targets[labeled]
        if self.has_unlabeled and self.config.mode.unsupervised:
            unlabeled = self.rng.integers(0, len(self.unlabeled_pixels), size=self.config.unlabeled_batch)
            x_u = self.unlabeled_pixels[unlabeled]
        else:
            x_u = np.empty((0, self.labeled_pixels.shape[1]))
        if self.config.augment:
            x_l = augment_pixels(x_l, self.rng, self.config.aug_noise)
            x_u = augment_pixels(x_u, self.rng, self.config.aug_noise)
        return x_l, y_l, x_u

    def _diagonals(self) -> tuple[np.ndarray, ...]:
        return tuple(
            matrix.diagonal()
            for alignment in self.alignments
            for matrix in (alignment.labeled, alignment.unlabeled)
        )

    def step(self) -> IterationRecord:
        """
        One iteration: distributions, pseudo-labels, L_s, L_u, SGD step on both models.

        :raise NonFiniteLossError: with this iteration's record, before any parameter changes
        """
        config = self.config
        x_l, y_l, x_u = self.sample()
        n_l = len(x_l)
        caches = [forward_pass(model, np.concatenate([x_l, x_u])) for model in self.models]
        probs_l = [cache.probs[:n_l] for cache in caches]
        probs_u = [cache.probs[n_l:] for cache in caches]

        if not config.freeze_alignment:
            self.alignments = [
                update_distributions(alignment, p_l, y_l, p_u)
                for alignment, p_l, p_u in zip(self.alignments, probs_l, probs_u)
            ]
            if config.mode.naive_alignment and len(x_u):
                self.naive = [update_naive_da(naive, p_u) for naive, p_u in zip(self.naive, probs_u)]

        supervised = supervised_loss(
            ProbabilityMap.from_pixels(probs_l[0]),
            ProbabilityMap.from_pixels(probs_l[1]),
            LabelMap.from_pixels(y_l, self.classes),
        )
        unsupervised = None
        if config.mode.unsupervised and len(x_u):
            unsupervised = oe_cross_loss(config, self.alignments, probs_u[0], probs_u[1], self.naive)

        self.iteration += 1
        record = IterationRecord(
            iteration=self.iteration,
            loss_s=supervised.value,
            loss_u=None if unsupervised is None else unsupervised.value,
            mask_frac_1=None if unsupervised is None else unsupervised.mask_fractions[0],
            mask_frac_2=None if unsupervised is None else unsupervised.mask_fractions[1],
            diagonals=self._diagonals(),
        )
        total = record.loss_s + (0.0 if unsupervised is None else config.unsup_weight * unsupervised.value)
        if not math.isfinite(total):
            logger.error("⛔ Non-finite loss at iteration %d", self.iteration)
            raise NonFiniteLossError(record)

        lr = lr_at(config, self.iteration - 1)
        updated = []
        for m, (model, cache) in enumerate(zip(self.models, caches)):
            if unsupervised is None:
                dlogits = np.concatenate([supervised.dlogits[m], np.zeros_like(probs_u[m])])
            else:
                dlogits = np.concatenate(
                    [supervised.dlogits[m], config.unsup_weight * unsupervised.dlogits[m]]
                )
            updated.append(sgd_step(model, backpropagate(model, cache, dlogits), lr, config.momentum))
        self.models = updated
        return record

    def validate(self, evaluation: Sequence[LabeledImage]) -> tuple[float, float]:
        scores = []
        for model in self.models:
            counts = None
            for image in evaluation:
                image_counts = confusion(predict_labels(model, image.features), image.labels, self.classes)
                counts = image_counts if counts is None else counts + image_counts
            scores.append(miou(counts, self.config.absent_class))
        return scores[0], scores[1]


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    models: tuple[SegmenterState, SegmenterState]
    alignments: tuple[AlignmentState, AlignmentState]
    miou: float | None


@dataclass(frozen=True)
class TrainResult:
    models: tuple[SegmenterState, SegmenterState]
    alignments: tuple[AlignmentState, AlignmentState]
    records: tuple[IterationRecord, ...]
    best: Checkpoint
    minority: tuple[int, ...]


def train(
    config: TrainConfig,
    data: DatasetSplit | TrainingData,
    evaluation: Sequence[LabeledImage] = (),
    on_record: Callable[[IterationRecord], None] | None = None,
    progress: bool = False,
) -> TrainResult:
    """
    Run the co-training loop for `config.max_iterations` iterations.

    Validation runs every `eval_every` iterations and after the last one; the checkpoint with
    the best validation mIoU (either model) is kept.

    :param config: run configuration
    :param data: `DatasetSplit` or `TrainingData`; a split contributes its evaluation set and
        only its training view reaches the engine
    :param evaluation: validation images, overrides the split's evaluation set
    :param on_record: called with every record as soon as it exists
    :param progress: show a progress bar
    :return: `TrainResult`
    """
    if isinstance(data, DatasetSplit):
        evaluation = evaluation or data.evaluation
        data = data.training_view()
    trainer = CoTrainer(config, data)
    logger.info(
        "🚀 Training %s for %d iterations (%d labeled, %d unlabeled images)",
        config.mode.value,
        config.max_iterations,
        len(data.labeled),
        len(data.unlabeled),
    )

    records = []
    best = None
    for _ in tqdm(range(config.max_iterations), disable=not progress, desc=config.mode.value):
        record = trainer.step()
        due = record.iteration % config.eval_every == 0 or record.iteration == config.max_iterations
        if evaluation and due:
            miou_1, miou_2 = trainer.validate(evaluation)
            record = replace(record, miou_1=miou_1, miou_2=miou_2)
            logger.debug("Iteration %d: mIoU %.4f / %.4f", record.iteration, miou_1, miou_2)
            if best is None or max(miou_1, miou_2) > best.miou:
                best = Checkpoint(
                    record.iteration, tuple(trainer.models), tuple(trainer.alignments), max(miou_1, miou_2)
                )
        records.append(record)
        if on_record is not None:
            on_record(record)

    if best is None:
        best = Checkpoint(trainer.iteration, tuple(trainer.models), tuple(trainer.alignments), None)
    for m, alignment in enumerate(trainer.alignments, start=1):
        if alignment.fallback_count:
            logger.info("Model %d: %d unlabeled rows rebuilt from labeled rows", m, alignment.fallback_count)
    logger.info("✅ Training done, best mIoU %s at iteration %d", best.miou, best.iteration)
    return TrainResult(
        models=tuple(trainer.models),
        alignments=tuple(trainer.alignments),
        records=tuple(records),
        best=best,
        minority=tuple(trainer.minority),
    )


@dataclass(frozen=True)
class EvaluationReport:
    reports: tuple[MetricReport, ...]
    # 1-based index of the model with the highest mIoU
    better: int

    @property
    def best(self) -> MetricReport:
        return self.reports[self.better - 1]

    def as_dict(self) -> dict:
        result = {f"model_{m}": report.as_dict() for m, report in enumerate(self.reports, start=1)}
        result["better"] = self.better
        result["best"] = self.best.as_dict()
        return result


def evaluate(
    models: Sequence[SegmenterState], evaluation: Sequence[LabeledImage], absent: str = "one"
) -> EvaluationReport:
    """
    Metric report of each model's argmax predictions, and which model scores the higher mIoU.

    :raise EmptyEvaluationError: for an empty evaluation set
    :raise DimensionMismatchError: if a model's classes or features don't match the images
    """
    if not evaluation:
        raise EmptyEvaluationError()
    reports = []
    for model in models:
        if model.dims.classes != evaluation[0].labels.classes:
            raise DimensionMismatchError("classes", evaluation[0].labels.classes, model.dims.classes)
        preds = [predict_labels(model, image.features) for image in evaluation]
        reports.append(metric_report(preds, [image.labels for image in evaluation], absent))
    # First maximum wins ties
    better = int(np.argmax([report.miou for report in reports])) + 1
    return EvaluationReport(tuple(reports), better)


def minority_iou(report: MetricReport, minority: Sequence[int]) -> float | None:
    """
    Mean IoU over tail classes, None if there are none.
    """
    if not minority:
        return None
    return float(np.mean([report.per_class[cls].iou for cls in minority]))


def _recall(pred: np.ndarray, truth: np.ndarray, classes: int) -> list[float | None]:
    recall = []
    for cls in range(classes):
        members = truth == cls
        recall.append(float(np.mean(pred[members] == cls)) if np.any(members) else None)
    return recall


def pseudo_label_quality(
    models: Sequence[SegmenterState],
    alignments: Sequence[AlignmentState],
    evaluation: Sequence[LabeledImage],
) -> list[dict]:
    """
    Accuracy and per-class recall of raw and aligned pseudo-labels against ground truth.

    Evaluation only: reads the labels of `evaluation`, so never call it on training images.
    """
    if not evaluation:
        raise EmptyEvaluationError()
    quality = []
    for model, alignment in zip(models, alignments):
        raw, aligned, truth = [], [], []
        for image in evaluation:
            prob_map = forward(model, image.features)
            raw.append(np.argmax(prob_map.flat, axis=1))
            aligned.append(align_map(alignment, prob_map).pseudo_labels.flat)
            truth.append(image.labels.flat)
        raw, aligned, truth = (np.concatenate(part) for part in (raw, aligned, truth))
        classes = alignment.classes
        quality.append(
            {
                "raw_accuracy": float(np.mean(raw == truth)),
                "aligned_accuracy": float(np.mean(aligned == truth)),
                "raw_recall": _recall(raw, truth, classes),
                "aligned_recall": _recall(aligned, truth, classes),
            }
        )
    return quality
