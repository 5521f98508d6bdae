"""
Synthetic 2D segmentation tasks with controllable long-tail class imbalance and label scarcity.

Every image is background (class 0) plus shapes for classes 1..K−1, drawn in class order so the
rarer classes, drawn last, are never erased. Intensity is the class mean plus Gaussian noise.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from coda_lab import formats, settings
from coda_lab.config import read_pairs
from coda_lab.core_types import (
    DatasetSplit,
    LabeledImage,
    LabelMap,
    PixelFeatures,
    compute_features,
)
from coda_lab.exceptions import ConfigError, EmptyInputError, FormatError, GenerationError

logger = logging.getLogger(__name__)


class Shape(str, Enum):
    DISK = "disk"
    RECTANGLE = "rectangle"
    RING = "ring"


PALETTE = (Shape.DISK, Shape.RECTANGLE, Shape.RING)
RING_INNER = 0.6


def _normalized(weights: Sequence[float]) -> tuple[float, ...]:
    total = float(sum(weights))
    return tuple(float(w) / total for w in weights)


def long_tail_frequencies(classes: int, rho: float) -> tuple[float, ...]:
    """
    Geometric long tail: the most frequent class is `rho` times the least frequent one.
    """
    if rho < 1:
        raise ValueError(f"imbalance ratio must be >= 1, got {rho}")
    exponents = np.arange(classes) / max(1, classes - 1)
    return _normalized(rho**-exponents)


@dataclass(frozen=True)
class SceneSpec:
    height: int = settings.TAIL5_SIZE[0]
    width: int = settings.TAIL5_SIZE[1]
    classes: int = len(settings.TAIL5_WEIGHTS)
    frequencies: tuple[float, ...] = _normalized(settings.TAIL5_WEIGHTS)
    class_means: tuple[float, ...] = settings.TAIL5_MEANS
    # Shape per class 1..K−1; empty means cycle through `PALETTE`
    shapes: tuple[Shape, ...] = field(default=())
    noise: float = settings.TAIL5_NOISE
    labeled_fraction: float = settings.TAIL5_LABELED_FRACTION
    eval_fraction: float = settings.DEFAULT_EVAL_FRACTION
    seed: int = 0

    def __post_init__(self):
        problems = {}
        if len(self.frequencies) != self.classes:
            problems["frequencies"] = f"need {self.classes} values"
        elif min(self.frequencies) < 0 or abs(sum(self.frequencies) - 1.0) > 1e-6:
            problems["frequencies"] = "must be a simplex vector"
        if len(self.class_means) != self.classes:
            problems["class_means"] = f"need {self.classes} values"
        if self.shapes and len(self.shapes) != self.classes - 1:
            problems["shapes"] = f"need {self.classes - 1} values"
        if not 0.0 < self.labeled_fraction <= 1.0:
            problems["labeled_fraction"] = "must be in (0, 1]"
        if not 0.0 <= self.eval_fraction < 1.0:
            problems["eval_fraction"] = "must be in [0, 1)"
        if self.noise < 0:
            problems["noise"] = "must be >= 0"
        if problems:
            raise ConfigError(list(problems), [f"{key}: {msg}" for key, msg in problems.items()])

    @property
    def rho(self) -> float:
        positive = [f for f in self.frequencies if f > 0]
        return max(positive) / min(positive)

    def shape_for(self, cls: int) -> Shape:
        if self.shapes:
            return self.shapes[cls - 1]
        return PALETTE[(cls - 1) % len(PALETTE)]


def tail5(**overrides) -> SceneSpec:
    return replace(SceneSpec(), **overrides)


def scene_echo(spec: SceneSpec) -> dict:
    return {
        "height": spec.height,
        "width": spec.width,
        "classes": spec.classes,
        "frequencies": list(spec.frequencies),
        "class_means": list(spec.class_means),
        "shapes": [shape.value for shape in spec.shapes],
        "noise": spec.noise,
        "labeled_fraction": spec.labeled_fraction,
        "eval_fraction": spec.eval_fraction,
        "seed": spec.seed,
    }


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(token) for token in text.split(",") if token.strip())


def parse_scene_spec(text: str) -> SceneSpec:
    """
    Parse a `key = value` scene description.

    `preset = tail5` (default) starts from the standard benchmark; `rho` replaces the frequencies
    with a geometric long tail; every other key overrides one `SceneSpec` field.
    """
    pairs, problems = read_pairs(text)
    preset = pairs.pop("preset", "tail5")
    if preset != "tail5":
        problems["preset"] = f"unknown preset {preset!r}"

    parsers = {
        "height": int,
        "width": int,
        "classes": int,
        "frequencies": lambda text: _normalized(_floats(text)),
        "class_means": _floats,
        "shapes": lambda text: tuple(Shape(token.strip()) for token in text.split(",")),
        "noise": float,
        "labeled_fraction": float,
        "eval_fraction": float,
        "seed": int,
    }
    values = {}
    rho = None
    for key, raw in pairs.items():
        try:
            if key == "rho":
                rho = float(raw)
            elif key in parsers:
                values[key] = parsers[key](raw)
            else:
                problems[key] = "unknown key"
        except ValueError as ex:
            problems[key] = str(ex)
    if problems:
        raise ConfigError(list(problems), [f"{key}: {msg}" for key, msg in problems.items()])

    classes = values.get("classes", SceneSpec.classes)
    if rho is not None:
        values["frequencies"] = long_tail_frequencies(classes, rho)
    if classes != SceneSpec.classes:
        values.setdefault("class_means", tuple(np.linspace(0.1, 0.9, classes)))
        values.setdefault("frequencies", long_tail_frequencies(classes, 1.0))
    return tail5(**values)


def load_scene_spec(path: Path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())


def _shape_mask(
    shape: Shape, area: float, rng: np.random.Generator, height: int, width: int
) -> np.ndarray:
    """
    Random shape of roughly `area` pixels, centered uniformly in the image (may be clipped).
    """
    rows, cols = np.ogrid[:height, :width]
    cy, cx = rng.uniform(0, height), rng.uniform(0, width)
    limit = min(height, width) / 2

    if shape is Shape.RECTANGLE:
        aspect = rng.uniform(0.5, 2.0)
        h = int(np.clip(round(np.sqrt(area * aspect)), 1, height))
        w = int(np.clip(round(area / h), 1, width))
        top, left = int(cy - h / 2), int(cx - w / 2)
        return (rows >= top) & (rows < top + h) & (cols >= left) & (cols < left + w)

    distance = np.hypot(rows + 0.5 - cy, cols + 0.5 - cx)
    if shape is Shape.RING and area >= 8:
        outer = min(limit, np.sqrt(area / ((1 - RING_INNER**2) * np.pi)))
        return (distance <= outer) & (distance > RING_INNER * outer)
    radius = float(np.clip(np.sqrt(area / np.pi), 0.5, limit))
    return distance <= radius


def draw_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """
    Place shapes until every foreground class reaches its target pixel count.

    :raise GenerationError: if a class can't get close enough to its target
    """
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    total = spec.height * spec.width

    for cls in range(1, spec.classes):
        target = int(round(spec.frequencies[cls] * total))
        if spec.frequencies[cls] > 0 and target == 0:
            raise GenerationError(cls, target, 0, "frequency is below one pixel per image")
        covered = 0
        for _ in range(settings.MAX_SHAPE_ATTEMPTS):
            if covered >= target:
                break
            mask = _shape_mask(spec.shape_for(cls), target - covered, rng, spec.height, spec.width)
            labels[mask] = cls
            covered = int(np.count_nonzero(labels == cls))
        if covered < settings.MIN_COVERAGE * target:
            raise GenerationError(cls, target, covered, "shapes don't fit")
    return labels


def render_image(spec: SceneSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(spec.class_means)
    return means[labels] + rng.normal(0.0, spec.noise, labels.shape)


def generate_image(spec: SceneSpec, index: int) -> LabeledImage:
    rng = np.random.default_rng([spec.seed, index])
    labels = draw_labels(spec, rng)
    intensity = render_image(spec, labels, rng)
    return LabeledImage(compute_features(intensity), LabelMap(labels, spec.classes))


def image_id(index: int) -> str:
    return f"img_{index:03d}"


def generate(spec: SceneSpec, n_images: int) -> DatasetSplit:
    """
    Generate `n_images` images and split them into evaluation, labeled and unlabeled sets.

    The evaluation hold-out is `eval_fraction` of the images; `labeled_fraction` applies
    to the remaining training images.

    :param spec: scene description
    :param n_images: image count
    :return: `DatasetSplit`, deterministic given `spec.seed`
    """
    if n_images <= 0:
        raise EmptyInputError("Image set")
    images = [generate_image(spec, index) for index in range(n_images)]

    order = np.random.default_rng(spec.seed).permutation(n_images)
    n_eval = int(round(n_images * spec.eval_fraction))
    if n_eval >= n_images:
        raise GenerationError(0, n_images, n_eval, "no training images left after evaluation hold-out")
    train = order[n_eval:]
    n_labeled = len(train) if spec.labeled_fraction >= 1.0 else int(round(len(train) * spec.labeled_fraction))
    n_labeled = max(1, n_labeled)

    evaluation = sorted(order[:n_eval])
    labeled = sorted(train[:n_labeled])
    unlabeled = sorted(train[n_labeled:])
    logger.info(
        "Generated %d images: %d labeled, %d unlabeled, %d evaluation",
        n_images,
        len(labeled),
        len(unlabeled),
        len(evaluation),
    )

    return DatasetSplit(
        labeled=tuple(images[i] for i in labeled),
        unlabeled=tuple(images[i].features for i in unlabeled),
        hidden_truth=tuple(images[i].labels for i in unlabeled),
        evaluation=tuple(images[i] for i in evaluation),
        classes=spec.classes,
        labeled_ids=tuple(image_id(i) for i in labeled),
        unlabeled_ids=tuple(image_id(i) for i in unlabeled),
        evaluation_ids=tuple(image_id(i) for i in evaluation),
    )


def fully_labeled(split: DatasetSplit) -> DatasetSplit:
    """
    Reference split where every training image is labeled (unlabeled images take their hidden truth).
    """
    promoted = tuple(
        LabeledImage(features, labels) for features, labels in zip(split.unlabeled, split.hidden_truth)
    )
    return replace(
        split,
        labeled=split.labeled + promoted,
        unlabeled=(),
        hidden_truth=(),
        labeled_ids=split.labeled_ids + split.unlabeled_ids,
        unlabeled_ids=(),
    )


def flip_columns(values: np.ndarray) -> np.ndarray:
    """
    Features of the horizontally mirrored pixel: only the column coordinate c changes, to 1−c.
    """
    flipped = values.copy()
    flipped[..., settings.COLUMN_FEATURE] = 1.0 - flipped[..., settings.COLUMN_FEATURE]
    return flipped


def augment(
    features: PixelFeatures,
    labels: LabelMap,
    rng: np.random.Generator,
    noise: float = 0.0,
    flip: bool | None = None,
) -> tuple[PixelFeatures, LabelMap]:
    """
    Random horizontal flip (probability 0.5 unless forced) and Gaussian feature noise.

    :param features: image features
    :param labels: matching label map, flipped with the image
    :param rng: random generator
    :param noise: σ of the feature noise
    :param flip: force (True) or forbid (False) the flip, None for a coin toss
    :return: augmented features and labels
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    values = features.values
    label_values = labels.labels
    if flip:
        values = flip_columns(values[:, ::-1, :])
        label_values = label_values[:, ::-1]
    if noise > 0:
        values = values + rng.normal(0.0, noise, values.shape)
    return PixelFeatures(values), LabelMap(label_values, labels.classes)


def augment_pixels(pixels: np.ndarray, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """
    Pixel-batch version of `augment`: each sampled pixel comes from a flipped copy of its image
    with probability 0.5. Labels don't move, since a pixel keeps its class when mirrored.
    """
    flips = rng.random(len(pixels)) < 0.5
    augmented = np.where(flips[:, np.newaxis], flip_columns(pixels), pixels)
    if noise > 0:
        augmented = augmented + rng.normal(0.0, noise, augmented.shape)
    return augmented


def empirical_distribution(label_maps: Sequence[LabelMap]) -> np.ndarray:
    """
    Normalized class pixel counts over a set of label maps.

    :raise EmptyInputError: for an empty set
    """
    if not label_maps:
        raise EmptyInputError("Label map set")
    classes = label_maps[0].classes
    counts = sum(np.bincount(labels.flat, minlength=classes) for labels in label_maps)
    return counts / counts.sum()


def minority_classes(distribution: np.ndarray) -> list[int]:
    """
    Tail classes: empirical frequency below the uniform share 1/K.
    """
    return [int(i) for i in np.flatnonzero(distribution < 1.0 / len(distribution))]


def save_dataset(split: DatasetSplit, spec: SceneSpec, out_dir: Path) -> Path:
    """
    Write features as CODAPMAP files, labels as PGM, plus a JSON manifest.

    :return: manifest path
    """
    out_dir = Path(out_dir)
    (out_dir / settings.IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    (out_dir / settings.LABELS_DIR).mkdir(parents=True, exist_ok=True)

    entries = (
        [(name, image.features, image.labels) for name, image in zip(split.labeled_ids, split.labeled)]
        + list(zip(split.unlabeled_ids, split.unlabeled, split.hidden_truth))
        + [(name, image.features, image.labels) for name, image in zip(split.evaluation_ids, split.evaluation)]
    )
    files = {}
    for name, features, labels in sorted(entries, key=lambda entry: entry[0]):
        feature_path = f"{settings.IMAGES_DIR}/{name}.pmap"
        label_path = f"{settings.LABELS_DIR}/{name}.pgm"
        formats.write_features(out_dir / feature_path, features)
        formats.write_label_map(out_dir / label_path, labels)
        files[name] = {"features": feature_path, "labels": label_path}

    manifest = {
        "spec": scene_echo(spec),
        "classes": split.classes,
        "feature_dim": settings.FEATURE_DIM,
        "files": files,
        "split": {
            "labeled": list(split.labeled_ids),
            "unlabeled": list(split.unlabeled_ids),
            "evaluation": list(split.evaluation_ids),
        },
    }
    manifest_path = out_dir / settings.DATASET_MANIFEST
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(data_dir: Path) -> DatasetSplit:
    data_dir = Path(data_dir)
    manifest_path = data_dir / settings.DATASET_MANIFEST
    try:
        manifest = json.loads(manifest_path.read_text())
        files = manifest["files"]
        split = manifest["split"]
        classes = int(manifest["classes"])
    except (KeyError, ValueError) as ex:
        raise FormatError(manifest_path, f"bad manifest: {ex}")

    def load(name: str) -> LabeledImage:
        features = formats.read_features(data_dir / files[name]["features"])
        labels = formats.read_label_map(data_dir / files[name]["labels"])
        return LabeledImage(features, LabelMap(labels.labels, classes))

    labeled = [load(name) for name in split["labeled"]]
    unlabeled = [load(name) for name in split["unlabeled"]]
    evaluation = [load(name) for name in split["evaluation"]]
    return DatasetSplit(
        labeled=tuple(labeled),
        unlabeled=tuple(image.features for image in unlabeled),
        hidden_truth=tuple(image.labels for image in unlabeled),
        evaluation=tuple(evaluation),
        classes=classes,
        labeled_ids=tuple(split["labeled"]),
        unlabeled_ids=tuple(split["unlabeled"]),
        evaluation_ids=tuple(split["evaluation"]),
    )
