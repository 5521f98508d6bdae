"""
Small per-pixel classifier: a d → h → h → K rectifier MLP with explicit forward/backward math
and an SGD-with-momentum optimizer.

Two independently initialized instances play the two co-trained networks.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from coda_lab import settings
from coda_lab.core_types import LabelMap, PixelFeatures, ProbabilityMap
from coda_lab.exceptions import DimensionMismatchError, NonFiniteError

logger = logging.getLogger(__name__)

# Declaration order, also the checkpoint order
PARAMETER_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class SegmenterDims:
    features: int = settings.FEATURE_DIM
    hidden: int = settings.DEFAULT_HIDDEN
    classes: int = 5

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "w1": (self.features, self.hidden),
            "b1": (self.hidden,),
            "w2": (self.hidden, self.hidden),
            "b2": (self.hidden,),
            "w3": (self.hidden, self.classes),
            "b3": (self.classes,),
        }


def _read_only(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    frozen = {}
    for name in PARAMETER_NAMES:
        array = np.array(arrays[name], dtype=np.float64)
        array.setflags(write=False)
        frozen[name] = array
    return frozen


@dataclass(frozen=True)
class GradientBundle:
    """
    Per-parameter gradients, shapes matching `SegmenterState.params`.
    """

    grads: dict[str, np.ndarray]

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle({name: self.grads[name] + other.grads[name] for name in PARAMETER_NAMES})

    def non_finite(self) -> list[str]:
        return [name for name in PARAMETER_NAMES if not np.all(np.isfinite(self.grads[name]))]

    @staticmethod
    def zeros(dims: SegmenterDims) -> "GradientBundle":
        return GradientBundle({name: np.zeros(shape) for name, shape in dims.parameter_shapes().items()})


@dataclass(frozen=True)
class SegmenterState:
    """
    Parameters and momentum buffers of one segmenter.
    """

    dims: SegmenterDims
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        momentum = self.momentum or {name: np.zeros_like(self.params[name]) for name in PARAMETER_NAMES}
        for name, shape in self.dims.parameter_shapes().items():
            for kind, arrays in (("parameter", self.params), ("momentum", momentum)):
                if name not in arrays or np.shape(arrays[name]) != shape:
                    raise DimensionMismatchError(
                        f"{kind} {name}", shape, np.shape(arrays.get(name))
                    )
        object.__setattr__(self, "params", _read_only(self.params))
        object.__setattr__(self, "momentum", _read_only(momentum))

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[name].ravel() for name in PARAMETER_NAMES])


def init(seed: int, dims: SegmenterDims) -> SegmenterState:
    """
    Create a fresh segmenter: weights ~ N(0, 1/fan_in), zero biases.

    :param seed: rng seed, same seed gives bit-identical states
    :param dims: network dimensions
    :return: new `SegmenterState`
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in dims.parameter_shapes().items():
        if name.startswith("w"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    return SegmenterState(dims=dims, params=params, seed=seed)


@dataclass(frozen=True)
class ForwardCache:
    inputs: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def _as_pixels(features: PixelFeatures | np.ndarray) -> np.ndarray:
    if isinstance(features, PixelFeatures):
        return features.flat
    return np.asarray(features, dtype=np.float64)


def forward_pass(state: SegmenterState, inputs: np.ndarray) -> ForwardCache:
    """
    Run the MLP on an (N, d) pixel batch and keep every intermediate for backpropagation.
    """
    if inputs.ndim != 2 or inputs.shape[1] != state.dims.features:
        raise DimensionMismatchError("segmenter input", (None, state.dims.features), inputs.shape)
    p = state.params
    pre1 = inputs @ p["w1"] + p["b1"]
    act1 = np.maximum(pre1, 0.0)
    pre2 = act1 @ p["w2"] + p["b2"]
    act2 = np.maximum(pre2, 0.0)
    logits = act2 @ p["w3"] + p["b3"]
    return ForwardCache(inputs, pre1, act1, pre2, act2, logits, softmax(logits))


def forward(state: SegmenterState, features: PixelFeatures | np.ndarray) -> ProbabilityMap:
    """
    Per-pixel softmax class probabilities.

    :param state: segmenter
    :param features: image features (H, W, d) or an (N, d) pixel batch
    :return: (H, W, K) map for images, 1×N strip for pixel batches
    """
    cache = forward_pass(state, _as_pixels(features))
    if isinstance(features, PixelFeatures):
        return ProbabilityMap.from_flat(cache.probs, features.height, features.width)
    return ProbabilityMap.from_pixels(cache.probs)


def predict_labels(state: SegmenterState, features: PixelFeatures) -> LabelMap:
    probs = forward_pass(state, features.flat).probs
    return LabelMap(np.argmax(probs, axis=1).reshape(features.height, features.width), state.dims.classes)


def cross_entropy(
    probs: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """
    Weighted cross-entropy and its gradient with respect to the logits that produced `probs`.

    The loss is normalized by the number of pixels with positive weight (at least 1).

    :param probs: (N, K) softmax output
    :param targets: (N, K) target distributions
    :param weights: (N,) non-negative pixel weights or masks
    :return: loss value, (N, K) logit gradient
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    denominator = max(1, int(np.count_nonzero(weights > 0)))
    log_probs = np.log(np.clip(probs, settings.PROB_CLAMP, None))
    loss = -float(np.sum(weights * np.sum(targets * log_probs, axis=1))) / denominator + 0.0
    dlogits = weights[:, np.newaxis] * (probs * targets.sum(axis=1, keepdims=True) - targets)
    return loss, dlogits / denominator


def backpropagate(state: SegmenterState, cache: ForwardCache, dlogits: np.ndarray) -> GradientBundle:
    p = state.params
    dz2 = (dlogits @ p["w3"].T) * (cache.pre2 > 0)
    dz1 = (dz2 @ p["w2"].T) * (cache.pre1 > 0)
    return GradientBundle(
        {
            "w1": cache.inputs.T @ dz1,
            "b1": dz1.sum(axis=0),
            "w2": cache.act1.T @ dz2,
            "b2": dz2.sum(axis=0),
            "w3": cache.act2.T @ dlogits,
            "b3": dlogits.sum(axis=0),
        }
    )


def backward_weighted_ce(
    state: SegmenterState,
    features: PixelFeatures | np.ndarray,
    targets: ProbabilityMap | np.ndarray,
    weights: np.ndarray,
    logit_offset: np.ndarray | None = None,
) -> tuple[float, GradientBundle]:
    """
    Weighted cross-entropy loss and parameter gradients for one pixel batch.

    With `logit_offset`, the supervised distribution is softmax(logits + offset), which is how an
    aligned prediction Normalize(F ⊗ w) is expressed (offset = log w, held constant).

    :param state: segmenter
    :param features: input features
    :param targets: target distribution per pixel
    :param weights: per-pixel weights, zero removes a pixel
    :param logit_offset: optional constant (N, K) offset added to the logits
    :return: loss value, `GradientBundle`
    """
    cache = forward_pass(state, _as_pixels(features))
    target_values = targets.flat if isinstance(targets, ProbabilityMap) else np.asarray(targets)
    probs = cache.probs if logit_offset is None else softmax(cache.logits + logit_offset)
    loss, dlogits = cross_entropy(probs, target_values.reshape(probs.shape), weights)
    return loss, backpropagate(state, cache, dlogits)


def sgd_step(
    state: SegmenterState, grads: GradientBundle, lr: float, momentum: float
) -> SegmenterState:
    """
    One SGD-with-momentum step: buffer ← momentum·buffer + grad; param ← param − lr·buffer.

    :raise NonFiniteError: if any gradient entry is not finite
    """
    bad = grads.non_finite()
    if bad:
        logger.error("Non-finite gradients in %s", bad)
        raise NonFiniteError("gradients", bad)

    buffers = {name: momentum * state.momentum[name] + grads.grads[name] for name in PARAMETER_NAMES}
    params = {name: state.params[name] - lr * buffers[name] for name in PARAMETER_NAMES}
    return SegmenterState(dims=state.dims, params=params, momentum=buffers, seed=state.seed)
