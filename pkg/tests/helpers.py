"""
Shared test helpers.
"""

import numpy as np

from coda_lab.alignment import AlignmentState, update_distributions
from coda_lab.segmenter import PARAMETER_NAMES, GradientBundle, SegmenterState


def random_probs(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    values = rng.random((n, classes)) + 1e-3
    return values / values.sum(axis=1, keepdims=True)


def warmed_alignment(rng: np.random.Generator, classes: int, cycles: int = 20) -> AlignmentState:
    """
    Alignment state moved away from uniform by a few random updates.
    """
    state = AlignmentState.uniform(classes, alpha=0.7)
    for _ in range(cycles):
        labeled = random_probs(rng, 30, classes)
        labels = rng.integers(0, classes, size=30)
        state = update_distributions(state, labeled, labels, random_probs(rng, 30, classes))
    return state


def perturbed(state: SegmenterState, name: str, index: tuple, delta: float) -> SegmenterState:
    params = {key: value.copy() for key, value in state.params.items()}
    params[name][index] += delta
    return SegmenterState(dims=state.dims, params=params)


def numeric_gradient(loss, state: SegmenterState, eps: float = 1e-6) -> dict[str, np.ndarray]:
    """
    Central finite differences of `loss(state)` for every parameter entry.
    """
    grads = {}
    for name in PARAMETER_NAMES:
        grad = np.zeros(state.params[name].shape)
        for index in np.ndindex(grad.shape):
            plus = loss(perturbed(state, name, index, eps))
            minus = loss(perturbed(state, name, index, -eps))
            grad[index] = (plus - minus) / (2 * eps)
        grads[name] = grad
    return grads


def assert_gradients_match(analytic: GradientBundle, numeric: dict[str, np.ndarray]):
    for name in PARAMETER_NAMES:
        a, n = analytic.grads[name], numeric[name]
        scale = np.maximum(np.abs(a) + np.abs(n), 1e-4)
        assert np.max(np.abs(a - n) / scale) < 1e-4, name
