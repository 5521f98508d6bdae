import numpy as np
import pytest

from coda_lab.core_types import PixelFeatures
from coda_lab.exceptions import DimensionMismatchError, NonFiniteError
from coda_lab.segmenter import (
    GradientBundle,
    SegmenterDims,
    SegmenterState,
    backward_weighted_ce,
    cross_entropy,
    forward,
    forward_pass,
    init,
    predict_labels,
    sgd_step,
    softmax,
)
from tests.helpers import assert_gradients_match, numeric_gradient

SMALL = SegmenterDims(features=3, hidden=4, classes=3)


def test_init_is_deterministic():
    first, second = init(7, SMALL), init(7, SMALL)
    assert np.array_equal(first.parameter_vector(), second.parameter_vector())
    assert not np.array_equal(first.parameter_vector(), init(8, SMALL).parameter_vector())
    assert np.all(first.params["b1"] == 0)


def test_forward_returns_simplex_map(rng):
    state = init(1, SMALL)
    features = PixelFeatures(rng.random((4, 5, 3)))
    prob_map = forward(state, features)
    assert prob_map.values.shape == (4, 5, 3)
    assert np.allclose(prob_map.values.sum(axis=2), 1.0)
    assert predict_labels(state, features).labels.shape == (4, 5)


def test_forward_rejects_wrong_feature_dimension(rng):
    with pytest.raises(DimensionMismatchError):
        forward(init(1, SMALL), rng.random((10, 5)))


def test_state_rejects_wrong_parameter_shape():
    params = dict(init(1, SMALL).params)
    params["w2"] = np.zeros((3, 3))
    with pytest.raises(DimensionMismatchError):
        SegmenterState(dims=SMALL, params=params)


def test_cross_entropy_of_uniform_prediction():
    probs = np.full((3, 4), 0.25)
    targets = np.eye(4)[[0, 1, 2]]
    loss, dlogits = cross_entropy(probs, targets, np.ones(3))
    assert loss == pytest.approx(np.log(4))
    assert np.allclose(dlogits, (probs - targets) / 3)


def test_cross_entropy_with_no_weight_is_zero():
    probs = np.full((3, 4), 0.25)
    loss, dlogits = cross_entropy(probs, np.eye(4)[[0, 1, 2]], np.zeros(3))
    assert loss == 0.0
    assert not np.any(dlogits)


def test_supervised_gradient_matches_finite_differences(rng):
    state = init(3, SMALL)
    inputs = rng.normal(size=(12, 3))
    targets = np.eye(3)[rng.integers(0, 3, size=12)]
    weights = np.ones(12)

    def loss(candidate):
        return cross_entropy(forward_pass(candidate, inputs).probs, targets, weights)[0]

    _, analytic = backward_weighted_ce(state, inputs, targets, weights)
    assert_gradients_match(analytic, numeric_gradient(loss, state))


def test_offset_gradient_matches_finite_differences(rng):
    state = init(4, SMALL)
    inputs = rng.normal(size=(12, 3))
    targets = np.eye(3)[rng.integers(0, 3, size=12)]
    weights = (rng.random(12) > 0.3).astype(float)
    offset = np.log(rng.uniform(0.2, 3.0, size=(12, 3)))

    def loss(candidate):
        probs = softmax(forward_pass(candidate, inputs).logits + offset)
        return cross_entropy(probs, targets, weights)[0]

    _, analytic = backward_weighted_ce(state, inputs, targets, weights, logit_offset=offset)
    assert_gradients_match(analytic, numeric_gradient(loss, state))


def test_sgd_step_applies_momentum():
    state = init(5, SMALL)
    grads = GradientBundle({name: np.ones(shape) for name, shape in SMALL.parameter_shapes().items()})
    first = sgd_step(state, grads, lr=0.1, momentum=0.9)
    second = sgd_step(first, grads, lr=0.1, momentum=0.9)

    assert np.allclose(first.momentum["w1"], 1.0)
    assert np.allclose(second.momentum["w1"], 1.9)
    assert np.allclose(second.params["b3"], -0.1 - 0.19)


def test_sgd_step_rejects_non_finite_gradients():
    grads = GradientBundle.zeros(SMALL)
    grads.grads["w3"][0, 0] = np.nan
    with pytest.raises(NonFiniteError) as info:
        sgd_step(init(1, SMALL), grads, lr=0.1, momentum=0.9)
    assert info.value.names == ["w3"]


def test_learns_a_linearly_separable_task(rng):
    points = rng.uniform(-1.0, 1.0, size=(600, 2))
    points = points[np.abs(points.sum(axis=1)) > 0.1][:400]
    labels = (points.sum(axis=1) > 0).astype(int)
    targets = np.eye(2)[labels]
    weights = np.ones(len(points))

    state = init(11, SegmenterDims(features=2, hidden=16, classes=2))
    accuracy = 0.0
    for _ in range(2000):
        _, grads = backward_weighted_ce(state, points, targets, weights)
        state = sgd_step(state, grads, lr=0.05, momentum=0.9)
        accuracy = np.mean(np.argmax(forward_pass(state, points).probs, axis=1) == labels)
        if accuracy > 0.95:
            break
    assert accuracy > 0.95


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_fresh_model_is_not_overconfident(rng, seed):
    state = init(seed, SegmenterDims())
    probs = forward_pass(state, rng.random((1000, SegmenterDims().features))).probs
    assert probs.max() < 0.9
