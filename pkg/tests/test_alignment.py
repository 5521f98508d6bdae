import numpy as np
import pytest

from coda_lab import settings
from coda_lab.alignment import (
    AlignmentState,
    NaiveDAState,
    align_map,
    align_prediction,
    dynamic_threshold,
    expectation_mask,
    fallback_row,
    naive_da_align,
    temperature,
    transform_distribution,
    update_distributions,
    update_labeled_row,
    update_naive_da,
    update_unlabeled_row,
)
from coda_lab.core_types import DistributionMatrix, LabelMap, ProbabilityMap, Role, floor_simplex
from tests.helpers import random_probs, warmed_alignment


def _rows_are_simplex(matrix: DistributionMatrix) -> bool:
    sums_ok = np.all(np.abs(matrix.rows.sum(axis=1) - 1.0) <= settings.SIMPLEX_TOL)
    return bool(sums_ok and matrix.rows.min() >= settings.EPS_FLOOR * (1 - 1e-9))


def test_randomized_cycles_keep_rows_on_simplex(rng):
    classes = 4
    state = AlignmentState.uniform(classes, alpha=0.9)
    for _ in range(10_000):
        labeled = random_probs(rng, 16, classes)
        labels = rng.integers(0, classes, size=16)
        # Skewed unlabeled predictions leave some classes without pseudo-labels
        unlabeled = random_probs(rng, 8, classes) ** rng.uniform(1, 6)
        unlabeled /= unlabeled.sum(axis=1, keepdims=True)
        state = update_distributions(state, labeled, labels, unlabeled)
        assert _rows_are_simplex(state.labeled)
        assert _rows_are_simplex(state.unlabeled)

        pixel = unlabeled[0]
        aligned = align_prediction(state, pixel, int(np.argmax(pixel)))
        assert abs(aligned.sum() - 1.0) <= settings.SIMPLEX_TOL
        assert aligned.min() >= 0.0


def test_identity_alignment_is_exact(rng):
    probs = random_probs(rng, 50, 5)
    row = floor_simplex(rng.random(5))
    aligned = transform_distribution(probs, row, row, 1.0)
    assert np.max(np.abs(aligned - probs)) <= 1e-12


def test_align_prediction_matches_hand_computation():
    labeled = DistributionMatrix(np.array([[0.8, 0.2], [0.3, 0.7]]), Role.LABELED)
    unlabeled = DistributionMatrix(np.array([[0.5, 0.5], [0.4, 0.6]]), Role.UNLABELED)
    state = AlignmentState(labeled, unlabeled)
    pixel = np.array([0.6, 0.4])

    tau = 1.0 - 0.8
    weights = np.array([0.8**tau / 0.5, 0.2**tau / 0.5])
    expected = pixel * weights / np.sum(pixel * weights)

    assert temperature(state, 0) == pytest.approx(0.2)
    assert np.allclose(align_prediction(state, pixel, 0), expected, rtol=0, atol=1e-15)


def test_labeled_row_skips_absent_class():
    state = AlignmentState.uniform(3, alpha=0.5)
    probs = ProbabilityMap.from_pixels(np.array([[0.8, 0.1, 0.1]]))
    labels = LabelMap.from_pixels(np.array([0]), 3)

    assert update_labeled_row(state, probs, labels, 2) is state
    updated = update_labeled_row(state, probs, labels, 0)
    assert np.allclose(updated.labeled.row(0), 0.5 * np.full(3, 1 / 3) + 0.5 * np.array([0.8, 0.1, 0.1]))


def test_unlabeled_row_falls_back_to_labeled_row():
    labeled = DistributionMatrix(np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]]), Role.LABELED)
    state = AlignmentState(labeled, DistributionMatrix.uniform(3, Role.UNLABELED))
    probs = ProbabilityMap.from_pixels(np.array([[0.9, 0.05, 0.05]]))
    pseudo = LabelMap.from_pixels(np.array([0]), 3)

    updated = update_unlabeled_row(state, probs, pseudo, 1)
    assert updated.fallback_count == 1
    assert np.allclose(updated.unlabeled.row(1), labeled.row(1), rtol=0, atol=1e-12)


def test_update_distributions_counts_fallbacks():
    labeled = DistributionMatrix(np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]]), Role.LABELED)
    state = AlignmentState(labeled, DistributionMatrix.uniform(3, Role.UNLABELED), alpha=0.9)
    unlabeled = np.array([[0.8, 0.1, 0.1], [0.6, 0.3, 0.1]])

    updated = update_distributions(state, unlabeled, np.array([0, 0]), unlabeled)
    assert updated.fallback_count == 2
    # Fallback reads the labeled row from before this update
    assert np.allclose(updated.unlabeled.row(2), labeled.row(2), rtol=0, atol=1e-12)
    assert np.allclose(updated.labeled.row(2), labeled.row(2), rtol=0, atol=1e-15)


def test_update_without_unlabeled_pixels_keeps_unlabeled_matrix(rng):
    state = warmed_alignment(rng, 3)
    updated = update_distributions(state, random_probs(rng, 5, 3), np.array([0, 1, 2, 0, 1]), np.empty((0, 3)))
    assert np.array_equal(updated.unlabeled.rows, state.unlabeled.rows)
    assert updated.fallback_count == state.fallback_count


def test_fallback_row_is_proportional_to_labeled_row():
    labeled = floor_simplex(np.array([0.5, 0.3, 0.2, 0.0]))
    rebuilt = fallback_row(labeled, np.full(4, 0.25))
    assert np.allclose(floor_simplex(rebuilt), labeled)


def test_dynamic_threshold_is_unlabeled_diagonal(rng):
    state = warmed_alignment(rng, 4)
    assert [dynamic_threshold(state, i) for i in range(4)] == list(state.unlabeled.diagonal())


def test_mask_is_strictly_above_threshold():
    state = AlignmentState.uniform(2)
    mask = expectation_mask(state, np.array([0.5, 0.51, 0.49]), np.array([0, 0, 1]))
    assert mask.tolist() == [False, True, False]


def test_mask_fraction_shrinks_as_static_threshold_grows(rng):
    state = warmed_alignment(rng, 4)
    prob_map = ProbabilityMap.from_pixels(random_probs(rng, 200, 4))
    fractions = [align_map(state, prob_map, threshold).mask.mean() for threshold in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(fractions, fractions[1:]))
    assert fractions[0] == 1.0
    assert fractions[-1] == 0.0


def test_align_map_uses_raw_argmax_row(rng):
    state = warmed_alignment(rng, 3)
    probs = random_probs(rng, 10, 3)
    result = align_map(state, ProbabilityMap.from_pixels(probs))
    for pixel, aligned in zip(probs, result.aligned.flat):
        expected = align_prediction(state, pixel, int(np.argmax(pixel)))
        assert np.allclose(aligned, expected, rtol=0, atol=1e-12)


def test_invalid_alpha():
    with pytest.raises(ValueError):
        AlignmentState.uniform(3, alpha=1.0)


def test_naive_da_matching_distributions_is_identity(rng):
    state = NaiveDAState(np.full(3, 1 / 3), np.full(3, 1 / 3))
    prob_map = ProbabilityMap.from_pixels(random_probs(rng, 20, 3))
    assert np.allclose(naive_da_align(state, prob_map).values, prob_map.values, rtol=0, atol=1e-12)


def test_naive_da_tracks_unlabeled_mean():
    state = NaiveDAState.from_labeled(np.array([0.5, 0.5]), alpha=0.5)
    updated = update_naive_da(state, np.array([[0.9, 0.1], [0.7, 0.3]]))
    assert np.allclose(updated.unlabeled_dist, [0.65, 0.35])
    assert updated.factors[1] > updated.factors[0]


def test_worked_alignment_example():
    labeled = DistributionMatrix(np.array([[0.5, 0.3, 0.2], [0.2, 0.6, 0.2], [0.1, 0.1, 0.8]]), Role.LABELED)
    unlabeled = DistributionMatrix(np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]]), Role.UNLABELED)
    state = AlignmentState(labeled, unlabeled)

    assert temperature(state, 0) == pytest.approx(0.5)
    aligned = align_prediction(state, np.array([0.6, 0.3, 0.1]), 0)
    assert np.allclose(aligned, [0.3233, 0.4382, 0.2385], rtol=0, atol=1e-4)
    # The raw argmax row pushes the pseudo-label away from the dominant class
    assert int(np.argmax(aligned)) == 1


def test_alignment_ignores_unlabeled_row_scale(rng):
    probs = random_probs(rng, 40, 4)
    labeled_row = floor_simplex(rng.random(4))
    unlabeled_row = floor_simplex(rng.random(4))
    reference = transform_distribution(probs, labeled_row, unlabeled_row, 0.3)
    for scale in (0.01, 3.7, 250.0):
        scaled = transform_distribution(probs, labeled_row, scale * unlabeled_row, 0.3)
        assert np.allclose(scaled, reference, rtol=0, atol=1e-12)


def test_temperature_stays_in_range(rng):
    states = [warmed_alignment(rng, 4) for _ in range(5)]
    states.append(
        AlignmentState(DistributionMatrix(np.eye(3), Role.LABELED), DistributionMatrix.uniform(3, Role.UNLABELED))
    )
    states.append(
        AlignmentState(
            DistributionMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]), Role.LABELED),
            DistributionMatrix.uniform(2, Role.UNLABELED),
        )
    )
    for state in states:
        for i in range(state.classes):
            assert 0.0 <= temperature(state, i) <= 1.0 - settings.EPS_FLOOR + 1e-15


def test_rows_at_their_batch_mean_stay_put(rng):
    state = warmed_alignment(rng, 3)
    row = state.labeled.row(1)
    probs = ProbabilityMap.from_pixels(np.tile(row, (6, 1)))
    labels = LabelMap.from_pixels(np.full(6, 1), 3)
    assert np.allclose(update_labeled_row(state, probs, labels, 1).labeled.row(1), row, rtol=0, atol=1e-14)

    row = state.unlabeled.row(2)
    probs = ProbabilityMap.from_pixels(np.tile(row, (6, 1)))
    pseudo = LabelMap.from_pixels(np.full(6, 2), 3)
    assert np.allclose(update_unlabeled_row(state, probs, pseudo, 2).unlabeled.row(2), row, rtol=0, atol=1e-14)


def test_row_updates_blend_between_previous_row_and_batch_mean(rng):
    state = warmed_alignment(rng, 4)
    for _ in range(20):
        probs = random_probs(rng, 12, 4)
        labels = rng.integers(0, 4, size=12)
        batch = ProbabilityMap.from_pixels(probs)
        label_map = LabelMap.from_pixels(labels, 4)
        for i in np.unique(labels):
            mean = probs[labels == i].mean(axis=0)
            pairs = [
                (state.labeled.row(i), update_labeled_row(state, batch, label_map, i).labeled.row(i)),
                (state.unlabeled.row(i), update_unlabeled_row(state, batch, label_map, i).unlabeled.row(i)),
            ]
            for previous, updated in pairs:
                assert np.all(updated >= np.minimum(previous, mean) - 1e-12)
                assert np.all(updated <= np.maximum(previous, mean) + 1e-12)


def test_row_update_examples():
    unlabeled = DistributionMatrix(np.array([[0.2, 0.8], [0.5, 0.5]]), Role.UNLABELED)
    state = AlignmentState(DistributionMatrix.uniform(2, Role.LABELED), unlabeled, alpha=0.99)
    probs = ProbabilityMap.from_pixels(np.array([[0.3, 0.7], [0.5, 0.5]]))
    pseudo = LabelMap.from_pixels(np.array([0, 0]), 2)
    updated = update_unlabeled_row(state, probs, pseudo, 0)
    assert np.allclose(updated.unlabeled.row(0), [0.202, 0.798], rtol=0, atol=1e-12)

    labeled = DistributionMatrix(np.array([[1.0, 0.0], [0.5, 0.5]]), Role.LABELED)
    state = AlignmentState(labeled, DistributionMatrix.uniform(2, Role.UNLABELED), alpha=0.9)
    probs = ProbabilityMap.from_pixels(np.array([[0.6, 0.4]]))
    labels = LabelMap.from_pixels(np.array([0]), 2)
    updated = update_labeled_row(state, probs, labels, 0)
    assert np.allclose(updated.labeled.row(0), [0.96, 0.04], rtol=0, atol=1e-7)


def test_fallback_example_sets_dynamic_threshold_from_labeled_row():
    labeled = DistributionMatrix(np.array([[0.6, 0.3, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]), Role.LABELED)
    unlabeled = DistributionMatrix(np.array([[0.3, 0.3, 0.4], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]), Role.UNLABELED)
    state = AlignmentState(labeled, unlabeled)
    probs = ProbabilityMap.from_pixels(np.array([[0.2, 0.7, 0.1], [0.1, 0.2, 0.7]]))
    pseudo = LabelMap.from_pixels(np.array([1, 2]), 3)

    updated = update_unlabeled_row(state, probs, pseudo, 0)
    assert np.allclose(updated.unlabeled.row(0), [0.6, 0.3, 0.1], rtol=0, atol=1e-12)
    assert dynamic_threshold(updated, 0) == pytest.approx(0.6)


def test_naive_da_example():
    state = NaiveDAState(np.array([0.5, 0.5]), np.array([0.8, 0.2]))
    aligned = naive_da_align(state, ProbabilityMap.from_pixels(np.array([[0.8, 0.2]])))
    assert np.allclose(aligned.flat[0], [0.5, 0.5], rtol=0, atol=1e-12)
