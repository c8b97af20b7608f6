import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import binary_erosion

from panolayout.confidence import ConfidenceMap
from panolayout.exceptions import ConfidenceDegenerateError, DomainError
from panolayout.geometry import Plane, bilinear_sample, warp_pixels
from panolayout.mvs import (
    NORMALIZATION_EPS,
    SENTINEL_COST,
    CostVolume,
    DepthHypotheses,
    ElementSamples,
    ViewInput,
    aggregate_element,
    combined_loss,
    cost_to_probability,
    depth_loss,
    layout_cost_volume,
    luminance,
    matching_cost,
    regress_depth,
    sample_element_pixels,
    softmin,
    solid_angle_weights,
)


def naive_aggregate(prob, weights):
    n, d = prob.shape
    out = [0.0] * d
    for k in range(n):
        for j in range(d):
            out[j] += weights[k] / n * prob[k, j]
    total = sum(out)
    return np.array([x / total for x in out])


def naive_regress(prob, values):
    depth = 0.0
    for p, v in zip(prob, values):
        depth += p * v
    return min(max(depth, values[0]), values[-1])


def random_distributions(rng, n, d):
    logits = rng.normal(scale=3.0, size=(n, d))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def test_hypotheses_inverse_spacing():
    hyp = DepthHypotheses()
    values = hyp.values
    assert len(values) == 128
    assert values[0] == 0.3 and values[-1] == 12.0
    assert np.all(np.diff(values) > 0)
    np.testing.assert_allclose(np.diff(1.0 / values), np.diff(1.0 / values)[0], rtol=1e-9)
    assert hyp.local_spacing(2.0) == pytest.approx(values[np.searchsorted(values, 2.0)] - values[np.searchsorted(values, 2.0) - 1])


def test_hypotheses_uniform_and_validation():
    hyp = DepthHypotheses(1.0, 3.0, 5, "uniform")
    np.testing.assert_allclose(hyp.values, [1.0, 1.5, 2.0, 2.5, 3.0])
    with pytest.raises(DomainError):
        DepthHypotheses(2.0, 1.0)
    with pytest.raises(DomainError):
        DepthHypotheses(count=1)
    with pytest.raises(DomainError):
        DepthHypotheses(spacing="log")


def test_aggregate_matches_naive_loop(rng):
    for _ in range(100):
        n, d = rng.integers(1, 40), rng.integers(2, 64)
        prob = random_distributions(rng, n, d)
        weights = rng.uniform(size=n) * (rng.uniform(size=n) > 0.2)
        if weights.sum() == 0:
            weights[0] = 0.5
        got = aggregate_element(prob, weights)
        np.testing.assert_allclose(got, naive_aggregate(prob, weights), rtol=0, atol=1e-9)
        assert abs(got.sum() - 1.0) < 1e-6


def test_regress_matches_naive_loop(rng):
    for _ in range(100):
        hyp = DepthHypotheses(count=int(rng.integers(2, 129)))
        prob = random_distributions(rng, 1, hyp.count)[0]
        assert abs(prob.sum() - 1.0) < 1e-6
        assert abs(regress_depth(prob, hyp) - naive_regress(prob, hyp.values)) < 1e-9


def test_regress_one_hot_returns_hypothesis():
    hyp = DepthHypotheses()
    for k in (0, 17, 127):
        prob = np.zeros(hyp.count)
        prob[k] = 1.0
        assert regress_depth(prob, hyp) == hyp.values[k]


def test_regress_validation():
    hyp = DepthHypotheses(count=4)
    with pytest.raises(DomainError):
        regress_depth(np.full(5, 0.2), hyp)
    with pytest.raises(DomainError):
        regress_depth(np.full(4, 0.3), hyp)


def test_aggregate_zero_confidence_raises():
    with pytest.raises(ConfidenceDegenerateError):
        aggregate_element(np.full((3, 4), 0.25), np.zeros(3))
    with pytest.raises(DomainError):
        aggregate_element(np.full((3, 4), 0.25), -np.ones(3))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 7), elements=st.floats(0.0, 50.0)), st.floats(0.01, 2.0))
def test_softmin_rows_sum_to_one(costs, temperature):
    prob = softmin(costs, temperature)
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(prob >= 0)
    # the lowest cost always gets the highest probability
    assert np.all(prob[np.arange(5), costs.argmin(axis=1)] == prob.max(axis=1))


def test_softmin_sentinels():
    costs = np.array([[SENTINEL_COST] * 4, [1.0, SENTINEL_COST, 0.5, 2.0]])
    prob = softmin(costs, 0.1)
    np.testing.assert_allclose(prob[0], 0.25)
    assert prob[1, 1] == 0.0
    assert prob[1].argmax() == 2


def test_depth_losses():
    assert depth_loss([1.0, 2.0], [1.5, 1.0]) == pytest.approx(0.75)
    assert combined_loss([1.0, 2.0], [0.5]) == pytest.approx(3.5)
    with pytest.raises(DomainError):
        depth_loss([1.0], [1.0, 2.0])


def test_sample_element_pixels_cap():
    region = np.zeros((100, 200), dtype=bool)
    region[10:90, 20:180] = True
    rows, cols, stride = sample_element_pixels(region, 1000)
    assert len(rows) <= 1000 and stride > 1
    assert region[rows, cols].all()
    rows, cols, stride = sample_element_pixels(region, 10**6)
    assert stride == 1 and len(rows) == region.sum()


def naive_cost(ref, sources, layout, element_index, depth, row, col, patch):
    """Matching cost of one pixel at one depth, by explicit patch warping."""
    cam = layout.cam
    radius = patch // 2
    element = layout.elements[element_index]
    plane = Plane(element.orientation, depth)
    offsets = [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)]
    pix = np.array([[(col + dc) % cam.width + 0.5, row + dr + 0.5] for dr, dc in offsets])
    a = np.array([ref.image[row + dr, (col + dc) % cam.width] for dr, dc in offsets])
    total, count = 0.0, 0
    for src in sources:
        warped = warp_pixels(ref.pose, src.pose, plane, cam, pix)
        if not np.all(np.isfinite(warped)):
            continue
        b = bilinear_sample(src.image, warped)
        va = np.mean(a * a) - np.mean(a) ** 2
        vb = np.mean(b * b) - np.mean(b) ** 2
        cov = np.mean(a * b) - np.mean(a) * np.mean(b)
        eps = NORMALIZATION_EPS
        cost = 0.25 * (va / (va + eps) + vb / (vb + eps) - 2 * cov / np.sqrt((va + eps) * (vb + eps)))
        total += max(cost, 0.0)
        count += 1
    return total / count if count else SENTINEL_COST


@pytest.fixture(scope="module")
def small_inputs(cuboid_views_small):
    return [
        ViewInput(luminance(v.image), v.pose, v.layout_gt, view_id=i) for i, v in enumerate(cuboid_views_small)
    ]


def test_matching_cost_matches_naive_patch_loop(small_inputs, rng):
    ref, sources = small_inputs[0], small_inputs[1:]
    layout = ref.layout
    hyp = DepthHypotheses(0.8, 4.0, 6)
    volume = matching_cost(ref, sources, layout, hyp, patch_size=3)
    checked = 0
    for index, samples in enumerate(volume.elements):
        interior = np.nonzero((samples.rows >= 2) & (samples.rows < layout.cam.height - 2))[0]
        for pick in rng.choice(interior, size=min(6, len(interior)), replace=False):
            r, c = samples.rows[pick], samples.cols[pick]
            for k, depth in enumerate(hyp.values):
                expected = naive_cost(ref, sources, layout, index, depth, r, c, 3)
                got = samples.values[pick, k]
                if np.isinf(expected):
                    assert np.isinf(got)
                else:
                    assert got == pytest.approx(expected, abs=1e-9)
                checked += 1
    assert checked > 100


def test_matching_cost_lowest_near_truth(small_inputs, cuboid_views_small):
    hyp = DepthHypotheses(count=64)
    volume = matching_cost(small_inputs[0], small_inputs[1:], small_inputs[0].layout, hyp)
    truth = cuboid_views_small[0].element_depths
    for samples, depth in zip(volume.elements, truth):
        finite = np.isfinite(samples.values).all(axis=1)
        profile = samples.values[finite].mean(axis=0)
        best = hyp.values[profile.argmin()]
        assert abs(best - depth) <= 2 * hyp.local_spacing(depth)


def test_matching_cost_validation(small_inputs):
    ref = small_inputs[0]
    hyp = DepthHypotheses(count=4)
    with pytest.raises(DomainError):
        matching_cost(ref, [], ref.layout, hyp)
    with pytest.raises(DomainError):
        matching_cost(ref, small_inputs[1:], ref.layout, hyp, patch_size=4)


def test_probability_volume_and_unseen_pixels():
    samples = ElementSamples(
        np.array([0, 0, 1]),
        np.array([0, 1, 0]),
        1,
        np.array([[1.0, 0.0, 2.0], [SENTINEL_COST] * 3, [0.5, 0.4, 3.0]]),
    )
    volume = CostVolume((4, 8), DepthHypotheses(1.0, 3.0, 3, "uniform"), [samples])
    prob = cost_to_probability(volume, temperature=0.1, smoothing=False)
    values = prob.elements[0].values
    np.testing.assert_allclose(values.sum(axis=1), 1.0)
    assert list(prob.elements[0].valid) == [True, False, True]
    lcv = layout_cost_volume(prob, area_weighting=False)
    # the unseen pixel's uniform row is left out of the element distribution
    expected = naive_aggregate(values[[0, 2]], np.ones(2))
    np.testing.assert_allclose(lcv.probabilities[0], expected, atol=1e-12)
    assert lcv.depths[0] == pytest.approx(naive_regress(expected, [1.0, 2.0, 3.0]))


def test_layout_cost_volume_weights_and_fallback():
    values = np.array([[0.9, 0.1], [0.1, 0.9]])
    samples = ElementSamples(np.array([0, 1]), np.array([0, 0]), 1, values)
    volume = CostVolume((2, 4), DepthHypotheses(1.0, 2.0, 2, "uniform"), [samples])
    conf = np.zeros((2, 4))
    conf[0, 0] = 1.0
    lcv = layout_cost_volume(volume, ConfidenceMap(conf, np.ones((2, 4)), conf), area_weighting=False)
    np.testing.assert_allclose(lcv.probabilities[0], [0.9, 0.1])
    zero = np.zeros((2, 4))
    lcv = layout_cost_volume(volume, ConfidenceMap(zero, np.ones((2, 4)), zero), area_weighting=False)
    np.testing.assert_allclose(lcv.probabilities[0], [0.5, 0.5])
    np.testing.assert_allclose(lcv.peak_probability, [0.5])


def test_solid_angle_weights():
    w = solid_angle_weights(np.arange(4), 4)
    np.testing.assert_allclose(w, np.sin((np.arange(4) + 0.5) * np.pi / 4))
    assert w[0] == pytest.approx(w[3])


def test_smoothing_keeps_distributions_normalized(small_inputs):
    hyp = DepthHypotheses(count=16)
    volume = matching_cost(small_inputs[1], [small_inputs[0]], small_inputs[1].layout, hyp)
    for smoothing in (False, True):
        prob = cost_to_probability(volume, smoothing=smoothing)
        for samples in prob.elements:
            np.testing.assert_allclose(samples.values.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(DomainError):
        cost_to_probability(volume, temperature=0.0)


def test_identical_source_has_zero_cost(small_inputs):
    ref = small_inputs[0]
    twin = ViewInput(ref.image, ref.pose, ref.layout, view_id=9)
    volume = matching_cost(ref, [twin], ref.layout, DepthHypotheses(count=8))
    for samples in volume.elements:
        finite = np.isfinite(samples.values)
        assert finite.any()
        assert np.abs(samples.values[finite]).max() < 1e-12


def test_argmin_hits_true_wall_depth(cuboid_views_medium):
    hyp = DepthHypotheses()
    views = [ViewInput(luminance(v.image), v.pose, v.layout_gt, view_id=i) for i, v in enumerate(cuboid_views_medium)]
    hits = total = 0
    for ref, view in zip(views, cuboid_views_medium):
        volume = matching_cost(ref, [v for v in views if v is not ref], ref.layout, hyp)
        for index, (samples, element) in enumerate(zip(volume.elements, ref.layout.elements)):
            if element.kind != "wall":
                continue
            nearest = np.argmin(np.abs(hyp.values - view.element_depths[index]))
            # interior pixels: the whole matching window lies on the wall
            inner = binary_erosion(element.region, np.ones((5, 5)))
            keep = inner[samples.rows, samples.cols] & np.isfinite(samples.values).all(axis=1)
            hits += int((samples.values[keep].argmin(axis=1) == nearest).sum())
            total += int(keep.sum())
    assert hits / total >= 0.95


def test_softmin_limits():
    prob = cost_to_probability(
        CostVolume((1, 4), DepthHypotheses(1.0, 3.0, 3, "uniform"), [
            ElementSamples(np.array([0, 0]), np.array([0, 1]), 1, np.array([[0.0, SENTINEL_COST, SENTINEL_COST], [0.7, 0.7, 0.7]]))
        ]),
        smoothing=False,
    )
    np.testing.assert_allclose(prob.elements[0].values[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(prob.elements[0].values[1], [1 / 3] * 3)


def test_aggregate_small_cases(rng):
    q = random_distributions(rng, 1, 6)[0]
    np.testing.assert_allclose(aggregate_element(np.tile(q, (5, 1)), rng.uniform(0.1, 1.0, 5)), q, atol=1e-15)
    deltas = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(aggregate_element(deltas, np.ones(2)), [0.5, 0.0, 0.5])


def test_aggregate_confidence_scale_invariance(rng):
    prob = random_distributions(rng, 30, 16)
    weights = rng.uniform(size=30)
    base = aggregate_element(prob, weights)
    # power-of-two factors are exact in floating point
    np.testing.assert_array_equal(aggregate_element(prob, weights * 4.0), base)
    for factor in (0.3, 7.0, 123.4):
        np.testing.assert_allclose(aggregate_element(prob, weights * factor), base, rtol=1e-12, atol=0)


def test_regress_uniform_two_values():
    assert regress_depth(np.array([0.5, 0.5]), DepthHypotheses(1.0, 3.0, 2, "uniform")) == 2.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 32, elements=st.floats(0.0, 1.0)).filter(lambda p: p.sum() > 1e-3))
def test_regression_within_bounds(p):
    hyp = DepthHypotheses(count=32)
    depth = regress_depth(p / p.sum(), hyp)
    assert hyp.d_min <= depth <= hyp.d_max


def test_depth_loss_constant_offset(rng):
    gt = rng.uniform(1.0, 5.0, 6)
    assert depth_loss(gt, gt) == 0.0
    assert depth_loss(gt + 0.25, gt) == pytest.approx(0.25, abs=1e-12)
