"""Layout cost volume: per-element depth sweep, 1D probability and depth regression.

For every layout element the reference pixels are swept over depth
hypotheses along the element's own orientation. Each pixel gets a
photometric matching cost per hypothesis, costs become per-pixel
probabilities through a softmin, and the per-pixel distributions of an
element are averaged (confidence-weighted) into a single 1D distribution
whose expectation is the element depth.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.ndimage import uniform_filter1d

from .confidence import ConfidenceMap
from .exceptions import ConfidenceDegenerateError, DomainError
from .geometry import Pose, SphericalCamera, _ray_to_pixel_unchecked, bilinear_sample
from .layout2d import Layout2D

log = logging.getLogger(__name__)

SENTINEL_COST = np.inf
MAX_ELEMENT_PIXELS = 20_000
NORMALIZATION_EPS = 1e-4
DEFAULT_TEMPERATURE = 0.05
DEFAULT_SMOOTHING_SIZE = 5


@dataclass(frozen=True)
class DepthHypotheses:
    """Depth sweep plan; ``spacing`` is ``"uniform"`` or ``"inverse"`` (uniform in 1/d)."""

    d_min: float = 0.3
    d_max: float = 12.0
    count: int = 128
    spacing: str = "inverse"

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise DomainError("need 0 < d_min < d_max")
        if self.count < 2:
            raise DomainError("need at least two hypotheses")
        if self.spacing not in ("uniform", "inverse"):
            raise DomainError(f"unknown hypothesis spacing {self.spacing!r}")

    @cached_property
    def values(self) -> np.ndarray:
        if self.spacing == "uniform":
            values = np.linspace(self.d_min, self.d_max, self.count)
        else:
            values = 1.0 / np.linspace(1.0 / self.d_min, 1.0 / self.d_max, self.count)
        values[0], values[-1] = self.d_min, self.d_max
        values.setflags(write=False)
        return values

    def local_spacing(self, depth: float) -> float:
        """Gap between the two hypotheses bracketing ``depth``."""
        values = self.values
        k = int(np.clip(np.searchsorted(values, depth), 1, len(values) - 1))
        return float(values[k] - values[k - 1])


@dataclass(eq=False)
class ViewInput:
    """A calibrated panorama with its optional per-view rasters."""

    image: np.ndarray
    pose: Pose
    layout: Layout2D | None = None
    semantic: np.ndarray | None = None
    attention: np.ndarray | None = None
    view_id: int = 0

    @property
    def cam(self) -> SphericalCamera:
        height, width = self.image.shape[:2]
        return SphericalCamera(width, height)


def luminance(image: np.ndarray) -> np.ndarray:
    """Default photometric feature: Rec. 601 luma of an RGB (or gray) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


FeatureExtractor = Callable[[np.ndarray], np.ndarray]


@dataclass(eq=False)
class ElementSamples:
    """Per-hypothesis values for the sampled pixels of one layout element."""

    rows: np.ndarray
    cols: np.ndarray
    stride: int
    values: np.ndarray
    observed: np.ndarray | None = None

    @property
    def valid(self) -> np.ndarray:
        """Pixels seen by at least one source at some hypothesis."""
        if self.observed is not None:
            return self.observed
        return np.isfinite(self.values).any(axis=1)


@dataclass(eq=False)
class CostVolume:
    """Pixel x hypothesis volume, grouped by layout element."""

    shape: tuple[int, int]
    hypotheses: DepthHypotheses
    elements: list[ElementSamples]


@dataclass(eq=False)
class LayoutCostVolume:
    """Per-element 1D depth distributions and regressed depths."""

    hypotheses: DepthHypotheses
    probabilities: np.ndarray
    depths: np.ndarray = field(default=None)

    @property
    def peak_probability(self) -> np.ndarray:
        return self.probabilities.max(axis=1)


def _element_stride(count: int, limit: int) -> int:
    stride = 1
    while count > limit * stride * stride:
        stride += 1
    return stride


def sample_element_pixels(region: np.ndarray, limit: int = MAX_ELEMENT_PIXELS) -> tuple[np.ndarray, np.ndarray, int]:
    """Region pixels on a regular grid coarse enough to keep at most ``limit``."""
    count = int(region.sum())
    stride = _element_stride(count, limit)
    while True:
        offset = stride // 2
        grid = np.zeros_like(region)
        grid[offset::stride, offset::stride] = True
        rows, cols = np.nonzero(region & grid)
        if len(rows) <= limit and len(rows) > 0:
            return rows, cols, stride
        if len(rows) == 0:
            # tiny region missing every grid node: fall back to all pixels
            rows, cols = np.nonzero(region)
            return rows, cols, 1
        stride += 1


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square dilation; columns wrap, rows clamp."""
    out = mask.copy()
    for shift in range(1, radius + 1):
        out |= np.roll(mask, shift, axis=1) | np.roll(mask, -shift, axis=1)
    grown = out.copy()
    for shift in range(1, radius + 1):
        grown[shift:] |= out[:-shift]
        grown[:-shift] |= out[shift:]
    return grown


def _box_mean(values: np.ndarray, size: int, wrap: bool = True) -> np.ndarray:
    """Mean over ``size x size`` windows of the last two axes (rows clamp, columns wrap)."""
    out = uniform_filter1d(values, size, axis=-1, mode="wrap" if wrap else "nearest")
    return uniform_filter1d(out, size, axis=-2, mode="nearest")


def _window(support: np.ndarray) -> tuple[int, int, np.ndarray, bool]:
    """Smallest row band and circular column run covering ``support``.

    Returns ``(row_start, row_stop, columns, wraps)`` where ``wraps`` tells
    whether the run is the full circle.
    """
    height, width = support.shape
    used_rows = np.nonzero(support.any(axis=1))[0]
    used = support.any(axis=0)
    if used.all():
        return int(used_rows[0]), int(used_rows[-1]) + 1, np.arange(width), True
    # start right after the longest circular run of unused columns
    empty = ~used
    doubled = np.concatenate([empty, empty])
    best_len, best_end, run = 0, 0, 0
    for index, flag in enumerate(doubled):
        run = run + 1 if flag else 0
        if run > best_len:
            best_len, best_end = run, index
    start = (best_end + 1) % width
    cols = (start + np.arange(width - min(best_len, width))) % width
    return int(used_rows[0]), int(used_rows[-1]) + 1, cols, False


def matching_cost(
    ref: ViewInput,
    sources: Sequence[ViewInput],
    layout: Layout2D,
    hyp: DepthHypotheses,
    patch_size: int = 5,
    features: FeatureExtractor = luminance,
    max_element_pixels: int = MAX_ELEMENT_PIXELS,
) -> CostVolume:
    """Photometric cost of every sampled pixel at every depth hypothesis.

    A ``patch_size`` square around each pixel is warped into every source view
    through the plane of the pixel's element at the hypothesised depth. The cost
    for one source is the variance between the zero-mean, unit-variance
    reference and warped patches, averaged over the patch; costs are then
    averaged over the sources that see the whole patch. Pixels seen by no
    source get :data:`SENTINEL_COST`.
    """
    if not sources:
        raise DomainError("matching needs at least one source view")
    if patch_size < 1 or patch_size % 2 == 0:
        raise DomainError("patch size must be a positive odd integer")
    cam = layout.cam
    height, width = cam.shape
    ref_feat = features(ref.image)
    if ref_feat.shape[:2] != cam.shape:
        raise DomainError("reference image and layout sizes differ")
    src_feats = [features(s.image) for s in sources]
    for feat in src_feats:
        if feat.shape[:2] != cam.shape:
            raise DomainError("source image size differs from the reference")
    if np.any(layout.labels() < 0):
        raise DomainError("layout elements do not cover the panorama")

    radius = patch_size // 2
    ref_mean = _box_mean(ref_feat, patch_size)
    ref_var = np.maximum(_box_mean(ref_feat * ref_feat, patch_size) - ref_mean**2, 0.0)
    rays = cam.rays()
    relatives = []
    for src in sources:
        rot = src.pose.rotation.T @ ref.pose.rotation
        shift = src.pose.rotation.T @ (ref.pose.translation - src.pose.translation)
        relatives.append((rot, shift))

    depths = hyp.values
    elements = []
    for element in layout.elements:
        rows, cols, stride = sample_element_pixels(element.region, max_element_pixels)
        support = _dilate(element.region, radius)
        r0, r1, win_cols, wrap = _window(support)
        band = support[r0:r1][:, win_cols]
        band_rays = rays[r0:r1][:, win_cols][band]
        facing = -(band_rays @ element.orientation)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit_points = np.where(facing[:, None] > 0, band_rays / facing[:, None], np.nan)
        out_rows = rows - r0
        col_pos = np.full(width, -1)
        col_pos[win_cols] = np.arange(len(win_cols))
        out_cols = col_pos[cols]
        a_mean = ref_mean[rows, cols]
        a_var = ref_var[rows, cols]
        costs = np.zeros((len(rows), len(depths)))
        seen = np.zeros((len(rows), len(depths)))
        ref_band = ref_feat[r0:r1][:, win_cols]
        for (rot, shift), feat in zip(relatives, src_feats):
            directions = unit_points @ rot.T
            for k, depth in enumerate(depths):
                points = depth * directions + shift
                ok = np.all(np.isfinite(points), axis=1)
                pix = np.zeros((len(points), 2))
                pix[ok] = _ray_to_pixel_unchecked(width, height, points[ok])
                stack = np.zeros((4,) + band.shape)
                warped = np.where(ok, bilinear_sample(feat, pix), 0.0)
                stack[0][band] = warped
                stack[1][band] = warped * warped
                stack[2][band] = warped * ref_band[band]
                stack[3][band] = ok
                b_mean, b_sq, ab, cover = _box_mean(stack, patch_size, wrap)[:, out_rows, out_cols]
                full = cover > 1 - 1e-9
                b_var = np.maximum(b_sq - b_mean**2, 0.0)
                cov = ab - a_mean * b_mean
                cost = 0.25 * (
                    a_var / (a_var + NORMALIZATION_EPS)
                    + b_var / (b_var + NORMALIZATION_EPS)
                    - 2.0 * cov / np.sqrt((a_var + NORMALIZATION_EPS) * (b_var + NORMALIZATION_EPS))
                )
                costs[full, k] += np.maximum(cost[full], 0.0)
                seen[full, k] += 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(seen > 0, costs / seen, SENTINEL_COST)
        elements.append(ElementSamples(rows, cols, stride, values))
    return CostVolume(cam.shape, hyp, elements)


def _smooth_samples(samples: ElementSamples, shape: tuple[int, int], size: int) -> np.ndarray:
    """Box-smooth one element's values over its sampling grid, ignoring gaps."""
    height, width = shape
    stride = samples.stride
    gh = -(-height // stride)
    gw = -(-width // stride)
    gr = samples.rows // stride
    gc = samples.cols // stride
    depth = samples.values.shape[1]
    grid = np.zeros((gh, gw, depth))
    weight = np.zeros((gh, gw, depth))
    finite = np.isfinite(samples.values)
    grid[gr, gc] = np.where(finite, samples.values, 0.0)
    weight[gr, gc] = finite
    wrap = "wrap" if width % stride == 0 else "nearest"
    for axis, mode in ((0, "constant"), (1, wrap)):
        grid = uniform_filter1d(grid, size, axis=axis, mode=mode)
        weight = uniform_filter1d(weight, size, axis=axis, mode=mode)
    with np.errstate(invalid="ignore", divide="ignore"):
        smoothed = np.where(weight[gr, gc] > 1e-12, grid[gr, gc] / weight[gr, gc], SENTINEL_COST)
    return np.where(finite, smoothed, SENTINEL_COST)


def softmin(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise ``exp(-cost / T)`` normalized; all-sentinel rows become uniform."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    lowest = np.min(np.where(finite, costs, np.inf), axis=-1, keepdims=True)
    lowest = np.where(np.isfinite(lowest), lowest, 0.0)
    with np.errstate(invalid="ignore"):
        logits = np.where(finite, -(costs - lowest) / temperature, -np.inf)
    weights = np.exp(logits)
    total = weights.sum(axis=-1, keepdims=True)
    uniform = np.full_like(weights, 1.0 / costs.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, weights / total, uniform)


def cost_to_probability(
    volume: CostVolume,
    temperature: float = DEFAULT_TEMPERATURE,
    smoothing: bool = True,
    smoothing_size: int = DEFAULT_SMOOTHING_SIZE,
    normalize: bool = True,
) -> CostVolume:
    """Per-pixel depth distributions from raw costs.

    Costs are divided by their median over the volume (``normalize``),
    optionally box-smoothed over each element's pixel grid, then turned into
    probabilities with a softmin at ``temperature``.
    """
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    scale = 1.0
    if normalize:
        finite = np.concatenate([s.values[np.isfinite(s.values)] for s in volume.elements] or [np.zeros(0)])
        median = float(np.median(finite)) if finite.size else 0.0
        scale = median if median > 1e-12 else 1.0
    out = []
    for samples in volume.elements:
        values = samples.values / scale
        if smoothing and smoothing_size > 1:
            values = _smooth_samples(ElementSamples(samples.rows, samples.cols, samples.stride, values), volume.shape, smoothing_size)
        out.append(
            ElementSamples(samples.rows, samples.cols, samples.stride, softmin(values, temperature), samples.valid)
        )
    return CostVolume(volume.shape, volume.hypotheses, out)


def aggregate_element(prob: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Confidence-weighted mean of per-pixel distributions, renormalized to sum 1.

    Args:
        prob: ``(N, D)`` per-pixel probabilities of one element's pixels.
        weights: ``(N,)`` non-negative confidences ``c_k``.

    Raises:
        ConfidenceDegenerateError: every weight is zero.
    """
    prob = np.asarray(prob, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if prob.ndim != 2 or weights.shape != prob.shape[:1] or len(weights) == 0:
        raise DomainError("aggregate_element needs (N, D) probabilities and N weights, N > 0")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise DomainError("confidence weights must be finite and non-negative")
    if not weights.sum() > 0:
        raise ConfidenceDegenerateError("all confidences over the element are zero")
    # elementwise products and numpy's pairwise sum keep the reduction order fixed
    summed = np.sum(prob * (weights / len(weights))[:, None], axis=0)
    return summed / summed.sum()


def regress_depth(prob_1d: np.ndarray, hyp: DepthHypotheses) -> float:
    """Expected depth under a normalized 1D distribution over ``hyp``."""
    prob_1d = np.asarray(prob_1d, dtype=np.float64)
    if prob_1d.shape != (hyp.count,):
        raise DomainError("probability vector length differs from the hypothesis count")
    if abs(prob_1d.sum() - 1.0) > 1e-6 or np.any(prob_1d < 0):
        raise DomainError("probability vector is not normalized")
    depth = float(np.sum(prob_1d * hyp.values))
    return min(max(depth, hyp.d_min), hyp.d_max)


def depth_loss(pred, gt) -> float:
    """Mean absolute depth error over elements."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise DomainError("depth loss needs equally sized, non-empty inputs")
    return float(np.mean(np.abs(pred - gt)))


def combined_loss(layout_losses: Sequence[float], depth_losses: Sequence[float]) -> float:
    """Sum of per-view 2D layout losses and per-element depth losses."""
    return float(np.sum(layout_losses) + np.sum(depth_losses))


def solid_angle_weights(rows: np.ndarray, height: int) -> np.ndarray:
    """Relative solid angle of equirectangular pixels in the given rows (1 at the equator)."""
    return np.sin((np.asarray(rows) + 0.5) * (np.pi / height))


def layout_cost_volume(
    prob: CostVolume, conf: ConfidenceMap | None = None, area_weighting: bool = True
) -> LayoutCostVolume:
    """Compress per-pixel distributions into one distribution per element.

    Pixels without any source observation are left out. Each pixel's
    confidence is scaled by its solid angle when ``area_weighting`` is set,
    so the heavily oversampled polar rows do not dominate floor and ceiling
    elements. If an element's confidences are all zero it falls back to
    unit confidences.
    """
    rows = []
    for index, samples in enumerate(prob.elements):
        keep = samples.valid
        if not keep.any():
            keep = np.ones(len(samples.rows), dtype=bool)
        area = solid_angle_weights(samples.rows[keep], prob.shape[0]) if area_weighting else np.ones(int(keep.sum()))
        weights = area if conf is None else conf.c[samples.rows[keep], samples.cols[keep]] * area
        try:
            rows.append(aggregate_element(samples.values[keep], weights))
        except ConfidenceDegenerateError:
            log.warning("element %d has zero confidence everywhere; using unit confidence", index)
            rows.append(aggregate_element(samples.values[keep], area))
    probabilities = np.array(rows)
    depths = np.array([regress_depth(p, prob.hypotheses) for p in probabilities])
    return LayoutCostVolume(prob.hypotheses, probabilities, depths)
