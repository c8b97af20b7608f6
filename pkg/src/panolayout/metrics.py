"""Evaluation metrics: layout depth RMSE, camera-height scale error and cross-view coherency."""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError
from .fusion import Layout3D, SceneLayout, camera_height
from .geometry import _ray_to_pixel_unchecked
from .io import write_png

log = logging.getLogger(__name__)

CORRESPONDENCES_PER_PAIR = 1000


def depth_rmse(pred, gt, mask=None) -> float:
    """Root mean squared difference of two layout depth rasters.

    Args:
        pred: predicted depth raster.
        gt: ground-truth depth raster, positive where evaluated.
        mask: optional boolean raster restricting the pixels.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"depth rasters differ in shape: {pred.shape} vs {gt.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise DomainError("mask shape differs from the depth rasters")
        pred, gt = pred[mask], gt[mask]
    if gt.size == 0:
        raise DomainError("no pixels to evaluate")
    if np.any(~(gt > 0)):
        raise DomainError("ground-truth depth must be positive")
    diff = pred - gt
    return float(np.sqrt(np.mean(diff * diff)))


def scale_error(pred_height: float, gt_height: float) -> float:
    """Absolute camera-height difference in meters."""
    return abs(float(pred_height) - float(gt_height))


@dataclass(eq=False)
class Correspondences:
    """Pixel pairs of two views that see the same layout point."""

    view_a: int
    view_b: int
    pixels_a: np.ndarray
    pixels_b: np.ndarray

    def __post_init__(self):
        self.pixels_a = np.asarray(self.pixels_a, dtype=np.float64).reshape(-1, 2)
        self.pixels_b = np.asarray(self.pixels_b, dtype=np.float64).reshape(-1, 2)
        if self.pixels_a.shape != self.pixels_b.shape:
            raise DomainError("correspondence pixel lists differ in length")

    def __len__(self) -> int:
        return len(self.pixels_a)

    def swapped(self) -> "Correspondences":
        return Correspondences(self.view_b, self.view_a, self.pixels_b, self.pixels_a)

    def to_dict(self) -> dict:
        return {
            "view_a": self.view_a,
            "view_b": self.view_b,
            "pixels_a": self.pixels_a.tolist(),
            "pixels_b": self.pixels_b.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Correspondences":
        return cls(int(data["view_a"]), int(data["view_b"]), data["pixels_a"], data["pixels_b"])


def generate_correspondences(
    gt_a: Layout3D,
    gt_b: Layout3D,
    count: int = CORRESPONDENCES_PER_PAIR,
    seed: int = 0,
    tolerance: float = 1e-4,
) -> Correspondences:
    """Sample pixel pairs that see the same ground-truth layout point.

    Random pixels of view ``a`` are lifted with its ground-truth layout and
    projected into view ``b``; a pair is kept only when ``b``'s own layout
    lifts the projected pixel to the same point (so the point is not hidden
    behind another element in ``b``).
    """
    rng = np.random.default_rng(seed)
    cam = gt_a.cam
    kept_a, kept_b = [], []
    total = 0
    for _ in range(50):
        batch = max(4 * count, 256)
        pix_a = rng.uniform([0.0, 0.0], [cam.width, cam.height], size=(batch, 2))
        points = gt_a.lift_pixels(pix_a)
        local = gt_b.pose.to_camera(points)
        ok = np.all(np.isfinite(local), axis=1) & (np.linalg.norm(local, axis=1) > 1e-9)
        pix_b = np.full_like(pix_a, np.nan)
        pix_b[ok] = _ray_to_pixel_unchecked(gt_b.cam.width, gt_b.cam.height, local[ok])
        ok &= (pix_b[:, 1] >= 0) & (pix_b[:, 1] < gt_b.cam.height)
        back = np.full_like(points, np.nan)
        back[ok] = gt_b.lift_pixels(pix_b[ok])
        with np.errstate(invalid="ignore"):
            ok &= np.linalg.norm(back - points, axis=1) < tolerance
        kept_a.append(pix_a[ok])
        kept_b.append(pix_b[ok])
        total += int(ok.sum())
        if total >= count:
            break
    pix_a = np.concatenate(kept_a)[:count]
    pix_b = np.concatenate(kept_b)[:count]
    if len(pix_a) < count:
        log.warning("views %d/%d share few visible points: %d correspondences", gt_a.view_id, gt_b.view_id, len(pix_a))
    return Correspondences(gt_a.view_id, gt_b.view_id, pix_a, pix_b)


@dataclass
class CoherencyResult:
    mean: float
    used: int
    excluded: int


def coherency_details(layouts: Mapping[int, Layout3D], pairs: Sequence[Correspondences]) -> CoherencyResult:
    """Coherency plus how many correspondences were used and excluded."""
    distances = []
    excluded = 0
    for pair in pairs:
        if len(pair) == 0:
            continue
        try:
            a = layouts[pair.view_a]
            b = layouts[pair.view_b]
        except KeyError as exc:
            raise DomainError(f"no layout for view {exc.args[0]}") from exc
        points_a = a.lift_pixels(pair.pixels_a)
        points_b = b.lift_pixels(pair.pixels_b)
        dist = np.linalg.norm(points_a - points_b, axis=1)
        finite = np.isfinite(dist)
        excluded += int((~finite).sum())
        distances.append(dist[finite])
    if not distances or sum(len(d) for d in distances) == 0:
        raise DomainError("coherency needs at least one usable correspondence")
    used = np.concatenate(distances)
    if excluded:
        log.warning("%d correspondences missed their element plane and were excluded", excluded)
    return CoherencyResult(float(np.mean(used)), len(used), excluded)


def coherency(layouts: Mapping[int, Layout3D], pairs: Sequence[Correspondences]) -> float:
    """Mean 3D distance between the two lifts of corresponding pixels."""
    return coherency_details(layouts, pairs).mean


@dataclass
class EvalReport:
    """Scene-level metrics with a per-view breakdown (meters)."""

    depth_rmse: float
    depth_rmse_structure: float
    scale_error: float
    coherency: float
    per_view: list = field(default_factory=list)
    correspondences_used: int = 0
    correspondences_excluded: int = 0

    def __post_init__(self):
        for name in ("depth_rmse", "depth_rmse_structure", "scale_error", "coherency"):
            value = getattr(self, name)
            if not (value >= 0 or np.isnan(value)):
                raise DomainError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "depth_rmse": self.depth_rmse,
            "depth_rmse_structure": self.depth_rmse_structure,
            "scale_error": self.scale_error,
            "coherency": self.coherency,
            "correspondences_used": self.correspondences_used,
            "correspondences_excluded": self.correspondences_excluded,
            "per_view": self.per_view,
        }


def evaluate(
    pred: Mapping[int, Layout3D],
    gt: Mapping[int, Layout3D],
    gt_depths: Mapping[int, np.ndarray] | None = None,
    structure: Mapping[int, np.ndarray] | None = None,
    pairs: Sequence[Correspondences] = (),
    pred_depths: Mapping[int, np.ndarray] | None = None,
    scene: SceneLayout | None = None,
) -> EvalReport:
    """Compare predicted per-view layouts against ground truth.

    Depth RMSE pools all pixels of all views. The structure-only figure uses
    the ``structure`` masks when given (else equals the all-pixel one).
    Scale error is averaged over views. Coherency is computed on ``pairs``
    when any are given, otherwise reported as NaN; with a fused ``scene`` the
    views are first snapped to their fused planes.
    """
    if not pred:
        raise DomainError("nothing to evaluate")
    per_view = []
    sq_all = n_all = sq_struct = n_struct = 0.0
    heights = []
    for view_id in sorted(pred):
        if view_id not in gt:
            raise DomainError(f"no ground truth for view {view_id}")
        p, g = pred[view_id], gt[view_id]
        pred_depth = pred_depths[view_id] if pred_depths is not None and view_id in pred_depths else p.depth_raster()
        gt_depth = gt_depths[view_id] if gt_depths is not None and view_id in gt_depths else g.depth_raster()
        if pred_depth.shape != gt_depth.shape:
            raise DomainError(f"view {view_id}: raster sizes differ {pred_depth.shape} vs {gt_depth.shape}")
        rmse = depth_rmse(pred_depth, gt_depth)
        mask = structure.get(view_id) if structure is not None else None
        rmse_struct = depth_rmse(pred_depth, gt_depth, mask) if mask is not None and mask.any() else rmse
        sq_all += rmse**2 * gt_depth.size
        n_all += gt_depth.size
        count = int(mask.sum()) if mask is not None and mask.any() else gt_depth.size
        sq_struct += rmse_struct**2 * count
        n_struct += count
        entry = {"view_id": view_id, "depth_rmse": rmse, "depth_rmse_structure": rmse_struct}
        try:
            pred_h, gt_h = camera_height(p), camera_height(g)
            entry.update(camera_height=pred_h, camera_height_gt=gt_h, scale_error=scale_error(pred_h, gt_h))
            heights.append(entry["scale_error"])
        except DomainError as exc:
            log.warning("view %d: %s", view_id, exc)
        per_view.append(entry)
    coh, used, excluded = float("nan"), 0, 0
    if pairs:
        lifted = {k: v.snapped_to(scene) for k, v in pred.items()} if scene is not None else pred
        result = coherency_details(lifted, pairs)
        coh, used, excluded = result.mean, result.used, result.excluded
    return EvalReport(
        float(np.sqrt(sq_all / n_all)),
        float(np.sqrt(sq_struct / n_struct)),
        float(np.mean(heights)) if heights else float("nan"),
        coh,
        per_view,
        used,
        excluded,
    )


_ERROR_STOPS = np.array(
    [
        [0.0, 0.0, 0.5],
        [0.0, 0.3, 1.0],
        [0.0, 0.9, 0.9],
        [0.9, 0.9, 0.0],
        [1.0, 0.3, 0.0],
        [0.5, 0.0, 0.0],
    ]
)


def error_colormap(error: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Absolute errors mapped from blue (low) to red (high) as uint8 RGB."""
    error = np.abs(np.asarray(error, dtype=np.float64))
    if vmax is None:
        vmax = float(np.max(error)) if error.size else 1.0
    t = np.clip(error / vmax, 0.0, 1.0) if vmax > 0 else np.zeros_like(error)
    x = np.linspace(0.0, 1.0, len(_ERROR_STOPS))
    rgb = np.stack([np.interp(t, x, _ERROR_STOPS[:, c]) for c in range(3)], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


def write_error_png(path, pred, gt, vmax: float | None = None) -> None:
    write_png(path, error_colormap(np.asarray(pred) - np.asarray(gt), vmax))


def write_error_histogram(path, pred, gt, bins: int = 50, max_error: float | None = None) -> None:
    """CSV of absolute-error histogram counts (``bin_low,bin_high,count``)."""
    error = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)).ravel()
    upper = max_error if max_error is not None else max(float(error.max()) if error.size else 1.0, 1e-9)
    counts, edges = np.histogram(error, bins=bins, range=(0.0, upper))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            writer.writerow([f"{lo:.6f}", f"{hi:.6f}", int(n)])
