"""Estimator interface over the per-view depth sweep.

``LayoutDepthEstimator.fit`` takes a group of calibrated views that see the
same room; ``predict`` returns the lifted 3D layout of each requested
reference view, matched against every other view in the group.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_choice, check_positive, check_views
from .confidence import ConfidenceMap, SemanticTable, build_confidence
from .fusion import Layout3D, lift
from .mvs import (
    DEFAULT_SMOOTHING_SIZE,
    DEFAULT_TEMPERATURE,
    MAX_ELEMENT_PIXELS,
    DepthHypotheses,
    LayoutCostVolume,
    ViewInput,
    cost_to_probability,
    layout_cost_volume,
    matching_cost,
)

log = logging.getLogger(__name__)

CONFIDENCE_MODES = ("none", "semantic", "full")


@dataclass(eq=False)
class ViewResult:
    layout: Layout3D
    volume: LayoutCostVolume
    seconds: float


def view_confidence(view: ViewInput, mode: str, table: SemanticTable | None = None) -> ConfidenceMap:
    """Confidence map of one view; missing rasters fall back to unit weights."""
    shape = view.image.shape[:2]
    if mode == "none":
        return ConfidenceMap.ones(shape)
    semantic = view.semantic
    attention = view.attention
    if semantic is None:
        log.warning("view %d has no semantic map; using unit semantic confidence", view.view_id)
        semantic = np.full(shape, 2, dtype=np.uint8)
    if mode == "full" and attention is None:
        log.warning("view %d has no attention map; using unit attention", view.view_id)
        attention = np.ones(shape)
    return build_confidence(mode, shape, semantic, attention, table)


class LayoutDepthEstimator(BaseEstimator):
    """Absolute per-element depths for panoramas with known layouts and poses.

    Parameters:
        hyp_count: number of depth hypotheses.
        hyp_min: nearest hypothesis, meters.
        hyp_max: farthest hypothesis, meters.
        spacing: ``"inverse"`` (uniform in 1/d) or ``"uniform"``.
        temperature: softmin temperature on median-normalized costs.
        patch_size: odd side length of the matching window.
        smoothing: box-filter costs over each element before the softmin.
        smoothing_size: smoothing window, in sampled pixels.
        confidence: ``"none"``, ``"semantic"`` or ``"full"``.
        max_pixels: cap on sampled pixels per element.
        threads: views processed concurrently.
        semantic_table: optional label to confidence mapping.
    """

    def __init__(
        self,
        hyp_count: int = 128,
        hyp_min: float = 0.3,
        hyp_max: float = 12.0,
        spacing: str = "inverse",
        temperature: float = DEFAULT_TEMPERATURE,
        patch_size: int = 5,
        smoothing: bool = True,
        smoothing_size: int = DEFAULT_SMOOTHING_SIZE,
        confidence: str = "semantic",
        max_pixels: int = MAX_ELEMENT_PIXELS,
        threads: int = 1,
        semantic_table: SemanticTable | None = None,
    ):
        self.hyp_count = hyp_count
        self.hyp_min = hyp_min
        self.hyp_max = hyp_max
        self.spacing = spacing
        self.temperature = temperature
        self.patch_size = patch_size
        self.smoothing = smoothing
        self.smoothing_size = smoothing_size
        self.confidence = confidence
        self.max_pixels = max_pixels
        self.threads = threads
        self.semantic_table = semantic_table

    def _check_params(self) -> None:
        check_positive("hyp_count", self.hyp_count, integer=True)
        check_positive("temperature", self.temperature)
        check_positive("patch_size", self.patch_size, integer=True)
        check_positive("smoothing_size", self.smoothing_size, integer=True)
        check_positive("max_pixels", self.max_pixels, integer=True)
        check_positive("threads", self.threads, integer=True)
        check_choice("confidence", self.confidence, CONFIDENCE_MODES)

    def fit(self, views: Sequence[ViewInput], y=None):
        """Store the view group and build the hypothesis plan."""
        self._check_params()
        self.views_ = check_views(views)
        self.hypotheses_ = DepthHypotheses(self.hyp_min, self.hyp_max, int(self.hyp_count), self.spacing)
        self.view_ids_ = [v.view_id for v in self.views_]
        if len(self.views_) == 1:
            log.warning("single view: matching it against itself, depths are unconstrained")
        return self

    def _sources(self, index: int) -> list[ViewInput]:
        others = [v for i, v in enumerate(self.views_) if i != index]
        return others or [self.views_[index]]

    def reconstruct(self, index: int) -> ViewResult:
        """Depth sweep, probability and aggregation for the view at ``index``."""
        start = time.perf_counter()
        ref = self.views_[index]
        volume = matching_cost(
            ref, self._sources(index), ref.layout, self.hypotheses_, int(self.patch_size), max_element_pixels=int(self.max_pixels)
        )
        prob = cost_to_probability(volume, self.temperature, self.smoothing, int(self.smoothing_size))
        conf = view_confidence(ref, self.confidence, self.semantic_table)
        lcv = layout_cost_volume(prob, conf)
        layout = lift(ref.layout, lcv.depths, ref.pose, view_id=ref.view_id, peak_probability=lcv.peak_probability, probabilities=lcv.probabilities)
        seconds = time.perf_counter() - start
        log.info("view %d reconstructed in %.2fs", ref.view_id, seconds)
        return ViewResult(layout, lcv, seconds)

    def predict_results(self, indices: Sequence[int] | None = None) -> list[ViewResult]:
        indices = range(len(self.views_)) if indices is None else list(indices)
        if int(self.threads) <= 1:
            return [self.reconstruct(i) for i in indices]
        with ThreadPoolExecutor(max_workers=int(self.threads)) as pool:
            # map keeps input order, so outputs do not depend on scheduling
            return list(pool.map(self.reconstruct, indices))

    def predict(self, indices: Sequence[int] | None = None) -> list[Layout3D]:
        """3D layouts for the views at ``indices`` (all fitted views by default)."""
        return [r.layout for r in self.predict_results(indices)]

    def fit_predict(self, views: Sequence[ViewInput], y=None) -> list[Layout3D]:
        return self.fit(views).predict()
