"""Multi-view panoramic layout reconstruction with per-element plane sweeps."""

from .confidence import ConfidenceMap, SemanticTable, build_confidence, combine, semantic_confidence
from .estimator import LayoutDepthEstimator
from .exceptions import ConfidenceDegenerateError, DomainError, LayoutTopologyError
from .fusion import Layout3D, LayoutFuser, SceneLayout, camera_height, fuse, lift
from .geometry import Plane, Pose, SphericalCamera, compose, invert, pixel_to_ray, ray_to_pixel, warp_layout
from .layout2d import Corner, Edge, Layout2D, LayoutElement, element_orientation, extract_regions, layout_loss_2d
from .metrics import EvalReport, coherency, depth_rmse, scale_error
from .mvs import DepthHypotheses, ViewInput, aggregate_element, luminance, matching_cost, regress_depth

__all__ = [
    "ConfidenceDegenerateError",
    "ConfidenceMap",
    "Corner",
    "DepthHypotheses",
    "DomainError",
    "Edge",
    "EvalReport",
    "Layout2D",
    "Layout3D",
    "LayoutDepthEstimator",
    "LayoutElement",
    "LayoutFuser",
    "LayoutTopologyError",
    "Plane",
    "Pose",
    "SceneLayout",
    "SemanticTable",
    "SphericalCamera",
    "ViewInput",
    "aggregate_element",
    "build_confidence",
    "camera_height",
    "coherency",
    "combine",
    "compose",
    "depth_rmse",
    "element_orientation",
    "extract_regions",
    "fuse",
    "invert",
    "layout_loss_2d",
    "lift",
    "luminance",
    "matching_cost",
    "pixel_to_ray",
    "ray_to_pixel",
    "regress_depth",
    "scale_error",
    "semantic_confidence",
    "warp_layout",
]
