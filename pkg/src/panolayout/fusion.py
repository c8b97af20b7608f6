"""Per-view 3D layouts and their fusion into one scene layout.

World planes are stored as ``normal . X + offset = 0`` with ``normal``
facing the camera(s) that observed the element.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import shapely
from sklearn.base import BaseEstimator

from .exceptions import DomainError
from .geometry import Pose, SphericalCamera, pixel_to_ray
from .layout2d import Layout2D, _plane_frame

log = logging.getLogger(__name__)

FUSION_THRESHOLD = 0.1
MAX_NORMAL_ANGLE_DEG = 5.0
VISIBILITY_MARGIN = 0.05


@dataclass(eq=False)
class WorldElement:
    """A planar layout element in world coordinates."""

    normal: np.ndarray
    offset: float
    polygon: np.ndarray
    kind: str
    weight: float = 1.0
    members: tuple[tuple[int, int], ...] = ()

    @property
    def views(self) -> tuple[int, ...]:
        return tuple(sorted({view for view, _ in self.members}))

    @property
    def centroid(self) -> np.ndarray:
        frame = _plane_frame(self.normal)
        poly = _polygon_2d(self.polygon, frame)
        c = np.asarray(poly.centroid.coords[0])
        return c @ frame - self.offset * self.normal

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal + self.offset

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "normal": [float(x) for x in self.normal],
            "offset": float(self.offset),
            "weight": float(self.weight),
            "members": [list(m) for m in self.members],
            "views": list(self.views),
            "polygon": [[float(x) for x in p] for p in self.polygon],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldElement":
        return cls(
            np.asarray(data["normal"], dtype=np.float64),
            float(data["offset"]),
            np.asarray(data["polygon"], dtype=np.float64).reshape(-1, 3),
            data["kind"],
            float(data.get("weight", 1.0)),
            tuple(tuple(int(x) for x in m) for m in data.get("members", [])),
        )


@dataclass(eq=False)
class Layout3D:
    """One view's layout with an absolute depth per element."""

    view_id: int
    pose: Pose
    cam: SphericalCamera
    elements: list[WorldElement]
    orientations: np.ndarray
    depths: np.ndarray
    peak_probability: np.ndarray
    labels: np.ndarray | None = field(default=None, repr=False)
    probabilities: np.ndarray | None = field(default=None, repr=False)

    @property
    def kinds(self) -> list[str]:
        return [e.kind for e in self.elements]

    def depth_raster(self) -> np.ndarray:
        """Each element's plane depth painted over its region."""
        if self.labels is None:
            raise DomainError("layout has no label raster")
        return self.depths[self.labels]

    def lift_pixels(self, pixels) -> np.ndarray:
        """World points where pixel rays meet their element's plane (NaN if missed)."""
        if self.labels is None:
            raise DomainError("layout has no label raster")
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rays = pixel_to_ray(self.cam, pixels)
        cols = np.minimum(pixels[:, 0].astype(np.int64), self.cam.width - 1)
        rows = np.minimum(pixels[:, 1].astype(np.int64), self.cam.height - 1)
        index = self.labels[rows, cols]
        normal = self.orientations[index]
        facing = -np.sum(rays * normal, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(facing > 1e-12, self.depths[index] / facing, np.nan)
        return self.pose.to_world(rays * t[:, None])

    def snapped_to(self, scene: "SceneLayout") -> "Layout3D":
        """Copy whose element planes are replaced by the fused planes containing them."""
        owner = {}
        for fused in scene.elements:
            for member in fused.members:
                owner[member] = fused
        orientations = self.orientations.copy()
        depths = self.depths.copy()
        elements = list(self.elements)
        for index in range(len(elements)):
            fused = owner.get((self.view_id, index))
            if fused is None:
                continue
            normal = self.pose.rotation.T @ fused.normal
            normal /= np.linalg.norm(normal)
            orientations[index] = normal
            depths[index] = fused.offset + fused.normal @ self.pose.center
            elements[index] = fused
        return Layout3D(
            self.view_id, self.pose, self.cam, elements, orientations, depths,
            self.peak_probability, self.labels, self.probabilities,
        )

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "pose": self.pose.to_dict(),
            "width": self.cam.width,
            "height": self.cam.height,
            "camera_height": _floor_depth(self.kinds, self.depths, strict=False),
            "elements": [
                {
                    "id": index,
                    "kind": element.kind,
                    "orientation": [float(x) for x in self.orientations[index]],
                    "depth": float(self.depths[index]),
                    "peak_probability": float(self.peak_probability[index]),
                    "pixel_count": int((self.labels == index).sum()) if self.labels is not None else None,
                    "world_normal": [float(x) for x in element.normal],
                    "world_offset": float(element.offset),
                    "polygon": [[float(x) for x in p] for p in element.polygon],
                }
                for index, element in enumerate(self.elements)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, labels: np.ndarray | None = None) -> "Layout3D":
        view_id = int(data["view_id"])
        pose = Pose.from_dict(data["pose"])
        cam = SphericalCamera(int(data["width"]), int(data["height"]))
        elements = []
        for item in data["elements"]:
            elements.append(
                WorldElement(
                    np.asarray(item["world_normal"], dtype=np.float64),
                    float(item["world_offset"]),
                    np.asarray(item["polygon"], dtype=np.float64).reshape(-1, 3),
                    item["kind"],
                    float(item["peak_probability"]),
                    ((view_id, int(item["id"])),),
                )
            )
        return cls(
            view_id,
            pose,
            cam,
            elements,
            np.array([item["orientation"] for item in data["elements"]], dtype=np.float64),
            np.array([item["depth"] for item in data["elements"]], dtype=np.float64),
            np.array([item["peak_probability"] for item in data["elements"]], dtype=np.float64),
            labels,
        )


def _floor_depth(kinds: Sequence[str], depths: np.ndarray, strict: bool = True):
    floors = [i for i, kind in enumerate(kinds) if kind == "floor"]
    if len(floors) != 1:
        if strict:
            raise DomainError(f"camera height needs exactly one floor element, found {len(floors)}")
        return None
    return float(depths[floors[0]])


def lift(
    layout: Layout2D,
    depths,
    pose: Pose,
    cam: SphericalCamera | None = None,
    view_id: int = 0,
    peak_probability=None,
    probabilities=None,
) -> Layout3D:
    """Place each element's plane at its depth and express it in world coordinates.

    Element polygons are the element's corner rays intersected with its plane.
    """
    cam = cam or layout.cam
    depths = np.asarray(depths, dtype=np.float64)
    if depths.shape != (len(layout.elements),) or np.any(~(depths > 0)):
        raise DomainError("need one positive depth per layout element")
    peaks = np.ones(len(depths)) if peak_probability is None else np.asarray(peak_probability, dtype=np.float64)
    orientations = np.array([e.orientation for e in layout.elements])
    elements = []
    for index, (element, depth) in enumerate(zip(layout.elements, depths)):
        normal = element.orientation
        points = _corner_points_on_plane(layout, element.corner_loop, normal, depth)
        world_normal = pose.rotation @ normal
        offset = depth - world_normal @ pose.center
        elements.append(
            WorldElement(world_normal, float(offset), pose.to_world(points), element.kind, float(peaks[index]), ((view_id, index),))
        )
    return Layout3D(view_id, pose, cam, elements, orientations, depths, peaks, layout.labels(), probabilities)


def _corner_points_on_plane(layout: Layout2D, loop, normal: np.ndarray, depth: float) -> np.ndarray:
    if len(loop) < 3:
        raise DomainError("element has no corner polygon to lift")
    pix = np.array([layout.corners[i].pixel for i in loop])
    rays = pixel_to_ray(layout.cam, pix)
    facing = -(rays @ normal)
    points = np.empty_like(rays)
    hit = facing > 1e-9
    points[hit] = rays[hit] * (depth / facing[hit])[:, None]
    if not hit.all():
        # grazing corners: project their relative-depth lift onto the plane
        rel = layout.corner_points(loop)
        scale = depth / max(-(rel.mean(axis=0) @ normal), 1e-12)
        rel = rel[~hit] * scale
        points[~hit] = rel - ((rel @ normal) + depth)[:, None] * normal
    return points


def camera_height(layout3d: Layout3D) -> float:
    """Distance from the camera centre down to its floor plane."""
    return _floor_depth(layout3d.kinds, layout3d.depths)


@dataclass(eq=False)
class SceneLayout:
    """Fused world-frame layout of a whole scene."""

    elements: list[WorldElement]
    cameras: dict[int, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "cameras": {str(k): [float(x) for x in v] for k, v in sorted(self.cameras.items())},
            "elements": [e.to_dict() for e in self.elements],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneLayout":
        return cls(
            [WorldElement.from_dict(e) for e in data["elements"]],
            {int(k): np.asarray(v, dtype=np.float64) for k, v in data["cameras"].items()},
        )

    def count(self, kind: str) -> int:
        return sum(e.kind == kind for e in self.elements)


# --------------------------------------------------------------------------
# merge tests


def _polygon_2d(points: np.ndarray, frame: np.ndarray) -> shapely.Polygon:
    poly = shapely.Polygon(np.asarray(points) @ frame.T)
    if not poly.is_valid:
        poly = poly.buffer(0)
    return poly


def _key(element: WorldElement):
    return element.members


def plane_gap(a: WorldElement, b: WorldElement) -> float:
    """Largest plane-to-plane distance over the overlap of the two polygons.

    Both polygons are projected along the mean normal; the distance is
    measured along that normal at the overlap's vertices and centroid.
    Returns ``inf`` when the projections do not overlap.
    """
    if _key(b) < _key(a):
        a, b = b, a
    mean = a.normal + b.normal
    length = np.linalg.norm(mean)
    if length < 1e-9:
        return np.inf
    mean /= length
    frame = _plane_frame(mean)
    overlap = _polygon_2d(a.polygon, frame).intersection(_polygon_2d(b.polygon, frame))
    if overlap.is_empty or overlap.area <= 1e-9:
        return np.inf
    parts = getattr(overlap, "geoms", [overlap])
    coords = [np.asarray(overlap.centroid.coords[0])]
    for part in parts:
        if hasattr(part, "exterior"):
            coords.extend(np.asarray(part.exterior.coords))
    q = np.array(coords) @ frame
    s_a = -(q @ a.normal + a.offset) / (mean @ a.normal)
    s_b = -(q @ b.normal + b.offset) / (mean @ b.normal)
    return float(np.max(np.abs(s_a - s_b)))


def _visible(point: np.ndarray, camera: np.ndarray, occluders: Sequence[WorldElement]) -> bool:
    ray = point - camera
    length = np.linalg.norm(ray)
    if length < 1e-9:
        return True
    limit = 1.0 - VISIBILITY_MARGIN / length
    for element in occluders:
        denom = element.normal @ ray
        if abs(denom) < 1e-12:
            continue
        s = -(element.normal @ camera + element.offset) / denom
        if not (1e-9 < s < limit):
            continue
        hit = camera + s * ray
        frame = _plane_frame(element.normal)
        uv = hit @ frame.T
        if shapely.contains_xy(_polygon_2d(element.polygon, frame), uv[0], uv[1]):
            return False
    return True


class _Context:
    """Camera centres and per-view occluder lists for visibility tests."""

    def __init__(self, elements: Sequence[WorldElement], cameras: dict[int, np.ndarray]):
        self.cameras = cameras
        self.by_view: dict[int, list[int]] = {}
        for index, element in enumerate(elements):
            for view in element.views:
                self.by_view.setdefault(view, []).append(index)
        self.elements = elements

    def seen_from_any(self, point: np.ndarray, viewer: int, target: int) -> bool:
        owner = self.elements[viewer]
        known = [view for view in owner.views if view in self.cameras]
        if not known:
            # no camera to test from: visibility cannot rule the merge out
            return True
        for view in known:
            occluders = [self.elements[i] for i in self.by_view.get(view, []) if i not in (viewer, target)]
            if _visible(point, self.cameras[view], occluders):
                return True
        return False


def should_merge(
    a: WorldElement,
    b: WorldElement,
    context: _Context | None = None,
    index_a: int = -1,
    index_b: int = -1,
    threshold: float = FUSION_THRESHOLD,
    max_angle_deg: float = MAX_NORMAL_ANGLE_DEG,
) -> bool:
    """Merge test: same kind, near-parallel, close over their overlap, mutually visible."""
    if (_key(b), index_b) < (_key(a), index_a):
        a, b, index_a, index_b = b, a, index_b, index_a
    if a.kind != b.kind:
        return False
    cos = np.clip(a.normal @ b.normal, -1.0, 1.0)
    if np.degrees(np.arccos(cos)) > max_angle_deg:
        return False
    if not plane_gap(a, b) < threshold:
        return False
    if context is None:
        return True
    return context.seen_from_any(a.centroid, index_b, index_a) and context.seen_from_any(b.centroid, index_a, index_b)


def _merge_cluster(members: list[WorldElement]) -> WorldElement:
    if len(members) == 1:
        return members[0]
    weights = np.array([m.weight for m in members], dtype=np.float64)
    if not weights.sum() > 0:
        weights = np.ones(len(members))
    normal = np.sum([w * m.normal for w, m in zip(weights, members)], axis=0)
    normal /= np.linalg.norm(normal)
    offset = float(np.sum([w * m.offset for w, m in zip(weights, members)]) / weights.sum())
    frame = _plane_frame(normal)
    union = shapely.unary_union([_polygon_2d(m.polygon, frame) for m in members])
    if union.geom_type != "Polygon":
        union = union.convex_hull
    outline = np.asarray(union.exterior.coords)[:-1]
    polygon = outline @ frame - offset * normal
    merged = tuple(sorted(x for m in members for x in m.members))
    return WorldElement(normal, offset, polygon, members[0].kind, float(weights.sum()), merged)


def fuse(
    views,
    threshold: float = FUSION_THRESHOLD,
    max_angle_deg: float = MAX_NORMAL_ANGLE_DEG,
) -> SceneLayout:
    """Greedily merge per-view layout elements into a scene layout.

    ``views`` is a sequence of :class:`Layout3D` or an existing
    :class:`SceneLayout` (whose elements are then treated as the inputs).
    Merging is transitive (single linkage) and runs in a fixed order, so the
    result does not depend on how the pairwise tests are scheduled.
    """
    if isinstance(views, SceneLayout):
        elements = list(views.elements)
        cameras = dict(views.cameras)
    else:
        views = list(views)
        if not views:
            raise DomainError("fusion needs at least one view")
        elements = [e for v in sorted(views, key=lambda v: v.view_id) for e in v.elements]
        cameras = {v.view_id: np.asarray(v.pose.center) for v in views}
    if not elements:
        raise DomainError("fusion needs at least one element")
    order = sorted(range(len(elements)), key=lambda i: elements[i].members)
    elements = [elements[i] for i in order]
    context = _Context(elements, cameras)

    parent = list(range(len(elements)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(elements)):
        for j in range(i + 1, len(elements)):
            if find(i) == find(j):
                continue
            if should_merge(elements[i], elements[j], context, i, j, threshold, max_angle_deg):
                parent[max(find(i), find(j))] = min(find(i), find(j))
    clusters: dict[int, list[WorldElement]] = {}
    for i in range(len(elements)):
        clusters.setdefault(find(i), []).append(elements[i])
    fused = [_merge_cluster(clusters[root]) for root in sorted(clusters)]
    log.info("fused %d elements into %d", len(elements), len(fused))
    return SceneLayout(fused, cameras)


class LayoutFuser(BaseEstimator):
    """Estimator wrapper around :func:`fuse`.

    Parameters:
        threshold: plane distance (meters) under which elements merge.
        max_angle_deg: largest normal angle between merged elements.
    """

    def __init__(self, threshold: float = FUSION_THRESHOLD, max_angle_deg: float = MAX_NORMAL_ANGLE_DEG):
        self.threshold = threshold
        self.max_angle_deg = max_angle_deg

    def fit(self, layouts, y=None):
        if not self.threshold > 0:
            raise DomainError("fusion threshold must be positive")
        self.scene_ = fuse(layouts, self.threshold, self.max_angle_deg)
        self.n_elements_ = len(self.scene_.elements)
        return self

    def fit_transform(self, layouts, y=None) -> SceneLayout:
        return self.fit(layouts).scene_


# --------------------------------------------------------------------------
# export


def triangulate(element: WorldElement) -> tuple[np.ndarray, np.ndarray]:
    """Vertices ``(M, 3)`` and triangles ``(T, 3)`` covering the element polygon."""
    frame = _plane_frame(element.normal)
    poly = _polygon_2d(element.polygon, frame)
    if poly.is_empty or poly.area <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    triangles = shapely.constrained_delaunay_triangles(poly)
    vertices: list[tuple[float, float]] = []
    lookup: dict[tuple[float, float], int] = {}
    faces = []
    for tri in triangles.geoms:
        face = []
        for xy in list(tri.exterior.coords)[:3]:
            key = (round(xy[0], 12), round(xy[1], 12))
            if key not in lookup:
                lookup[key] = len(vertices)
                vertices.append(xy)
            face.append(lookup[key])
        faces.append(face)
    verts = np.array(vertices) @ frame - element.offset * element.normal
    return verts, np.array(faces, dtype=np.int64)


def write_ply(scene: SceneLayout, path) -> None:
    """ASCII PLY mesh of the triangulated scene elements."""
    all_vertices = []
    all_faces = []
    base = 0
    for element in scene.elements:
        verts, faces = triangulate(element)
        all_vertices.append(verts)
        all_faces.append(faces + base)
        base += len(verts)
    vertices = np.concatenate(all_vertices) if all_vertices else np.zeros((0, 3))
    faces = np.concatenate(all_faces) if all_faces else np.zeros((0, 3), dtype=np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in faces]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
