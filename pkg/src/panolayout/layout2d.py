"""Per-view 2D layouts: corners, edges and planar elements covering the panorama."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import shapely

from .exceptions import DomainError, LayoutTopologyError
from .geometry import SphericalCamera, _ray_to_pixel_unchecked, pixel_to_ray
from .io import write_png

KINDS = ("floor", "ceiling", "wall")
UP = np.array([0.0, 1.0, 0.0])
SNAP_ANGLE_DEG = 15.0
_VOTES_PER_REGION = 48


@dataclass(frozen=True)
class Corner:
    """Layout corner: panorama pixel plus depth along its ray, up to global scale."""

    u: float
    v: float
    relative_depth: float

    def __post_init__(self):
        if not self.relative_depth > 0:
            raise DomainError("corner relative depth must be positive")

    @property
    def pixel(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class Edge:
    start: int
    end: int

    def __post_init__(self):
        if self.start == self.end:
            raise DomainError("edge endpoints must be distinct corners")


@dataclass(eq=False)
class LayoutElement:
    """A planar layout region with its unit orientation in the camera frame."""

    region: np.ndarray
    orientation: np.ndarray
    kind: str
    corner_loop: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown element kind {self.kind!r}")
        self.region = np.asarray(self.region, dtype=bool)
        if not self.region.any():
            raise DomainError("element region is empty")
        self.orientation = np.asarray(self.orientation, dtype=np.float64)


@dataclass(eq=False)
class Layout2D:
    """Piecewise-planar model of one panorama."""

    cam: SphericalCamera
    corners: list[Corner]
    edges: list[Edge]
    elements: list[LayoutElement] = field(default_factory=list)

    def labels(self) -> np.ndarray:
        """``(H, W)`` raster of element indices (-1 where uncovered)."""
        out = np.full(self.cam.shape, -1, dtype=np.int64)
        for index, element in enumerate(self.elements):
            out[element.region] = index
        return out

    def corner_points(self, loop: Sequence[int]) -> np.ndarray:
        """Corners of ``loop`` lifted to 3D at their relative depths."""
        pix = np.array([self.corners[i].pixel for i in loop])
        depth = np.array([self.corners[i].relative_depth for i in loop])
        return pixel_to_ray(self.cam, pix) * depth[:, None]

    def to_dict(self) -> dict:
        return {
            "width": self.cam.width,
            "height": self.cam.height,
            "corners": [{"u": c.u, "v": c.v, "relative_depth": c.relative_depth} for c in self.corners],
            "edges": [[e.start, e.end] for e in self.edges],
            "elements": [
                {"kind": e.kind, "corners": list(e.corner_loop), "orientation": [float(x) for x in e.orientation]}
                for e in self.elements
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data: dict) -> "Layout2D":
        cam = SphericalCamera(int(data["width"]), int(data["height"]))
        corners = [Corner(float(c["u"]), float(c["v"]), float(c["relative_depth"])) for c in data["corners"]]
        edges = [Edge(int(a), int(b)) for a, b in data["edges"]]
        specs = [(e["kind"], tuple(int(i) for i in e["corners"])) for e in data["elements"]]
        return build_layout(corners, edges, specs, cam)

    @classmethod
    def from_json(cls, text: str) -> "Layout2D":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# boundary rasterization and region extraction


def _slerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    omega = np.arccos(np.clip(a @ b, -1.0, 1.0))
    if omega < 1e-12:
        return np.repeat(a[None], len(t), axis=0)
    s = np.sin(omega)
    return (np.sin((1 - t) * omega)[:, None] * a + np.sin(t * omega)[:, None] * b) / s


def _arc_pixels(cam: SphericalCamera, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """4-connected pixel chain along the great-circle arc from ray ``a`` to ``b``."""
    if a @ b < -1 + 1e-9:
        raise LayoutTopologyError("edge joins antipodal corners; its arc is undefined")
    t = np.linspace(0.0, 1.0, 64)
    for _ in range(40):
        pix = _ray_to_pixel_unchecked(cam.width, cam.height, _slerp(a, b, t))
        cols = np.minimum(np.floor(pix[:, 0]).astype(np.int64), cam.width - 1)
        rows = np.clip(np.floor(pix[:, 1]).astype(np.int64), 0, cam.height - 1)
        dcol = np.abs((np.diff(cols) + cam.width // 2) % cam.width - cam.width // 2)
        gaps = (dcol > 1) | (np.abs(np.diff(rows)) > 1)
        if not gaps.any():
            break
        mids = 0.5 * (t[:-1][gaps] + t[1:][gaps])
        t = np.sort(np.concatenate([t, mids]))
    out = [(rows[0], cols[0])]
    for r, c in zip(rows[1:], cols[1:]):
        pr, pc = out[-1]
        if r != pr and c != pc:
            # fill the diagonal step so the chain blocks 4-connected leaks
            out.append((pr, c))
        out.append((r, c))
    return np.array(out, dtype=np.int64)


def rasterize_edges(corners: Sequence[Corner], edges: Sequence[Edge], cam: SphericalCamera) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels crossed by the layout edges."""
    mask = np.zeros(cam.shape, dtype=bool)
    if not edges:
        return mask
    rays = pixel_to_ray(cam, np.array([c.pixel for c in corners]))
    for edge in edges:
        if not (0 <= edge.start < len(corners) and 0 <= edge.end < len(corners)):
            raise DomainError(f"edge {edge} references a missing corner")
        chain = _arc_pixels(cam, rays[edge.start], rays[edge.end])
        mask[chain[:, 0], chain[:, 1]] = True
    return mask


def _flood_fill(free: np.ndarray) -> np.ndarray:
    """Label 4-connected components of ``free`` by breadth-first search.

    Columns wrap around in longitude. Labels follow the raster order of each
    component's first pixel.
    """
    height, width = free.shape
    labels = np.full(free.shape, -1, dtype=np.int64)
    next_label = 0
    while True:
        remaining = np.flatnonzero(free.ravel() & (labels.ravel() < 0))
        if remaining.size == 0:
            return labels
        seed = remaining[0]
        labels.flat[seed] = next_label
        frontier = np.array([seed], dtype=np.int64)
        while frontier.size:
            rows, cols = np.divmod(frontier, width)
            cand_r = np.concatenate([rows - 1, rows + 1, rows, rows])
            cand_c = np.concatenate([cols, cols, (cols - 1) % width, (cols + 1) % width])
            keep = (cand_r >= 0) & (cand_r < height)
            flat = np.unique(cand_r[keep] * width + cand_c[keep])
            flat = flat[free.flat[flat] & (labels.flat[flat] < 0)]
            labels.flat[flat] = next_label
            frontier = flat
        next_label += 1


def _assign_boundary(labels: np.ndarray, boundary: np.ndarray) -> None:
    """Give each boundary pixel the region of its upper, else left, non-boundary neighbour.

    Pixels whose four neighbours are all boundary pixels are resolved
    afterwards from already-assigned neighbours, in the same order.
    """
    height, width = labels.shape
    order = ((-1, 0), (0, -1), (1, 0), (0, 1))
    pending = list(zip(*np.nonzero(boundary & (labels < 0))))
    settled = labels >= 0
    while pending:
        unresolved = []
        updates = []
        for r, c in pending:
            for dr, dc in order:
                rr, cc = r + dr, (c + dc) % width
                if 0 <= rr < height and settled[rr, cc]:
                    updates.append((r, c, labels[rr, cc]))
                    break
            else:
                unresolved.append((r, c))
        if not updates:
            raise LayoutTopologyError("boundary pixels are not adjacent to any region")
        for r, c, label in updates:
            labels[r, c] = label
            settled[r, c] = True
        pending = unresolved


def extract_regions(corners: Sequence[Corner], edges: Sequence[Edge], cam: SphericalCamera) -> list[np.ndarray]:
    """Partition the panorama into the regions enclosed by the layout edges.

    Returns one boolean mask per region; masks are disjoint and cover the
    image. Boundary pixels join their upper (else left) neighbour's region.
    """
    boundary = rasterize_edges(corners, edges, cam)
    if boundary.all():
        raise LayoutTopologyError("edges cover the entire panorama")
    labels = _flood_fill(~boundary)
    _assign_boundary(labels, boundary)
    return [labels == k for k in range(labels.max() + 1)]


# --------------------------------------------------------------------------
# orientation


def snap_orientation(normal, threshold_deg: float = SNAP_ANGLE_DEG) -> np.ndarray:
    """Snap a normal to exactly vertical or exactly horizontal."""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    if abs(normal[1]) >= np.cos(np.radians(threshold_deg)):
        return np.array([0.0, np.sign(normal[1]), 0.0])
    flat = np.array([normal[0], 0.0, normal[2]])
    length = np.hypot(flat[0], flat[2])
    if length < 1e-12:
        raise DomainError("normal has no horizontal component to snap to")
    return flat / length


def fit_orientation(points: np.ndarray) -> np.ndarray:
    """Snapped least-squares plane normal through ``points``, facing the origin."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 3:
        raise DomainError("need at least three corners to fit an orientation")
    center = points.mean(axis=0)
    _, sing, vt = np.linalg.svd(points - center)
    if sing[1] <= 1e-9 * max(sing[0], 1e-300):
        raise DomainError("corner polygon is collinear")
    normal = snap_orientation(vt[2])
    if normal @ center > 0:
        normal = -normal
    return normal


def element_orientation(corner_polygon: Sequence[tuple], cam: SphericalCamera) -> np.ndarray:
    """Orientation of the polygon formed by corners lifted to their relative depths.

    Args:
        corner_polygon: sequence of ``(pixel, relative_depth)`` pairs.
        cam: the panorama camera.

    Returns:
        Unit normal snapped to vertical/horizontal and facing the camera.
    """
    pix = np.array([np.asarray(p, dtype=np.float64) for p, _ in corner_polygon])
    depth = np.array([float(d) for _, d in corner_polygon])
    if np.any(~(depth > 0)):
        raise DomainError("relative depths must be positive")
    return fit_orientation(pixel_to_ray(cam, pix) * depth[:, None])


# --------------------------------------------------------------------------
# element assembly


def _plane_frame(normal: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(normal, helper)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(normal, e1)])


def _vote_regions(layout: Layout2D, regions: list[np.ndarray], polygons: list[np.ndarray]) -> list[int]:
    """Element index owning each region, by casting sample rays at the lifted polygons."""
    planes = []
    for points in polygons:
        normal = fit_orientation(points)
        offset = -(normal @ points.mean(axis=0))
        frame = _plane_frame(normal)
        poly = shapely.Polygon(points @ frame.T)
        if not poly.is_valid:
            poly = poly.buffer(0)
        planes.append((normal, offset, frame, poly.buffer(1e-6 * max(np.sqrt(poly.area), 1e-12))))
    centers = layout.cam.pixel_centers()
    owners = []
    for region in regions:
        pix = centers[region]
        pick = np.linspace(0, len(pix) - 1, min(_VOTES_PER_REGION, len(pix))).round().astype(int)
        rays = pixel_to_ray(layout.cam, pix[pick])
        best_t = np.full(len(rays), np.inf)
        best = np.full(len(rays), -1)
        for index, (normal, offset, frame, poly) in enumerate(planes):
            facing = -(rays @ normal)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(facing) > 1e-12, offset / facing, np.inf)
            hit = rays * t[:, None]
            uv = hit @ frame.T
            inside = (t > 0) & np.isfinite(t) & shapely.contains_xy(poly, uv[:, 0], uv[:, 1])
            closer = inside & (t < best_t)
            best_t[closer] = t[closer]
            best[closer] = index
        counts = np.bincount(best[best >= 0], minlength=len(planes))
        owners.append(int(np.argmax(counts)) if counts.sum() else -1)
    return owners


def build_layout(
    corners: Sequence[Corner],
    edges: Sequence[Edge],
    element_specs: Sequence[tuple[str, Sequence[int]]],
    cam: SphericalCamera,
) -> Layout2D:
    """Assemble a :class:`Layout2D` from corners, edges and per-element corner loops.

    Regions come from :func:`extract_regions`; each region is matched to the
    element whose lifted corner polygon its pixel rays hit first.
    """
    layout = Layout2D(cam, list(corners), list(edges))
    if not element_specs:
        raise DomainError("layout has no elements")
    polygons = [layout.corner_points(loop) for _, loop in element_specs]
    orientations = [fit_orientation(points) for points in polygons]
    regions = extract_regions(corners, edges, cam)
    if len(element_specs) > 1 and any(r.sum() > 0.9 * r.size for r in regions):
        raise LayoutTopologyError("one region floods more than 90% of the panorama; boundary is open")
    owners = _vote_regions(layout, regions, polygons) if len(element_specs) > 1 else [0] * len(regions)
    masks = [np.zeros(cam.shape, dtype=bool) for _ in element_specs]
    orphans = []
    for region, owner in zip(regions, owners):
        if owner < 0:
            orphans.append(region)
        else:
            masks[owner] |= region
    for index, mask in enumerate(masks):
        if not mask.any():
            raise LayoutTopologyError(f"element {index} ({element_specs[index][0]}) received no region")
    if orphans:
        # slivers no sample ray resolved: give them to the largest touching element
        labels = np.full(cam.shape, -1)
        for index, mask in enumerate(masks):
            labels[mask] = index
        for region in orphans:
            grown = region | np.roll(region, 1, 1) | np.roll(region, -1, 1)
            grown[1:] |= region[:-1]
            grown[:-1] |= region[1:]
            touching = labels[grown & ~region]
            touching = touching[touching >= 0]
            target = int(np.bincount(touching).argmax()) if touching.size else 0
            masks[target] |= region
            labels[region] = target
    for (kind, loop), orientation, mask in zip(element_specs, orientations, masks):
        layout.elements.append(LayoutElement(mask, orientation, kind, tuple(loop)))
    _check_kinds(layout)
    return layout


def _check_kinds(layout: Layout2D) -> None:
    for element in layout.elements:
        vertical = abs(element.orientation @ UP) > 1 - 1e-6
        if element.kind in ("floor", "ceiling") and not vertical:
            raise DomainError(f"{element.kind} element is not horizontal")
        if element.kind == "wall" and abs(element.orientation @ UP) >= 1e-6:
            raise DomainError("wall element is not vertical")


def save_region_png(layout: Layout2D, path) -> None:
    """Write element labels as an 8-bit PNG (value = element index)."""
    labels = layout.labels()
    if labels.max() > 254:
        raise DomainError("too many elements for an 8-bit label image")
    write_png(path, np.where(labels < 0, 255, labels).astype(np.uint8))


# --------------------------------------------------------------------------
# layout loss


def layout_loss_2d(pred_corners, pred_edges, gt_corners, gt_edges) -> float:
    """Per-pixel binary cross-entropy on corner maps plus L1 on edge maps, summed."""
    pred_corners = np.asarray(pred_corners, dtype=np.float64)
    gt_corners = np.asarray(gt_corners, dtype=np.float64)
    pred_edges = np.asarray(pred_edges, dtype=np.float64)
    gt_edges = np.asarray(gt_edges, dtype=np.float64)
    if not (pred_corners.shape == gt_corners.shape == pred_edges.shape == gt_edges.shape):
        raise DomainError("layout loss maps must share one shape")
    if np.any((pred_corners <= 0) | (pred_corners >= 1)):
        raise DomainError("predicted corner probabilities must lie strictly inside (0, 1)")
    ce = -(gt_corners * np.log(pred_corners) + (1.0 - gt_corners) * np.log1p(-pred_corners))
    return float(ce.sum() + np.abs(pred_edges - gt_edges).sum())
