"""Synthetic rooms rendered to equirectangular panoramas with layout ground truth.

World frame: y is up, the floor is ``y = 0`` and the ceiling ``y = height``.
Floor polygons are rectilinear and given as ``(x, z)`` vertices.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import shapely

from .confidence import LABELS
from .exceptions import DomainError
from .geometry import Pose, SphericalCamera, pixel_to_ray, ray_to_pixel
from .layout2d import Corner, Edge, Layout2D, build_layout

SUPERSAMPLE = 2
_WALL_MARGIN = 0.05


@dataclass(frozen=True)
class Texture:
    """Procedural surface texture.

    ``kind`` is ``"noise"`` (multi-octave value noise with feature size
    ``scale`` meters), ``"checker"`` (squares of side ``scale``) or
    ``"constant"``.
    """

    kind: str = "noise"
    scale: float = 0.3
    octaves: int = 2
    color_a: tuple[float, float, float] = (0.15, 0.15, 0.18)
    color_b: tuple[float, float, float] = (0.9, 0.85, 0.8)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "checker", "constant"):
            raise DomainError(f"unknown texture kind {self.kind!r}")
        if not self.scale > 0:
            raise DomainError("texture scale must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "Texture":
        data = dict(data)
        for key in ("color_a", "color_b"):
            if key in data:
                data[key] = tuple(float(c) for c in data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scale": self.scale,
            "octaves": self.octaves,
            "color_a": list(self.color_a),
            "color_b": list(self.color_b),
            "seed": self.seed,
        }

    def shade(self, s: np.ndarray, t: np.ndarray, salt: int) -> np.ndarray:
        """RGB colours at surface coordinates ``(s, t)`` in meters."""
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        if self.kind == "constant":
            return np.broadcast_to(a, s.shape + (3,)).copy()
        if self.kind == "checker":
            parity = (np.floor(s / self.scale) + np.floor(t / self.scale)) % 2
            mix = parity
        else:
            mix = _value_noise(s / self.scale, t / self.scale, self.octaves, self.seed * 7919 + salt)
        return a + (b - a) * mix[..., None]


def _hash01(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    x = (i.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (
        j.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    )
    x ^= np.uint64(((seed & 0xFFFFFFFF) * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(s: np.ndarray, t: np.ndarray, octaves: int, seed: int) -> np.ndarray:
    total = np.zeros(np.shape(s))
    norm = 0.0
    amplitude = 1.0
    for octave in range(max(octaves, 1)):
        freq = 2.0**octave
        x = s * freq
        y = t * freq
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        fx = fx * fx * (3 - 2 * fx)
        fy = fy * fy * (3 - 2 * fy)
        i0 = x0.astype(np.int64)
        j0 = y0.astype(np.int64)
        oseed = seed + 1013 * octave
        v00 = _hash01(i0, j0, oseed)
        v10 = _hash01(i0 + 1, j0, oseed)
        v01 = _hash01(i0, j0 + 1, oseed)
        v11 = _hash01(i0 + 1, j0 + 1, oseed)
        value = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
        total += amplitude * value
        norm += amplitude
        amplitude *= 0.5
    return total / norm


@dataclass(frozen=True)
class Occluder:
    """Axis-aligned clutter box."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: Texture = Texture(seed=99)

    @classmethod
    def from_dict(cls, data: dict) -> "Occluder":
        texture = Texture.from_dict(data["texture"]) if "texture" in data else Texture(seed=99)
        return cls(tuple(map(float, data["min"])), tuple(map(float, data["max"])), texture)

    def to_dict(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi), "texture": self.texture.to_dict()}


@dataclass(frozen=True)
class RoomSpec:
    """A room: rectilinear floor polygon, ceiling height, textures and clutter."""

    floor: tuple[tuple[float, float], ...]
    height: float
    floor_texture: Texture = Texture(seed=1)
    ceiling_texture: Texture = Texture(seed=2)
    wall_textures: tuple[Texture, ...] = ()
    occluders: tuple[Occluder, ...] = ()

    def __post_init__(self):
        floor = tuple((float(x), float(z)) for x, z in self.floor)
        if len(floor) < 4:
            raise DomainError("floor polygon needs at least four vertices")
        poly = shapely.Polygon(floor)
        if not poly.is_valid or poly.area <= 0:
            raise DomainError("floor polygon must be simple")
        for (x0, z0), (x1, z1) in zip(floor, floor[1:] + floor[:1]):
            if x0 != x1 and z0 != z1:
                raise DomainError("floor polygon must be axis-aligned")
        if not self.height > 0:
            raise DomainError("ceiling height must be positive")
        if not poly.exterior.is_ccw:
            floor = floor[::-1]
        object.__setattr__(self, "floor", floor)
        grown = poly.buffer(1e-9)
        for box in self.occluders:
            footprint = shapely.box(box.lo[0], box.lo[2], box.hi[0], box.hi[2])
            if not (grown.contains(footprint) and 0 <= box.lo[1] < box.hi[1] <= self.height):
                raise DomainError("occluder box must lie inside the room")

    @classmethod
    def cuboid(cls, width: float, length: float, height: float, **kwargs) -> "RoomSpec":
        """Room ``[0, width] x [0, length]`` in ``(x, z)``."""
        return cls(((0.0, 0.0), (width, 0.0), (width, length), (0.0, length)), height, **kwargs)

    @property
    def polygon(self) -> shapely.Polygon:
        return shapely.Polygon(self.floor)

    def wall_texture(self, index: int) -> Texture:
        if self.wall_textures:
            return self.wall_textures[index % len(self.wall_textures)]
        return Texture(seed=10 + index)

    def walls(self) -> list[tuple[np.ndarray, np.ndarray]]:
        pts = [np.array(p) for p in self.floor]
        return list(zip(pts, pts[1:] + pts[:1]))

    @classmethod
    def from_dict(cls, data: dict) -> "RoomSpec":
        textures = data.get("textures", {})
        kwargs = {}
        if "floor" in textures:
            kwargs["floor_texture"] = Texture.from_dict(textures["floor"])
        if "ceiling" in textures:
            kwargs["ceiling_texture"] = Texture.from_dict(textures["ceiling"])
        if "walls" in textures:
            walls = textures["walls"]
            walls = walls if isinstance(walls, list) else [walls]
            kwargs["wall_textures"] = tuple(Texture.from_dict(w) for w in walls)
        kwargs["occluders"] = tuple(Occluder.from_dict(o) for o in data.get("occluders", []))
        return cls(tuple(tuple(p) for p in data["floor"]), float(data["height"]), **kwargs)

    def to_dict(self) -> dict:
        return {
            "floor": [list(p) for p in self.floor],
            "height": self.height,
            "textures": {
                "floor": self.floor_texture.to_dict(),
                "ceiling": self.ceiling_texture.to_dict(),
                "walls": [t.to_dict() for t in self.wall_textures] or [self.wall_texture(0).to_dict()],
            },
            "occluders": [o.to_dict() for o in self.occluders],
        }


def with_texture(spec: RoomSpec, texture: Texture) -> RoomSpec:
    """Copy of ``spec`` with every layout surface using ``texture``."""
    return RoomSpec(spec.floor, spec.height, texture, texture, (texture,), spec.occluders)


@dataclass(eq=False)
class RenderedView:
    """One rendered panorama with its ground truth."""

    image: np.ndarray
    depth_gt: np.ndarray
    semantic_gt: np.ndarray
    layout_gt: Layout2D
    pose: Pose
    element_depths: np.ndarray
    hit_element: np.ndarray = field(repr=False)
    hit_distance: np.ndarray = field(repr=False)
    room_index: int = 0

    @property
    def cam(self) -> SphericalCamera:
        return self.layout_gt.cam

    @property
    def camera_height(self) -> float:
        return float(self.pose.center[1])


# --------------------------------------------------------------------------
# ray casting


def _cast_layout(spec: RoomSpec, origin: np.ndarray, dirs: np.ndarray):
    """First layout surface hit along each ray: (distance, element id, s, t).

    Element ids: 0 floor, 1 ceiling, 2 + i wall i.
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    elem = np.full(n, -1, dtype=np.int64)
    dy = dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(dy < 0, -origin[1] / dy, np.inf)
        t_ceil = np.where(dy > 0, (spec.height - origin[1]) / dy, np.inf)
    for eid, t in ((0, t_floor), (1, t_ceil)):
        take = t < best
        best[take] = t[take]
        elem[take] = eid
    for index, (p0, p1) in enumerate(spec.walls()):
        seg = p1 - p0
        # solve origin_xz + t * dir_xz = p0 + s * seg
        dx, dz = dirs[:, 0], dirs[:, 2]
        denom = dx * (-seg[1]) - dz * (-seg[0])
        rx = p0[0] - origin[0]
        rz = p0[1] - origin[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rx * (-seg[1]) - rz * (-seg[0])) / denom
            s = (dx * rz - dz * rx) / denom
        y = origin[1] + t * dy
        hit = (np.abs(denom) > 1e-15) & (t > 0) & (s >= 0) & (s <= 1) & (y >= 0) & (y <= spec.height)
        take = hit & (t < best)
        best[take] = t[take]
        elem[take] = 2 + index
    return best, elem


def _cast_boxes(boxes: Sequence[Occluder], origin: np.ndarray, dirs: np.ndarray):
    n = len(dirs)
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for index, box in enumerate(boxes):
        lo = (np.asarray(box.lo) - origin) * inv
        hi = (np.asarray(box.hi) - origin) * inv
        t_near = np.nanmax(np.minimum(lo, hi), axis=1)
        t_far = np.nanmin(np.maximum(lo, hi), axis=1)
        hit = (t_near <= t_far) & (t_near > 0)
        take = hit & (t_near < best)
        best[take] = t_near[take]
        which[take] = index
    return best, which


def _surface_colors(spec: RoomSpec, points: np.ndarray, elem: np.ndarray) -> np.ndarray:
    colors = np.zeros(points.shape[:-1] + (3,))
    sel = elem == 0
    colors[sel] = spec.floor_texture.shade(points[sel, 0], points[sel, 2], salt=0)
    sel = elem == 1
    colors[sel] = spec.ceiling_texture.shade(points[sel, 0], points[sel, 2], salt=1)
    for index, (p0, p1) in enumerate(spec.walls()):
        sel = elem == 2 + index
        if not sel.any():
            continue
        axis = (p1 - p0) / np.linalg.norm(p1 - p0)
        along = (points[sel][:, [0, 2]] - p0) @ axis
        colors[sel] = spec.wall_texture(index).shade(along, points[sel, 1], salt=2 + index)
    return colors


def _box_colors(boxes: Sequence[Occluder], points: np.ndarray, which: np.ndarray) -> np.ndarray:
    colors = np.zeros(points.shape[:-1] + (3,))
    for index, box in enumerate(boxes):
        sel = which == index
        if not sel.any():
            continue
        p = points[sel]
        lo = np.asarray(box.lo)
        hi = np.asarray(box.hi)
        # pick the two coordinates spanning the face that was hit
        face = np.argmin(np.minimum(np.abs(p - lo), np.abs(p - hi)), axis=1)
        s = np.where(face == 0, p[:, 2], p[:, 0])
        t = np.where(face == 1, p[:, 2], p[:, 1])
        colors[sel] = box.texture.shade(s, t, salt=100 + index)
    return colors


def check_pose(spec: RoomSpec, pose: Pose) -> None:
    """Raise :class:`DomainError` unless ``pose`` sees the whole room from inside it."""
    x, y, z = pose.center
    poly = spec.polygon
    point = shapely.Point(x, z)
    if not (0 < y < spec.height) or not poly.contains(point) or poly.exterior.distance(point) < _WALL_MARGIN:
        raise DomainError("camera pose is outside the room")
    grown = poly.buffer(1e-7)
    for vertex in spec.floor:
        if not grown.contains(shapely.LineString([(x, z), vertex])):
            raise DomainError("camera does not see the whole room boundary")
    for box in spec.occluders:
        if all(box.lo[k] - 0.05 <= pose.center[k] <= box.hi[k] + 0.05 for k in range(3)):
            raise DomainError("camera is inside an occluder")
    if abs(pose.rotation[1, 1] - 1.0) > 1e-9:
        raise DomainError("camera up axis must align with the world up axis")


def _room_layout(spec: RoomSpec, pose: Pose, cam: SphericalCamera) -> tuple[Layout2D, np.ndarray]:
    n = len(spec.floor)
    ceiling = [np.array([x, spec.height, z]) for x, z in spec.floor]
    floor = [np.array([x, 0.0, z]) for x, z in spec.floor]
    world = np.array(ceiling + floor)
    local = pose.to_camera(world)
    pix = ray_to_pixel(cam, local)
    dist = np.linalg.norm(local, axis=1)
    corners = [Corner(float(u), float(v), float(d)) for (u, v), d in zip(pix, dist)]
    edges = [Edge(i, (i + 1) % n) for i in range(n)]
    edges += [Edge(n + i, n + (i + 1) % n) for i in range(n)]
    edges += [Edge(i, n + i) for i in range(n)]
    specs = [("floor", tuple(range(n, 2 * n))), ("ceiling", tuple(range(n)))]
    specs += [("wall", (i, (i + 1) % n, n + (i + 1) % n, n + i)) for i in range(n)]
    layout = build_layout(corners, edges, specs, cam)

    cx, cy, cz = pose.center
    depths = [cy, spec.height - cy]
    for p0, p1 in spec.walls():
        axis = (p1 - p0) / np.linalg.norm(p1 - p0)
        rel = np.array([cx, cz]) - p0
        depths.append(abs(rel[0] * axis[1] - rel[1] * axis[0]))
    return layout, np.array(depths)


def render(spec: RoomSpec, pose: Pose, cam: SphericalCamera, room_index: int = 0) -> RenderedView:
    """Ray-cast ``spec`` from ``pose`` into an equirectangular panorama."""
    check_pose(spec, pose)
    origin = pose.center
    layout, depths = _room_layout(spec, pose, cam)

    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    v, u = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    accum = np.zeros(cam.shape + (3,))
    for dv in offsets:
        for du in offsets:
            pix = np.stack([u + du, np.clip(v + dv, 0.0, cam.height - 1e-9)], axis=-1).reshape(-1, 2)
            dirs = pixel_to_ray(cam, pix) @ pose.rotation.T
            accum += _shade_rays(spec, origin, dirs).reshape(cam.shape + (3,))
    image = np.round(accum / SUPERSAMPLE**2 * 255.0) / 255.0

    dirs = (cam.rays().reshape(-1, 3) @ pose.rotation.T)
    t_layout, elem = _cast_layout(spec, origin, dirs)
    t_box, _ = _cast_boxes(spec.occluders, origin, dirs)
    semantic = np.select(
        [t_box < t_layout, elem == 0, elem == 1],
        [LABELS["clutter"], LABELS["floor"], LABELS["ceiling"]],
        LABELS["wall"],
    ).astype(np.uint8)

    depth_gt = depths[layout.labels()]
    return RenderedView(
        image=image,
        depth_gt=depth_gt,
        semantic_gt=semantic.reshape(cam.shape),
        layout_gt=layout,
        pose=pose,
        element_depths=depths,
        hit_element=elem.reshape(cam.shape),
        hit_distance=t_layout.reshape(cam.shape),
        room_index=room_index,
    )


def _shade_rays(spec: RoomSpec, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    t_layout, elem = _cast_layout(spec, origin, dirs)
    t_box, which = _cast_boxes(spec.occluders, origin, dirs)
    on_box = t_box < t_layout
    colors = _surface_colors(spec, origin + dirs * t_layout[:, None], np.where(on_box, -1, elem))
    if on_box.any():
        colors[on_box] = _box_colors(spec.occluders, origin + dirs[on_box] * t_box[on_box, None], which[on_box])
    return colors


# --------------------------------------------------------------------------
# scenes


def sample_pose(spec: RoomSpec, rng: np.random.Generator, heights=(1.2, 2.0), margin: float = 0.5) -> Pose:
    """Random upright pose inside ``spec`` that sees the whole room."""
    minx, minz, maxx, maxz = spec.polygon.bounds
    lo_h = min(heights[0], spec.height * 0.5)
    hi_h = max(min(heights[1], spec.height - 0.3), lo_h)
    for _ in range(1000):
        x = rng.uniform(minx + margin, maxx - margin)
        z = rng.uniform(minz + margin, maxz - margin)
        y = rng.uniform(lo_h, hi_h)
        pose = Pose.from_yaw(rng.uniform(0.0, 2 * np.pi), [x, y, z])
        if spec.polygon.exterior.distance(shapely.Point(x, z)) < margin:
            continue
        if any(
            box.lo[0] - margin < x < box.hi[0] + margin and box.lo[2] - margin < z < box.hi[2] + margin
            for box in spec.occluders
        ):
            continue
        try:
            check_pose(spec, pose)
        except DomainError:
            continue
        return pose
    raise DomainError("could not place a camera inside the room")


def make_scene(spec, n_views: int, seed: int, cam: SphericalCamera | None = None) -> list[RenderedView]:
    """Render ``n_views`` random views; deterministic for a given ``seed``.

    ``spec`` may be a single :class:`RoomSpec` or a sequence of rooms, in which
    case views are assigned to rooms round-robin.
    """
    if n_views < 1:
        raise DomainError("n_views must be at least 1")
    rooms = [spec] if isinstance(spec, RoomSpec) else list(spec)
    cam = cam or SphericalCamera(256, 128)
    rng = np.random.default_rng(seed)
    views = []
    for index in range(n_views):
        room = index % len(rooms)
        views.append(render(rooms[room], sample_pose(rooms[room], rng), cam, room_index=room))
    return views


def cuboid_fixture() -> tuple[RoomSpec, list[Pose]]:
    """4 m x 5 m x 2.6 m textured room with cameras at 1.4, 1.6 and 1.8 m."""
    spec = RoomSpec.cuboid(4.0, 5.0, 2.6)
    poses = [
        Pose.from_yaw(0.3, [1.6, 1.4, 2.1]),
        Pose.from_yaw(1.9, [2.5, 1.6, 2.9]),
        Pose.from_yaw(-2.2, [1.9, 1.8, 3.3]),
    ]
    return spec, poses


def scene_from_dict(data: dict) -> list[RoomSpec]:
    """Rooms of a scene JSON: either one room or ``{"rooms": [...]}``."""
    if "rooms" in data:
        rooms = [RoomSpec.from_dict(r) for r in data["rooms"]]
    else:
        rooms = [RoomSpec.from_dict(data)]
    if not rooms:
        raise DomainError("scene has no rooms")
    return rooms
