"""Spherical camera model, rigid poses and plane-induced warping.

Conventions:
  - Camera and world frames are y-up. The panorama centre looks along +z.
  - Continuous pixel coordinates: pixel index ``i`` covers ``[i, i + 1)``,
    so its centre sits at ``i + 0.5``.
  - Longitude ``lon = (u / W) * 2pi - pi``, latitude ``lat = pi/2 - (v / H) * pi``.
  - A ray ``(x, y, z) = (cos(lat) sin(lon), sin(lat), cos(lat) cos(lon))``.
  - ``Pose`` maps camera coordinates to world coordinates:
    ``X_world = R @ X_cam + t`` with ``t`` the camera centre.
  - A layout ``Plane`` with unit normal ``n`` and depth ``d`` holds the points
    ``n . X = -d``; ``n`` faces the camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import DomainError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class SphericalCamera:
    """Equirectangular camera of ``width x height`` pixels (``width = 2 height``)."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 8 or self.width != 2 * self.height:
            raise DomainError(
                f"equirectangular camera needs width = 2*height >= 8, got {self.width}x{self.height}"
            )

    @classmethod
    def from_height(cls, height: int) -> "SphericalCamera":
        return cls(2 * int(height), int(height))

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape ``(height, width)``."""
        return (self.height, self.width)

    def pixel_centers(self) -> np.ndarray:
        """``(H, W, 2)`` array of ``(u, v)`` pixel-centre coordinates."""
        return _pixel_centers(self.width, self.height)

    def rays(self) -> np.ndarray:
        """``(H, W, 3)`` unit rays through every pixel centre (read-only)."""
        return _ray_grid(self.width, self.height)


@lru_cache(maxsize=8)
def _pixel_centers(width: int, height: int) -> np.ndarray:
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    grid = np.stack([u, v], axis=-1)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=8)
def _ray_grid(width: int, height: int) -> np.ndarray:
    cam = SphericalCamera(width, height)
    rays = pixel_to_ray(cam, _pixel_centers(width, height))
    rays.setflags(write=False)
    return rays


def pixel_to_ray(cam: SphericalCamera, pixel) -> np.ndarray:
    """Unit viewing direction(s) for continuous pixel coordinates ``(..., 2)``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    u, v = pixel[..., 0], pixel[..., 1]
    if np.any(~np.isfinite(pixel)) or np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise DomainError("pixel outside panorama bounds")
    lon = (u / cam.width) * 2.0 * np.pi - np.pi
    lat = 0.5 * np.pi - (v / cam.height) * np.pi
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.sin(lon), np.sin(lat), cos_lat * np.cos(lon)], axis=-1)


def ray_to_pixel(cam: SphericalCamera, direction) -> np.ndarray:
    """Continuous pixel coordinates for direction(s) ``(..., 3)``.

    Directions need not be normalized. ``u`` is wrapped into ``[0, width)``.
    """
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction, axis=-1)
    if np.any(~(norm > 0)):
        raise DomainError("zero-length direction has no pixel")
    return _ray_to_pixel_unchecked(cam.width, cam.height, direction)


def _ray_to_pixel_unchecked(width, height, direction, norm=None):
    x, y, z = direction[..., 0], direction[..., 1], direction[..., 2]
    lon = np.arctan2(x, z)
    lat = np.arctan2(y, np.hypot(x, z))
    u = np.mod((lon + np.pi) * (width / (2.0 * np.pi)), width)
    # np.mod can round a tiny negative up to exactly ``width``
    u = np.where(u >= width, 0.0, u)
    v = (0.5 * np.pi - lat) * (height / np.pi)
    return np.stack([u, v], axis=-1)


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3) or not np.all(np.isfinite(rotation)):
        raise DomainError("rotation must be a finite 3x3 matrix")
    if np.linalg.norm(rotation.T @ rotation - np.eye(3)) >= ORTHONORMAL_TOL:
        raise DomainError("rotation is not orthonormal")
    if np.linalg.det(rotation) <= 0:
        raise DomainError("rotation has negative determinant")


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from camera to world coordinates (meters, y-up)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rotation)
        if not np.all(np.isfinite(translation)):
            raise DomainError("translation must be finite")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation) -> "Pose":
        """Pose rotated by ``yaw`` radians about the up axis."""
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        return cls(rotation, translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def to_world(self, points) -> np.ndarray:
        """Map camera-frame points ``(..., 3)`` to world coordinates."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_camera(self, points) -> np.ndarray:
        """Map world points ``(..., 3)`` to camera coordinates."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3), data["translation"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        return cls.from_dict(json.loads(text))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``."""
    rotation = a.rotation @ b.rotation
    # re-orthonormalize so long chains stay inside the Pose tolerance
    u, _, vt = np.linalg.svd(rotation)
    return Pose(u @ vt, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rotation = a.rotation.T
    return Pose(rotation, -(rotation @ a.translation))


@dataclass(frozen=True, eq=False)
class Plane:
    """Layout plane in a camera frame: ``normal . X = -depth``."""

    normal: np.ndarray
    depth: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise DomainError("plane normal must have unit length")
        if not (np.isfinite(self.depth) and self.depth > 0):
            raise DomainError("plane depth must be positive")
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "depth", float(self.depth))

    def intersect(self, rays) -> np.ndarray:
        """Forward ray/plane intersections; NaN where the ray misses."""
        return intersect_plane(rays, self.normal, self.depth)


def intersect_plane(rays, normal, depth) -> np.ndarray:
    """Intersect rays from the origin with ``normal . X = -depth``.

    Rays parallel to the plane or pointing away from it give NaN rows.
    """
    rays = np.asarray(rays, dtype=np.float64)
    facing = -(rays @ np.asarray(normal, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(facing > 0, depth / facing, np.nan)
    return rays * t[..., None]


def warp_pixels(ref_pose: Pose, src_pose: Pose, plane: Plane, cam: SphericalCamera, pixels) -> np.ndarray:
    """Vectorized ``warp_layout``; rows without a forward intersection are NaN."""
    points = intersect_plane(pixel_to_ray(cam, pixels), plane.normal, plane.depth)
    relative = compose(invert(src_pose), ref_pose)
    src_points = relative.to_world(points)
    out = np.full(src_points.shape[:-1] + (2,), np.nan)
    ok = np.all(np.isfinite(src_points), axis=-1) & (np.linalg.norm(src_points, axis=-1) > 0)
    out[ok] = _ray_to_pixel_unchecked(cam.width, cam.height, src_points[ok])
    return out


def warp_layout(ref_pose: Pose, src_pose: Pose, plane: Plane, cam: SphericalCamera, pixel):
    """Source-view pixel seeing the same point of ``plane`` as reference ``pixel``.

    The plane is expressed in the reference camera frame. Returns ``None``
    when the reference ray has no forward intersection with the plane.
    """
    warped = warp_pixels(ref_pose, src_pose, plane, cam, np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0]
    if not np.all(np.isfinite(warped)):
        return None
    return warped


def bilinear_sample(image: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at continuous pixel coordinates.

    Longitude wraps around; latitude clamps at the poles.
    """
    height, width = image.shape[:2]
    x = pixels[..., 0] - 0.5
    y = np.clip(pixels[..., 1] - 0.5, 0.0, height - 1.0)
    x0 = np.floor(x)
    y0 = np.minimum(np.floor(y), max(height - 2, 0))
    fx = x - x0
    fy = y - y0
    i0 = x0.astype(np.int64) % width
    i1 = i0 + 1
    i1[i1 == width] = 0
    j0 = y0.astype(np.int64) * width
    j1 = np.minimum(j0 + width, (height - 1) * width)
    flat = image.reshape((height * width,) + image.shape[2:])
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = flat[j0 + i0]
    top += (flat[j0 + i1] - top) * fx
    bottom = flat[j1 + i0]
    bottom += (flat[j1 + i1] - bottom) * fx
    return top + (bottom - top) * fy
