"""Scene directories: synthesis to disk, manifests, and reconstruction outputs.

A scene directory holds ``manifest.json``, a copy of the scene description
and per view ``view_XXX_panorama.png``, ``view_XXX_semantic.png``,
``view_XXX_layout.json``, ``view_XXX_pose.json`` and ``view_XXX_depth_gt.bin``.
Its ``gt/`` folder uses the same layout as a reconstruction output folder
(``view_XXX_layout3d.json``, ``view_XXX_labels.png``, ``view_XXX_depth.bin``)
plus ``view_XXX_structure.png`` and ``correspondences.json``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .confidence import LABELS, SemanticTable, attention_from_png
from .exceptions import DomainError
from .fusion import Layout3D, SceneLayout, lift, write_ply
from .geometry import Pose, SphericalCamera
from .io import read_float_raster, read_json, read_png, read_rgb, to_uint8, write_float_raster, write_json, write_png
from .layout2d import Layout2D
from .metrics import Correspondences, generate_correspondences
from .mvs import ViewInput
from .synth import RenderedView, make_scene, render, scene_from_dict

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
GT_DIR = "gt"
DATA_DIR = Path(__file__).parent / "data"


def fixture_path(name: str) -> Path:
    """Path of a bundled scene description (``cuboid``, ``two_room``, ...)."""
    path = DATA_DIR / f"{name}.json"
    if not path.exists():
        raise DomainError(f"no bundled fixture named {name!r}")
    return path


def _view_name(view_id: int, what: str) -> str:
    return f"view_{view_id:03d}_{what}"


# --------------------------------------------------------------------------
# synthesis


def render_scene(description: dict, seed: int = 0, n_views: int | None = None, cam: SphericalCamera | None = None) -> list[RenderedView]:
    """Render the views of a scene description.

    The description is a room (or ``{"rooms": [...]}``) with optional
    ``image_height`` (pixels), ``n_views`` and explicit ``views`` entries of the
    form ``{"room": i, "yaw": radians, "position": [x, y, z]}``. Explicit
    views are used when present and ``n_views`` is not overridden; otherwise
    poses are sampled from ``seed``.
    """
    rooms = scene_from_dict(description)
    if cam is None:
        cam = SphericalCamera.from_height(int(description.get("image_height", 128)))
    explicit = description.get("views")
    if explicit and n_views is None:
        views = []
        for item in explicit:
            room = int(item.get("room", 0))
            if not 0 <= room < len(rooms):
                raise DomainError(f"view refers to missing room {room}")
            pose = Pose.from_yaw(float(item.get("yaw", 0.0)), item["position"])
            views.append(render(rooms[room], pose, cam, room_index=room))
        return views
    count = int(n_views if n_views is not None else description.get("n_views", 3))
    if count < 1:
        raise DomainError("n_views must be at least 1")
    return make_scene(rooms if len(rooms) > 1 else rooms[0], count, seed, cam)


def gt_layout3d(view: RenderedView, view_id: int) -> Layout3D:
    return lift(view.layout_gt, view.element_depths, view.pose, view_id=view_id)


def write_layout3d(directory: Path, layout: Layout3D, depth: np.ndarray | None = None) -> None:
    """Per-view output files: layout JSON, label PNG and painted depth raster."""
    directory = Path(directory)
    write_json(directory / _view_name(layout.view_id, "layout3d.json"), layout.to_dict())
    if layout.labels is not None:
        if len(layout.elements) > 255:
            raise DomainError("label PNG holds at most 255 elements")
        write_png(directory / _view_name(layout.view_id, "labels.png"), layout.labels.astype(np.uint8))
        write_float_raster(directory / _view_name(layout.view_id, "depth.bin"), layout.depth_raster() if depth is None else depth)


def read_layouts(directory) -> dict[int, Layout3D]:
    """All ``view_XXX_layout3d.json`` files (with label rasters) of a folder."""
    directory = Path(directory)
    layouts = {}
    for path in sorted(directory.glob("view_*_layout3d.json")):
        match = re.match(r"view_(\d+)_layout3d\.json", path.name)
        view_id = int(match.group(1))
        labels_path = directory / _view_name(view_id, "labels.png")
        labels = read_png(labels_path).astype(np.int64) if labels_path.exists() else None
        layout = Layout3D.from_dict(read_json(path), labels)
        if labels is not None and labels.max() >= len(layout.elements):
            raise DomainError(f"{labels_path}: label refers to a missing element")
        layouts[view_id] = layout
    if not layouts:
        raise DomainError(f"{directory}: no view_*_layout3d.json files")
    return layouts


def read_structure(directory) -> dict[int, np.ndarray]:
    masks = {}
    for path in sorted(Path(directory).glob("view_*_structure.png")):
        view_id = int(re.match(r"view_(\d+)_structure\.png", path.name).group(1))
        masks[view_id] = read_png(path) > 0
    return masks


def read_correspondences(directory) -> list[Correspondences]:
    path = Path(directory) / "correspondences.json"
    if not path.exists():
        return []
    return [Correspondences.from_dict(item) for item in read_json(path)["pairs"]]


def write_scene(views: list[RenderedView], out_dir, description: dict, seed: int = 0, correspondences: int = 1000) -> Path:
    """Write rendered views, ground truth and a manifest to ``out_dir``."""
    out = Path(out_dir)
    gt = out / GT_DIR
    gt.mkdir(parents=True, exist_ok=True)
    entries = []
    layouts = []
    for view_id, view in enumerate(views):
        files = {
            "panorama": _view_name(view_id, "panorama.png"),
            "semantic": _view_name(view_id, "semantic.png"),
            "layout": _view_name(view_id, "layout.json"),
            "pose": _view_name(view_id, "pose.json"),
        }
        write_png(out / files["panorama"], to_uint8(view.image))
        write_png(out / files["semantic"], view.semantic_gt)
        write_json(out / files["layout"], view.layout_gt.to_dict())
        write_json(out / files["pose"], view.pose.to_dict())
        write_float_raster(out / _view_name(view_id, "depth_gt.bin"), view.depth_gt)
        layout = gt_layout3d(view, view_id)
        write_layout3d(gt, layout, view.depth_gt)
        write_png(gt / _view_name(view_id, "structure.png"), (view.semantic_gt != LABELS["clutter"]).astype(np.uint8) * 255)
        layouts.append(layout)
        entries.append({"id": view_id, "group": int(view.room_index), **files})
    pairs = []
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            if views[a].room_index != views[b].room_index:
                continue
            pair = generate_correspondences(layouts[a], layouts[b], correspondences, seed=seed * 1000 + a * 31 + b)
            pairs.append(pair.to_dict())
    write_json(gt / "correspondences.json", {"pairs": pairs})
    write_json(out / "scene.json", description)
    cam = views[0].cam
    manifest = {
        "width": cam.width,
        "height": cam.height,
        "seed": seed,
        "views": entries,
        "gt_dir": GT_DIR,
    }
    write_json(out / MANIFEST, manifest)
    return out


# --------------------------------------------------------------------------
# manifests


@dataclass(eq=False)
class ManifestView:
    view_id: int
    panorama: Path
    pose: Path
    layout: Path
    semantic: Path | None = None
    attention: Path | None = None
    group: int = 0


@dataclass(eq=False)
class SceneManifest:
    """Parsed manifest with every referenced path checked to exist."""

    root: Path
    width: int
    height: int
    views: list[ManifestView]
    config: dict = field(default_factory=dict)
    confidence_table: Path | None = None
    output_dir: Path | None = None
    gt_dir: Path | None = None

    @classmethod
    def load(cls, path) -> "SceneManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        if not path.exists():
            raise DomainError(f"manifest not found: {path}")
        data = read_json(path)
        root = path.parent

        def resolve(name, required=True):
            if name is None:
                if required:
                    raise DomainError(f"{path}: missing required file entry")
                return None
            full = (root / name).resolve()
            if not full.exists():
                raise DomainError(f"referenced file does not exist: {full}")
            return full

        try:
            views = [
                ManifestView(
                    int(item["id"]),
                    resolve(item["panorama"]),
                    resolve(item["pose"]),
                    resolve(item["layout"]),
                    resolve(item.get("semantic"), required=False),
                    resolve(item.get("attention"), required=False),
                    int(item.get("group", 0)),
                )
                for item in data["views"]
            ]
            width, height = int(data["width"]), int(data["height"])
        except KeyError as exc:
            raise DomainError(f"{path}: missing key {exc.args[0]!r}") from exc
        if not views:
            raise DomainError(f"{path}: manifest lists no views")
        SphericalCamera(width, height)
        gt_dir = data.get("gt_dir")
        gt_path = (root / gt_dir).resolve() if gt_dir and (root / gt_dir).exists() else None
        out = data.get("output_dir")
        return cls(
            root,
            width,
            height,
            views,
            dict(data.get("config", {})),
            resolve(data.get("confidence_table"), required=False),
            (root / out).resolve() if out else None,
            gt_path,
        )

    def table(self) -> SemanticTable | None:
        if self.confidence_table is None:
            return None
        return SemanticTable.from_dict(read_json(self.confidence_table))

    def load_view(self, view: ManifestView) -> ViewInput:
        image = read_rgb(view.panorama)
        if image.shape[:2] != (self.height, self.width):
            raise DomainError(f"{view.panorama}: expected {self.width}x{self.height} panorama")
        layout = Layout2D.from_dict(read_json(view.layout))
        if layout.cam != SphericalCamera(self.width, self.height):
            raise DomainError(f"{view.layout}: layout size differs from the manifest")
        pose = Pose.from_dict(read_json(view.pose))
        semantic = read_png(view.semantic) if view.semantic else None
        attention = attention_from_png(read_png(view.attention)) if view.attention else None
        return ViewInput(image, pose, layout, semantic, attention, view.view_id)


def write_scene_layout(directory, scene: SceneLayout) -> None:
    write_json(Path(directory) / "fused.json", scene.to_dict())
    write_ply(scene, Path(directory) / "fused.ply")


def read_scene_layout(directory) -> SceneLayout | None:
    path = Path(directory) / "fused.json"
    return SceneLayout.from_dict(read_json(path)) if path.exists() else None


def read_depth(directory, view_id: int) -> np.ndarray | None:
    path = Path(directory) / _view_name(view_id, "depth.bin")
    return read_float_raster(path) if path.exists() else None
