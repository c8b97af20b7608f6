"""Per-pixel confidence weights from semantics and attention.

Semantic maps are 8-bit label rasters using :data:`LABELS`; attention maps
are 8-bit grayscale images read as ``value / 255``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError

log = logging.getLogger(__name__)

LABELS = {"ceiling": 0, "floor": 1, "wall": 2, "clutter": 3}
LABEL_NAMES = {v: k for k, v in LABELS.items()}


@dataclass(frozen=True)
class SemanticTable:
    """Label name to confidence in [0, 1]; unlisted labels get 0."""

    weights: dict = field(default_factory=lambda: {"ceiling": 1.0, "floor": 1.0, "wall": 1.0})

    def __post_init__(self):
        for name, value in self.weights.items():
            if not 0.0 <= float(value) <= 1.0:
                raise DomainError(f"confidence for {name!r} must lie in [0, 1]")

    def __getitem__(self, name: str) -> float:
        return float(self.weights.get(name, 0.0))

    @classmethod
    def from_dict(cls, data: dict) -> "SemanticTable":
        return cls({str(k): float(v) for k, v in data.items()})


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Semantic confidence ``c_s``, attention ``c_a`` and their product ``c``."""

    c_s: np.ndarray
    c_a: np.ndarray
    c: np.ndarray

    @property
    def shape(self):
        return self.c.shape

    @classmethod
    def ones(cls, shape) -> "ConfidenceMap":
        one = np.ones(shape)
        return cls(one, one, one)


def semantic_confidence(sem_map: np.ndarray, table: SemanticTable | None = None) -> np.ndarray:
    """Look up each pixel's label in ``table``.

    Label ids missing from :data:`LABELS` map to 0 and are counted in a warning.
    """
    table = table or SemanticTable()
    sem_map = np.asarray(sem_map)
    lut = np.zeros(256)
    for name, label in LABELS.items():
        lut[label] = table[name]
    unknown = ~np.isin(sem_map, list(LABELS.values()))
    if unknown.any():
        log.warning("%d pixels carry unknown semantic labels; their confidence is 0", int(unknown.sum()))
    return np.where(unknown, 0.0, lut[np.clip(sem_map, 0, 255).astype(np.int64)])


def _check_unit(name: str, values: np.ndarray) -> None:
    if np.any(~np.isfinite(values)) or np.any((values < 0) | (values > 1)):
        raise DomainError(f"{name} must lie in [0, 1]")


def combine(c_s, c_a) -> ConfidenceMap:
    """Elementwise product of semantic and attention confidences."""
    c_s = np.asarray(c_s, dtype=np.float64)
    c_a = np.asarray(c_a, dtype=np.float64)
    if c_s.shape != c_a.shape:
        raise DomainError("confidence rasters differ in shape")
    _check_unit("semantic confidence", c_s)
    _check_unit("attention confidence", c_a)
    return ConfidenceMap(c_s, c_a, c_s * c_a)


def attention_from_png(image: np.ndarray) -> np.ndarray:
    """Attention raster from 8-bit grayscale pixel values."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[..., 0]
    return image.astype(np.float64) / 255.0


def build_confidence(mode: str, shape, semantic=None, attention=None, table: SemanticTable | None = None) -> ConfidenceMap:
    """Confidence map for an ablation arm: ``none``, ``semantic`` or ``full``."""
    if mode == "none":
        return ConfidenceMap.ones(shape)
    if mode not in ("semantic", "full"):
        raise DomainError(f"unknown confidence mode {mode!r}")
    if semantic is None:
        raise DomainError(f"confidence mode {mode!r} needs a semantic map")
    c_s = semantic_confidence(semantic, table)
    c_a = np.ones(shape)
    if mode == "full":
        if attention is None:
            raise DomainError("confidence mode 'full' needs an attention map")
        c_a = np.asarray(attention, dtype=np.float64)
    return combine(c_s, c_a)
