"""Small argument checks shared by the estimators and the CLI."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .exceptions import DomainError
from .mvs import ViewInput


def check_positive(name: str, value, integer: bool = False):
    if integer:
        if int(value) != value or value < 1:
            raise DomainError(f"{name} must be a positive integer, got {value!r}")
        return int(value)
    value = float(value)
    if not (np.isfinite(value) and value > 0):
        raise DomainError(f"{name} must be positive, got {value!r}")
    return value


def check_choice(name: str, value, choices: Sequence):
    if value not in choices:
        raise DomainError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_views(views) -> list:
    """Views must be a non-empty list of equally sized, laid-out panoramas with unique ids."""
    views = list(views)
    if not views:
        raise DomainError("need at least one view")
    for view in views:
        if not isinstance(view, ViewInput):
            raise DomainError(f"expected ViewInput, got {type(view).__name__}")
        if view.layout is None:
            raise DomainError(f"view {view.view_id} has no 2D layout")
        if view.image.shape[:2] != view.layout.cam.shape:
            raise DomainError(f"view {view.view_id}: image and layout sizes differ")
    shapes = {v.image.shape[:2] for v in views}
    if len(shapes) != 1:
        raise DomainError(f"views have different panorama sizes: {sorted(shapes)}")
    ids = [v.view_id for v in views]
    if len(set(ids)) != len(ids):
        raise DomainError("view ids must be unique")
    return views
