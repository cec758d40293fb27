"""Shared geometric primitives: axis-aligned boxes, ray/box clipping, look-at frames.

World convention used across the repo: right-handed, +y up. Camera frames
store a world-from-camera rotation whose columns are [right, image-down,
forward]; pixels look down +z in camera space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Bbox:
    """Axis-aligned box in world units."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64))
        if self.min.shape != (3,) or self.max.shape != (3,):
            raise ValueError("bbox min/max must be 3-vectors")
        if not np.all(self.max > self.min):
            raise ValueError("bbox max must exceed min on every axis")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        lo = self.min - tol
        hi = self.max + tol
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def to_json(self) -> dict:
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_json(cls, d: dict) -> "Bbox":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64))


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, bbox: Bbox):
    """Slab-clip rays against a box.

    Returns (t_near, t_far, valid); t_near is clamped to 0 so origins inside
    the box start marching at the origin. Rays that miss (or only graze
    behind the origin) get valid=False.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / dirs
        t0 = (bbox.min[None, :] - origins) * inv
        t1 = (bbox.max[None, :] - origins) * inv
    # dir component == 0: ray parallel to slab; inside iff origin within slab
    par = dirs == 0.0
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    inside = (origins >= bbox.min[None, :]) & (origins <= bbox.max[None, :])
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.max(lo, axis=-1)
    t_far = np.min(hi, axis=-1)
    t_near = np.maximum(t_near, 0.0)
    valid = t_far > t_near
    return t_near, t_far, valid


def look_at_rotation(position: np.ndarray, target: np.ndarray, up: np.ndarray = WORLD_UP) -> np.ndarray:
    """World-from-camera rotation for a camera at `position` looking at `target`.

    Columns are [right, image-down, forward]. Undefined when the view
    direction is parallel to `up`.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    n = np.linalg.norm(forward)
    if n == 0.0:
        raise ValueError("camera position coincides with target")
    forward = forward / n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right = right / rn
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)
