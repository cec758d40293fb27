"""Synthetic dynamic scenes with an analytic ground truth, a brute-force
reference renderer, and the on-disk multi-view dataset format.

The ground truth is a sum of emissive Gaussian blobs on sinusoidal
trajectories: exactly integrable, no view dependence, cheap to evaluate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Bbox, look_at_rotation, ray_aabb

WHITE = np.array([1.0, 1.0, 1.0])


class DatasetFormatError(Exception):
    """Raised when an on-disk dataset is missing pieces or self-inconsistent."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; `rotation`/`translation` form the world-from-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(R)), 1.0, abs_tol=1e-6):
            raise ValueError("camera rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def position(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def pixel_dirs(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """World-space unit directions through continuous pixel coordinates."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        d = np.stack(
            [(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)],
            axis=-1,
        )
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
            width=d["width"], height=d["height"],
        )


@dataclass(frozen=True)
class Blob:
    """One emissive Gaussian: sinusoidal center path, isotropic falloff."""

    center0: np.ndarray
    amplitude: np.ndarray
    frequency: float
    phase: np.ndarray
    radius: float
    peak: float
    albedo: np.ndarray

    def __post_init__(self):
        for name in ("center0", "amplitude", "phase", "albedo"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if self.radius <= 0 or self.peak <= 0:
            raise ValueError("blob radius and peak density must be positive")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo channels must lie in [0, 1]")

    def center_at(self, t: float, n_frames: int) -> np.ndarray:
        u = 2.0 * math.pi * self.frequency * t / max(n_frames, 1)
        return self.center0 + self.amplitude * np.sin(u + self.phase)


@dataclass(frozen=True)
class AnalyticScene:
    blobs: tuple
    bbox: Bbox
    n_frames: int

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        for b in self.blobs:
            for t in range(self.n_frames):
                c = b.center_at(t, self.n_frames)
                if not self.bbox.contains(c):
                    raise ValueError(f"blob trajectory leaves bbox at frame {t}")

    def to_json(self) -> dict:
        return {
            "bbox": self.bbox.to_json(),
            "n_frames": self.n_frames,
            "blobs": [
                {
                    "center0": list(map(float, b.center0)),
                    "amplitude": list(map(float, b.amplitude)),
                    "frequency": float(b.frequency),
                    "phase": list(map(float, b.phase)),
                    "radius": float(b.radius),
                    "peak": float(b.peak),
                    "albedo": list(map(float, b.albedo)),
                }
                for b in self.blobs
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AnalyticScene":
        blobs = tuple(
            Blob(
                center0=np.array(b["center0"]), amplitude=np.array(b["amplitude"]),
                frequency=b["frequency"], phase=np.array(b["phase"]),
                radius=b["radius"], peak=b["peak"], albedo=np.array(b["albedo"]),
            )
            for b in d["blobs"]
        )
        return cls(blobs=blobs, bbox=Bbox.from_json(d["bbox"]), n_frames=int(d["n_frames"]))


@dataclass
class Dataset:
    """Per-frame, per-view float images plus the shared cameras and bbox."""

    cameras: list
    frames: list  # frames[frame][view] -> (H, W, 3) float array in [0, 1]
    bbox: Bbox

    def __post_init__(self):
        for fi, views in enumerate(self.frames):
            if len(views) != len(self.cameras):
                raise ValueError(f"frame {fi} has {len(views)} images for {len(self.cameras)} cameras")
            for vi, img in enumerate(views):
                cam = self.cameras[vi]
                if img.shape != (cam.height, cam.width, 3):
                    raise ValueError(f"frame {fi} view {vi}: image shape {img.shape} does not match camera")

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def build_camera_ring(n_views, radius, target, height, image_width, image_height,
                      focal, angle_offset=0.0):
    """Cameras evenly spaced on a horizontal circle, all aimed at `target`."""
    if n_views < 2:
        raise ValueError("a camera ring needs at least 2 views")
    if radius <= 0:
        raise ValueError("ring radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n_views):
        a = angle_offset + 2.0 * math.pi * k / n_views
        pos = target + np.array([radius * math.cos(a), height, radius * math.sin(a)])
        R = look_at_rotation(pos, target)
        cams.append(
            Camera(
                fx=focal, fy=focal, cx=image_width / 2.0, cy=image_height / 2.0,
                rotation=R, translation=pos, width=image_width, height=image_height,
            )
        )
    return cams


def eval_scene_many(scene: AnalyticScene, pts: np.ndarray, t) -> tuple:
    """Vectorized ground-truth query: (densities, rgb) for points at frame t."""
    pts = np.asarray(pts, dtype=np.float64)
    dens = np.zeros(pts.shape[0])
    col_accum = np.zeros((pts.shape[0], 3))
    for b in scene.blobs:
        c = b.center_at(t, scene.n_frames)
        d2 = np.sum((pts - c[None, :]) ** 2, axis=-1)
        w = b.peak * np.exp(-d2 / (2.0 * b.radius**2))
        dens += w
        col_accum += w[:, None] * b.albedo[None, :]
    rgb = np.where(dens[:, None] > 0.0, col_accum / np.maximum(dens[:, None], 1e-300), 0.0)
    inside = scene.bbox.contains(pts)
    dens = np.where(inside, dens, 0.0)
    rgb = np.where(inside[:, None], rgb, 0.0)
    return dens, rgb


def eval_scene(scene: AnalyticScene, x, t) -> tuple:
    if t >= scene.n_frames:
        raise ValueError(f"frame {t} out of range ({scene.n_frames} frames)")
    dens, rgb = eval_scene_many(scene, np.asarray(x, dtype=np.float64)[None, :], t)
    return float(dens[0]), rgb[0]


def render_oracle(scene: AnalyticScene, cam: Camera, t, step: float,
                  bg: np.ndarray = WHITE, chunk: int = 2048) -> np.ndarray:
    """Brute-force emission-absorption integration of the analytic field.

    Midpoint quadrature at fixed world-space step with transmittance-weighted
    compositing over `bg`. Intentionally independent of the trained renderer.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    bg = np.asarray(bg, dtype=np.float64)
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px = (xs + 0.5).reshape(-1)
    py = (ys + 0.5).reshape(-1)
    out = np.empty((H * W, 3))
    origin = cam.position
    for lo in range(0, H * W, chunk):
        hi = min(lo + chunk, H * W)
        dirs = cam.pixel_dirs(px[lo:hi], py[lo:hi])
        tn, tf, ok = ray_aabb(origin[None, :], dirs, scene.bbox)
        n_steps = np.where(ok, np.floor((tf - tn) / step + 0.5).astype(np.int64), 0)
        M = int(n_steps.max()) if len(n_steps) else 0
        if M == 0:
            out[lo:hi] = bg
            continue
        k = np.arange(M)
        ts = tn[:, None] + (k[None, :] + 0.5) * step
        live = k[None, :] < n_steps[:, None]
        pts = origin[None, None, :] + ts[:, :, None] * dirs[:, None, :]
        dens, rgb = eval_scene_many(scene, pts.reshape(-1, 3), t)
        dens = (dens.reshape(-1, M)) * live
        rgb = rgb.reshape(-1, M, 3)
        alpha = 1.0 - np.exp(-dens * step)
        trans = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
        wgt = t_excl * alpha
        px_rgb = np.einsum("pm,pmc->pc", wgt, rgb) + trans[:, -1:] * bg[None, :]
        out[lo:hi] = px_rgb
    return out.reshape(H, W, 3)


def oracle_ray_weights(scene, origin, direction, t, step):
    """Transmittance weights along one ray; exposed for property tests."""
    tn, tf, ok = ray_aabb(np.asarray(origin)[None, :], np.asarray(direction)[None, :], scene.bbox)
    if not ok[0]:
        return np.zeros(0)
    n = int(np.floor((tf[0] - tn[0]) / step + 0.5))
    ts = tn[0] + (np.arange(n) + 0.5) * step
    pts = np.asarray(origin)[None, :] + ts[:, None] * np.asarray(direction)[None, :]
    dens, _ = eval_scene_many(scene, pts, t)
    alpha = 1.0 - np.exp(-dens * step)
    t_excl = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    return t_excl * alpha


# --- on-disk format -------------------------------------------------------

def _image_to_png(img: np.ndarray, path: Path):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", compress_level=6)


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for fi, views in enumerate(ds.frames):
        fdir = root / f"frame_{fi:04d}"
        fdir.mkdir(exist_ok=True)
        row = []
        for vi, img in enumerate(views):
            rel = f"frame_{fi:04d}/view_{vi:02d}.png"
            _image_to_png(img, root / rel)
            row.append(rel)
        rel_paths.append(row)
    manifest = {
        "cameras": [c.to_json() for c in ds.cameras],
        "bbox": ds.bbox.to_json(),
        "frames": rel_paths,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetFormatError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupt manifest {mpath}: {e}") from e
    try:
        cameras = [Camera.from_json(c) for c in manifest["cameras"]]
        bbox = Bbox.from_json(manifest["bbox"])
        rel_paths = manifest["frames"]
    except (KeyError, TypeError) as e:
        raise DatasetFormatError(f"manifest {mpath} missing field: {e}") from e
    frames = []
    for row in rel_paths:
        views = []
        for rel in row:
            ipath = root / rel
            if not ipath.is_file():
                raise DatasetFormatError(f"manifest references missing image: {ipath}")
            views.append(_png_to_image(ipath))
        frames.append(views)
    try:
        return Dataset(cameras=cameras, frames=frames, bbox=bbox)
    except ValueError as e:
        raise DatasetFormatError(str(e)) from e


# --- the repo's standard toy scene ---------------------------------------

FIXTURE_HOLDOUT_VIEWS = (3, 10)


def fixture_scene(n_frames: int = 8) -> AnalyticScene:
    """Two drifting Gaussian blobs in the unit box; the canonical test scene."""
    blobs = (
        Blob(
            center0=(-0.32, 0.02, -0.05), amplitude=(0.08, 0.11, 0.05),
            frequency=1.0, phase=(0.0, math.pi / 2, math.pi),
            radius=0.30, peak=12.0, albedo=(0.85, 0.35, 0.25),
        ),
        Blob(
            center0=(0.33, -0.04, 0.06), amplitude=(0.06, 0.09, 0.08),
            frequency=1.0, phase=(math.pi, 0.0, math.pi / 3),
            radius=0.26, peak=10.0, albedo=(0.25, 0.45, 0.90),
        ),
    )
    ext = 0.75  # small enough that every camera sees the whole box
    return AnalyticScene(blobs=blobs, bbox=Bbox((-ext, -ext, -ext), (ext, ext, ext)),
                         n_frames=n_frames)


def fixture_cameras(image_size: int = 64, focal: float = 70.0) -> list:
    """Two 7-camera rings at different heights: 14 views, 12 train + 2 held out."""
    ring1 = build_camera_ring(7, radius=2.9, target=(0, 0, 0), height=0.55,
                              image_width=image_size, image_height=image_size, focal=focal)
    ring2 = build_camera_ring(7, radius=2.9, target=(0, 0, 0), height=-0.40,
                              image_width=image_size, image_height=image_size, focal=focal,
                              angle_offset=math.pi / 7)
    return ring1 + ring2


def render_fixture_dataset(scene: AnalyticScene, cameras, oracle_step: float) -> Dataset:
    frames = []
    for t in range(scene.n_frames):
        frames.append([render_oracle(scene, cam, t, oracle_step) for cam in cameras])
    return Dataset(cameras=cameras, frames=frames, bbox=scene.bbox)
