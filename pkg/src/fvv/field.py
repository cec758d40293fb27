"""Per-frame hybrid representation: an explicit density grid plus three
orthogonal feature planes, with sampling, gradient scatter, occupancy
maintenance and resolution rescaling.

Lattice convention (fixed repo-wide): grid samples sit at cell corners and
span the bbox inclusively, so axis i has dims[i] nodes with spacing
extent/(dims[i]-1). Feature planes use the same convention at 3x the grid
resolution. Out-of-box queries raise; callers clip rays first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .geometry import Bbox

PLANE_NAMES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
DEFAULT_CHANNELS = 10


class OutOfBoundsError(Exception):
    """Query point outside the field's bounding box."""


def plane_dims(grid_dims) -> dict:
    """Feature-plane resolutions: 3x the grid resolution per matching axis."""
    return {s: (3 * grid_dims[a], 3 * grid_dims[b]) for s, (a, b) in PLANE_AXES.items()}


@dataclass
class DensityGrid:
    values: torch.Tensor  # (W, H, D) float32 logits
    bbox: Bbox

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("density grid must be 3-D")
        if min(self.values.shape) < 2:
            raise ValueError("density grid needs at least 2 nodes per axis")

    @property
    def dims(self):
        return tuple(self.values.shape)


class TriPlane:
    """Three feature planes backed by one flat (total_nodes, h) buffer.

    The shared buffer keeps gather/scatter and the optimizer single-tensor;
    `planes[s]` are reshaped views into it.
    """

    def __init__(self, flat: torch.Tensor, dims: dict, h: int):
        self.flat = flat
        self.h = h
        self.dims = dict(dims)
        self.offsets = {}
        self.planes = {}
        off = 0
        for s in PLANE_NAMES:
            ra, rb = self.dims[s]
            self.offsets[s] = off
            self.planes[s] = flat[off:off + ra * rb].view(ra, rb, h)
            off += ra * rb
        if off != flat.shape[0]:
            raise ValueError("flat buffer size does not match plane dims")

    @classmethod
    def zeros(cls, grid_dims, h: int = DEFAULT_CHANNELS) -> "TriPlane":
        dims = plane_dims(grid_dims)
        total = sum(ra * rb for ra, rb in dims.values())
        return cls(torch.zeros(total, h, dtype=torch.float32), dims, h)

    def clone(self) -> "TriPlane":
        return TriPlane(self.flat.clone(), self.dims, self.h)


@dataclass
class FrameField:
    sigma: DensityGrid
    planes: TriPlane
    frame_index: int = 0

    def __post_init__(self):
        want = plane_dims(self.sigma.dims)
        if self.planes.dims != want:
            raise ValueError(f"plane dims {self.planes.dims} do not match grid dims {self.sigma.dims}")

    @property
    def bbox(self) -> Bbox:
        return self.sigma.bbox

    @property
    def h(self) -> int:
        return self.planes.h

    def clone(self) -> "FrameField":
        return FrameField(
            sigma=DensityGrid(self.sigma.values.clone(), self.sigma.bbox),
            planes=self.planes.clone(),
            frame_index=self.frame_index,
        )

    def param_tensors(self) -> dict:
        return {"sigma": self.sigma.values, "planes": self.planes.flat}


@dataclass
class OccupancyGrid:
    bits: torch.Tensor  # (W, H, D) bool
    bbox: Bbox
    lambda_th: float = 1e-4

    @property
    def dims(self):
        return tuple(self.bits.shape)


@dataclass
class FieldGrads:
    """Accumulation buffers shaped like one FrameField's parameters."""

    d_sigma: torch.Tensor
    d_planes_flat: torch.Tensor

    @classmethod
    def zeros_like(cls, f: FrameField) -> "FieldGrads":
        return cls(torch.zeros_like(f.sigma.values), torch.zeros_like(f.planes.flat))

    def plane_view(self, planes: TriPlane, s: str) -> torch.Tensor:
        ra, rb = planes.dims[s]
        off = planes.offsets[s]
        return self.d_planes_flat[off:off + ra * rb].view(ra, rb, planes.h)

    def tensors(self) -> dict:
        return {"sigma": self.d_sigma, "planes": self.d_planes_flat}


def new_frame_field(dims, bbox: Bbox, h: int = DEFAULT_CHANNELS, frame_index: int = 0,
                    density_init: float = -4.0) -> FrameField:
    sigma = DensityGrid(torch.full(tuple(dims), density_init, dtype=torch.float32), bbox)
    return FrameField(sigma=sigma, planes=TriPlane.zeros(dims, h), frame_index=frame_index)


# --- interpolation internals ----------------------------------------------

def _check_inside(bbox: Bbox, x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64).reshape(3)
    lo = torch.from_numpy(bbox.min)
    hi = torch.from_numpy(bbox.max)
    tol = 1e-9 * float((bbox.max - bbox.min).max())
    if bool((x < lo - tol).any() or (x > hi + tol).any()):
        raise OutOfBoundsError(f"point {x.tolist()} outside bbox")
    return torch.minimum(torch.maximum(x, lo), hi)


def _axis_coords(x: torch.Tensor, lo: float, hi: float, n: int):
    """Continuous lattice coordinate -> (base index, fraction in [0,1])."""
    u = (x - lo) / (hi - lo) * (n - 1)
    i0 = u.floor().clamp_(0, n - 2).to(torch.int64)
    f = (u - i0).clamp_(0.0, 1.0)
    return i0, f


_CORNERS3 = torch.tensor([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
_CORNERS2 = torch.tensor([[du, dv] for du in (0, 1) for dv in (0, 1)])


def density_interp(grid: DensityGrid, pts: torch.Tensor):
    """8-corner indices and trilinear weights for a batch of inside points."""
    W, H, D = grid.dims
    lo, hi = grid.bbox.min, grid.bbox.max
    ix, fx = _axis_coords(pts[:, 0], lo[0], hi[0], W)
    iy, fy = _axis_coords(pts[:, 1], lo[1], hi[1], H)
    iz, fz = _axis_coords(pts[:, 2], lo[2], hi[2], D)
    wx = torch.stack([1.0 - fx, fx], dim=1)
    wy = torch.stack([1.0 - fy, fy], dim=1)
    wz = torch.stack([1.0 - fz, fz], dim=1)
    w8 = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    base = (ix * H + iy) * D + iz
    off = (_CORNERS3[:, 0] * H + _CORNERS3[:, 1]) * D + _CORNERS3[:, 2]
    idx8 = base[:, None] + off[None, :]
    return idx8, w8


def gather_density(grid: DensityGrid, idx8: torch.Tensor, w8: torch.Tensor) -> torch.Tensor:
    vals = grid.values.reshape(-1)[idx8.reshape(-1)].reshape(idx8.shape)
    return (vals.to(torch.float64) * w8).sum(dim=1)


def sample_density_many(grid: DensityGrid, pts: torch.Tensor) -> torch.Tensor:
    idx8, w8 = density_interp(grid, pts)
    return gather_density(grid, idx8, w8)


def sample_density(grid: DensityGrid, x) -> float:
    pt = _check_inside(grid.bbox, x)
    return float(sample_density_many(grid, pt[None, :])[0])


def plane_interp(planes: TriPlane, pts: torch.Tensor, bbox: Bbox):
    """Fused 4-corner bilinear data for all three planes.

    Returns (idx12, w12): flat row indices into `planes.flat` and matching
    weights, 4 corners per plane in the fixed xy, xz, yz order.
    """
    lo, hi = bbox.min, bbox.max
    idx_parts, w_parts = [], []
    for s in PLANE_NAMES:
        a, b = PLANE_AXES[s]
        ra, rb = planes.dims[s]
        iu, fu = _axis_coords(pts[:, a], lo[a], hi[a], ra)
        iv, fv = _axis_coords(pts[:, b], lo[b], hi[b], rb)
        wu = torch.stack([1.0 - fu, fu], dim=1)
        wv = torch.stack([1.0 - fv, fv], dim=1)
        w4 = (wu[:, :, None] * wv[:, None, :]).reshape(-1, 4)
        base = iu * rb + iv + planes.offsets[s]
        off = _CORNERS2[:, 0] * rb + _CORNERS2[:, 1]
        idx_parts.append(base[:, None] + off[None, :])
        w_parts.append(w4)
    return torch.cat(idx_parts, dim=1), torch.cat(w_parts, dim=1)


def gather_features(planes: TriPlane, idx12: torch.Tensor, w12: torch.Tensor) -> torch.Tensor:
    # per-sample work stays in float32 (storage dtype); callers accumulate in f64
    S = idx12.shape[0]
    rows = planes.flat[idx12.reshape(-1)].reshape(S, 12, planes.h)
    w = w12.to(torch.float32)[:, :, None]
    out = (rows * w).reshape(S, 3, 4, planes.h).sum(dim=2)
    return out.reshape(S, 3 * planes.h).to(torch.float64)


def sample_features_many(planes: TriPlane, pts: torch.Tensor, bbox: Bbox) -> torch.Tensor:
    idx12, w12 = plane_interp(planes, pts, bbox)
    return gather_features(planes, idx12, w12)


def sample_features(planes: TriPlane, x, bbox: Bbox) -> torch.Tensor:
    pt = _check_inside(bbox, x)
    return sample_features_many(planes, pt[None, :], bbox)[0]


def scatter_density_batch(buf: torch.Tensor, idx8: torch.Tensor, w8: torch.Tensor,
                          d_sigma: torch.Tensor) -> None:
    contrib = (w8 * d_sigma[:, None]).to(buf.dtype)
    buf.reshape(-1).index_add_(0, idx8.reshape(-1), contrib.reshape(-1))


def scatter_features_batch(buf_flat: torch.Tensor, idx12: torch.Tensor, w12: torch.Tensor,
                           d_feat: torch.Tensor, h: int) -> None:
    S = idx12.shape[0]
    per_plane = d_feat.to(buf_flat.dtype).reshape(S, 3, h)
    spread = per_plane[:, (0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2), :]
    contrib = spread * w12.to(buf_flat.dtype)[:, :, None]
    buf_flat.index_add_(0, idx12.reshape(-1), contrib.reshape(S * 12, h))


def scatter_gradients(f: FrameField, x, d_sigma: float, d_feat, accum: FieldGrads) -> None:
    """Add one point's upstream gradients into the accumulation buffers."""
    if accum.d_sigma.shape != f.sigma.values.shape or accum.d_planes_flat.shape != f.planes.flat.shape:
        raise ValueError("gradient buffer shapes do not match the field")
    d_feat = torch.as_tensor(d_feat, dtype=torch.float64).reshape(-1)
    if d_feat.numel() != 3 * f.h:
        raise ValueError(f"feature gradient must have length {3 * f.h}")
    pt = _check_inside(f.bbox, x)[None, :]
    idx8, w8 = density_interp(f.sigma, pt)
    scatter_density_batch(accum.d_sigma, idx8, w8, torch.tensor([float(d_sigma)], dtype=torch.float64))
    idx12, w12 = plane_interp(f.planes, pt, f.bbox)
    scatter_features_batch(accum.d_planes_flat, idx12, w12, d_feat[None, :], f.h)


# --- occupancy -------------------------------------------------------------

def update_occupancy(grid: DensityGrid, lambda_th: float = 1e-4) -> OccupancyGrid:
    """Occupied iff the 3x3x3 neighborhood max of sigmoid(logit) exceeds the
    threshold; the pooling window is clipped at grid borders."""
    occ_prob = torch.sigmoid(grid.values.to(torch.float32))
    pooled = F.max_pool3d(occ_prob[None, None], kernel_size=3, stride=1, padding=1)[0, 0]
    return OccupancyGrid(bits=pooled > lambda_th, bbox=grid.bbox, lambda_th=lambda_th)


def occupied_at(occ: OccupancyGrid, pts: torch.Tensor) -> torch.Tensor:
    """Occupancy at the nearest lattice node for a batch of inside points."""
    W, H, D = occ.dims
    lo, hi = occ.bbox.min, occ.bbox.max
    out_idx = []
    for axis, n in ((0, W), (1, H), (2, D)):
        u = (pts[:, axis] - lo[axis]) / (hi[axis] - lo[axis]) * (n - 1)
        out_idx.append(u.round().clamp_(0, n - 1).to(torch.int64))
    flat = (out_idx[0] * H + out_idx[1]) * D + out_idx[2]
    return occ.bits.reshape(-1)[flat]


# --- rescaling -------------------------------------------------------------

def _resample_1d_coords(n_new: int, n_old: int) -> torch.Tensor:
    if n_new == 1:
        return torch.zeros(1, dtype=torch.float64)
    return torch.linspace(0.0, float(n_old - 1), n_new, dtype=torch.float64)


def _resample_3d(values: torch.Tensor, new_dims) -> torch.Tensor:
    W, H, D = values.shape
    us = [_resample_1d_coords(new_dims[0], W), _resample_1d_coords(new_dims[1], H),
          _resample_1d_coords(new_dims[2], D)]
    gx, gy, gz = torch.meshgrid(*us, indexing="ij")
    out = torch.zeros(tuple(new_dims), dtype=torch.float64)
    i0 = [g.floor().clamp(0, n - 2).to(torch.int64) for g, n in zip((gx, gy, gz), (W, H, D))]
    fr = [g - i for g, i in zip((gx, gy, gz), i0)]
    flat = values.reshape(-1).to(torch.float64)
    for dx in (0, 1):
        wx = fr[0] if dx else 1.0 - fr[0]
        for dy in (0, 1):
            wy = fr[1] if dy else 1.0 - fr[1]
            for dz in (0, 1):
                wz = fr[2] if dz else 1.0 - fr[2]
                idx = ((i0[0] + dx) * H + (i0[1] + dy)) * D + (i0[2] + dz)
                out += wx * wy * wz * flat[idx]
    return out.to(values.dtype)


def _resample_2d(plane: torch.Tensor, new_shape) -> torch.Tensor:
    R, C, h = plane.shape
    us = _resample_1d_coords(new_shape[0], R)
    vs = _resample_1d_coords(new_shape[1], C)
    gu, gv = torch.meshgrid(us, vs, indexing="ij")
    i0 = gu.floor().clamp(0, R - 2).to(torch.int64)
    j0 = gv.floor().clamp(0, C - 2).to(torch.int64)
    fu = (gu - i0)[:, :, None]
    fv = (gv - j0)[:, :, None]
    rows = plane.reshape(-1, h).to(torch.float64)
    idx = i0 * C + j0
    out = ((1 - fu) * (1 - fv) * rows[idx] + (1 - fu) * fv * rows[idx + 1]
           + fu * (1 - fv) * rows[idx + C] + fu * fv * rows[idx + C + 1])
    return out.to(plane.dtype)


def rescale(f: FrameField, new_dims) -> FrameField:
    """Resample density and planes onto the corner lattice of `new_dims`.

    Same bbox, plane resolutions follow the 3x rule. Exact for affine fields
    and the identity when dims are unchanged.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if min(new_dims) < 2:
        raise ValueError("rescale target needs at least 2 nodes per axis")
    sigma = DensityGrid(_resample_3d(f.sigma.values, new_dims), f.sigma.bbox)
    pdims = plane_dims(new_dims)
    parts = [
        _resample_2d(f.planes.planes[s], pdims[s]).reshape(-1, f.h)
        for s in PLANE_NAMES
    ]
    planes = TriPlane(torch.cat(parts, dim=0), pdims, f.h)
    return FrameField(sigma=sigma, planes=planes, frame_index=f.frame_index)
