"""Deferred-shading volume renderer.

Features (not radiance) are alpha-composited along each ray; the decoder MLP
then runs once per ray on the accumulated feature. Samples whose occupancy
voxel is empty are skipped before any grid fetch. The backward pass is exact
reverse mode through compositing, the alpha/transmittance chain, softplus and
the interpolation scatter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import field as fieldmod
from .decoder import DecoderMLP, MlpGrads, mlp_backward, mlp_forward, posenc
from .field import FieldGrads, FrameField, OccupancyGrid
from .geometry import Bbox, ray_aabb
from .scene import WHITE, Camera


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float
    t_far: float
    valid: bool = True


def generate_ray(cam: Camera, px: float, py: float, bbox: Bbox) -> Ray:
    """Backproject a continuous pixel coordinate and clip it to the box."""
    if not (0.0 <= px <= cam.width and 0.0 <= py <= cam.height):
        raise ValueError(f"pixel ({px}, {py}) outside image")
    d = cam.pixel_dirs(np.array([px]), np.array([py]))[0]
    tn, tf, ok = ray_aabb(cam.position[None, :], d[None, :], bbox)
    return Ray(origin=cam.position.copy(), dir=d, t_near=float(tn[0]), t_far=float(tf[0]),
               valid=bool(ok[0]))


def camera_rays(cam: Camera, bbox: Bbox):
    """Rays for every pixel center, row-major. Returns (dirs, t_near, t_far, valid)."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    dirs = cam.pixel_dirs((xs + 0.5).reshape(-1), (ys + 0.5).reshape(-1))
    tn, tf, ok = ray_aabb(cam.position[None, :], dirs, bbox)
    return dirs, tn, tf, ok


def default_step(f: FrameField, factor: float = 0.5) -> float:
    """Marching step tied to the current resolution: factor x smallest voxel edge."""
    dims = np.array(f.sigma.dims, dtype=np.float64)
    edges = f.bbox.extent / (dims - 1.0)
    return float(edges.min() * factor)


@dataclass
class RenderCache:
    """Everything backward needs, for a batch of rays."""

    n_rays: int
    max_samples: int
    kept_flat: torch.Tensor   # (S,) indices into the dense (B*M) sample grid
    ray_ids: torch.Tensor     # (S,)
    idx8: torch.Tensor
    w8: torch.Tensor
    idx12: torch.Tensor
    w12: torch.Tensor
    sigma: torch.Tensor       # (S,) raw logits at kept samples
    feat: torch.Tensor        # (S, 3h) features at kept samples
    alpha: torch.Tensor       # (B, M) dense, zero at skipped samples
    t_excl: torch.Tensor      # (B, M) exclusive transmittance
    weights: torch.Tensor     # (B, M)
    acc: torch.Tensor         # (B,)
    f_tilde: torch.Tensor     # (B, 3h)
    mlp_cache: object
    rgb_mlp: torch.Tensor     # (B, 3) decoder output before compositing
    bg: torch.Tensor
    step: float


@dataclass
class RenderResult:
    rgb: torch.Tensor       # (B, 3) composited
    acc: torch.Tensor       # (B,)
    f_tilde: torch.Tensor   # (B, 3h)
    cache: RenderCache


@dataclass
class RayRender:
    rgb: np.ndarray
    f_tilde: np.ndarray
    acc: float
    record: RenderCache | None


def render_rays(f: FrameField, occ: OccupancyGrid, mlp: DecoderMLP,
                origins: torch.Tensor, dirs: torch.Tensor,
                t_near: torch.Tensor, t_far: torch.Tensor,
                step: float, bg=WHITE) -> RenderResult:
    if step <= 0:
        raise ValueError("step must be positive")
    B = dirs.shape[0]
    h3 = 3 * f.h
    bg_t = torch.as_tensor(np.asarray(bg, dtype=np.float64))
    lengths = (t_far - t_near).clamp(min=0.0)
    n_steps = torch.floor(lengths / step + 0.5).to(torch.int64)
    M = int(n_steps.max()) if B else 0

    if M == 0:
        f_tilde = torch.zeros(B, h3, dtype=torch.float64)
        enc = posenc(dirs, L=(mlp.enc_dim - 3) // 6)
        rgb_mlp, mcache = mlp_forward(mlp, f_tilde, enc)
        acc = torch.zeros(B, dtype=torch.float64)
        out = bg_t[None, :].expand(B, 3).clone()
        cache = RenderCache(
            n_rays=B, max_samples=0,
            kept_flat=torch.zeros(0, dtype=torch.int64), ray_ids=torch.zeros(0, dtype=torch.int64),
            idx8=torch.zeros(0, 8, dtype=torch.int64), w8=torch.zeros(0, 8, dtype=torch.float64),
            idx12=torch.zeros(0, 12, dtype=torch.int64), w12=torch.zeros(0, 12, dtype=torch.float64),
            sigma=torch.zeros(0, dtype=torch.float64), feat=torch.zeros(0, h3, dtype=torch.float64),
            alpha=torch.zeros(B, 0, dtype=torch.float64), t_excl=torch.ones(B, 0, dtype=torch.float64),
            weights=torch.zeros(B, 0, dtype=torch.float64), acc=acc, f_tilde=f_tilde,
            mlp_cache=mcache, rgb_mlp=rgb_mlp, bg=bg_t, step=step,
        )
        return RenderResult(rgb=out, acc=acc, f_tilde=f_tilde, cache=cache)

    offs = (torch.arange(M, dtype=torch.float64) + 0.5) * step
    ts = t_near[:, None] + offs[None, :]
    live = torch.arange(M)[None, :] < n_steps[:, None]
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    lo = torch.from_numpy(f.bbox.min)
    hi = torch.from_numpy(f.bbox.max)
    pts = torch.minimum(torch.maximum(pts, lo), hi)

    live_flat = live.reshape(-1)
    flat_positions = live_flat.nonzero(as_tuple=False).squeeze(1)
    pts_live = pts.reshape(-1, 3)[flat_positions]
    keep = fieldmod.occupied_at(occ, pts_live)
    kept_flat = flat_positions[keep]
    pts_k = pts_live[keep]
    ray_ids = kept_flat // M

    idx8, w8 = fieldmod.density_interp(f.sigma, pts_k)
    sigma = fieldmod.gather_density(f.sigma, idx8, w8)
    soft = F.softplus(sigma)
    alpha_k = 1.0 - torch.exp(-soft * step)

    alpha = torch.zeros(B * M, dtype=torch.float64)
    alpha[kept_flat] = alpha_k
    alpha = alpha.reshape(B, M)
    trans = torch.cumprod(1.0 - alpha, dim=1)
    t_excl = torch.cat([torch.ones(B, 1, dtype=torch.float64), trans[:, :-1]], dim=1)
    weights = t_excl * alpha
    acc = weights.sum(dim=1)

    idx12, w12 = fieldmod.plane_interp(f.planes, pts_k, f.bbox)
    feat = fieldmod.gather_features(f.planes, idx12, w12)
    w_k = weights.reshape(-1)[kept_flat]
    f_tilde = torch.zeros(B, h3, dtype=torch.float64)
    f_tilde.index_add_(0, ray_ids, w_k[:, None] * feat)

    enc = posenc(dirs, L=(mlp.enc_dim - 3) // 6)
    rgb_mlp, mcache = mlp_forward(mlp, f_tilde, enc)
    out = rgb_mlp * acc[:, None] + bg_t[None, :] * (1.0 - acc[:, None])

    cache = RenderCache(
        n_rays=B, max_samples=M, kept_flat=kept_flat, ray_ids=ray_ids,
        idx8=idx8, w8=w8, idx12=idx12, w12=w12, sigma=sigma, feat=feat,
        alpha=alpha, t_excl=t_excl, weights=weights, acc=acc, f_tilde=f_tilde,
        mlp_cache=mcache, rgb_mlp=rgb_mlp, bg=bg_t, step=step,
    )
    return RenderResult(rgb=out, acc=acc, f_tilde=f_tilde, cache=cache)


def backward_rays(f: FrameField, mlp: DecoderMLP, cache: RenderCache,
                  d_rgb: torch.Tensor, field_grads: FieldGrads,
                  mlp_grads: MlpGrads) -> None:
    """Accumulate gradients of a scalar loss (with upstream d_rgb) into buffers."""
    d_rgb = d_rgb.to(torch.float64)
    acc = cache.acc
    d_c = d_rgb * acc[:, None]
    d_acc = ((cache.rgb_mlp - cache.bg[None, :]) * d_rgb).sum(dim=1)

    g, d_ftilde, _ = mlp_backward(mlp, cache.mlp_cache, d_c)
    mlp_grads.add_(g)

    if cache.kept_flat.numel() == 0:
        return

    B, M = cache.n_rays, cache.max_samples
    w_k = cache.weights.reshape(-1)[cache.kept_flat]
    d_w_k = (cache.feat * d_ftilde[cache.ray_ids]).sum(dim=1) + d_acc[cache.ray_ids]

    d_w = torch.zeros(B * M, dtype=torch.float64)
    d_w[cache.kept_flat] = d_w_k
    d_w = d_w.reshape(B, M)
    u = cache.weights * d_w
    suffix = u.flip(1).cumsum(1).flip(1) - u  # sum over later samples of the same ray
    t_next = cache.t_excl * (1.0 - cache.alpha)
    d_soft = cache.step * (t_next * d_w - suffix)
    d_sigma = d_soft.reshape(-1)[cache.kept_flat] * torch.sigmoid(cache.sigma)

    fieldmod.scatter_density_batch(field_grads.d_sigma, cache.idx8, cache.w8, d_sigma)
    d_feat = w_k[:, None] * d_ftilde[cache.ray_ids]
    fieldmod.scatter_features_batch(field_grads.d_planes_flat, cache.idx12, cache.w12,
                                    d_feat, f.h)


def render_ray(ray: Ray, f: FrameField, occ: OccupancyGrid, mlp: DecoderMLP,
               step: float, bg=WHITE) -> RayRender:
    origins = torch.as_tensor(ray.origin, dtype=torch.float64)[None, :]
    dirs = torch.as_tensor(ray.dir, dtype=torch.float64)[None, :]
    tn = torch.tensor([ray.t_near if ray.valid else 0.0], dtype=torch.float64)
    tf = torch.tensor([ray.t_far if ray.valid else 0.0], dtype=torch.float64)
    res = render_rays(f, occ, mlp, origins, dirs, tn, tf, step, bg)
    return RayRender(
        rgb=res.rgb[0].numpy(), f_tilde=res.f_tilde[0].numpy(),
        acc=float(res.acc[0]), record=res.cache,
    )


def backward_ray(rr: RayRender, d_rgb, f: FrameField, mlp: DecoderMLP,
                 field_grads: FieldGrads, mlp_grads: MlpGrads) -> None:
    if rr.record is None:
        raise RuntimeError("RayRender has no sample record; re-render before backward")
    d = torch.as_tensor(np.asarray(d_rgb, dtype=np.float64)).reshape(1, 3)
    backward_rays(f, mlp, rr.record, d, field_grads, mlp_grads)


def render_image(cam: Camera, f: FrameField, occ: OccupancyGrid, mlp: DecoderMLP,
                 step: float, bg=WHITE, chunk: int = 8192) -> np.ndarray:
    """Per-pixel deferred render; deterministic for fixed inputs."""
    dirs, tn, tf, ok = camera_rays(cam, f.bbox)
    n = dirs.shape[0]
    out = np.empty((n, 3))
    origin = torch.as_tensor(cam.position, dtype=torch.float64)
    for lo_i in range(0, n, chunk):
        hi_i = min(lo_i + chunk, n)
        d = torch.as_tensor(dirs[lo_i:hi_i])
        tns = torch.as_tensor(np.where(ok[lo_i:hi_i], tn[lo_i:hi_i], 0.0))
        tfs = torch.as_tensor(np.where(ok[lo_i:hi_i], tf[lo_i:hi_i], 0.0))
        res = render_rays(f, occ, mlp, origin[None, :].expand(hi_i - lo_i, 3), d, tns, tfs,
                          step, bg)
        out[lo_i:hi_i] = res.rgb.numpy()
    return np.clip(out.reshape(cam.height, cam.width, 3), 0.0, 1.0)
