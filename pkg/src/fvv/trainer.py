"""Grouped multi-frame fitting: photometric + temporal L1 losses, the
two-pass progressive scaling schedule, occupancy refresh, ray filtering and
cross-group initialization. Groups stream one at a time so sequences of any
length train in bounded memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from enum import Enum

import numpy as np
import torch

from . import field as fieldmod
from .decoder import (AdamState, DecoderMLP, MlpGrads, adam_step, init_decoder,
                      posenc_dim)
from .field import FieldGrads, FrameField, OccupancyGrid, PLANE_NAMES
from .geometry import Bbox
from .renderer import backward_rays, camera_rays, default_step, render_rays
from .scene import Dataset


def _halved(dims):
    return tuple(max(2, math.ceil(d / 2)) for d in dims)


def dims_after_halvings(full_dims, k: int):
    d = tuple(full_dims)
    for _ in range(k):
        d = _halved(d)
    return d


class ScheduleAction(Enum):
    UPSCALE_X2 = "upscale_x2"
    DOWNSCALE_TO_BASE = "downscale_to_base"
    UPDATE_OCCUPANCY = "update_occupancy"
    RAY_FILTER = "ray_filter"


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 20
    iters_per_group: int = 40000
    batch_rays: int = 17800
    lr_field: float = 1.5e-1
    lr_mlp: float = 1e-3
    lambda1: float = 1e-3
    lambda2: float = 2e-3
    upscale_pass1: tuple = (1000, 2000, 3000, 4000)
    upscale_pass2: tuple = (9000, 11000, 13000)
    downscale_at: tuple = (1, 7000)
    rayfilter_at: int = 13000
    occ_every: int = 1000
    lambda_th: float = 1e-4
    full_dims: tuple = (120, 120, 120)
    h: int = 10
    posenc_freqs: int = 4
    mlp_width: int = 128
    step_factor: float = 0.5
    density_init: float = -4.0
    bg: tuple = (1.0, 1.0, 1.0)
    train_views: tuple | None = None

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        for name in ("upscale_pass1", "upscale_pass2", "downscale_at"):
            lst = getattr(self, name)
            if any(b <= a for a, b in zip(lst, lst[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if not self.upscale_pass1 or not self.upscale_pass2:
            raise ValueError("both upscale passes need at least one iteration")
        if len(self.downscale_at) != 2:
            raise ValueError("expected exactly two downscale iterations (one per pass)")
        if not (self.downscale_at[0] <= self.upscale_pass1[0]
                and self.upscale_pass1[-1] < self.downscale_at[1] < self.upscale_pass2[0]):
            raise ValueError("downscale iterations must precede their upscale pass")
        if self.rayfilter_at < self.upscale_pass2[-1]:
            raise ValueError("ray filtering must not precede full resolution")

    @property
    def base_dims(self):
        return dims_after_halvings(self.full_dims, len(self.upscale_pass1))

    def scaled(self, iters_per_group: int, **overrides) -> "TrainConfig":
        """Shrink the default 40k-iteration schedule proportionally for toy runs."""
        r = iters_per_group / 40000.0

        def s(x):
            return max(1, round(x * r))

        base = replace(
            self,
            iters_per_group=iters_per_group,
            upscale_pass1=tuple(s(x) for x in self.upscale_pass1),
            upscale_pass2=tuple(s(x) for x in self.upscale_pass2),
            downscale_at=tuple(s(x) for x in self.downscale_at),
            rayfilter_at=s(self.rayfilter_at),
            occ_every=max(1, round(self.occ_every * r)),
        )
        return replace(base, **overrides) if overrides else base


def schedule_action(it: int, cfg: TrainConfig) -> frozenset:
    """Actions to apply at iteration `it` (1-based); pure in (it, cfg).

    Occupancy refreshes fire every occ_every iterations except at the
    ray-filter iteration, where filtering performs its own refresh.
    """
    if not (1 <= it <= cfg.iters_per_group):
        raise ValueError(f"iteration {it} outside [1, {cfg.iters_per_group}]")
    acts = set()
    if it in cfg.upscale_pass1 or it in cfg.upscale_pass2:
        acts.add(ScheduleAction.UPSCALE_X2)
    if it in cfg.downscale_at:
        acts.add(ScheduleAction.DOWNSCALE_TO_BASE)
    if it == cfg.rayfilter_at:
        acts.add(ScheduleAction.RAY_FILTER)
    elif it % cfg.occ_every == 0:
        acts.add(ScheduleAction.UPDATE_OCCUPANCY)
    return frozenset(acts)


def resolution_plan(cfg: TrainConfig) -> dict:
    """Grid dims right after each rescale iteration.

    A downscale reverts to the rung from which the remaining upscales of its
    pass reach full_dims again; each upscale climbs one rung.
    """
    ups = sorted(cfg.upscale_pass1 + cfg.upscale_pass2)
    downs = sorted(cfg.downscale_at)
    plan = {}
    level = len(cfg.upscale_pass1)
    for it in sorted(set(ups) | set(downs)):
        if it in downs:
            nxt = next((d for d in downs if d > it), None)
            level = sum(1 for u in ups if u > it and (nxt is None or u < nxt))
        else:
            level = max(0, level - 1)
        plan[it] = dims_after_halvings(cfg.full_dims, level)
    return plan


@dataclass
class GroupModel:
    fields: list
    mlp: DecoderMLP
    group_index: int
    occ: list = dc_field(default_factory=list)
    log: list = dc_field(default_factory=list, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.fields)

    @property
    def bbox(self) -> Bbox:
        return self.fields[0].bbox

    def refresh_occupancy(self, lambda_th: float) -> None:
        self.occ = [fieldmod.update_occupancy(f.sigma, lambda_th) for f in self.fields]


def parameters_checksum(group: GroupModel) -> tuple:
    """Order-stable fingerprint of every trainable tensor in the group."""
    parts = []
    for f in group.fields:
        parts.append(float(f.sigma.values.to(torch.float64).abs().sum()))
        parts.append(float(f.planes.flat.to(torch.float64).abs().sum()))
    for _, t in sorted(group.mlp.params().items()):
        parts.append(float(t.to(torch.float64).abs().sum()))
    return tuple(parts)


def init_group(prev: GroupModel | None, cfg: TrainConfig, bbox: Bbox,
               group_index: int = 0, n_frames: int | None = None,
               generator: torch.Generator | None = None) -> GroupModel:
    """Fresh group at base resolution: either the documented cold start or a
    copy of the previous group's tail (fields) and decoder (bitwise)."""
    n = n_frames if n_frames is not None else cfg.group_size
    base = cfg.base_dims
    feature_dim = 3 * cfg.h
    enc_dim = posenc_dim(cfg.posenc_freqs)
    if prev is None:
        fields = [
            fieldmod.new_frame_field(base, bbox, h=cfg.h,
                                     frame_index=group_index * cfg.group_size + i,
                                     density_init=cfg.density_init)
            for i in range(n)
        ]
        mlp = init_decoder(feature_dim, enc_dim, width=cfg.mlp_width, generator=generator)
    else:
        if not np.array_equal(prev.bbox.min, bbox.min) or not np.array_equal(prev.bbox.max, bbox.max):
            raise RuntimeError("group bbox differs from the previous group's bbox")
        tail_base = fieldmod.rescale(prev.fields[-1], base)
        fields = []
        for i in range(n):
            f = tail_base.clone()
            f.frame_index = group_index * cfg.group_size + i
            fields.append(f)
        mlp = prev.mlp.clone()
    model = GroupModel(fields=fields, mlp=mlp, group_index=group_index)
    model.refresh_occupancy(cfg.lambda_th)
    return model


# --- losses -----------------------------------------------------------------

@dataclass
class LossValues:
    color: float
    intra: float
    inter: float
    total: float


def _pair_l1(a: FrameField, b: FrameField) -> float:
    val = float((a.sigma.values - b.sigma.values).abs().mean())
    for s in PLANE_NAMES:
        val += float((a.planes.planes[s] - b.planes.planes[s]).abs().mean())
    return val


def intra_penalty(group: GroupModel) -> float:
    return sum(_pair_l1(group.fields[i], group.fields[i + 1]) for i in range(group.n_frames - 1))


def _match_tail(prev_tail: FrameField, like: FrameField, cache: dict | None = None) -> FrameField:
    if prev_tail.bbox.to_json() != like.bbox.to_json():
        raise RuntimeError("previous-group tail has a different bbox")
    dims = like.sigma.dims
    if prev_tail.sigma.dims == dims:
        return prev_tail
    if cache is not None and dims in cache:
        return cache[dims]
    scaled = fieldmod.rescale(prev_tail, dims)
    if cache is not None:
        cache[dims] = scaled
    return scaled


def inter_penalty(group: GroupModel, prev_tail: FrameField | None,
                  cache: dict | None = None) -> float:
    if prev_tail is None:
        return 0.0
    return _pair_l1(_match_tail(prev_tail, group.fields[0], cache), group.fields[0])


def _accumulate_pair_l1_grads(a: FrameField, b: FrameField, ga: FieldGrads | None,
                              gb: FieldGrads | None, weight: float) -> None:
    """d/da, d/db of weight * elementwise-mean L1 penalties (sign subgradient)."""
    ds = torch.sign(a.sigma.values - b.sigma.values)
    w_sigma = weight / a.sigma.values.numel()
    if ga is not None:
        ga.d_sigma.add_(ds, alpha=w_sigma)
    if gb is not None:
        gb.d_sigma.add_(ds, alpha=-w_sigma)
    for s in PLANE_NAMES:
        pa, pb = a.planes.planes[s], b.planes.planes[s]
        dp = torch.sign(pa - pb)
        w_plane = weight / pa.numel()
        if ga is not None:
            ga.plane_view(a.planes, s).add_(dp, alpha=w_plane)
        if gb is not None:
            gb.plane_view(b.planes, s).add_(dp, alpha=-w_plane)


@dataclass
class RayBatch:
    """Rays referencing frames inside one group, with their target pixels."""

    frame_locals: torch.Tensor  # (B,) int
    origins: torch.Tensor       # (B, 3)
    dirs: torch.Tensor          # (B, 3)
    t_near: torch.Tensor
    t_far: torch.Tensor
    targets: torch.Tensor       # (B, 3)


def compute_losses(group: GroupModel, batch: RayBatch, prev_tail: FrameField | None,
                   cfg: TrainConfig) -> LossValues:
    """Photometric MSE plus the intra/inter temporal penalties for one batch."""
    if int(batch.frame_locals.max()) >= group.n_frames or int(batch.frame_locals.min()) < 0:
        raise ValueError("batch references frames outside this group")
    step = default_step(group.fields[0], cfg.step_factor)
    sq_sum = 0.0
    B = batch.frame_locals.shape[0]
    for fl in batch.frame_locals.unique().tolist():
        sel = (batch.frame_locals == fl).nonzero(as_tuple=False).squeeze(1)
        res = render_rays(group.fields[fl], group.occ[fl], group.mlp,
                          batch.origins[sel], batch.dirs[sel],
                          batch.t_near[sel], batch.t_far[sel], step, bg=np.array(cfg.bg))
        sq_sum += float(((res.rgb - batch.targets[sel].to(torch.float64)) ** 2).sum())
    color = sq_sum / (3 * B)
    intra = intra_penalty(group)
    inter = inter_penalty(group, prev_tail)
    return LossValues(color=color, intra=intra, inter=inter,
                      total=color + cfg.lambda1 * intra + cfg.lambda2 * inter)


# --- ray filtering -----------------------------------------------------------

def rays_hit_occupied(origins: torch.Tensor, dirs: torch.Tensor, t_near: torch.Tensor,
                      t_far: torch.Tensor, occ: OccupancyGrid, step: float) -> torch.Tensor:
    """True per ray iff any marching sample lands in an occupied voxel."""
    B = dirs.shape[0]
    out = torch.zeros(B, dtype=torch.bool)
    lo = torch.from_numpy(occ.bbox.min)
    hi = torch.from_numpy(occ.bbox.max)
    chunk = 65536
    for beg in range(0, B, chunk):
        end = min(beg + chunk, B)
        tn, tf = t_near[beg:end], t_far[beg:end]
        n_steps = torch.floor((tf - tn).clamp(min=0.0) / step + 0.5).to(torch.int64)
        M = int(n_steps.max()) if end > beg else 0
        if M == 0:
            continue
        offs = (torch.arange(M, dtype=torch.float64) + 0.5) * step
        ts = tn[:, None] + offs[None, :]
        live = torch.arange(M)[None, :] < n_steps[:, None]
        pts = origins[beg:end, None, :] + ts[:, :, None] * dirs[beg:end, None, :]
        pts = torch.minimum(torch.maximum(pts, lo), hi)
        occ_hits = fieldmod.occupied_at(occ, pts.reshape(-1, 3)).reshape(end - beg, M)
        out[beg:end] = (occ_hits & live).any(dim=1)
    return out


def filter_rays(rays, occ: OccupancyGrid, step: float):
    """List-of-Ray convenience wrapper over rays_hit_occupied."""
    if not rays:
        return []
    origins = torch.tensor(np.stack([r.origin for r in rays]), dtype=torch.float64)
    dirs = torch.tensor(np.stack([r.dir for r in rays]), dtype=torch.float64)
    tn = torch.tensor([r.t_near if r.valid else 0.0 for r in rays], dtype=torch.float64)
    tf = torch.tensor([r.t_far if r.valid else 0.0 for r in rays], dtype=torch.float64)
    keep = rays_hit_occupied(origins, dirs, tn, tf, occ, step)
    return [r for r, k in zip(rays, keep.tolist()) if k]


# --- the training loop --------------------------------------------------------

class _RayStore:
    """Precomputed per-view rays and per-frame targets for one group."""

    def __init__(self, dataset: Dataset, frame_range, views):
        cams = [dataset.cameras[v] for v in views]
        dir_list, tn_list, tf_list, org_list = [], [], [], []
        for cam in cams:
            dirs, tn, tf, ok = camera_rays(cam, dataset.bbox)
            dir_list.append(dirs)
            tn_list.append(np.where(ok, tn, 0.0))
            tf_list.append(np.where(ok, tf, 0.0))
            org_list.append(np.broadcast_to(cam.position, dirs.shape))
        self.dirs = torch.tensor(np.concatenate(dir_list), dtype=torch.float64)
        self.t_near = torch.tensor(np.concatenate(tn_list), dtype=torch.float64)
        self.t_far = torch.tensor(np.concatenate(tf_list), dtype=torch.float64)
        self.origins = torch.tensor(np.concatenate(org_list).copy(), dtype=torch.float64)
        self.n_rays = self.dirs.shape[0]
        self.targets = []
        for fi in frame_range:
            imgs = [dataset.frames[fi][v].reshape(-1, 3) for v in views]
            self.targets.append(torch.tensor(np.concatenate(imgs), dtype=torch.float64))


def train_group(dataset: Dataset, g: int, prev: GroupModel | None, cfg: TrainConfig,
                seed: int = 0) -> GroupModel:
    """Optimize one group of consecutive frames; deterministic given the seed."""
    n_total = dataset.n_frames
    start = g * cfg.group_size
    stop = min(start + cfg.group_size, n_total)
    if start >= n_total or stop <= start:
        raise ValueError(f"dataset has {n_total} frames; group {g} is out of range")
    frame_range = range(start, stop)
    n = len(frame_range)

    gen = torch.Generator().manual_seed(seed * 100003 + g)
    model = init_group(prev, cfg, dataset.bbox, group_index=g, n_frames=n, generator=gen)
    prev_tail = prev.fields[-1].clone() if prev is not None else None
    tail_cache: dict = {}

    views = list(cfg.train_views) if cfg.train_views is not None else list(range(len(dataset.cameras)))
    store = _RayStore(dataset, frame_range, views)
    pools = [torch.arange(store.n_rays) for _ in range(n)]
    bg = np.asarray(cfg.bg, dtype=np.float64)

    plan = resolution_plan(cfg)
    step = default_step(model.fields[0], cfg.step_factor)
    fgrads = [FieldGrads.zeros_like(f) for f in model.fields]
    field_states = [AdamState() for _ in range(n)]
    mlp_state = AdamState()

    def log_inter_full() -> float:
        if prev_tail is None:
            return 0.0
        f0 = model.fields[0]
        if f0.sigma.dims != prev_tail.sigma.dims:
            f0 = fieldmod.rescale(f0, prev_tail.sigma.dims)
        return _pair_l1(f0, prev_tail)

    inter_full_start = log_inter_full()

    for it in range(1, cfg.iters_per_group + 1):
        acts = schedule_action(it, cfg)
        rescaled = False
        if ScheduleAction.DOWNSCALE_TO_BASE in acts or ScheduleAction.UPSCALE_X2 in acts:
            new_dims = plan[it]
            if new_dims != model.fields[0].sigma.dims:
                model.fields = [fieldmod.rescale(f, new_dims) for f in model.fields]
                fgrads = [FieldGrads.zeros_like(f) for f in model.fields]
                field_states = [AdamState() for _ in range(n)]
                step = default_step(model.fields[0], cfg.step_factor)
                rescaled = True
        if rescaled or ScheduleAction.UPDATE_OCCUPANCY in acts or ScheduleAction.RAY_FILTER in acts:
            model.refresh_occupancy(cfg.lambda_th)
        if ScheduleAction.RAY_FILTER in acts:
            for fl in range(n):
                keep = rays_hit_occupied(store.origins, store.dirs, store.t_near,
                                         store.t_far, model.occ[fl], step)
                kept = keep.nonzero(as_tuple=False).squeeze(1)
                if kept.numel() > 0:
                    pools[fl] = kept

        frame_choice = torch.randint(0, n, (cfg.batch_rays,), generator=gen)
        mlp_grads = MlpGrads.zeros_like(model.mlp)
        for fg in fgrads:
            fg.d_sigma.zero_()
            fg.d_planes_flat.zero_()

        sq_sum = 0.0
        for fl in range(n):
            count = int((frame_choice == fl).sum())
            if count == 0:
                continue
            pick = torch.randint(0, pools[fl].numel(), (count,), generator=gen)
            ids = pools[fl][pick]
            res = render_rays(model.fields[fl], model.occ[fl], model.mlp,
                              store.origins[ids], store.dirs[ids],
                              store.t_near[ids], store.t_far[ids], step, bg=bg)
            err = res.rgb - store.targets[fl][ids]
            sq_sum += float((err**2).sum())
            d_rgb = err * (2.0 / (3 * cfg.batch_rays))
            backward_rays(model.fields[fl], model.mlp, res.cache, d_rgb,
                          fgrads[fl], mlp_grads)
        color = sq_sum / (3 * cfg.batch_rays)

        intra = 0.0
        if cfg.lambda1 != 0.0 and n > 1:
            for i in range(n - 1):
                intra += _pair_l1(model.fields[i], model.fields[i + 1])
                _accumulate_pair_l1_grads(model.fields[i], model.fields[i + 1],
                                          fgrads[i], fgrads[i + 1], cfg.lambda1)
        inter = 0.0
        if cfg.lambda2 != 0.0 and prev_tail is not None:
            tail = _match_tail(prev_tail, model.fields[0], tail_cache)
            inter = _pair_l1(model.fields[0], tail)
            _accumulate_pair_l1_grads(model.fields[0], tail, fgrads[0], None, cfg.lambda2)

        for fl in range(n):
            adam_step(model.fields[fl].param_tensors(), fgrads[fl].tensors(),
                      field_states[fl], cfg.lr_field)
        adam_step(model.mlp.params(), {k: v for k, v in mlp_grads.tensors().items()},
                  mlp_state, cfg.lr_mlp)

        model.log.append({
            "iter": it, "color": color, "intra": intra, "inter": inter,
            "total": color + cfg.lambda1 * intra + cfg.lambda2 * inter,
            "dims": list(model.fields[0].sigma.dims),
        })

    model.refresh_occupancy(cfg.lambda_th)
    model.log.append({
        "inter_full_start": inter_full_start,
        "inter_full_end": log_inter_full(),
    })
    return model


def train_sequence(dataset: Dataset, cfg: TrainConfig, n_groups: int | None = None,
                   seed: int = 0, on_group_done=None) -> list:
    """Train consecutive groups over the dataset, streaming forward in time."""
    if n_groups is None:
        n_groups = math.ceil(dataset.n_frames / cfg.group_size)
    groups = []
    prev = None
    for g in range(n_groups):
        model = train_group(dataset, g, prev, cfg, seed=seed)
        groups.append(model)
        if on_group_done is not None:
            on_group_done(g, model)
        prev = model
    return groups
