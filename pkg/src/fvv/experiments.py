"""The repo's standard toy experiment: scene, cameras, training config, and
cached baseline runs that the acceptance suite and scripts share.

Everything is pinned (seed included) so the quantitative gates are
reproducible: two drifting blobs, 8 frames, 14 views (12 train / 2 held
out) at 64x64, a 48^3 grid with 144^2 planes, groups of 4, 4000 iterations
per group on the proportionally scaled two-pass schedule.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import codec, renderer, scene as scenemod, service
from .evalkit import psnr
from .scene import FIXTURE_HOLDOUT_VIEWS, fixture_cameras, fixture_scene
from .trainer import GroupModel, TrainConfig, train_group

FIXTURE_SEED = 0
FIXTURE_IMAGE_SIZE = 64
FIXTURE_FULL_DIMS = (48, 48, 48)
FIXTURE_GROUP_SIZE = 4
FIXTURE_ITERS = 4000
FIXTURE_BATCH = 512


def fixture_train_views(n_views: int = 14) -> tuple:
    return tuple(v for v in range(n_views) if v not in FIXTURE_HOLDOUT_VIEWS)


def fixture_oracle_step(dims=FIXTURE_FULL_DIMS) -> float:
    extent = float(fixture_scene(1).bbox.extent[0])
    return (extent / (dims[0] - 1)) / 4.0  # quarter of the trained voxel edge


def fixture_train_config(lambda1: float = 1e-3) -> TrainConfig:
    return TrainConfig(
        group_size=FIXTURE_GROUP_SIZE,
        batch_rays=FIXTURE_BATCH,
        full_dims=FIXTURE_FULL_DIMS,
        lambda1=lambda1,
        train_views=fixture_train_views(),
    ).scaled(FIXTURE_ITERS)


def fixture_dataset(cache_root: Path, n_frames: int = 8) -> scenemod.Dataset:
    sc = fixture_scene(n_frames)
    cams = fixture_cameras(image_size=FIXTURE_IMAGE_SIZE)
    key = hashlib.sha256(json.dumps(
        [sc.to_json(), [c.to_json() for c in cams], fixture_oracle_step()],
        sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_root) / f"dataset_{key}"
    if (path / "manifest.json").exists():
        return scenemod.load_dataset(path)
    ds = scenemod.render_fixture_dataset(sc, cams, fixture_oracle_step())
    path.parent.mkdir(parents=True, exist_ok=True)
    scenemod.write_dataset(ds, path)
    return ds


def _config_key(cfg: TrainConfig, seed: int) -> str:
    blob = json.dumps({"cfg": asdict(cfg), "seed": seed}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def holdout_psnr(groups, dataset, views=FIXTURE_HOLDOUT_VIEWS, mlps=None,
                 fields_by_frame=None) -> dict:
    """Mean held-out PSNR of trained groups (or substituted decoded fields)."""
    from .field import update_occupancy

    per_render = []
    frame = 0
    for gi, gm in enumerate(groups):
        fields = gm.fields if fields_by_frame is None else None
        for local, f in enumerate(gm.fields):
            field = f if fields_by_frame is None else fields_by_frame[frame]
            mlp = gm.mlp if mlps is None else mlps[gi]
            occ = update_occupancy(field.sigma, 1e-4)
            step = renderer.default_step(field)
            for v in views:
                img = renderer.render_image(dataset.cameras[v], field, occ, mlp, step)
                per_render.append({
                    "frame": frame, "view": v,
                    "psnr": psnr(img, dataset.frames[frame][v]),
                })
            frame += 1
    return {"mean": float(np.mean([r["psnr"] for r in per_render])), "per_render": per_render}


def train_fixture_model(cache_root, lambda1: float = 1e-3, seed: int = FIXTURE_SEED,
                        force: bool = False):
    """Train (or load from cache) the pinned baseline model.

    Returns (groups, info). info records wall time and held-out PSNR of the
    run that produced the cached checkpoints.
    """
    cache_root = Path(cache_root)
    cfg = fixture_train_config(lambda1=lambda1)
    key = _config_key(cfg, seed)
    root = cache_root / f"fixture_{key}"
    info_path = root / "baseline.json"
    ds = fixture_dataset(cache_root)
    if info_path.exists() and not force:
        groups = []
        for g in range(2):
            fields, mlp, meta = codec.load_raw_group(root / f"group_{g:03d}")
            log = json.loads((root / f"group_{g:03d}" / "log.json").read_text())
            groups.append(GroupModel(fields=fields, mlp=mlp, group_index=g, log=log))
        for gm in groups:
            gm.refresh_occupancy(cfg.lambda_th)
        return groups, json.loads(info_path.read_text())

    t0 = time.time()
    groups = []
    prev = None
    for g in range(2):
        prev = train_group(ds, g, prev, cfg, seed=seed)
        groups.append(prev)
    wall = time.time() - t0
    quality = holdout_psnr(groups, ds)
    root.mkdir(parents=True, exist_ok=True)
    for g, gm in enumerate(groups):
        codec.save_raw_group(root / f"group_{g:03d}", gm.fields, gm.mlp,
                             group_index=g, log=gm.log)
    info = {
        "seed": seed, "lambda1": lambda1, "wall_seconds": wall,
        "holdout_psnr": quality["mean"], "per_render": quality["per_render"],
        "config_key": key,
    }
    info_path.write_text(json.dumps(info, indent=1))
    return groups, info
