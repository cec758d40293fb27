"""Command-line entry points: synth, train, pack, render, eval, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import codec, evalkit, field as fieldmod, renderer, scene as scenemod, service
from .trainer import GroupModel, TrainConfig, train_sequence


def _parse_frames(spec: str):
    a, b = spec.split("..")
    return int(a), int(b)


def _load_scene_spec(path):
    spec = json.loads(Path(path).read_text())
    sc = scenemod.AnalyticScene.from_json(spec)
    cams = []
    for ring in spec["rings"]:
        cams.extend(scenemod.build_camera_ring(
            n_views=ring["n_views"], radius=ring["radius"], target=ring.get("target", (0, 0, 0)),
            height=ring["height"], image_width=ring["image_width"],
            image_height=ring["image_height"], focal=ring["focal"],
            angle_offset=ring.get("angle_offset", 0.0),
        ))
    return sc, cams, spec.get("oracle_step", 0.0106)


def cmd_synth(args):
    sc, cams, step = _load_scene_spec(args.scene)
    print(f"rendering {sc.n_frames} frames x {len(cams)} views (oracle step {step})")
    ds = scenemod.render_fixture_dataset(sc, cams, step)
    scenemod.write_dataset(ds, args.out)
    print(f"wrote dataset to {args.out}")


def _config_from_json(path) -> TrainConfig:
    raw = json.loads(Path(path).read_text()) if path else {}
    iters = raw.pop("iters_per_group", None)
    scale_schedule = raw.pop("scale_schedule", False)
    for k in ("upscale_pass1", "upscale_pass2", "downscale_at", "full_dims", "bg", "train_views"):
        if k in raw and raw[k] is not None:
            raw[k] = tuple(raw[k])
    cfg = TrainConfig(**raw)
    if iters is not None:
        if scale_schedule:
            cfg = cfg.scaled(iters)
        else:
            from dataclasses import replace
            cfg = replace(cfg, iters_per_group=iters)
    return cfg


def cmd_train(args):
    ds = scenemod.load_dataset(args.data)
    if args.frames:
        a, b = _parse_frames(args.frames)
        ds = scenemod.Dataset(cameras=ds.cameras, frames=ds.frames[a:b], bbox=ds.bbox)
    cfg = _config_from_json(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def save(g, model):
        last = model.log[-1] if model.log else {}
        done = [e for e in model.log if "color" in e]
        msg = f"group {g}: final color loss {done[-1]['color']:.5f}" if done else f"group {g}"
        print(msg)
        codec.save_raw_group(out / f"group_{g:03d}", model.fields, model.mlp,
                             group_index=g, log=model.log)

    train_sequence(ds, cfg, seed=args.seed, on_group_done=save)
    (out / "train_config.json").write_text(json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}, indent=1))
    print(f"checkpoints in {out}")


def _load_groups(ckpt_dir):
    root = Path(ckpt_dir)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("group_"))
    if not dirs:
        raise SystemExit(f"no group_* checkpoints under {ckpt_dir}")
    groups = []
    for d in dirs:
        fields, mlp, meta = codec.load_raw_group(d)
        groups.append(GroupModel(fields=fields, mlp=mlp, group_index=meta["group_index"]))
    return groups


def cmd_pack(args):
    groups = _load_groups(args.ckpt)
    settings = codec.EncoderSettings(backend=args.backend, crf=args.crf,
                                     pixel_format=args.pixfmt)
    blob = codec.pack_container(groups, settings)
    Path(args.out).write_bytes(blob)
    bd = evalkit.size_breakdown(blob)
    print(f"wrote {args.out}: {len(blob)} bytes")
    print(evalkit.breakdown_csv(bd), end="")


def _camera_from_pose_file(path, width, height):
    pose = json.loads(Path(path).read_text())
    if "pose" in pose:
        return service.camera_from_pose(pose["pose"], pose.get("width", width),
                                        pose.get("height", height))
    return scenemod.Camera.from_json(pose)


def cmd_render(args):
    state = service.load_serve_state(args.container)
    cam = _camera_from_pose_file(args.pose, args.width, args.height)
    img = service.render_frame(state, args.frame, cam)
    Path(args.out).write_bytes(service.encode_png(img))
    print(f"wrote {args.out}")


def cmd_eval(args):
    data = Path(args.container).read_bytes()
    state = service.load_serve_state(args.container)
    ds = scenemod.load_dataset(args.data)
    views = [int(v) for v in args.views.split(",")] if args.views else list(range(len(ds.cameras)))
    n = min(state.frame_count, ds.n_frames)
    rows = ["frame,view,psnr,ssim"]
    pvals, svals = [], []
    for fi in range(n):
        for v in views:
            img = service.render_frame(state, fi, ds.cameras[v])
            ref = ds.frames[fi][v]
            p = evalkit.psnr(img, ref)
            s = evalkit.ssim(img, ref)
            pvals.append(p)
            svals.append(s)
            rows.append(f"{fi},{v},{p:.6f},{s:.6f}")
    Path(args.out).write_text("\n".join(rows) + "\n")
    bd = evalkit.size_breakdown(data)
    Path(str(args.out) + ".breakdown.csv").write_text(evalkit.breakdown_csv(bd))
    print(f"mean PSNR {np.mean(pvals):.3f} dB, mean SSIM {np.mean(svals):.4f} "
          f"over {len(pvals)} renders; container {len(data)} bytes")
    print(f"metrics in {args.out}, size breakdown in {args.out}.breakdown.csv")


def cmd_serve(args):
    service.serve(args.container, args.port)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fvv", description="free-viewpoint video toolkit")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="render a synthetic multi-view dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="grouped training over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", default=None, help="A..B frame range")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("pack", help="compress checkpoints into one container")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crf", type=int, default=28)
    p.add_argument("--backend", choices=["external", "builtin"], default="builtin")
    p.add_argument("--pixfmt", choices=["gray12le", "gray8-packed"], default="gray12le")
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("render", help="render one frame from a container")
    p.add_argument("--container", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--pose", required=True, help="JSON camera or {pose:[12], width, height}")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=service.DEFAULT_IMAGE_SIZE)
    p.add_argument("--height", type=int, default=service.DEFAULT_IMAGE_SIZE)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM against a dataset plus size breakdown")
    p.add_argument("--container", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--views", default=None, help="comma-separated view ids")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="HTTP render service for the viewer")
    p.add_argument("--container", required=True)
    p.add_argument("--port", type=int, default=8787)
    p.set_defaults(fn=cmd_serve)

    args = ap.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
