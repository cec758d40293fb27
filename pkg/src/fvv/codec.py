"""Compression pipeline and container format.

Fixed stage order per stream: quantize -> cull (density only) -> mosaic ->
video-encode. Two encoder backends: an external video encoder driven over
pipes (HEVC-style, CRF rate control) and a builtin lossless fallback
(per-frame delta + zlib) that guarantees bit-exact decode.

Container layout (little-endian): magic ``FVVC``, version u16, u32-length
JSON metadata, four u64-length streams (density, xy, xz, yz), then one MLP
block per group (u32 group index; per tensor: f32 min, f32 max, u16 codes).
"""

from __future__ import annotations

import json
import math
import os
import struct
import subprocess
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .decoder import DecoderMLP
from .field import (DEFAULT_CHANNELS, DensityGrid, FrameField, OccupancyGrid,
                    PLANE_NAMES, TriPlane, plane_dims, update_occupancy)
from .geometry import Bbox

MAGIC = b"FVVC"
VERSION = 1
ENCODER_ENV = "FVV_ENCODER"
MLP_TENSOR_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


class CodecError(Exception):
    """Encoder/decoder failure or malformed container."""


class EncoderNotFoundError(CodecError):
    """The external video encoder binary is not configured or not present."""


@dataclass(frozen=True)
class QuantSpec:
    lo: float
    hi: float
    bits: int = 12

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("quantization range must have lo < hi")
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must be in [1, 16]")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def half_step(self) -> float:
        return (self.hi - self.lo) / (2 * self.levels)


DENSITY_QUANT = QuantSpec(-5.0, 30.0)
FEATURE_QUANT = QuantSpec(-20.0, 20.0)


def quantize(values, spec: QuantSpec) -> np.ndarray:
    """Clamp to [lo, hi], normalize, round half-up to `bits`-bit codes."""
    v = np.asarray(values, dtype=np.float64)
    unit = np.clip((v - spec.lo) / (spec.hi - spec.lo), 0.0, 1.0)
    return np.floor(unit * spec.levels + 0.5).astype(np.uint16)


def dequantize(codes, spec: QuantSpec) -> np.ndarray:
    q = np.asarray(codes, dtype=np.float64)
    return spec.lo + q / spec.levels * (spec.hi - spec.lo)


def cull_empty(q_density: np.ndarray, mask) -> np.ndarray:
    """Zero the codes of voxels outside the occupancy mask."""
    bits = mask.bits.numpy() if isinstance(mask, OccupancyGrid) else np.asarray(mask)
    if bits.shape != q_density.shape:
        raise ValueError(f"mask shape {bits.shape} != grid shape {q_density.shape}")
    out = q_density.copy()
    out[~bits.astype(bool)] = 0
    return out


@dataclass(frozen=True)
class MosaicLayout:
    tile_rows: int
    tile_cols: int

    @property
    def capacity(self) -> int:
        return self.tile_rows * self.tile_cols


def default_plane_layout(h: int) -> MosaicLayout:
    # 2x5 for the standard 10 channels: wide tiles suit codec block scans
    if h == 10:
        return MosaicLayout(2, 5)
    cols = math.ceil(math.sqrt(h))
    return MosaicLayout(math.ceil(h / cols), cols)


def default_density_layout(depth: int) -> MosaicLayout:
    cols = math.ceil(math.sqrt(depth))
    return MosaicLayout(math.ceil(depth / cols), cols)


def mosaic(plane: np.ndarray, layout: MosaicLayout) -> np.ndarray:
    """Tile an (R, C, h) channel stack into one (rows*R, cols*C) image,
    channel k at tile (k // cols, k % cols); surplus tiles stay zero."""
    R, C, h = plane.shape
    if layout.capacity < h:
        raise ValueError(f"layout {layout} cannot hold {h} channels")
    img = np.zeros((layout.tile_rows * R, layout.tile_cols * C), dtype=plane.dtype)
    for k in range(h):
        r, c = divmod(k, layout.tile_cols)
        img[r * R:(r + 1) * R, c * C:(c + 1) * C] = plane[:, :, k]
    return img


def demosaic(img: np.ndarray, layout: MosaicLayout, shape) -> np.ndarray:
    R, C, h = shape
    if img.shape != (layout.tile_rows * R, layout.tile_cols * C):
        raise ValueError(f"mosaic image shape {img.shape} does not match layout/tile size")
    out = np.empty((R, C, h), dtype=img.dtype)
    for k in range(h):
        r, c = divmod(k, layout.tile_cols)
        out[:, :, k] = img[r * R:(r + 1) * R, c * C:(c + 1) * C]
    return out


# --- stream encoding ---------------------------------------------------------

@dataclass(frozen=True)
class EncoderSettings:
    backend: str = "builtin"          # "builtin" (lossless) or "external"
    crf: int = 28
    pixel_format: str = "gray12le"    # or "gray8-packed" when 12-bit is unsupported
    intra_period: int = 120
    fps: int = 30
    encoder_path: str | None = None

    def __post_init__(self):
        if self.backend not in ("builtin", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "external" and not 0 <= self.crf <= 51:
            raise ValueError("crf must be in [0, 51]")
        if self.pixel_format not in ("gray12le", "gray8-packed"):
            raise ValueError(f"unsupported pixel format {self.pixel_format!r}")

    def resolve_encoder(self) -> str:
        path = self.encoder_path or os.environ.get(ENCODER_ENV)
        if not path:
            raise EncoderNotFoundError(
                f"external backend needs a video encoder binary: set {ENCODER_ENV} "
                "or EncoderSettings.encoder_path")
        if not Path(path).is_file():
            raise EncoderNotFoundError(f"video encoder binary not found: {path}")
        return path


def _encode_builtin(frames) -> bytes:
    prev = np.zeros_like(frames[0], dtype=np.int32)
    chunks = [struct.pack("<I", len(frames))]
    for f in frames:
        delta = (f.astype(np.int32) - prev).astype("<i2").tobytes()
        z = zlib.compress(delta, 6)
        chunks.append(struct.pack("<I", len(z)))
        chunks.append(z)
        prev = f.astype(np.int32)
    return b"".join(chunks)


def _decode_builtin(data: bytes, n_frames: int, height: int, width: int):
    try:
        (count,) = struct.unpack_from("<I", data, 0)
        if count != n_frames:
            raise CodecError(f"stream holds {count} frames, metadata says {n_frames}")
        off = 4
        prev = np.zeros((height, width), dtype=np.int32)
        frames = []
        for _ in range(count):
            (zlen,) = struct.unpack_from("<I", data, off)
            off += 4
            delta = np.frombuffer(zlib.decompress(data[off:off + zlen]), dtype="<i2")
            off += zlen
            prev = prev + delta.reshape(height, width)
            frames.append(prev.astype(np.uint16))
        return frames
    except (struct.error, zlib.error, ValueError) as e:
        raise CodecError(f"truncated or corrupt builtin stream: {e}") from e


def _pack_gray8(frame: np.ndarray) -> np.ndarray:
    return np.concatenate([(frame >> 8).astype(np.uint8), (frame & 0xFF).astype(np.uint8)], axis=0)


def _unpack_gray8(img: np.ndarray) -> np.ndarray:
    half = img.shape[0] // 2
    return (img[:half].astype(np.uint16) << 8) | img[half:].astype(np.uint16)


def _padded_dims(h: int, w: int):
    """Frame dims the external encoder actually sees.

    Even and >= 16 on both axes; widths in [33, 55] are padded to 56 to dodge
    a teardown crash in common static x265 builds at those geometries.
    """
    ph = max(16, h + h % 2)
    pw = max(16, w + w % 2)
    if 33 <= pw <= 55:
        pw = 56
    return ph, pw


def _pad_for_encoder(frame: np.ndarray) -> np.ndarray:
    ph, pw = _padded_dims(*frame.shape)
    if (ph, pw) == frame.shape:
        return frame
    return np.pad(frame, ((0, ph - frame.shape[0]), (0, pw - frame.shape[1])))


def _run(cmd, payload: bytes) -> bytes:
    try:
        proc = subprocess.run(cmd, input=payload, capture_output=True)
    except OSError as e:
        raise CodecError(f"failed to launch {cmd[0]}: {e}") from e
    if proc.returncode != 0:
        tail = proc.stderr.decode(errors="replace")[-800:]
        raise CodecError(f"{cmd[0]} exited with {proc.returncode}: {tail}")
    return proc.stdout


def _encode_external(frames, settings: EncoderSettings) -> bytes:
    binary = settings.resolve_encoder()
    if settings.pixel_format == "gray8-packed":
        frames = [_pack_gray8(f) for f in frames]
        pix = "gray"
    else:
        pix = "gray12le"
    frames = [_pad_for_encoder(f) for f in frames]
    H, W = frames[0].shape
    raw = b"".join(f.astype("<u2" if pix == "gray12le" else np.uint8).tobytes() for f in frames)
    cmd = [
        binary, "-hide_banner", "-loglevel", "error", "-nostdin",
        "-f", "rawvideo", "-pix_fmt", pix, "-video_size", f"{W}x{H}",
        "-framerate", str(settings.fps), "-i", "pipe:0",
        "-c:v", "libx265",
        "-x265-params", f"log-level=none:keyint={settings.intra_period}:min-keyint={settings.intra_period}",
        "-crf", str(settings.crf), "-pix_fmt", pix, "-f", "hevc", "pipe:1",
    ]
    return _run(cmd, raw)


def _decode_external(data: bytes, settings: EncoderSettings, n_frames: int,
                     height: int, width: int):
    binary = settings.resolve_encoder()
    if settings.pixel_format == "gray8-packed":
        pix, dh, dw = "gray", 2 * height, width
    else:
        pix, dh, dw = "gray12le", height, width
    ph, pw = _padded_dims(dh, dw)
    cmd = [
        binary, "-hide_banner", "-loglevel", "error", "-nostdin",
        "-f", "hevc", "-i", "pipe:0",
        "-f", "rawvideo", "-pix_fmt", pix, "pipe:1",
    ]
    out = _run(cmd, data)
    dtype = "<u2" if pix == "gray12le" else np.uint8
    itemsize = 2 if pix == "gray12le" else 1
    expected = n_frames * ph * pw * itemsize
    if len(out) != expected:
        raise CodecError(f"decoded {len(out)} bytes, expected {expected} "
                         f"({n_frames} frames of {pw}x{ph} {pix})")
    arr = np.frombuffer(out, dtype=dtype).reshape(n_frames, ph, pw)[:, :dh, :dw]
    frames = [a.copy() for a in arr]
    if settings.pixel_format == "gray8-packed":
        frames = [_unpack_gray8(f) for f in frames]
    return frames


def encode_stream(frames, settings: EncoderSettings) -> bytes:
    """Encode a same-sized sequence of single-channel 12-bit frames."""
    if not frames:
        raise ValueError("cannot encode an empty stream")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("all frames in a stream must share dimensions")
    if settings.backend == "builtin":
        return _encode_builtin(frames)
    return _encode_external(frames, settings)


def decode_stream(data: bytes, settings: EncoderSettings, n_frames: int,
                  height: int, width: int):
    if settings.backend == "builtin":
        frames = _decode_builtin(data, n_frames, height, width)
        if frames and frames[0].shape != (height, width):
            raise CodecError("decoded frame size does not match metadata")
        return frames
    return _decode_external(data, settings, n_frames, height, width)


# --- MLP weight packing ------------------------------------------------------

def quantize_mlp_tensor(t: torch.Tensor):
    arr = t.detach().numpy().astype(np.float32)
    mn = float(arr.min())
    mx = float(arr.max())
    if mx > mn:
        q = np.floor((arr.astype(np.float64) - mn) / (mx - mn) * 65535.0 + 0.5).astype(np.uint16)
    else:
        q = np.zeros(arr.shape, dtype=np.uint16)
    return mn, mx, q


def dequantize_mlp_tensor(mn: float, mx: float, q: np.ndarray) -> np.ndarray:
    if mx > mn:
        return (mn + q.astype(np.float64) / 65535.0 * (mx - mn)).astype(np.float32)
    return np.full(q.shape, mn, dtype=np.float32)


def roundtrip_mlp(mlp: DecoderMLP) -> DecoderMLP:
    """The decoder exactly as a reader of the container will see it."""
    out = mlp.clone()
    for name in MLP_TENSOR_ORDER:
        mn, mx, q = quantize_mlp_tensor(getattr(mlp, name))
        setattr(out, name, torch.from_numpy(dequantize_mlp_tensor(mn, mx, q)))
    return out


def _mlp_block(group_index: int, mlp: DecoderMLP) -> bytes:
    parts = [struct.pack("<I", group_index)]
    for name in MLP_TENSOR_ORDER:
        mn, mx, q = quantize_mlp_tensor(getattr(mlp, name))
        parts.append(struct.pack("<ff", mn, mx))
        parts.append(q.astype("<u2").tobytes())
    return b"".join(parts)


# --- quantized-model view ----------------------------------------------------

def quantize_frame_field(f: FrameField, occ: OccupancyGrid):
    """Stage 1+2 of the pipeline for one frame: quantized codes, density culled."""
    q_sigma = cull_empty(quantize(f.sigma.values.numpy(), DENSITY_QUANT), occ)
    q_planes = {s: quantize(f.planes.planes[s].numpy(), FEATURE_QUANT) for s in PLANE_NAMES}
    return q_sigma, q_planes


def roundtrip_frame_field(f: FrameField, occ: OccupancyGrid) -> FrameField:
    """Quantize+cull+dequantize a frame in memory (the lossy reference path)."""
    q_sigma, q_planes = quantize_frame_field(f, occ)
    return _field_from_codes(q_sigma, q_planes, f.bbox, f.h, f.frame_index)


def _field_from_codes(q_sigma, q_planes, bbox: Bbox, h: int, frame_index: int) -> FrameField:
    sigma = DensityGrid(
        torch.from_numpy(dequantize(q_sigma, DENSITY_QUANT).astype(np.float32)), bbox)
    dims = q_sigma.shape
    pdims = plane_dims(dims)
    flat_parts = [
        torch.from_numpy(dequantize(q_planes[s], FEATURE_QUANT).astype(np.float32)).reshape(-1, h)
        for s in PLANE_NAMES
    ]
    planes = TriPlane(torch.cat(flat_parts, dim=0), pdims, h)
    return FrameField(sigma=sigma, planes=planes, frame_index=frame_index)


# --- container ---------------------------------------------------------------

STREAM_NAMES = ("density", "xy", "xz", "yz")


@dataclass
class DecodedContainer:
    metadata: dict
    frame_fields: list
    mlps: list
    group_of_frame: list
    settings: EncoderSettings
    sizes: dict

    @property
    def n_frames(self) -> int:
        return len(self.frame_fields)

    def mlp_for_frame(self, i: int) -> DecoderMLP:
        return self.mlps[self.group_of_frame[i]]


def pack_container(groups, settings: EncoderSettings, occ=None,
                   lambda_th: float = 1e-4) -> bytes:
    """Serialize trained groups: quantize -> cull -> mosaic -> encode, plus
    16-bit MLP blocks and self-describing metadata."""
    if not groups:
        raise ValueError("no groups to pack")
    first = groups[0].fields[0]
    dims = first.sigma.dims
    h = first.h
    for gm in groups:
        for f in gm.fields:
            if f.sigma.dims != dims or f.h != h:
                raise ValueError("all groups must share grid dims and channel count")
            if f.bbox.to_json() != first.bbox.to_json():
                raise ValueError("all groups must share one bbox")

    plane_layout = default_plane_layout(h)
    density_layout = default_density_layout(dims[2])
    all_fields = [f for gm in groups for f in gm.fields]
    if occ is None:
        occ = [update_occupancy(f.sigma, lambda_th) for f in all_fields]

    frames_per_stream = {name: [] for name in STREAM_NAMES}
    for f, o in zip(all_fields, occ):
        q_sigma, q_planes = quantize_frame_field(f, o)
        # density grid flattens as an (W, H, D)->(W, H) x D-channel mosaic
        frames_per_stream["density"].append(mosaic(q_sigma, density_layout))
        for s in PLANE_NAMES:
            frames_per_stream[s].append(mosaic(q_planes[s], plane_layout))

    blobs = {name: encode_stream(frames_per_stream[name], settings)
             for name in STREAM_NAMES}

    pdims = plane_dims(dims)
    mlp0 = groups[0].mlp
    meta = {
        "bbox": first.bbox.to_json(),
        "grid_dims": list(dims),
        "h": h,
        "group_size": max(gm.n_frames for gm in groups),
        "group_frames": [gm.n_frames for gm in groups],
        "frame_count": len(all_fields),
        "quant": {
            "density": {"lo": DENSITY_QUANT.lo, "hi": DENSITY_QUANT.hi, "bits": DENSITY_QUANT.bits},
            "features": {"lo": FEATURE_QUANT.lo, "hi": FEATURE_QUANT.hi, "bits": FEATURE_QUANT.bits},
        },
        "layouts": {
            "density": [density_layout.tile_rows, density_layout.tile_cols],
            "planes": [plane_layout.tile_rows, plane_layout.tile_cols],
        },
        "codec": {
            "backend": settings.backend, "crf": settings.crf,
            "pixel_format": settings.pixel_format,
            "intra_period": settings.intra_period, "fps": settings.fps,
        },
        "stream_shapes": {
            name: list(frames_per_stream[name][0].shape) for name in STREAM_NAMES
        },
        "plane_dims": {s: list(pdims[s]) for s in PLANE_NAMES},
        "mlp": {
            "feature_dim": mlp0.feature_dim, "enc_dim": mlp0.enc_dim,
            "shapes": {name: list(getattr(mlp0, name).shape) for name in MLP_TENSOR_ORDER},
        },
        "lambda_th": lambda_th,
    }
    meta_bytes = json.dumps(meta).encode()

    out = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name in STREAM_NAMES:
        out.append(struct.pack("<Q", len(blobs[name])))
        out.append(blobs[name])
    for gi, gm in enumerate(groups):
        out.append(_mlp_block(gi, gm.mlp))
    return b"".join(out)


def parse_sections(data: bytes) -> dict:
    """Byte extents of each container section; offsets include length prefixes."""
    if data[:4] != MAGIC:
        raise CodecError("not a container: bad magic")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise CodecError(f"unsupported container version {version}")
        (meta_len,) = struct.unpack_from("<I", data, 6)
        off = 10 + meta_len
        sections = {"metadata": (0, off)}
        for name in STREAM_NAMES:
            (slen,) = struct.unpack_from("<Q", data, off)
            sections[name] = (off, 8 + slen)
            off += 8 + slen
        sections["mlps"] = (off, len(data) - off)
        return sections
    except struct.error as e:
        raise CodecError(f"truncated container: {e}") from e


def unpack_container(data: bytes, encoder_path: str | None = None) -> DecodedContainer:
    sections = parse_sections(data)
    meta_off, meta_len = sections["metadata"]
    meta = json.loads(data[10:meta_off + meta_len])
    settings = EncoderSettings(
        backend=meta["codec"]["backend"], crf=meta["codec"]["crf"],
        pixel_format=meta["codec"]["pixel_format"],
        intra_period=meta["codec"]["intra_period"], fps=meta["codec"]["fps"],
        encoder_path=encoder_path,
    )
    n_frames = meta["frame_count"]
    dims = tuple(meta["grid_dims"])
    h = meta["h"]
    density_layout = MosaicLayout(*meta["layouts"]["density"])
    plane_layout = MosaicLayout(*meta["layouts"]["planes"])
    pdims = {s: tuple(v) for s, v in meta["plane_dims"].items()}
    bbox = Bbox.from_json(meta["bbox"])

    streams = {}
    for name in STREAM_NAMES:
        off, length = sections[name]
        sh = meta["stream_shapes"][name]
        streams[name] = decode_stream(data[off + 8:off + length], settings,
                                      n_frames, sh[0], sh[1])

    frame_fields = []
    for i in range(n_frames):
        q_sigma = demosaic(streams["density"][i], density_layout, (dims[0], dims[1], dims[2]))
        q_planes = {
            s: demosaic(streams[s][i], plane_layout, (pdims[s][0], pdims[s][1], h))
            for s in PLANE_NAMES
        }
        frame_fields.append(_field_from_codes(q_sigma, q_planes, bbox, h, i))

    group_frames = meta["group_frames"]
    group_of_frame = []
    for gi, cnt in enumerate(group_frames):
        group_of_frame.extend([gi] * cnt)

    shapes = {k: tuple(v) for k, v in meta["mlp"]["shapes"].items()}
    mlps = []
    off = sections["mlps"][0]
    for _ in group_frames:
        (gi,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for name in MLP_TENSOR_ORDER:
            mn, mx = struct.unpack_from("<ff", data, off)
            off += 8
            count = int(np.prod(shapes[name]))
            q = np.frombuffer(data, dtype="<u2", count=count, offset=off).reshape(shapes[name])
            off += 2 * count
            tensors[name] = torch.from_numpy(dequantize_mlp_tensor(mn, mx, q.copy()))
        mlps.append(DecoderMLP(feature_dim=meta["mlp"]["feature_dim"],
                               enc_dim=meta["mlp"]["enc_dim"], **tensors))
    if off != len(data):
        raise CodecError("container has trailing bytes after the MLP blocks")

    sizes = {name: length for name, (_, length) in sections.items()}
    return DecodedContainer(metadata=meta, frame_fields=frame_fields, mlps=mlps,
                            group_of_frame=group_of_frame, settings=settings, sizes=sizes)


# --- raw (pre-quantization) group checkpoints --------------------------------

def save_raw_group(path, fields, mlp: DecoderMLP, group_index: int, log=None) -> None:
    """Uncompressed float32 tensors plus metadata; the trainer's checkpoint format."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for i, f in enumerate(fields):
        arrays[f"sigma_{i}"] = f.sigma.values.numpy()
        for s in PLANE_NAMES:
            arrays[f"plane_{s}_{i}"] = f.planes.planes[s].numpy()
    np.savez_compressed(root / "fields.npz", **arrays)
    np.savez_compressed(root / "mlp.npz",
                        **{k: v.numpy() for k, v in mlp.params().items()})
    meta = {
        "group_index": group_index,
        "n_frames": len(fields),
        "frame_indices": [f.frame_index for f in fields],
        "bbox": fields[0].bbox.to_json(),
        "grid_dims": list(fields[0].sigma.dims),
        "h": fields[0].h,
        "mlp": {"feature_dim": mlp.feature_dim, "enc_dim": mlp.enc_dim},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    if log is not None:
        (root / "log.json").write_text(json.dumps(log))


def load_raw_group(path):
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    bbox = Bbox.from_json(meta["bbox"])
    h = meta["h"]
    dims = tuple(meta["grid_dims"])
    pdims = plane_dims(dims)
    data = np.load(root / "fields.npz")
    fields = []
    for i in range(meta["n_frames"]):
        sigma = DensityGrid(torch.from_numpy(data[f"sigma_{i}"]), bbox)
        flat = torch.cat([
            torch.from_numpy(data[f"plane_{s}_{i}"]).reshape(-1, h) for s in PLANE_NAMES
        ])
        fields.append(FrameField(sigma=sigma, planes=TriPlane(flat, pdims, h),
                                 frame_index=meta["frame_indices"][i]))
    mdata = np.load(root / "mlp.npz")
    mlp = DecoderMLP(feature_dim=meta["mlp"]["feature_dim"], enc_dim=meta["mlp"]["enc_dim"],
                     **{k: torch.from_numpy(mdata[k]) for k in MLP_TENSOR_ORDER})
    return fields, mlp, meta
