"""Quality and rate metrics: PSNR, SSIM, rate-distortion tables, and the
per-component container storage breakdown."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import codec

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class MetricRecord:
    frame: int
    view: int
    psnr: float
    ssim: float


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """-10*log10(MSE) for images in [0, 1]; +inf when identical."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Gaussian-weighted local mean over every valid window position
    win = kernel.shape[0]
    from numpy.lib.stride_tricks import sliding_window_view

    patches = sliding_window_view(img, (win, win))
    return np.einsum("xyuv,uv->xy", patches, kernel)


def ssim(img: np.ndarray, ref: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) on channel-mean grayscale,
    averaged over valid window positions."""
    x = _to_gray(img)
    y = _to_gray(ref)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _windowed(x, k)
    mu_y = _windowed(y, k)
    xx = _windowed(x * x, k) - mu_x**2
    yy = _windowed(y * y, k) - mu_y**2
    xy = _windowed(x * y, k) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)) / (
        (mu_x**2 + mu_y**2 + SSIM_C1) * (xx + yy + SSIM_C2))
    return float(s.mean())


def rd_report(results, frame_count: int) -> str:
    """CSV of (crf, bytes, psnr, ssim) rows sorted by size, with a KB/frame column."""
    if not results:
        raise ValueError("rd_report needs at least one row")
    rows = sorted(results, key=lambda r: r[1])
    buf = io.StringIO()
    buf.write("crf,total_bytes,kb_per_frame,mean_psnr,mean_ssim\n")
    for crf, total, p, s in rows:
        kbf = total / frame_count / 1024.0
        buf.write(f"{crf},{total},{kbf:.6f},{p:.6f},{s:.6f}\n")
    return buf.getvalue()


def size_breakdown(container_bytes: bytes) -> dict:
    """Exact byte attribution mirroring the storage-components table:
    feature planes, density grid, MLP blocks, metadata. Sums to file size."""
    sections = codec.parse_sections(container_bytes)
    out = {
        "P_xy": sections["xy"][1],
        "P_xz": sections["xz"][1],
        "P_yz": sections["yz"][1],
        "V_sigma": sections["density"][1],
        "MLPs": sections["mlps"][1],
        "metadata": sections["metadata"][1],
    }
    assert sum(out.values()) == len(container_bytes)
    return out


def breakdown_csv(breakdown: dict) -> str:
    cols = ["P_xy", "P_xz", "P_yz", "V_sigma", "MLPs", "metadata"]
    header = ",".join(cols)
    vals = ",".join(str(breakdown[c]) for c in cols)
    return f"{header}\n{vals}\n"
