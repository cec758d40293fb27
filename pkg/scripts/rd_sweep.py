"""Pack the cached baseline at several CRF settings and print the
rate-distortion table (size, held-out PSNR/SSIM per point)."""

import sys
from pathlib import Path

import numpy as np

from fvv import codec, evalkit, field as fieldmod, renderer
from fvv.experiments import (FIXTURE_HOLDOUT_VIEWS, fixture_dataset,
                             train_fixture_model)

CACHE = Path(__file__).resolve().parent.parent / "tests" / "_cache"


def decoded_metrics(blob, dataset, views, frames):
    dec = codec.unpack_container(blob)
    ps, ss = [], []
    for frame in frames:
        f = dec.frame_fields[frame]
        occ = fieldmod.update_occupancy(f.sigma, 1e-4)
        step = renderer.default_step(f)
        for v in views:
            img = renderer.render_image(dataset.cameras[v], f, occ,
                                        dec.mlp_for_frame(frame), step)
            ps.append(evalkit.psnr(img, dataset.frames[frame][v]))
            ss.append(evalkit.ssim(img, dataset.frames[frame][v]))
    return float(np.mean(ps)), float(np.mean(ss))


def main():
    crfs = [int(a) for a in sys.argv[1:]] or [20, 28, 33]
    groups, info = train_fixture_model(CACHE)
    ds = fixture_dataset(CACHE)
    print(f"baseline: holdout {info['holdout_psnr']:.2f} dB (uncompressed)")
    rows = []
    for crf in crfs:
        settings = codec.EncoderSettings(backend="external", crf=crf)
        blob = codec.pack_container(groups, settings)
        p, s = decoded_metrics(blob, ds, FIXTURE_HOLDOUT_VIEWS, frames=(0, 3, 4, 7))
        rows.append((crf, len(blob), p, s))
        print(f"crf {crf}: {len(blob)} bytes, psnr {p:.2f}, ssim {s:.4f}")
    print()
    print(evalkit.rd_report(rows, frame_count=8), end="")


if __name__ == "__main__":
    main()
