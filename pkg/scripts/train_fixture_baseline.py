"""Train the repo's pinned baseline models (regularized and lambda1=0) and
report wall time plus held-out PSNR. Results are cached under tests/_cache so
the acceptance suite can reuse them."""

import sys
from pathlib import Path

from fvv.experiments import train_fixture_model

CACHE = Path(__file__).resolve().parent.parent / "tests" / "_cache"


def main():
    force = "--force" in sys.argv
    for lam, name in ((1e-3, "regularized"), (0.0, "lambda1=0")):
        groups, info = train_fixture_model(CACHE, lambda1=lam, force=force)
        print(f"{name}: holdout PSNR {info['holdout_psnr']:.2f} dB, "
              f"wall {info['wall_seconds']:.0f}s, key {info['config_key']}")


if __name__ == "__main__":
    main()
