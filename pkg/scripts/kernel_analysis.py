"""Sorted kernel-variance profiles and kernel grids of trained samplers.

Trains phase 1 of the wavelet and pyramid schemes (or loads checkpoints) and
writes, per scheme, the variance profile grouped by layer and by decomposed
channel, plus grid renderings of the kernels.

    python3 scripts/kernel_analysis.py --out runs/kernels
    python3 scripts/kernel_analysis.py --checkpoint runs/w/phase1 --out runs/kernels
"""

import argparse
from pathlib import Path

import numpy as np

from msdci import analysis
from msdci.experiments import desk_run
from msdci.io import save_image
from msdci.reconstruction import load_checkpoint


def report(state, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    prof = analysis.kernel_variance_profile(state.scheme)
    prof.to_csv(out / "variance_profile.csv")
    bands = analysis.band_variance_profile(state.scheme, state.decomposition)
    bands.to_csv(out / "band_variance_profile.csv")
    for label, vals in zip(bands.labels, bands.values):
        print(f"  {label:4s} mean kernel variance {np.mean(vals):.3e}  max {vals[0]:.3e}")
    tiles = analysis.kernel_tiles(state.scheme)
    save_image(analysis.render_grid(tiles, int(np.ceil(np.sqrt(len(tiles))))),
               out / "kernels.png")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", nargs="*", default=[])
    ap.add_argument("--schemes", nargs="+", default=["wavelet", "pyramid"])
    ap.add_argument("--epochs-per-lr", type=int, default=10)
    ap.add_argument("--out", default="runs/kernels")
    args = ap.parse_args()

    if args.checkpoint:
        for path in args.checkpoint:
            state, meta = load_checkpoint(path)
            print(f"{path} ({meta['scheme']})")
            report(state, Path(args.out) / Path(path).name)
        return
    for kind in args.schemes:
        run = desk_run(kind, epochs_per_lr=args.epochs_per_lr)
        print(f"{kind}: {run.final_psnr(1):.2f} dB")
        report(run.state, Path(args.out) / kind)


if __name__ == "__main__":
    main()
