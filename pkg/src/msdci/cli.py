"""Command-line interface: ``msdci <subcommand> [options]``.

Failures print a single line ``msdci: error: <ErrorType>: <message>`` to
stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, io
from .decomposition import Decomposition
from .reconstruction import (
    build_pipeline,
    initial_reconstruct,
    load_checkpoint,
)
from .sampling import decompose_for, extract_matrix, sample
from .tensor_core import load_tensor, make_rng, save_tensor
from .training import ConfigError, evaluate, run_phases

log = logging.getLogger("msdci")


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--scheme", choices=["single", "wavelet", "scale-space", "pyramid"])
    p.add_argument("--subrate", type=float)
    p.add_argument("--block-size", type=int)
    p.add_argument("--linearity", choices=["linear", "linear_bias", "relu"])
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-per-lr", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msdci", description="Multi-scale deep compressive imaging")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train phases sequentially")
    _add_run_options(p)
    p.add_argument("--phase", type=int, nargs="+", choices=[1, 2, 3])

    p = sub.add_parser("sample", help="measure an image with a trained sampler")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="measurement .msdt file")

    p = sub.add_parser("reconstruct", help="recover an image from measurements")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--out", required=True, help=".png or .pgm output")

    p = sub.add_parser("extract-matrix", help="write the flat measurement matrix")
    _add_run_options(p)
    p.add_argument("--checkpoint")
    p.add_argument("--extent", type=int, default=64)

    p = sub.add_parser("analyze", help="kernel variance profile and grid renderings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image")
    p.add_argument("--out", required=True)

    p = sub.add_parser("decompose", help="dump decomposed channels of an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="per-image PSNR/SSIM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="run config (default: config.ini next to the checkpoint)")
    p.add_argument("--images", nargs="+", help="evaluate these files instead of held-out patches")
    p.add_argument("--out", required=True, help="CSV output")
    return parser


def _overrides(args) -> dict:
    return {
        "scheme": args.scheme.replace("-", "_") if args.scheme else None,
        "subrate": args.subrate,
        "block_size": args.block_size,
        "linearity_mode": args.linearity,
        "noise_sigma": args.noise_sigma,
        "seed": args.seed,
        "epochs_per_lr": args.epochs_per_lr,
        "out_dir": args.out,
    }


def cmd_train(args) -> None:
    over = _overrides(args)
    if args.phase:
        over["phases"] = tuple(sorted(args.phase))
    cfg = io.load_config(args.config, over)
    out = Path(cfg.out_dir)
    tcfg = cfg.train_config()
    first = min(tcfg.phases)
    if first > 1:
        prev = out / f"phase{first - 1}"
        if not (prev / "manifest.txt").exists():
            raise ConfigError(f"phase {first} needs a phase-{first - 1} checkpoint at {prev}")
        state, meta = load_checkpoint(prev)
        if meta["scheme"] != cfg.scheme:
            raise ConfigError(
                f"checkpoint scheme {meta['scheme']} does not match config scheme {cfg.scheme}"
            )
    else:
        state = build_pipeline(
            cfg.scheme, cfg.block_size, cfg.subrate, seed=cfg.seed,
            linearity_mode=cfg.linearity_mode, noise_sigma=cfg.noise_sigma,
            decomposition=cfg.decomposition, decomp_trainable=cfg.decomp_trainable,
            width=cfg.width,
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(io.dump_config(cfg))
    train, held = io.desk_datasets(cfg)
    run_phases(state, train, tcfg, held, out)


def _checkpoint(path):
    state, _ = load_checkpoint(path)
    return state


def cmd_sample(args) -> None:
    state = _checkpoint(args.checkpoint)
    state.scheme.noise_sigma = args.noise_sigma
    y = sample(io.load_image(args.image), state.decomposition, state.scheme, make_rng(args.seed))
    save_tensor(y, args.out)


def cmd_reconstruct(args) -> None:
    state = _checkpoint(args.checkpoint)
    y = load_tensor(args.measurements)
    x = initial_reconstruct(y, state.initial)
    for stage in state.stages():
        x = stage.forward(x, train=False)
    io.save_image(x, args.out)


def cmd_extract_matrix(args) -> None:
    if args.checkpoint:
        state = _checkpoint(args.checkpoint)
    else:
        cfg = io.load_config(args.config, _overrides(args))
        state = build_pipeline(cfg.scheme, cfg.block_size, cfg.subrate, seed=cfg.seed,
                               decomposition=cfg.decomposition)
    if not args.out:
        raise ConfigError("--out is required")
    mat = extract_matrix(state.decomposition, state.scheme, args.extent)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(prefix.with_suffix(".csv"), mat.entries, delimiter=",", fmt="%.17g")
    save_tensor(mat.entries, prefix.with_suffix(".msdt"))


def _probe_image(args, state) -> np.ndarray:
    if getattr(args, "image", None):
        return io.load_image(args.image)
    b = state.scheme.recon_block
    n = max(64, b)
    _, img = io.builtin_images(["camera"])[0]
    return img[:n, :n][None, None]


def cmd_analyze(args) -> None:
    state = _checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.kernel_variance_profile(state.scheme).to_csv(out / "variance_profile.csv")
    if state.scheme.sampling_layers[0].in_channels > 1:
        analysis.band_variance_profile(state.scheme, state.decomposition).to_csv(
            out / "band_variance_profile.csv"
        )
    tiles = analysis.kernel_tiles(state.scheme)
    cols = int(np.ceil(np.sqrt(len(tiles))))
    io.save_image(analysis.render_grid(tiles, cols), out / "kernels.png")
    y = sample(_probe_image(args, state), state.decomposition, state.scheme)
    mt = analysis.measurement_tiles(y)
    io.save_image(analysis.render_grid(mt, int(np.ceil(np.sqrt(len(mt))))),
                  out / "measurements.png")


def cmd_decompose(args) -> None:
    state = _checkpoint(args.checkpoint)
    decomp: Decomposition = state.decomposition
    stack = decompose_for(io.load_image(args.image), decomp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label, ch in zip(decomp.labels, stack[0]):
        save_tensor(ch, out / f"{label}.msdt")
        io.save_image(analysis.render_grid([ch], 1), out / f"{label}.png")


def cmd_eval(args) -> None:
    state = _checkpoint(args.checkpoint)
    if args.images:
        srcs = io.load_images(args.images)
        names = [n for n, _ in srcs]
        data = [img[None, None] for _, img in srcs]
        results = [evaluate(state, d) for d in data]
        psnrs = [r["psnr"][0] for r in results]
        ssims = [r["ssim"][0] for r in results]
    else:
        cfg_path = args.config or Path(args.checkpoint).parent / "config.ini"
        cfg = io.load_config(cfg_path)
        _, held = io.desk_datasets(cfg)
        res = evaluate(state, held)
        names = [f"{p.source}@{p.offset[0]},{p.offset[1]}" for p in held.patches]
        psnrs, ssims = res["psnr"], res["ssim"]
    mean_p = float(np.mean(np.minimum(psnrs, analysis.PSNR_CAP)))
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "psnr", "ssim"])
        for n, p, s in zip(names, psnrs, ssims):
            w.writerow([n, repr(float(p)), repr(float(s))])
        w.writerow(["mean", repr(mean_p), repr(float(np.mean(ssims)))])


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "extract-matrix": cmd_extract_matrix,
    "analyze": cmd_analyze,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001
        msg = " ".join(str(e).split())
        print(f"msdci: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
