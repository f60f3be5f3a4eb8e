"""Loss, Adam, staircase learning rate and the three-phase training driver."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import PSNR_CAP, psnr, ssim
from .reconstruction import PipelineState, advance_phase, save_checkpoint
from .tensor_core import ShapeError, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "heldout_psnr", "heldout_ssim")


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs_per_lr: int = 10
    lr_schedule: tuple = (0.001, 0.0005, 0.0001)
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    phases: tuple = (1, 2, 3)
    clip_grad: Optional[float] = None

    def __post_init__(self):
        self.lr_schedule = tuple(float(v) for v in self.lr_schedule)
        self.phases = tuple(int(p) for p in self.phases)
        if not self.lr_schedule:
            raise ConfigError("lr_schedule must not be empty")
        if any(v <= 0 for v in self.lr_schedule):
            raise ConfigError("learning rates must be positive")
        if any(b > a for a, b in zip(self.lr_schedule, self.lr_schedule[1:])):
            raise ConfigError("lr_schedule must be nonincreasing")
        if self.epochs_per_lr < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_lr and batch_size must be positive")
        if not set(self.phases) <= {1, 2, 3}:
            raise ConfigError(f"phases must be drawn from 1, 2, 3, got {self.phases}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def l2_loss(recon: Tensor, target: Tensor) -> float:
    """``1/(2N) * sum_i ||recon_i - target_i||^2`` over a batch of N samples."""
    if recon.shape != target.shape:
        raise ShapeError(f"loss: {recon.shape} vs {target.shape}")
    diff = recon - target
    return float(np.sum(diff * diff) / (2.0 * recon.shape[0]))


def l2_loss_grad(recon: Tensor, target: Tensor) -> Tensor:
    return (recon - target) / recon.shape[0]


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in place to every array in ``params``."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _images(data) -> np.ndarray:
    arr = data.stack() if hasattr(data, "stack") else np.asarray(data, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"expected a (N, 1, H, W) image stack, got {arr.shape}")
    return arr


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    # batch norm needs at least two samples per batch
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def _first_non_finite(named: dict) -> Optional[str]:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


def evaluate(state: PipelineState, data, batch_size: int = 8) -> dict:
    """Per-image PSNR/SSIM in eval mode; means use PSNR capped at 99 dB."""
    images = _images(data)
    p, s = [], []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        recon = state.forward(batch, rng=None, train=False)
        for r, x in zip(recon, batch):
            p.append(psnr(r, x))
            s.append(ssim(r, x))
    return {
        "psnr": p,
        "ssim": s,
        "mean_psnr": float(np.mean(np.minimum(p, PSNR_CAP))),
        "mean_ssim": float(np.mean(s)),
    }


def _eval_rng(state: PipelineState):
    # measurement noise at evaluation is drawn from a fixed stream
    return np.random.default_rng(np.random.SeedSequence([state.seed, 99]))


def heldout_metrics(state: PipelineState, heldout) -> tuple[float, float]:
    if heldout is None:
        return float("nan"), float("nan")
    if state.scheme.noise_sigma > 0:
        images = _images(heldout)
        recon = state.forward(images, rng=_eval_rng(state), train=False)
        p = [min(psnr(r, x), PSNR_CAP) for r, x in zip(recon, images)]
        s = [ssim(r, x) for r, x in zip(recon, images)]
        return float(np.mean(p)), float(np.mean(s))
    res = evaluate(state, heldout)
    return res["mean_psnr"], res["mean_ssim"]


def train_phase(
    state: PipelineState,
    data,
    cfg: TrainConfig,
    heldout=None,
    checkpoint_dir=None,
) -> tuple[PipelineState, list[dict]]:
    """Train every parameter of ``state`` end to end under the lr staircase.

    History row 0 is the untrained operating point (train loss in eval mode);
    rows 1.. are epochs, with the mean minibatch loss of that epoch.
    """
    images = _images(data)
    if len(images) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, state.phase]))
    state.optimizer = AdamState()
    params = state.parameters()

    history = []
    hp, hs = heldout_metrics(state, heldout)
    base = 0.0
    for start in range(0, len(images), cfg.batch_size):
        batch = images[start : start + cfg.batch_size]
        base += l2_loss(state.forward(batch, rng=rng, train=False), batch) * len(batch)
    history.append(dict(epoch=0, lr=0.0, train_loss=base / len(images),
                        heldout_psnr=hp, heldout_ssim=hs))
    epoch = 0
    for block, lr in enumerate(cfg.lr_schedule):
        for _ in range(cfg.epochs_per_lr):
            epoch += 1
            losses = []
            for idx in _batches(rng.permutation(len(images)), cfg.batch_size):
                batch = images[idx]
                recon = state.forward(batch, rng=rng, train=True)
                loss = l2_loss(recon, batch)
                grads = state.backward(l2_loss_grad(recon, batch))
                if not np.isfinite(loss):
                    bad = _first_non_finite({**params, "reconstruction": recon,
                                             **{f"grad[{k}]": g for k, g in grads.items()}})
                    raise NonFiniteError(
                        f"non-finite loss in phase {state.phase}, epoch {epoch}; "
                        f"first non-finite tensor: {bad}"
                    )
                if cfg.clip_grad is not None:
                    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                    if norm > cfg.clip_grad:
                        grads = {k: g * (cfg.clip_grad / norm) for k, g in grads.items()}
                adam_step(params, grads, state.optimizer, lr, cfg.beta1, cfg.beta2, cfg.eps)
                losses.append(loss)
            hp, hs = heldout_metrics(state, heldout)
            history.append(dict(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                                heldout_psnr=hp, heldout_ssim=hs))
            log.info("phase %d epoch %d lr %g loss %.6g heldout %.3f dB",
                     state.phase, epoch, lr, history[-1]["train_loss"], hp)
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"phase{state.phase}-block{block}",
                            epoch=epoch)
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / f"phase{state.phase}", epoch=epoch)
    return state, history


def run_phases(
    state: PipelineState,
    data,
    cfg: TrainConfig,
    heldout=None,
    out_dir=None,
) -> tuple[PipelineState, dict[int, list[dict]]]:
    """Run the requested phases in order, embedding each into the next."""
    histories = {}
    embed_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    for phase in sorted(cfg.phases):
        if phase < state.phase:
            raise ConfigError(f"state is already at phase {state.phase}, cannot run {phase}")
        if phase > state.phase + 1 or (phase > state.phase and phase == 1):
            raise ConfigError(f"phase {phase} needs a trained phase {phase - 1} state")
        if phase == state.phase + 1:
            state = advance_phase(state, embed_rng)
        state, hist = train_phase(state, data, cfg, heldout, out_dir)
        histories[phase] = hist
        if out_dir is not None:
            write_history(hist, Path(out_dir) / f"history_phase{phase}.csv")
    return state, histories


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_FIELDS}
        for r in rows
    ]
