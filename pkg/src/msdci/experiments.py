"""Desk-scale training runs shared by the acceptance suite and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .io import RunConfig, desk_datasets
from .reconstruction import PipelineState, advance_phase, build_pipeline
from .training import TrainConfig, train_phase

# phases 2 and 3 restart Adam at the top of the lr staircase, which costs a couple
# of epochs of recovery; three epochs per rate is enough to climb past the previous phase
ENHANCE_EPOCHS_PER_LR = 3


@dataclass
class DeskRun:
    scheme: str
    linearity_mode: str
    state: PipelineState
    histories: dict = field(default_factory=dict)
    seconds: float = 0.0

    def final_psnr(self, phase: int) -> float:
        return self.histories[phase][-1]["heldout_psnr"]


def desk_run(scheme: str, linearity_mode: str = "linear", phases=(1,), seed: int = 0,
             epochs_per_lr: int = 10, enhance_epochs_per_lr: int = ENHANCE_EPOCHS_PER_LR,
             data=None, subrate: float = 0.1, block_size: int = 32) -> DeskRun:
    """Train ``scheme`` through ``phases`` on the desk-scale patch sets."""
    cfg = RunConfig(scheme=scheme, subrate=subrate, block_size=block_size,
                    linearity_mode=linearity_mode, seed=seed)
    train, held = data if data is not None else desk_datasets(cfg)
    state = build_pipeline(scheme, block_size, subrate, seed=seed,
                           linearity_mode=linearity_mode)
    embed_rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    run = DeskRun(scheme, linearity_mode, state)
    t0 = time.process_time()
    for phase in phases:
        if phase > run.state.phase:
            run.state = advance_phase(run.state, embed_rng)
        epochs = epochs_per_lr if phase == 1 else enhance_epochs_per_lr
        tcfg = TrainConfig(epochs_per_lr=epochs, seed=seed, phases=(phase,))
        run.state, run.histories[phase] = train_phase(run.state, train, tcfg, held)
    run.seconds = time.process_time() - t0
    return run
