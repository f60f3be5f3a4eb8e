"""Multi-scale deep compressive imaging in plain numpy.

A linear decomposition (identity, Haar wavelet or a learnable scale-space
bank) feeds learned block-sampling convolutions; a 1x1-conv initial
reconstruction and two enhancement stages recover the image.  Every layer has
a hand-written backward pass, and any trained linear sampler collapses to an
explicit measurement matrix.
"""

from .analysis import kernel_variance_profile, psnr, render_grid, ssim
from .decomposition import Decomposition, decompose, dwt_haar_forward, dwt_haar_inverse
from .reconstruction import (
    EnhanceV1,
    EnhanceV2,
    InitialRecon,
    PipelineState,
    advance_phase,
    build_pipeline,
    forward_pipeline,
    initial_reconstruct,
    load_checkpoint,
    save_checkpoint,
)
from .sampling import (
    MeasurementMatrix,
    SamplingScheme,
    allocate_measurements,
    build_scheme,
    extract_matrix,
    inject_noise,
    sample,
)
from .tensor_core import BatchNormLayer, ConvLayer, ShapeError, make_rng
from .training import TrainConfig, evaluate, run_phases, train_phase

__version__ = "0.1.0"

__all__ = [
    "BatchNormLayer", "ConvLayer", "Decomposition", "EnhanceV1", "EnhanceV2",
    "InitialRecon", "MeasurementMatrix", "PipelineState", "SamplingScheme", "ShapeError",
    "TrainConfig", "advance_phase", "allocate_measurements", "build_pipeline",
    "build_scheme", "decompose", "dwt_haar_forward", "dwt_haar_inverse", "evaluate",
    "extract_matrix", "forward_pipeline", "initial_reconstruct", "inject_noise",
    "kernel_variance_profile", "load_checkpoint", "make_rng", "psnr", "render_grid",
    "run_phases", "sample", "save_checkpoint", "ssim", "train_phase",
]
