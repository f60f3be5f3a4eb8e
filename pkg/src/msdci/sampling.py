"""Block sampling as strided convolution, for single- and multi-scale schemes.

A sampling layer with kernel ``n x n`` and stride ``n`` applied to an image
computes, for every non-overlapping block, the inner products of that block
with each kernel.  Stacking the row-major vectorised kernels gives the block
sampling matrix, so the layer *is* block compressive sensing.  Multi-scale
schemes put a linear decomposition in front of the sampler; because both
stages are linear the composition collapses into one flat matrix, recovered
here column by column from basis images (:func:`extract_matrix`).

Measurement tensors have shape ``(N, M, Gh, Gw)``: ``M`` measurements per
block position on a ``Gh x Gw`` block grid.  Their vectorised form is the
row-major flattening of one sample, i.e. channel-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decomposition import Decomposition, decompose
from .tensor_core import (
    ConvLayer,
    ShapeError,
    Tensor,
    conv2d_backward,
    conv2d_pre_activation,
)

SCHEME_KINDS = ("single", "wavelet", "scale_space", "pyramid")
LINEARITY_MODES = ("linear", "linear_bias", "relu")
PYRAMID_SCALES = 4
FRAME_MATRIX_LIMIT = 128


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5 + 1e-9))


def allocate_measurements(kind: str, block_size: int, subrate: float) -> list[int]:
    """Measurements per block for each sampling layer.

    ``single``/``wavelet`` take ``floor(r * n_B^2)`` (102/204/307 at
    r = 0.1/0.2/0.3, n_B = 32).  ``scale_space`` samples windows covering
    ``n_B/2`` original pixels per axis and takes ``round(r * (n_B/2)^2)``.
    ``pyramid`` splits ``round(r * n_B^2)`` over four scales, each of the first
    three getting ``round(total / 4)`` and the last scale the remainder.
    """
    if kind not in SCHEME_KINDS:
        raise ValueError(f"unknown scheme kind {kind!r}")
    if not 0.0 < subrate <= 1.0:
        raise ValueError(f"subrate must lie in (0, 1], got {subrate}")
    if block_size < 2 or block_size % 2:
        raise ValueError(f"block size must be a positive even integer, got {block_size}")
    area = block_size * block_size
    if kind in ("single", "wavelet"):
        alloc = [int(math.floor(subrate * area + 1e-9))]
    elif kind == "scale_space":
        alloc = [_round_half_up(subrate * area / 4)]
    else:
        total = _round_half_up(subrate * area)
        share = _round_half_up(total / PYRAMID_SCALES)
        alloc = [share] * (PYRAMID_SCALES - 1) + [total - share * (PYRAMID_SCALES - 1)]
    if min(alloc) <= 0:
        raise ValueError(
            f"allocation {alloc} leaves a scale without measurements "
            f"({kind}, n_B={block_size}, r={subrate})"
        )
    return alloc


def pyramid_geometry(block_size: int, dilation: int) -> tuple[int, int]:
    """Kernel size and padding of the dilated sampler at one pyramid scale.

    The kernel is chosen so its dilated footprint ``(k - 1) d + 1`` is as close
    as possible to the block size, and padding trims an overshoot back inside
    one stride.  For n_B = 32 this gives kernels 32/16/11/9 and padding
    0/0/0/1 at d = 1..4.
    """
    # ties round down so the footprint stays inside the block
    k = math.ceil((block_size - 1) / dilation - 0.5 - 1e-9) + 1
    eff = (k - 1) * dilation + 1
    pad = max(0, math.ceil((eff - block_size) / 2))
    return k, pad


@dataclass
class SamplingScheme:
    kind: str
    block_size: int
    subrate: float
    allocation: list = field(default_factory=list)
    sampling_layers: list = field(default_factory=list)
    linearity_mode: str = "linear"
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.linearity_mode not in LINEARITY_MODES:
            raise ValueError(f"unknown linearity mode {self.linearity_mode!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not self.allocation:
            self.allocation = allocate_measurements(self.kind, self.block_size, self.subrate)
        if self.sampling_layers:
            counts = [l.out_channels for l in self.sampling_layers]
            if counts != list(self.allocation):
                raise ValueError(f"layer widths {counts} != allocation {self.allocation}")
            for layer in self.sampling_layers:
                if self.linearity_mode == "linear" and (
                    layer.bias is not None or layer.activation != "none"
                ):
                    raise ValueError("linear sampling layers carry no bias or activation")

    @property
    def total_measurements(self) -> int:
        return int(sum(self.allocation))

    @property
    def recon_block(self) -> int:
        """Original-image pixels per axis covered by one block position."""
        return self.block_size // 2 if self.kind == "scale_space" else self.block_size

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.sampling_layers):
            params[f"sample.{i}.weight"] = layer.weights
            if layer.bias is not None:
                params[f"sample.{i}.bias"] = layer.bias
        return params


def default_decomposition(kind: str, trainable: bool = True) -> Decomposition:
    """The decomposition each scheme is paired with by default."""
    return Decomposition.build(
        {
            "single": "identity",
            "wavelet": "haar_dwt",
            "scale_space": "scale_space",
            "pyramid": "scale_space",
        }[kind],
        trainable=trainable,
    )


def build_scheme(
    kind: str,
    block_size: int,
    subrate: float,
    rng: np.random.Generator,
    linearity_mode: str = "linear",
    noise_sigma: float = 0.0,
) -> SamplingScheme:
    alloc = allocate_measurements(kind, block_size, subrate)
    bias = linearity_mode == "linear_bias"
    act = "relu" if linearity_mode == "relu" else "none"
    layers = []
    if kind == "pyramid":
        for scale, m in enumerate(alloc):
            d = scale + 1
            k, pad = pyramid_geometry(block_size, d)
            layers.append(
                ConvLayer.init(
                    m, 1, k, rng, bias=bias, stride=block_size, dilation=d,
                    padding=pad, activation=act,
                )
            )
    else:
        if kind == "single":
            in_ch, k = 1, block_size
        else:
            in_ch, k = 4, block_size // 2
        layers.append(
            ConvLayer.init(alloc[0], in_ch, k, rng, bias=bias, stride=k, activation=act)
        )
    return SamplingScheme(
        kind, block_size, subrate, alloc, layers, linearity_mode, noise_sigma
    )


def _scale_input(stack: Tensor, scale: int) -> Tensor:
    return stack if stack.shape[1] == 1 else stack[:, scale : scale + 1]


def check_extent(image: Tensor, scheme: SamplingScheme) -> None:
    h, w = image.shape[-2:]
    b = scheme.recon_block
    if h % b or w % b:
        raise ShapeError(f"image extent {h}x{w} not divisible by block stride {b}")


def decompose_for(image: Tensor, decomp: Decomposition) -> Tensor:
    """Decomposed stack; pyramid markers hand the raw image to every scale."""
    if decomp.kind == "pyramid_marker":
        return image
    return decompose(image, decomp)


def measure(
    stack: Tensor,
    scheme: SamplingScheme,
    noise: Optional[Tensor] = None,
) -> Tensor:
    """Sampling convolutions on a decomposed stack.

    ``noise`` (same shape as the output) is added to the linear measurements
    before any ReLU post-processing.
    """
    if scheme.kind == "pyramid":
        if stack.shape[1] not in (1, PYRAMID_SCALES):
            raise ShapeError(
                f"channel axis: pyramid sampling needs 1 or {PYRAMID_SCALES} "
                f"channels, got {stack.shape[1]}"
            )
        outs = [
            conv2d_pre_activation(_scale_input(stack, l), layer)
            for l, layer in enumerate(scheme.sampling_layers)
        ]
        grids = {o.shape[2:] for o in outs}
        if len(grids) != 1:
            raise ShapeError(f"pyramid scales produced unequal block grids {grids}")
        y = np.concatenate(outs, axis=1)
    else:
        y = conv2d_pre_activation(stack, scheme.sampling_layers[0])
    if noise is not None:
        y = y + noise
    if scheme.linearity_mode == "relu":
        np.maximum(y, 0.0, out=y)
    return y


def measure_backward(
    stack: Tensor, scheme: SamplingScheme, grad: Tensor, y: Tensor, need_input_grad=True
) -> tuple[Optional[Tensor], list]:
    """Returns (grad_stack, [(grad_weights, grad_bias) per sampling layer])."""
    if scheme.linearity_mode == "relu":
        grad = grad * (y > 0)
    layer_grads = []
    if scheme.kind != "pyramid":
        layer = scheme.sampling_layers[0]
        gx, gw, gb = conv2d_backward(
            stack, _linear_view(layer), grad, need_input_grad=need_input_grad
        )
        return gx, [(gw, gb)]
    grad_stack = np.zeros_like(stack) if need_input_grad else None
    start = 0
    for l, layer in enumerate(scheme.sampling_layers):
        stop = start + layer.out_channels
        gx, gw, gb = conv2d_backward(
            _scale_input(stack, l),
            _linear_view(layer),
            np.ascontiguousarray(grad[:, start:stop]),
            need_input_grad=need_input_grad,
        )
        if need_input_grad:
            if stack.shape[1] == 1:
                grad_stack += gx
            else:
                grad_stack[:, l : l + 1] += gx
        layer_grads.append((gw, gb))
        start = stop
    return grad_stack, layer_grads


def _linear_view(layer: ConvLayer) -> ConvLayer:
    # the ReLU mask is applied by the caller, after noise
    if layer.activation == "none":
        return layer
    return ConvLayer(
        layer.weights, layer.bias, layer.stride, layer.dilation, layer.padding, "none"
    )


def inject_noise(measurements: Tensor, sigma: float, rng: np.random.Generator) -> Tensor:
    """Add i.i.d. zero-mean Gaussian noise of standard deviation ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return measurements
    return measurements + rng.normal(0.0, sigma, size=measurements.shape)


def measurement_shape(image_shape, scheme: SamplingScheme) -> tuple[int, int, int, int]:
    n, _, h, w = image_shape
    b = scheme.recon_block
    return n, scheme.total_measurements, h // b, w // b


def sample(
    image: Tensor,
    decomp: Decomposition,
    scheme: SamplingScheme,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Decompose then sample a batch of single-channel images."""
    check_extent(image, scheme)
    stack = decompose_for(image, decomp)
    noise = None
    if scheme.noise_sigma > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_sigma > 0")
        noise = rng.normal(0.0, scheme.noise_sigma, size=measurement_shape(image.shape, scheme))
    return measure(stack, scheme, noise)


# ---------------------------------------------------------------------------
# Flat matrix form
# ---------------------------------------------------------------------------


@dataclass
class MeasurementMatrix:
    """Explicit matrix equivalent of a linear sampler.

    ``form == "frame"``: ``entries`` maps a row-major vectorised ``extent x
    extent`` image to the vectorised measurement tensor.  ``form ==
    "block"``: ``entries`` acts on one ``block_size x block_size`` block, and
    the frame operator is its repetition over a grid with the given stride.
    """

    entries: np.ndarray
    block_size: int
    stride: int
    extent: int
    form: str = "frame"

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    def apply(self, image: Tensor) -> np.ndarray:
        return self.entries @ np.asarray(image, dtype=np.float64).reshape(-1)


def basis_matrix(fn, extent: int, chunk: int = 256) -> np.ndarray:
    """Matrix of a linear map on ``extent x extent`` images from basis images."""
    n = extent * extent
    cols = []
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        basis = np.zeros((len(idx), n))
        basis[np.arange(len(idx)), idx] = 1.0
        out = fn(basis.reshape(len(idx), 1, extent, extent))
        cols.append(out.reshape(len(idx), -1))
    return np.concatenate(cols, axis=0).T


def extract_matrix(
    decomp: Decomposition, scheme: SamplingScheme, image_extent: int
) -> MeasurementMatrix:
    """Collapse decomposition + sampling into a flat measurement matrix.

    Column ``j`` is the response to the ``j``-th basis image.  Frames larger
    than 128 x 128 are returned in block form (one block, zero-padded edges).
    """
    if scheme.linearity_mode != "linear" or scheme.noise_sigma != 0:
        raise ValueError("extract_matrix needs a linear, noiseless sampler")
    b = scheme.recon_block
    if image_extent % b:
        raise ShapeError(f"extent {image_extent} not divisible by block stride {b}")
    clean = SamplingScheme(
        scheme.kind, scheme.block_size, scheme.subrate, scheme.allocation,
        scheme.sampling_layers, "linear", 0.0,
    )
    fn = lambda x: sample(x, decomp, clean)  # noqa: E731
    if image_extent > FRAME_MATRIX_LIMIT:
        return MeasurementMatrix(basis_matrix(fn, b), b, b, image_extent, form="block")
    return MeasurementMatrix(basis_matrix(fn, image_extent), b, b, image_extent)
