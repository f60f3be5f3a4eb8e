"""Dense tensor arithmetic with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64, laid out
batch x channel x height x width for images and feature maps.  Every
layer used by the sampling and reconstruction networks (strided /
dilated / padded convolution, ReLU, batch norm, elementwise add) has a
pure forward function and a matching backward function that returns
gradients of ``sum(grad_out * forward(...))``.

Random numbers come from ``numpy.random.Generator`` seeded with a
PCG64 bit generator (see :func:`make_rng`), which gives a reproducible
stream for a given seed on every platform numpy supports.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

MSDT_MAGIC = b"MSDT"
MSDT_VERSION = 1


class ShapeError(ValueError):
    """Raised when tensor extents do not conform to an operation."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: PCG64 over numpy's SeedSequence."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(x, rank: Optional[int] = None) -> Tensor:
    """Convert to a contiguous float64 array, checking rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim > 4:
        raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
    if rank is not None and arr.ndim != rank:
        raise ShapeError(f"expected rank {rank}, got shape {arr.shape}")
    return arr


def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvLayer:
    """Convolution parameters.

    ``weights`` has shape (out_channels, in_channels, F_H, F_W).  Padding is
    zero padding of ``padding[0]`` rows and ``padding[1]`` columns per side.
    """

    weights: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    dilation: int = 1
    padding: tuple[int, int] = (0, 0)
    activation: str = "none"

    def __post_init__(self):
        self.weights = as_tensor(self.weights, rank=4)
        if self.bias is not None:
            self.bias = as_tensor(self.bias, rank=1)
            if self.bias.shape[0] != self.weights.shape[0]:
                raise ShapeError("bias length must equal out_channels")
        if isinstance(self.padding, int):
            self.padding = (self.padding, self.padding)
        self.padding = (int(self.padding[0]), int(self.padding[1]))
        if self.stride < 1 or self.dilation < 1 or min(self.padding) < 0:
            raise ValueError("stride/dilation must be positive, padding nonnegative")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def effective_extent(self) -> tuple[int, int]:
        fh, fw = self.kernel_size
        d = self.dilation
        return (fh - 1) * d + 1, (fw - 1) * d + 1

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.effective_extent()
        ph, pw = self.padding
        for axis, size, eff, pad in (("height", h, eh, ph), ("width", w, ew, pw)):
            if size + 2 * pad < eff:
                raise ShapeError(
                    f"{axis}: padded extent {size + 2 * pad} smaller than "
                    f"effective kernel extent {eff}"
                )
        s = self.stride
        return (h + 2 * ph - eh) // s + 1, (w + 2 * pw - ew) // s + 1

    @classmethod
    def init(
        cls,
        out_channels: int,
        in_channels: int,
        kernel: int,
        rng: np.random.Generator,
        bias: bool = False,
        **kwargs,
    ) -> "ConvLayer":
        fan_in = in_channels * kernel * kernel
        w = init_uniform((out_channels, in_channels, kernel, kernel), fan_in, rng)
        b = init_uniform((out_channels,), fan_in, rng) if bias else None
        return cls(w, b, **kwargs)


def _check_conv_input(x: Tensor, layer: ConvLayer) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be rank 4 (NCHW), got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"channel axis: input has {x.shape[1]} channels, "
            f"layer expects {layer.in_channels}"
        )


def _pad(x: Tensor, padding: tuple[int, int]) -> Tensor:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: Tensor, layer: ConvLayer, ho: int, wo: int) -> Tensor:
    """Rows are (n, ho, wo) positions, columns are (fh, fw, c) taps."""
    eh, ew = layer.effective_extent()
    s, d = layer.stride, layer.dilation
    n, c = xp.shape[:2]
    fh, fw = layer.kernel_size
    nhwc = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)) if c > 1 else xp.reshape(
        n, xp.shape[2], xp.shape[3], 1
    )
    win = sliding_window_view(nhwc, (eh, ew), axis=(1, 2))  # n, H', W', c, eh, ew
    win = win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s, :, ::d, ::d]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, fh * fw * c)


def _weight_matrix(layer: ConvLayer) -> Tensor:
    """Weights as (out_channels, fh * fw * c), matching the im2col column order."""
    return layer.weights.transpose(0, 2, 3, 1).reshape(layer.out_channels, -1)


def conv2d_pre_activation(x: Tensor, layer: ConvLayer) -> Tensor:
    _check_conv_input(x, layer)
    n = x.shape[0]
    ho, wo = layer.output_extent(x.shape[2], x.shape[3])
    cols = _im2col(_pad(x, layer.padding), layer, ho, wo)
    out = cols @ _weight_matrix(layer).T
    if layer.bias is not None:
        out += layer.bias
    return np.ascontiguousarray(
        out.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
    )


def conv2d_forward(x: Tensor, layer: ConvLayer) -> Tensor:
    """Cross-correlation with stride, dilation, zero padding, bias and activation.

    Output extent per axis is ``floor((H + 2P - ((F-1)d + 1)) / S) + 1``.
    """
    out = conv2d_pre_activation(x, layer)
    if layer.activation == "relu":
        np.maximum(out, 0.0, out=out)
    return out


def conv2d_backward(
    x: Tensor,
    layer: ConvLayer,
    grad_out: Tensor,
    need_input_grad: bool = True,
    out: Optional[Tensor] = None,
) -> tuple[Optional[Tensor], Tensor, Optional[Tensor]]:
    """Gradients w.r.t. input, weights and bias (``None`` if the layer has no bias).

    For ReLU layers the cached forward output ``out`` may be passed to skip
    recomputing the activation mask.
    """
    _check_conv_input(x, layer)
    n, c, h, w = x.shape
    ho, wo = layer.output_extent(h, w)
    expected = (n, layer.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward shape {expected}")
    if layer.activation == "relu":
        if out is None:
            out = conv2d_pre_activation(x, layer)
        grad_out = grad_out * (out > 0)

    g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, layer.out_channels)
    xp = _pad(x, layer.padding)
    cols = _im2col(xp, layer, ho, wo)
    fh, fw = layer.kernel_size
    grad_w = np.ascontiguousarray(
        (g.T @ cols).reshape(layer.out_channels, fh, fw, c).transpose(0, 3, 1, 2)
    )
    grad_b = g.sum(axis=0) if layer.bias is not None else None
    if not need_input_grad:
        return None, grad_w, grad_b

    s, d = layer.stride, layer.dilation
    # scatter into NHWC so every tap writes channel-contiguous rows
    dcols = (g @ _weight_matrix(layer)).reshape(n, ho, wo, fh, fw, c)
    gxp = np.zeros((n, xp.shape[2], xp.shape[3], c))
    if fh * fw <= ho * wo:
        for i in range(fh):
            for j in range(fw):
                gxp[
                    :,
                    i * d : i * d + (ho - 1) * s + 1 : s,
                    j * d : j * d + (wo - 1) * s + 1 : s,
                ] += dcols[:, :, :, i, j]
    else:
        eh, ew = layer.effective_extent()
        for a in range(ho):
            for b in range(wo):
                gxp[:, a * s : a * s + eh : d, b * s : b * s + ew : d] += dcols[:, a, b]
    gxp = gxp.transpose(0, 3, 1, 2)
    ph, pw = layer.padding
    grad_x = gxp[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# ReLU, elementwise add
# ---------------------------------------------------------------------------


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu: {x.shape} vs {grad_out.shape}")
    return grad_out * (x > 0)


def add_forward(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: no broadcasting, got {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_out: Tensor) -> tuple[Tensor, Tensor]:
    return grad_out, grad_out


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormLayer:
    scale: Tensor
    shift: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, **kwargs) -> "BatchNormLayer":
        return cls(
            np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
            **kwargs,
        )

    def __post_init__(self):
        if np.any(self.running_var <= 0):
            raise ValueError("running_var must be strictly positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


def _bn_check(x: Tensor, bn: BatchNormLayer) -> None:
    if x.ndim != 4 or x.shape[1] != bn.scale.shape[0]:
        raise ShapeError(
            f"batch norm over {bn.scale.shape[0]} channels got input {x.shape}"
        )


def _bn_batch_stats(x: Tensor):
    if x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs a batch of at least 2")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def bn_forward(x: Tensor, bn: BatchNormLayer, train: bool) -> Tensor:
    """Per-channel normalization.  Train mode updates running statistics in place."""
    _bn_check(x, bn)
    if train:
        mean, var = _bn_batch_stats(x)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        bn.running_mean *= 1.0 - bn.momentum
        bn.running_mean += bn.momentum * mean
        bn.running_var *= 1.0 - bn.momentum
        bn.running_var += bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mean[:, None, None]) * inv[:, None, None]
    return xhat * bn.scale[:, None, None] + bn.shift[:, None, None]


def bn_backward(
    x: Tensor, bn: BatchNormLayer, grad_out: Tensor, train: bool
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_scale, grad_shift)."""
    _bn_check(x, bn)
    if grad_out.shape != x.shape:
        raise ShapeError(f"bn: grad_out {grad_out.shape} vs input {x.shape}")
    if train:
        mean, var = _bn_batch_stats(x)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mean[:, None, None]) * inv[:, None, None]
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * bn.scale[:, None, None]
    if not train:
        return gxhat * inv[:, None, None], grad_scale, grad_shift
    count = x.shape[0] * x.shape[2] * x.shape[3]
    grad_x = (
        inv[:, None, None]
        / count
        * (
            count * gxhat
            - gxhat.sum(axis=(0, 2, 3))[:, None, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
        )
    )
    return grad_x, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# MSDT binary container
# ---------------------------------------------------------------------------


def to_msdt_bytes(t: Tensor) -> bytes:
    t = as_tensor(t)
    head = MSDT_MAGIC + struct.pack("<II", MSDT_VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.astype("<f8").tobytes()


def from_msdt_bytes(buf: bytes) -> Tensor:
    if len(buf) < 12 or buf[:4] != MSDT_MAGIC:
        raise ValueError("not an MSDT container (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != MSDT_VERSION:
        raise ValueError(f"unsupported MSDT version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise ValueError("MSDT payload length does not match extents")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(shape)


def save_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(to_msdt_bytes(t))


def load_tensor(path) -> Tensor:
    return from_msdt_bytes(Path(path).read_bytes())
