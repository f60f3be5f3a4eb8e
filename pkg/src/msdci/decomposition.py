"""Linear multi-scale decompositions realised as convolution layers.

Three concrete kinds are supported:

* ``identity``      single-scale, the image passes through unchanged;
* ``haar_dwt``      one-level orthonormal Haar wavelet (fixed 2x2 kernels,
                    stride 2), bands ordered LL, LH, HL, HH;
* ``scale_space``   four learnable smoothing convolutions of size 3, 5, 7 and
                    9 at full resolution, initialised as Gaussians.

``pyramid_marker`` carries no kernels.  A pyramid is built in the sampling
stage from dilated convolutions; pairing it with a ``scale_space``
decomposition gives smoothing followed by grid subsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ConvLayer, ShapeError, Tensor, conv2d_backward, conv2d_forward

KINDS = ("identity", "haar_dwt", "scale_space", "pyramid_marker")
SCALE_SPACE_KERNELS = (3, 5, 7, 9)
HAAR_BANDS = ("LL", "LH", "HL", "HH")


def dwt_haar_forward(x: Tensor) -> Tensor:
    """One-level orthonormal Haar transform of every channel.

    ``(N, C, H, W) -> (N, 4C, H/2, W/2)``.  Output channels are band-major:
    all LL planes first, then LH, HL and HH.  For each 2x2 block
    ``[[a, b], [c, d]]``::

        LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2
        HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
    """
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW tensor, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"Haar DWT needs even extents, got {h}x{w}")
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return np.concatenate([ll, lh, hl, hh], axis=1)


def dwt_haar_inverse(bands: Tensor) -> Tensor:
    """Exact inverse of :func:`dwt_haar_forward` (also its adjoint)."""
    if bands.ndim != 4 or bands.shape[1] % 4:
        raise ShapeError(
            f"inverse Haar needs a multiple of 4 channels, got shape {bands.shape}"
        )
    n, c4, h, w = bands.shape
    c = c4 // 4
    ll, lh, hl, hh = (bands[:, i * c : (i + 1) * c] for i in range(4))
    out = np.empty((n, c, 2 * h, 2 * w))
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def haar_conv_layer() -> ConvLayer:
    """The Haar analysis as a fixed 2x2, stride-2 convolution (4 output channels)."""
    w = 0.5 * np.array(
        [
            [[1, 1], [1, 1]],
            [[1, -1], [1, -1]],
            [[1, 1], [-1, -1]],
            [[1, -1], [-1, 1]],
        ],
        dtype=np.float64,
    )
    return ConvLayer(w[:, None], stride=2)


def gaussian_kernel(size: int) -> np.ndarray:
    sigma = size / 6.0
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


@dataclass
class Decomposition:
    kind: str
    layers: list = field(default_factory=list)
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown decomposition kind {self.kind!r}")
        if self.kind == "haar_dwt":
            if self.trainable:
                raise ValueError("Haar decomposition kernels are fixed")
            if not self.layers:
                self.layers = [haar_conv_layer()]
        if self.kind == "scale_space":
            sizes = tuple(layer.kernel_size[0] for layer in self.layers)
            if sizes != SCALE_SPACE_KERNELS:
                raise ValueError(
                    f"scale-space needs kernels {SCALE_SPACE_KERNELS}, got {sizes}"
                )
            for layer in self.layers:
                k = layer.kernel_size[0]
                if layer.stride != 1 or layer.padding != ((k - 1) // 2,) * 2:
                    raise ValueError("scale-space layers must preserve spatial extent")
                if layer.bias is not None or layer.activation != "none":
                    raise ValueError("decomposition layers are bias-free and linear")
        if self.kind in ("identity", "pyramid_marker") and self.layers:
            raise ValueError(f"{self.kind} decomposition carries no kernels")

    @property
    def level_count(self) -> int:
        return {"identity": 1, "haar_dwt": 4, "scale_space": 4, "pyramid_marker": 4}[
            self.kind
        ]

    @property
    def out_channels(self) -> int:
        return 1 if self.kind in ("identity", "pyramid_marker") else 4

    @property
    def labels(self) -> tuple[str, ...]:
        if self.kind == "haar_dwt":
            return HAAR_BANDS
        if self.kind == "scale_space":
            return tuple(f"s{k}" for k in SCALE_SPACE_KERNELS)
        return ("x",)

    def downscale(self) -> int:
        """Spatial reduction factor of the decomposed stack."""
        return 2 if self.kind == "haar_dwt" else 1

    @classmethod
    def build(cls, kind: str, trainable: bool = True) -> "Decomposition":
        if kind == "scale_space":
            layers = [
                ConvLayer(gaussian_kernel(k)[None, None], padding=(k - 1) // 2)
                for k in SCALE_SPACE_KERNELS
            ]
            return cls(kind, layers, trainable=trainable)
        return cls(kind)

    def parameters(self) -> dict[str, np.ndarray]:
        if not self.trainable:
            return {}
        return {f"decomp.{i}.weight": l.weights for i, l in enumerate(self.layers)}


def decompose(image: Tensor, decomp: Decomposition) -> Tensor:
    """Apply the decomposition to a single-channel batch ``(N, 1, H, W)``."""
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"decompose expects (N, 1, H, W), got {image.shape}")
    if decomp.kind == "identity":
        return image
    if decomp.kind == "haar_dwt":
        return dwt_haar_forward(image)
    if decomp.kind == "scale_space":
        return np.concatenate([conv2d_forward(image, l) for l in decomp.layers], axis=1)
    raise ValueError("pyramid_marker has no standalone decomposition")


def decompose_backward(
    image: Tensor, decomp: Decomposition, grad_stack: Tensor, need_input_grad: bool = True
) -> tuple[Tensor | None, list[Tensor]]:
    """Gradient w.r.t. the image and each decomposition kernel."""
    if decomp.kind == "identity":
        return grad_stack, []
    if decomp.kind == "haar_dwt":
        return (dwt_haar_inverse(grad_stack) if need_input_grad else None), []
    if decomp.kind == "scale_space":
        grad_img = np.zeros_like(image) if need_input_grad else None
        grads = []
        for i, layer in enumerate(decomp.layers):
            gx, gw, _ = conv2d_backward(
                image, layer, grad_stack[:, i : i + 1], need_input_grad=need_input_grad
            )
            if need_input_grad:
                grad_img += gx
            grads.append(gw)
        return grad_img, grads
    raise ValueError("pyramid_marker has no standalone decomposition")
