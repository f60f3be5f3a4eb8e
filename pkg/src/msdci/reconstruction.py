"""Reconstruction networks and the end-to-end sampling/reconstruction pipeline.

Phase 1 is a linear initial reconstruction: a bias-free 1x1 convolution maps
the measurements of each block position to the block's pixels, which are then
reshaped and tiled back into the image (raster order).  Phase 2 adds a plain
five-layer convolutional enhancer, phase 3 a one-level wavelet U-block.  Both
enhancers are residual and their last convolution starts at zero, so a newly
added phase leaves the previous phase's output untouched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .decomposition import Decomposition, decompose_backward, dwt_haar_forward, dwt_haar_inverse
from .sampling import (
    SamplingScheme,
    build_scheme,
    check_extent,
    decompose_for,
    default_decomposition,
    measure,
    measure_backward,
    measurement_shape,
)
from .tensor_core import (
    BatchNormLayer,
    ConvLayer,
    ShapeError,
    Tensor,
    bn_backward,
    bn_forward,
    conv2d_backward,
    conv2d_forward,
    load_tensor,
    make_rng,
    relu_backward,
    save_tensor,
)


# ---------------------------------------------------------------------------
# Block reshaping
# ---------------------------------------------------------------------------


def blocks_to_image(z: Tensor, block: int) -> Tensor:
    """``(N, b*b, Gh, Gw) -> (N, 1, Gh*b, Gw*b)``; channel ``i*b + j`` is pixel (i, j)."""
    n, c, gh, gw = z.shape
    if c != block * block:
        raise ShapeError(f"expected {block * block} channels for block {block}, got {c}")
    return (
        z.reshape(n, block, block, gh, gw)
        .transpose(0, 3, 1, 4, 2)
        .reshape(n, 1, gh * block, gw * block)
    )


def image_to_blocks(x: Tensor, block: int) -> Tensor:
    """Inverse of :func:`blocks_to_image`."""
    n, c, h, w = x.shape
    if c != 1 or h % block or w % block:
        raise ShapeError(f"cannot cut {x.shape} into {block}x{block} blocks")
    gh, gw = h // block, w // block
    return np.ascontiguousarray(
        x.reshape(n, gh, block, gw, block)
        .transpose(0, 2, 4, 1, 3)
        .reshape(n, block * block, gh, gw)
    )


# ---------------------------------------------------------------------------
# Phase 1: initial reconstruction
# ---------------------------------------------------------------------------


@dataclass
class InitialRecon:
    """One bias-free 1x1 conv per sampling layer; pyramid scales are summed."""

    layers: list
    block: int

    def __post_init__(self):
        for layer in self.layers:
            if layer.kernel_size != (1, 1) or layer.bias is not None:
                raise ValueError("initial reconstruction uses bias-free 1x1 convolutions")
            if layer.out_channels != self.block * self.block:
                raise ValueError(
                    f"out_channels {layer.out_channels} != block^2 = {self.block ** 2}"
                )

    @classmethod
    def build(cls, scheme: SamplingScheme, rng: np.random.Generator) -> "InitialRecon":
        b = scheme.recon_block
        return cls([ConvLayer.init(b * b, m, 1, rng) for m in scheme.allocation], b)

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"init.{i}.weight": l.weights for i, l in enumerate(self.layers)}


def _split_measurements(y: Tensor, init: InitialRecon) -> list[Tensor]:
    counts = [l.in_channels for l in init.layers]
    if y.ndim != 4 or y.shape[1] != sum(counts):
        raise ShapeError(
            f"measurement channels {y.shape[1] if y.ndim == 4 else y.shape} "
            f"do not match reconstruction inputs {counts}"
        )
    edges = np.cumsum(counts)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(y, edges, axis=1)]


def initial_reconstruct(measurements: Tensor, init: InitialRecon) -> Tensor:
    """Linear per-block recovery followed by reshape-and-tile."""
    parts = _split_measurements(measurements, init)
    out = None
    for part, layer in zip(parts, init.layers):
        img = blocks_to_image(conv2d_forward(part, layer), init.block)
        out = img if out is None else out + img
    return out


def initial_reconstruct_backward(
    measurements: Tensor, init: InitialRecon, grad_image: Tensor
) -> tuple[Tensor, list[Tensor]]:
    parts = _split_measurements(measurements, init)
    gz = image_to_blocks(grad_image, init.block)
    grads_y, grads_w = [], []
    for part, layer in zip(parts, init.layers):
        gy, gw, _ = conv2d_backward(part, layer, gz)
        grads_y.append(gy)
        grads_w.append(gw)
    return np.concatenate(grads_y, axis=1), grads_w


# ---------------------------------------------------------------------------
# Phase 2: plain convolutional enhancer
# ---------------------------------------------------------------------------


class EnhanceV1:
    """Five 3x3 convolutions (1 -> w -> w -> w -> w -> 1), ReLU after the first four."""

    prefix = "enh1"

    def __init__(self, layers: list, residual: bool = True):
        if len(layers) != 5:
            raise ValueError("EnhanceV1 has exactly five convolutions")
        self.layers = layers
        self.residual = residual
        self._cache = None

    @classmethod
    def build(cls, rng, width: int = 64, residual: bool = True, zero_head: bool = True):
        widths = [1, width, width, width, width, 1]
        layers = []
        for i in range(5):
            layers.append(
                ConvLayer.init(
                    widths[i + 1], widths[i], 3, rng, bias=True, padding=1,
                    activation="relu" if i < 4 else "none",
                )
            )
        if zero_head:
            layers[-1].weights[...] = 0.0
            layers[-1].bias[...] = 0.0
        return cls(layers, residual)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, l in enumerate(self.layers):
            params[f"{self.prefix}.{i}.weight"] = l.weights
            params[f"{self.prefix}.{i}.bias"] = l.bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        acts = [x]
        h = x
        for layer in self.layers:
            h = conv2d_forward(h, layer)
            acts.append(h)
        self._cache = acts
        return x + h if self.residual else h

    def backward(self, grad: Tensor) -> tuple[Tensor, dict]:
        acts = self._cache
        grads = {}
        g = grad
        for i in reversed(range(5)):
            layer = self.layers[i]
            g_in, gw, gb = conv2d_backward(acts[i], layer, g, out=acts[i + 1])
            grads[f"{self.prefix}.{i}.weight"] = gw
            grads[f"{self.prefix}.{i}.bias"] = gb
            g = g_in
        if self.residual:
            g = g + grad
        return g, grads


# ---------------------------------------------------------------------------
# Phase 3: wavelet U-block enhancer
# ---------------------------------------------------------------------------


class EnhanceV2:
    """Simplified multi-level wavelet CNN with a single wavelet level.

    conv-bn-relu x2 at full resolution (``width`` channels), Haar DWT of every
    feature map, conv-bn-relu x2 on ``4*width`` channels, inverse DWT plus an
    additive skip from the pre-DWT features, conv-bn-relu x2, and a final 3x3
    convolution to one channel.  A residual connection adds the input.
    """

    prefix = "enh2"

    def __init__(self, convs: list, bns: list, residual: bool = True):
        if len(convs) != 7 or len(bns) != 6:
            raise ValueError("EnhanceV2 needs 7 convolutions and 6 batch norms")
        self.convs = convs
        self.bns = bns
        self.residual = residual
        self._cache = None
        self._train = False

    @classmethod
    def build(cls, rng, width: int = 64, residual: bool = True, zero_head: bool = True):
        wide = 4 * width
        shapes = [(width, 1), (width, width), (wide, wide), (wide, wide),
                  (width, width), (width, width)]
        convs = [ConvLayer.init(o, i, 3, rng, padding=1) for o, i in shapes]
        convs.append(ConvLayer.init(1, width, 3, rng, bias=True, padding=1))
        if zero_head:
            convs[-1].weights[...] = 0.0
            convs[-1].bias[...] = 0.0
        bns = [BatchNormLayer.init(o) for o, _ in shapes]
        return cls(convs, bns, residual)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, c in enumerate(self.convs):
            params[f"{self.prefix}.conv{i}.weight"] = c.weights
            if c.bias is not None:
                params[f"{self.prefix}.conv{i}.bias"] = c.bias
        for i, bn in enumerate(self.bns):
            params[f"{self.prefix}.bn{i}.scale"] = bn.scale
            params[f"{self.prefix}.bn{i}.shift"] = bn.shift
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for i, bn in enumerate(self.bns):
            bufs[f"{self.prefix}.bn{i}.running_mean"] = bn.running_mean
            bufs[f"{self.prefix}.bn{i}.running_var"] = bn.running_var
        return bufs

    def _cbr(self, i: int, x: Tensor, train: bool, cache: list) -> Tensor:
        z = conv2d_forward(x, self.convs[i])
        zb = bn_forward(z, self.bns[i], train)
        cache.append((x, z, zb))
        return np.maximum(zb, 0.0)

    def _cbr_back(self, i: int, g: Tensor, cache: tuple, grads: dict) -> Tensor:
        x, z, zb = cache
        g = relu_backward(zb, g)
        gz, gs, gsh = bn_backward(z, self.bns[i], g, self._train)
        gx, gw, _ = conv2d_backward(x, self.convs[i], gz)
        grads[f"{self.prefix}.bn{i}.scale"] = gs
        grads[f"{self.prefix}.bn{i}.shift"] = gsh
        grads[f"{self.prefix}.conv{i}.weight"] = gw
        return gx

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"EnhanceV2 needs even extents, got {h}x{w}")
        self._train = train
        cache = []
        f = self._cbr(0, x, train, cache)
        skip = self._cbr(1, f, train, cache)
        f = dwt_haar_forward(skip)
        f = self._cbr(2, f, train, cache)
        f = self._cbr(3, f, train, cache)
        f = dwt_haar_inverse(f) + skip
        f = self._cbr(4, f, train, cache)
        f = self._cbr(5, f, train, cache)
        out = conv2d_forward(f, self.convs[6])
        self._cache = (cache, f)
        return x + out if self.residual else out

    def backward(self, grad: Tensor) -> tuple[Tensor, dict]:
        cache, f = self._cache
        grads = {}
        g, gw, gb = conv2d_backward(f, self.convs[6], grad)
        grads[f"{self.prefix}.conv6.weight"] = gw
        grads[f"{self.prefix}.conv6.bias"] = gb
        g = self._cbr_back(5, g, cache[5], grads)
        g = self._cbr_back(4, g, cache[4], grads)
        g_skip = g
        g = dwt_haar_forward(g)
        g = self._cbr_back(3, g, cache[3], grads)
        g = self._cbr_back(2, g, cache[2], grads)
        g = dwt_haar_inverse(g) + g_skip
        g = self._cbr_back(1, g, cache[1], grads)
        g = self._cbr_back(0, g, cache[0], grads)
        if self.residual:
            g = g + grad
        return g, grads


def enhance(image: Tensor, stage, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if image.ndim != 4 or image.shape[1] != 1:
        raise ShapeError(f"enhance expects (N, 1, H, W), got {image.shape}")
    return stage.forward(image, train=mode == "train")


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineState:
    decomposition: Decomposition
    scheme: SamplingScheme
    initial: InitialRecon
    enhance1: Optional[EnhanceV1] = None
    enhance2: Optional[EnhanceV2] = None
    phase: int = 1
    optimizer: object = None
    seed: int = 0
    width: int = 64
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ValueError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.phase == 1 and (self.enhance1 or self.enhance2):
            raise ValueError("phase 1 has no enhance stages")
        if self.phase == 2 and (self.enhance1 is None or self.enhance2 is not None):
            raise ValueError("phase 2 has exactly the first enhance stage")
        if self.phase == 3 and (self.enhance1 is None or self.enhance2 is None):
            raise ValueError("phase 3 has both enhance stages")

    def stages(self) -> list:
        return [s for s in (self.enhance1, self.enhance2) if s is not None]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        params.update(self.decomposition.parameters())
        params.update(self.scheme.parameters())
        params.update(self.initial.parameters())
        for stage in self.stages():
            params.update(stage.parameters())
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        for stage in self.stages():
            bufs.update(stage.buffers())
        return bufs

    def forward(
        self, image: Tensor, rng: Optional[np.random.Generator] = None, train: bool = False
    ) -> Tensor:
        check_extent(image, self.scheme)
        stack = decompose_for(image, self.decomposition)
        noise = None
        if self.scheme.noise_sigma > 0:
            if rng is None:
                raise ValueError("a generator is required when noise_sigma > 0")
            noise = rng.normal(
                0.0, self.scheme.noise_sigma, size=measurement_shape(image.shape, self.scheme)
            )
        y = measure(stack, self.scheme, noise)
        x0 = initial_reconstruct(y, self.initial)
        out = x0
        for stage in self.stages():
            out = stage.forward(out, train=train)
        self._cache = {"image": image, "stack": stack, "y": y}
        return out

    def backward(self, grad: Tensor) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(grad * forward(...))`` for the last forward."""
        c = self._cache
        grads = {}
        g = grad
        for stage in reversed(self.stages()):
            g, sg = stage.backward(g)
            grads.update(sg)
        gy, gws = initial_reconstruct_backward(c["y"], self.initial, g)
        for i, gw in enumerate(gws):
            grads[f"init.{i}.weight"] = gw
        train_decomp = self.decomposition.trainable and self.decomposition.kind == "scale_space"
        gstack, layer_grads = measure_backward(
            c["stack"], self.scheme, gy, c["y"], need_input_grad=train_decomp
        )
        for i, (gw, gb) in enumerate(layer_grads):
            grads[f"sample.{i}.weight"] = gw
            if gb is not None:
                grads[f"sample.{i}.bias"] = gb
        if train_decomp:
            _, dgrads = decompose_backward(
                c["image"], self.decomposition, gstack, need_input_grad=False
            )
            for i, gw in enumerate(dgrads):
                grads[f"decomp.{i}.weight"] = gw
        return grads


def build_pipeline(
    kind: str,
    block_size: int,
    subrate: float,
    seed: int = 0,
    linearity_mode: str = "linear",
    noise_sigma: float = 0.0,
    decomposition: Optional[str] = None,
    decomp_trainable: bool = True,
    width: int = 64,
) -> PipelineState:
    """Fresh phase-1 pipeline; all weights drawn from a generator seeded with ``seed``."""
    rng = make_rng(seed)
    if decomposition is None:
        decomp = default_decomposition(kind, trainable=decomp_trainable)
    else:
        decomp = Decomposition.build(decomposition, trainable=decomp_trainable)
    scheme = build_scheme(kind, block_size, subrate, rng, linearity_mode, noise_sigma)
    init = InitialRecon.build(scheme, rng)
    return PipelineState(decomp, scheme, init, phase=1, seed=seed, width=width)


def advance_phase(state: PipelineState, rng: np.random.Generator) -> PipelineState:
    """Copy of ``state`` one phase later, with a zero-headed new enhance stage."""
    if state.phase >= 3:
        raise ValueError("phase 3 is the last phase")
    enhance1 = copy.deepcopy(state.enhance1)
    enhance2 = None
    if state.phase == 1:
        enhance1 = EnhanceV1.build(rng, width=state.width)
    else:
        enhance2 = EnhanceV2.build(rng, width=state.width)
    return PipelineState(
        copy.deepcopy(state.decomposition),
        copy.deepcopy(state.scheme),
        copy.deepcopy(state.initial),
        enhance1,
        enhance2,
        phase=state.phase + 1,
        seed=state.seed,
        width=state.width,
    )


def forward_pipeline(
    image: Tensor, state: PipelineState, rng=None, mode: str = "eval"
) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return state.forward(image, rng, train=mode == "train")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(state: PipelineState, directory, **extra) -> Path:
    """Write ``manifest.txt`` plus one MSDT file per parameter and buffer."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    s = state.scheme
    meta = {
        "scheme": s.kind,
        "block_size": s.block_size,
        "subrate": repr(s.subrate),
        "linearity_mode": s.linearity_mode,
        "noise_sigma": repr(s.noise_sigma),
        "decomposition": state.decomposition.kind,
        "decomp_trainable": int(state.decomposition.trainable),
        "phase": state.phase,
        "seed": state.seed,
        "width": state.width,
        "residual1": int(state.enhance1.residual) if state.enhance1 else 1,
        "residual2": int(state.enhance2.residual) if state.enhance2 else 1,
    }
    meta.update(extra)
    tensors = {**state.parameters(), **state.buffers()}
    lines = [f"{k}={v}" for k, v in meta.items()]
    for name, arr in tensors.items():
        lines.append(f"shape.{name}={'x'.join(str(n) for n in arr.shape)}")
        save_tensor(arr, d / f"{name}.msdt")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_manifest(directory) -> dict[str, str]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_checkpoint(directory) -> tuple[PipelineState, dict[str, str]]:
    d = Path(directory)
    meta = read_manifest(d)
    state = build_pipeline(
        meta["scheme"],
        int(meta["block_size"]),
        float(meta["subrate"]),
        seed=int(meta["seed"]),
        linearity_mode=meta["linearity_mode"],
        noise_sigma=float(meta["noise_sigma"]),
        decomposition=meta["decomposition"],
        decomp_trainable=bool(int(meta["decomp_trainable"])),
        width=int(meta["width"]),
    )
    rng = make_rng(0)
    for _ in range(int(meta["phase"]) - 1):
        state = advance_phase(state, rng)
    if state.enhance1:
        state.enhance1.residual = bool(int(meta.get("residual1", 1)))
    if state.enhance2:
        state.enhance2.residual = bool(int(meta.get("residual2", 1)))
    tensors = {**state.parameters(), **state.buffers()}
    for name, arr in tensors.items():
        loaded = load_tensor(d / f"{name}.msdt")
        if loaded.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {loaded.shape} != {arr.shape}")
        arr[...] = loaded
    return state, meta
