"""Image quality metrics and diagnostics of learned samplers."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .decomposition import Decomposition, HAAR_BANDS, SCALE_SPACE_KERNELS
from .sampling import SamplingScheme
from .tensor_core import ShapeError, Tensor

PSNR_CAP = 99.0


def _as_image(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:]) if arr.size == np.prod(arr.shape[-2:]) else arr
    if arr.ndim != 2:
        raise ShapeError(f"expected a single grayscale image, got shape {np.shape(x)}")
    return arr


def psnr(x: Tensor, y: Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes differ, {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(x, y, peak: float = 1.0, size: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Local SSIM over every fully contained Gaussian window."""
    x, y = _as_image(x), _as_image(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ, {x.shape} vs {y.shape}")
    if min(x.shape) < size:
        raise ShapeError(f"ssim needs extents >= {size}, got {x.shape}")
    g = gaussian_window(size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, peak: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    return float(ssim_map(x, y, peak).mean())


# ---------------------------------------------------------------------------
# Learned kernel diagnostics
# ---------------------------------------------------------------------------


@dataclass
class VarianceProfile:
    labels: list
    values: list  # one descending array per label

    def __len__(self) -> int:
        return int(sum(len(v) for v in self.values))

    def rows(self):
        for label, vals in zip(self.labels, self.values):
            for rank, v in enumerate(vals):
                yield label, rank, float(v)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scale_label", "rank", "variance"])
            for label, rank, v in self.rows():
                w.writerow([label, rank, repr(v)])


def _layer_labels(scheme: SamplingScheme) -> list[str]:
    if scheme.kind == "pyramid":
        return [f"d{l.dilation}" for l in scheme.sampling_layers]
    return [scheme.kind]


def kernel_variance_profile(scheme: SamplingScheme) -> VarianceProfile:
    """Population variance of every sampling kernel, sorted descending per layer."""
    values = []
    for layer in scheme.sampling_layers:
        w = layer.weights.reshape(layer.out_channels, -1)
        values.append(np.sort(w.var(axis=1))[::-1])
    return VarianceProfile(_layer_labels(scheme), values)


def band_variance_profile(scheme: SamplingScheme, decomp: Decomposition) -> VarianceProfile:
    """Kernel variance restricted to each decomposed channel (subband or scale).

    Only meaningful for cross-channel samplers (wavelet, scale-space).  The
    result has one group per channel, each as long as the kernel count.
    """
    layer = scheme.sampling_layers[0]
    if layer.in_channels == 1:
        return kernel_variance_profile(scheme)
    labels = list(HAAR_BANDS) if decomp.kind == "haar_dwt" else [
        f"s{k}" for k in SCALE_SPACE_KERNELS
    ]
    w = layer.weights.reshape(layer.out_channels, layer.in_channels, -1)
    values = [np.sort(w[:, c].var(axis=1))[::-1] for c in range(layer.in_channels)]
    return VarianceProfile(labels, values)


def render_grid(tiles, cols: int, separator: float = 1.0) -> np.ndarray:
    """Min-max normalise each tile and tile them raster-order with 1-pixel gaps.

    Constant tiles map to 0.5.
    """
    tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
    if not tiles:
        raise ValueError("render_grid needs at least one tile")
    h, w = tiles[0].shape
    if any(t.shape != (h, w) for t in tiles):
        raise ShapeError("all tiles must share one extent")
    cols = max(1, min(cols, len(tiles)))
    rows = -(-len(tiles) // cols)
    grid = np.full((rows * h + rows - 1, cols * w + cols - 1), separator)
    for k, t in enumerate(tiles):
        lo, hi = t.min(), t.max()
        norm = np.full_like(t, 0.5) if hi == lo else (t - lo) / (hi - lo)
        r, c = divmod(k, cols)
        grid[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = norm
    return grid


def kernel_tiles(scheme: SamplingScheme) -> list[np.ndarray]:
    """One 2-D tile per sampling kernel; multi-channel kernels are laid side by side."""
    tiles = []
    for layer in scheme.sampling_layers:
        for k in layer.weights:
            tiles.append(np.concatenate(list(k), axis=1))
    shapes = {t.shape for t in tiles}
    if len(shapes) > 1:
        # pyramid scales differ in kernel size: pad to the largest
        hmax = max(s[0] for s in shapes)
        wmax = max(s[1] for s in shapes)
        tiles = [np.pad(t, ((0, hmax - t.shape[0]), (0, wmax - t.shape[1])), mode="edge")
                 for t in tiles]
    return tiles


def measurement_tiles(measurements: Tensor) -> list[np.ndarray]:
    """Per-measurement maps over the block grid of the first sample."""
    y = np.asarray(measurements)
    if y.ndim != 4:
        raise ShapeError(f"expected (N, M, Gh, Gw) measurements, got {y.shape}")
    return [y[0, i] for i in range(y.shape[1])]


def write_profile_csv(profile: VarianceProfile, path) -> Path:
    profile.to_csv(path)
    return Path(path)
