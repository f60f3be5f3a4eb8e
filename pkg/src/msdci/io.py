"""Image files, training patches and run configuration.

Config files are INI-style (``configparser``): ``key = value`` lines grouped
under ``[scheme]``, ``[train]``, ``[data]`` and ``[output]`` sections.  See
``RunConfig`` for the recognised keys and README.md for the full grammar.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor_core import Tensor

LUMA = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM / PNG
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _read_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise ImageFormatError("only binary PGM (P5) is supported")
    pos = 2
    values = []
    for _ in range(3):
        m = _PGM_TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("corrupt PGM header")
        try:
            values.append(int(m.group(1)))
        except ValueError as e:
            raise ImageFormatError("corrupt PGM header") from e
        pos = m.end()
    width, height, maxval = values
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    data = buf[pos : pos + width * height]
    if len(data) != width * height:
        raise ImageFormatError("PGM payload shorter than header extents")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def _write_pgm(pixels: np.ndarray, path: Path) -> None:
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.format != "PNG":
            raise ImageFormatError(f"{path} is not a PNG file")
        if im.mode in ("I", "I;16", "I;16B", "I;16L", "F") or im.info.get("bitdepth", 8) > 8:
            raise ImageFormatError(f"unsupported format: {im.mode} PNG (need 8-bit)")
        if im.mode == "P":
            im = im.convert("RGB")
        if im.mode in ("LA", "RGBA"):
            im = im.convert(im.mode[:-1])
        arr = np.asarray(im)
    if arr.ndim == 3:
        return to_gray(arr)
    return arr.astype(np.float64)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion, 0.299 R + 0.587 G + 0.114 B, on the input's scale."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    return rgb[..., :3] @ np.array(LUMA)


def load_image(path) -> Tensor:
    """Read an 8-bit PGM (P5) or PNG as a ``(1, 1, H, W)`` tensor in [0, 1]."""
    path = Path(path)
    head = path.read_bytes()[:8]
    if head[:2] == b"P5":
        pixels = _read_pgm(path.read_bytes()).astype(np.float64)
    elif head == b"\x89PNG\r\n\x1a\n":
        pixels = _read_png(path)
    else:
        raise ImageFormatError(f"unsupported image format: {path}")
    return (pixels / 255.0)[None, None]


def quantize(image) -> np.ndarray:
    """Map [0, 1] values to 8-bit with round-half-up, clipping outside values."""
    arr = np.asarray(image, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(tensor, path) -> None:
    path = Path(path)
    pixels = quantize(tensor)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        _write_pgm(pixels, path)
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(pixels, mode="L").save(path)
    else:
        raise ImageFormatError(f"unsupported output format {suffix!r}")


# ---------------------------------------------------------------------------
# Patch datasets
# ---------------------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray  # (1, 1, p, p)
    source: str
    offset: tuple


@dataclass
class Dataset:
    patches: list
    patch_size: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.patches)

    def stack(self) -> np.ndarray:
        if not self.patches:
            return np.zeros((0, 1, self.patch_size, self.patch_size))
        return np.concatenate([p.image for p in self.patches], axis=0)


def extract_patches(images, p: int, count: int, rng: np.random.Generator,
                    split: str = "train") -> Dataset:
    """``count`` patches with uniformly random top-left corners.

    ``images`` is a list of ``(source_name, 2-D array)`` pairs; each patch picks
    its source image uniformly, then its offset.
    """
    images = [(name, np.asarray(img, dtype=np.float64).reshape(img.shape[-2:]))
              for name, img in images]
    for name, img in images:
        if img.shape[0] < p or img.shape[1] < p:
            raise ValueError(f"image {name} ({img.shape}) is smaller than patch size {p}")
    patches = []
    for _ in range(count):
        name, img = images[int(rng.integers(len(images)))]
        r = int(rng.integers(img.shape[0] - p + 1))
        c = int(rng.integers(img.shape[1] - p + 1))
        patches.append(Patch(img[r : r + p, c : c + p].copy()[None, None], name, (r, c)))
    return Dataset(patches, p, split)


TRAIN_CORPUS = ("astronaut", "brick", "coffee", "coins", "grass", "gravel", "moon",
                "page", "rocket", "text", "clock", "immunohistochemistry")
HELDOUT_CORPUS = ("camera", "chelsea", "cell")


def builtin_images(names) -> list[tuple[str, np.ndarray]]:
    """Grayscale [0, 1] versions of images bundled with scikit-image."""
    from skimage import data

    out = []
    for name in names:
        img = np.asarray(getattr(data, name)())
        if img.ndim == 3:
            img = to_gray(img)
        out.append((f"skimage:{name}", img.astype(np.float64) / 255.0))
    return out


def load_images(paths) -> list[tuple[str, np.ndarray]]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(f for f in p.iterdir()
                                if f.suffix.lower() in (".pgm", ".png")))
        else:
            files.append(p)
    return [(str(f), load_image(f)[0, 0]) for f in files]


def desk_datasets(cfg: "RunConfig") -> tuple[Dataset, Dataset]:
    """Training and held-out patch sets, reproducible from ``cfg.seed``."""
    train_src = load_images(cfg.train_paths) if cfg.train_paths else builtin_images(TRAIN_CORPUS)
    held_src = (load_images(cfg.heldout_paths) if cfg.heldout_paths
                else builtin_images(HELDOUT_CORPUS))
    ss = np.random.SeedSequence([cfg.seed, 2024])
    r_train, r_held = (np.random.default_rng(s) for s in ss.spawn(2))
    train = extract_patches(train_src, cfg.patch_size, cfg.train_count, r_train, "train")
    held = extract_patches(held_src, cfg.patch_size, cfg.heldout_count, r_held, "heldout")
    return train, held


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_SECTIONS = {
    "scheme": ("scheme", "block_size", "subrate", "linearity_mode", "noise_sigma",
               "decomposition", "decomp_trainable", "width"),
    "train": ("epochs_per_lr", "lr_schedule", "batch_size", "phases", "seed", "clip_grad"),
    "data": ("patch_size", "train_count", "heldout_count", "train_paths", "heldout_paths"),
    "output": ("out_dir",),
}


@dataclass
class RunConfig:
    scheme: str = "single"
    block_size: int = 32
    subrate: float = 0.1
    linearity_mode: str = "linear"
    noise_sigma: float = 0.0
    decomposition: Optional[str] = None
    decomp_trainable: bool = True
    width: int = 64
    epochs_per_lr: int = 10
    lr_schedule: tuple = (0.001, 0.0005, 0.0001)
    batch_size: int = 8
    phases: tuple = (1, 2, 3)
    seed: int = 0
    clip_grad: Optional[float] = None
    patch_size: int = 64
    train_count: int = 200
    heldout_count: int = 20
    train_paths: tuple = ()
    heldout_paths: tuple = ()
    out_dir: str = "runs/default"

    def __post_init__(self):
        from .sampling import SCHEME_KINDS

        self.scheme = self.scheme.replace("-", "_")
        if self.scheme not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.subrate <= 1:
            raise ValueError(f"subrate must lie in (0, 1], got {self.subrate}")
        for p in (*self.train_paths, *self.heldout_paths):
            if not Path(p).exists():
                raise FileNotFoundError(f"dataset path does not exist: {p}")

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(
            epochs_per_lr=self.epochs_per_lr, lr_schedule=self.lr_schedule,
            batch_size=self.batch_size, seed=self.seed, phases=self.phases,
            clip_grad=self.clip_grad,
        )


def _parse_value(name: str, text: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    text = text.strip()
    if name in ("lr_schedule",):
        return tuple(float(v) for v in text.replace(",", " ").split())
    if name == "phases":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if name in ("train_paths", "heldout_paths"):
        return tuple(v for v in text.replace(",", " ").split())
    if text.lower() in ("", "none") and "Optional" in str(kind):
        return None
    if kind in ("int", int):
        return int(text)
    if kind in ("float", float):
        return float(text)
    if kind in ("bool", bool):
        return text.lower() in ("1", "true", "yes", "on")
    if "Optional[float]" in str(kind):
        return float(text)
    return text


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    values = asdict(cfg)
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = values[key]
            if isinstance(v, (tuple, list)):
                v = " ".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif v is None:
                v = "none"
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)
