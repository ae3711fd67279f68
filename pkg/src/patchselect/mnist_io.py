"""Digit glyph banks: MNIST IDX ingestion with offline fallbacks.

The benchmark needs a bank of 28x28 digit rasters bucketed by class.
``load_mnist`` reads the standard IDX pairs. ``ensure_digit_bank`` is the
lenient entry point used by the CLI: it tries local IDX files, then a
torchvision download, and finally falls back to upscaling the small
handwritten-digit set bundled with scikit-learn so that every environment
can run the pipeline end to end. The bank records which source was used and
the manifest echoes it.
"""

from __future__ import annotations

import gzip
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DIGIT_SIZE = 28

_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "validation": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

__all__ = ["DigitBank", "MnistIngestError", "load_mnist", "surrogate_bank", "ensure_digit_bank"]


class MnistIngestError(RuntimeError):
    pass


@dataclass
class DigitBank:
    """Per-class buckets of 28x28 float rasters in [0, 1]."""

    classes: list[np.ndarray]  # ten (n_c, 28, 28) float32 arrays
    source: str  # "mnist-idx" | "mnist-download" | "sklearn-digits"

    def glyph(self, class_id: int, glyph_index: int) -> np.ndarray:
        return self.classes[class_id][glyph_index]

    @property
    def class_sizes(self) -> list[int]:
        return [len(c) for c in self.classes]

    @property
    def n_total(self) -> int:
        return sum(self.class_sizes)

    def info(self, path: str | None = None) -> dict:
        return {"source": self.source, "path": path, "class_sizes": self.class_sizes}


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise MnistIngestError(f"cannot read IDX file {path}: {e}") from e
    if len(data) < 8:
        raise MnistIngestError(f"truncated IDX file: {path}")
    magic = int.from_bytes(data[:4], "big")
    ndim = magic & 0xFF
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC) or len(data) < 4 + 4 * ndim:
        raise MnistIngestError(f"bad IDX magic {magic:#x} in {path}")
    dims = [
        int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)
    ]
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != int(np.prod(dims)):
        raise MnistIngestError(f"IDX payload size mismatch in {path}")
    return arr.reshape(dims)


def _find_idx(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise MnistIngestError(f"MNIST IDX file not found: {root / stem}[.gz]")


def _bucket(images: np.ndarray, labels: np.ndarray, source: str) -> DigitBank:
    classes = [
        np.ascontiguousarray(images[labels == c], dtype=np.float32) for c in range(10)
    ]
    return DigitBank(classes=classes, source=source)


def load_mnist(source_path: str | Path, split: str = "train") -> DigitBank:
    """Load one MNIST split from IDX files under ``source_path``.

    Accepts raw or gzipped files with the standard names (also looks inside
    a ``MNIST/raw`` subdirectory, the torchvision layout).
    """
    root = Path(source_path)
    if (root / "MNIST" / "raw").is_dir():
        root = root / "MNIST" / "raw"
    img_stem, lbl_stem = _SPLIT_FILES[split]
    images = _read_idx(_find_idx(root, img_stem))
    labels = _read_idx(_find_idx(root, lbl_stem))
    if images.ndim != 3 or images.shape[1:] != (DIGIT_SIZE, DIGIT_SIZE):
        raise MnistIngestError(f"unexpected image dims {images.shape} under {root}")
    if len(images) != len(labels):
        raise MnistIngestError(f"image/label count mismatch under {root}")
    return _bucket(images.astype(np.float32) / 255.0, labels, "mnist-idx")


# Variants per base glyph in the surrogate bank. The bundled set has only
# ~900 glyphs per split; without expansion a capable encoder memorizes them
# as templates instead of learning class structure, so held-out canvases
# (drawn from the other split's glyphs) stay near chance.
SURROGATE_VARIANTS = 12


def _affine_variant(glyph: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Small random rotation/scale/shift of a [0, 1] raster, same size."""
    from PIL import Image

    angle = math.radians(rng.uniform(-12.0, 12.0))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-2.0, 2.0, size=2)
    center = (glyph.shape[0] - 1) / 2.0
    # PIL affine coefficients map output (x, y) back to input coordinates
    cos_a, sin_a = math.cos(angle) / scale, math.sin(angle) / scale
    cx = center - cos_a * (center + shift[0]) - sin_a * (center + shift[1])
    cy = center + sin_a * (center + shift[0]) - cos_a * (center + shift[1])
    img = Image.fromarray(glyph.astype(np.float32), mode="F")
    out = img.transform(
        img.size,
        Image.Transform.AFFINE,
        (cos_a, sin_a, cx, -sin_a, cos_a, cy),
        resample=Image.Resampling.BILINEAR,
    )
    return np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)


def surrogate_bank(split: str = "train") -> DigitBank:
    """Build a stand-in bank from scikit-learn's bundled 8x8 digits.

    Used when MNIST cannot be found or downloaded. The 8x8 rasters are
    upscaled to 28x28 with the same bilinear kernel the benchmark uses for
    digit scaling. Even/odd indices split into train/validation so the two
    banks are disjoint, and each base glyph is expanded into
    ``SURROGATE_VARIANTS`` deterministic affine variants (the first being
    the glyph itself) to restore the pool diversity the benchmark assumes
    of a full handwriting dataset.
    """
    from sklearn.datasets import load_digits

    from .dataset import scale_digit

    data = load_digits()
    images = data.images.astype(np.float32) / 16.0
    sel = np.arange(len(images)) % 2 == (0 if split == "train" else 1)
    glyphs, labels = [], []
    for base_index, (image, label) in enumerate(zip(images[sel], data.target[sel])):
        scaled = scale_digit(image, DIGIT_SIZE)
        glyphs.append(scaled)
        labels.append(label)
        rng = np.random.default_rng(
            np.random.SeedSequence([0x5A6B, 0 if split == "train" else 1, base_index])
        )
        for _ in range(SURROGATE_VARIANTS - 1):
            glyphs.append(_affine_variant(scaled, rng))
            labels.append(label)
    return _bucket(np.stack(glyphs), np.asarray(labels), "sklearn-digits")


def ensure_digit_bank(
    root: str | Path | None = None, split: str = "train"
) -> DigitBank:
    """Best-effort digit bank: local IDX, else download, else surrogate."""
    root = Path(root) if root else Path(
        os.environ.get("PATCHSELECT_DATA", "~/.cache/patchselect")
    ).expanduser() / "mnist"
    try:
        return load_mnist(root, split)
    except MnistIngestError:
        pass
    try:
        from torchvision.datasets import MNIST

        MNIST(str(root), train=True, download=True)
        return load_mnist(root, split)
    except Exception as e:
        logger.warning(
            "MNIST unavailable under %s (%s); falling back to the bundled "
            "scikit-learn digits as a surrogate bank",
            root,
            type(e).__name__,
        )
    return surrogate_bank(split)
