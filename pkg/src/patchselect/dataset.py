"""Synthetic high-resolution digit benchmark with Bezier-curve noise.

Each sample places five scaled digits on a large square canvas (three of
one majority class, two distinct distractors) plus a configurable number of
noise curves, and carries four labels: the majority class, the maximum
class value, the class of the topmost digit, and the 10-way presence
vector.

Samples are stored as compact placement records and rasterized lazily; a
full float canvas is materialized only when consumed. Generation is fully
deterministic: sample ``i`` of a split depends only on ``(seed, split, i)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .bezier import (
    DEFAULT_CONTROL_COUNTS,
    DEFAULT_CONTROL_PROBS,
    BezierSpec,
    discretize_curve,
    rasterize_glyph,
    sample_control_count,
    sample_control_points,
)
from .rng import stream

TASKS = ("maj", "max", "top", "multi")
N_CLASSES = 10
DIGITS_PER_CANVAS = 5
MAX_PLACEMENT_RETRIES = 1000

# Noise-count schedule: linear in digit size, clamped at zero.
NOISE_SLOPE = -7.14
NOISE_INTERCEPT = 1000.0

DATASET_FORMAT_VERSION = 1

__all__ = [
    "DatasetConfig",
    "DigitPlacement",
    "NoisePlacement",
    "TaskLabels",
    "CanvasSample",
    "GenerationError",
    "noise_count_auto",
    "o2i_ratio",
    "scale_digit",
    "place_digits",
    "compute_labels",
    "generate_sample",
    "generate_dataset",
    "rasterize_canvas",
    "save_dataset",
    "load_dataset",
]


class GenerationError(RuntimeError):
    """Raised when a sample cannot be constructed under the config."""


@dataclass(frozen=True)
class DatasetConfig:
    """Full recipe for one synthetic split."""

    canvas_size: int
    digit_size: int
    n_samples: int
    seed: int
    split: str = "train"
    noise_count: int | str = "auto"
    noise_thickness: float = 1.925
    noise_size: int | None = None  # defaults to digit_size
    tasks: tuple[str, ...] = TASKS

    def __post_init__(self):
        if self.digit_size > self.canvas_size:
            raise ValueError(
                f"digit size {self.digit_size} exceeds canvas {self.canvas_size}"
            )
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.noise_thickness <= 0:
            raise ValueError("noise_thickness must be positive")
        if self.split not in ("train", "validation"):
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks: {sorted(unknown)}")
        if self.noise_count != "auto" and int(self.noise_count) < 0:
            raise ValueError("noise_count must be 'auto' or >= 0")

    def resolved_noise_count(self) -> int:
        if self.noise_count == "auto":
            return noise_count_auto(self.digit_size)
        return int(self.noise_count)

    def resolved_noise_size(self) -> int:
        return self.digit_size if self.noise_size is None else int(self.noise_size)

    def to_json_dict(self) -> dict:
        return {
            "canvas_size": self.canvas_size,
            "digit_size": self.digit_size,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "split": self.split,
            "noise_count": self.noise_count,
            "noise_thickness": self.noise_thickness,
            "noise_size": self.noise_size,
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["tasks"] = tuple(d.get("tasks", TASKS))
        return cls(**d)


@dataclass(frozen=True)
class DigitPlacement:
    class_id: int
    top_left: tuple[int, int]  # (y, x)
    size: int
    glyph_index: int


@dataclass(frozen=True)
class NoisePlacement:
    spec: BezierSpec
    top_left: tuple[int, int]


@dataclass(frozen=True)
class TaskLabels:
    maj: int
    max: int
    top: int
    multi: np.ndarray = field(compare=False)  # (10,) uint8 presence vector


@dataclass(frozen=True)
class CanvasSample:
    digits: tuple[DigitPlacement, ...]
    noise: tuple[NoisePlacement, ...]
    labels: TaskLabels
    config: DatasetConfig
    index: int  # sample index; the rng substream is (seed, split, index)


def noise_count_auto(digit_size: int) -> int:
    """Noise glyph count for a digit size, on the linear schedule.

    Rounded half away from zero and clamped at 0 so the published anchor
    points (800/600/400/200 for sizes 28/56/84/112) are reproduced exactly.
    """
    if digit_size < 1:
        raise ValueError("digit_size must be >= 1")
    x = digit_size * NOISE_SLOPE + NOISE_INTERCEPT
    rounded = math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)
    return max(0, rounded)


def o2i_ratio(digit_size: float, canvas_size: float) -> float:
    """Object-to-image area ratio as a percentage."""
    if digit_size <= 0 or canvas_size <= 0:
        raise ValueError("sizes must be positive")
    return 100.0 * digit_size**2 / canvas_size**2


def scale_digit(glyph: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of a digit raster; values clamped to [0, 1].

    Resizing to the source size is an exact no-op.
    """
    if target_size < 1:
        raise ValueError("target_size must be >= 1")
    glyph = np.asarray(glyph, dtype=np.float32)
    if glyph.shape == (target_size, target_size):
        return glyph.copy()
    img = Image.fromarray(glyph, mode="F")
    resized = img.resize((target_size, target_size), Image.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def _boxes_overlap(a: tuple[int, int], b: tuple[int, int], size: int) -> bool:
    return abs(a[0] - b[0]) < size and abs(a[1] - b[1]) < size


def place_digits(
    rng: np.random.Generator,
    config: DatasetConfig,
    bank_sizes: "list[int] | np.ndarray",
) -> tuple[DigitPlacement, ...]:
    """Sample the five digit placements for one canvas.

    Three placements share a uniformly drawn majority class; the two
    distractors are distinct classes drawn without replacement from the
    rest. Positions are rejection-sampled until the five bounding boxes are
    pairwise disjoint.
    """
    if len(bank_sizes) != N_CLASSES or any(n <= 0 for n in bank_sizes):
        raise GenerationError("glyph bank must have at least one glyph per class")
    maj = int(rng.integers(N_CLASSES))
    others = [c for c in range(N_CLASSES) if c != maj]
    distractors = rng.choice(others, size=2, replace=False)
    class_ids = [maj, maj, maj, int(distractors[0]), int(distractors[1])]

    size = config.digit_size
    hi = config.canvas_size - size + 1
    placed: list[DigitPlacement] = []
    for cid in class_ids:
        glyph_index = int(rng.integers(bank_sizes[cid]))
        for _ in range(MAX_PLACEMENT_RETRIES):
            pos = (int(rng.integers(hi)), int(rng.integers(hi)))
            if all(not _boxes_overlap(pos, p.top_left, size) for p in placed):
                placed.append(DigitPlacement(cid, pos, size, glyph_index))
                break
        else:
            raise GenerationError(
                f"could not place 5 non-overlapping {size}px digits on a "
                f"{config.canvas_size}px canvas after {MAX_PLACEMENT_RETRIES} retries"
            )
    return tuple(placed)


def compute_labels(digits: tuple[DigitPlacement, ...]) -> TaskLabels:
    """Derive the four task labels from the digit placements.

    Topmost ties (equal top-edge y) are broken by the smaller x.
    """
    classes = [d.class_id for d in digits]
    counts = np.bincount(classes, minlength=N_CLASSES)
    maj = int(np.argmax(counts))
    if counts[maj] != 3:
        raise ValueError("placements do not have a thrice-occurring class")
    topmost = min(digits, key=lambda d: d.top_left)
    multi = np.zeros(N_CLASSES, dtype=np.uint8)
    multi[list(set(classes))] = 1
    return TaskLabels(maj=maj, max=int(max(classes)), top=topmost.class_id, multi=multi)


def generate_sample(
    config: DatasetConfig,
    index: int,
    bank_sizes: "list[int] | np.ndarray",
) -> CanvasSample:
    """Generate sample ``index`` of the split, bit-reproducibly."""
    rng = stream(config.seed, config.split, index)
    digits = place_digits(rng, config, bank_sizes)
    noise_size = config.resolved_noise_size()
    hi = config.canvas_size - noise_size + 1
    noise = []
    for _ in range(config.resolved_noise_count()):
        count = sample_control_count(rng, DEFAULT_CONTROL_COUNTS, DEFAULT_CONTROL_PROBS)
        spec = sample_control_points(count, noise_size, rng)
        pos = (int(rng.integers(hi)), int(rng.integers(hi)))
        noise.append(NoisePlacement(spec, pos))
    return CanvasSample(
        digits=digits,
        noise=tuple(noise),
        labels=compute_labels(digits),
        config=config,
        index=index,
    )


def generate_dataset(
    config: DatasetConfig,
    bank_sizes: "list[int] | np.ndarray",
) -> list[CanvasSample]:
    """Generate every sample of the split."""
    return [generate_sample(config, i, bank_sizes) for i in range(config.n_samples)]


def rasterize_canvas(sample: CanvasSample, bank) -> np.ndarray:
    """Compose digits and noise into a dense float canvas by per-pixel max."""
    cfg = sample.config
    canvas = np.zeros((cfg.canvas_size, cfg.canvas_size), dtype=np.float32)
    for d in sample.digits:
        raster = scale_digit(bank.glyph(d.class_id, d.glyph_index), d.size)
        y, x = d.top_left
        region = canvas[y : y + d.size, x : x + d.size]
        np.maximum(region, raster, out=region)
    noise_size = cfg.resolved_noise_size()
    for n in sample.noise:
        glyph = rasterize_glyph(
            discretize_curve(n.spec), cfg.noise_thickness, noise_size
        )
        y, x = n.top_left
        region = canvas[y : y + noise_size, x : x + noise_size]
        np.maximum(region, glyph.pixels, out=region)
    return canvas


# -- Persistence: JSON manifest + npz placement records ---------------------


def save_dataset(
    samples: list[CanvasSample],
    out_prefix: str | Path,
    bank_info: dict | None = None,
) -> Path:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.npz`` (records).

    The manifest is byte-stable for a given (config, seed): it carries no
    timestamps and its keys are sorted.
    """
    if not samples:
        raise ValueError("no samples to save")
    cfg = samples[0].config
    n = len(samples)
    k = cfg.resolved_noise_count()
    max_cp = max(DEFAULT_CONTROL_COUNTS)

    digit_classes = np.zeros((n, DIGITS_PER_CANVAS), dtype=np.int16)
    digit_pos = np.zeros((n, DIGITS_PER_CANVAS, 2), dtype=np.int32)
    digit_glyph = np.zeros((n, DIGITS_PER_CANVAS), dtype=np.int32)
    noise_counts = np.zeros((n, k), dtype=np.int8)
    noise_points = np.full((n, k, max_cp, 2), np.nan, dtype=np.float64)
    noise_pos = np.zeros((n, k, 2), dtype=np.int32)
    maj = np.zeros(n, dtype=np.int16)
    mx = np.zeros(n, dtype=np.int16)
    top = np.zeros(n, dtype=np.int16)
    multi = np.zeros((n, N_CLASSES), dtype=np.uint8)

    for i, s in enumerate(samples):
        for j, d in enumerate(s.digits):
            digit_classes[i, j] = d.class_id
            digit_pos[i, j] = d.top_left
            digit_glyph[i, j] = d.glyph_index
        for j, nz in enumerate(s.noise):
            c = nz.spec.count
            noise_counts[i, j] = c
            noise_points[i, j, :c] = nz.spec.control_points
            noise_pos[i, j] = nz.top_left
        maj[i] = s.labels.maj
        mx[i] = s.labels.max
        top[i] = s.labels.top
        multi[i] = s.labels.multi

    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out_prefix.with_suffix(".npz"),
        digit_classes=digit_classes,
        digit_pos=digit_pos,
        digit_glyph=digit_glyph,
        noise_counts=noise_counts,
        noise_points=noise_points,
        noise_pos=noise_pos,
        labels_maj=maj,
        labels_max=mx,
        labels_top=top,
        labels_multi=multi,
    )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": cfg.to_json_dict(),
        "counts": {"n_samples": n, "noise_per_sample": k},
        "o2i_percent": o2i_ratio(cfg.digit_size, cfg.canvas_size),
        "glyph_bank": bank_info or {},
        "records_file": out_prefix.with_suffix(".npz").name,
    }
    manifest_path = out_prefix.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(manifest_path: str | Path) -> tuple[DatasetConfig, list[CanvasSample]]:
    """Reconstruct samples from a manifest + records pair."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format in {manifest_path}")
    cfg = DatasetConfig.from_json_dict(manifest["config"])
    # NpzFile decompresses on every key access; pull each array out once.
    with np.load(manifest_path.with_name(manifest["records_file"])) as rec:
        arrays = {key: rec[key] for key in rec.files}
    n = manifest["counts"]["n_samples"]
    digit_classes = arrays["digit_classes"]
    digit_pos = arrays["digit_pos"]
    digit_glyph = arrays["digit_glyph"]
    noise_counts = arrays["noise_counts"]
    noise_points = arrays["noise_points"]
    noise_pos = arrays["noise_pos"]
    samples = []
    for i in range(n):
        digits = tuple(
            DigitPlacement(
                class_id=int(digit_classes[i, j]),
                top_left=(int(digit_pos[i, j, 0]), int(digit_pos[i, j, 1])),
                size=cfg.digit_size,
                glyph_index=int(digit_glyph[i, j]),
            )
            for j in range(DIGITS_PER_CANVAS)
        )
        noise = tuple(
            NoisePlacement(
                spec=BezierSpec(noise_points[i, j, : noise_counts[i, j]].copy()),
                top_left=(int(noise_pos[i, j, 0]), int(noise_pos[i, j, 1])),
            )
            for j in range(noise_counts.shape[1])
        )
        labels = TaskLabels(
            maj=int(arrays["labels_maj"][i]),
            max=int(arrays["labels_max"][i]),
            top=int(arrays["labels_top"][i]),
            multi=arrays["labels_multi"][i].copy(),
        )
        samples.append(CanvasSample(digits, noise, labels, cfg, i))
    return cfg, samples
