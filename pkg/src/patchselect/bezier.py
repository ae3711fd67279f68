"""Structured-noise glyphs drawn as rasterized Bezier curves.

A glyph is a single random Bezier curve on an ``N x N`` canvas. The number
of control points is drawn from a small set with fixed probabilities so the
curve complexity mimics handwritten digits; stroke thickness is the knob
that controls how closely the noise resembles real digits.

Rasterization uses 4x supersampling: the polyline through the discretized
curve is stroked at integer width ``round(4 * thickness)`` on a ``4N x 4N``
grid with round caps/joints, then box-downsampled. This realizes fractional
stroke widths (e.g. 1.925) reproducibly without a vector-graphics backend.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

DEFAULT_CONTROL_COUNTS = (4, 6, 8)
DEFAULT_CONTROL_PROBS = (3 / 9, 5 / 9, 1 / 9)

CURVE_POINTS = 100  # discretization resolution of the parameter t
SUPERSAMPLE = 4

__all__ = [
    "BezierSpec",
    "NoiseGlyph",
    "sample_control_count",
    "sample_control_points",
    "bezier_point",
    "discretize_curve",
    "rasterize_glyph",
    "random_glyph",
    "export_glyph_bank",
]


@dataclass(frozen=True)
class BezierSpec:
    """Control polygon of one noise curve, in glyph pixel coordinates."""

    control_points: np.ndarray  # (count, 2) float64, (x, y)

    def __post_init__(self):
        pts = np.asarray(self.control_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"control points must be (n, 2), got {pts.shape}")
        object.__setattr__(self, "control_points", pts)

    @property
    def count(self) -> int:
        return len(self.control_points)


@dataclass(frozen=True)
class NoiseGlyph:
    """Rasterized noise curve: grayscale values in [0, 1]."""

    pixels: np.ndarray  # (size, size) float32
    thickness: float
    spec: BezierSpec | None = field(default=None, compare=False)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def sample_control_count(
    rng: np.random.Generator,
    counts: tuple[int, ...] = DEFAULT_CONTROL_COUNTS,
    probs: tuple[float, ...] = DEFAULT_CONTROL_PROBS,
) -> int:
    """Draw the number of control points for one curve."""
    if len(counts) != len(probs):
        raise ValueError("counts and probs must have equal length")
    if not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
        raise ValueError(f"probabilities must sum to 1, got {sum(probs)}")
    return int(rng.choice(counts, p=probs))


def sample_control_points(
    count: int,
    glyph_size: int,
    rng: np.random.Generator,
    allowed_counts: tuple[int, ...] = DEFAULT_CONTROL_COUNTS,
) -> BezierSpec:
    """Sample ``count`` control points i.i.d. uniform on [0, glyph_size)^2."""
    if count not in allowed_counts:
        raise ValueError(f"control count {count} not in {allowed_counts}")
    if glyph_size < 2:
        raise ValueError(f"glyph size must be >= 2, got {glyph_size}")
    pts = rng.uniform(0.0, glyph_size, size=(count, 2))
    return BezierSpec(pts)


def _bernstein_weights(n: int, t: np.ndarray) -> np.ndarray:
    """Bernstein basis values, shape (len(t), n + 1)."""
    i = np.arange(n + 1)
    coeff = np.array([math.comb(n, k) for k in i], dtype=np.float64)
    t = t[:, None]
    return coeff * (1.0 - t) ** (n - i) * t**i


def bezier_point(spec: BezierSpec, t: float) -> np.ndarray:
    """Evaluate the curve at parameter ``t`` in [0, 1].

    Returns the Bernstein-weighted combination of the control points; the
    result always lies in their convex hull.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    n = spec.count - 1
    w = _bernstein_weights(n, np.asarray([t], dtype=np.float64))
    return (w @ spec.control_points)[0]


def discretize_curve(spec: BezierSpec, n_points: int = CURVE_POINTS) -> np.ndarray:
    """Evaluate the curve on a uniform t-grid including both endpoints.

    Returns an ``(n_points, 2)`` array; the first row equals the first
    control point, the last row the last control point.
    """
    t = np.linspace(0.0, 1.0, n_points)
    w = _bernstein_weights(spec.count - 1, t)
    return w @ spec.control_points


def rasterize_glyph(
    curve: np.ndarray,
    thickness: float,
    glyph_size: int,
    spec: BezierSpec | None = None,
) -> NoiseGlyph:
    """Stroke a discretized curve into a ``glyph_size``-square raster.

    The polyline is drawn with round caps and joints at supersampled integer
    width, box-downsampled, and clipped to the glyph bounds. Output values
    are in [0, 1].
    """
    if thickness <= 0:
        raise ValueError(f"thickness must be positive, got {thickness}")
    ss = SUPERSAMPLE
    big = glyph_size * ss
    width = max(1, round(thickness * ss))
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    pts = [(float(x) * ss, float(y) * ss) for x, y in np.asarray(curve)]
    r = width / 2.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if (x0, y0) != (x1, y1):
            draw.line([(x0, y0), (x1, y1)], fill=255, width=width)
    for x, y in pts:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    hi = np.asarray(img, dtype=np.float32) / 255.0
    pixels = hi.reshape(glyph_size, ss, glyph_size, ss).mean(axis=(1, 3))
    return NoiseGlyph(np.clip(pixels, 0.0, 1.0), float(thickness), spec)


def random_glyph(
    rng: np.random.Generator,
    glyph_size: int,
    thickness: float,
    counts: tuple[int, ...] = DEFAULT_CONTROL_COUNTS,
    probs: tuple[float, ...] = DEFAULT_CONTROL_PROBS,
) -> NoiseGlyph:
    """Sample a spec and rasterize it in one step."""
    count = sample_control_count(rng, counts, probs)
    spec = sample_control_points(count, glyph_size, rng, allowed_counts=counts)
    return rasterize_glyph(discretize_curve(spec), thickness, glyph_size, spec)


def export_glyph_bank(
    out_dir: str | Path,
    n_glyphs: int,
    glyph_size: int,
    thickness: float,
    seed: int,
) -> Path:
    """Write ``n_glyphs`` PNG rasters plus a JSON manifest for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_glyphs):
        glyph = random_glyph(rng, glyph_size, thickness)
        name = f"glyph_{i:04d}.png"
        Image.fromarray((glyph.pixels * 255).astype(np.uint8), mode="L").save(out / name)
        entries.append(
            {
                "file": name,
                "control_points": glyph.spec.control_points.tolist(),
            }
        )
    manifest = {
        "glyph_size": glyph_size,
        "thickness": thickness,
        "seed": seed,
        "glyphs": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
