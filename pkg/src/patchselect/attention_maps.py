"""Attention-map export: selected patches outlined and colored on the image.

A map is the final selection buffer of one forward pass: patch positions
with their raw attention scores and a max-normalized copy for display.
Rendering fills each above-threshold patch with a sequential colormap value,
outlines it in red, and writes a JSON sidecar with the full entry list so
every figure is machine-checkable.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

DEFAULT_THRESHOLD = 0.1
FILL_ALPHA = 0.45
OUTLINE_RGB = (255, 0, 0)

__all__ = ["MapEntry", "AttentionMap", "build_map", "render_map", "load_sidecar"]


@dataclass(frozen=True)
class MapEntry:
    top_left: tuple[int, int]  # (y, x)
    patch_size: int
    raw_score: float
    normalized: float


@dataclass
class AttentionMap:
    source: str
    height: int
    width: int
    m_top: int
    entries: list[MapEntry]

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "height": self.height,
            "width": self.width,
            "m_top": self.m_top,
            "entries": [asdict(e) for e in self.entries],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AttentionMap":
        entries = [
            MapEntry(
                top_left=tuple(e["top_left"]),
                patch_size=e["patch_size"],
                raw_score=e["raw_score"],
                normalized=e["normalized"],
            )
            for e in d["entries"]
        ]
        return cls(d["source"], d["height"], d["width"], d["m_top"], entries)


def build_map(model, image: np.ndarray, source: str = "") -> AttentionMap:
    """Run selection on one image and collect the buffer as map entries.

    ``image`` is (H, W) or (C, H, W) float in [0, 1]. Scores are normalized
    by the maximum so the best patch always reads 1.0.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got {arr.shape}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        model.select(torch.from_numpy(arr).unsqueeze(0))
    model.train(was_training)
    sel = model.last_selection[0]
    coords = sel["coords"]
    raw = sel["scores"].astype(np.float64)
    top = raw.max() if len(raw) else 1.0
    entries = [
        MapEntry(
            top_left=tuple(coords[idx]),
            patch_size=model.patch_size,
            raw_score=float(s),
            normalized=float(s / top) if top > 0 else 0.0,
        )
        for idx, s in zip(sel["indices"].tolist(), raw)
    ]
    return AttentionMap(
        source=source,
        height=arr.shape[1],
        width=arr.shape[2],
        m_top=model.m_top,
        entries=entries,
    )


def _to_rgb(image: np.ndarray) -> Image.Image:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    byte = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Image.fromarray(byte).convert("RGB")


def render_map(
    amap: AttentionMap,
    image: np.ndarray,
    out_path: str | Path,
    threshold: float = DEFAULT_THRESHOLD,
    crop: tuple[int, int, int, int] | None = None,
    colormap: str = "viridis",
) -> Path:
    """Draw patches with normalized score > threshold; write PNG + sidecar.

    ``crop`` is (y0, x0, height, width) applied to the finished overlay.
    The sidecar JSON next to the PNG carries the complete entry list,
    untouched by the threshold.
    """
    import matplotlib

    cmap = matplotlib.colormaps[colormap]
    base = _to_rgb(image).convert("RGBA")
    overlay = Image.new("RGBA", base.size, (0, 0, 0, 0))
    draw = ImageDraw.Draw(overlay)
    for entry in sorted(amap.entries, key=lambda e: e.normalized):
        if entry.normalized <= threshold:
            continue
        y, x = entry.top_left
        p = entry.patch_size
        r, g, b, _ = cmap(entry.normalized, bytes=True)
        draw.rectangle(
            [x, y, x + p - 1, y + p - 1],
            fill=(r, g, b, int(round(FILL_ALPHA * 255))),
            outline=OUTLINE_RGB + (255,),
            width=2,
        )
    merged = Image.alpha_composite(base, overlay).convert("RGB")
    if crop is not None:
        y0, x0, h, w = crop
        merged = merged.crop((x0, y0, x0 + w, y0 + h))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    merged.save(out_path)
    sidecar = out_path.with_suffix(".json")
    payload = amap.to_json_dict()
    payload["threshold"] = threshold
    payload["crop"] = list(crop) if crop is not None else None
    payload["image_file"] = out_path.name
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return out_path


def load_sidecar(path: str | Path) -> AttentionMap:
    """Parse a rendered map's JSON sidecar back into an AttentionMap."""
    return AttentionMap.from_json_dict(json.loads(Path(path).read_text()))
