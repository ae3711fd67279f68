"""Swedish traffic-sign ingestion for the speed-limit task.

The public dataset ships as two image sets (Set1, Set2) with one
``annotations.txt`` per set; each line is ``<image>:<sign>;<sign>;...``
where a sign entry is ``VISIBILITY, x2, y2, x1, y1, TYPE, NAME`` and bare
``MISC_SIGNS`` marks unlabeled sign presence. Following the established
subset convention, an image is kept when it either contains no sign at all
(label ``no_sign``) or all of its visible speed-limit signs agree on one of
50/70/80 (label ``limit_xx``); everything else is excluded and the
exclusion reason is recorded so the subset counts can be audited against
the published 747 training / 684 validation instances.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

logger = logging.getLogger(__name__)

STS_CLASSES = ("no_sign", "limit_50", "limit_70", "limit_80")
LIMIT_NAMES = {"50_SIGN": "limit_50", "70_SIGN": "limit_70", "80_SIGN": "limit_80"}
SET_NAMES = ("Set1", "Set2")
# published subset sizes keyed by the canonical full-split size
PUBLISHED_TOTALS = {747: {0.25: 184, 0.5: 372}, 684: {0.25: 169, 0.5: 341}}
EXPECTED_SPLIT_SIZES = {"train": 747, "validation": 684}
MANIFEST_FORMAT_VERSION = 1


class StsIngestError(RuntimeError):
    """Raised when the dataset layout or annotations cannot be read."""


@dataclass(frozen=True)
class SignEntry:
    visibility: str
    bbox: tuple[float, float, float, float]
    sign_type: str
    name: str


@dataclass(frozen=True)
class StsRecord:
    image: str  # path relative to the dataset root
    label: str  # one of STS_CLASSES
    signs: tuple[SignEntry, ...] = ()

    def __post_init__(self):
        if self.label not in STS_CLASSES:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def class_index(self) -> int:
        return STS_CLASSES.index(self.label)


@dataclass(frozen=True)
class SubsetSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")


def parse_annotation_line(line: str) -> tuple[str, list[SignEntry], list[str]]:
    """Parse one annotation line; returns (image, signs, misc markers)."""
    if ":" not in line:
        raise StsIngestError(f"malformed annotation line: {line!r}")
    image, rest = line.split(":", 1)
    signs: list[SignEntry] = []
    misc: list[str] = []
    for chunk in rest.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if parts[0] == "MISC_SIGNS":
            misc.append(parts[0])
            continue
        if len(parts) < 7:
            raise StsIngestError(f"unparseable sign entry {chunk!r} in {line!r}")
        try:
            bbox = tuple(float(v) for v in parts[1:5])
        except ValueError as exc:
            raise StsIngestError(f"bad bbox in {chunk!r}") from exc
        signs.append(
            SignEntry(
                visibility=parts[0],
                bbox=bbox,
                sign_type=parts[5],
                name=parts[6],
            )
        )
    return image.strip(), signs, misc


def classify_annotation(signs: list[SignEntry], misc: list[str]) -> tuple[str | None, str]:
    """Apply the subset convention; returns (label or None, reason)."""
    if not signs and not misc:
        return "no_sign", "empty"
    visible_limits = {
        s.name for s in signs if s.visibility == "VISIBLE" and s.name in LIMIT_NAMES
    }
    if len(visible_limits) == 1:
        return LIMIT_NAMES[visible_limits.pop()], "visible_limit"
    if len(visible_limits) > 1:
        return None, "multiple_limit_classes"
    return None, "no_visible_limit"


def _annotation_file(root: Path, set_name: str) -> Path:
    candidates = [
        root / set_name / "annotations.txt",
        root / f"annotations_{set_name.lower()}.txt",
        root / f"{set_name}_annotations.txt",
    ]
    for path in candidates:
        if path.exists():
            return path
    raise StsIngestError(
        f"no annotation file for {set_name} under {root} "
        f"(tried {', '.join(str(c) for c in candidates)})"
    )


def _ingest_set(root: Path, set_name: str) -> tuple[list[StsRecord], list[dict]]:
    ann = _annotation_file(root, set_name)
    records: list[StsRecord] = []
    excluded: list[dict] = []
    for line in ann.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        image, signs, misc = parse_annotation_line(line)
        label, reason = classify_annotation(signs, misc)
        if label is None:
            excluded.append({"image": image, "set": set_name, "reason": reason})
            continue
        records.append(
            StsRecord(
                image=str(Path(set_name) / image), label=label, signs=tuple(signs)
            )
        )
    return records, excluded


def ingest_sts(
    root: str | Path, train_set: str = "Set1"
) -> tuple[list[StsRecord], list[StsRecord], dict]:
    """Build (train, validation, audit) from the dataset directory.

    ``train_set`` names which image set is the training split; the other
    becomes validation. Count deviations from the published 747/684 are
    warnings, not errors, and land in the audit dict.
    """
    root = Path(root)
    if train_set not in SET_NAMES:
        raise ValueError(f"train_set must be one of {SET_NAMES}")
    val_set = SET_NAMES[1 - SET_NAMES.index(train_set)]
    splits = {}
    audit = {"root": str(root), "train_set": train_set, "excluded": [], "counts": {}}
    for split, set_name in (("train", train_set), ("validation", val_set)):
        records, excluded = _ingest_set(root, set_name)
        splits[split] = records
        audit["excluded"].extend(excluded)
        by_label = {c: sum(r.label == c for r in records) for c in STS_CLASSES}
        audit["counts"][split] = {"total": len(records), **by_label}
        expected = EXPECTED_SPLIT_SIZES[split]
        if len(records) != expected:
            logger.warning(
                "%s split has %d records, published subset has %d "
                "(set assignment %s=%s; see audit for exclusions)",
                split, len(records), expected, split, set_name,
            )
    return splits["train"], splits["validation"], audit


def stratified_subset(
    records: list[StsRecord], spec: SubsetSpec
) -> list[StsRecord]:
    """Sample without replacement at the spec fraction within each label.

    Per-stratum targets are round(fraction * stratum size); when the source
    split matches a published full-split size, the no_sign stratum is then
    adjusted so the total lands on the published subset size. Fraction 1.0
    returns the records unchanged. Output preserves the input order.
    """
    if spec.fraction == 1.0:
        return list(records)
    strata: dict[str, list[int]] = {c: [] for c in STS_CLASSES}
    for i, rec in enumerate(records):
        strata[rec.label].append(i)
    targets = {
        c: int(math.floor(spec.fraction * len(idx) + 0.5))
        for c, idx in strata.items()
    }
    published = PUBLISHED_TOTALS.get(len(records), {}).get(spec.fraction)
    if published is not None:
        targets["no_sign"] += published - sum(targets.values())
    for c, want in targets.items():
        if want < 0 or want > len(strata[c]):
            raise ValueError(
                f"stratum {c!r} has {len(strata[c])} records, cannot draw {want}"
            )
    rng = stream(spec.seed, "subset")
    chosen: list[int] = []
    for c in STS_CLASSES:
        idx = strata[c]
        if targets[c]:
            picks = rng.choice(len(idx), size=targets[c], replace=False)
            chosen.extend(idx[j] for j in picks)
    return [records[i] for i in sorted(chosen)]


def write_manifest(path: str | Path, train, validation, audit: dict):
    """Persist ingested records as a JSON manifest."""
    payload = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "classes": list(STS_CLASSES),
        "audit": audit,
        "train": [_record_dict(r) for r in train],
        "validation": [_record_dict(r) for r in validation],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _record_dict(rec: StsRecord) -> dict:
    return {
        "image": rec.image,
        "label": rec.label,
        "signs": [asdict(s) for s in rec.signs],
    }


def load_manifest(path: str | Path) -> tuple[list[StsRecord], list[StsRecord], dict]:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != MANIFEST_FORMAT_VERSION:
        raise StsIngestError(f"unsupported manifest format {version!r} in {path}")

    def parse(items):
        return [
            StsRecord(
                image=d["image"],
                label=d["label"],
                signs=tuple(
                    SignEntry(
                        visibility=s["visibility"],
                        bbox=tuple(s["bbox"]),
                        sign_type=s["sign_type"],
                        name=s["name"],
                    )
                    for s in d.get("signs", ())
                ),
            )
            for d in items
        ]

    return parse(payload["train"]), parse(payload["validation"]), payload["audit"]


class StsDataset:
    """Torch-style dataset of (RGB tensor, {"sign": class index}) pairs."""

    def __init__(self, root: str | Path, records: list[StsRecord]):
        self.root = Path(root)
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int):
        import torch
        from PIL import Image

        rec = self.records[i]
        with Image.open(self.root / rec.image) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        canvas = torch.from_numpy(arr.transpose(2, 0, 1))
        labels = {"sign": torch.tensor(rec.class_index, dtype=torch.long)}
        return canvas, labels
