"""Experiment sweeps: expand one swept axis x seeds into runs, aggregate.

A sweep spec names exactly one axis (a dataset knob, the patch size, or a
subset fraction), the values to try, the seed list, and the base dataset
and training configs. Expansion is pure and deterministic so the run list
can be golden-tested; execution caches generated datasets by content
signature and skips already-completed run directories on resume. The
aggregator reduces per-run final validation metrics to mean and std per
axis value, recomputable from the raw per-run files at any time.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# axis name -> (config section, fields receiving the swept value)
AXES = {
    "digit_size": ("dataset", ("digit_size",)),
    "train_size": ("dataset", ("n_samples",)),
    "noise_thickness": ("dataset", ("noise_thickness",)),
    "noise_count": ("dataset", ("noise_count",)),
    "patch_size": ("train", ("patch_size", "stride")),
    "subset_fraction": ("dataset", ("subset_fraction",)),
}

__all__ = ["ExperimentSpec", "RunSpec", "expand_runs", "run_sweep",
           "aggregate_sweep", "load_spec", "builtin_specs"]


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    axis: str
    value: object
    seed: int
    train: dict
    dataset: dict

    def to_json_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentSpec:
    name: str
    axis: str
    values: list
    seeds: list
    dataset: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset_seed: int = 1234

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if not self.values:
            raise ValueError("sweep needs at least one axis value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "axis": self.axis,
            "values": list(self.values),
            "seeds": list(self.seeds),
            "dataset": dict(self.dataset),
            "train": dict(self.train),
            "dataset_seed": self.dataset_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(
            name=d["name"],
            axis=d["axis"],
            values=list(d["values"]),
            seeds=list(d["seeds"]),
            dataset=dict(d.get("dataset", {})),
            train=dict(d.get("train", {})),
            dataset_seed=d.get("dataset_seed", 1234),
        )


def _fmt_value(value) -> str:
    s = str(value)
    return s.replace(".", "p") if isinstance(value, float) else s


def expand_runs(spec: ExperimentSpec) -> list[RunSpec]:
    """Axis values (outer) x seeds (inner), differing from base only there."""
    section, fields_ = AXES[spec.axis]
    runs = []
    for value in spec.values:
        for seed in spec.seeds:
            dataset = dict(spec.dataset)
            train = dict(spec.train)
            target = dataset if section == "dataset" else train
            for f in fields_:
                target[f] = value
            train["seed"] = seed
            if "sts_manifest" not in dataset:
                dataset.setdefault("seed", spec.dataset_seed)
            runs.append(
                RunSpec(
                    run_id=f"{spec.axis}-{_fmt_value(value)}-seed{seed}",
                    axis=spec.axis,
                    value=value,
                    seed=seed,
                    train=train,
                    dataset=dataset,
                )
            )
    return runs


def load_spec(path: str | Path) -> ExperimentSpec:
    return ExperimentSpec.from_json_dict(json.loads(Path(path).read_text()))


def builtin_specs() -> dict[str, Path]:
    """Shipped sweep spec files, keyed by spec name."""
    root = Path(__file__).parent / "experiments"
    return {p.stem: p for p in sorted(root.glob("*.json"))}


def dataset_signature(dataset_cfg: dict, seed: int) -> str:
    """Stable content hash identifying one generated dataset."""
    key = json.dumps({"cfg": dataset_cfg, "seed": seed}, sort_keys=True)
    return hashlib.sha1(key.encode()).hexdigest()[:12]


def _ensure_benchmark_data(dataset_cfg: dict, cache_root: Path, split: str):
    """Generate (or reuse) one benchmark split; returns (samples, bank)."""
    from .dataset import DatasetConfig, generate_dataset, load_dataset, save_dataset
    from .mnist_io import ensure_digit_bank

    cfg_d = dict(dataset_cfg)
    n_val = cfg_d.pop("val_samples", max(1, cfg_d.get("n_samples", 100) // 5))
    if split == "validation":
        cfg_d["n_samples"] = n_val
    cfg_d["split"] = split
    cfg = DatasetConfig(**cfg_d)
    tag = dataset_signature(cfg.to_json_dict(), cfg.seed)
    bank = ensure_digit_bank(split=split)
    manifest = cache_root / f"{tag}-{split}.json"
    if manifest.exists():
        _, samples = load_dataset(manifest)
        return samples, bank
    samples = generate_dataset(cfg, bank.class_sizes)
    save_dataset(samples, manifest.with_suffix(""), bank.info())
    return samples, bank


def run_complete(run_dir: Path) -> bool:
    metrics = run_dir / "metrics.json"
    if not metrics.exists():
        return False
    try:
        payload = json.loads(metrics.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return bool(payload.get("history"))


def _execute_run(run: RunSpec, run_dir: Path, workspace: Path):
    """Default executor: build data and model, then train."""
    import torch

    from .training import CanvasDataset, TrainConfig, train

    train_cfg = dict(run.train)
    train_cfg.setdefault("out_dir", str(run_dir))
    dataset_cfg = dict(run.dataset)
    if "sts_manifest" in dataset_cfg:
        train_ds, val_ds = _sts_datasets(dataset_cfg, run.seed)
        train_cfg.setdefault("tasks", ["sign"])
        train_cfg.setdefault("pixel_norm", "imagenet")
    else:
        cache = workspace / "datasets"
        train_ds = CanvasDataset(*_ensure_benchmark_data(dataset_cfg, cache, "train"))
        val_ds = CanvasDataset(
            *_ensure_benchmark_data(dataset_cfg, cache, "validation")
        )
    cfg = TrainConfig.from_json_dict(train_cfg)
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2**32)
    model = cfg.build_model()
    train(model, train_ds, val_ds, cfg, out_dir=run_dir)


def _sts_datasets(dataset_cfg: dict, seed: int):
    from .sts import StsDataset, SubsetSpec, load_manifest, stratified_subset

    train_recs, val_recs, _ = load_manifest(dataset_cfg["sts_manifest"])
    root = dataset_cfg.get("sts_root") or str(Path(dataset_cfg["sts_manifest"]).parent)
    fraction = dataset_cfg.get("subset_fraction", 1.0)
    if fraction != 1.0:
        subset_seed = dataset_cfg.get("subset_seed", seed)
        train_recs = stratified_subset(train_recs, SubsetSpec(fraction, subset_seed))
        val_recs = stratified_subset(val_recs, SubsetSpec(fraction, subset_seed))
    return StsDataset(root, train_recs), StsDataset(root, val_recs)


def run_sweep(
    spec: ExperimentSpec,
    workspace: str | Path,
    resume: bool = True,
    executor=None,
) -> list[Path]:
    """Execute every run of the sweep; returns the run directories.

    With ``resume=True`` directories that already contain a parseable
    metrics file are left untouched.
    """
    workspace = Path(workspace)
    sweep_dir = workspace / spec.name
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "spec.json").write_text(
        json.dumps(spec.to_json_dict(), indent=2, sort_keys=True) + "\n"
    )
    dirs = []
    for run in expand_runs(spec):
        run_dir = sweep_dir / run.run_id
        dirs.append(run_dir)
        if resume and run_complete(run_dir):
            logger.info("skipping completed run %s", run.run_id)
            continue
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "runspec.json").write_text(
            json.dumps(run.to_json_dict(), indent=2, sort_keys=True) + "\n"
        )
        if executor is None:
            _execute_run(run, run_dir, workspace)
        else:
            executor(run, run_dir)
    return dirs


def aggregate_sweep(sweep_dir: str | Path) -> dict:
    """Mean/std of final validation metrics per axis value; writes files.

    Population std (ddof=0) so a single seed reports 0. Corrupted or
    incomplete run directories are skipped with a warning.
    """
    sweep_dir = Path(sweep_dir)
    groups: dict = {}
    order: list = []
    for run_dir in sorted(p for p in sweep_dir.iterdir() if p.is_dir()):
        spec_file = run_dir / "runspec.json"
        metrics_file = run_dir / "metrics.json"
        if not spec_file.exists():
            continue
        try:
            run = json.loads(spec_file.read_text())
            metrics = json.loads(metrics_file.read_text())
            final = metrics["history"][-1]
        except (OSError, json.JSONDecodeError, KeyError, IndexError):
            logger.warning("skipping corrupted run directory %s", run_dir)
            continue
        if not final.get("val_accuracy"):
            logger.warning("skipping run without validation metrics: %s", run_dir)
            continue
        key = run["value"]
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(
            {
                "seed": run["seed"],
                "val_accuracy": final["val_accuracy"],
                "ms_per_batch": final.get("ms_per_batch"),
                "peak_memory_bytes": final.get("peak_memory_bytes"),
            }
        )
    rows = []
    for value in order:
        runs = groups[value]
        tasks = sorted(runs[0]["val_accuracy"])
        row = {"value": value, "n_runs": len(runs)}
        for t in tasks:
            accs = np.asarray([r["val_accuracy"][t] for r in runs], dtype=np.float64)
            row[f"{t}_mean"] = float(accs.mean())
            row[f"{t}_std"] = float(accs.std(ddof=0))
        times = [r["ms_per_batch"] for r in runs if r["ms_per_batch"] is not None]
        if times:
            row["ms_per_batch_mean"] = float(np.mean(times))
        mems = [r["peak_memory_bytes"] for r in runs if r["peak_memory_bytes"]]
        if mems:
            row["peak_memory_gb_max"] = float(max(mems) / 1e9)
        rows.append(row)
    table = {"sweep": sweep_dir.name, "rows": rows}
    (sweep_dir / "aggregate.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n"
    )
    if rows:
        import csv

        cols = sorted({k for row in rows for k in row}, key=lambda c: (c != "value", c))
        with open(sweep_dir / "aggregate.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)
    return table
