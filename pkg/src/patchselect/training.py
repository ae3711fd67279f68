"""Multi-task training loop: losses, LR schedule, metrics, baselines.

Optimization follows a warmup-then-cosine schedule: the learning rate ramps
linearly over the first ``warmup_epochs`` and then decays along a cosine to
``base_lr / final_lr_divisor`` at the last epoch. A literal linear-decrease
variant of the first phase is available as ``schedule="linear_cosine"``.

The loss is the sum of per-task cross-entropies for the categorical tasks
plus mean binary cross-entropy over the ten presence logits of the
multi-label task, with uniform task weights.
"""

from __future__ import annotations

import csv
import json
import math
import resource
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .model import TASK_HEADS, IpsNet, save_checkpoint

SCHEDULES = ("warmup_cosine", "linear_cosine")

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "CanvasDataset",
    "lr_at",
    "multi_task_loss",
    "evaluate",
    "max_random_baseline",
    "train",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    """Full recipe for one run: data, model shape, and optimization."""

    dataset: str = ""
    val_dataset: str = ""
    out_dir: str = "runs/default"
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 0.001
    warmup_epochs: int = 10
    final_lr_divisor: float = 1000.0
    weight_decay: float = 0.01
    schedule: str = "warmup_cosine"
    m_top: int = 100
    iter_size: int = 100
    patch_size: int = 50
    stride: int = 50
    pretrained: bool = False
    n_heads: int = 8
    pixel_norm: str = "none"
    tasks: tuple = ("maj", "max", "top", "multi")
    seed: int = 0
    eval_every: int = 1
    cache_rasters: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs must be >= 1 and warmup_epochs >= 0")
        if self.epochs < self.warmup_epochs:
            raise ValueError("epochs must be >= warmup_epochs")
        if self.final_lr_divisor <= 1:
            raise ValueError("final_lr_divisor must be > 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        unknown = set(self.tasks) - set(TASK_HEADS)
        if unknown:
            raise ValueError(f"unknown tasks: {sorted(unknown)}")
        self.tasks = tuple(self.tasks)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "tasks" in d:
            d["tasks"] = tuple(d["tasks"])
        return cls(**d)

    def build_model(self) -> IpsNet:
        from .model import EncoderSpec

        return IpsNet(
            encoder_spec=EncoderSpec(pretrained=self.pretrained),
            m_top=self.m_top,
            iter_size=self.iter_size,
            patch_size=self.patch_size,
            stride=self.stride,
            tasks=self.tasks,
            n_heads=self.n_heads,
            pixel_norm=self.pixel_norm,
        )


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Learning rate at a fractional epoch in [0, epochs]."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    floor = cfg.base_lr / cfg.final_lr_divisor
    w = cfg.warmup_epochs
    if cfg.schedule == "warmup_cosine":
        if epoch < w:
            return cfg.base_lr * epoch / w
        start = cfg.base_lr
    else:
        # literal reading of a first phase that decreases: sample the
        # straight line from (0, base_lr) to (epochs, floor)
        def line(t):
            return cfg.base_lr + (floor - cfg.base_lr) * t / cfg.epochs

        if epoch < w:
            return line(epoch)
        start = line(w)
    span = cfg.epochs - w
    if span == 0:
        return floor
    frac = (epoch - w) / span
    return floor + (start - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def multi_task_loss(
    outputs: dict[str, torch.Tensor], targets: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Uniformly weighted sum of per-task losses; returns (total, parts)."""
    parts = {}
    total = None
    for task, logits in outputs.items():
        kind = TASK_HEADS[task][0]
        if kind == "categorical":
            part = F.cross_entropy(logits, targets[task])
        else:
            part = F.binary_cross_entropy_with_logits(logits, targets[task].float())
        parts[task] = part
        total = part if total is None else total + part
    if total is None:
        raise ValueError("no task outputs to compute a loss on")
    return total, parts


def max_random_baseline(x: int) -> float:
    """Chance of digit ``x`` being the largest of 3 distinct uniform digits.

    C(x, 2) / C(10, 3): both smaller digits must come from the x values
    below x. Always predicting 9 gives the best blind accuracy, 30%.
    """
    if not 0 <= x <= 9:
        raise ValueError(f"digit must be in 0..9, got {x}")
    return math.comb(x, 2) / math.comb(10, 3)


class CanvasDataset(Dataset):
    """Torch view of generated canvas samples.

    Rasterizes lazily from placement records against the digit bank; with
    ``cache=True`` rasters are memoized as uint8 (1/255 quantization) to
    keep repeated epochs cheap.
    """

    def __init__(self, samples, bank, cache: bool = True):
        from .dataset import TASKS

        self.samples = list(samples)
        self.bank = bank
        self.tasks = TASKS
        self._cache = [None] * len(self.samples) if cache else None

    def __len__(self) -> int:
        return len(self.samples)

    def _raster(self, i: int) -> np.ndarray:
        from .dataset import rasterize_canvas

        if self._cache is not None and self._cache[i] is not None:
            return self._cache[i].astype(np.float32) / 255.0
        raster = rasterize_canvas(self.samples[i], self.bank)
        if self._cache is not None:
            self._cache[i] = np.round(raster * 255.0).astype(np.uint8)
            return self._cache[i].astype(np.float32) / 255.0
        return raster

    def __getitem__(self, i: int):
        sample = self.samples[i]
        canvas = torch.from_numpy(self._raster(i)).unsqueeze(0)
        labels = {
            "maj": torch.tensor(sample.labels.maj, dtype=torch.long),
            "max": torch.tensor(sample.labels.max, dtype=torch.long),
            "top": torch.tensor(sample.labels.top, dtype=torch.long),
            "multi": torch.from_numpy(sample.labels.multi.astype(np.float32)),
        }
        return canvas, labels


def _batch_correct(outputs: dict, targets: dict) -> dict[str, int]:
    correct = {}
    for task, logits in outputs.items():
        kind = TASK_HEADS[task][0]
        if kind == "categorical":
            hits = (logits.argmax(dim=1) == targets[task]).sum()
        else:
            pred = logits > 0  # sigmoid threshold 0.5
            hits = (pred == targets[task].bool()).all(dim=1).sum()
        correct[task] = int(hits)
    return correct


def _to_device(canvases, targets, device):
    return canvases.to(device), {k: v.to(device) for k, v in targets.items()}


def evaluate(model: IpsNet, dataset: Dataset, batch_size: int = 16) -> dict:
    """Per-task accuracy (percent) and mean loss over a labeled dataset."""
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    device = next(model.parameters()).device
    was_training = model.training
    model.eval()
    n = 0
    correct = {t: 0 for t in model.tasks}
    loss_sum = 0.0
    with torch.no_grad():
        for canvases, targets in loader:
            canvases, targets = _to_device(canvases, targets, device)
            outputs = model(canvases)
            total, _ = multi_task_loss(outputs, targets)
            b = canvases.shape[0]
            loss_sum += float(total.detach()) * b
            n += b
            for task, hits in _batch_correct(outputs, targets).items():
                correct[task] += hits
    model.train(was_training)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return {
        "n": n,
        "loss": loss_sum / n,
        "accuracy": {t: 100.0 * correct[t] / n for t in model.tasks},
    }


def _peak_memory_bytes() -> int:
    # ru_maxrss is kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def train(
    model: IpsNet,
    train_data: Dataset,
    val_data: Dataset | None,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log=print,
) -> list[dict]:
    """Run the full loop; writes metrics CSV/JSON and checkpoints if out_dir.

    Keeps both the last checkpoint and the one with the best mean validation
    accuracy. Aborts with TrainingDiverged on a non-finite loss.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(
                {"train": cfg.to_json_dict(), "model": model.hyperparams()},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
    device = next(model.parameters()).device
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    loader = DataLoader(
        train_data, batch_size=cfg.batch_size, shuffle=True, generator=gen
    )
    steps_per_epoch = max(1, math.ceil(len(train_data) / cfg.batch_size))
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=lr_at(0.0, cfg), weight_decay=cfg.weight_decay
    )

    history: list[dict] = []
    best_score = -math.inf
    csv_file = csv_writer = None
    if out is not None:
        csv_file = open(out / "metrics.csv", "w", newline="")
        cols = (["epoch", "lr", "train_loss", "ms_per_batch", "peak_memory_bytes",
                 "val_loss"]
                + [f"train_acc_{t}" for t in model.tasks]
                + [f"val_acc_{t}" for t in model.tasks])
        csv_writer = csv.DictWriter(csv_file, fieldnames=cols)
        csv_writer.writeheader()

    try:
        global_step = 0
        for epoch in range(cfg.epochs):
            model.train()
            loss_sum = 0.0
            seen = 0
            batch_time = 0.0
            correct = {t: 0 for t in model.tasks}
            lr = cfg.base_lr
            for canvases, targets in loader:
                t0 = time.perf_counter()
                canvases, targets = _to_device(canvases, targets, device)
                frac = min((global_step + 1) / steps_per_epoch, float(cfg.epochs))
                lr = lr_at(frac, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                outputs = model(canvases)
                total, _ = multi_task_loss(outputs, targets)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss {float(total.detach())!r} at epoch "
                        f"{epoch + 1}, step {global_step + 1}"
                    )
                total.backward()
                optimizer.step()
                b = canvases.shape[0]
                loss_sum += float(total.detach()) * b
                seen += b
                with torch.no_grad():
                    for task, hits in _batch_correct(outputs, targets).items():
                        correct[task] += hits
                global_step += 1
                batch_time += time.perf_counter() - t0

            record = {
                "epoch": epoch + 1,
                "lr": lr,
                "train_loss": loss_sum / max(seen, 1),
                "train_accuracy": {
                    t: 100.0 * correct[t] / max(seen, 1) for t in model.tasks
                },
                "ms_per_batch": 1000.0 * batch_time / steps_per_epoch,
                "peak_memory_bytes": _peak_memory_bytes(),
                "val_loss": None,
            }
            run_eval = val_data is not None and (
                (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
            )
            if run_eval:
                val = evaluate(model, val_data, batch_size=cfg.batch_size)
                record["val_loss"] = val["loss"]
                record["val_accuracy"] = val["accuracy"]
                score = sum(val["accuracy"].values()) / len(val["accuracy"])
                if out is not None and score >= best_score:
                    best_score = score
                    save_checkpoint(out / "checkpoint_best.pt", model,
                                    {"epoch": epoch + 1, "config": cfg.to_json_dict()})
            history.append(record)
            if log is not None:
                msg = (f"epoch {record['epoch']:>3}  lr {record['lr']:.2e}  "
                       f"loss {record['train_loss']:.4f}")
                if "maj" in record["train_accuracy"]:
                    msg += f"  train maj {record['train_accuracy']['maj']:.1f}%"
                if record.get("val_accuracy"):
                    accs = "  ".join(
                        f"{t} {a:.1f}%" for t, a in record["val_accuracy"].items()
                    )
                    msg += "  val: " + accs
                log(msg)
            if csv_writer is not None:
                row = {k: record.get(k) for k in
                       ("epoch", "lr", "train_loss", "ms_per_batch",
                        "peak_memory_bytes", "val_loss")}
                for t in model.tasks:
                    row[f"train_acc_{t}"] = record["train_accuracy"][t]
                    row[f"val_acc_{t}"] = record.get("val_accuracy", {}).get(t)
                csv_writer.writerow(row)
                csv_file.flush()
            if out is not None:
                save_checkpoint(out / "checkpoint_last.pt", model,
                                {"epoch": epoch + 1, "config": cfg.to_json_dict()})
    finally:
        if csv_file is not None:
            csv_file.close()

    if out is not None:
        summary = {
            "config": cfg.to_json_dict(),
            "model": model.hyperparams(),
            "history": history,
            "final": history[-1] if history else None,
        }
        (out / "metrics.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
    return history
