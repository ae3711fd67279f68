"""Command-line surface: generate data, train, evaluate, render, sweep.

Every subcommand takes an optional JSON config file plus flags; flags win
over file values and the fully-resolved config is persisted next to the
outputs. Dataset arguments accept either a benchmark manifest (as written
by ``generate``) or a traffic-sign manifest (as written by ``ingest-sts``);
the two are told apart by their keys.

Environment variables: ``PATCHSELECT_DATA`` points at the digit-source
cache root, ``PATCHSELECT_DEVICE`` selects the compute device (default
``cpu``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger(__name__)


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _apply_overrides(base: dict, args: argparse.Namespace, names: dict) -> dict:
    out = dict(base)
    for arg_name, cfg_name in names.items():
        value = getattr(args, arg_name)
        if value is not None:
            out[cfg_name] = value
    return out


def _device() -> str:
    return os.environ.get("PATCHSELECT_DEVICE", "cpu")


def _noise_count(text: str):
    return text if text == "auto" else int(text)


def _tasks(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# -- dataset plumbing shared by train/eval/attnmap ---------------------------


def _is_sts_manifest(payload: dict) -> bool:
    return "train" in payload and "classes" in payload


def _benchmark_dataset(manifest_path: str, cache: bool = True):
    from .mnist_io import ensure_digit_bank
    from .dataset import load_dataset
    from .training import CanvasDataset

    cfg, samples = load_dataset(manifest_path)
    bank = ensure_digit_bank(split=cfg.split)
    recorded = json.loads(Path(manifest_path).read_text()).get("glyph_bank", {})
    if recorded.get("source") and recorded["source"] != bank.source:
        logger.warning(
            "dataset %s was generated against digit source %r but %r is "
            "available now; rasters will differ",
            manifest_path, recorded["source"], bank.source,
        )
    return CanvasDataset(samples, bank, cache=cache)


def _load_any_dataset(args, manifest_path: str, cache: bool = True):
    payload = json.loads(Path(manifest_path).read_text())
    if not _is_sts_manifest(payload):
        return _benchmark_dataset(manifest_path, cache=cache), None
    from .sts import StsDataset, SubsetSpec, load_manifest, stratified_subset

    train_recs, val_recs, _ = load_manifest(manifest_path)
    root = getattr(args, "sts_root", None) or str(Path(manifest_path).parent)
    fraction = getattr(args, "subset_fraction", None)
    if fraction and fraction != 1.0:
        spec = SubsetSpec(fraction, getattr(args, "subset_seed", None) or 0)
        train_recs = stratified_subset(train_recs, spec)
        val_recs = stratified_subset(val_recs, spec)
    return StsDataset(root, train_recs), StsDataset(root, val_recs)


# -- subcommands -------------------------------------------------------------


def cmd_generate(args) -> int:
    from .dataset import DatasetConfig, generate_dataset, o2i_ratio, save_dataset
    from .mnist_io import ensure_digit_bank

    cfg_dict = _load_json(args.config)
    cfg_dict = _apply_overrides(cfg_dict, args, {
        "canvas_size": "canvas_size",
        "digit_size": "digit_size",
        "n_samples": "n_samples",
        "seed": "seed",
        "split": "split",
        "noise_count": "noise_count",
        "noise_thickness": "noise_thickness",
        "noise_size": "noise_size",
    })
    cfg_dict.setdefault("seed", 0)
    cfg = DatasetConfig.from_json_dict(cfg_dict)
    bank = ensure_digit_bank(split=cfg.split)
    samples = generate_dataset(cfg, bank.class_sizes)
    manifest = save_dataset(samples, Path(args.out), bank.info())
    print(f"wrote {manifest}")
    print(f"  samples:      {cfg.n_samples} ({cfg.split})")
    print(f"  o2i:          {o2i_ratio(cfg.digit_size, cfg.canvas_size):.4f}%")
    print(f"  noise/canvas: {cfg.resolved_noise_count()}")
    print(f"  digit source: {bank.source}")
    return 0


_TRAIN_OVERRIDES = {
    "dataset": "dataset",
    "val_dataset": "val_dataset",
    "out": "out_dir",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "base_lr": "base_lr",
    "warmup_epochs": "warmup_epochs",
    "schedule": "schedule",
    "weight_decay": "weight_decay",
    "m_top": "m_top",
    "iter_size": "iter_size",
    "patch_size": "patch_size",
    "stride": "stride",
    "seed": "seed",
    "pretrained": "pretrained",
    "pixel_norm": "pixel_norm",
    "tasks": "tasks",
    "eval_every": "eval_every",
}


def cmd_train(args) -> int:
    import numpy as np
    import torch

    from .training import TrainConfig, train

    cfg_dict = _apply_overrides(_load_json(args.config), args, _TRAIN_OVERRIDES)
    cfg = TrainConfig.from_json_dict(cfg_dict)
    if not cfg.dataset:
        raise ValueError("no training dataset given (use --dataset or config)")
    train_ds, maybe_val = _load_any_dataset(args, cfg.dataset, cache=cfg.cache_rasters)
    if maybe_val is not None:
        # two-split traffic-sign manifest: single 4-way head, photo stats
        cfg_dict.setdefault("tasks", ["sign"])
        cfg_dict.setdefault("pixel_norm", "imagenet")
        cfg = TrainConfig.from_json_dict(cfg_dict)
    if maybe_val is not None:
        val_ds = maybe_val
    elif cfg.val_dataset:
        val_ds, _ = _load_any_dataset(args, cfg.val_dataset, cache=cfg.cache_rasters)
    else:
        val_ds = None
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed % 2**32)
    model = cfg.build_model().to(_device())
    history = train(model, train_ds, val_ds, cfg, out_dir=cfg.out_dir)
    final = history[-1]
    print(json.dumps({"final": final}, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .training import evaluate

    model, _ = load_checkpoint(args.checkpoint)
    model = model.to(_device())
    dataset, maybe_val = _load_any_dataset(args, args.dataset)
    if args.use_validation_split and maybe_val is not None:
        dataset = maybe_val
    metrics = evaluate(model, dataset, batch_size=args.batch_size)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_attnmap(args) -> int:
    import numpy as np

    from .attention_maps import build_map, render_map
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    model = model.to(_device())
    if args.image:
        from PIL import Image

        with Image.open(args.image) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        image = arr.transpose(2, 0, 1)
        source = args.image
    elif args.dataset:
        ds, _ = _load_any_dataset(args, args.dataset)
        canvas, _labels = ds[args.index]
        image = canvas.numpy()
        source = f"{args.dataset}#{args.index}"
    else:
        raise ValueError("need --image or --dataset")
    amap = build_map(model, image, source=source)
    crop = tuple(args.crop) if args.crop else None
    out = Path(args.out)
    png = render_map(amap, image, out, threshold=args.threshold, crop=crop)
    print(f"wrote {png} and {png.with_suffix('.json')}")
    return 0


def cmd_ingest_sts(args) -> int:
    from .sts import ingest_sts, write_manifest

    train, val, audit = ingest_sts(args.root, train_set=args.train_set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out, train, val, audit)
    print(f"wrote {out}")
    for split, counts in audit["counts"].items():
        print(f"  {split}: {counts}")
    if audit["excluded"]:
        print(f"  excluded: {len(audit['excluded'])} (reasons in manifest)")
    return 0


def cmd_sweep(args) -> int:
    from .sweeps import aggregate_sweep, builtin_specs, expand_runs, load_spec, run_sweep

    spec_path = Path(args.spec)
    if not spec_path.exists():
        builtin = builtin_specs()
        if args.spec in builtin:
            spec_path = builtin[args.spec]
        else:
            raise ValueError(
                f"spec {args.spec!r} is neither a file nor one of {sorted(builtin)}"
            )
    spec = load_spec(spec_path)
    runs = expand_runs(spec)
    if args.dry_run:
        for run in runs:
            print(run.run_id)
        return 0
    run_sweep(spec, args.workspace, resume=not args.no_resume)
    table = aggregate_sweep(Path(args.workspace) / spec.name)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    from .sweeps import aggregate_sweep

    table = aggregate_sweep(args.sweep_dir)
    rows = table["rows"]
    if not rows:
        print("no completed runs found")
        return 1
    # accuracy columns carry mean and std; timing columns are mean-only
    tasks = sorted(
        {
            k[: -len("_mean")]
            for row in rows
            for k in row
            if k.endswith("_mean") and k[: -len("_mean")] + "_std" in row
        }
    )
    header = ["value", "n"] + tasks
    print("  ".join(f"{h:>16}" for h in header))
    for row in rows:
        cells = [f"{row['value']!s:>16}", f"{row['n_runs']:>16}"]
        for t in tasks:
            mean, std = row.get(f"{t}_mean"), row.get(f"{t}_std")
            cells.append(f"{mean:8.2f} ± {std:5.2f}" if mean is not None else " " * 16)
        print("  ".join(cells))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchselect",
        description="Bounded-memory patch selection benchmark toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic benchmark split")
    p.add_argument("--config", help="JSON file with dataset fields")
    p.add_argument("--canvas-size", dest="canvas_size", type=int)
    p.add_argument("--digit-size", dest="digit_size", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("train", "validation"))
    p.add_argument("--noise-count", dest="noise_count", type=_noise_count,
                   help="integer or 'auto'")
    p.add_argument("--noise-thickness", dest="noise_thickness", type=float)
    p.add_argument("--noise-size", dest="noise_size", type=int)
    p.add_argument("--out", required=True, help="output prefix (.json/.npz)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="JSON file with training fields")
    p.add_argument("--dataset")
    p.add_argument("--val-dataset", dest="val_dataset")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    p.add_argument("--schedule", choices=("warmup_cosine", "linear_cosine"))
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--m", dest="m_top", type=int, help="memory size M")
    p.add_argument("--i", dest="iter_size", type=int, help="iteration size I")
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--pixel-norm", dest="pixel_norm", choices=("none", "imagenet"))
    p.add_argument("--tasks", type=_tasks, help="comma-separated task names")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--sts-root", dest="sts_root")
    p.add_argument("--subset-fraction", dest="subset_fraction", type=float)
    p.add_argument("--subset-seed", dest="subset_seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--use-validation-split", action="store_true",
                   help="for two-split manifests, evaluate the validation split")
    p.add_argument("--sts-root", dest="sts_root")
    p.add_argument("--subset-fraction", dest="subset_fraction", type=float)
    p.add_argument("--subset-seed", dest="subset_seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attnmap", help="render an attention map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset manifest to pull a sample from")
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--image", help="image file instead of a dataset sample")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--crop", type=int, nargs=4, metavar=("Y0", "X0", "H", "W"))
    p.add_argument("--sts-root", dest="sts_root")
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("ingest-sts", help="build a traffic-sign manifest")
    p.add_argument("--root", required=True, help="dataset root with Set1/Set2")
    p.add_argument("--train-set", dest="train_set", default="Set1",
                   choices=("Set1", "Set2"))
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_ingest_sts)

    p = sub.add_parser("sweep", help="run an experiment sweep")
    p.add_argument("--spec", required=True,
                   help="spec JSON path or a built-in spec name")
    p.add_argument("--workspace", required=True)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="list runs and exit")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate a sweep directory")
    p.add_argument("--sweep-dir", dest="sweep_dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
