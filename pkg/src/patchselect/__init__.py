"""Bounded-memory patch selection for very large images, with testbed.

The library has three layers:

- data: Bezier-curve noise glyphs (``bezier``), the synthetic multi-task
  digit benchmark (``dataset``, ``mnist_io``), traffic-sign ingestion
  (``sts``), and patch tiling (``patches``);
- model: streaming top-M patch selection with cross-attention scoring and
  pooling (``model``);
- experiments: training loop (``training``), sweep runner (``sweeps``),
  and attention-map export (``attention_maps``), all wired into the
  ``patchselect`` command (``cli``).
"""

from .bezier import (
    BezierSpec,
    NoiseGlyph,
    bezier_point,
    discretize_curve,
    random_glyph,
    rasterize_glyph,
)
from .dataset import (
    CanvasSample,
    DatasetConfig,
    GenerationError,
    compute_labels,
    generate_dataset,
    generate_sample,
    load_dataset,
    noise_count_auto,
    o2i_ratio,
    rasterize_canvas,
    save_dataset,
    scale_digit,
)
from .mnist_io import DigitBank, ensure_digit_bank, load_mnist, surrogate_bank
from .model import (
    CrossAttnPool,
    EncoderSpec,
    IpsNet,
    SelectionBuffer,
    SelectionStats,
    aggregate,
    build_encoder,
    ips_select,
    load_checkpoint,
    save_checkpoint,
)
from .patches import Patch, PatchGrid, extract_patches, o2p_ratio, patch_grid
from .rng import stream
from .training import (
    CanvasDataset,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    lr_at,
    max_random_baseline,
    multi_task_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BezierSpec",
    "NoiseGlyph",
    "bezier_point",
    "discretize_curve",
    "random_glyph",
    "rasterize_glyph",
    "CanvasSample",
    "DatasetConfig",
    "GenerationError",
    "compute_labels",
    "generate_dataset",
    "generate_sample",
    "load_dataset",
    "noise_count_auto",
    "o2i_ratio",
    "rasterize_canvas",
    "save_dataset",
    "scale_digit",
    "DigitBank",
    "ensure_digit_bank",
    "load_mnist",
    "surrogate_bank",
    "CrossAttnPool",
    "EncoderSpec",
    "IpsNet",
    "SelectionBuffer",
    "SelectionStats",
    "aggregate",
    "build_encoder",
    "ips_select",
    "load_checkpoint",
    "save_checkpoint",
    "Patch",
    "PatchGrid",
    "extract_patches",
    "o2p_ratio",
    "patch_grid",
    "stream",
    "CanvasDataset",
    "TrainConfig",
    "TrainingDiverged",
    "evaluate",
    "lr_at",
    "max_random_baseline",
    "multi_task_loss",
    "train",
    "__version__",
]
