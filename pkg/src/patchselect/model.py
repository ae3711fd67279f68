"""Iterative patch selection with cross-attention pooling.

The selection loop streams patches through a frozen-scoring pass: patches
are encoded in chunks of ``I``, scored by a single-query multi-head
cross-attention module in no-gradient mode, and only the top ``M`` survive
each round, so at most ``M + I`` patch embeddings are ever resident. The
survivors are then re-encoded with gradients enabled and aggregated by the
same attention module into one bag embedding that feeds the task heads.

Ranking uses the head-averaged pre-softmax logits: unlike softmax weights,
these do not depend on which other patches are in the comparison set, which
is what makes the streaming top-M equal to a global top-M. Softmax scores
are still reported for display and aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# name -> (head kind, output width)
TASK_HEADS = {
    "maj": ("categorical", 10),
    "max": ("categorical", 10),
    "top": ("categorical", 10),
    "multi": ("multilabel", 10),
    "sign": ("categorical", 4),
}

__all__ = [
    "EncoderSpec",
    "build_encoder",
    "CrossAttnPool",
    "SelectionBuffer",
    "SelectionStats",
    "ips_select",
    "aggregate",
    "IpsNet",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "resnet18"
    pretrained: bool = False
    embed_dim: int = 512


def build_encoder(spec: EncoderSpec) -> nn.Module:
    """Residual CNN encoder mapping (B, 3, P, P) patches to (B, D)."""
    if spec.architecture != "resnet18":
        raise ValueError(f"unsupported encoder architecture {spec.architecture!r}")
    from torchvision.models import resnet18

    weights = "IMAGENET1K_V1" if spec.pretrained else None
    net = resnet18(weights=weights)
    if spec.embed_dim != net.fc.in_features:
        raise ValueError(
            f"embed_dim {spec.embed_dim} does not match encoder width "
            f"{net.fc.in_features}"
        )
    net.fc = nn.Identity()
    return net


class CrossAttnPool(nn.Module):
    """Single learnable query attending over a set of patch embeddings.

    Per head ``h``, weights are ``softmax_m(q_h . k_mh / sqrt(D_h))`` over
    the patches; the per-patch display/ranking score is the arithmetic mean
    over heads. ``aggregate`` returns the attention-weighted sum of value
    projections (the bag embedding); ``forward`` additionally applies the
    output projection.
    """

    def __init__(self, embed_dim: int = 512, n_heads: int = 8, value_dim: int | None = None):
        super().__init__()
        if embed_dim % n_heads != 0:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {n_heads} heads")
        value_dim = embed_dim if value_dim is None else value_dim
        if value_dim % n_heads != 0:
            raise ValueError(f"value_dim {value_dim} not divisible by {n_heads} heads")
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.head_dim = embed_dim // n_heads
        self.value_dim = value_dim
        self.norm = nn.LayerNorm(embed_dim)
        self.w_q = nn.Linear(embed_dim, embed_dim, bias=False)
        self.w_k = nn.Linear(embed_dim, embed_dim, bias=False)
        self.w_v = nn.Linear(embed_dim, value_dim, bias=False)
        self.w_o = nn.Linear(value_dim, embed_dim, bias=False)
        self.query = nn.Parameter(torch.empty(1, embed_dim))
        nn.init.normal_(self.query, std=embed_dim**-0.5)

    def _head_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Scaled per-head dot products, shape (..., m, H)."""
        k = self.w_k(self.norm(x))
        k = k.reshape(*k.shape[:-1], self.n_heads, self.head_dim)
        q = self.w_q(self.query).reshape(self.n_heads, self.head_dim)
        return (k * q).sum(-1) / math.sqrt(self.head_dim)

    def attention_logits(self, x: torch.Tensor) -> torch.Tensor:
        """Head-averaged pre-softmax logits, shape (..., m).

        A patch's logit depends only on its own embedding, never on the
        rest of the set; this is the selection ranking key.
        """
        return self._head_logits(x).mean(-1)

    def attention_scores(self, x: torch.Tensor) -> torch.Tensor:
        """Head-averaged softmax weights over the patch set, shape (..., m).

        Non-negative and summing to 1 over the set; identical whether or
        not gradients are being tracked.
        """
        return self._head_logits(x).softmax(dim=-2).mean(-1)

    def aggregate(self, x: torch.Tensor) -> torch.Tensor:
        """Attention-weighted sum of value projections, shape (..., D_v)."""
        weights = self._head_logits(x).softmax(dim=-2)  # (..., m, H)
        v = self.w_v(self.norm(x))
        v = v.reshape(*v.shape[:-1], self.n_heads, self.value_dim // self.n_heads)
        pooled = (weights.unsqueeze(-1) * v).sum(-3)  # (..., H, D_v/H)
        return pooled.reshape(*pooled.shape[:-2], self.value_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (bag representation (..., D), display scores (..., m))."""
        return self.w_o(self.aggregate(x)), self.attention_scores(x)


@dataclass
class SelectionStats:
    """Instrumentation of one selection pass."""

    peak_resident: int = 0  # max patch embeddings alive at once
    n_iterations: int = 0

    def observe(self, resident: int):
        self.peak_resident = max(self.peak_resident, resident)


@dataclass
class SelectionBuffer:
    """Final top-M working set, sorted by score descending (ties: lower index)."""

    capacity: int
    iteration_size: int
    indices: np.ndarray  # (m,) original stream positions
    embeddings: torch.Tensor  # (m, D)
    logits: np.ndarray  # (m,) ranking keys from the last scoring pass
    scores: np.ndarray  # (m,) softmax attention over the retained set

    def __len__(self) -> int:
        return len(self.indices)


def _chunks(it, size: int):
    buf = []
    for item in it:
        buf.append(item)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def _encode(items: list, encoder: nn.Module | None) -> torch.Tensor:
    if encoder is None:
        rows = [torch.as_tensor(np.asarray(x)).reshape(-1) for x in items]
        return torch.stack(rows)
    batch = torch.stack([torch.as_tensor(np.asarray(x)) for x in items])
    return encoder(batch)


def ips_select(
    patch_stream: Iterable,
    m_top: int,
    iter_size: int,
    pool: CrossAttnPool,
    encoder: nn.Module | None = None,
    stats: SelectionStats | None = None,
) -> SelectionBuffer:
    """Stream patches and keep the top ``m_top`` by attention ranking.

    The buffer is seeded with the first ``min(m_top, N)`` patches; each
    round appends the next at most ``iter_size`` patches, rescores the
    union in no-gradient mode, and retains the top ``m_top`` (ties broken
    toward the lower stream index). With ``encoder=None`` the stream items
    are treated as precomputed embedding vectors.
    """
    if m_top < 1 or iter_size < 1:
        raise ValueError("m_top and iter_size must be >= 1")
    if stats is None:
        stats = SelectionStats()
    it = enumerate(patch_stream)
    first = []
    for _, pair in zip(range(m_top), it):
        first.append(pair)
    if not first:
        raise ValueError("empty patch stream")

    with torch.no_grad():
        indices = [i for i, _ in first]
        emb = _encode([x for _, x in first], encoder)
        logits = pool.attention_logits(emb)
        stats.observe(len(indices))

        for chunk in _chunks(it, iter_size):
            new_idx = [i for i, _ in chunk]
            new_emb = _encode([x for _, x in chunk], encoder)
            union_emb = torch.cat([emb, new_emb])
            union_idx = indices + new_idx
            stats.observe(len(union_idx))
            union_logits = pool.attention_logits(union_emb)
            order = sorted(
                range(len(union_idx)),
                key=lambda j: (-float(union_logits[j]), union_idx[j]),
            )[:m_top]
            # keep ascending stream order inside the buffer between rounds
            order.sort(key=lambda j: union_idx[j])
            indices = [union_idx[j] for j in order]
            emb = union_emb[order]
            logits = union_logits[order]
            stats.n_iterations += 1

        scores = pool.attention_scores(emb)
        final = sorted(
            range(len(indices)), key=lambda j: (-float(logits[j]), indices[j])
        )
    return SelectionBuffer(
        capacity=m_top,
        iteration_size=iter_size,
        indices=np.asarray([indices[j] for j in final]),
        embeddings=emb[final],
        logits=logits[final].cpu().numpy(),
        scores=scores[final].cpu().numpy(),
    )


def aggregate(buffer: SelectionBuffer, pool: CrossAttnPool) -> torch.Tensor:
    """Gradient-mode weighted average of the buffer's value projections."""
    if len(buffer) == 0:
        raise ValueError("cannot aggregate an empty buffer")
    return pool.aggregate(buffer.embeddings)


class IpsNet(nn.Module):
    """End-to-end classifier: tile, select, re-encode, pool, classify.

    ``pixel_norm`` is "none" for canvases already in [0, 1] (the synthetic
    benchmark) or "imagenet" for RGB photos fed to a pretrained encoder.
    Grayscale input is replicated to three channels at the patch level.
    """

    def __init__(
        self,
        encoder_spec: EncoderSpec = EncoderSpec(),
        m_top: int = 100,
        iter_size: int = 100,
        patch_size: int = 50,
        stride: int = 50,
        tasks: tuple[str, ...] = ("maj", "max", "top", "multi"),
        n_heads: int = 8,
        pixel_norm: str = "none",
    ):
        super().__init__()
        unknown = set(tasks) - set(TASK_HEADS)
        if unknown:
            raise ValueError(f"unknown tasks: {sorted(unknown)}")
        if pixel_norm not in ("none", "imagenet"):
            raise ValueError(f"unknown pixel_norm {pixel_norm!r}")
        self.encoder_spec = encoder_spec
        self.m_top = m_top
        self.iter_size = iter_size
        self.patch_size = patch_size
        self.stride = stride
        self.tasks = tuple(tasks)
        self.pixel_norm = pixel_norm
        self.encoder = build_encoder(encoder_spec)
        self.pool = CrossAttnPool(encoder_spec.embed_dim, n_heads)
        self.heads = nn.ModuleDict(
            {t: nn.Linear(encoder_spec.embed_dim, TASK_HEADS[t][1]) for t in tasks}
        )
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("_in_mean", mean, persistent=False)
        self.register_buffer("_in_std", std, persistent=False)
        self.last_stats: SelectionStats | None = None
        self.last_selection: list[dict] | None = None

    def hyperparams(self) -> dict:
        return {
            "encoder": {
                "architecture": self.encoder_spec.architecture,
                "pretrained": self.encoder_spec.pretrained,
                "embed_dim": self.encoder_spec.embed_dim,
            },
            "m_top": self.m_top,
            "iter_size": self.iter_size,
            "patch_size": self.patch_size,
            "stride": self.stride,
            "tasks": list(self.tasks),
            "n_heads": self.pool.n_heads,
            "pixel_norm": self.pixel_norm,
        }

    @classmethod
    def from_hyperparams(cls, hp: dict) -> "IpsNet":
        enc = hp["encoder"]
        return cls(
            encoder_spec=EncoderSpec(
                architecture=enc["architecture"],
                pretrained=False,  # weights come from the checkpoint
                embed_dim=enc["embed_dim"],
            ),
            m_top=hp["m_top"],
            iter_size=hp["iter_size"],
            patch_size=hp["patch_size"],
            stride=hp["stride"],
            tasks=tuple(hp["tasks"]),
            n_heads=hp["n_heads"],
            pixel_norm=hp["pixel_norm"],
        )

    def grid_coords(self, height: int, width: int) -> list[tuple[int, int]]:
        from .patches import patch_grid

        return list(patch_grid(height, width, self.patch_size, self.stride).coords)

    def _patch_batch(
        self, canvases: torch.Tensor, coords: list[tuple[int, int]]
    ) -> torch.Tensor:
        """Slice, channel-replicate, and normalize patches (B, c, 3, P, P)."""
        p = self.patch_size
        tiles = torch.stack(
            [canvases[:, :, y : y + p, x : x + p] for y, x in coords], dim=1
        )
        if tiles.shape[2] == 1:
            tiles = tiles.expand(-1, -1, 3, -1, -1)
        b, c = tiles.shape[:2]
        flat = tiles.reshape(b * c, 3, p, p)
        if self.pixel_norm == "imagenet":
            flat = (flat - self._in_mean) / self._in_std
        return flat.contiguous()

    def _encode_patches(self, canvases: torch.Tensor, coords) -> torch.Tensor:
        b = canvases.shape[0]
        flat = self._patch_batch(canvases, coords)
        return self.encoder(flat).reshape(b, len(coords), -1)

    def select(self, canvases: torch.Tensor) -> tuple[torch.Tensor, SelectionStats]:
        """Streaming top-M selection for a batch; returns indices (B, m).

        Runs with gradients disabled and the encoder in eval mode so that
        scores are a pure per-patch function of the frozen weights.
        """
        coords = self.grid_coords(canvases.shape[-2], canvases.shape[-1])
        n = len(coords)
        b = canvases.shape[0]
        m = min(self.m_top, n)
        stats = SelectionStats()
        was_training = self.encoder.training
        self.encoder.eval()
        try:
            with torch.no_grad():
                idx = torch.arange(m).expand(b, m)
                emb = self._encode_patches(canvases, coords[:m])
                logits = self.pool.attention_logits(emb)
                stats.observe(m)
                pos = m
                while pos < n:
                    chunk = coords[pos : pos + self.iter_size]
                    new_idx = torch.arange(pos, pos + len(chunk)).expand(b, len(chunk))
                    new_emb = self._encode_patches(canvases, chunk)
                    union_emb = torch.cat([emb, new_emb], dim=1)
                    union_idx = torch.cat([idx, new_idx], dim=1)
                    stats.observe(union_idx.shape[1])
                    union_logits = self.pool.attention_logits(union_emb)
                    # union rows are ascending in stream index, so a stable
                    # descending sort breaks ties toward the lower index
                    order = torch.argsort(-union_logits, dim=1, stable=True)[:, :m]
                    order, _ = order.sort(dim=1)  # restore ascending index order
                    idx = torch.gather(union_idx, 1, order)
                    emb = torch.gather(
                        union_emb, 1, order.unsqueeze(-1).expand(-1, -1, union_emb.shape[-1])
                    )
                    logits = torch.gather(union_logits, 1, order)
                    stats.n_iterations += 1
                    pos += len(chunk)
                scores = self.pool.attention_scores(emb)
                rank = torch.argsort(-logits, dim=1, stable=True)
        finally:
            self.encoder.train(was_training)
        self.last_selection = [
            {
                "indices": torch.gather(idx, 1, rank)[i].cpu().numpy(),
                "scores": torch.gather(scores, 1, rank)[i].cpu().numpy(),
                "coords": coords,
            }
            for i in range(b)
        ]
        self.last_stats = stats
        return idx, stats

    def forward(self, canvases: torch.Tensor) -> dict[str, torch.Tensor]:
        """Per-task logits for a batch of canvases (B, 1|3, H, W)."""
        if canvases.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got {tuple(canvases.shape)}")
        coords = self.grid_coords(canvases.shape[-2], canvases.shape[-1])
        idx, _ = self.select(canvases)
        b, m = idx.shape
        tiles = [
            self._patch_batch(canvases[i : i + 1], [coords[j] for j in idx[i].tolist()])
            for i in range(b)
        ]
        emb = self.encoder(torch.cat(tiles)).reshape(b, m, -1)
        bag, _ = self.pool(emb)
        return {t: self.heads[t](bag) for t in self.tasks}


def save_checkpoint(path: str | Path, model: IpsNet, config_echo: dict | None = None):
    """Serialize weights + model hyperparameters + rng states."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "hyperparams": model.hyperparams(),
        "state_dict": model.state_dict(),
        "config_echo": config_echo or {},
        "rng": {
            "torch": torch.get_rng_state(),
            "numpy": np.random.get_state(),
        },
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, restore_rng: bool = False) -> tuple[IpsNet, dict]:
    """Rebuild the model from a checkpoint; returns (model, config echo)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r} in {path}")
    model = IpsNet.from_hyperparams(payload["hyperparams"])
    model.load_state_dict(payload["state_dict"])
    if restore_rng:
        torch.set_rng_state(payload["rng"]["torch"])
        np.random.set_state(payload["rng"]["numpy"])
    return model, payload.get("config_echo", {})
