"""Unit / Block / Backbone model algebra.

Tensors follow the (N, C, T, V) convention: batch, channels, frames,
keypoints. Every unit maps (N, C, T, V) to (N, C', T, V).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import EmbeddingSet, SampleBatch, SkeletonGraph, normalized_adjacency

UNIT_KINDS = ("graph_conv", "spatial_transformer", "temporal_conv")
FAMILIES = ("resgcn_like", "gait_tr_like")
ACTIVATIONS = {
    "relu": F.relu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class ModelConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --- functional units --------------------------------------------------------

def graph_conv_forward(x, adjacency, weight, bias=None, activation="identity"):
    """y[n,:,t,:] = W^T x[n,:,t,:] A, plus bias, then the activation."""
    if x.dim() != 4:
        raise ValueError(f"expected (N, C, T, V) input, got shape {tuple(x.shape)}")
    c, v = x.shape[1], x.shape[3]
    if weight.shape[0] != c or adjacency.shape != (v, v):
        raise ValueError(
            f"shape mismatch: input {tuple(x.shape)}, weight {tuple(weight.shape)}, "
            f"adjacency {tuple(adjacency.shape)}"
        )
    y = torch.einsum("nctv,co,vw->notw", x, weight, adjacency)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return ACTIVATIONS[activation](y)


def temporal_conv_forward(x, weight, bias=None, activation="identity"):
    """Convolution along T per keypoint; ``weight`` is (C', C, k) with odd k."""
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"shape mismatch: input channels {x.shape[1]}, weight {tuple(weight.shape)}")
    y = F.conv2d(x, weight.unsqueeze(-1), bias, padding=((k - 1) // 2, 0))
    return ACTIVATIONS[activation](y)


def spatial_attention_forward(x, wq, wk, wv, wo, heads, bias_o=None, activation="identity"):
    """Multi-head self-attention over the keypoints of each frame.

    ``wq``, ``wk``, ``wv`` are (C, D) and ``wo`` is (D, C'). Returns the
    output and the attention weights of shape (N, T, heads, V, V).
    """
    n, c, t, v = x.shape
    d = wq.shape[1]
    if d % heads:
        raise ValueError(f"attention width {d} is not divisible by {heads} heads")
    tokens = x.permute(0, 2, 3, 1)  # N, T, V, C

    def split(w):
        return (tokens @ w).reshape(n, t, v, heads, d // heads).transpose(2, 3)

    q, k, val = split(wq), split(wk), split(wv)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // heads), dim=-1)
    out = (attn @ val).transpose(2, 3).reshape(n, t, v, d) @ wo
    if bias_o is not None:
        out = out + bias_o
    return ACTIVATIONS[activation](out.permute(0, 3, 1, 2)), attn


# --- configs ---------------------------------------------------------------

@dataclass(frozen=True)
class UnitConfig:
    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 9
    heads: int = 1
    activation: str = "relu"

    def problems(self) -> list[str]:
        out = []
        if self.kind not in UNIT_KINDS:
            out.append(f"unit kind {self.kind!r} not in {UNIT_KINDS}")
        if self.in_channels < 1 or self.out_channels < 1:
            out.append("unit channels must be >= 1")
        if self.kind == "temporal_conv" and self.kernel_size % 2 == 0:
            out.append(f"temporal kernel size must be odd, got {self.kernel_size}")
        if self.kind == "spatial_transformer" and (self.heads < 1 or self.out_channels % self.heads):
            out.append(f"{self.out_channels} channels not divisible by {self.heads} heads")
        if self.activation not in ACTIVATIONS:
            out.append(f"unknown activation {self.activation!r}")
        return out


@dataclass(frozen=True)
class BlockConfig:
    units: tuple[UnitConfig, ...]
    residual: bool = True
    projection: bool = False

    @property
    def in_channels(self) -> int:
        return self.units[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.units[-1].out_channels


@dataclass(frozen=True)
class BackboneConfig:
    family: str
    blocks: tuple[BlockConfig, ...]
    num_layers: int
    input_branches: tuple[str, ...] = ("joint",)
    embedding_dim: int = 128
    pooling: str = "mean_over_TV"
    coords_per_branch: int = 2
    stem_channels: int = 32
    edge_mask: bool = False
    zero_init_residual: bool = True

    @property
    def in_channels(self) -> int:
        return self.coords_per_branch * len(self.input_branches)


def backbone_config(
    family: str,
    num_layers: int,
    width: int | Sequence[int] = 32,
    embedding_dim: int = 128,
    input_branches: Sequence[str] = ("joint",),
    heads: int = 4,
    kernel_size: int = 9,
    activation: str = "relu",
    **kwargs: Any,
) -> BackboneConfig:
    """Compact builder: ``num_layers // 2`` residual blocks of (spatial, temporal) units.

    ``width`` is one channel count for every block or one per block; a block
    that changes width gets a projected residual path.
    """
    if num_layers < 2 or num_layers % 2:
        raise ModelConfigError(f"num_layers must be an even number >= 2, got {num_layers}")
    n_blocks = num_layers // 2
    widths = [width] * n_blocks if isinstance(width, int) else list(width)
    if len(widths) != n_blocks:
        raise ModelConfigError(f"{len(widths)} block widths given for {n_blocks} blocks")
    spatial = "spatial_transformer" if family == "gait_tr_like" else "graph_conv"
    stem = kwargs.pop("stem_channels", widths[0])
    blocks, prev = [], stem
    for w in widths:
        units = (
            UnitConfig(spatial, prev, w, heads=heads, activation=activation),
            UnitConfig("temporal_conv", w, w, kernel_size=kernel_size, activation=activation),
        )
        blocks.append(BlockConfig(units, residual=True, projection=prev != w))
        prev = w
    return BackboneConfig(
        family=family,
        blocks=tuple(blocks),
        num_layers=num_layers,
        input_branches=tuple(input_branches),
        embedding_dim=embedding_dim,
        stem_channels=stem,
        **kwargs,
    )


def backbone_config_from_mapping(raw: Mapping[str, Any]) -> BackboneConfig:
    raw = dict(raw)
    if "blocks" not in raw:
        return backbone_config(**raw)
    blocks = []
    for b in raw.pop("blocks"):
        b = dict(b)
        units = tuple(UnitConfig(**u) for u in b.pop("units"))
        blocks.append(BlockConfig(units, **b))
    if "input_branches" in raw:
        raw["input_branches"] = tuple(raw["input_branches"])
    return BackboneConfig(blocks=tuple(blocks), **raw)


def backbone_config_to_mapping(cfg: BackboneConfig) -> dict[str, Any]:
    out: dict[str, Any] = {
        "family": cfg.family,
        "num_layers": cfg.num_layers,
        "input_branches": list(cfg.input_branches),
        "embedding_dim": cfg.embedding_dim,
        "pooling": cfg.pooling,
        "coords_per_branch": cfg.coords_per_branch,
        "stem_channels": cfg.stem_channels,
        "edge_mask": cfg.edge_mask,
        "zero_init_residual": cfg.zero_init_residual,
        "blocks": [],
    }
    for b in cfg.blocks:
        out["blocks"].append(
            {
                "residual": b.residual,
                "projection": b.projection,
                "units": [dict(u.__dict__) for u in b.units],
            }
        )
    return out


def config_problems(cfg: BackboneConfig) -> list[str]:
    out = []
    if cfg.family not in FAMILIES:
        out.append(f"family {cfg.family!r} not in {FAMILIES}")
    if cfg.embedding_dim < 1:
        out.append("embedding_dim must be >= 1")
    if cfg.pooling != "mean_over_TV":
        out.append(f"unsupported pooling {cfg.pooling!r}")
    if not cfg.blocks:
        out.append("at least one block is required")
    total = sum(len(b.units) for b in cfg.blocks)
    if total != cfg.num_layers:
        out.append(f"num_layers {cfg.num_layers} != {total} units across blocks")
    prev = cfg.stem_channels
    for i, block in enumerate(cfg.blocks):
        if not block.units:
            out.append(f"block {i} has no units")
            continue
        for j, unit in enumerate(block.units):
            out += [f"block {i} unit {j}: {p}" for p in unit.problems()]
            if unit.in_channels != prev:
                out.append(f"block {i} unit {j}: expects {unit.in_channels} input channels, receives {prev}")
            prev = unit.out_channels
        if block.residual and block.in_channels != block.out_channels and not block.projection:
            out.append(
                f"block {i}: residual connection needs in == out channels "
                f"({block.in_channels} != {block.out_channels}) or a projection"
            )
    return out


# --- modules -----------------------------------------------------------------

def _fan_in_uniform(shape: Sequence[int], fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(*shape).uniform_(-bound, bound))


class GraphConvUnit(nn.Module):
    def __init__(self, cfg: UnitConfig, adjacency: torch.Tensor, edge_mask: bool = False):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("adjacency", adjacency.clone())
        self.weight = _fan_in_uniform((cfg.in_channels, cfg.out_channels), cfg.in_channels)
        self.bias = nn.Parameter(torch.zeros(cfg.out_channels))
        self.edge_mask = nn.Parameter(torch.zeros_like(adjacency)) if edge_mask else None

    def forward(self, x):
        a = self.adjacency if self.edge_mask is None else self.adjacency + self.edge_mask
        return graph_conv_forward(x, a, self.weight, self.bias, self.cfg.activation)

    def final_params(self):
        return [self.weight, self.bias]


class TemporalConvUnit(nn.Module):
    def __init__(self, cfg: UnitConfig):
        super().__init__()
        if cfg.kernel_size % 2 == 0:
            raise ModelConfigError(f"temporal kernel size must be odd, got {cfg.kernel_size}")
        self.cfg = cfg
        fan_in = cfg.in_channels * cfg.kernel_size
        self.weight = _fan_in_uniform((cfg.out_channels, cfg.in_channels, cfg.kernel_size), fan_in)
        self.bias = nn.Parameter(torch.zeros(cfg.out_channels))

    def forward(self, x):
        return temporal_conv_forward(x, self.weight, self.bias, self.cfg.activation)

    def final_params(self):
        return [self.weight, self.bias]


class SpatialTransformerUnit(nn.Module):
    def __init__(self, cfg: UnitConfig):
        super().__init__()
        if cfg.out_channels % cfg.heads:
            raise ModelConfigError(f"{cfg.out_channels} channels not divisible by {cfg.heads} heads")
        self.cfg = cfg
        c, d = cfg.in_channels, cfg.out_channels
        self.wq = _fan_in_uniform((c, d), c)
        self.wk = _fan_in_uniform((c, d), c)
        self.wv = _fan_in_uniform((c, d), c)
        self.wo = _fan_in_uniform((d, d), d)
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return self.attend(x)[0]

    def attend(self, x):
        c = self.cfg
        return spatial_attention_forward(x, self.wq, self.wk, self.wv, self.wo, c.heads, self.bias, c.activation)

    def final_params(self):
        return [self.wo, self.bias]


def build_unit(cfg: UnitConfig, adjacency: torch.Tensor, edge_mask: bool = False) -> nn.Module:
    if cfg.kind == "graph_conv":
        return GraphConvUnit(cfg, adjacency, edge_mask)
    if cfg.kind == "temporal_conv":
        return TemporalConvUnit(cfg)
    if cfg.kind == "spatial_transformer":
        return SpatialTransformerUnit(cfg)
    raise ModelConfigError(f"unknown unit kind {cfg.kind!r}")


class Block(nn.Module):
    """Units applied in sequence, optionally around a residual path: y = x + f(x)."""

    def __init__(self, cfg: BlockConfig, adjacency: torch.Tensor, edge_mask: bool = False, zero_init: bool = True):
        super().__init__()
        self.cfg = cfg
        self.units = nn.ModuleList(build_unit(u, adjacency, edge_mask) for u in cfg.units)
        self.proj = None
        if cfg.residual and cfg.projection:
            self.proj = nn.Conv2d(cfg.in_channels, cfg.out_channels, 1, bias=False)
        if cfg.residual and zero_init:
            with torch.no_grad():
                for p in self.units[-1].final_params():
                    p.zero_()

    def forward(self, x, check: str | None = None):
        h = x
        for j, unit in enumerate(self.units):
            h = unit(h)
            if check is not None and not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activation after {check} unit {j} ({unit.cfg.kind})")
        if not self.cfg.residual:
            return h
        return h + (x if self.proj is None else self.proj(x))


class Backbone(nn.Module):
    """Stems -> blocks -> mean pooling over T and V -> linear embedding head.

    ``resgcn_like`` models give every input branch its own graph-conv stem and
    sum the results; ``gait_tr_like`` models use a shared 1x1 projection.
    """

    def __init__(self, cfg: BackboneConfig, graph: SkeletonGraph):
        super().__init__()
        problems = config_problems(cfg)
        if problems:
            raise ModelConfigError("; ".join(problems))
        self.cfg = cfg
        self.layout_id = graph.layout_id
        adjacency = torch.as_tensor(normalized_adjacency(graph), dtype=torch.get_default_dtype())
        self.register_buffer("adjacency", adjacency)
        k = cfg.coords_per_branch
        if cfg.family == "resgcn_like":
            stem_cfg = UnitConfig("graph_conv", k, cfg.stem_channels)
            self.stems = nn.ModuleList(GraphConvUnit(stem_cfg, adjacency) for _ in cfg.input_branches)
        else:
            self.stems = nn.ModuleList([nn.Conv2d(cfg.in_channels, cfg.stem_channels, 1)])
        self.blocks = nn.ModuleList(
            Block(b, adjacency, cfg.edge_mask, cfg.zero_init_residual) for b in cfg.blocks
        )
        self.head = nn.Linear(cfg.blocks[-1].out_channels, cfg.embedding_dim)

    @property
    def num_layers(self) -> int:
        return sum(len(b.units) for b in self.blocks)

    @property
    def in_channels(self) -> int:
        return self.cfg.in_channels

    def forward(self, x: torch.Tensor, check_finite: bool = False) -> torch.Tensor:
        """(N, C, T, V) -> (N, embedding_dim)."""
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, T, V) input, got {tuple(x.shape)}")
        if self.cfg.family == "resgcn_like":
            k = self.cfg.coords_per_branch
            h = sum(stem(x[:, i * k : (i + 1) * k]) for i, stem in enumerate(self.stems))
        else:
            h = self.stems[0](x)
        if check_finite and not torch.isfinite(h).all():
            raise NonFiniteError("non-finite activation after input stem")
        for i, block in enumerate(self.blocks):
            h = block(h, check=f"block {i}" if check_finite else None)
        return self.head(h.mean(dim=(2, 3)))


def build_backbone(cfg: BackboneConfig, graph: SkeletonGraph, seed: int | None = None, dtype=torch.float32) -> Backbone:
    if seed is not None:
        torch.manual_seed(seed)
    return Backbone(cfg, graph).to(dtype)


def batch_tensor(sequences: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack (T, V, C) arrays into an (N, C, T, V) tensor."""
    arr = np.stack([np.asarray(s, dtype=np.float64) for s in sequences])
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def embed(model: Backbone, batch: SampleBatch, chunk: int = 256) -> EmbeddingSet:
    """Embed every sequence of ``batch`` in eval mode.

    Sequences of different lengths are embedded in separate groups.
    """
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = np.zeros((len(batch), model.cfg.embedding_dim))
    by_len: dict[tuple, list[int]] = {}
    for i, s in enumerate(batch.sequences):
        by_len.setdefault(np.shape(s), []).append(i)
    try:
        with torch.no_grad():
            for idx in by_len.values():
                for start in range(0, len(idx), chunk):
                    part = idx[start : start + chunk]
                    x = batch_tensor([batch.sequences[i] for i in part], dtype)
                    try:
                        y = model(x, check_finite=True)
                    except NonFiniteError as exc:
                        raise NonFiniteError(f"{exc} (batch positions {part[0]}..{part[-1]})") from None
                    out[part] = y.double().numpy()
    finally:
        model.train(was_training)
    conditions = batch.conditions or [""] * len(batch)
    return EmbeddingSet(out, np.asarray(batch.labels), list(batch.views), list(conditions))
