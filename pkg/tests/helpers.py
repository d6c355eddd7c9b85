"""Shared numerical oracles for the test suite."""
from __future__ import annotations

import numpy as np
import torch

from posegait.core import EmbeddingSet
from posegait.ingest import DatasetIndex, IndexEntry
from posegait.model import backbone_config, build_backbone
from posegait.protocols import ProtocolSpec


def central_differences(fn, params, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def randomize_(model, seed=0, scale=0.5):
    """Replace every parameter (including zero-initialized ones) with random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return model


def tiny_model(family, graph, branches=("joint", "velocity"), layers=4, width=8, emb=4, activation="tanh", seed=0):
    cfg = backbone_config(
        family,
        layers,
        width=width,
        embedding_dim=emb,
        input_branches=branches,
        heads=2,
        kernel_size=3,
        activation=activation,
        stem_channels=width,
    )
    return randomize_(build_backbone(cfg, graph, seed=seed, dtype=torch.float64), seed)


def max_rel_error(num, ana, atol):
    num, ana = np.asarray(num), np.asarray(ana)
    return float(np.max(np.abs(num - ana) / (atol + np.abs(ana))))


def brute_force_first_hits(gallery, probe, exclude_identical_view):
    """Full sort per probe with explicit loops; nan marks an empty gallery."""
    out = []
    for i in range(len(probe)):
        cands = []
        for j in range(len(gallery)):
            if exclude_identical_view and gallery.views[j] == probe.views[i]:
                continue
            d = float(np.sqrt(sum((a - b) ** 2 for a, b in zip(probe.vectors[i], gallery.vectors[j]))))
            cands.append((d, j))
        if not cands:
            out.append(np.nan)
            continue
        cands.sort()
        hit = next((r + 1 for r, (_, j) in enumerate(cands) if gallery.labels[j] == probe.labels[i]), np.inf)
        out.append(hit)
    return np.array(out, dtype=float)


def random_retrieval(rng, n_gallery, n_probe, dim=3, subjects=5, views=3):
    """Gallery/probe pair on a coarse integer grid so distance ties occur."""

    def make(n):
        return EmbeddingSet(
            rng.integers(-2, 3, size=(n, dim)).astype(float),
            rng.integers(0, subjects, size=n),
            [f"{v:03d}" for v in rng.integers(0, views, size=n)],
            ["c"] * n,
        )

    return make(n_gallery), make(n_probe)


def run_config(index_root, out_dir, **sections):
    """Small float64 run on a generated dataset; keyword sections override."""
    from posegait.config import parse_config

    raw = {
        "seed": 0,
        "dtype": "float64",
        "data": {"index": str(index_root / "index.tsv"), "protocol": "synthetic"},
        "sampler": {"kind": "triplet", "P": 2, "K": 2},
        "transforms": {"steps": [{"random_select": {"length": 12}}], "branches": ["joint"]},
        "model": {"family": "gait_tr_like", "num_layers": 2, "width": 8, "embedding_dim": 8, "heads": 2, "kernel_size": 3},
        "optimizer": {"kind": "adam", "max_lr": 0.01},
        "schedule": {"total_steps": 20},
        "output": {"dir": str(out_dir)},
    }
    raw.update(sections)
    return parse_config(raw)


def fake_index(subjects, per_subject):
    """Index of never-loaded entries where every subject trains."""
    entries = [
        IndexEntry(f"{s:04d}", f"c{k:03d}", f"{k % 11:03d}", f"{s:04d}/c{k:03d}/seq.psg1", 10)
        for s in range(subjects)
        for k in range(per_subject)
    ]
    return DatasetIndex("/nonexistent", entries, "coco17", ProtocolSpec("fake", train_subjects=None, test_subjects="all"))
