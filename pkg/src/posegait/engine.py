"""Training loop, OneCycle schedule and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from .config import RunConfig
from .core import EmbeddingSet, LayoutError, SampleBatch, build_graph
from .evaluation import GridReport, RankResult, casiab_report, rank_k, split_embeddings
from .ingest import DatasetIndex, SequenceCache, read_index
from .loss import SupConSpec, supcon_loss, triplet_loss
from .model import Backbone, batch_tensor, build_backbone, embed
from .sampling import make_batch, select
from .transforms import Pipeline

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "loss", "n_active", "wall_ms")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _anneal(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * frac) + 1.0)


def onecycle_phase_end(total_steps: int, pct_start: float = 0.3) -> int:
    """Step at which the learning rate peaks."""
    return int(math.floor(pct_start * (total_steps - 1)))


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = 0.3,
    div: float = 25.0,
    final_div: float = 1e4,
) -> float:
    """Cosine warm-up from max_lr/div to max_lr, then cosine decay to max_lr/final_div."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = onecycle_phase_end(total_steps, pct_start)
    if step == peak:
        return max_lr
    if step < peak:
        return _anneal(max_lr / div, max_lr, step / peak)
    return _anneal(max_lr, max_lr / final_div, (step - peak) / (total_steps - 1 - peak))


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


class Trainer:
    """Owns the model, optimizer and RNG state of one training run.

    All randomness after model initialization (batch selection and
    augmentation) comes from a single numpy generator, so the state saved in
    a checkpoint is enough to continue a run step for step.
    """

    def __init__(self, cfg: RunConfig, index: DatasetIndex | None = None):
        self.cfg = cfg
        if index is None:
            if cfg.index_path is None:
                raise TrainingError("no dataset index configured (data.index)")
            index = read_index(cfg.index_path, cfg.protocol)
        self.index = index
        if not index.train:
            raise TrainingError("the protocol leaves no training sequences")
        self.graph = build_graph(index.layout_id)
        self.pipeline = Pipeline(cfg.transforms, self.graph)
        self.dtype = _torch_dtype(cfg.dtype)
        self.model = build_backbone(cfg.model, self.graph, seed=cfg.seed, dtype=self.dtype)
        opt_cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
        self.optimizer = opt_cls(
            self.model.parameters(),
            lr=cfg.max_lr / cfg.div,
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.loss_ema: float | None = None
        self.loader = SequenceCache(index)

    # --- batches -----------------------------------------------------------------

    def next_batch(self) -> SampleBatch:
        selection = select(self.index, self.cfg.sampler, self.rng)
        raw = make_batch(self.index, selection, self.cfg.sampler, self.loader)
        views = 2 if isinstance(self.cfg.loss, SupConSpec) and self.cfg.loss.views == "two" else 1
        seqs = [self.pipeline(x, self.rng) for x in raw.sequences]
        if views == 2:
            seqs += [self.pipeline(x, self.rng) for x in raw.sequences]
            return SampleBatch(
                seqs,
                np.concatenate([raw.labels, raw.labels]),
                raw.views * 2,
                raw.conditions * 2,
                raw.indices * 2,
                raw.spec,
            )
        return SampleBatch(seqs, raw.labels, raw.views, raw.conditions, raw.indices, raw.spec)

    # --- optimization -----------------------------------------------------------

    def lr_at(self, step: int) -> float:
        c = self.cfg
        return onecycle_lr(step, c.total_steps, c.max_lr, c.pct_start, c.div, c.final_div)

    def compute_loss(self, batch: SampleBatch) -> tuple[torch.Tensor, int]:
        x = batch_tensor(batch.sequences, self.dtype)
        feats = self.model(x)
        labels = torch.as_tensor(np.asarray(batch.labels))
        if isinstance(self.cfg.loss, SupConSpec):
            return supcon_loss(feats, self.cfg.loss, labels), len(labels)
        out = triplet_loss(feats, self.cfg.loss, labels)
        return out.loss, out.n_active

    def train_step(self, batch: SampleBatch | None = None, lr: float | None = None) -> dict[str, Any]:
        t0 = time.perf_counter()
        if batch is None:
            batch = self.next_batch()
        lr = self.lr_at(self.step) if lr is None else lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss, n_active = self.compute_loss(batch)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss.item()} at step {self.step} (lr {lr})")
        loss.backward()
        self.optimizer.step()
        for name, p in self.model.named_parameters():
            if not torch.isfinite(p).all():
                raise TrainingError(f"parameter {name} became non-finite at step {self.step}")
        value = float(loss.item())
        self.loss_ema = value if self.loss_ema is None else 0.9 * self.loss_ema + 0.1 * value
        record = {
            "step": self.step,
            "lr": lr,
            "loss": value,
            "n_active": int(n_active),
            "wall_ms": round(1000 * (time.perf_counter() - t0), 3),
        }
        self.step += 1
        return record

    def fit(self, steps: int | None = None, log_path: Path | None = None, checkpoint_every: int = 0) -> list[dict]:
        """Train until ``steps`` more steps are done (default: to total_steps)."""
        end = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        records = []
        writer = None
        fh = None
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not log_path.exists() or self.step == 0
            fh = open(log_path, "w" if fresh else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if fresh:
                writer.writeheader()
        try:
            while self.step < end:
                rec = self.train_step()
                records.append(rec)
                if writer is not None:
                    writer.writerow({**rec, "lr": repr(rec["lr"]), "loss": repr(rec["loss"])})
                    fh.flush()
                if checkpoint_every and self.step % checkpoint_every == 0:
                    save_checkpoint(self, self.cfg.output_dir / f"step{self.step:06d}.ckpt")
        finally:
            if fh is not None:
                fh.close()
        return records

    # --- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        opt = self.optimizer.state_dict()
        for pid, st in opt["state"].items():
            for k, v in st.items():
                arrays[f"optim/{pid}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
        arrays["torch_rng"] = torch.get_rng_state().numpy()
        return arrays

    def state_meta(self) -> dict[str, Any]:
        opt = self.optimizer.state_dict()
        return {
            "step": self.step,
            "loss_ema": self.loss_ema,
            "config": self.cfg.raw,
            "layout_id": self.graph.layout_id,
            "numpy_rng": self.rng.bit_generator.state,
            "param_groups": opt["param_groups"],
        }

    def load_state(self, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
        model_state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
        self.model.load_state_dict(model_state)
        state: dict[int, dict[str, torch.Tensor]] = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, pid, name = k.split("/")
                state.setdefault(int(pid), {})[name] = torch.from_numpy(v.copy())
        self.optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
        torch.set_rng_state(torch.from_numpy(arrays["torch_rng"].copy()))
        self.rng.bit_generator.state = meta["numpy_rng"]
        self.step = int(meta["step"])
        self.loss_ema = meta["loss_ema"]


# --- checkpoint file ----------------------------------------------------------------
# b"PGCK", uint32 version, uint64 header length, UTF-8 JSON header, then the raw
# little-endian array bytes at the offsets listed in the header's manifest.

CKPT_MAGIC = b"PGCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


def write_checkpoint(path: str | Path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    manifest, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        blob = a.tobytes()
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": CKPT_VERSION, "meta": meta, "arrays": manifest}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    _, version, hlen = _CKPT_HEAD.unpack(raw[: _CKPT_HEAD.size])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    start = _CKPT_HEAD.size + hlen
    try:
        header = json.loads(raw[_CKPT_HEAD.size : start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    arrays = {}
    for item in header["arrays"]:
        lo = start + item["offset"]
        hi = lo + item["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: corrupt file, array {item['name']} truncated")
        arrays[item["name"]] = np.frombuffer(raw[lo:hi], dtype=np.dtype(item["dtype"])).reshape(item["shape"])
    return header["meta"], arrays


def save_checkpoint(trainer: Trainer, path: str | Path) -> None:
    write_checkpoint(path, trainer.state_meta(), trainer.state_arrays())


def load_checkpoint(path: str | Path, trainer: Trainer) -> Trainer:
    meta, arrays = read_checkpoint(path)
    trainer.load_state(meta, arrays)
    return trainer


def model_from_checkpoint(path: str | Path) -> tuple[Backbone, RunConfig]:
    from .config import parse_config

    meta, arrays = read_checkpoint(path)
    cfg = parse_config(meta["config"])
    graph = build_graph(meta["layout_id"])
    model = build_backbone(cfg.model, graph, dtype=_torch_dtype(cfg.dtype))
    model.load_state_dict({k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")})
    model.eval()
    return model, cfg


# --- evaluation glue ----------------------------------------------------------------

def embed_entries(model: Backbone, index: DatasetIndex, entries: Iterable[int], pipeline: Pipeline) -> EmbeddingSet:
    """Embed index entries without augmentation; labels are dense codes over all subjects."""
    entries = list(entries)
    if model.layout_id != index.layout_id:
        raise LayoutError(f"model expects layout {model.layout_id}, data uses {index.layout_id}")
    codes = {s: i for i, s in enumerate(index.subjects())}
    seqs = [pipeline(index.load(i).data, np.random.default_rng(0)) for i in entries]
    batch = SampleBatch(
        seqs,
        np.array([codes[index.entries[i].subject] for i in entries]),
        [index.entries[i].view for i in entries],
        [index.entries[i].condition for i in entries],
        entries,
    )
    return embed(model, batch)


def evaluate(
    model: Backbone, index: DatasetIndex, pipeline: Pipeline
) -> tuple[EmbeddingSet, RankResult, GridReport | None]:
    p = index.protocol
    entries = index.gallery + index.probe
    if not index.gallery or not index.probe:
        raise TrainingError("protocol yields an empty gallery or probe set")
    emb = embed_entries(model, index, entries, pipeline)
    gallery, probe = split_embeddings(emb, p)
    result = rank_k(gallery, probe, p.ranks, p.exclude_identical_view)
    grid = casiab_report(emb, p) if p.condition_groups else None
    return emb, result, grid
