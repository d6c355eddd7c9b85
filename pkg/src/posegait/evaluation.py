"""Cross-view rank-k retrieval, CASIA-B style reports, the embedding exchange
format and the published-results registry."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .core import EmbeddingSet
from .protocols import ProtocolSpec

log = logging.getLogger(__name__)

REGISTRY_TOLERANCE = 0.005


class EvaluationError(ValueError):
    pass


@dataclass
class RankResult:
    accuracy: dict[int, float]  # rank -> fraction of scored probes in [0, 1]
    n_scored: int
    n_dropped: int  # probes with an empty gallery after view exclusion

    def percent(self) -> dict[int, float]:
        return {k: 100.0 * v for k, v in self.accuracy.items()}


def _distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = probe[:, None, :] - gallery[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def first_hit_ranks(gallery: EmbeddingSet, probe: EmbeddingSet, exclude_identical_view: bool = True) -> np.ndarray:
    """1-based rank of the first same-subject gallery item per probe.

    ``inf`` means no match; ``nan`` marks probes whose gallery is empty after
    exclusion. Ties are broken by gallery order.
    """
    if gallery.dim != probe.dim:
        raise EvaluationError(f"embedding dimensions differ: gallery {gallery.dim}, probe {probe.dim}")
    dist = _distances(probe.vectors, gallery.vectors)
    g_views = np.asarray(gallery.views)
    g_labels = np.asarray(gallery.labels)
    out = np.full(len(probe), np.inf)
    for i in range(len(probe)):
        keep = g_views != probe.views[i] if exclude_identical_view else np.ones(len(gallery), bool)
        if not keep.any():
            out[i] = np.nan
            continue
        order = np.argsort(dist[i, keep], kind="stable")
        hits = np.flatnonzero(g_labels[keep][order] == probe.labels[i])
        if hits.size:
            out[i] = hits[0] + 1
    return out


def rank_k(
    gallery: EmbeddingSet,
    probe: EmbeddingSet,
    ranks: Sequence[int] = (1, 5, 10),
    exclude_identical_view: bool = True,
) -> RankResult:
    first = first_hit_ranks(gallery, probe, exclude_identical_view)
    dropped = int(np.isnan(first).sum())
    if dropped:
        log.warning("%d probe(s) have no gallery entries after view exclusion; not scored", dropped)
    scored = first[~np.isnan(first)]
    if scored.size == 0:
        raise EvaluationError("no probe could be scored")
    acc = {k: float((scored <= k).mean()) for k in ranks}
    return RankResult(acc, int(scored.size), dropped)


def split_embeddings(emb: EmbeddingSet, protocol: ProtocolSpec) -> tuple[EmbeddingSet, EmbeddingSet]:
    gal = [protocol.is_gallery(c) for c in emb.conditions]
    prb = [protocol.is_probe(c) and not g for c, g in zip(emb.conditions, gal)]
    if not any(gal) or not any(prb):
        raise EvaluationError("protocol selects an empty gallery or probe set")
    return emb.subset(gal), emb.subset(prb)


@dataclass
class GridReport:
    """Rank-1 (%) per condition group and probe view, plus means."""

    groups: list[str]
    views: list[str]
    cells: dict[str, dict[str, float]]  # group -> view -> accuracy
    group_means: dict[str, float]
    mean: float

    def to_rows(self) -> list[list[str]]:
        header = ["condition"] + self.views + ["mean"]
        rows = [header]
        for g in self.groups:
            rows.append([g] + [f"{self.cells[g].get(v, float('nan')):.2f}" for v in self.views] + [f"{self.group_means[g]:.2f}"])
        rows.append(["mean"] + [""] * len(self.views) + [f"{self.mean:.2f}"])
        return rows

    def to_text(self) -> str:
        return format_table(self.to_rows())

    def to_csv(self) -> str:
        return rows_to_csv(self.to_rows())


def casiab_report(emb: EmbeddingSet, protocol: ProtocolSpec) -> GridReport:
    """Per-condition, per-probe-view rank-1 with identical-view exclusion.

    A group mean averages its probe views; the overall mean averages groups.
    """
    if not protocol.condition_groups:
        raise EvaluationError(f"protocol {protocol.dataset_id} defines no condition groups")
    gallery, probe = split_embeddings(emb, protocol)
    groups = [protocol.group_of(c) for c in probe.conditions]
    present = [g for g in protocol.condition_groups if g in groups]
    if not present:
        raise EvaluationError("no probe falls in any condition group")
    views = sorted(set(probe.views))
    cells: dict[str, dict[str, float]] = {}
    for g in present:
        cells[g] = {}
        for v in views:
            mask = [gg == g and pv == v for gg, pv in zip(groups, probe.views)]
            if not any(mask):
                continue
            res = rank_k(gallery, probe.subset(mask), (1,), protocol.exclude_identical_view)
            cells[g][v] = 100.0 * res.accuracy[1]
    means = {g: float(np.mean(list(cells[g].values()))) for g in present}
    return GridReport(present, views, cells, means, float(np.mean(list(means.values()))))


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows)


def rows_to_csv(rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# --- embedding exchange format ---------------------------------------------------
# b"PEM1", uint32 N, uint32 d, N*d float32 (little-endian, row-major), then
# N JSON lines with label, view and condition.

EMB_MAGIC = b"PEM1"
_EMB_HEADER = struct.Struct("<4sII")


def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    n, d = emb.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, n, d))
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())
        for i in range(n):
            rec = {"label": emb.labels[i].item(), "view": emb.views[i], "condition": emb.conditions[i]}
            fh.write((json.dumps(rec, sort_keys=True) + "\n").encode())


def read_embeddings(path: str | Path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != EMB_MAGIC:
        raise EvaluationError(f"{path}: not a PEM1 file")
    _, n, d = _EMB_HEADER.unpack(raw[: _EMB_HEADER.size])
    end = _EMB_HEADER.size + 4 * n * d
    if len(raw) < end:
        raise EvaluationError(f"{path}: short read, expected {n * d} values")
    vectors = np.frombuffer(raw[_EMB_HEADER.size : end], dtype="<f4").reshape(n, d)
    recs = [json.loads(line) for line in raw[end:].decode().splitlines() if line]
    if len(recs) != n:
        raise EvaluationError(f"{path}: expected {n} metadata records, found {len(recs)}")
    return EmbeddingSet(
        vectors.astype(np.float64),
        np.array([r["label"] for r in recs]),
        [r["view"] for r in recs],
        [r["condition"] for r in recs],
    )


# --- published-results registry -------------------------------------------------------

@dataclass(frozen=True)
class Series:
    table: str
    method: str
    estimator: str
    version: str
    labels: tuple[str, ...]
    values: tuple[float, ...]
    mean: float | None = None
    reported_values: tuple[float, ...] | None = None
    reported_mean: float | None = None

    @property
    def key(self) -> str:
        return f"{self.table}/{self.method}/{self.estimator}/{self.version}"


@dataclass
class Registry:
    tables: dict[str, list[Series]] = field(default_factory=dict)

    def series(self) -> list[Series]:
        return [s for rows in self.tables.values() for s in rows]

    def find(self, table: str, method: str, version: str, estimator: str | None = None) -> Series:
        hits = [
            s
            for s in self.tables.get(table, [])
            if s.method == method and s.version == version and (estimator is None or s.estimator == estimator)
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} series match {table}/{method}/{version}/{estimator}")
        return hits[0]


def parse_registry(raw: Mapping[str, Any]) -> Registry:
    try:
        tables = {}
        for name, table in raw["tables"].items():
            rows = []
            for s in table["series"]:
                labels = tuple(str(x) for x in s["labels"])
                values = tuple(float(x) for x in s["values"])
                if len(labels) != len(values):
                    raise EvaluationError(f"{name}/{s['method']}: {len(labels)} labels but {len(values)} values")
                rep = s.get("reported") or {}
                rows.append(
                    Series(
                        table=name,
                        method=str(s["method"]),
                        estimator=str(s.get("estimator", "")),
                        version=str(s["version"]),
                        labels=labels,
                        values=values,
                        mean=None if s.get("mean") is None else float(s["mean"]),
                        reported_values=tuple(float(x) for x in rep["values"]) if "values" in rep else None,
                        reported_mean=float(rep["mean"]) if "mean" in rep else None,
                    )
                )
            tables[name] = rows
        return Registry(tables)
    except (KeyError, TypeError, AttributeError) as exc:
        raise EvaluationError(f"malformed registry: {exc!r}") from exc


def load_registry(path: str | Path | None = None) -> Registry:
    if path is None:
        text = resources.files("posegait").joinpath("data/registry.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise EvaluationError(f"registry is not valid YAML: {exc}") from exc
    return parse_registry(raw)


@dataclass(frozen=True)
class Finding:
    key: str
    check: str
    stated: float
    computed: float
    ok: bool

    @property
    def deviation(self) -> float:
        return abs(self.stated - self.computed)


def registry_check(registry: Registry, tolerance: float = REGISTRY_TOLERANCE) -> list[Finding]:
    """Check every stated mean against the mean of its entries.

    Rank-k series are also checked for rank-1 <= rank-5 <= rank-10. The
    parenthesized values reported by the original methods are not checked; they come
    from independent sources.
    """
    out = []
    for s in registry.series():
        if s.mean is not None:
            computed = float(np.mean(s.values))
            out.append(Finding(s.key, "mean", s.mean, computed, abs(computed - s.mean) <= tolerance))
        if s.labels[:1] == ("rank1",):
            ok = all(a <= b for a, b in zip(s.values, s.values[1:]))
            out.append(Finding(s.key, "rank_monotone", s.values[-1], max(s.values), ok))
    return out


def registry_report(findings: Sequence[Finding]) -> str:
    rows = [["series", "check", "stated", "computed", "deviation", "status"]]
    for f in findings:
        rows.append([f.key, f.check, f"{f.stated:.4f}", f"{f.computed:.4f}", f"{f.deviation:.4f}", "ok" if f.ok else "FLAGGED"])
    return format_table(rows)
