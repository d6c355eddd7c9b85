import dataclasses

import numpy as np
import pytest
from helpers import brute_force_first_hits, random_retrieval

from posegait.core import EmbeddingSet
from posegait.evaluation import (
    EvaluationError,
    casiab_report,
    first_hit_ranks,
    load_registry,
    rank_k,
    read_embeddings,
    registry_check,
    registry_report,
    write_embeddings,
)
from posegait.protocols import get_protocol


def emb(vectors, labels, views, conditions=None):
    n = len(labels)
    return EmbeddingSet(np.asarray(vectors, float), np.asarray(labels), views, conditions or ["c"] * n)


def test_view_exclusion_changes_the_hit():
    gallery = emb([[0.0], [1.0]], [7, 7], ["000", "090"])
    probe = emb([[0.1]], [7], ["000"])
    assert first_hit_ranks(gallery, probe, True).tolist() == [1.0]
    gallery = emb([[0.0], [1.0], [5.0]], [7, 8, 7], ["000", "090", "090"])
    assert first_hit_ranks(gallery, probe, False).tolist() == [1.0]
    assert first_hit_ranks(gallery, probe, True).tolist() == [2.0]
    res = rank_k(gallery, probe, (1, 2))
    assert res.accuracy == {1: 0.0, 2: 1.0}


def test_unmatched_and_unscorable_probes(caplog):
    gallery = emb([[0.0]], [1], ["000"])
    probe = emb([[0.0], [0.0]], [2, 1], ["090", "000"])
    ranks = first_hit_ranks(gallery, probe, True)
    assert ranks[0] == np.inf and np.isnan(ranks[1])
    res = rank_k(gallery, probe, (1,))
    assert (res.n_scored, res.n_dropped, res.accuracy[1]) == (1, 1, 0.0)
    assert "no gallery entries" in caplog.text
    with pytest.raises(EvaluationError, match="no probe could be scored"):
        rank_k(gallery, probe.subset([False, True]))


@pytest.mark.parametrize("exclude", [True, False])
def test_matches_brute_force(exclude, rng):
    for _ in range(20):
        gallery, probe = random_retrieval(rng, int(rng.integers(1, 60)), int(rng.integers(1, 20)))
        assert np.array_equal(first_hit_ranks(gallery, probe, exclude), brute_force_first_hits(gallery, probe, exclude), equal_nan=True)


def test_dimension_mismatch():
    with pytest.raises(EvaluationError, match="embedding dimensions differ: gallery 2, probe 3"):
        rank_k(emb(np.zeros((1, 2)), [0], ["a"]), emb(np.zeros((1, 3)), [0], ["b"]))


def test_casiab_grid_on_separable_embeddings():
    subjects, views = ["075", "076", "077"], ["000", "090", "180"]
    conds = ["nm-01", "nm-02", "nm-03", "nm-04", "nm-05", "nm-06", "bg-01", "bg-02", "cl-01", "cl-02"]
    rows = [(int(s), v, c) for s in subjects for v in views for c in conds]
    vectors = [[10.0 * s, 0.01 * k] for k, (s, _, _) in enumerate(rows)]
    report = casiab_report(
        emb(vectors, [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows]), get_protocol("casiab")
    )
    assert report.groups == ["NM", "BG", "CL"] and report.views == views
    assert all(v == 100.0 for g in report.groups for v in report.cells[g].values())
    assert report.mean == 100.0
    assert report.to_csv().splitlines()[0] == "condition,000,090,180,mean"
    assert "100.00" in report.to_text()


def test_registry_row_and_means():
    reg = load_registry()
    row = reg.find("casiab", "GaitTR", "vanilla", "SimCC")
    assert dict(zip(row.labels, row.values)) == {"NM": 94.91, "BG": 88.82, "CL": 90.34}
    assert row.mean == 91.35 and row.reported_mean == 92.40
    findings = {(f.key, f.check): f for f in registry_check(reg)}
    assert findings[("oumvlp_pose/GaitGraph/AlphaPose/vanilla", "mean")].ok
    assert findings[("oumvlp_pose/GaitGraph2/AlphaPose/vanilla", "mean")].ok
    assert findings[("oumvlp_pose/GaitGraph2/AlphaPose/vanilla", "mean")].stated == 62.11


def test_registry_flags_a_tampered_row():
    reg = load_registry()
    row = reg.find("oumvlp_pose", "GaitGraph", "vanilla")
    reg.tables["oumvlp_pose"][reg.tables["oumvlp_pose"].index(row)] = dataclasses.replace(row, mean=2.9)
    bad = [f for f in registry_check(reg) if not f.ok]
    assert any(f.key == row.key and f.check == "mean" for f in bad)
    assert "FLAGGED" in registry_report(bad)


def test_malformed_registry(tmp_path):
    path = tmp_path / "r.yaml"
    path.write_text("tables:\n  t:\n    series:\n      - method: X\n        version: v\n        labels: [a]\n        values: [1, 2]\n")
    with pytest.raises(EvaluationError, match="1 labels but 2 values"):
        load_registry(path)
    path.write_text("tables: [")
    with pytest.raises(EvaluationError, match="not valid YAML"):
        load_registry(path)


def test_embedding_file_round_trip(tmp_path, rng):
    original = emb(rng.normal(size=(5, 4)).astype(np.float32), [1, 2, 3, 4, 5], list("abcde"), list("vwxyz"))
    write_embeddings(original, tmp_path / "e.pem")
    back = read_embeddings(tmp_path / "e.pem")
    assert np.array_equal(back.vectors, original.vectors)
    assert back.labels.tolist() == [1, 2, 3, 4, 5] and back.views == list("abcde") and back.conditions == list("vwxyz")
    (tmp_path / "bad.pem").write_bytes(b"NOPE")
    with pytest.raises(EvaluationError, match="not a PEM1 file"):
        read_embeddings(tmp_path / "bad.pem")
