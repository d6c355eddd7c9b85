import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posegait.core import (
    EmbeddingSet,
    LayoutError,
    SampleBatch,
    SkeletonGraph,
    SkeletonSequence,
    build_graph,
    load_layouts,
    normalized_adjacency,
    registered_layouts,
    validate_sequence,
)


def star_graph(n, edges=(), pairs=()):
    return SkeletonGraph(
        layout_id=f"test{n}",
        num_keypoints=n,
        edges=frozenset(tuple(sorted(e)) for e in edges),
        symmetric_pairs=tuple(pairs),
        bone_parent={i: 0 for i in range(1, n)},
        root=0,
    )


def test_builtin_layouts():
    assert build_graph("coco17").num_keypoints == 17
    assert build_graph("pose18").num_keypoints == 18
    assert {"coco17", "pose18"} <= set(registered_layouts())


def test_unknown_layout():
    with pytest.raises(LayoutError, match="unknown layout"):
        build_graph("coco99")


@pytest.mark.parametrize("layout", ["coco17", "pose18"])
def test_layout_structure(layout):
    g = build_graph(layout)
    a = g.adjacency()
    assert np.array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)
    perm = g.flip_permutation()
    assert np.array_equal(perm[perm], np.arange(g.num_keypoints))
    # every keypoint reaches the root through the bone tree
    parents = g.parents()
    for v in range(g.num_keypoints):
        node = v
        for _ in range(g.num_keypoints):
            node = parents[node]
        assert node == g.root


def test_coco17_shoulders_are_paired():
    g = build_graph("coco17")
    assert (5, 6) in g.symmetric_pairs


def test_invalid_graphs_rejected():
    with pytest.raises(LayoutError, match="self-loop"):
        star_graph(3, edges=[(1, 1)])
    with pytest.raises(LayoutError, match="out of range"):
        star_graph(3, edges=[(0, 5)])
    with pytest.raises(LayoutError, match="more than one symmetric pair"):
        star_graph(4, pairs=[(1, 2), (2, 3)])
    with pytest.raises(LayoutError, match="without parent"):
        SkeletonGraph("bad", 3, frozenset(), (), {1: 0}, 0)
    with pytest.raises(LayoutError, match="cycle"):
        SkeletonGraph("bad", 3, frozenset(), (), {1: 2, 2: 1}, 0)


def test_adjacency_two_nodes():
    a = normalized_adjacency(star_graph(2, edges=[(0, 1)]))
    assert np.allclose(a, 0.5, atol=0, rtol=0)


def test_adjacency_edgeless_is_identity():
    assert np.array_equal(normalized_adjacency(star_graph(3)), np.eye(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.data())
def test_adjacency_symmetric_with_bounded_spectrum(n, data):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    edges = data.draw(st.lists(st.sampled_from(pairs), unique=True))
    a = normalized_adjacency(star_graph(n, edges=edges))
    assert np.array_equal(a, a.T)
    eig = np.linalg.eigvalsh(a)
    assert np.max(np.abs(eig)) <= 1.0 + 1e-12


def test_custom_layout_file_overrides(tmp_path):
    path = tmp_path / "layouts.yaml"
    path.write_text(
        "tiny3:\n  num_keypoints: 3\n  root: 0\n  edges: [[0, 1], [0, 2]]\n"
        "  symmetric_pairs: [[1, 2]]\n  bone_parent: {1: 0, 2: 0}\n"
    )
    assert load_layouts(path) == ["tiny3"]
    g = build_graph("tiny3")
    assert g.num_keypoints == 3 and g.flip_permutation().tolist() == [0, 2, 1]


def test_validate_sequence_reports():
    g = build_graph("coco17")
    rng = np.random.default_rng(0)
    assert validate_sequence(SkeletonSequence(rng.normal(size=(30, 17, 2))), g) == []
    report = validate_sequence(SkeletonSequence(rng.normal(size=(30, 18, 2))), g)
    assert any("keypoint count mismatch" in r for r in report)
    data = rng.normal(size=(30, 17, 2))
    data[4, 7, 1] = np.nan
    report = validate_sequence(SkeletonSequence(data), g)
    assert report == ["non-finite value at (4, 7, 1)"]


def test_sequence_is_immutable_copy():
    src = np.zeros((2, 17, 2))
    seq = SkeletonSequence(src, "001", "nm-01", "000")
    src[0, 0, 0] = 1.0
    assert seq.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        seq.data[0, 0, 0] = 2.0
    assert seq == seq.with_data(np.zeros((2, 17, 2)))
    assert seq != seq.with_data(np.ones((2, 17, 2)))


def test_sample_batch_and_embedding_set_checks():
    with pytest.raises(ValueError):
        SampleBatch([np.zeros((2, 17, 2))], np.array([0, 1]), ["a"])
    emb = EmbeddingSet(np.eye(3), [0, 1, 2], ["a", "b", "c"], ["x", "y", "z"])
    assert emb.dim == 3 and len(emb.subset([True, False, True])) == 2
    with pytest.raises(ValueError, match="non-finite"):
        EmbeddingSet(np.array([[np.inf]]), [0], ["a"], ["x"])
