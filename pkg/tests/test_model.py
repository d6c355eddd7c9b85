import numpy as np
import pytest
import torch
from helpers import central_differences, tiny_model

from posegait.core import SampleBatch, build_graph, normalized_adjacency
from posegait.loss import TripletLossSpec, triplet_loss
from posegait.model import (
    BackboneConfig,
    BlockConfig,
    ModelConfigError,
    NonFiniteError,
    UnitConfig,
    backbone_config,
    backbone_config_from_mapping,
    backbone_config_to_mapping,
    build_backbone,
    embed,
    graph_conv_forward,
    spatial_attention_forward,
    temporal_conv_forward,
)

COCO = build_graph("coco17")
D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_graph_conv_identity():
    x = rand(2, 3, 5, 4)
    y = graph_conv_forward(x, torch.eye(4, dtype=D), torch.eye(3, dtype=D))
    assert torch.equal(y, x)


@pytest.mark.parametrize("n,c,co,t,v", [(1, 1, 1, 1, 1), (2, 3, 5, 7, 17), (3, 8, 2, 4, 18)])
def test_graph_conv_shape(n, c, co, t, v):
    y = graph_conv_forward(rand(n, c, t, v), rand(v, v, seed=1), rand(c, co, seed=2), rand(co, seed=3), "relu")
    assert y.shape == (n, co, t, v)


def test_graph_conv_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        graph_conv_forward(rand(1, 3, 2, 4), torch.eye(5, dtype=D), rand(3, 3))


def test_graph_conv_permutation_equivariance():
    a = torch.as_tensor(normalized_adjacency(COCO))
    x, w, b = rand(2, 3, 4, 17), rand(3, 5, seed=1), rand(5, seed=2)
    perm = torch.randperm(17, generator=torch.Generator().manual_seed(3))
    y = graph_conv_forward(x, a, w, b, "tanh")
    y_perm = graph_conv_forward(x[..., perm], a[perm][:, perm], w, b, "tanh")
    assert torch.allclose(y_perm, y[..., perm], rtol=0, atol=1e-10)


def test_attention_rows_and_equivariance():
    x = rand(2, 4, 3, 17)
    wq, wk, wv, wo = (rand(4, 8, seed=s) for s in range(1, 5))
    wo = rand(8, 6, seed=5)
    y, attn = spatial_attention_forward(x, wq, wk, wv, wo, heads=2)
    assert y.shape == (2, 6, 3, 17) and attn.shape == (2, 3, 2, 17, 17)
    assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), rtol=0, atol=1e-6)
    perm = torch.randperm(17, generator=torch.Generator().manual_seed(6))
    y_perm, _ = spatial_attention_forward(x[..., perm], wq, wk, wv, wo, heads=2)
    assert torch.allclose(y_perm, y[..., perm], rtol=0, atol=1e-10)


def test_attention_single_node_is_projected_value():
    x = rand(2, 4, 3, 1)
    wq, wk, wv, wo = rand(4, 6, seed=1), rand(4, 6, seed=2), rand(4, 6, seed=3), rand(6, 5, seed=4)
    y, attn = spatial_attention_forward(x, wq, wk, wv, wo, heads=3)
    assert torch.all(attn == 1)
    expected = (x.permute(0, 2, 3, 1) @ wv @ wo).permute(0, 3, 1, 2)
    assert torch.allclose(y, expected, rtol=0, atol=1e-12)


def test_attention_heads_must_divide_width():
    with pytest.raises(ValueError, match="divisible"):
        spatial_attention_forward(rand(1, 2, 1, 3), rand(2, 5), rand(2, 5), rand(2, 5), rand(5, 5), heads=2)


def test_temporal_conv_identity_and_constant():
    x = rand(2, 3, 9, 4)
    w = torch.eye(3, dtype=D)[:, :, None]
    assert torch.equal(temporal_conv_forward(x, w), x)
    const = torch.ones(1, 1, 12, 2, dtype=D) * 2.5
    w = torch.tensor([[[0.2, 0.5, 0.3]]], dtype=D)
    y = temporal_conv_forward(const, w)
    assert torch.allclose(y[:, :, 1:-1], const[:, :, 1:-1], rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="odd"):
        temporal_conv_forward(x, torch.zeros(3, 3, 2, dtype=D))


@pytest.mark.parametrize("unit", ["graph_conv", "temporal_conv", "attention"])
def test_unit_gradients_match_finite_differences(unit):
    x = rand(2, 3, 5, 4, seed=7)
    a = torch.as_tensor(normalized_adjacency(build_graph("coco17")))[:4, :4].clone()
    if unit == "graph_conv":
        params = [rand(3, 2, seed=1).requires_grad_(), rand(2, seed=2).requires_grad_()]
        fn = lambda: graph_conv_forward(x, a, *params, "tanh").pow(2).sum()  # noqa: E731
    elif unit == "temporal_conv":
        params = [rand(2, 3, 3, seed=1).requires_grad_(), rand(2, seed=2).requires_grad_()]
        fn = lambda: temporal_conv_forward(x, *params, "tanh").pow(2).sum()  # noqa: E731
    else:
        params = [rand(3, 4, seed=s).requires_grad_() for s in range(1, 4)] + [rand(4, 2, seed=4).requires_grad_()]
        fn = lambda: spatial_attention_forward(x, *params, heads=2, activation="tanh")[0].pow(2).sum()  # noqa: E731
    fn().backward()
    numeric = central_differences(fn, params)
    for p, g in zip(params, numeric):
        assert torch.allclose(p.grad, g, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("layers", [16, 14])
def test_deep_gait_tr_like_builds(layers):
    cfg = backbone_config("gait_tr_like", layers, width=8, embedding_dim=16, heads=2)
    model = build_backbone(cfg, COCO, seed=0)
    assert model.num_layers == layers
    assert model(torch.zeros(1, 2, 6, 17)).shape == (1, 16)


def test_odd_layer_count_rejected():
    with pytest.raises(ModelConfigError, match="even"):
        backbone_config("gait_tr_like", 5)


def test_residual_width_change_needs_projection():
    units = (UnitConfig("graph_conv", 8, 16), UnitConfig("temporal_conv", 16, 16, kernel_size=3))
    cfg = BackboneConfig("resgcn_like", (BlockConfig(units, residual=True, projection=False),), 2, stem_channels=8)
    with pytest.raises(ModelConfigError, match="residual connection needs in == out"):
        build_backbone(cfg, COCO)
    ok = BackboneConfig("resgcn_like", (BlockConfig(units, residual=True, projection=True),), 2, stem_channels=8)
    assert build_backbone(ok, COCO).num_layers == 2


def test_config_mapping_round_trip():
    cfg = backbone_config("resgcn_like", 6, width=[8, 16, 16], input_branches=("joint", "bone"))
    assert backbone_config_from_mapping(backbone_config_to_mapping(cfg)) == cfg


@pytest.mark.parametrize("family", ["gait_tr_like", "resgcn_like"])
def test_embedding_shape_and_determinism(family):
    cfg = backbone_config(family, 4, width=16, embedding_dim=128, input_branches=("joint", "bone"), heads=2)
    model = build_backbone(cfg, COCO, seed=1)
    seq = np.random.default_rng(0).normal(size=(20, 17, 4))
    batch = SampleBatch([seq] * 8, np.arange(8), ["000"] * 8)
    emb = embed(model, batch)
    assert emb.vectors.shape == (8, 128)
    assert np.all(emb.vectors == emb.vectors[0])


def test_same_seed_same_weights():
    cfg = backbone_config("gait_tr_like", 2, width=8, heads=2)
    a, b = build_backbone(cfg, COCO, seed=5), build_backbone(cfg, COCO, seed=5)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na


def test_zero_init_residual_blocks_start_as_identity():
    cfg = backbone_config("resgcn_like", 4, width=8)
    model = build_backbone(cfg, COCO, seed=0, dtype=D)
    h = rand(2, 8, 5, 17)
    for block in model.blocks:
        assert torch.equal(block(h), h)


def test_non_finite_activation_is_reported():
    cfg = backbone_config("gait_tr_like", 2, width=8, heads=2)
    model = build_backbone(cfg, COCO, seed=0)
    x = torch.zeros(1, 2, 4, 17)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="stem"):
        model(x, check_finite=True)
    with pytest.raises(ValueError, match="expected"):
        model(torch.zeros(1, 3, 4, 17))


@pytest.mark.parametrize("family", ["gait_tr_like", "resgcn_like"])
def test_end_to_end_gradient(family):
    model = tiny_model(family, COCO)
    x = rand(4, 4, 6, 17, seed=11)
    labels = torch.tensor([0, 0, 1, 1])
    spec = TripletLossSpec(margin=5.0, variant="batch_all")
    fn = lambda: triplet_loss(model(x), spec, labels).loss  # noqa: E731
    params = list(model.parameters())
    model.zero_grad()
    fn().backward()
    numeric = central_differences(fn, params)
    for p, g in zip(params, numeric):
        assert torch.allclose(p.grad, g, rtol=1e-4, atol=1e-8)
