import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infogeo.cacs import (ConceptRouter, CrossViewFusion, ambiguity, cacs_loss, cross_view_fuse,
                          reweight, route_concepts, selection_penalty)
from infogeo.csrr import concept_graph
from infogeo.diffcore import Tensor, grad_check
from infogeo.diffcore import ops as T
from infogeo.errors import ConfigError, ShapeError


def rng(seed=0):
    return np.random.default_rng(seed)


def _layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# -- fusion ---------------------------------------------------------------------
def test_residual_only_path_is_layernorm():
    fusion = CrossViewFusion(8, rng(), heads=1)
    fusion.w_v.weight.data = np.eye(8)
    fusion.w_v.bias.data[...] = 0.0
    fusion.w_o.weight.data[...] = 0.0
    fusion.w_o.bias.data[...] = 0.0
    a = rng(1).random((1, 3, 8))
    f_qg, f_gq = cross_view_fuse(a, a, fusion)
    np.testing.assert_allclose(f_qg.data, _layer_norm(a), atol=1e-12)
    np.testing.assert_allclose(f_gq.data, _layer_norm(a), atol=1e-12)


def test_gallery_permutation_does_not_change_query_tokens():
    g = rng(2)
    fusion = CrossViewFusion(8, g)
    a_q, a_g = g.random((2, 4, 8)), g.random((2, 4, 8))
    perm = g.permutation(4)
    out1, _ = cross_view_fuse(a_q, a_g, fusion)
    out2, _ = cross_view_fuse(a_q, a_g[:, perm], fusion)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


@pytest.mark.parametrize("heads", [1, 4])
def test_fusion_matches_naive_attention(heads):
    g = rng(3)
    dim = 8
    fusion = CrossViewFusion(dim, g, heads=heads)
    a_q, a_g = g.random((1, 2, dim)), g.random((1, 2, dim))
    out, _ = cross_view_fuse(a_q, a_g, fusion)

    wq, bq = fusion.w_q.weight.data, fusion.w_q.bias.data
    wk, bk = fusion.w_k.weight.data, fusion.w_k.bias.data
    wv, bv = fusion.w_v.weight.data, fusion.w_v.bias.data
    wo, bo = fusion.w_o.weight.data, fusion.w_o.bias.data
    dh = dim // heads
    expected = np.zeros((2, dim))
    for i in range(2):
        ctx = np.zeros(dim)
        q_i = a_q[0, i] @ wq + bq
        for h in range(heads):
            cols = slice(h * dh, (h + 1) * dh)
            scores = []
            for j in range(2):
                k_j = a_g[0, j] @ wk + bk
                scores.append(float(np.dot(q_i[cols], k_j[cols])) / np.sqrt(dh))
            e = np.exp(np.array(scores) - max(scores))
            p = e / e.sum()
            for j in range(2):
                ctx[cols] += p[j] * (a_g[0, j] @ wv + bv)[cols]
        expected[i] = _layer_norm(a_q[0, i] + ctx @ wo + bo)
    np.testing.assert_allclose(out.data[0], expected, atol=1e-10)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        CrossViewFusion(10, rng(), heads=4)
    fusion = CrossViewFusion(8, rng(), heads=4)
    with pytest.raises(ConfigError):
        cross_view_fuse(np.zeros((1, 2, 6)), np.zeros((1, 2, 6)), fusion)


def test_fusion_shape_mismatch():
    with pytest.raises(ShapeError):
        cross_view_fuse(np.zeros((1, 2, 8)), np.zeros((1, 3, 8)), CrossViewFusion(8, rng()))


# -- router -----------------------------------------------------------------------
def test_zero_router_gives_half():
    router = ConceptRouter(8, rng())
    for p in router.parameters():
        p.data[...] = 0.0
    w = route_concepts(Tensor(rng(1).normal(size=(2, 3, 8))), router)
    np.testing.assert_array_equal(w.data, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_router_range_and_determinism(seed, scale):
    router = ConceptRouter(8, rng(seed))
    x = Tensor(np.clip(rng(seed + 1).normal(size=(4, 8)) * scale, -1e3, 1e3))
    w1, w2 = route_concepts(x, router).data, route_concepts(x, router).data
    assert np.all((w1 > 0) & (w1 < 1))
    np.testing.assert_array_equal(w1, w2)


# -- reweight ---------------------------------------------------------------------
def test_reweight_identity_zero_and_broadcast():
    a = rng().random((2, 3, 3))
    np.testing.assert_array_equal(reweight(a, np.ones(2)).data, a)
    np.testing.assert_array_equal(reweight(a, np.zeros(2)).data, 0.0)
    out = reweight(a, np.array([0.5, 1.0])).data
    np.testing.assert_array_equal(out[0], 0.5 * a[0])
    np.testing.assert_array_equal(out[1], a[1])


def test_reweight_column_weights_and_mismatch():
    a = rng().random((4, 3, 9))
    w = rng(1).random((4, 3, 1))
    np.testing.assert_allclose(reweight(a, w).data, a * w)
    with pytest.raises(ShapeError):
        reweight(a, np.ones((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reweight_stays_in_unit_interval(seed):
    g = rng(seed)
    a = g.random((5, 16))
    a /= a.sum(0)
    out = reweight(a, g.random(5)).data
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_joint_permutation_permutes_graph(seed):
    g = rng(seed)
    a, w = g.random((5, 16)), g.random(5)
    perm = g.permutation(5)
    g1 = concept_graph(reweight(a, w)).G.data
    g2 = concept_graph(reweight(a[perm], w[perm])).G.data
    np.testing.assert_allclose(g2, g1[np.ix_(perm, perm)], atol=1e-12)


# -- loss -----------------------------------------------------------------------------
def test_loss_analytic_values():
    half = np.full((1, 4), 0.5)
    assert cacs_loss(half, half).item() == pytest.approx(0.25, abs=1e-15)
    alt = np.array([[0.0, 1.0, 0.0, 1.0]])
    assert cacs_loss(alt, alt).item() == pytest.approx(-0.25, abs=1e-15)
    ones = np.ones((1, 4))
    assert cacs_loss(ones, ones).item() == 0.0


def test_loss_averages_views():
    half, alt = np.full((1, 4), 0.5), np.array([[0.0, 1.0, 0.0, 1.0]])
    assert cacs_loss(half, alt).item() == pytest.approx(0.0, abs=1e-15)


def test_balanced_binary_is_grid_minimum():
    levels = np.round(np.arange(0.0, 1.0 + 1e-9, 0.05), 10)
    grid = np.array(list(itertools.product(levels, repeat=4)))
    values = selection_penalty(grid).data
    assert values.min() >= -0.25 - 1e-12
    assert selection_penalty(np.array([1.0, 0.0, 1.0, 0.0])).item() == pytest.approx(-0.25)


def test_loss_gradient_wrt_router():
    g = rng(4)
    fusion, router = CrossViewFusion(8, g), ConceptRouter(8, g)
    a_q, a_g = g.random((2, 3, 8)), g.random((2, 3, 8))

    def loss(*_):
        f_q, f_g = cross_view_fuse(a_q, a_g, fusion)
        return cacs_loss(router(f_q), router(f_g))

    assert grad_check(loss, router.parameters(), 1e-6) < 1e-4


def test_ambiguity_statistic():
    assert ambiguity(np.array([0.0, 1.0])) == 0.0
    assert ambiguity(Tensor([0.5, 0.5])) == 0.25
    assert ambiguity(np.array([0.1])) == pytest.approx(0.09)


def test_penalty_accepts_column_weights():
    w = rng().random((2, 5, 1))
    np.testing.assert_allclose(selection_penalty(w).data, selection_penalty(w[..., 0]).data)
    assert T.mean(selection_penalty(w)).shape == ()
