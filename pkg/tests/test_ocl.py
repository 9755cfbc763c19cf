import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infogeo.diffcore import Tensor, grad_check
from infogeo.errors import ConfigError, ShapeError
from infogeo.ocl import (MixtureDecoder, SlotAggregator, SlotEncoder, rec_loss, slot_aggregate,
                         slot_decode, slot_encode, to_map, to_tokens)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_encode_shape():
    enc = SlotEncoder(64, 64, rng())
    out = slot_encode(Tensor(rng(1).normal(size=(64, 8, 8))), enc)
    assert out.shape == (64, 64)


def test_encode_zero_weights():
    enc = SlotEncoder(8, 6, rng())
    for p in enc.mlp.parameters():
        p.data[...] = 0.0
    out = slot_encode(Tensor(rng(1).normal(size=(8, 4, 4))), enc)
    np.testing.assert_array_equal(out.data, 0.0)


def test_encode_deterministic():
    z = Tensor(rng(1).normal(size=(8, 4, 4)))
    a = slot_encode(z, SlotEncoder(8, 6, rng(3))).data
    b = slot_encode(z, SlotEncoder(8, 6, rng(3))).data
    np.testing.assert_array_equal(a, b)


def test_token_map_round_trip():
    z = rng().normal(size=(2, 5, 3, 3))
    np.testing.assert_array_equal(to_map(to_tokens(Tensor(z)), 3).data, z)


# -- aggregation ----------------------------------------------------------------
def test_single_slot_attention_is_one():
    agg = SlotAggregator(1, 6, rng())
    _, a = slot_aggregate(Tensor(rng(1).normal(size=(16, 6))), agg, 3, side=4)
    assert a.shape == (1, 4, 4)
    np.testing.assert_allclose(a.data, 1.0)


def test_iterations_validated():
    with pytest.raises(ConfigError):
        slot_aggregate(Tensor(np.zeros((4, 6))), SlotAggregator(2, 6, rng()), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_slot_permutation_equivariance(seed, k):
    g = rng(seed)
    d, n = 6, 12
    agg = SlotAggregator(k, d, g)
    dec = MixtureDecoder(d, 4, n, 8, g)
    tokens = Tensor(g.normal(size=(n, d)))
    clues = g.normal(size=(n, 4))
    init = g.normal(size=(k, d))
    perm = g.permutation(k)
    s1, a1 = slot_aggregate(tokens, agg, 3, slots=Tensor(init))
    s2, a2 = slot_aggregate(tokens, agg, 3, slots=Tensor(init[perm]))
    np.testing.assert_allclose(s2.data, s1.data[perm], atol=1e-12)
    np.testing.assert_allclose(a2.data, a1.data[perm], atol=1e-12)
    r1, m1 = slot_decode(s1, dec, clues)
    r2, m2 = slot_decode(s2, dec, clues)
    np.testing.assert_allclose(m2.data, m1.data[perm], atol=1e-12)
    np.testing.assert_allclose(r2.data, r1.data, atol=1e-12)
    target = Tensor(g.normal(size=(n, 4)))
    assert abs(rec_loss(r1, target, r1, target).item() - rec_loss(r2, target, r2, target).item()) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["mean", "sum"]))
def test_attention_maps_normalized(seed, mode):
    g = rng(seed)
    agg = SlotAggregator(4, 6, g, mode=mode)
    _, a = slot_aggregate(Tensor(g.normal(size=(3, 16, 6))), agg, 2, rng=g)
    np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def _two_cluster_case(seed):
    g = rng(seed)
    d = 16
    c = g.normal(size=d)
    c *= 4.0 / np.linalg.norm(c)
    tokens = np.concatenate([c + 0.3 * g.normal(size=(32, d)), -c + 0.3 * g.normal(size=(32, d))])
    labels = np.repeat([0, 1], 32)
    agg = SlotAggregator(2, d, g)
    # dot-product similarity with a plain value map: soft k-means on the raw tokens
    agg.to_q.weight.data = 5.0 * np.eye(d)
    agg.to_k.weight.data = 5.0 * np.eye(d)
    agg.to_v.weight.data = np.eye(d)
    init = tokens[[g.integers(32), 32 + g.integers(32)]]
    _, a = slot_aggregate(Tensor(tokens), agg, 3, slots=Tensor(init))
    # k-means oracle on the same tokens: 2 centroids, Lloyd iterations to convergence
    cent = tokens[[0, 32]]
    for _ in range(20):
        assign = np.argmin(((tokens[:, None] - cent[None]) ** 2).sum(-1), axis=1)
        cent = np.stack([tokens[assign == j].mean(0) for j in range(2)])
    assert np.array_equal(assign, labels) or np.array_equal(assign, 1 - labels)
    mass = np.stack([a.data[:, assign == j].sum(1) for j in range(2)], axis=1)
    share = mass.max(1) / mass.sum(1)
    return share.min() >= 0.9 and len(set(mass.argmax(1))) == 2


def test_two_cluster_slots_follow_kmeans():
    # the GRU update is left random, so an occasional seed drifts; demand 48 of 50
    passed = sum(_two_cluster_case(s) for s in range(50))
    assert passed >= 48


# -- decoding -------------------------------------------------------------------
@pytest.mark.parametrize("source", ["clue", "position"])
def test_single_slot_decoder(source):
    g = rng()
    dec = MixtureDecoder(6, 4, 9, 8, g, mask_source=source)
    slots = Tensor(g.normal(size=(1, 6)))
    clues = g.normal(size=(9, 4))
    recon, masks = slot_decode(slots, dec, clues)
    np.testing.assert_allclose(masks.data, 1.0)
    _, _, feats = dec(Tensor(slots.data[None]), Tensor(clues[None]))
    np.testing.assert_allclose(recon.data, feats.data[0, 0], atol=1e-14)


def test_equal_logits_uniform_masks():
    g = rng()
    dec = MixtureDecoder(6, 4, 9, 8, g)
    dec.to_query.weight.data[...] = 0.0
    _, masks = slot_decode(Tensor(g.normal(size=(5, 6))), dec, g.normal(size=(9, 4)))
    np.testing.assert_allclose(masks.data, 0.2, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["clue", "position"]))
def test_decoder_masks_normalized(seed, source):
    g = rng(seed)
    dec = MixtureDecoder(6, 4, 16, 8, g, mask_source=source)
    _, masks = slot_decode(Tensor(g.normal(size=(3, 5, 6))), dec, Tensor(g.normal(size=(3, 16, 4))))
    np.testing.assert_allclose(masks.data.sum(axis=1), 1.0, atol=1e-6)


def test_clue_decoder_requires_clues():
    dec = MixtureDecoder(6, 4, 9, 8, rng())
    with pytest.raises(ShapeError):
        slot_decode(Tensor(np.zeros((2, 6))), dec)


def test_position_decoder_ignores_clues():
    g = rng()
    dec = MixtureDecoder(6, 4, 9, 8, g, mask_source="position")
    s = Tensor(g.normal(size=(3, 6)))
    r1, m1 = slot_decode(s, dec, g.normal(size=(9, 4)))
    r2, m2 = slot_decode(s, dec, None)
    np.testing.assert_array_equal(r1.data, r2.data)


def test_decode_map_layout():
    g = rng()
    dec = MixtureDecoder(6, 4, 16, 8, g)
    recon, masks = slot_decode(Tensor(g.normal(size=(3, 6))), dec, g.normal(size=(4, 4, 4)), side=4)
    assert recon.shape == (4, 4, 4) and masks.shape == (3, 4, 4)


# -- reconstruction loss -----------------------------------------------------------
def test_rec_loss_zero_and_offset():
    z = rng().normal(size=(4, 3, 3))
    assert rec_loss(z, z, z, z).item() == 0.0
    assert rec_loss(z + 1.0, z, z, z).item() == pytest.approx(1.0, abs=1e-15)


def test_rec_loss_matches_double_loop():
    g = rng(5)
    rq, zq, rg, zg = (g.normal(size=(3, 4)) for _ in range(4))
    expected = 0.0
    for r, z in ((rq, zq), (rg, zg)):
        acc = 0.0
        for i in range(r.shape[0]):
            for j in range(r.shape[1]):
                acc += (r[i, j] - z[i, j]) ** 2
        expected += acc / r.size
    assert rec_loss(rq, zq, rg, zg).item() == pytest.approx(expected, abs=1e-14)


def test_rec_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        rec_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros(1), np.zeros(1))


def test_rec_loss_gradient_wrt_ocl_params():
    g = rng(7)
    n, c, d = 9, 4, 6
    enc, agg = SlotEncoder(c, d, g), SlotAggregator(3, d, g)
    dec = MixtureDecoder(d, c, n, 8, g)
    z = g.normal(size=(1, n, c))

    def loss(*_):
        s, _ = agg(enc(z), 2)
        recon, _, _ = dec(s, z)
        return rec_loss(recon, z, recon, z)

    params = enc.parameters() + agg.parameters() + dec.parameters()
    assert grad_check(loss, params, 1e-5) < 1e-3
