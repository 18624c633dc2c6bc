import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightdetr import decoder as D
from lightdetr import params as P
from lightdetr.boxes import apply_box_delta, clip_boxes, solve_box_delta
from lightdetr.encoder import FeatureMap
from oracles import bilinear_corners, dense_deformable


def small_cfg(**kw):
    base = dict(hidden_dim=32, num_queries=6, self_attn_heads=4, cross_attn_heads=4, sampling_points=2,
                num_levels=1, num_layers=3, num_classes=5, ffn_dim=64, num_groups=3)
    base.update(kw)
    return D.DecoderConfig(**base)


def levels_for(cfg, sizes, seed=0):
    rng = np.random.default_rng(seed)
    return [FeatureMap(rng.standard_normal((h * w, cfg.hidden_dim)).astype(np.float32), h, w) for h, w in sizes]


def test_apply_box_delta_examples():
    p = np.array([0.5, 0.5, 0.2, 0.2])
    np.testing.assert_array_equal(apply_box_delta(p, np.zeros(4)), p)
    np.testing.assert_allclose(apply_box_delta(p, [1, -1, math.log(2), math.log(0.5)]), [0.7, 0.3, 0.4, 0.1])
    with pytest.raises(ValueError):
        apply_box_delta([0.5, 0.5, 0.0, 0.1], np.zeros(4))
    # clamped growth
    assert apply_box_delta(p, [0, 0, 50, 50])[2] == pytest.approx(0.2 * math.exp(4))


@given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=2), st.lists(st.floats(0.02, 0.5), min_size=2,
       max_size=2), st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_box_delta_inverse(centre, size, delta):
    p = np.array(centre + size)
    b = apply_box_delta(p, np.array(delta))
    assert (b[2:] > 0).all()
    np.testing.assert_allclose(solve_box_delta(p, b), delta, atol=1e-6)
    np.testing.assert_allclose(apply_box_delta(p, solve_box_delta(p, b)), b, atol=1e-9)


def test_anchors_and_sine_embed():
    f = FeatureMap(np.zeros((6, 1), np.float32), 2, 3)
    a = D.anchors_for([f])
    np.testing.assert_allclose(a[4], [1.5 / 3, 1.5 / 2, 1 / 3, 1 / 2])
    emb = D.sine_embed(np.array([[0.0, 0.0, 0.0, 0.0]], np.float32), 16)
    assert emb.shape == (1, 16)
    np.testing.assert_array_equal(emb[0].reshape(4, 4), [[0, 1, 0, 1]] * 4)


def test_select_spatial_queries_matches_sort_oracle():
    cfg = small_cfg()
    params = P.init_params(D.param_spec(cfg, 1), 0)
    lv = levels_for(cfg, [(4, 5)])
    gp = P.sub(params, "query.0")
    q = D.select_spatial_queries(lv, 6, gp)
    full = D.select_spatial_queries(lv, 20, gp)
    assert sorted(full.token_index.tolist()) == list(range(20))
    scores = full.enc_logits.max(1)
    order = sorted(range(20), key=lambda i: (-scores[i], full.token_index[i]))
    assert q.token_index.tolist() == [int(full.token_index[i]) for i in order[:6]]
    assert (q.reference[:, :2] >= 0).all() and (q.reference[:, :2] <= 1).all()
    assert (q.reference[:, 2:] > 0).all() and (q.reference[:, 2:] <= 1).all()
    with pytest.raises(ValueError):
        D.select_spatial_queries(lv, 21, gp)


def test_dominant_token_ranks_first():
    cfg = small_cfg()
    gp = P.sub(P.init_params(D.param_spec(cfg, 1), 0), "query.0")
    gp["enc_class.bias"] = np.zeros_like(gp["enc_class.bias"])
    lv = levels_for(cfg, [(3, 3)])
    data = lv[0].data.copy()
    # push one token along the direction that raises class 2 the most after normalization
    gp["enc_output.weight"] = np.eye(cfg.hidden_dim, dtype=np.float32)
    gp["enc_class.weight"] = np.zeros_like(gp["enc_class.weight"])
    gp["enc_class.weight"][0, 2] = 1.0
    data[:, 0] = -1.0
    data[7, 0] = 50.0
    q = D.select_spatial_queries([lv[0].with_data(data)], 3, gp)
    assert q.token_index[0] == 7


def random_deform_case(rng, nl, npt, nq=5, nh=2, hd=3):
    sizes = [(int(rng.integers(1, 6)), int(rng.integers(1, 6))) for _ in range(nl)]
    shapes = np.array(sizes, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(shapes.prod(1))[:-1]]).astype(np.int64)
    value = rng.standard_normal((int(shapes.prod(1).sum()), nh, hd)).astype(np.float32)
    loc = rng.uniform(-0.2, 1.2, (nq, nh, nl, npt, 2)).astype(np.float32)
    logits = rng.standard_normal((nq, nh, nl * npt))
    attn = (np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)).reshape(nq, nh, nl, npt).astype(np.float32)
    return value, shapes, starts, loc, attn


@pytest.mark.parametrize("nl", [1, 2])
@pytest.mark.parametrize("npt", [2, 4])
def test_ms_deform_attn_matches_dense_oracle(backend, nl, npt):
    rng = np.random.default_rng(nl * 10 + npt)
    for _ in range(5):
        case = random_deform_case(rng, nl, npt)
        np.testing.assert_allclose(backend.ms_deform_attn(*case), dense_deformable(*case), atol=1e-6)


def test_deformable_attention_weights_and_degenerate_case():
    cfg = small_cfg(sampling_points=1, cross_attn_heads=1)
    params = P.init_params(D.param_spec(cfg, 1), 0)
    p = P.sub(params, "decoder.layers.0.cross_attn")
    p["sampling_offsets.weight"] = np.zeros_like(p["sampling_offsets.weight"])
    p["sampling_offsets.bias"] = np.zeros_like(p["sampling_offsets.bias"])
    lv = levels_for(cfg, [(4, 4)])
    rng = np.random.default_rng(0)
    query = rng.standard_normal((1, 3, cfg.hidden_dim)).astype(np.float32)
    ref = np.array([[[0.3, 0.6, 0.2, 0.2], [0.5, 0.5, 0.1, 0.4], [0.9, 0.1, 0.3, 0.3]]], np.float32)
    out, inner = D.deformable_cross_attention(query, ref, lv, p, 1, 1, return_internals=True)
    np.testing.assert_allclose(inner["weights"].sum(axis=(-1, -2)), 1.0, atol=1e-6)
    grid = inner["value"].reshape(4, 4, -1)
    for i in range(3):
        sample = bilinear_corners(grid, float(ref[0, i, 0]), float(ref[0, i, 1]))
        expect = sample @ p["output_proj.weight"] + p["output_proj.bias"]
        np.testing.assert_allclose(out[0, i], expect, atol=1e-5)


def test_attention_weights_normalized_for_many_heads():
    cfg = small_cfg(num_levels=2, sampling_points=4)
    params = P.init_params(D.param_spec(cfg, 1), 1)
    lv = levels_for(cfg, [(4, 4), (2, 2)])
    q = np.random.default_rng(1).standard_normal((2, 5, cfg.hidden_dim)).astype(np.float32)
    ref = np.tile(np.array([0.5, 0.5, 0.3, 0.3], np.float32), (2, 5, 1))
    _, inner = D.deformable_cross_attention(q, ref, lv, P.sub(params, "decoder.layers.0.cross_attn"), 4, 4, True)
    np.testing.assert_allclose(inner["weights"].sum(axis=(-1, -2)), 1.0, atol=1e-6)


def run(cfg, groups, lv, seed=0, params=None):
    params = P.init_params(D.param_spec(cfg, groups), seed) if params is None else params
    queries = D.make_group_queries(lv, groups, cfg.num_queries, params)
    return D.decoder_forward(queries, lv, cfg, params), queries, params


def test_decoder_forward_shapes_and_boxes():
    cfg = small_cfg()
    lv = levels_for(cfg, [(4, 4)])
    outs, _, _ = run(cfg, 1, lv)
    assert len(outs) == 3
    for o in outs:
        assert o.logits.shape == (1, cfg.num_queries, cfg.num_classes)
        assert o.boxes.shape == (1, cfg.num_queries, 4)
        assert np.isfinite(o.boxes).all() and (o.boxes[..., 2:] > 0).all()
    for prev, nxt in zip(outs, outs[1:]):
        np.testing.assert_array_equal(nxt.reference, clip_boxes(prev.boxes).astype(np.float32))


@pytest.mark.parametrize("sizes", [[(4, 4)], [(6, 6), (2, 2)]])
def test_group_zero_equals_single_group(sizes):
    cfg = small_cfg(num_levels=len(sizes))
    lv = levels_for(cfg, sizes)
    multi, mq, _ = run(cfg, 13, lv)
    single, sq, _ = run(cfg, 1, lv)
    assert sum(len(q.content) for q in mq) == 13 * cfg.num_queries
    for a, b in zip(multi, single):
        np.testing.assert_allclose(a.logits[0], b.logits[0], atol=1e-6)
        np.testing.assert_allclose(a.boxes[0], b.boxes[0], atol=1e-6)
    assert not np.allclose(mq[0].content, mq[1].content)
    assert not np.allclose(multi[-1].logits[0], multi[-1].logits[1])


def test_group_isolation_under_zeroed_inputs():
    cfg = small_cfg()
    lv = levels_for(cfg, [(4, 4)])
    params = P.init_params(D.param_spec(cfg, 3), 0)
    queries = D.make_group_queries(lv, 3, cfg.num_queries, params)
    base = D.decoder_forward(queries, lv, cfg, params)
    queries[2] = D.QueryGroup(np.zeros_like(queries[2].content), queries[2].reference,
                              queries[2].token_index, queries[2].enc_logits)
    changed = D.decoder_forward(queries, lv, cfg, params)
    for a, b in zip(base, changed):
        np.testing.assert_array_equal(a.logits[:2], b.logits[:2])
    assert not np.allclose(base[-1].logits[2], changed[-1].logits[2])


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(hidden_dim=30)
    with pytest.raises(ValueError):
        small_cfg(num_levels=3)
    with pytest.raises(ValueError):
        D.make_group_queries([], 0, 1, {})
    cfg = small_cfg()
    with pytest.raises(ValueError):
        D.decoder_forward([], levels_for(cfg, [(2, 2), (1, 1)]), cfg, {})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_boxes_always_positive(seed):
    cfg = small_cfg(num_queries=4)
    lv = levels_for(cfg, [(3, 3)], seed)
    outs, _, _ = run(cfg, 1, lv, seed=seed)
    assert all((o.boxes[..., 2:] > 0).all() for o in outs)
