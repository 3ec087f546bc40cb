import itertools

import numpy as np
import pytest
from scipy.special import expit

from app.decoder import (
    AttentionWeights,
    DecoderWeights,
    PredictedMasks,
    QuerySet,
    cross_attention_weights,
    decode,
    decoder_layer,
    init_queries,
    mask_iou_matrix,
    mask_nms,
    masked_cross_attention,
    passthrough_masks,
    predict_masks,
)
from app.errors import ConfigurationError
from app.nn import LayerNorm, Linear
from app.superpoint import build_superpoints


def build_weights(channels: int = 4, seed: int = 0) -> DecoderWeights:
    return DecoderWeights.random(channels, np.random.default_rng(seed))


def build_scene(points: int = 30, superpoints: int = 5, channels: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    sp = build_superpoints(rng.normal(size=(points, 3)), np.arange(points) % superpoints)
    return sp, rng.normal(size=(superpoints, channels)), rng.normal(size=(points, channels))


def masks_from(point_masks: np.ndarray, scores: list[float]) -> PredictedMasks:
    point_masks = np.asarray(point_masks, dtype=bool)
    logits = np.where(point_masks, 1.0, -1.0)
    return PredictedMasks(point_masks, logits, np.asarray(scores, dtype=float), np.arange(len(scores)))


def with_projections(weights: DecoderWeights, layer: int, **projections: Linear) -> DecoderWeights:
    layers = list(weights.layers)
    cross = layers[layer].cross
    layers[layer] = type(layers[layer])(
        cross=AttentionWeights(
            projections.get("q", cross.q), projections.get("k", cross.k), projections.get("v", cross.v), cross.o
        ),
        self_attn=layers[layer].self_attn,
        ffn=layers[layer].ffn,
    )
    return DecoderWeights(tuple(layers), weights.mask_head, weights.cls_head, weights.norm, weights.heads)


def scalar_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        allowed = [j for j in range(k.shape[0]) if mask[i, j]] or list(range(k.shape[0]))
        logits = {j: float(q[i] @ k[j]) / np.sqrt(q.shape[1]) for j in allowed}
        top = max(logits.values())
        norm = sum(np.exp(x - top) for x in logits.values())
        for j, x in logits.items():
            out[i] += np.exp(x - top) / norm * v[j]
    return out


def test_init_queries_examples():
    features = np.random.default_rng(0).normal(size=(7, 3))
    queries = init_queries(features)
    assert len(queries) == 7 and queries.origin.tolist() == list(range(7))
    np.testing.assert_array_equal(queries.values, features)

    sampled = init_queries(np.zeros((8, 3)), 0.5, seed=4)
    assert len(set(sampled.origin.tolist())) == 4
    assert init_queries(np.zeros((8, 3)), 0.5, seed=4).origin.tolist() == sampled.origin.tolist()
    with pytest.raises(ConfigurationError):
        init_queries(features, 0.0)


def test_uniform_attention_averages_values():
    base = build_weights()
    zero = Linear.zeros(4, 4)
    weights = with_projections(base, 0, q=zero, k=zero)
    _, sp_features, _ = build_scene()
    queries = QuerySet(np.random.default_rng(1).normal(size=(2, 4)), np.arange(2))
    out = masked_cross_attention(queries, sp_features, np.ones((2, 5), dtype=bool), weights, 0)
    expected = base.layers[0].cross.v(sp_features).mean(axis=0)
    np.testing.assert_allclose(out, np.tile(expected, (2, 1)), atol=1e-12)


def test_single_allowed_superpoint_reads_its_value():
    weights = build_weights()
    _, sp_features, _ = build_scene()
    queries = QuerySet(np.random.default_rng(2).normal(size=(2, 4)), np.arange(2))
    mask = np.zeros((2, 5), dtype=bool)
    mask[0, 3] = True
    mask[1, 1] = True
    out = masked_cross_attention(queries, sp_features, mask, weights, 1)
    values = weights.layers[1].cross.v(sp_features)
    np.testing.assert_allclose(out, values[[3, 1]], atol=1e-12)


def test_masked_attention_matches_scalar_oracle():
    weights = DecoderWeights(build_weights().layers, build_weights().mask_head, norm="none")
    _, sp_features, _ = build_scene(seed=3)
    rng = np.random.default_rng(3)
    queries = QuerySet(rng.normal(size=(3, 4)), np.arange(3))
    mask = rng.random((3, 5)) > 0.5
    mask[0, 0] = mask[1, 1] = True
    mask[2] = False
    probs = cross_attention_weights(queries, sp_features, mask, weights, 2)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(probs[0, :2][~mask[:2]] < 1e-30)
    cross = weights.layers[2].cross
    expected = scalar_attention(cross.q(queries.values), cross.k(sp_features), cross.v(sp_features), mask)
    np.testing.assert_allclose(masked_cross_attention(queries, sp_features, mask, weights, 2), expected, atol=1e-9)


def test_all_true_mask_equals_unmasked_attention():
    weights = build_weights(seed=4)
    _, sp_features, _ = build_scene(seed=4)
    queries = QuerySet(np.random.default_rng(4).normal(size=(3, 4)), np.arange(3))
    masked = masked_cross_attention(queries, sp_features, np.ones((3, 5), dtype=bool), weights, 0)
    fallback = masked_cross_attention(queries, sp_features, np.zeros((3, 5), dtype=bool), weights, 0)
    np.testing.assert_allclose(masked, fallback, atol=1e-9)


def test_zero_layer_is_residual_passthrough():
    weights = DecoderWeights.zeros(4)
    attended = QuerySet(np.random.default_rng(5).normal(size=(3, 4)), np.arange(3))
    out = decoder_layer(attended, weights, 0)
    np.testing.assert_array_equal(out.values, attended.values)
    assert out.layer == 1


def test_single_query_self_attention_is_value_path():
    base = build_weights(seed=6)
    zero_ffn = type(base.layers[0].ffn).zeros((4, 8, 4))
    layer = type(base.layers[0])(cross=base.layers[0].cross, self_attn=base.layers[0].self_attn, ffn=zero_ffn)
    weights = DecoderWeights((layer, *base.layers[1:]), base.mask_head, norm="none")
    x = np.random.default_rng(6).normal(size=(1, 4))
    out = decoder_layer(QuerySet(x, np.arange(1)), weights, 0)
    attn = layer.self_attn
    np.testing.assert_allclose(out.values, x + attn.o(attn.v(x)), atol=1e-12)


def test_pre_norm_layer_matches_scalar_oracle():
    weights = build_weights(seed=7)
    x = np.random.default_rng(7).normal(size=(3, 4))
    out = decoder_layer(QuerySet(x, np.arange(3)), weights, 0)
    lw = weights.layers[0]
    norm = LayerNorm.identity(4)
    h = norm(x)
    attended = x + lw.self_attn.o(
        scalar_attention(lw.self_attn.q(h), lw.self_attn.k(h), lw.self_attn.v(h), np.ones((3, 3), dtype=bool))
    )
    expected = attended + lw.ffn(norm(attended))
    np.testing.assert_allclose(out.values, expected, atol=1e-9)


def test_predict_masks_examples():
    _, _, point_features = build_scene()
    queries = QuerySet(np.random.default_rng(8).normal(size=(2, 4)), np.arange(2))
    zero = DecoderWeights.zeros(4)
    masks = predict_masks(queries, point_features, zero, 0.5)
    assert not masks.point_masks.any()
    np.testing.assert_array_equal(masks.scores, [1.0, 1.0])

    weights = build_weights(seed=8)
    masks = predict_masks(queries, point_features, weights, 0.5)
    head = weights.mask_head(queries.values)
    for i in range(2):
        for j in range(point_features.shape[0]):
            logit = sum(head[i, c] * point_features[j, c] for c in range(4))
            assert masks.logits[i, j] == pytest.approx(logit, abs=1e-9)
            assert masks.point_masks[i, j] == (expit(logit) > 0.5)


def test_orthogonal_mask_head_gives_empty_masks():
    weights = DecoderWeights(DecoderWeights.zeros(2).layers, Linear(np.eye(2), np.zeros(2)))
    queries = QuerySet(np.array([[1.0, 0.0]]), np.arange(1))
    masks = predict_masks(queries, np.array([[0.0, 1.0], [0.0, -3.0]]), weights, 0.5)
    assert not masks.point_masks.any()


def test_zero_decode_is_identity_on_queries():
    sp, sp_features, point_features = build_scene()
    queries = init_queries(sp_features)
    final, masks = decode(queries, sp_features, point_features, sp, DecoderWeights.zeros(4), 0.5, np.ones(30))
    np.testing.assert_array_equal(final.values, queries.values)
    assert not masks.point_masks.any()
    assert final.values.shape == (5, 4) and masks.point_masks.shape == (5, 30)


def test_decode_shapes_with_random_weights():
    sp, sp_features, point_features = build_scene(seed=9)
    final, masks = decode(init_queries(sp_features), sp_features, point_features, sp, build_weights(seed=9), 0.5, np.ones(30))
    assert final.layer == 3
    assert masks.point_masks.shape == (5, 30) and masks.scores.shape == (5,)


def test_decode_rejects_channel_mismatch():
    sp, sp_features, point_features = build_scene()
    with pytest.raises(ConfigurationError):
        decode(init_queries(sp_features), sp_features, point_features, sp, build_weights(channels=8), 0.5, np.ones(30))


def test_passthrough_masks_cover_superpoints():
    sp, sp_features, _ = build_scene()
    masks = passthrough_masks(init_queries(sp_features), sp)
    for q in range(5):
        assert np.flatnonzero(masks.point_masks[q]).tolist() == sp.members(q).tolist()


def test_mask_nms_examples():
    same = masks_from([[1, 1, 0], [1, 1, 0]], [0.8, 0.9])
    kept, keep = mask_nms(same, 0.6)
    assert keep.tolist() == [1] and kept.scores.tolist() == [0.9]
    disjoint = masks_from([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0.3, 0.2, 0.1])
    assert mask_nms(disjoint, 0.6)[1].tolist() == [0, 1, 2]


def test_mask_nms_matches_greedy_oracle():
    rng = np.random.default_rng(10)
    point_masks = rng.random((10, 40)) > 0.5
    scores = rng.random(10)
    _, keep = mask_nms(masks_from(point_masks, scores.tolist()), 0.6)
    iou = mask_iou_matrix(point_masks)
    survivors: list[int] = []
    for row in sorted(range(10), key=lambda r: -scores[r]):
        if all(iou[row, s] <= 0.6 for s in survivors):
            survivors.append(row)
    assert keep.tolist() == sorted(survivors)
    for a, b in itertools.combinations(keep, 2):
        assert iou[a, b] <= 0.6


def test_weights_reject_wrong_layer_count():
    weights = build_weights()
    with pytest.raises(ConfigurationError):
        DecoderWeights(weights.layers[:2], weights.mask_head)


def test_decode_without_superpoints_returns_no_masks():
    rng = np.random.default_rng(5)
    sp = build_superpoints(rng.normal(size=(12, 3)), np.full(12, -1))
    sp_features = np.zeros((0, 4))
    final, masks = decode(init_queries(sp_features), sp_features, rng.normal(size=(12, 4)), sp, build_weights(), 0.5, np.ones(12))
    assert len(final) == 0 and len(masks) == 0
    assert masks.point_masks.shape == (0, 12) and masks.origin.dtype == np.int64


def test_fully_masked_rows_never_produce_nan():
    rng = np.random.default_rng(11)
    cache: dict[tuple[int, int], DecoderWeights] = {}
    for _ in range(1000):
        channels = int(rng.choice([2, 4, 6, 8]))
        heads = int(rng.choice([h for h in (1, 2) if channels % h == 0]))
        if (channels, heads) not in cache:
            base = build_weights(channels, seed=channels)
            cache[channels, heads] = DecoderWeights(base.layers, base.mask_head, base.cls_head, heads=heads)
        weights = cache[channels, heads]
        n_q, n_sp = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        scale = float(rng.choice([1.0, 100.0]))
        queries = QuerySet(scale * rng.normal(size=(n_q, channels)), np.arange(n_q))
        sp_features = scale * rng.normal(size=(n_sp, channels))
        mask = rng.random((n_q, n_sp)) < rng.random()
        mask[rng.random(n_q) < 0.3] = False
        layer = int(rng.integers(0, 3))
        probs = cross_attention_weights(queries, sp_features, mask, weights, layer)
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(masked_cross_attention(queries, sp_features, mask, weights, layer)))
