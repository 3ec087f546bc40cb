import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.errors import ConfigurationError, EmptyInputError
from app.geometry import DepthImage, Pose, unproject_depth
from app.models import CameraIntrinsics
from app.nn import Linear, Mlp
from app.superpoint import (
    GeoPoolWeights,
    MaskImage,
    build_superpoints,
    geo_features,
    geometric_pool,
    geometric_weights,
    lift_masks,
    normalize_superpoint,
    point_weights,
    pool_mask,
    pool_superpoints,
    scatter_max,
    scatter_mean,
)


def build_frame(height: int = 6, width: int = 8):
    intrinsics = CameraIntrinsics(fx=10.0, fy=10.0, cx=width / 2, cy=height / 2, width=width, height=height)
    depth = DepthImage(np.full((height, width), 1500, dtype=np.uint16))
    return unproject_depth(depth, intrinsics, Pose.identity())


def random_geo_weights(channels: int = 4, seed: int = 0) -> GeoPoolWeights:
    rng = np.random.default_rng(seed)
    return GeoPoolWeights(Mlp.random((3, 8, channels), rng), Mlp.random((2 * channels, 8, 1), rng))


def scalar_mlp(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    out = x
    for i, layer in enumerate(mlp.layers):
        if i:
            out = [max(v, 0.0) for v in out]
        out = [sum(out[r] * layer.weight[r, c] for r in range(layer.in_dim)) + layer.bias[c] for c in range(layer.out_dim)]
    return np.array(out)


def test_lift_masks_examples():
    cloud = build_frame()
    assert np.all(lift_masks(MaskImage(np.full((6, 8), -1)), cloud) == -1)
    assert np.all(lift_masks(MaskImage(np.zeros((6, 8), dtype=int)), cloud) == 0)
    checker = (np.indices((6, 8)).sum(axis=0) % 2).astype(int)
    index = lift_masks(MaskImage(checker), cloud)
    expected = [checker[v, u] for u, v in cloud.source_pixel]
    assert index.tolist() == expected


def test_mask_image_requires_contiguous_ids():
    with pytest.raises(ConfigurationError):
        MaskImage(np.array([[0, 2], [2, 0]]))


def test_lift_masks_shape_mismatch():
    with pytest.raises(ConfigurationError):
        lift_masks(MaskImage(np.zeros((3, 3), dtype=int)), build_frame())


def test_normalize_superpoint_examples():
    center, normalized = normalize_superpoint([(1.0, 1.0, 1.0)])
    assert center.tolist() == [1.0, 1.0, 1.0] and normalized.tolist() == [[0.0, 0.0, 0.0]]
    center, normalized = normalize_superpoint([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)])
    np.testing.assert_allclose(center, [0.5, 0.0, 0.0])
    np.testing.assert_allclose(normalized, [[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
    with pytest.raises(EmptyInputError):
        normalize_superpoint(np.zeros((0, 3)))


def test_normalized_cluster_has_unit_extent():
    points = np.random.default_rng(2).normal(size=(50, 3)) * [3.0, 1.0, 0.5] + 7.0
    center, normalized = normalize_superpoint(points)
    extent = normalized.max(axis=0) - normalized.min(axis=0)
    assert extent.max() == pytest.approx(1.0, abs=1e-9)
    scale = (points.max(axis=0) - points.min(axis=0)).max()
    for p, n in zip(points, normalized):
        np.testing.assert_allclose(n, (p - points.mean(axis=0)) / scale, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0), shift=st.floats(-100, 100))
def test_normalization_ignores_translation_and_scale(seed, scale, shift):
    points = np.random.default_rng(seed).normal(size=(20, 3))
    _, base = normalize_superpoint(points)
    _, moved = normalize_superpoint(points * scale + shift)
    np.testing.assert_allclose(moved, base, atol=1e-9)


def test_build_superpoints_matches_per_group_normalization():
    rng = np.random.default_rng(4)
    positions = rng.normal(size=(40, 3))
    index = rng.integers(-1, 4, size=40)
    superpoints = build_superpoints(positions, index)
    assert superpoints.labels.tolist() == sorted(set(index[index >= 0].tolist()))
    for sp, label in enumerate(superpoints.labels):
        rows = np.flatnonzero(index == label)
        center, normalized = normalize_superpoint(positions[rows])
        np.testing.assert_allclose(superpoints.centers[sp], center)
        np.testing.assert_allclose(superpoints.normalized[rows], normalized, atol=1e-12)


def test_build_superpoints_compacts_empty_ids():
    positions = np.zeros((3, 3))
    superpoints = build_superpoints(positions, np.array([2, -1, 2]))
    assert superpoints.count == 1
    assert superpoints.index.tolist() == [0, -1, 0]
    assert superpoints.labels.tolist() == [2]


def test_geo_features_examples():
    identity = Linear(np.eye(3), np.zeros(3))
    weights = GeoPoolWeights(Mlp((identity,)), Mlp.zeros((6, 1)))
    _, z_global = geo_features(np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]), weights)
    assert z_global[0] == 0.5
    z_local, z_global = geo_features(np.array([[0.1, 0.2, 0.3]]), weights)
    np.testing.assert_array_equal(z_local[0], z_global)


def test_geo_features_global_is_channel_max():
    weights = random_geo_weights()
    normalized = np.random.default_rng(5).uniform(-0.5, 0.5, (10, 3))
    z_local, z_global = geo_features(normalized, weights)
    assert z_global.tolist() == [max(row[c] for row in z_local) for c in range(z_local.shape[1])]


def test_point_weights_examples():
    z_local = np.random.default_rng(6).normal(size=(5, 4))
    zero = GeoPoolWeights(Mlp.random((3, 4), np.random.default_rng(0)), Mlp.zeros((8, 1)))
    np.testing.assert_allclose(point_weights(z_local, z_local.max(axis=0), zero), 0.5)
    saturated = GeoPoolWeights(zero.mlp_local, Mlp((Linear(np.zeros((8, 1)), np.array([20.0])),)))
    assert np.all(point_weights(z_local, z_local.max(axis=0), saturated) > 0.999999)


def test_point_weights_match_scalar_mlp():
    weights = random_geo_weights()
    z_local, z_global = geo_features(np.random.default_rng(7).uniform(-0.5, 0.5, (6, 3)), weights)
    w = point_weights(z_local, z_global, weights)
    for j in range(6):
        logit = scalar_mlp(weights.mlp_weight, np.concatenate([z_local[j], z_global]))[0]
        assert w[j] == pytest.approx(1.0 / (1.0 + np.exp(-logit)), abs=1e-6)
    assert np.all((w > 0.0) & (w < 1.0))


def test_scatter_examples():
    values = np.random.default_rng(8).normal(size=(6, 3))
    np.testing.assert_allclose(scatter_mean(values, np.zeros(6, dtype=int), 1), values.mean(axis=0, keepdims=True))
    np.testing.assert_allclose(scatter_max(values, np.zeros(6, dtype=int), 1), values.max(axis=0, keepdims=True))
    np.testing.assert_allclose(scatter_mean(values, np.arange(6), 6), values)
    np.testing.assert_allclose(scatter_max(values, np.arange(6), 6), values)


def test_scatter_matches_grouping_loop():
    rng = np.random.default_rng(9)
    values = rng.normal(size=(30, 4))
    index = rng.integers(-1, 5, size=30)
    means, maxes = scatter_mean(values, index, 5), scatter_max(values, index, 5)
    for group in range(5):
        rows = [values[i] for i in range(30) if index[i] == group]
        if rows:
            np.testing.assert_allclose(means[group], np.mean(rows, axis=0), atol=1e-12)
            np.testing.assert_allclose(maxes[group], np.max(rows, axis=0))


def test_uniform_weights_reduce_to_mean_pooling():
    rng = np.random.default_rng(10)
    positions = rng.normal(size=(25, 3))
    superpoints = build_superpoints(positions, rng.integers(0, 4, size=25))
    features = rng.normal(size=(25, 6))
    point_w, z_global = geometric_weights(superpoints, None, 6)
    pooled = geometric_pool(features, superpoints, point_w, z_global)
    np.testing.assert_allclose(pooled, scatter_mean(features, superpoints.index, superpoints.count), atol=1e-12)


def test_single_point_pool():
    superpoints = build_superpoints(np.zeros((1, 3)), np.array([0]))
    g = np.array([[1.0, -2.0]])
    pooled = geometric_pool(np.array([[4.0, 6.0]]), superpoints, np.array([0.5]), g)
    np.testing.assert_allclose(pooled, [[3.0, 1.0]])


def test_geometric_pool_matches_double_loop():
    rng = np.random.default_rng(11)
    positions = rng.normal(size=(40, 3))
    superpoints = build_superpoints(positions, rng.integers(0, 5, size=40))
    features = rng.normal(size=(40, 4))
    weights = random_geo_weights(4, seed=3)
    pooled, point_w = pool_superpoints(features, superpoints, "geometric", weights)
    _, z_global = geometric_weights(superpoints, weights, 4)
    for sp in range(superpoints.count):
        members = [j for j in range(40) if superpoints.index[j] == sp]
        expected = sum(point_w[j] * features[j] for j in members) / len(members) + z_global[sp]
        np.testing.assert_allclose(pooled[sp], expected, atol=1e-9)


def test_pool_mask_examples_and_oracle():
    rng = np.random.default_rng(12)
    superpoints = build_superpoints(rng.normal(size=(30, 3)), rng.integers(0, 4, size=30))
    ones = np.ones(30)
    assert pool_mask(np.ones((1, 30), dtype=bool), superpoints, ones, 0.5).all()
    assert not pool_mask(np.zeros((1, 30), dtype=bool), superpoints, ones, 0.5).any()

    masks = rng.random((3, 30)) > 0.4
    point_w = rng.uniform(0.2, 1.0, 30)
    pooled = pool_mask(masks, superpoints, point_w, 0.5)
    for q in range(3):
        for sp in range(superpoints.count):
            members = [j for j in range(30) if superpoints.index[j] == sp]
            value = sum(point_w[j] * masks[q, j] for j in members) / len(members)
            assert pooled[q, sp] == (value > 0.5)


def test_pool_mask_is_monotone():
    rng = np.random.default_rng(13)
    superpoints = build_superpoints(rng.normal(size=(30, 3)), rng.integers(0, 4, size=30))
    point_w = rng.uniform(0.2, 1.0, 30)
    mask = rng.random(30) > 0.5
    grown = mask | (rng.random(30) > 0.5)
    before = pool_mask(mask[None], superpoints, point_w, 0.3)
    after = pool_mask(grown[None], superpoints, point_w, 0.3)
    assert np.all(after[before])


def test_pooling_ablation_modes():
    rng = np.random.default_rng(14)
    superpoints = build_superpoints(rng.normal(size=(20, 3)), rng.integers(0, 3, size=20))
    features = rng.normal(size=(20, 5))
    average, _ = pool_superpoints(features, superpoints, "average")
    maximum, _ = pool_superpoints(features, superpoints, "max")
    np.testing.assert_allclose(average, scatter_mean(features, superpoints.index, 3))
    np.testing.assert_allclose(maximum, scatter_max(features, superpoints.index, 3))
