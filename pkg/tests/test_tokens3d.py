"""Token field construction and set encoding."""

import numpy as np
import pytest

from pixpoint.autodiff import Tensor
from pixpoint.finitediff import max_relative_error
from pixpoint.geometry import pairwise_sq_dists
from pixpoint.layers import Module
from pixpoint.tokens3d import (
    K_NEIGHBORS, TokenField, build_token_field, encode_tokens,
    make_set_encoder, select_centers,
)


def random_cloud(rng, n):
    xyz = rng.random((n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return np.concatenate([xyz, normals], axis=1)


def test_cube_corners_all_selected():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                       dtype=np.float64)
    sel = select_centers(corners, 8)
    assert sorted(sel.tolist()) == list(range(8))


def test_single_center_is_centroid_nearest():
    pts = np.array([[0.0, 0, 0], [0.4, 0, 0], [1.0, 0, 0]])
    sel = select_centers(pts, 1)
    assert sel.tolist() == [1]


def test_seed_argument_is_inert():
    rng = np.random.default_rng(0)
    pts = rng.random((200, 3))
    a = select_centers(pts, 32, seed=1)
    b = select_centers(pts, 32, seed=999)
    assert np.array_equal(a, b)


def test_too_few_points_raises():
    with pytest.raises(ValueError):
        select_centers(np.zeros((4, 3)), 8)


def test_field_centers_are_actual_points():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 400)
    field = build_token_field(cloud, n3d=64, k=8)
    assert field.n_tokens == 64
    assert np.array_equal(field.centers, cloud[field.center_index, 0:3])


def test_neighborhoods_match_brute_force_knn():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 300)
    field = build_token_field(cloud, n3d=32, k=10)
    d2 = pairwise_sq_dists(field.centers, cloud[:, 0:3])
    for t in range(field.n_tokens):
        order = np.argsort(d2[t], kind="stable")[:10]
        assert np.array_equal(field.neighbor_index[t], order)
    # the center itself sits in its own neighborhood at distance zero
    assert np.all(field.neighbor_index[:, 0] == field.center_index)
    assert np.all(field.neighborhoods[:, 0, 0:3] == 0.0)


def test_neighborhood_features_are_relative_with_normals():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 120)
    field = build_token_field(cloud, n3d=16, k=6)
    nbr = field.neighbor_index
    rel = cloud[nbr, 0:3] - field.centers[:, None, :]
    assert np.allclose(field.neighborhoods[:, :, 0:3], rel)
    assert np.allclose(field.neighborhoods[:, :, 3:6], cloud[nbr, 3:6])


def test_bad_cloud_shapes_raise():
    with pytest.raises(ValueError):
        build_token_field(np.zeros((50, 3)), n3d=8, k=4)
    with pytest.raises(ValueError):
        build_token_field(np.zeros((5, 6)), n3d=2, k=16)


def test_encoding_permutation_invariant():
    rng = np.random.default_rng(11)
    cloud = random_cloud(rng, 200)
    field = build_token_field(cloud, n3d=24, k=K_NEIGHBORS)
    encoder = make_set_encoder(rng, d_hidden=32, d_out=20)
    z = encode_tokens(field, encoder).data
    perm = rng.permutation(K_NEIGHBORS)
    shuffled = TokenField(
        centers=field.centers, center_index=field.center_index,
        neighborhoods=field.neighborhoods[:, perm, :],
        neighbor_index=field.neighbor_index[:, perm])
    z_perm = encode_tokens(shuffled, encoder).data
    assert np.allclose(z, z_perm, atol=1e-12)


def test_zero_weight_encoder_collapses_to_bias():
    rng = np.random.default_rng(12)
    cloud = random_cloud(rng, 150)
    field = build_token_field(cloud, n3d=20, k=8)
    encoder = make_set_encoder(rng, d_hidden=16, d_out=12)
    for name, p in encoder.named_params():
        if name.endswith(".weight"):
            p.data[:] = 0.0
        else:
            p.data[:] = rng.normal(size=p.data.shape)
    z = encode_tokens(field, encoder).data
    assert np.allclose(z, z[0])   # bias-determined, identical across tokens
    assert np.any(z != 0.0)


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    cloud = random_cloud(rng, 80)
    field = build_token_field(cloud, n3d=6, k=5)
    encoder = make_set_encoder(rng, d_hidden=8, d_out=7)
    params = [p for _, p in encoder.named_params()]
    probe = Tensor(rng.normal(size=(6, 7)))

    def loss():
        z = encode_tokens(field, encoder)
        return (z * probe).sum()

    assert max_relative_error(loss, params) <= 1e-4
