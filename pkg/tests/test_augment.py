import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auglaplace.augment import (
    GENERATORS,
    AugmentationParams,
    ConfigurationError,
    affine_matrix,
    augment_batch,
    rotate_point,
    sample_eps,
    warp_image,
    warp_image_jvp,
)
from auglaplace.linalg import SingularMatrixError


def smooth_image(rng, h=8, w=8):
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    c = rng.normal(size=4)
    return 0.5 + 0.2 * np.sin(3 * xs + c[0]) * np.cos(2 * ys + c[1]) + 0.1 * np.cos(c[2] * xs - c[3] * ys)


# --- sampling -----------------------------------------------------------------

def test_antithetic_pair():
    eps = sample_eps(np.random.default_rng(0), 2, 6, antithetic=True)
    np.testing.assert_array_equal(eps[1], -eps[0])


def test_antithetic_needs_even_count():
    with pytest.raises(ConfigurationError):
        sample_eps(np.random.default_rng(0), 3, 1, antithetic=True)


def test_eps_moments():
    eps = sample_eps(np.random.default_rng(1), 100_000, 1)
    assert abs(eps.mean()) < 0.02
    assert abs(eps.var() - 1 / 3) < 0.02
    assert eps.min() >= -1 and eps.max() <= 1


def test_eps_deterministic_and_batched():
    a = sample_eps(np.random.default_rng(3), 4, 6, batch=(5,))
    b = sample_eps(np.random.default_rng(3), 4, 6, batch=(5,))
    assert a.shape == (5, 4, 6)
    np.testing.assert_array_equal(a, b)


def test_params_validate_component_count():
    with pytest.raises(ConfigurationError):
        AugmentationParams("ImageAffine", [0.1])
    with pytest.raises(ConfigurationError):
        AugmentationParams("PointRotation", [np.nan])
    assert AugmentationParams("ImageAffine").k == 6


# --- affine family ------------------------------------------------------------

def test_affine_at_zero_eta():
    eps = np.random.default_rng(2).uniform(-1, 1, 6)
    T, dT = affine_matrix(np.zeros(6), eps)
    np.testing.assert_array_equal(T, np.eye(3))
    np.testing.assert_allclose(dT, eps[:, None, None] * GENERATORS, atol=1e-16)


def test_affine_quarter_turn():
    eta = np.zeros(6)
    eta[2] = np.pi / 2
    eps = np.zeros(6)
    eps[2] = 1.0
    T, _ = affine_matrix(eta, eps)
    np.testing.assert_allclose(T, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_affine_tangents_match_finite_difference():
    rng = np.random.default_rng(4)
    h = 1e-6
    eta, eps = rng.normal(0, 0.5, 6), rng.uniform(-1, 1, 6)
    _, dT = affine_matrix(eta, eps)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fd = (affine_matrix(eta + e, eps)[0] - affine_matrix(eta - e, eps)[0]) / (2 * h)
        assert np.max(np.abs(dT[i] - fd)) < 1e-6


@pytest.mark.parametrize("i", [3, 4])
def test_scaling_generators_give_diagonal(i):
    eta = np.zeros(6)
    eta[i] = 0.6
    eps = np.zeros(6)
    eps[i] = -0.7
    T, _ = affine_matrix(eta, eps)
    want = np.eye(3)
    want[i - 3, i - 3] = np.exp(-0.42)
    np.testing.assert_allclose(T, want, rtol=1e-14, atol=1e-16)


def test_negated_eta_gives_same_transform_population():
    rng = np.random.default_rng(5)
    eta = rng.normal(size=6)
    eps = rng.uniform(-1, 1, (50, 6))
    T_pos, _ = affine_matrix(eta, eps)
    T_neg, _ = affine_matrix(-eta, -eps)
    np.testing.assert_allclose(T_pos, T_neg, rtol=1e-14)


# --- image warping ------------------------------------------------------------

def test_identity_warp_is_exact():
    img = np.random.default_rng(6).uniform(size=(7, 9))
    np.testing.assert_array_equal(warp_image(img, np.eye(3)), img)


def test_one_pixel_translation_is_index_shift():
    img = np.random.default_rng(7).uniform(size=(6, 8))
    T = np.eye(3)
    T[0, 2] = 2.0 / (8 - 1)
    out = warp_image(img, T)
    want = np.zeros_like(img)
    want[:, 1:] = img[:, :-1]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_half_pixel_translation_blends_neighbours():
    a, b = 0.3, 0.9
    img = np.array([[a, b]])
    T = np.eye(3)
    T[0, 2] = -0.5 * 2.0 / (2 - 1)  # output reads half a pixel to the right
    out = warp_image(img, T)
    assert out[0, 0] == pytest.approx((a + b) / 2, abs=1e-15)


def test_warp_singular_transform():
    with pytest.raises(SingularMatrixError):
        warp_image(np.ones((4, 4)), np.zeros((3, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_warp_preserves_value_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(6, 6))
    T, _ = affine_matrix(rng.normal(0, 0.8, 6), rng.uniform(-1, 1, 6))
    out = warp_image(img, T)
    assert out.min() >= min(0.0, img.min()) - 1e-12
    assert out.max() <= img.max() + 1e-12


def test_jvp_trivial_cases():
    rng = np.random.default_rng(8)
    T, _ = affine_matrix(rng.normal(0, 0.3, 6), rng.uniform(-1, 1, 6))
    np.testing.assert_array_equal(warp_image_jvp(rng.uniform(size=(5, 5)), T, np.zeros((3, 3))), 0.0)
    dT = rng.normal(size=(3, 3))
    dT[2] = 0
    # a slight zoom keeps every source strictly inside the grid, away from the zero padding
    zoom = np.diag([1.1, 1.1, 1.0])
    np.testing.assert_array_equal(warp_image_jvp(np.full((5, 5), 0.4), zoom, dT), 0.0)


def test_jvp_matches_finite_difference():
    rng = np.random.default_rng(9)
    img = smooth_image(rng)
    h = 1e-5
    for _ in range(5):
        T, _ = affine_matrix(rng.normal(0, 0.2, 6), rng.uniform(-1, 1, 6))
        dT = rng.normal(size=(3, 3))
        dT[2] = 0
        fd = (warp_image(img, T + h * dT) - warp_image(img, T - h * dT)) / (2 * h)
        assert np.max(np.abs(warp_image_jvp(img, T, dT) - fd)) < 1e-4


def test_jvp_several_directions_at_once():
    rng = np.random.default_rng(10)
    img = smooth_image(rng)
    T, dT = affine_matrix(rng.normal(0, 0.2, 6), rng.uniform(-1, 1, 6))
    value, many = warp_image_jvp(img, T, dT, return_value=True)
    np.testing.assert_allclose(value, warp_image(img, T), atol=1e-15)
    for i in range(6):
        np.testing.assert_allclose(many[i], warp_image_jvp(img, T, dT[i]), atol=1e-13)


# --- point rotation -----------------------------------------------------------

def test_rotation_at_zero_eta():
    x = np.array([0.3, -1.2])
    xr, t = rotate_point(x, 0.0, 0.4)
    np.testing.assert_array_equal(xr, x)
    np.testing.assert_allclose(t, 0.4 * np.array([1.2, 0.3]))


def test_rotation_quarter_turn():
    xr, _ = rotate_point(np.array([1.0, 0.0]), np.pi / 2, 1.0)
    np.testing.assert_allclose(xr, [0, 1], atol=1e-16)


def test_rotation_tangent_finite_difference():
    rng = np.random.default_rng(11)
    h = 1e-6
    for _ in range(20):
        x, eta, eps = rng.normal(size=2), rng.normal(), rng.uniform(-1, 1)
        _, t = rotate_point(x, eta, eps)
        fd = (rotate_point(x, eta + h, eps)[0] - rotate_point(x, eta - h, eps)[0]) / (2 * h)
        assert np.max(np.abs(t - fd)) < 1e-8


@settings(max_examples=100, deadline=None)
@given(
    x=st.tuples(st.floats(-10, 10), st.floats(-10, 10)),
    eta=st.floats(-10, 10),
    eps=st.floats(-1, 1),
)
def test_rotation_is_isometry(x, eta, eps):
    x = np.array(x)
    xr, _ = rotate_point(x, eta, eps)
    assert np.linalg.norm(xr) == pytest.approx(np.linalg.norm(x), rel=1e-14, abs=1e-14)


@pytest.mark.parametrize("family", ["PointRotation", "ImageAffine"])
def test_zero_eta_is_identity_for_every_family(family):
    rng = np.random.default_rng(12)
    aug = AugmentationParams(family)
    x = rng.normal(size=(3, 2)) if family == "PointRotation" else rng.uniform(size=(3, 5, 5))
    eps = sample_eps(rng, 4, aug.k, batch=(3,))
    xa, _ = augment_batch(aug, x, eps)
    flat = x.reshape(3, -1)
    np.testing.assert_array_equal(xa, np.broadcast_to(flat[:, None, :], xa.shape))


def test_augment_batch_image_tangent_shape_and_value():
    rng = np.random.default_rng(13)
    aug = AugmentationParams("ImageAffine", rng.normal(0, 0.2, 6))
    x = rng.uniform(size=(2, 6, 6))
    eps = sample_eps(rng, 3, 6, batch=(2,))
    xa, dxa = augment_batch(aug, x, eps, with_tangent=True)
    assert xa.shape == (2, 3, 36) and dxa.shape == (2, 3, 6, 36)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        up, _ = augment_batch(aug.with_eta(aug.eta + e), x, eps)
        dn, _ = augment_batch(aug.with_eta(aug.eta - e), x, eps)
        assert np.max(np.abs(dxa[:, :, i] - (up - dn) / (2 * h))) < 1e-5
