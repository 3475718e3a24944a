import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_mesh import autodiff as ad
from implicit_mesh.autodiff import Tensor, grad_check
from implicit_mesh.geometry import random_sphere_points, reflect
from implicit_mesh.texture import bilinear_sample, build_texture_space, eval_texture_flow, fold, texture_at


@pytest.fixture
def space():
    return build_texture_space(latent_dim=6, hidden=32, seed=3)


def test_flow_in_unit_square(space, rng):
    flow = eval_texture_flow(space, random_sphere_points(300, rng), rng.standard_normal(6) * 3).data
    assert flow.min() > 0.0 and flow.max() < 1.0


def test_flow_is_mirror_symmetric(space, rng):
    for _ in range(20):
        u = random_sphere_points(10, rng)
        z = rng.standard_normal(6)
        assert np.array_equal(eval_texture_flow(space, u, z).data, eval_texture_flow(space, reflect(u), z).data)


def test_fold_keeps_plane_points(rng):
    u = np.array([[0.0, 0.6, 0.8], [-0.6, 0.0, 0.8], [0.6, 0.0, 0.8]])
    folded = fold(u).data
    np.testing.assert_array_equal(folded[0], u[0])
    np.testing.assert_array_equal(folded[1], folded[2])


def test_bilinear_examples(rng):
    img = rng.random((5, 7, 3))
    r, c = 2, 4
    xy = np.array([(c + 0.5) / 7, (r + 0.5) / 5])
    np.testing.assert_allclose(bilinear_sample(img, xy).data, img[r, c], atol=1e-14)
    mid = np.array([(c + 1.0) / 7, (r + 0.5) / 5])
    np.testing.assert_allclose(bilinear_sample(img, mid).data, 0.5 * (img[r, c] + img[r, c + 1]), atol=1e-14)
    corner = bilinear_sample(img, np.array([[0.0, 0.0], [1.0, 1.0], [-0.5, 2.0]])).data
    np.testing.assert_allclose(corner[0], img[0, 0])
    np.testing.assert_allclose(corner[1], img[-1, -1])
    np.testing.assert_allclose(corner[2], img[-1, 0])


def test_bilinear_gradient(rng):
    img = rng.random((6, 6, 3))
    w = Tensor(rng.standard_normal((4, 3)))
    cells = rng.integers(1, 4, size=(4, 2)) + 0.5 + rng.uniform(0.2, 0.8, (4, 2))
    xy = cells / 6.0  # inside cell interiors
    assert grad_check(lambda t: ad.sum(bilinear_sample(img, t) * w), xy) < 1e-5


def test_constant_image_gives_constant_texture(space, rng):
    img = np.broadcast_to([0.2, 0.4, 0.6], (8, 8, 3))
    colors = texture_at(space, rng.standard_normal(6), img)(random_sphere_points(50, rng)).data
    np.testing.assert_allclose(colors, np.tile([0.2, 0.4, 0.6], (50, 1)), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_texture_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    space = build_texture_space(latent_dim=4, hidden=16, seed=seed % 5)
    img = rng.uniform(0.2, 0.7, (8, 8, 3))
    tex = texture_at(space, rng.standard_normal(4), img)
    u = random_sphere_points(20, rng)
    a, b = tex(u).data, tex(reflect(u)).data
    assert np.array_equal(a, b)
    assert a.min() >= img.min() and a.max() <= img.max()
