import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_mesh import autodiff as ad
from implicit_mesh.autodiff import Tensor, grad_check
from implicit_mesh.errors import ContractError
from implicit_mesh.geometry import icosphere, random_sphere_points, reflect
from implicit_mesh.shape_space import (ShapeSpace, brute_force_match, build_shape_space, eval_deform,
                                       eval_mean, eval_shape, extract_mesh, hungarian_match)

from conftest import IdentityNet


def _random_space(seed):
    space = build_shape_space(latent_dim=8, hidden=32, seed=seed)
    rng = np.random.default_rng(seed + 100)
    last = space.deform_net.weights[-1]
    last.data = rng.standard_normal(last.shape) * 0.3  # non-trivial deformation head
    return space


def test_mean_shape_is_mirror_symmetric(rng):
    space = build_shape_space(seed=3)
    u = random_sphere_points(50, rng)
    a, b = eval_mean(space, u).data, eval_mean(space, reflect(u)).data
    assert np.array_equal(a[:, 0], -b[:, 0])
    assert np.array_equal(a[:, 1:], b[:, 1:])


def test_sphere_template_gives_unit_mean(sphere_fit, rng):
    space, result = sphere_fit
    assert result.converged
    u = random_sphere_points(500, rng)
    r = np.linalg.norm(eval_mean(space, u).data, axis=1)
    assert np.abs(r - 1).max() < 0.02


def test_sphere_template_chamfer(sphere_fit):
    assert sphere_fit[1].chamfer < 0.02


def test_constant_deformation_head(rng):
    space = build_shape_space(seed=0)
    c = np.array([0.3, -0.2, 0.5])
    space.deform_net.biases[-1].data = c.copy()  # last weights are zero: output is c
    d = eval_deform(space, random_sphere_points(20, rng), np.zeros(16)).data
    np.testing.assert_allclose(d, np.tile([0.0, c[1], c[2]], (20, 1)), atol=1e-15)


def test_zero_head_gives_zero_deformation(rng):
    space = build_shape_space(seed=0)
    u = random_sphere_points(20, rng)
    assert not eval_deform(space, u, rng.standard_normal(16)).data.any()
    np.testing.assert_array_equal(eval_shape(space, u, np.zeros(16)).data, eval_mean(space, u).data)


def test_deformation_x_components_cancel(rng):
    space = _random_space(1)
    u = random_sphere_points(30, rng)
    z = rng.standard_normal(8)
    a, b = eval_deform(space, u, z).data, eval_deform(space, reflect(u), z).data
    assert np.abs(a[:, 0] + b[:, 0]).max() < 1e-15


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_symmetry(seed):
    space = _random_space(seed % 7)
    rng = np.random.default_rng(seed)
    u = random_sphere_points(10, rng)
    z = rng.standard_normal(8)
    a, b = eval_shape(space, u, z).data, eval_shape(space, reflect(u), z).data
    assert np.abs(a[:, 0] + b[:, 0]).max() < 1e-9
    assert np.abs(a[:, 1:] - b[:, 1:]).max() < 1e-9


def test_latent_gradient_matches_finite_differences(rng):
    space = _random_space(2)
    u = random_sphere_points(6, rng)
    w = Tensor(rng.standard_normal((6, 3)))
    err = grad_check(lambda z: ad.sum(eval_shape(space, u, z) * w), rng.standard_normal(8) * 0.5)
    assert err < 1e-4


def test_input_contracts():
    space = build_shape_space(latent_dim=4)
    with pytest.raises(ContractError):
        eval_mean(space, np.array([[1.0, 1.0, 0.0]]))
    with pytest.raises(ContractError):
        eval_deform(space, np.array([[1.0, 0.0, 0.0]]), np.zeros(5))


def test_extract_mesh_identity_space():
    space = ShapeSpace(IdentityNet(), build_shape_space(latent_dim=4).deform_net, 4)
    atlas = icosphere(2)
    mesh = extract_mesh(space, np.zeros(4), atlas)
    assert len(mesh.vertices) == atlas.n_samples
    np.testing.assert_allclose(mesh.vertices, atlas.samples, atol=1e-15)
    assert np.array_equal(mesh.faces, atlas.faces)
    assert np.array_equal(mesh.sphere_coords, atlas.samples)


def test_extract_mesh_continuous_in_latent(rng):
    space = _random_space(4)
    atlas = icosphere(1)
    z = rng.standard_normal(8)
    d = rng.standard_normal(8)
    base = extract_mesh(space, z, atlas).vertices
    gaps = [np.abs(extract_mesh(space, z + eps * d, atlas).vertices - base).max()
            for eps in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_hungarian_examples(rng):
    p = rng.standard_normal((6, 3))
    perm, cost = hungarian_match(p, p)
    assert perm.tolist() == list(range(6)) and cost == 0.0
    q = rng.standard_normal((3, 3))
    order = np.array([2, 0, 1])
    perm, cost = hungarian_match(q[order], q)
    assert perm.tolist() == order.tolist() and cost == 0.0
    with pytest.raises(ContractError):
        hungarian_match(np.zeros((3, 3)), np.zeros((4, 3)))


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_matches_exhaustive_search(n):
    rng = np.random.default_rng(n)
    for _ in range(3):
        p, q = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
        _, cost = hungarian_match(p, q)
        _, best = brute_force_match(p, q)
        assert cost == pytest.approx(best, rel=1e-12, abs=1e-12)
        assert cost <= float(np.sum((p - q) ** 2)) + 1e-12


def test_brute_force_enumerates_all_permutations():
    p = np.arange(15.0).reshape(5, 3)
    q = p[[4, 3, 2, 1, 0]]
    perm, cost = brute_force_match(p, q)
    assert cost == 0.0 and perm.tolist() == [4, 3, 2, 1, 0]
    assert len(list(itertools.permutations(range(5)))) == 120


def test_template_fit_loss_sanity(sphere_fit):
    # each batch loss is a fresh random sample; compare 50-iteration moving averages
    losses = np.array(sphere_fit[1].losses)
    smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
    for start in range(len(smooth) - 50):
        assert smooth[start + 50] <= 1.1 * smooth[start]


def test_template_fit_leaves_deformation_untouched(sphere_fit):
    fresh = build_shape_space(seed=0)
    space, _ = sphere_fit
    for name, p in fresh.deform_net.parameters().items():
        assert np.array_equal(p.data, space.deform_net.parameters()[name].data)
