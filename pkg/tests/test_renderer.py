import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_mesh import autodiff as ad
from implicit_mesh.autodiff import Tensor, grad_check
from implicit_mesh.camera import IDENTITY_QUAT, WeakPerspectiveCamera, project, quat_from_view
from implicit_mesh.errors import ContractError
from implicit_mesh.geometry import TriMesh, atlas_mesh, icosphere
from implicit_mesh.renderer import (SoftRasterConfig, boundary_pixels, distance_field, hard_rasterize,
                                    lookup_distance, pixel_centers, rasterize_color, rasterize_hard_mask,
                                    rasterize_mask, rasterize_surface_coords, soft_silhouette)
from implicit_mesh.texture import build_texture_space, texture_at

SPHERE = atlas_mesh(icosphere(2))


def _cam(scale=18.0, t=(32.0, 32.0), az=0.4, el=0.3):
    return WeakPerspectiveCamera(scale, np.array(t, dtype=np.float64), quat_from_view(az, el))


def _point_in_triangle_mask(v2d, faces, h, w):
    """Independent oracle: barycentric point-in-triangle test of every pixel center."""
    p = pixel_centers(h, w)
    out = np.zeros(len(p), dtype=bool)
    for f in faces:
        a, b, c = v2d[f]
        m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        lam = np.linalg.solve(m, (p - a).T).T
        out |= (lam[:, 0] >= -1e-12) & (lam[:, 1] >= -1e-12) & (lam.sum(axis=1) <= 1 + 1e-12)
    return out.reshape(h, w)


def _soft_oracle(v2d, faces, sigma, h, w):
    """Full product over every face and pixel, with no candidate culling."""
    p = pixel_centers(h, w)
    log_vis = np.zeros(len(p))
    for f in faces:
        a, b, c = v2d[f]

        def seg(s, t):
            e = t - s
            u = np.clip(((p - s) @ e) / (e @ e), 0, 1)
            d = p - s - u[:, None] * e
            return (d * d).sum(1)

        d2 = np.minimum(np.minimum(seg(b, c), seg(c, a)), seg(a, b))
        inside = _point_in_triangle_mask(v2d[[f[0], f[1], f[2]]], [[0, 1, 2]], h, w).reshape(-1)
        log_vis -= np.logaddexp(0.0, np.where(inside, 1.0, -1.0) * d2 / sigma)
    return 1.0 - np.exp(log_vis).reshape(h, w)


def test_config_defaults_and_contracts():
    cfg = SoftRasterConfig(32, 40)
    assert cfg.sigma == pytest.approx(1e-4 * 40 ** 2)
    with pytest.raises(ContractError):
        SoftRasterConfig(4, 32)
    with pytest.raises(ContractError):
        SoftRasterConfig(16, 16, sigma=-1.0)


def test_empty_mesh_gives_empty_mask():
    cfg = SoftRasterConfig(16, 16)
    empty = TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64))
    assert not rasterize_mask(empty, _cam(), cfg).data.any()


def test_large_triangle_covers_image():
    cfg = SoftRasterConfig(32, 32)
    tri = TriMesh([[-100.0, -100.0, 0.0], [300.0, -100.0, 0.0], [-100.0, 300.0, 0.0]], [[0, 1, 2]])
    cam = WeakPerspectiveCamera(1.0, [0.0, 0.0], IDENTITY_QUAT)
    mask = rasterize_mask(tri, cam, cfg).data
    assert mask.min() > 0.99
    hard = rasterize_hard_mask(tri, cam, 32, 32)
    assert np.abs(mask - hard).max() < 1e-2


@pytest.mark.parametrize("az", [0.3, 1.7, 3.5])
def test_soft_mask_agrees_with_hard_oracle(az):
    # unit sphere projected to radius W / 6; the mean error grows with that fraction
    cfg = SoftRasterConfig(64, 64)
    cam = _cam(scale=64 / 6, az=az)
    v2d = project(cam, SPHERE.vertices).data
    soft = rasterize_mask(SPHERE, cam, cfg).data
    hard = _point_in_triangle_mask(v2d, SPHERE.faces, 64, 64)
    assert np.array_equal(hard, hard_rasterize(v2d, SPHERE.faces, 64, 64)[0])
    assert np.abs(soft - hard).mean() < 0.02


def test_candidate_culling_matches_full_product():
    cfg = SoftRasterConfig(24, 24)
    mesh = atlas_mesh(icosphere(1))
    v2d = project(_cam(8.0, (12.0, 12.0)), mesh.vertices).data
    soft = soft_silhouette(v2d, mesh.faces, cfg).data
    assert np.abs(soft - _soft_oracle(v2d, mesh.faces, cfg.sigma, 24, 24)).max() < 1e-6


def test_occupancy_bounds():
    mask = rasterize_mask(SPHERE, _cam(), SoftRasterConfig(32, 32)).data
    assert mask.min() >= 0.0 and mask.max() <= 1.0
    tri = TriMesh([[-4.0, -4.0, 0.0], [4.0, -4.0, 0.0], [0.0, 4.0, 0.0]], [[0, 1, 2]])
    cam = WeakPerspectiveCamera(1.0, [16.0, 16.0], IDENTITY_QUAT)
    wide = rasterize_mask(tri, cam, SoftRasterConfig(32, 32, sigma=40.0)).data
    assert wide.min() > 0.0 and wide.max() < 1.0


def test_mask_gradient_wrt_single_vertex(rng):
    cfg = SoftRasterConfig(16, 16)
    mesh = atlas_mesh(icosphere(1))
    v0 = project(_cam(5.0, (8.0, 8.0), 0.4, 0.2), mesh.vertices).data
    w = Tensor(rng.standard_normal((16, 16)))
    k = 3

    def f(vk):
        rows = [Tensor(v0[i:i + 1]) if i != k else ad.reshape(vk, (1, 2)) for i in range(len(v0))]
        return ad.sum(soft_silhouette(ad.concat(rows, axis=0), mesh.faces, cfg) * w)

    assert grad_check(f, v0[k]) < 1e-3


def test_mask_gradient_wrt_camera(rng):
    cfg = SoftRasterConfig(16, 16)
    mesh = atlas_mesh(icosphere(1))
    w = Tensor(rng.standard_normal((16, 16)))
    q0 = quat_from_view(0.4, 0.2)

    def f(params):
        cam = WeakPerspectiveCamera(params[0], params[1:3], params[3:])
        return ad.sum(rasterize_mask(mesh, cam, cfg) * w)

    assert grad_check(f, np.concatenate([[5.0, 8.0, 8.0], q0])) < 1e-3


def test_constant_texture_and_background():
    cfg = SoftRasterConfig(32, 32, sigma=0.005, background=(0.0, 0.0, 1.0))
    red = lambda u: np.tile([1.0, 0.0, 0.0], (len(u), 1))
    img, occ = rasterize_color(SPHERE, _cam(10.0, (16.0, 16.0)), red, cfg, return_mask=True)
    fg = occ.data > 1 - 1e-9
    assert fg.sum() > 100
    assert np.abs(img.data[fg] - [1.0, 0.0, 0.0]).max() < 1e-6
    empty = TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((3, 3)))
    np.testing.assert_array_equal(rasterize_color(empty, _cam(), red, cfg).data,
                                  np.broadcast_to([0.0, 0.0, 1.0], (32, 32, 3)))


def test_color_gradient_wrt_texture_flow(rng):
    cfg = SoftRasterConfig(16, 16)
    mesh = atlas_mesh(icosphere(1))
    space = build_texture_space(latent_dim=4, hidden=8, seed=2)
    image = rng.random((16, 16, 3))
    target = rng.random((16, 16, 3))
    cam = _cam(5.0, (8.0, 8.0), 0.4, 0.2)
    bias = space.flow_net.biases[-1]
    z = np.zeros(4)

    def f(b):
        saved = bias.data
        space.flow_net.biases[-1] = b
        try:
            img = rasterize_color(mesh, cam, texture_at(space, z, image), cfg)
        finally:
            space.flow_net.biases[-1] = bias
            bias.data = saved
        return ad.mean(ad.abs(img - target))

    assert grad_check(f, bias.data + 0.1) < 1e-3


def test_surface_coords_front_center():
    cfg = SoftRasterConfig(32, 32)
    cam = WeakPerspectiveCamera(12.0, [15.5, 15.5], IDENTITY_QUAT)  # sphere center on pixel (15, 15)
    buf = rasterize_surface_coords(atlas_mesh(icosphere(3)), cam, cfg)
    assert np.linalg.norm(buf.surface_coords[15, 15] - [0.0, 0.0, 1.0]) < 0.05
    assert not buf.valid[0, 0]
    norms = np.linalg.norm(buf.surface_coords[buf.valid], axis=1)
    assert np.abs(norms - 1).max() < 1e-6


def test_surface_coords_translation_equivariance():
    cfg = SoftRasterConfig(32, 32)
    a = rasterize_surface_coords(SPHERE, _cam(8.0, (14.0, 15.0)), cfg)
    b = rasterize_surface_coords(SPHERE, _cam(8.0, (17.0, 13.0)), cfg)
    shifted_valid = np.zeros_like(a.valid)
    shifted_valid[:-2, 3:] = a.valid[2:, :-3]
    assert np.array_equal(shifted_valid, b.valid)
    assert np.allclose(b.surface_coords[:-2, 3:], a.surface_coords[2:, :-3], atol=1e-12)


def test_distance_field_examples():
    mask = np.zeros((12, 12), dtype=bool)
    mask[5, 5] = True
    d = distance_field(mask)
    assert d[5, 5] == 0.0
    assert d[9, 5] == 4.0 and d[5, 9] == 4.0
    with pytest.raises(ContractError):
        distance_field(np.zeros((8, 8), dtype=bool))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_distance_field_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((16, 16)) < rng.uniform(0.02, 0.4)
    mask[rng.integers(16), rng.integers(16)] = True
    fg = np.argwhere(mask)
    grid = np.argwhere(np.ones((16, 16), dtype=bool))
    brute = np.sqrt(((grid[:, None, :] - fg[None, :, :]) ** 2).sum(-1).min(axis=1)).reshape(16, 16)
    assert np.array_equal(distance_field(mask), brute)


def test_lookup_distance_bilinear_and_outside():
    mask = np.zeros((10, 10), dtype=bool)
    mask[5, 5] = True
    field = distance_field(mask)
    vals = lookup_distance(field, np.array([[5.5, 9.5], [5.5, 7.0], [-2.5, 5.5]])).data
    assert vals[0] == pytest.approx(4.0)
    assert vals[1] == pytest.approx(0.5 * (field[6, 5] + field[7, 5]))
    assert vals[2] == pytest.approx(field[5, 0] + 3.0)


def test_boundary_pixels_examples():
    full = np.ones((6, 5), dtype=bool)
    ring = boundary_pixels(full)
    assert len(ring) == 2 * 6 + 2 * 5 - 4
    single = np.zeros((6, 6), dtype=bool)
    single[2, 3] = True
    np.testing.assert_array_equal(boundary_pixels(single), [[3.5, 2.5]])
    square = np.zeros((7, 7), dtype=bool)
    square[2:5, 2:5] = True
    b = boundary_pixels(square)
    assert len(b) == 8 and [3.5, 3.5] not in b.tolist()
    assert boundary_pixels(np.zeros((5, 5), dtype=bool)).shape == (0, 2)
