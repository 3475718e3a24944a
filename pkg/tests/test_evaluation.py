import logging

import numpy as np
import pytest

from implicit_mesh.camera import WeakPerspectiveCamera, quat_from_view
from implicit_mesh.errors import ContractError, GeometryError
from implicit_mesh.geometry import TriMesh, atlas_mesh, ellipsoid_mesh, icosphere
from implicit_mesh.evaluation import (EvalReport, FittedView, cross_pairs, pck_reproject, pck_reproject_report,
                                      pck_transfer, reconstruction_iou, reprojected_keypoints, self_pairs,
                                      transfer_keypoints)
from implicit_mesh.losses import KeypointSet
from implicit_mesh.shape_space import ShapeSpace, build_shape_space
from implicit_mesh.storage import read_csv

from conftest import IdentityNet

SIZE = (48, 48)


def _sphere_space():
    return ShapeSpace(IdentityNet(), build_shape_space(latent_dim=4, hidden=8).deform_net, 4)


def _view(az=0.3, el=0.25, scale=16.0, vid="a", sid="s0", space=None):
    cam = WeakPerspectiveCamera(scale, np.array([24.0, 24.0]), quat_from_view(az, el))
    return FittedView(vid, sid, space or _sphere_space(), np.zeros(4), cam, SIZE)


def _front_points(view, n, rng):
    """Canonical points facing the camera of ``view``."""
    r = view.camera.matrix()
    out = []
    while len(out) < n:
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        if (r @ u)[2] > 0.4:
            out.append(u)
    return np.array(out)


def _exact_kps(view, canon):
    kps = KeypointSet(canon, np.zeros((len(canon), 2)), np.ones(len(canon), bool))
    kps.observed = reprojected_keypoints(view, kps)
    return kps


# ----------------------------------------------------------------------------
# reprojection


def test_pck_reproject_ground_truth_fit(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 10, rng))
    assert pck_reproject(view, kps, 0.1) == 100.0
    assert pck_reproject(view, kps, 0.0) == 100.0  # errors of zero pass a zero threshold


def test_pck_reproject_displaced(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 10, rng))
    kps.observed = kps.observed + [0.1 * 48 + 0.5, 0.0]
    assert pck_reproject(view, kps, 0.1) == 0.0


def test_pck_reproject_monotone_in_threshold(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 30, rng))
    kps.observed = kps.observed + rng.normal(0, 4, kps.observed.shape)
    values = [pck_reproject(view, kps, t) for t in np.linspace(0, 0.3, 16)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[0] == 0.0 and values[-1] == 100.0


def test_pck_reproject_visibility(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 6, rng))
    kps.observed[0] += 100.0
    kps.visible[0] = False
    assert pck_reproject(view, kps, 0.05) == 100.0
    kps.visible[:] = False
    with pytest.raises(ContractError):
        pck_reproject(view, kps)


def test_pck_reproject_report_skips_missing(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 5, rng))
    report = pck_reproject_report({"a": view}, {"a": kps, "b": kps, "c": None})
    assert report.values == {"a": 100.0} and report.counts == {"a": 5}


# ----------------------------------------------------------------------------
# transfer


def test_self_transfer_identity(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 12, rng))
    pred, found = transfer_keypoints(view, view, kps.observed)
    assert found.all()
    centers = np.floor(kps.observed) + 0.5
    assert np.linalg.norm(pred - centers, axis=1).max() == 0.0
    assert np.linalg.norm(pred - kps.observed, axis=1).max() < 1.0
    report = pck_transfer({"a": view}, {"a": kps}, self_pairs(["a"]))
    assert report.values == {"a->a": 100.0}


def test_two_view_transfer_of_one_shape(rng):
    src = _view(az=0.3, vid="a")
    tgt = _view(az=0.6, el=0.35, vid="b")
    canon = _front_points(src, 40, rng)
    canon = canon[(canon @ tgt.camera.matrix().T)[:, 2] > 0.4]
    assert len(canon) >= 10
    s_kps, t_kps = _exact_kps(src, canon), _exact_kps(tgt, canon)
    pred, found = transfer_keypoints(src, tgt, s_kps.observed)
    assert found.all()
    assert np.linalg.norm(pred - t_kps.observed, axis=1).max() < 3.0


def test_transfer_misses_far_points(rng):
    view = _view()
    pred, found = transfer_keypoints(view, view, np.array([[1.0, 1.0], [24.2, 24.7]]))
    assert list(found) == [False, True]
    assert np.all(np.isnan(pred[0]))


def test_transfer_symmetry_plane_logged(caplog):
    cam = WeakPerspectiveCamera(16.0, np.array([23.5, 24.0]), quat_from_view(0.0, 0.0))
    view = FittedView("a", "s0", _sphere_space(), np.zeros(4), cam, SIZE)  # x = 0 at pixel column 23
    with caplog.at_level(logging.INFO, logger="implicit_mesh.evaluation"):
        transfer_keypoints(view, view, np.array([[23.7, 24.2]]))
    assert "symmetry plane" in caplog.text


def test_transfer_empty_target():
    view = _view(scale=16.0)
    off = FittedView("off", "s1", view.space, view.z_s,
                     WeakPerspectiveCamera(16.0, np.array([500.0, 500.0]), quat_from_view(0, 0)), SIZE)
    with pytest.raises(GeometryError):
        transfer_keypoints(view, off, np.array([[24.0, 24.0]]))


def test_pair_helpers():
    views = {"a": _view(vid="a", sid="s0"), "b": _view(vid="b", sid="s0"), "c": _view(vid="c", sid="s1")}
    assert self_pairs(["a", "b"]) == [("a", "a"), ("b", "b")]
    assert cross_pairs(views) == [("a", "c"), ("b", "c"), ("c", "a"), ("c", "b")]


def test_pck_transfer_requires_shared_keypoints(rng):
    view = _view()
    kps = _exact_kps(view, _front_points(view, 3, rng))
    none = KeypointSet(kps.canonical, kps.observed, np.zeros(3, bool))
    with pytest.raises(ContractError):
        pck_transfer({"a": view, "b": view}, {"a": kps, "b": none}, [("a", "b")])


# ----------------------------------------------------------------------------
# reconstruction


def test_iou_of_ground_truth_is_one():
    mesh = ellipsoid_mesh((0.6, 0.4, 1.0))
    report = reconstruction_iou({"s0": mesh}, {"s0": mesh})
    assert report.values == {"s0": 1.0} and report.mean == 1.0


def test_iou_of_squashed_shape():
    mesh = atlas_mesh(icosphere(3))
    squashed = TriMesh(mesh.vertices * [1.0, 1.0, 0.7], mesh.faces)
    iou = reconstruction_iou({"s": squashed}, {"s": mesh}).values["s"]
    assert 0.5 < iou < 1.0
    assert iou == pytest.approx(0.7, abs=0.05)


def test_iou_needs_common_shapes():
    mesh = atlas_mesh(icosphere(2))
    with pytest.raises(ContractError):
        reconstruction_iou({"a": mesh}, {"b": mesh})


# ----------------------------------------------------------------------------
# reports


def test_report_summary_and_csv(tmp_path):
    report = EvalReport("PCK-R", {"a": 100.0, "b": 50.0}, 0.1, {"a": 4, "b": 2}, "threshold x max(H, W) pixels")
    text = report.summary()
    assert text.splitlines()[0] == "== PCK-R @ 0.1 (threshold x max(H, W) pixels)"
    assert "mean 75.0000 over 2 entries" in text
    path = report.to_csv(tmp_path / "r.csv")
    first = path.read_text().splitlines()[0]
    assert first.startswith("# implicit_mesh eval PCK-R threshold=0.1")
    rows = read_csv(path, required=("id", "PCK-R", "count"))
    assert [r["id"] for r in rows] == ["a", "b", "mean"]
    assert float(rows[-1]["PCK-R"]) == 75.0 and rows[-1]["count"] == "6"


def test_empty_report_mean_is_nan():
    assert np.isnan(EvalReport("IoU", {}).mean)
