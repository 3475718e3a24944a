"""Weak perspective cameras and multi-hypothesis pose sets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ----------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_view(azimuth, elevation):
    """Rotation taking object coordinates to camera coordinates: Rx(elev) Ry(azim)."""
    qa = quat_from_axis_angle([0, 1, 0], azimuth)
    qe = quat_from_axis_angle([1, 0, 0], elevation)
    return quat_mul(qe, qa)


def _check_unit(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    drift = abs(n - 1.0)
    if drift >= 1e-4:
        raise ContractError(f"quaternion norm {n:.6g} is not unit")
    if drift > 1e-12:
        log.warning("renormalizing quaternion with norm drift %.3g", drift)
        q = q / n
    return q


def rotate(q, p):
    """Sandwich product q p q^-1 for a unit quaternion."""
    q = _check_unit(q)
    p = np.asarray(p, dtype=np.float64)
    flat = p.reshape(-1, 3)
    out = np.empty_like(flat)
    qc = quat_conj(q)
    for i, v in enumerate(flat):
        out[i] = quat_mul(quat_mul(q, np.concatenate([[0.0], v])), qc)[1:]
    return out.reshape(p.shape)


def quat_to_matrix_np(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def _unit_quat_matrix_jac(q):
    # d R_ij / d q_k for a unit quaternion, shape (..., 3, 3, 4)
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)
    rows = [
        [zero, zero, -4 * y, -4 * z], [-2 * z, 2 * y, 2 * x, -2 * w], [2 * y, 2 * z, 2 * w, 2 * x],
        [2 * z, 2 * y, 2 * x, 2 * w], [zero, -4 * x, zero, -4 * z], [-2 * x, -2 * w, 2 * z, 2 * y],
        [-2 * y, 2 * z, -2 * w, 2 * x], [2 * x, 2 * w, 2 * z, 2 * y], [zero, -4 * x, -4 * y, zero],
    ]
    j = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)
    return j.reshape(q.shape[:-1] + (3, 3, 4))


def quat_to_matrix(q) -> Tensor:
    """Differentiable rotation matrix of ``q / |q|`` for quaternions of shape (..., 4)."""
    q = ad.as_tensor(q)
    qd = q.data
    norm = np.linalg.norm(qd, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("zero quaternion")
    qn = qd / norm
    r = quat_to_matrix_np(qn)
    jac = _unit_quat_matrix_jac(qn)

    def vjp(g):
        gqn = np.einsum("...ij,...ijk->...k", g, jac)
        # project through the normalization q -> q/|q|
        radial = np.sum(gqn * qn, axis=-1, keepdims=True)
        return ((gqn - radial * qn) / norm,)

    return ad.custom_op(r, "quat_to_matrix", (q,), vjp)


# ----------------------------------------------------------------------------
# cameras


@dataclass
class WeakPerspectiveCamera:
    """Scaled orthographic camera: rotate, drop depth, scale, translate in-plane.

    Fields may be plain arrays or tensors; ``translation`` is in pixels and
    ``rotation`` is a (w, x, y, z) quaternion.
    """

    scale: object
    translation: object
    rotation: object

    def __post_init__(self):
        if not isinstance(self.scale, Tensor) and not float(self.scale) > 0:
            raise ContractError(f"camera scale must be positive, got {self.scale}")
        if not isinstance(self.rotation, Tensor):
            self.rotation = _check_unit(self.rotation)
        if not isinstance(self.translation, Tensor):
            self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)

    def to_record(self):
        """(s, tx, ty, qw, qx, qy, qz)."""
        s = ad.as_tensor(self.scale).data.reshape(())
        t = ad.as_tensor(self.translation).data.reshape(2)
        q = ad.as_tensor(self.rotation).data.reshape(4)
        return [float(s), float(t[0]), float(t[1])] + [float(v) for v in q]

    @classmethod
    def from_record(cls, rec):
        rec = [float(v) for v in rec]
        if len(rec) != 7:
            raise ContractError(f"camera record needs 7 numbers, got {len(rec)}")
        q = np.array(rec[3:])
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-12:  # hand-written records; stored unit quaternions load bit-exact
            q = q / n
        return cls(rec[0], np.array(rec[1:3]), q)

    def matrix(self):
        return quat_to_matrix_np(ad.as_tensor(self.rotation).data)


def transform(cam: WeakPerspectiveCamera, points):
    """Camera-frame points: (..., N, 3) rotated, without projection."""
    r = quat_to_matrix(cam.rotation)
    p = ad.as_tensor(points)
    return ad.matmul(p, ad.transpose(r) if r.ndim == 2 else ad.transpose(r, (0, 2, 1)))


def project(cam: WeakPerspectiveCamera, points, with_depth=False):
    """Project (N, 3) points to pixels: ``s * R(q) P [:2] + t``.

    Batched cameras (scale (K,), translation (K, 2), rotation (K, 4)) give
    (K, N, 2).  With ``with_depth`` also returns the camera-frame z, where
    larger z is closer to the viewer.
    """
    cp = transform(cam, points)
    s = ad.as_tensor(cam.scale)
    t = ad.as_tensor(cam.translation)
    xy = cp[..., :2]
    if s.ndim == 1:
        s = ad.reshape(s, (-1, 1, 1))
        t = ad.reshape(t, (-1, 1, 2))
    uv = xy * s + t
    if with_depth:
        return uv, cp[..., 2]
    return uv


def geodesic_error(q1, q2):
    """Rotation angle between two unit quaternions, in [0, pi]."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    q1 = q1 / np.linalg.norm(q1)
    q2 = q2 / np.linalg.norm(q2)
    d = min(abs(float(np.dot(q1, q2))), 1.0)
    return 2.0 * math.acos(d)


def silhouette_twin(q):
    """Rotation ``diag(1, 1, -1) R(q) diag(-1, 1, 1)`` as a quaternion.

    For any shape symmetric under x -> -x both rotations project to the same
    silhouette, so masks alone cannot tell them apart.
    """
    q = np.asarray(q, dtype=np.float64)
    reflected = q * np.array([1.0, -1.0, -1.0, 1.0])  # conjugation by the z reflection
    return quat_mul(reflected, np.array([0.0, 0.0, 1.0, 0.0]))  # then a half turn about y


def rotation_error_up_to_twin(q_est, q_true):
    """Geodesic error to ``q_true`` or to its silhouette twin, whichever is smaller."""
    return min(geodesic_error(q_est, q_true), geodesic_error(q_est, silhouette_twin(q_true)))


# ----------------------------------------------------------------------------
# hypothesis sets


@dataclass
class CameraHypothesisSet:
    cameras: list
    logits: object

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ContractError("a hypothesis set needs at least one camera")
        if ad.as_tensor(self.logits).shape != (len(self.cameras),):
            raise ContractError("one logit per hypothesis is required")

    def probabilities(self):
        return ad.softmax(ad.as_tensor(self.logits)).data

    def best(self):
        return self.cameras[int(np.argmax(ad.as_tensor(self.logits).data))]


def expected_loss(hyps: CameraHypothesisSet, loss_of_camera):
    """Softmax-weighted sum of per-hypothesis losses."""
    losses = []
    for i, cam in enumerate(hyps.cameras):
        li = ad.as_tensor(loss_of_camera(cam))
        if not np.all(np.isfinite(li.data)):
            raise NumericError(f"non-finite loss for camera hypothesis {i}")
        losses.append(ad.reshape(li, ()))
    return expected_from_losses(hyps.logits, ad.stack(losses))


def expected_from_losses(logits, losses):
    """Softmax(logits)-weighted sum of a loss vector."""
    losses = ad.as_tensor(losses)
    if not np.all(np.isfinite(losses.data)):
        bad = int(np.flatnonzero(~np.isfinite(losses.data))[0])
        raise NumericError(f"non-finite loss for camera hypothesis {bad}")
    return ad.sum(ad.softmax(ad.as_tensor(logits)) * losses)


def initial_rotations(n=8, elevation_deg=10.0):
    """Equispaced azimuths at a fixed elevation."""
    elev = math.radians(elevation_deg)
    return np.array([quat_from_view(2 * math.pi * i / n, elev) for i in range(n)])
