"""Geometry kernels for flow matching on SO(3) x R^3.

Everything here is float64 numpy and vectorised over leading axes: a rotation
is an array of shape ``(..., 3, 3)`` and a tangent vector ``(..., 3)``.

Tangent vectors are expressed in the spatial (world) frame, i.e. moving from
``base`` along ``w`` gives ``expm(hat(w)) @ base``. With that convention a
fragment posed by ``R`` spins about its own centroid with angular velocity
``w`` measured in the assembled frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CutLocusError, DegenerateGeometry, TimeOutOfRange

# Below this angle exp/log switch to their Taylor expansions.
SMALL_ANGLE = 1e-6
# log raises when the rotation angle is within this of pi (axis sign undefined).
CUT_LOCUS_TOL = 1e-6
# Flow targets divide by (1 - t); t is not allowed closer to 1 than this.
TIME_EPS = 1e-4


@dataclass
class PoseState:
    """Rotation + translation; arrays may carry a leading batch axis."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points ``(..., P, 3)`` through ``x -> R x + a``."""
        return points @ np.swapaxes(self.rotation, -1, -2) + self.translation[..., None, :]

    def inverse(self) -> "PoseState":
        rt = np.swapaxes(self.rotation, -1, -2)
        return PoseState(rt, -np.einsum("...ij,...j->...i", rt, self.translation))

    def __getitem__(self, idx) -> "PoseState":
        return PoseState(self.rotation[idx], self.translation[idx])

    def __len__(self) -> int:
        return self.rotation.shape[0]

    @classmethod
    def identity(cls, n: int | None = None) -> "PoseState":
        if n is None:
            return cls(np.eye(3), np.zeros(3))
        return cls(np.tile(np.eye(3), (n, 1, 1)), np.zeros((n, 3)))

    @classmethod
    def stack(cls, poses) -> "PoseState":
        poses = list(poses)
        return cls(np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses]))


@dataclass
class FlowTarget:
    rot_target: np.ndarray
    trans_target: np.ndarray


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_map(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula, ``so(3) -> SO(3)`` at the identity."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    k = hat(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_map(r: np.ndarray) -> np.ndarray:
    """Rotation vector of ``r`` (inverse of :func:`exp_map`), angle in ``[0, pi)``.

    Raises CutLocusError when the angle is within ``CUT_LOCUS_TOL`` of pi.
    """
    r = np.asarray(r, dtype=np.float64)
    cos = np.clip((np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * vee(r - np.swapaxes(r, -1, -2))  # sin(theta) * axis
    sin = np.linalg.norm(s, axis=-1)
    theta = np.arctan2(sin, cos)
    if np.any(np.pi - theta < CUT_LOCUS_TOL):
        raise CutLocusError("rotation angle is at the cut locus (pi); log map is not unique")

    small = theta < SMALL_ANGLE
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / np.where(small, 1.0, sin))
    out = s * scale[..., None]

    # Near pi sin(theta) loses relative precision, recover the axis from the
    # symmetric part instead and take only its sign from the skew part.
    near_pi = cos < -0.9
    if np.any(near_pi):
        rn, cn, sn, tn = r[near_pi], cos[near_pi], s[near_pi], theta[near_pi]
        sym = 0.5 * (rn + np.swapaxes(rn, -1, -2)) - cn[:, None, None] * np.eye(3)
        diag = np.diagonal(sym, axis1=-2, axis2=-1)
        j = np.argmax(diag, axis=-1)
        col = np.take_along_axis(sym, j[:, None, None].repeat(3, axis=1), axis=2)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.where(np.einsum("...i,...i->...", axis, sn) < 0, -1.0, 1.0)
        out[near_pi] = axis * (sign * tn)[:, None]
    return out


def so3_exp(tangent: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Move from ``base`` along the spatial tangent vector ``tangent``."""
    return exp_map(tangent) @ np.asarray(base, dtype=np.float64)


def so3_log(target: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Spatial tangent vector at ``base`` pointing to ``target``; its norm is the geodesic distance."""
    base = np.asarray(base, dtype=np.float64)
    return log_map(np.asarray(target, dtype=np.float64) @ np.swapaxes(base, -1, -2))


def geodesic_distance(r0: np.ndarray, r1: np.ndarray) -> np.ndarray:
    """Angle of ``r1 r0^T`` in radians; well defined on the whole group."""
    rel = np.asarray(r1) @ np.swapaxes(np.asarray(r0), -1, -2)
    cos = np.clip((np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    sin = np.linalg.norm(0.5 * vee(rel - np.swapaxes(rel, -1, -2)), axis=-1)
    return np.arctan2(sin, cos)


def _time_array(t, like: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(t, dtype=np.float64), like.shape[:-1])


def geodesic_interp(r0, r1, a0, a1, t) -> PoseState:
    """Point at time ``t`` on the constant-speed path from ``(r0, a0)`` to ``(r1, a1)``."""
    a0 = np.asarray(a0, dtype=np.float64)
    a1 = np.asarray(a1, dtype=np.float64)
    tt = _time_array(t, a0)
    w = so3_log(r1, r0)
    rot = so3_exp(tt[..., None] * w, r0)
    trans = (1.0 - tt)[..., None] * a0 + tt[..., None] * a1
    # exact endpoint at t == 0
    at_start = tt == 0.0
    if np.any(at_start):
        rot = np.where(at_start[..., None, None], r0, rot)
        trans = np.where(at_start[..., None], a0, trans)
    return PoseState(rot, trans)


def flow_targets(pose_t: PoseState, pose_1: PoseState, t) -> FlowTarget:
    """Conditional velocities ``log_{r_t}(r_1) / (1 - t)`` and ``(a_1 - a_t) / (1 - t)``."""
    tt = _time_array(t, pose_t.translation)
    if np.any(tt >= 1.0 - TIME_EPS):
        raise TimeOutOfRange(f"flow targets need t < {1.0 - TIME_EPS}")
    denom = (1.0 - tt)[..., None]
    u = so3_log(pose_1.rotation, pose_t.rotation) / denom
    v = (pose_1.translation - pose_t.translation) / denom
    return FlowTarget(u, v)


def euler_step_pose(pose: PoseState, target: FlowTarget, dt: float) -> PoseState:
    rot = so3_exp(dt * np.asarray(target.rot_target, dtype=np.float64), pose.rotation)
    return PoseState(rot, pose.translation + dt * np.asarray(target.trans_target, dtype=np.float64))


def rigid_fit(src: np.ndarray, dst: np.ndarray) -> PoseState:
    """Least-squares rotation + translation taking ``src`` onto ``dst`` (Kabsch)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 points")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - cs, dst - cd
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateGeometry("source points are collinear or coincident")
    u, _, vt = np.linalg.svd(xs.T @ xd)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return PoseState(rot, cd - rot @ cs)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return out.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    r = np.asarray(r, dtype=np.float64)
    flat = r.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        else:
            k = int(np.argmax(np.diag(m)))
            i1, i2 = (k + 1) % 3, (k + 2) % 3
            s = 2.0 * np.sqrt(1.0 + m[k, k] - m[i1, i1] - m[i2, i2])
            q = [0.0] * 4
            q[0] = (m[i2, i1] - m[i1, i2]) / s
            q[1 + k] = 0.25 * s
            q[1 + i1] = (m[i1, k] + m[k, i1]) / s
            q[1 + i2] = (m[i2, k] + m[k, i2]) / s
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(r.shape[:-2] + (4,))


def sample_uniform_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotations from normalised Gaussian quaternions."""
    shape = (4,) if size is None else (size, 4)
    return quaternion_to_matrix(rng.standard_normal(shape))


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
