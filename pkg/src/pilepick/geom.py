"""Rigid-transform algebra: vectors, unit quaternions, poses.

Everything in this module is pure value math on numpy arrays.  Quaternions
use [qx, qy, qz, qw] order and are kept unit-norm with qw >= 0 (canonical
sign) by every constructor.  Poses serialize as 7 numbers
[px, py, pz, qx, qy, qz, qw] everywhere in the toolkit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_EPS_ANTIPODAL = 1e-8


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("vector components must be finite")
    return a


def normalize(v) -> np.ndarray:
    """Return v / |v|; raises on zero-length input."""
    a = _as_vec3(v)
    n = float(np.linalg.norm(a))
    if n == 0.0:
        raise ValueError("cannot normalize a zero-length vector")
    return a / n


def quat_canonical(q) -> np.ndarray:
    """Normalize a quaternion and flip sign so qw >= 0.

    Idempotent at the bit level: re-canonicalizing keeps every bit, so
    serialized poses round-trip exactly (norms within 1e-12 of 1 are not
    re-divided; a second normalization would shift the low bits).
    """
    a = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(a))
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("invalid quaternion")
    if abs(n - 1.0) > 1e-12:
        a = a / n
    if a[3] < 0.0:
        a = -a
    return a


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b in [x, y, z, w] order (not canonicalized)."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by quaternion q."""
    qv = np.asarray(q[:3], dtype=np.float64)
    w = float(q[3])
    v = np.asarray(v, dtype=np.float64)
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix -> canonical quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
        )
    return quat_canonical(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    ax = normalize(axis)
    half = 0.5 * float(angle)
    s = math.sin(half)
    return quat_canonical([ax[0] * s, ax[1] * s, ax[2] * s, math.cos(half)])


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rz(yaw) * Ry(pitch) * Rx(roll), angles in radians."""
    qx = quat_from_axis_angle([1, 0, 0], roll) if roll else np.array([0.0, 0, 0, 1])
    qy = quat_from_axis_angle([0, 1, 0], pitch) if pitch else np.array([0.0, 0, 0, 1])
    qz = quat_from_axis_angle([0, 0, 1], yaw) if yaw else np.array([0.0, 0, 0, 1])
    return quat_canonical(quat_multiply(qz, quat_multiply(qy, qx)))


def quat_angle(q) -> float:
    """Rotation angle of q in radians, in [0, pi]."""
    w = min(1.0, abs(float(q[3])))
    return 2.0 * math.acos(w)


def euler_from_quat(q) -> tuple[float, float, float]:
    """(roll, pitch, yaw) such that quat_from_euler round-trips the rotation.

    Decomposes R = Rz(yaw)*Ry(pitch)*Rx(roll); at the pitch = +-90 deg
    singularity roll is pinned to 0 and yaw absorbs the remaining turn.
    """
    m = quat_to_matrix(q)
    sp = -float(m[2, 0])
    sp = max(-1.0, min(1.0, sp))
    pitch = math.asin(sp)
    if abs(sp) < 1.0 - 1e-9:
        roll = math.atan2(float(m[2, 1]), float(m[2, 2]))
        yaw = math.atan2(float(m[1, 0]), float(m[0, 0]))
    else:
        roll = 0.0
        yaw = math.atan2(-float(m[0, 1]), float(m[1, 1]))
    return roll, pitch, yaw


@dataclass
class Pose:
    """Rigid transform: world position (m) plus canonical unit quaternion."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0, 0, 1]))

    def __post_init__(self):
        self.position = _as_vec3(self.position)
        self.orientation = quat_canonical(self.orientation)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_array(a) -> "Pose":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return Pose(a[:3], a[3:])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def apply(self, point) -> np.ndarray:
        """Map a point from this pose's local frame to the world frame."""
        return self.position + quat_rotate(self.orientation, point)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())


def compose(a: Pose, b: Pose) -> Pose:
    """Transform composition: compose(a, b).apply(x) == a.apply(b.apply(x))."""
    return Pose(
        a.position + quat_rotate(a.orientation, b.position),
        quat_multiply(a.orientation, b.orientation),
    )


def inverse(p: Pose) -> Pose:
    qi = quat_conjugate(p.orientation)
    return Pose(quat_rotate(qi, -p.position), qi)


def shortest_arc(v_from, v_to) -> np.ndarray:
    """Quaternion of minimal angle rotating direction v_from onto v_to.

    Inputs are normalized first.  For (near-)antipodal directions the
    rotation is 180 degrees about a deterministic axis: the candidate among
    {+X, +Y} most orthogonal to v_from (ties prefer +X), projected into the
    plane orthogonal to v_from so the arc lands exactly on v_to.
    """
    f = normalize(v_from)
    t = normalize(v_to)
    d = float(np.dot(f, t))
    if d < -1.0 + _EPS_ANTIPODAL:
        cand = np.array([1.0, 0, 0]) if abs(f[0]) <= abs(f[1]) else np.array([0.0, 1, 0])
        axis = normalize(cand - np.dot(cand, f) * f)
        return quat_canonical([axis[0], axis[1], axis[2], 0.0])
    axis = np.cross(f, t)
    # For unit inputs sqrt(|f|^2 * |t|^2) + f.t == 1 + d.
    return quat_canonical([axis[0], axis[1], axis[2], 1.0 + d])


def interpolate(a: Pose, b: Pose, t: float) -> Pose:
    """Linear position / spherical orientation interpolation, t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter {t} outside [0, 1]")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    pos = (1.0 - t) * a.position + t * b.position
    qa = a.orientation
    qb = b.orientation
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        q = (1.0 - t) * qa + t * qb
    else:
        theta = math.acos(min(1.0, dot))
        s = math.sin(theta)
        q = (math.sin((1.0 - t) * theta) / s) * qa + (math.sin(t * theta) / s) * qb
    return Pose(pos, q)


def apply_delta(p: Pose, translation, rotation_q) -> Pose:
    """Translate in the world frame and rotate about the pose's own origin."""
    return Pose(p.position + _as_vec3(translation), quat_multiply(rotation_q, p.orientation))
