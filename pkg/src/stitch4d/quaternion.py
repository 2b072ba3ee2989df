"""Quaternion helpers shared by the camera and Gaussian-scene modules.

Convention: quaternions are (w, x, y, z) with the Hamilton product, and a unit
quaternion q maps body/camera-frame vectors into the parent frame through
``rotation_matrix(q)``.  All functions accept either a single quaternion of
shape (4,) or a batch of shape (N, 4) and broadcast accordingly.

The exponential map ``quat_exp`` and every Jacobian here have explicit
small-angle branches so that gradients stay finite (and correct) at zero
rotation, which matters because the renderer differentiates through
``quat_exp(ang_vel * dt)`` at dt == 0.
"""

from __future__ import annotations

import numpy as np


def normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Raises ValueError on a zero-norm quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def left_matrix(a: np.ndarray) -> np.ndarray:
    """4x4 matrix L(a) with multiply(a, b) == L(a) @ b."""
    aw, ax, ay, az = a
    return np.array(
        [
            [aw, -ax, -ay, -az],
            [ax, aw, -az, ay],
            [ay, az, aw, -ax],
            [az, -ay, ax, aw],
        ]
    )


def right_matrix(b: np.ndarray) -> np.ndarray:
    """4x4 matrix R(b) with multiply(a, b) == R(b) @ a."""
    bw, bx, by, bz = b
    return np.array(
        [
            [bw, -bx, -by, -bz],
            [bx, bw, bz, -by],
            [by, -bz, bw, bx],
            [bz, by, -bx, bw],
        ]
    )


def rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (polynomial form, no renorm).

    For batched input (N, 4) returns (N, 3, 3).  The caller is responsible
    for normalizing q; the polynomial below is only a rotation for |q| = 1.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def rotation_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """d rotation_matrix / d q for the unit-quaternion polynomial.

    Returns an array of shape (..., 4, 3, 3): component m holds dR/dq_m.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dx = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    return np.stack([dw, dx, dy, dz], axis=-3)


_SMALL_ANGLE = 1e-6


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Axis-angle vector -> unit quaternion (cos(t/2), sin(t/2) * v/t).

    Uses a series expansion of sin(t/2)/t below the small-angle threshold so
    the map and its Jacobian are smooth through v = 0.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    half = 0.5 * theta
    # s(theta) = sin(theta/2)/theta; series 1/2 - theta^2/48 + theta^4/3840
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    w = np.cos(half)
    return np.concatenate([w[..., None], s[..., None] * v], axis=-1)


def quat_exp_jacobian(v: np.ndarray) -> np.ndarray:
    """d quat_exp(v) / d v, shape (..., 4, 3)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half = 0.5 * theta
    s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(half) / safe)
    # s'(theta) = (theta/2 cos(theta/2) - sin(theta/2)) / theta^2,
    # series: -theta/24 + theta^3/960
    sp = np.where(small, -theta / 24.0, (half * np.cos(half) - np.sin(half)) / safe**2)
    vhat = v / safe[..., None]  # zero-safe: multiplied by terms that vanish at 0
    jac = np.zeros(v.shape[:-1] + (4, 3), dtype=np.float64)
    # dw/dv = -1/2 sin(theta/2) * vhat
    jac[..., 0, :] = -0.5 * np.sin(half)[..., None] * vhat
    eye = np.eye(3)
    jac[..., 1:, :] = s[..., None, None] * eye + sp[..., None, None] * (
        v[..., :, None] * vhat[..., None, :]
    )
    return jac


def from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about unit `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    return quat_exp(axis / np.linalg.norm(axis) * angle)


def identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])
