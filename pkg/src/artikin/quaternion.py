"""Quaternion helpers.

Conventions: scalar-first ``(w, x, y, z)``, Hamilton product, active
right-handed rotations. All functions accept a single quaternion of shape
``(4,)`` or a batch of shape ``(N, 4)``.
"""
import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / n


def multiply(a, b):
    """Hamilton product ``a ⊗ b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def right_matrix(q):
    """Matrix ``M(q)`` with ``p ⊗ q == M(q) @ p`` for any quaternion ``p``."""
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ])


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def to_matrix(q):
    """Rotation matrix of a unit quaternion (batched over leading axes)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def from_matrix(R):
    """Unit quaternion (w >= 0) of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        r = np.sqrt(1.0 + tr)
        q = np.array([0.5 * r, (R[2, 1] - R[1, 2]) / (2 * r),
                      (R[0, 2] - R[2, 0]) / (2 * r), (R[1, 0] - R[0, 1]) / (2 * r)])
    else:
        i = k - 1
        j, m = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[m, m])
        v = np.zeros(3)
        v[i] = 0.5 * r
        v[j] = (R[j, i] + R[i, j]) / (2 * r)
        v[m] = (R[m, i] + R[i, m]) / (2 * r)
        w = (R[m, j] - R[j, m]) / (2 * r)
        q = np.concatenate([[w], v])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternion(s) ``q``."""
    return np.einsum("...ij,...j->...i", to_matrix(q), np.asarray(v, dtype=float))
