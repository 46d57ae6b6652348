"""Unit-quaternion and rotation-matrix algebra on the unit 3-sphere.

Conventions used everywhere in this package:

* Quaternions are scalar-first ``[w, x, y, z]`` float64 arrays.  All
  functions accept arbitrary leading batch shape ``(..., 4)`` and broadcast.
* The canonical representative of the pair ``{q, -q}`` has ``w > 0``, or
  ``w == 0`` and the first nonzero of ``(x, y, z)`` positive.  Working in
  this half-space removes the double cover of 3D rotations.
* Rotation matrices are 3x3 with orthonormal columns and determinant +1.
* Angular velocities are body-frame, radians per unit flow time.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInput, ZeroNorm

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_SLERP_EPS = 1e-7
_OMEGA_EPS = 1e-10


def canonicalize(q) -> np.ndarray:
    """Normalize a raw 4-vector and flip it into the canonical half-space.

    ``canonicalize(q)`` and ``canonicalize(-q)`` are identical by
    construction.  Raises ``ZeroNorm`` when the norm is at or below 1e-12.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise ZeroNorm("quaternion norm below 1e-12")
    # Skipping the division for inputs already at unit norm keeps the
    # function exactly idempotent (renormalizing would drift by 1 ulp).
    u = np.where(np.abs(norm - 1.0) > 1e-14, q / norm, q)
    # Sign of the first nonzero component decides the flip; -0.0 compares
    # equal to 0.0 so it falls through to the next component.
    nonzero = u != 0.0
    first = np.argmax(nonzero, axis=-1)
    lead = np.take_along_axis(u, first[..., None], axis=-1)
    u = np.where(lead < 0.0, -u, u)
    # Adding 0.0 maps -0.0 entries to +0.0 so antipodes match bit for bit.
    return u + 0.0


def hamilton(q1, q2) -> np.ndarray:
    """Hamilton product q1 * q2, returned as a raw 4-vector."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def conjugate(q) -> np.ndarray:
    """(w, x, y, z) -> (w, -x, -y, -z)."""
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def slerp(q_eps, q_t, tau) -> np.ndarray:
    """Spherical linear interpolation between canonical unit quaternions.

    Follows the constant-speed geodesic

        sin((1 - tau) * theta) / sin(theta) * q_eps
            + sin(tau * theta) / sin(theta) * q_t

    with theta = arccos(q_eps . q_t), dot clamped to [-1, 1].  When
    sin(theta) < 1e-7 the expression is 0/0 and we fall back to normalized
    linear interpolation, its limit.  Output is canonicalized.
    """
    q_eps = np.asarray(q_eps, dtype=float)
    q_t = np.asarray(q_t, dtype=float)
    tau = np.asarray(tau, dtype=float)[..., None]
    dot = np.clip(np.sum(q_eps * q_t, axis=-1, keepdims=True), -1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    near = sin_theta < _SLERP_EPS
    safe_sin = np.where(near, 1.0, sin_theta)
    geo = (np.sin((1.0 - tau) * theta) * q_eps + np.sin(tau * theta) * q_t) / safe_sin
    lin = (1.0 - tau) * q_eps + tau * q_t
    return canonicalize(np.where(near, lin, geo))


def geodesic_angle(q1, q2) -> np.ndarray:
    """Rotation angle between two quaternions: 2 * arccos(min(1, |q1.q2|)).

    Antipode-invariant, range [0, pi].  Evaluated through the chord length
    min |q1 -+ q2| = 2 sin(arccos|q1.q2| / 2), which is the same function
    but stays exact where arccos is ill-conditioned (coincident or
    antipodal inputs).
    """
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    chord = np.minimum(
        np.linalg.norm(q1 - q2, axis=-1), np.linalg.norm(q1 + q2, axis=-1)
    )
    return 4.0 * np.arcsin(np.minimum(1.0, 0.5 * chord))


def angular_velocity(q, q_dot) -> np.ndarray:
    """Body-frame angular velocity: 2 * Im(conjugate(q) * q_dot)."""
    prod = hamilton(conjugate(q), np.asarray(q_dot, dtype=float))
    return 2.0 * prod[..., 1:]


def integrate_quat(q, q_dot, dt) -> np.ndarray:
    """Advance q along the rotation implied by the 4-vector velocity q_dot.

    Builds the body angular velocity, converts it to a delta quaternion

        dq = [cos(dphi / 2), axis * sin(dphi / 2)],  dphi = |omega| * dt,

    and returns canonicalize(q * dq).  Velocities with |omega| < 1e-10
    leave q unchanged.
    """
    q = np.asarray(q, dtype=float)
    dt = np.asarray(dt, dtype=float)[..., None]
    omega = angular_velocity(q, q_dot)
    speed = np.linalg.norm(omega, axis=-1, keepdims=True)
    small = speed < _OMEGA_EPS
    safe = np.where(small, 1.0, speed)
    half = 0.5 * safe * dt
    dq = np.concatenate([np.cos(half), (omega / safe) * np.sin(half)], axis=-1)
    stepped = canonicalize(hamilton(q, dq))
    return np.where(small, q, stepped)


def sample_uniform_quat(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform canonical quaternions via a normalized 4D Gaussian draw.

    ``size`` follows numpy conventions for the leading shape; the result has
    trailing dimension 4.
    """
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    return canonicalize(rng.standard_normal(shape))


def gram_schmidt_rotation(m) -> np.ndarray:
    """Orthonormalize the first two columns of m into a rotation matrix.

    Accepts a (3, 2) or (3, 3) array; the third column, if present, is
    ignored and rebuilt as the cross product.  Raises ``DegenerateInput``
    when the columns are (near-)parallel.
    """
    m = np.asarray(m, dtype=float)
    if m.shape not in ((3, 2), (3, 3)):
        raise DegenerateInput(f"expected (3,2) or (3,3) columns, got {m.shape}")
    a, b = m[:, 0], m[:, 1]
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateInput("zero-length column")
    e1 = a / na
    r = b - (e1 @ b) * e1
    # |r| / |b| = sin(angle between columns); reject below ~1e-6 rad.
    if np.linalg.norm(r) <= 1e-6 * nb:
        raise DegenerateInput("columns are parallel")
    e2 = r / np.linalg.norm(r)
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3])


def quat_to_matrix(q) -> np.ndarray:
    """Convert a unit quaternion to a 3x3 rotation matrix."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def matrix_to_quat(r) -> np.ndarray:
    """Convert a rotation matrix to the canonical unit quaternion."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise DegenerateInput(f"expected a 3x3 matrix, got {r.shape}")
    t = np.trace(r)
    if t > 0:
        s = 2.0 * np.sqrt(t + 1.0)
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return canonicalize(q)


def axis_angle_quat(axis, angle) -> np.ndarray:
    """Canonical quaternion for a rotation of ``angle`` about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)[..., None]
    return canonicalize(
        np.concatenate([np.cos(angle / 2), axis * np.sin(angle / 2)], axis=-1)
    )
