"""SE(3) primitives: poses, exp/log maps, geodesic interpolation, BCH Jacobians.

Twist layout is (tx, ty, tz, rx, ry, rz): translational part in meters first,
rotational part in radians second. All perturbations are left-multiplicative,
T' = exp(xi) @ T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotationError, OutOfRangeError

# Below this angle the closed forms are replaced by their series expansions.
SMALL_ANGLE = 1e-8
# log() rejects rotations closer to pi than this; the axis becomes ambiguous.
PI_MARGIN = 1e-6


def skew(v):
    """3-vector -> skew-symmetric matrix such that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def unskew(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rot_coeffs(theta):
    """Rodrigues coefficients (a, b, c): R = I + a K + b K^2, V = I + b K + c K^2."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    t2 = theta * theta
    return s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta)


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _rot_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot):
    """Rotation matrix -> rotation vector. Raises near the pi singularity."""
    rot = np.asarray(rot, dtype=float)
    w = unskew((rot - rot.T) / 2.0)  # axis * sin(theta)
    s = float(np.linalg.norm(w))
    c = (float(np.trace(rot)) - 1.0) / 2.0
    theta = float(np.arctan2(s, c))
    if theta >= np.pi - PI_MARGIN:
        raise DegenerateRotationError(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        return w  # sin(theta)/theta ~ 1
    return w * (theta / s)


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    _, b, c = _rot_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta * theta / 720.0
    else:
        # 1/theta^2 - cot(theta/2)/(2 theta); stable through theta = pi.
        half = theta / 2.0
        coeff = 1.0 / (theta * theta) - np.cos(half) / (2.0 * theta * np.sin(half))
    return np.eye(3) - 0.5 * k + coeff * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping child-frame points into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray
    frame: str = field(default="", compare=False)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose entries")
        # Loose guard; unit outputs are orthonormal to 1e-9, long chains may
        # drift and should go through orthonormalized().
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValueError("rotation determinant far from +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(frame: str = ""):
        return Pose(np.eye(3), np.zeros(3), frame)

    @staticmethod
    def from_matrix(m, frame: str = ""):
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3], m[:3, 3], frame)

    @staticmethod
    def from_quat(qw, qx, qy, qz, t=(0.0, 0.0, 0.0), frame: str = ""):
        """Unit quaternion (scalar first) -> Pose; normalizes the input."""
        q = np.array([qw, qx, qy, qz], dtype=float)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        w, x, y, z = q / n
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return Pose(r, np.asarray(t, dtype=float), frame)

    def to_quat(self):
        """Rotation -> unit quaternion (qw, qx, qy, qz), qw >= 0."""
        r = self.rotation
        tr = np.trace(r)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2.0
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
            )
        else:
            i = int(np.argmax(np.diag(r)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (r[k, j] - r[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (r[j, i] + r[i, j]) / s
            q[1 + k] = (r[k, i] + r[i, k]) / s
        if q[0] < 0:
            q = -q
        return q / np.linalg.norm(q)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one (3,) point or an (N, 3) block."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def adjoint(self):
        """6x6 Adjoint: exp(Ad xi) = T exp(xi) T^-1, twist order (trans, rot)."""
        ad = np.zeros((6, 6))
        ad[:3, :3] = self.rotation
        ad[3:, 3:] = self.rotation
        ad[:3, 3:] = skew(self.translation) @ self.rotation
        return ad

    def orthonormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) (polar decomposition via SVD)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        return Pose(r, self.translation, self.frame)


def exp(xi) -> Pose:
    """Twist -> Pose. xi = (trans, rot)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("non-finite twist")
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log(pose: Pose):
    """Pose -> twist; inverse of exp away from the pi singularity."""
    phi = so3_log(pose.rotation)
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def exp_batch(xis):
    """(N, 6) twists -> rotations (N, 3, 3) and translations (N, 3)."""
    xis = np.asarray(xis, dtype=float)
    rho, phi = xis[:, :3], xis[:, 3:]
    theta = np.linalg.norm(phi, axis=1)
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe**3))

    k = np.zeros((len(xis), 3, 3))
    k[:, 0, 1] = -phi[:, 2]
    k[:, 0, 2] = phi[:, 1]
    k[:, 1, 0] = phi[:, 2]
    k[:, 1, 2] = -phi[:, 0]
    k[:, 2, 0] = -phi[:, 1]
    k[:, 2, 1] = phi[:, 0]
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    rot = eye + a[:, None, None] * k + b[:, None, None] * kk
    vmat = eye + b[:, None, None] * k + c[:, None, None] * kk
    trans = np.einsum("nij,nj->ni", vmat, rho)
    return rot, trans


def interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation a @ exp(alpha * log(a^-1 b)); alpha in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise OutOfRangeError(f"interpolation ratio {alpha} outside [0, 1]")
    rel = log(a.inverse() @ b)
    return a @ exp(alpha * rel)


def se3_ad(xi):
    """Little adjoint of a twist: ad(x) y = [x, y], twist order (trans, rot)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    out = np.zeros((6, 6))
    pk = skew(xi[3:])
    out[:3, :3] = pk
    out[3:, 3:] = pk
    out[:3, 3:] = skew(xi[:3])
    return out


def inv_left_jacobian(xi):
    """Inverse left Jacobian of SE(3), BCH series truncated at second order.

    Satisfies log(exp(eps) exp(xi)) ~ xi + inv_left_jacobian(xi) eps to first
    order in eps; exact at xi = 0. Truncation error is O(|xi|^4) (the cubic
    Bernoulli term vanishes), which is the documented tolerance source for
    |xi| <= 0.5.
    """
    ad = se3_ad(xi)
    return np.eye(6) - 0.5 * ad + (ad @ ad) / 12.0
