"""Rigid and similarity transforms, Lie-algebra maps and the camera model.

Frame convention: a pose named ``a_from_b`` maps coordinates expressed in
frame ``b`` into frame ``a`` (``x_a = R x_b + t``).  Tangent vectors are
ordered ``[rho, theta]`` (translation part first) and poses are perturbed on
the right, ``T <- T Exp(delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import NonPositiveDepth

_SMALL_ANGLE = 1e-6


def cross_rows(p, A):
    """``p x a`` for every row ``a`` of stacked ``A`` (..., k, 3) with ``p`` (..., 3)."""
    p = p[..., None, :]
    out = np.empty(np.broadcast_shapes(p.shape, A.shape))
    out[..., 0] = p[..., 1] * A[..., 2] - p[..., 2] * A[..., 1]
    out[..., 1] = p[..., 2] * A[..., 0] - p[..., 0] * A[..., 2]
    out[..., 2] = p[..., 0] * A[..., 1] - p[..., 1] * A[..., 0]
    return out


def skew(v):
    """Return the 3x3 cross-product matrix of ``v`` (batched over leading dims)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# --------------------------------------------------------------------------
# quaternions (w, x, y, z)
# --------------------------------------------------------------------------

def quat_canonical(q):
    """Normalize ``q`` and flip it into the ``w >= 0`` hemisphere.

    Quaternions already of unit norm (to a few ulps) are left bitwise
    untouched so that repeated canonicalization is a fixed point.
    """
    q = np.array(q, dtype=float).reshape(4)
    n2 = float(q @ q)
    if not np.isfinite(n2) or n2 == 0.0:
        raise ValueError(f"invalid quaternion {q!r}")
    if abs(n2 - 1.0) > 1e-14:
        q = q / math.sqrt(n2)
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        nz = np.flatnonzero(q[1:])
        if nz.size and q[1 + nz[0]] < 0.0:
            q = -q
    return q + 0.0  # drop negative zeros


def quat_multiply(a, b):
    """Hamilton product; batched over leading dims."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion; batched over leading dims."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def matrix_to_quat(R):
    """Shepperd's method; the result is canonical (unit, ``w >= 0``)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return quat_canonical(q / np.linalg.norm(q))


def average_quaternions(quats, weights=None):
    """Weighted rotation average: principal eigenvector of ``sum w q q^T``.

    Quaternions are first flipped onto the hemisphere of the first one.
    """
    Q = np.array(quats, dtype=float).reshape(-1, 4)
    w = np.ones(len(Q)) if weights is None else np.asarray(weights, dtype=float)
    signs = np.where(Q @ Q[0] < 0.0, -1.0, 1.0)
    Q = Q * signs[:, None]
    M = (Q * w[:, None]).T @ Q
    _, vecs = np.linalg.eigh(M)
    return quat_canonical(vecs[:, -1])


# --------------------------------------------------------------------------
# SO(3) / SE(3) maps, vectorized
# --------------------------------------------------------------------------

def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    K = skew(phi)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation vector of ``R``; the angle-pi case uses the symmetric part."""
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = np.linalg.norm(w)
    theta = math.atan2(sin_t, cos_t)
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if math.pi - theta > 1e-4:
        return w * (theta / sin_t)
    # near pi: a a^T = (sym(R) - cos(t) I) / (1 - cos(t)), exact for any t
    B = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return axis * theta


def so3_left_jacobian(phi):
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3) + (1.0 - math.cos(theta)) / theta**2 * K
            + (theta - math.sin(theta)) / theta**3 * (K @ K))


def so3_left_jacobian_inv(phi):
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    coef = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def _se3_q_matrix(rho, phi):
    # coupling block of the SE(3) left Jacobian
    theta = float(np.linalg.norm(phi))
    P = skew(rho)
    F = skew(phi)
    FP = F @ P
    PF = P @ F
    FPF = FP @ F
    if theta < 1e-3:
        t2 = theta * theta
        c1, c2, c3 = 1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0
    else:
        t2 = theta * theta
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / (t2 * theta)
        c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (0.5 * P + c1 * (FP + PF + FPF)
            + c2 * (F @ FP + PF @ F - 3.0 * FPF)
            + c3 * (FPF @ F + F @ FPF))


def se3_exp(xi):
    """Exp of a 6-vector ``[rho, theta]`` -> (R, t)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    theta2 = float(phi @ phi)
    K = skew(phi)
    KK = K @ K
    if theta2 < _SMALL_ANGLE * _SMALL_ANGLE:
        a, b, c = 1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = math.sqrt(theta2)
        s = math.sin(theta)
        a, b, c = s / theta, (1.0 - math.cos(theta)) / theta2, (theta - s) / (theta2 * theta)
    R = np.eye(3) + a * K + b * KK
    V = np.eye(3) + b * K + c * KK
    return R, V @ rho


def se3_exp_batch(xi):
    """Batched Exp: ``xi`` of shape (n, 6) -> R (n,3,3), t (n,3)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:, :3], xi[:, 3:]
    theta2 = np.sum(phi * phi, axis=1)[:, None, None]
    theta = np.sqrt(theta2)
    K = skew(phi)
    KK = K @ K
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    R = np.eye(3) + a * K + b * KK
    V = np.eye(3) + b * K + c * KK
    return R, np.einsum("nij,nj->ni", V, rho)


def se3_log(R, t):
    phi = so3_log(R)
    rho = so3_left_jacobian_inv(phi) @ np.asarray(t, dtype=float)
    return np.concatenate([rho, phi])


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q_matrix(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def se3_adjoint(R, t):
    """Adjoint for ``[rho, theta]`` ordering: ``T Exp(d) T^-1 = Exp(Ad d)``."""
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[3:, 3:] = R
    out[:3, 3:] = skew(t) @ R
    return out


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidPose:
    """An element of SE(3) stored as a canonical unit quaternion and a translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _readonly(quat_canonical(self.quat)))
        t = _readonly(np.asarray(self.translation, dtype=float).reshape(3))
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls()

    @classmethod
    def from_matrix(cls, M) -> RigidPose:
        M = np.asarray(M, dtype=float)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> RigidPose:
        return cls(matrix_to_quat(R), t)

    @classmethod
    def exp(cls, xi) -> RigidPose:
        R, t = se3_exp(xi)
        return cls.from_rt(R, t)

    @cached_property
    def rotation(self) -> np.ndarray:
        return _readonly(quat_to_matrix(self.quat))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __eq__(self, other):
        # exact equality; the canonical quaternion makes this well defined
        if not isinstance(other, RigidPose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.translation.tobytes()))

    def apply(self, points):
        """Transform points of shape (3,) or (n, 3)."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidPose) -> RigidPose:
        return compose(self, other)

    def inverse(self) -> RigidPose:
        return inverse(self)

    def log(self) -> np.ndarray:
        return log_se3(self)

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidPose(quat=[{q}], translation=[{t}])"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a @ b``: apply ``b`` then ``a``."""
    return RigidPose(quat_multiply(a.quat, b.quat), a.rotation @ b.translation + a.translation)


def inverse(p: RigidPose) -> RigidPose:
    return RigidPose(quat_conjugate(p.quat), -(p.rotation.T @ p.translation))


def log_se3(p: RigidPose) -> np.ndarray:
    return se3_log(p.rotation, p.translation)


def exp_se3(xi) -> RigidPose:
    return RigidPose.exp(xi)


def rotation_angle(p_or_q) -> float:
    """Rotation angle (radians) of a pose or unit quaternion."""
    q = p_or_q.quat if isinstance(p_or_q, RigidPose) else np.asarray(p_or_q, dtype=float)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def pose_distance(a: RigidPose, b: RigidPose) -> tuple[float, float]:
    """(rotation angle in radians, translation distance) between two poses."""
    qd = quat_multiply(quat_conjugate(a.quat), b.quat)
    return rotation_angle(qd), float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * R x + t``."""

    scale: float = 1.0
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "quat", _readonly(quat_canonical(self.quat)))
        object.__setattr__(self, "translation", _readonly(np.asarray(self.translation, dtype=float).reshape(3)))

    @cached_property
    def rotation(self) -> np.ndarray:
        return _readonly(quat_to_matrix(self.quat))

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation

    def apply_inverse(self, points):
        return ((np.asarray(points, dtype=float) - self.translation) @ self.rotation) / self.scale

    def apply_to_pose(self, pose: RigidPose) -> RigidPose:
        """Map a camera-to-world pose: rotate its orientation, transform its position."""
        return RigidPose(quat_multiply(self.quat, pose.quat), self.apply(pose.translation))


# --------------------------------------------------------------------------
# camera model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with Brown-Conrady distortion (3 radial, 2 tangential).

    ``width``/``height`` give the image extent in pixels; they bound the
    visibility test and the pixel grid of the flow metric.
    """

    fu: float
    fv: float
    cu: float
    cv: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise ValueError("focal lengths must be positive")
        for name in ("cu", "cv", "k1", "k2", "k3", "p1", "p2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.k3, self.p1, self.p2))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def distort_normalized(xn, intr: CameraIntrinsics, with_jacobian=False):
    """Apply lens distortion to normalized coordinates (n, 2)."""
    x, y = xn[..., 0], xn[..., 1]
    xx, yy, xy = x * x, y * y, x * y
    r2 = xx + yy
    radial = 1.0 + r2 * (intr.k1 + r2 * (intr.k2 + r2 * intr.k3))
    xd = x * radial + 2.0 * intr.p1 * xy + intr.p2 * (r2 + 2.0 * xx)
    yd = y * radial + intr.p1 * (r2 + 2.0 * yy) + 2.0 * intr.p2 * xy
    out = np.stack([xd, yd], axis=-1)
    if not with_jacobian:
        return out
    dradial = intr.k1 + r2 * (2.0 * intr.k2 + 3.0 * intr.k3 * r2)  # d radial / d r2
    J = np.empty(xn.shape[:-1] + (2, 2))
    J[..., 0, 0] = radial + 2.0 * xx * dradial + 2.0 * intr.p1 * y + 6.0 * intr.p2 * x
    J[..., 0, 1] = 2.0 * xy * dradial + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y
    J[..., 1, 0] = 2.0 * xy * dradial + 2.0 * intr.p1 * x + 2.0 * intr.p2 * y
    J[..., 1, 1] = radial + 2.0 * yy * dradial + 6.0 * intr.p1 * y + 2.0 * intr.p2 * x
    return out, J


def undistort_normalized(xd, intr: CameraIntrinsics, iterations: int = 10, tol: float = 1e-10):
    """Invert the distortion by Newton iteration, starting from the distorted point."""
    xd = np.asarray(xd, dtype=float)
    if not intr.has_distortion:
        return xd.copy()
    x = xd.copy()
    for _ in range(iterations):
        f, J = distort_normalized(x, intr, with_jacobian=True)
        r = f - xd
        if np.max(np.abs(r), initial=0.0) < tol:
            break
        x = x - np.linalg.solve(J, r[..., None])[..., 0]
    return x


def pixels_to_normalized(pixels, intr: CameraIntrinsics):
    """Undistorted normalized image coordinates of pixel measurements."""
    pixels = np.asarray(pixels, dtype=float)
    xd = np.stack([(pixels[..., 0] - intr.cu) / intr.fu, (pixels[..., 1] - intr.cv) / intr.fv], axis=-1)
    return undistort_normalized(xd, intr)


def project_points(points_cam, intr: CameraIntrinsics, with_jacobian=False):
    """Vectorized distorted projection of camera-frame points (n, 3).

    No depth check is made here; callers that need one use :func:`project`.
    With ``with_jacobian`` also returns d(pixel)/d(point) of shape (n, 2, 3).
    """
    P = np.asarray(points_cam, dtype=float)
    inv_z = 1.0 / P[..., 2]
    xn = P[..., :2] * inv_z[..., None]
    f = np.array([intr.fu, intr.fv])
    c = np.array([intr.cu, intr.cv])
    if not intr.has_distortion:
        uv = xn * f + c
        if not with_jacobian:
            return uv
        J = np.zeros(P.shape[:-1] + (2, 3))
        J[..., 0, 0] = intr.fu * inv_z
        J[..., 1, 1] = intr.fv * inv_z
        J[..., :, 2] = -(uv - c) * inv_z[..., None]
        return uv, J
    if not with_jacobian:
        return distort_normalized(xn, intr) * f + c
    xd, Jd = distort_normalized(xn, intr, with_jacobian=True)
    uv = xd * f + c
    # d(xn)/dP = [[1, 0, -x], [0, 1, -y]] / z, folded into the distortion Jacobian
    Jf = Jd * f[:, None] * inv_z[..., None, None]
    J = np.empty(P.shape[:-1] + (2, 3))
    J[..., :2] = Jf
    J[..., 2] = -np.einsum("...ij,...j->...i", Jf, xn)
    return uv, J


def project(point_cam, intr: CameraIntrinsics) -> np.ndarray:
    """Project a single camera-frame point to pixels."""
    p = np.asarray(point_cam, dtype=float).reshape(3)
    if p[2] <= 1e-9:
        raise NonPositiveDepth(f"point depth {p[2]:.3g} m is not in front of the camera")
    return project_points(p[None, :], intr)[0]


def point_jacobian_wrt_pose(points_local, R):
    """d(R exp(d) p + t)/d(delta) for right perturbations, shape (n, 3, 6)."""
    p = np.asarray(points_local, dtype=float)
    J = np.empty(p.shape[:-1] + (3, 6))
    J[..., :, :3] = R
    J[..., :, 3:] = -R @ skew(p)
    return J
