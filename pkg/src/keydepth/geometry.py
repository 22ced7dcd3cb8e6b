"""Pinhole camera model, SE(3) poses, and the depth/pose warp field.

The warp maps every target pixel (i, j) through backprojection at its
depth, a rigid transform into the source frame, and projection, yielding
subpixel source coordinates (u*, v*) together with analytic Jacobians
w.r.t. log-depth and the 6-d pose tangent.

Pose tangent convention: twists are (wx, wy, wz, vx, vy, vz) and pose
Jacobians are taken in left (world-side) tangent coordinates, i.e. the
derivative of exp(delta) @ pose at delta = 0. Finite-difference checks
and optimizer updates perturb poses the same way (retraction
pose <- exp(delta) @ pose), so the two sides always agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from keydepth.errors import ConfigurationError

DEFAULT_Z_MIN = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation; series expansion below theta ~ 1e-6."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    s = skew(w)
    if theta2 < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * s + b * (s @ s)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of r; raises near angle pi where the log is ill-conditioned."""
    tr = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(tr))
    if theta > np.pi - 1e-6:
        raise ConfigurationError(f"rotation angle {theta:.9f} too close to pi for a stable log")
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-6:
        return vee * (1.0 + theta * theta / 6.0)
    return vee * (theta / np.sin(theta))


def _so3_v(w: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): t = V(w) v in the SE(3) exponential."""
    theta2 = float(w @ w)
    s = skew(w)
    if theta2 < 1e-12:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        b = (1.0 - np.cos(theta)) / theta2
        c = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + b * s + c * (s @ s)


def _so3_v_inv(w: np.ndarray) -> np.ndarray:
    theta2 = float(w @ w)
    s = skew(w)
    if theta2 < 1e-12:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * s + c * (s @ s)


@dataclass(frozen=True)
class CameraPose:
    """SE(3) rigid transform mapping target-frame points into a source frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ConfigurationError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ConfigurationError("rotation is not orthonormal with det 1")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    @property
    def twist(self) -> np.ndarray:
        return se3_log(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        return points @ self.rotation.T + self.translation

    def compose(self, other: "CameraPose") -> "CameraPose":
        """self after other: (self * other)(x) = self(other(x))."""
        return CameraPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -(self.rotation.T @ self.translation))


def se3_exp(twist: np.ndarray) -> CameraPose:
    """Exponential map of a (wx,wy,wz,vx,vy,vz) twist."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    w, v = twist[:3], twist[3:]
    return CameraPose(so3_exp(w), _so3_v(w) @ v)


def se3_log(pose: CameraPose) -> np.ndarray:
    """Inverse of se3_exp; requires rotation angle < pi - 1e-6."""
    w = so3_log(pose.rotation)
    v = _so3_v_inv(w) @ pose.translation
    return np.concatenate([w, v])


def backproject(k: Intrinsics, i: float, j: float, d: float) -> np.ndarray:
    """Pixel (row i, col j) at depth d to a camera-frame 3-vector."""
    if d <= 0:
        raise ConfigurationError(f"depth must be positive, got {d}")
    return np.array([(j - k.cx) / k.fx * d, (i - k.cy) / k.fy * d, d])


def project(k: Intrinsics, p: np.ndarray, z_min: float = DEFAULT_Z_MIN) -> tuple[float, float, bool]:
    """Camera-frame point to (u, v, valid); valid iff pz >= z_min (no division blowup)."""
    px, py, pz = float(p[0]), float(p[1]), float(p[2])
    if pz < z_min:
        return 0.0, 0.0, False
    return k.fx * px / pz + k.cx, k.fy * py / pz + k.cy, True


@dataclass(frozen=True)
class DepthField:
    """Per-pixel depth optimized through its logarithm (positivity for free)."""

    log_depth: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.log_depth, dtype=np.float64)
        object.__setattr__(self, "log_depth", d)
        if d.ndim != 2:
            raise ConfigurationError(f"log_depth must be 2-d, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ConfigurationError("log_depth contains non-finite values")

    @staticmethod
    def from_depth(depth: np.ndarray) -> "DepthField":
        depth = np.asarray(depth, dtype=np.float64)
        if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
            raise ConfigurationError("depth must be strictly positive and finite")
        return DepthField(np.log(depth))

    @property
    def height(self) -> int:
        return self.log_depth.shape[0]

    @property
    def width(self) -> int:
        return self.log_depth.shape[1]

    @property
    def depth(self) -> np.ndarray:
        return np.exp(self.log_depth)


@dataclass
class WarpField:
    """Subpixel source coordinates per target pixel with chain-rule Jacobians.

    u, v: (H, W) source coordinates; valid: (H, W) bool;
    j_depth: (H, W, 2) = d(u,v)/d log_depth;
    j_twist: (H, W, 2, 6) = d(u,v)/d pose tangent (w, v ordering).
    Invalid pixels carry exactly zero Jacobians.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    j_depth: np.ndarray
    j_twist: np.ndarray
    source_shape: tuple[int, int] = field(default=(0, 0))


def compute_warp(
    depth: DepthField,
    k: Intrinsics,
    pose: CameraPose,
    source_shape: tuple[int, int] | None = None,
    z_min: float = DEFAULT_Z_MIN,
) -> WarpField:
    """Warp every target pixel into the source view.

    The projection is evaluated as an offset from the target pixel,
    u* = j + fx*((s_x + t_x/d)/(s_z + t_z/d) - r_x) with s = R r, which
    cancels exactly under the identity pose: the warp is then the identity
    map for any depth values, bit for bit.
    """
    h, w = depth.height, depth.width
    sh, sw = source_shape if source_shape is not None else (h, w)
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rx = (jj - k.cx) / k.fx
    ry = (ii - k.cy) / k.fy

    r = pose.rotation
    t = pose.translation
    sx = r[0, 0] * rx + r[0, 1] * ry + r[0, 2]
    sy = r[1, 0] * rx + r[1, 1] * ry + r[1, 2]
    sz = r[2, 0] * rx + r[2, 1] * ry + r[2, 2]

    d = np.exp(depth.log_depth)
    wx = t[0] / d
    wy = t[1] / d
    wz = t[2] / d
    nu = sx + wx
    nv = sy + wy
    dz = sz + wz
    pz = d * dz

    valid = pz >= z_min
    safe_dz = np.where(valid, dz, 1.0)
    inv_dz = 1.0 / safe_dz

    # Offsets relative to the target pixel, with the rotation part and the
    # translation part cancelled separately: (nu - rx*dz) equals
    # (sx - rx*sz) + (wx - rx*wz), which is exactly zero under the identity
    # pose and exactly fx-scalable for pure-translation poses.
    off_u = (sx - rx * sz) + (wx - rx * wz)
    off_v = (sy - ry * sz) + (wy - ry * wz)
    u = jj + k.fx * (off_u * inv_dz)
    v = ii + k.fy * (off_v * inv_dz)
    valid &= (u >= 0.0) & (u <= sw - 1.0) & (v >= 0.0) & (v <= sh - 1.0)

    inv_dz2 = inv_dz * inv_dz
    j_depth = np.zeros((h, w, 2))
    j_depth[:, :, 0] = k.fx * (nu * wz - wx * dz) * inv_dz2
    j_depth[:, :, 1] = k.fy * (nv * wz - wy * dz) * inv_dz2

    # Normalized source-frame coordinates x' = nu/dz, y' = nv/dz, z' = d*dz.
    xb = nu * inv_dz
    yb = nv * inv_dz
    inv_pz = inv_dz / d
    j_twist = np.zeros((h, w, 2, 6))
    j_twist[:, :, 0, 0] = -k.fx * xb * yb
    j_twist[:, :, 0, 1] = k.fx * (1.0 + xb * xb)
    j_twist[:, :, 0, 2] = -k.fx * yb
    j_twist[:, :, 0, 3] = k.fx * inv_pz
    j_twist[:, :, 0, 5] = -k.fx * xb * inv_pz
    j_twist[:, :, 1, 0] = -k.fy * (1.0 + yb * yb)
    j_twist[:, :, 1, 1] = k.fy * xb * yb
    j_twist[:, :, 1, 2] = k.fy * xb
    j_twist[:, :, 1, 4] = k.fy * inv_pz
    j_twist[:, :, 1, 5] = -k.fy * yb * inv_pz

    j_depth[~valid] = 0.0
    j_twist[~valid] = 0.0
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return WarpField(u=u, v=v, valid=valid, j_depth=j_depth, j_twist=j_twist, source_shape=(sh, sw))
