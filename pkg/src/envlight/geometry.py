"""Coordinate conventions, camera models and the equirectangular mapping.

Conventions shared by every module:

* Global frame is right-handed and y-up.
* Camera frames follow the pinhole convention: x right, y down, z forward.
  Integer pixel coordinates address pixel centres, so a projected point at
  ``(u, v)`` lands in pixel ``(floor(u + 0.5), floor(v + 0.5))``.
* Environment maps are equirectangular with longitude ``atan2(x, z)`` along
  the columns and latitude ``asin(y)`` down the rows.  The forward axis +z maps
  to the image centre and row 0 is the north pole (+y).  Pixels are sampled at
  their centres ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InversionError(RuntimeError):
    """Raised when undistortion fails to converge."""


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform mapping sensor-frame points into the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix) -> "RigidPose":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    @property
    def position(self) -> np.ndarray:
        return self.translation


def transform_point(pose: RigidPose, point) -> np.ndarray:
    return pose.apply(point)


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> RigidPose:
    """Camera-to-world pose for a camera at ``position`` looking at ``target``.

    The camera's z axis points at the target and its y axis points down,
    i.e. away from ``up``.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("target coincides with position")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis; pick any perpendicular
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.column_stack([right, down, forward])
    return RigidPose(rot, position)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with Brown radial distortion (3 or 5 coefficients)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    distortion: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        k = tuple(float(c) for c in self.distortion)
        if len(k) not in (3, 5):
            raise ValueError("distortion needs 3 or 5 radial coefficients")
        object.__setattr__(self, "distortion", k)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx,
                "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "distortion": list(self.distortion)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]),
                   float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   tuple(d.get("distortion", (0.0, 0.0, 0.0))))


def _radial_factor(r2: np.ndarray, k: tuple) -> np.ndarray:
    factor = np.ones_like(r2)
    power = np.ones_like(r2)
    for coeff in k:
        power = power * r2
        factor = factor + coeff * power
    return factor


def _radial_derivative(r2: np.ndarray, k: tuple) -> np.ndarray:
    # d/dr [r * (1 + sum k_i r^(2i))] = 1 + sum (2i + 1) k_i r^(2i)
    deriv = np.ones_like(r2)
    power = np.ones_like(r2)
    for i, coeff in enumerate(k, start=1):
        power = power * r2
        deriv = deriv + (2 * i + 1) * coeff * power
    return deriv


def distort(normalized_point, model: CameraModel) -> np.ndarray:
    """Map normalized camera coordinates (z = 1 plane) to pixel coordinates.

    Accepts a single 2-vector or an ``(N, 2)`` array.  Results outside the
    image are returned untouched; clipping is the caller's job.
    """
    p = np.asarray(normalized_point, dtype=np.float64)
    r2 = np.sum(p * p, axis=-1)
    scaled = p * _radial_factor(r2, model.distortion)[..., None]
    u = model.fx * scaled[..., 0] + model.cx
    v = model.fy * scaled[..., 1] + model.cy
    return np.stack([u, v], axis=-1)


def undistort(pixel, model: CameraModel, max_iter: int = 20,
              tol: float = 1e-8) -> np.ndarray:
    """Invert :func:`distort` by damped Newton iteration on the radius.

    ``tol`` bounds the pixel-space residual.  Raises :class:`InversionError`
    if any point has not converged after ``max_iter`` iterations.
    """
    px = np.asarray(pixel, dtype=np.float64)
    xd = (px[..., 0] - model.cx) / model.fx
    yd = (px[..., 1] - model.cy) / model.fy
    rd = np.hypot(xd, yd)
    k = model.distortion
    if not any(k):
        return np.stack([xd, yd], axis=-1)

    scale = max(model.fx, model.fy)
    with np.errstate(over="ignore", invalid="ignore"):
        r, converged = _newton_radius(rd, k, scale, max_iter, tol)
    if not np.all(converged):
        raise InversionError(
            f"undistortion did not converge for {int(np.sum(~converged))} point(s)")
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rd > 0, r / np.where(rd > 0, rd, 1.0), 1.0)
    return np.stack([xd * ratio, yd * ratio], axis=-1)


def _newton_radius(rd, k, scale, max_iter, tol):
    r = rd.copy()
    converged = np.zeros(rd.shape, dtype=bool)
    for _ in range(max_iter):
        r2 = r * r
        residual = r * _radial_factor(r2, k) - rd
        converged = np.abs(residual) * scale <= tol
        if np.all(converged):
            break
        deriv = _radial_derivative(r2, k)
        safe = np.where(deriv > 1e-12, deriv, 1e-12)
        step = residual / safe
        candidate = r - step
        # damping: halve the step while the residual grows
        for _ in range(8):
            c2 = candidate * candidate
            worse = np.abs(candidate * _radial_factor(c2, k) - rd) > np.abs(residual)
            worse &= ~converged
            if not np.any(worse):
                break
            step = np.where(worse, 0.5 * step, step)
            candidate = r - step
        r = np.where(converged, r, np.maximum(candidate, 0.0))
    else:
        r2 = r * r
        residual = r * _radial_factor(r2, k) - rd
        converged = np.abs(residual) * scale <= tol
    return r, converged


def project_points(points_cam, model: CameraModel, use_distortion: bool = True):
    """Project camera-frame points; returns ``(pixels, in_front)``."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    in_front = z > 1e-9
    safe_z = np.where(in_front, z, 1.0)
    normalized = p[..., :2] / safe_z[..., None]
    if use_distortion:
        px = distort(normalized, model)
    else:
        px = np.stack([model.fx * normalized[..., 0] + model.cx,
                       model.fy * normalized[..., 1] + model.cy], axis=-1)
    return px, in_front


def pixel_rays(model: CameraModel) -> np.ndarray:
    """Unit camera-frame ray for every pixel centre, shape ``(H, W, 3)``."""
    vv, uu = np.mgrid[0:model.height, 0:model.width].astype(np.float64)
    norm = undistort(np.stack([uu, vv], axis=-1), model)
    rays = np.concatenate([norm, np.ones(norm.shape[:-1] + (1,))], axis=-1)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def dir_to_pixel(direction, em_width: int, em_height: int):
    """Equirectangular pixel ``(u, v)`` for unit direction(s).

    Returns a pair of integer arrays (or ints for a single direction).
    """
    d = np.asarray(direction, dtype=np.float64)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    u = np.floor((lon + np.pi) / (2.0 * np.pi) * em_width).astype(np.int64)
    v = np.floor((np.pi / 2.0 - lat) / np.pi * em_height).astype(np.int64)
    u = np.clip(u, 0, em_width - 1)
    v = np.clip(v, 0, em_height - 1)
    if d.ndim == 1:
        return int(u), int(v)
    return u, v


def pixel_to_dir(u, v, em_width: int, em_height: int) -> np.ndarray:
    """Unit direction through the centre of equirectangular pixel ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lon = (u + 0.5) / em_width * 2.0 * np.pi - np.pi
    lat = np.pi / 2.0 - (v + 0.5) / em_height * np.pi
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.sin(lon), np.sin(lat), cos_lat * np.cos(lon)],
                    axis=-1)


def em_direction_grid(em_width: int, em_height: int) -> np.ndarray:
    """Pixel-centre directions for a whole map, shape ``(H, W, 3)``."""
    vv, uu = np.mgrid[0:em_height, 0:em_width]
    return pixel_to_dir(uu, vv, em_width, em_height)


def em_latitudes(em_height: int) -> np.ndarray:
    return np.pi / 2.0 - (np.arange(em_height) + 0.5) / em_height * np.pi


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the +y axis by ``yaw`` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
