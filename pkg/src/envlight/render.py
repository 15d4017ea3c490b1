"""Lambertian shading, z-buffered rasterization and compositing over live frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, RigidPose, yaw_rotation
from .ingest import linear_to_srgb8, srgb_to_linear
from .mesh import TriangleMesh
from .sh import ShadowGrid, ShCoefficients, VertexTransfer, grid_alpha, irradiance, sample_alpha

SHADOW_GREY = np.array([0.1, 0.1, 0.1])


class MissingTransferError(RuntimeError):
    pass


class SingularCorrectionError(ValueError):
    pass


@dataclass
class VirtualObject:
    """A mesh in its local frame, a placement (translation + yaw) and an albedo.

    ``albedo`` is either one RGB triple or one per vertex.
    """

    mesh: TriangleMesh
    albedo: np.ndarray = field(default_factory=lambda: np.ones(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if self.albedo.shape not in ((3,), (len(self.mesh.vertices), 3)):
            raise ValueError("albedo must be one RGB triple or one per vertex")
        norms = np.linalg.norm(self.mesh.normals, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("mesh normals must be unit length")

    def world_mesh(self) -> TriangleMesh:
        """The mesh as placed in the world; transfers are computed on this mesh."""
        return self.mesh.transformed(yaw_rotation(self.yaw), self.position)


@dataclass
class RenderTarget:
    rgb: np.ndarray             # (H, W, 3) linear
    depth: np.ndarray           # (H, W) camera z, +inf where empty
    triangle: np.ndarray        # (H, W) winning triangle index, -1 where empty

    @classmethod
    def blank(cls, width: int, height: int) -> "RenderTarget":
        return cls(np.zeros((height, width, 3)), np.full((height, width), np.inf),
                   np.full((height, width), -1, dtype=np.int64))

    @property
    def coverage(self) -> np.ndarray:
        return self.triangle >= 0


def shade_vertices(obj: VirtualObject, transfer: VertexTransfer | None,
                   env: ShCoefficients) -> np.ndarray:
    """Outgoing radiance ``(albedo / pi) * E`` per vertex, not clamped above."""
    if transfer is None:
        raise MissingTransferError("no transfer for this object; run precompute_transfer first")
    if len(transfer.coeffs) != len(obj.mesh.vertices):
        raise MissingTransferError(
            f"transfer has {len(transfer.coeffs)} vertices, mesh has {len(obj.mesh.vertices)}; "
            "recompute the transfer for this mesh")
    return obj.albedo / np.pi * irradiance(transfer, env)


def rasterize(mesh: TriangleMesh, vertex_colours: np.ndarray, camera: CameraModel,
              pose: RigidPose, target: RenderTarget | None = None,
              near: float = 1e-3) -> RenderTarget:
    """Z-buffered fill with perspective-correct colour interpolation.

    ``pose`` is the camera-to-world transform.  Lens distortion is ignored.
    Back faces are culled and triangles crossing the near plane are dropped.
    Pixel ``(x, y)`` samples the image point ``(x, y)``; on equal depth the
    lower triangle index wins.
    """
    if target is None:
        target = RenderTarget.blank(camera.width, camera.height)
    cam_pts = pose.inverse().apply(mesh.vertices)
    colours = np.asarray(vertex_colours, dtype=np.float64)
    z = cam_pts[:, 2]
    safe = np.where(z > near, z, 1.0)
    sx = camera.fx * cam_pts[:, 0] / safe + camera.cx
    sy = camera.fy * cam_pts[:, 1] / safe + camera.cy

    tri = mesh.faces
    p0, p1, p2 = (cam_pts[tri[:, i]] for i in range(3))
    facing = np.einsum("ij,ij->i", np.cross(p1 - p0, p2 - p0), p0) < 0
    in_front = np.all(z[tri] > near, axis=1)
    for f in np.nonzero(facing & in_front)[0]:
        a, b, c = tri[f]
        xs = sx[[a, b, c]]
        ys = sy[[a, b, c]]
        x0 = max(int(np.ceil(xs.min())), 0)
        x1 = min(int(np.floor(xs.max())), camera.width - 1)
        y0 = max(int(np.ceil(ys.min())), 0)
        y1 = min(int(np.floor(ys.max())), camera.height - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        w0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / area
        w1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not np.any(inside):
            continue
        iz = w0 / z[a] + w1 / z[b] + w2 / z[c]
        depth = 1.0 / iz
        region_depth = target.depth[y0:y1 + 1, x0:x1 + 1]
        win = inside & (depth < region_depth)
        if not np.any(win):
            continue
        pw = np.stack([w0 / z[a], w1 / z[b], w2 / z[c]], axis=-1) * depth[..., None]
        col = pw @ colours[[a, b, c]]
        region_depth[win] = depth[win]
        target.rgb[y0:y1 + 1, x0:x1 + 1][win] = col[win]
        target.triangle[y0:y1 + 1, x0:x1 + 1][win] = f
    return target


def invert_correction(matrix: np.ndarray, cond_limit: float = 1e8) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)) or np.linalg.cond(m) > cond_limit:
        raise SingularCorrectionError("accepted correction matrix is singular")
    inv = np.linalg.inv(m)
    if not np.all(np.isfinite(inv)):
        raise SingularCorrectionError("inverse correction matrix is not finite")
    return inv


def shadow_footprint(grid: ShadowGrid, camera: CameraModel, pose: RigidPose):
    """Plane coordinates ``(s, t)`` seen through each pixel, NaN where the ray misses."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width].astype(np.float64)
    rays = np.stack([(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy,
                     np.ones_like(xs)], axis=-1) @ pose.rotation.T
    n = grid.normal
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = ((grid.origin - pose.translation) @ n) / denom
    hit = np.isfinite(lam) & (lam > 0)
    p = pose.translation + np.where(hit, lam, 0.0)[..., None] * rays - grid.origin
    s = np.where(hit, p @ grid.axis_u, np.nan)
    t = np.where(hit, p @ grid.axis_v, np.nan)
    return s, t


def shadow_alpha_image(grid: ShadowGrid, env: ShCoefficients, camera: CameraModel,
                       pose: RigidPose) -> np.ndarray:
    s, t = shadow_footprint(grid, camera, pose)
    alpha = grid_alpha(grid, env)
    ok = np.isfinite(s)
    out = np.zeros(s.shape)
    out[ok] = sample_alpha(grid, alpha, s[ok], t[ok])
    return out


def composite(background: np.ndarray, render: RenderTarget, inverse_matrix: np.ndarray,
              alpha: np.ndarray | None = None) -> np.ndarray:
    """Overlay the rendered object and the shadow plane on an 8-bit sRGB frame.

    Object pixels become ``sRGB(clamp(M^-1 L))``.  Shadow pixels blend the
    linearized background towards ``M^-1`` applied to dark grey by ``alpha``.
    The real scene never occludes the object.  All other pixels are copied
    byte for byte.
    """
    inv = np.asarray(inverse_matrix, dtype=np.float64)
    if not np.all(np.isfinite(inv)):
        raise SingularCorrectionError("inverse correction matrix is not finite")
    out = np.array(background, dtype=np.uint8, copy=True)
    if alpha is not None:
        shade = (alpha > 0) & ~render.coverage
        if np.any(shade):
            bg = srgb_to_linear(out[shade])
            grey = np.clip(inv @ SHADOW_GREY, 0.0, 1.0)
            a = alpha[shade][:, None]
            out[shade] = linear_to_srgb8((1.0 - a) * bg + a * grey)
    cov = render.coverage
    if np.any(cov):
        lin = render.rgb[cov] @ inv.T
        out[cov] = linear_to_srgb8(lin)
    return out

