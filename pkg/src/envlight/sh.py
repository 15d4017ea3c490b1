"""Real spherical harmonics: EM projection, per-vertex transfer and shadow grids.

Basis convention: real SH without the Condon-Shortley phase, polar axis +y and
azimuth ``atan2(x, z)`` (the environment-map longitude).  Coefficients are
stored band-major: index ``l*l + l + m`` for ``m = -l..l``.

    Y_l^m  = sqrt(2) K_l^m cos(m phi)   P_l^m(cos theta)     m > 0
    Y_l^0  =         K_l^0              P_l^0(cos theta)
    Y_l^-m = sqrt(2) K_l^m sin(m phi)   P_l^m(cos theta)     m > 0
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .envmap import EnvironmentMap
from .geometry import em_latitudes
from .mesh import RayCaster, TriangleMesh


class EmptyEnvironmentError(ValueError):
    pass


class DegenerateNormalsError(ValueError):
    pass


class BandMismatchError(ValueError):
    pass


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def sh_lm(index: int) -> tuple[int, int]:
    l = int(math.isqrt(index))
    return l, index - l * l - l


def _norm_const(l: int, m: int) -> float:
    m = abs(m)
    return math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))


def _legendre_table(bands: int, x: np.ndarray) -> dict:
    """Associated Legendre ``P_l^m(x)`` for ``0 <= m <= l < bands`` (no CS phase)."""
    x = np.asarray(x, dtype=np.float64)
    somx2 = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    table = {}
    pmm = np.ones_like(x)
    for m in range(bands):
        if m > 0:
            pmm = pmm * (2 * m - 1) * somx2
        table[(m, m)] = pmm
        if m + 1 < bands:
            table[(m + 1, m)] = x * (2 * m + 1) * pmm
        for l in range(m + 2, bands):
            table[(l, m)] = ((2 * l - 1) * x * table[(l - 1, m)]
                             - (l + m - 1) * table[(l - 2, m)]) / (l - m)
    return table


def _azimuth_table(bands: int, phi: np.ndarray) -> dict:
    phi = np.asarray(phi, dtype=np.float64)
    table = {0: np.ones_like(phi)}
    for m in range(1, bands):
        table[m] = math.sqrt(2.0) * np.cos(m * phi)
        table[-m] = math.sqrt(2.0) * np.sin(m * phi)
    return table


def _angles(direction):
    d = np.asarray(direction, dtype=np.float64)
    return np.clip(d[..., 1], -1.0, 1.0), np.arctan2(d[..., 0], d[..., 2])


def sh_basis(l: int, m: int, direction):
    """Real SH basis function ``Y_l^m`` evaluated at unit direction(s)."""
    if l < 0 or abs(m) > l:
        raise IndexError(f"invalid SH index l={l}, m={m}")
    cos_t, phi = _angles(direction)
    p = _legendre_table(l + 1, cos_t)[(l, abs(m))]
    a = _azimuth_table(l + 1, phi)[m]
    val = _norm_const(l, m) * p * a
    return float(val) if np.ndim(val) == 0 else val


def sh_basis_all(bands: int, directions) -> np.ndarray:
    """All ``bands**2`` basis values, shape ``(..., bands**2)``."""
    if not 1 <= bands:
        raise IndexError("bands must be positive")
    cos_t, phi = _angles(directions)
    leg = _legendre_table(bands, cos_t)
    az = _azimuth_table(bands, phi)
    out = np.empty(np.shape(cos_t) + (bands * bands,))
    for l in range(bands):
        for m in range(-l, l + 1):
            out[..., sh_index(l, m)] = _norm_const(l, m) * leg[(l, abs(m))] * az[m]
    return out


@dataclass
class ShCoefficients:
    bands: int
    coeffs: np.ndarray          # (channels, bands**2)

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=np.float64))
        if self.coeffs.shape[1] != self.bands * self.bands:
            raise BandMismatchError(
                f"{self.coeffs.shape[1]} coefficients do not match {self.bands} bands")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite SH coefficients")

    def scaled(self, k: float) -> "ShCoefficients":
        return ShCoefficients(self.bands, self.coeffs * k)


def write_sh_csv(path, sh: ShCoefficients) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        channels = ["r", "g", "b"][:sh.coeffs.shape[0]] if sh.coeffs.shape[0] <= 3 else \
            [f"c{i}" for i in range(sh.coeffs.shape[0])]
        writer.writerow(["l", "m"] + channels)
        for idx in range(sh.bands * sh.bands):
            l, m = sh_lm(idx)
            writer.writerow([l, m] + [f"{v:.9g}" for v in sh.coeffs[:, idx]])


def read_sh_csv(path) -> ShCoefficients:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    coeffs = np.array([[float(x) for x in r[2:]] for r in rows]).T
    return ShCoefficients(int(math.isqrt(len(rows))), coeffs)


# --------------------------------------------------------------------------
# environment projection
# --------------------------------------------------------------------------

_BFS_STEPS = ((0, -1), (0, 1), (-1, 0), (1, 0))


def nearest_known_sample(em: EnvironmentMap, pixel, max_steps: int = 50):
    """Colour of the closest valid pixel by 4-connected breadth-first search.

    The search wraps around in longitude and stops after ``max_steps``
    steps; returns ``None`` if nothing valid is reached.
    """
    u0, v0 = int(pixel[0]), int(pixel[1])
    if em.valid[v0, u0]:
        return em.rgb[v0, u0].astype(np.float64)
    seen = {(u0, v0)}
    frontier = [(u0, v0)]
    for _ in range(max_steps):
        nxt = []
        for u, v in frontier:
            for du, dv in _BFS_STEPS:
                nu, nv = (u + du) % em.width, v + dv
                if not 0 <= nv < em.height or (nu, nv) in seen:
                    continue
                if em.valid[nv, nu]:
                    return em.rgb[nv, nu].astype(np.float64)
                seen.add((nu, nv))
                nxt.append((nu, nv))
        frontier = nxt
    return None


def fill_missing(em: EnvironmentMap, max_steps: int = 50):
    """Vectorised nearest-valid fill used for SH projection.

    Returns ``(rgb, usable)``: every invalid pixel within ``max_steps``
    4-connected steps of a valid one takes that pixel's colour.  Equal-distance
    ties may resolve differently from :func:`nearest_known_sample`.
    """
    rgb = em.rgb.astype(np.float64)
    if np.all(em.valid):
        return rgb, em.valid.copy()
    pad = min(max_steps, em.width)
    invalid = np.concatenate([~em.valid[:, -pad:], ~em.valid, ~em.valid[:, :pad]], axis=1)
    dist, (iy, ix) = ndimage.distance_transform_cdt(invalid, metric="taxicab",
                                                    return_indices=True)
    dist = dist[:, pad:pad + em.width]
    iy = iy[:, pad:pad + em.width]
    ix = (ix[:, pad:pad + em.width] - pad) % em.width
    usable = em.valid | ((dist <= max_steps) & (dist >= 0) & em.valid[iy, ix])
    filled = rgb[iy, ix]
    return np.where(usable[..., None], filled, 0.0), usable


def em_solid_angle_weights(height: int, width: int) -> np.ndarray:
    """Per-row Riemann weight ``cos(lat) dphi dtheta``."""
    return np.cos(em_latitudes(height)) * (2.0 * np.pi / width) * (np.pi / height)


def project_em_to_sh(em: EnvironmentMap, bands: int = 5, max_steps: int = 50) -> ShCoefficients:
    """Solid-angle-weighted Riemann projection of the map radiance.

    Missing pixels borrow the nearest valid colour within ``max_steps``;
    the rest are skipped.
    """
    if not np.any(em.valid):
        raise EmptyEnvironmentError("environment map has no valid pixels")
    rgb, usable = fill_missing(em, max_steps)
    return project_radiance_to_sh(rgb, usable, bands)


def project_radiance_to_sh(rgb: np.ndarray, usable: np.ndarray, bands: int) -> ShCoefficients:
    """Separable SH projection of an equirectangular ``(H, W, 3)`` radiance grid."""
    h, w = usable.shape
    lat = em_latitudes(h)
    lon = (np.arange(w) + 0.5) / w * 2.0 * np.pi - np.pi
    leg = _legendre_table(bands, np.sin(lat))
    az = _azimuth_table(bands, lon)
    weighted = np.where(usable[..., None], rgb, 0.0) * em_solid_angle_weights(h, w)[:, None, None]
    ms = list(range(-(bands - 1), bands))
    az_mat = np.stack([az[m] for m in ms], axis=1)                  # (W, M)
    row_sums = np.einsum("vuc,um->vmc", weighted, az_mat)           # (H, M, C)
    coeffs = np.zeros((rgb.shape[-1], bands * bands))
    for l in range(bands):
        for m in range(-l, l + 1):
            col = ms.index(m)
            prof = _norm_const(l, m) * leg[(l, abs(m))]
            coeffs[:, sh_index(l, m)] = prof @ row_sums[:, col, :]
    return ShCoefficients(bands, coeffs)


def reconstruct(sh: ShCoefficients, directions) -> np.ndarray:
    """Evaluate the SH expansion at directions, ``(..., channels)``."""
    return sh_basis_all(sh.bands, directions) @ sh.coeffs.T


# --------------------------------------------------------------------------
# transfer precomputation
# --------------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic near-uniform unit directions."""
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.column_stack([r * np.sin(phi), y, r * np.cos(phi)])


class DirectionSampler:
    """Fibonacci direction set, randomly rotated per task index from a seed."""

    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self.seed = seed
        self.base = fibonacci_sphere(n)

    def directions(self, index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index])
        rot = Rotation.random(random_state=rng).as_matrix()
        return self.base @ rot.T


@dataclass
class VertexTransfer:
    """Per-vertex SH transfer of ``V(w) max(0, n.w)`` (single channel)."""

    bands: int
    coeffs: np.ndarray          # (V, bands**2)
    normals: np.ndarray         # (V, 3)
    samples: int = 0
    seed: int = 0


def _transfer_for_points(points, normal_of, caster: RayCaster | None, sampler: DirectionSampler,
                         bands: int, offset: float, index_base: int = 0,
                         hemisphere_only=None) -> np.ndarray:
    n_pts = len(points)
    out = np.zeros((n_pts, bands * bands))
    scale = 4.0 * math.pi / sampler.n
    for i in range(n_pts):
        dirs = sampler.directions(index_base + i)
        n = normal_of(i)
        cosw = dirs @ n
        up = cosw > 0
        d = dirs[up]
        vis = np.ones(len(d), dtype=bool)
        if caster is not None and len(d):
            vis = ~caster.occluded(points[i] + offset * n, d)
        if hemisphere_only is not None:
            vis &= (d @ hemisphere_only) > 0
        weight = cosw[up] * vis
        out[i] = scale * (weight @ sh_basis_all(bands, d))
    return out


def precompute_transfer(mesh: TriangleMesh, samples_per_vertex: int = 1024, bands: int = 5,
                        seed: int = 0, offset: float = 1e-4,
                        occluder: TriangleMesh | None = None) -> VertexTransfer:
    """Monte Carlo visibility-cosine transfer for every mesh vertex.

    ``T_lm = (4 pi / N) sum V(w) max(0, n.w) Y_lm(w)`` with visibility from
    rays cast against the mesh itself (or ``occluder`` if given).
    """
    norms = np.linalg.norm(mesh.normals, axis=1)
    bad = np.nonzero(~np.isfinite(norms) | (np.abs(norms - 1.0) > 1e-3))[0]
    if bad.size:
        raise DegenerateNormalsError(f"degenerate normals at vertices {bad.tolist()}")
    caster = RayCaster(occluder if occluder is not None else mesh)
    sampler = DirectionSampler(samples_per_vertex, seed)
    normals = mesh.normals / norms[:, None]
    coeffs = _transfer_for_points(mesh.vertices, lambda i: normals[i], caster, sampler,
                                  bands, offset)
    return VertexTransfer(bands, coeffs, normals.copy(), samples_per_vertex, seed)


def cosine_lobe_coefficients(normal, bands: int) -> np.ndarray:
    """Closed-form SH coefficients of ``max(0, n.w)``."""
    out = np.zeros(bands * bands)
    for l in range(bands):
        if l == 0:
            a = math.pi
        elif l == 1:
            a = 2.0 * math.pi / 3.0
        elif l % 2:
            a = 0.0
        else:
            a = (2.0 * math.pi * (-1) ** (l // 2 - 1) / ((l + 2) * (l - 1))
                 * math.factorial(l) / (2 ** l * math.factorial(l // 2) ** 2))
        for m in range(-l, l + 1):
            out[sh_index(l, m)] = a * sh_basis(l, m, normal)
    return out


def irradiance(transfer, env: ShCoefficients, clamp: bool = True) -> np.ndarray:
    """``E = sum_lm T_lm c_lm`` per colour channel.

    ``transfer`` is a :class:`VertexTransfer` or a raw ``(..., bands**2)``
    array.  Negative values from SH ringing are clamped to zero unless
    ``clamp`` is false.
    """
    if isinstance(transfer, VertexTransfer):
        if transfer.bands != env.bands:
            raise BandMismatchError(f"transfer has {transfer.bands} bands, env {env.bands}")
        t = transfer.coeffs
    else:
        t = np.asarray(transfer, dtype=np.float64)
        if t.shape[-1] != env.bands * env.bands:
            raise BandMismatchError("transfer and environment band counts differ")
    e = t @ env.coeffs.T
    return np.maximum(e, 0.0) if clamp else e


# --------------------------------------------------------------------------
# shadow plane
# --------------------------------------------------------------------------

@dataclass
class ShadowGrid:
    """Transfer samples on a plane under the object.

    The plane spans ``[-half_extent, half_extent]`` along both in-plane axes
    around ``origin``; cell ``(i, j)`` is centred at ``s_i`` along ``axis_u``
    and ``t_j`` along ``axis_v``.
    """

    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_extent: float
    grid_size: int
    bands: int
    occluded: np.ndarray        # (G, G, bands**2)
    free: np.ndarray            # (G, G, bands**2)

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_v, self.axis_u)
        return n / np.linalg.norm(n)

    def cell_coords(self) -> np.ndarray:
        g = self.grid_size
        return ((np.arange(g) + 0.5) / g * 2.0 - 1.0) * self.half_extent

    def cell_centres(self) -> np.ndarray:
        c = self.cell_coords()
        s, t = np.meshgrid(c, c, indexing="ij")
        return self.origin + s[..., None] * self.axis_u + t[..., None] * self.axis_v


def shadow_plane_for(mesh: TriangleMesh, extent_factor: float = 2.0, up=(0.0, 1.0, 0.0)):
    """Axis-aligned plane at the bottom of the mesh's bounding box.

    Returns ``(origin, axis_u, axis_v, half_extent)`` with the normal
    ``axis_v x axis_u`` pointing up.
    """
    lo, hi = mesh.bounds()
    _, radius = mesh.bounding_sphere()
    origin = np.array([0.5 * (lo[0] + hi[0]), lo[1], 0.5 * (lo[2] + hi[2])])
    return origin, np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), extent_factor * radius


def precompute_shadow_grid(mesh: TriangleMesh, plane=None, grid_size: int = 32,
                           samples: int = 1024, bands: int = 5, seed: int = 0,
                           offset: float = 1e-4) -> ShadowGrid:
    """Occluded and free transfer at every cell centre of the plane."""
    if plane is None:
        plane = shadow_plane_for(mesh)
    origin, axis_u, axis_v, half = plane
    grid = ShadowGrid(np.asarray(origin, float), np.asarray(axis_u, float),
                      np.asarray(axis_v, float), float(half), grid_size, bands,
                      np.zeros((grid_size, grid_size, bands * bands)),
                      np.zeros((grid_size, grid_size, bands * bands)))
    n = grid.normal
    pts = grid.cell_centres().reshape(-1, 3)
    sampler = DirectionSampler(samples, seed)
    caster = RayCaster(mesh)
    # index base keeps plane sampling streams disjoint from vertex streams
    base = 1 << 30
    occ = _transfer_for_points(pts, lambda i: n, caster, sampler, bands, offset, base)
    free = _transfer_for_points(pts, lambda i: n, None, sampler, bands, offset, base)
    grid.occluded[:] = occ.reshape(grid_size, grid_size, -1)
    grid.free[:] = free.reshape(grid_size, grid_size, -1)
    return grid


_LUMA = np.array([0.2126, 0.7152, 0.0722])


def shadow_alpha(e_occluded, e_free) -> np.ndarray:
    """``clamp(1 - E_occ / E_free, 0, 1)`` with alpha 0 where ``E_free < 1e-6``."""
    e_occ = np.asarray(e_occluded, dtype=np.float64)
    e_free = np.asarray(e_free, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = 1.0 - e_occ / e_free
    alpha = np.where(e_free < 1e-6, 0.0, np.clip(alpha, 0.0, 1.0))
    return alpha


def grid_alpha(grid: ShadowGrid, env: ShCoefficients) -> np.ndarray:
    """Per-cell alpha from luminance irradiance with and without the object."""
    if grid.bands != env.bands:
        raise BandMismatchError("shadow grid and environment band counts differ")
    e_occ = irradiance(grid.occluded, env) @ _LUMA
    e_free = irradiance(grid.free, env) @ _LUMA
    return shadow_alpha(e_occ, e_free)


def sample_alpha(grid: ShadowGrid, alpha: np.ndarray, s, t) -> np.ndarray:
    """Bilinear interpolation of cell alphas at plane coordinates ``(s, t)``.

    Outside the plane the result is 0; between the outermost cell centres
    and the plane edge the edge values are held.
    """
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    g = grid.grid_size
    inside = (np.abs(s) <= grid.half_extent) & (np.abs(t) <= grid.half_extent)
    fs = np.clip((s / grid.half_extent + 1.0) * 0.5 * g - 0.5, 0.0, g - 1.0)
    ft = np.clip((t / grid.half_extent + 1.0) * 0.5 * g - 0.5, 0.0, g - 1.0)
    i0 = np.clip(np.floor(fs).astype(np.int64), 0, max(g - 2, 0))
    j0 = np.clip(np.floor(ft).astype(np.int64), 0, max(g - 2, 0))
    i1 = np.minimum(i0 + 1, g - 1)
    j1 = np.minimum(j0 + 1, g - 1)
    a = fs - i0
    b = ft - j0
    val = ((1 - a) * (1 - b) * alpha[i0, j0] + a * (1 - b) * alpha[i1, j0]
           + (1 - a) * b * alpha[i0, j1] + a * b * alpha[i1, j1])
    return np.where(inside, val, 0.0)


# --------------------------------------------------------------------------
# caches
# --------------------------------------------------------------------------

class TransferCache:
    """Transfer / shadow-grid cache keyed by mesh hash, bands and sample count."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, kind: str, mesh: TriangleMesh, bands: int, samples: int, extra: str = ""):
        return self.directory / f"{kind}_{mesh.digest()}_b{bands}_n{samples}{extra}.npz"

    def transfer(self, mesh: TriangleMesh, samples: int, bands: int, seed: int = 0) -> VertexTransfer:
        path = self._path("transfer", mesh, bands, samples, f"_s{seed}")
        if path.exists():
            with np.load(path) as data:
                return VertexTransfer(bands, data["coeffs"], data["normals"], samples, seed)
        tr = precompute_transfer(mesh, samples, bands, seed)
        self.directory.mkdir(parents=True, exist_ok=True)
        np.savez(path, coeffs=tr.coeffs, normals=tr.normals)
        return tr

    def shadow_grid(self, mesh: TriangleMesh, grid_size: int, samples: int, bands: int,
                    seed: int = 0, extent_factor: float = 2.0) -> ShadowGrid:
        path = self._path("shadow", mesh, bands, samples,
                          f"_g{grid_size}_e{extent_factor:g}_s{seed}")
        if path.exists():
            with np.load(path) as data:
                return ShadowGrid(data["origin"], data["axis_u"], data["axis_v"],
                                  float(data["half_extent"]), grid_size, bands,
                                  data["occluded"], data["free"])
        grid = precompute_shadow_grid(mesh, shadow_plane_for(mesh, extent_factor), grid_size,
                                      samples, bands, seed)
        self.directory.mkdir(parents=True, exist_ok=True)
        np.savez(path, origin=grid.origin, axis_u=grid.axis_u, axis_v=grid.axis_v,
                 half_extent=grid.half_extent, occluded=grid.occluded, free=grid.free)
        return grid
