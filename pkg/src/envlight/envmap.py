"""RGB-D equirectangular environment maps.

An :class:`EnvironmentMap` stores linear RGB radiance and radial depth (the
Euclidean distance from the map origin along the pixel direction) for every
direction around its origin.  Invalid pixels hold zeros and ``valid=False``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, dir_to_pixel, em_direction_grid, em_latitudes
from .ingest import RgbdFrame, backproject

EMAP_MAGIC = b"EMAP"
EMAP_VERSION = 1
_HEADER = struct.Struct("<4sHII3d")


class EmapFormatError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class EnvironmentMap:
    rgb: np.ndarray             # (H, W, 3) float32
    depth: np.ndarray           # (H, W) float32, 0 where invalid
    valid: np.ndarray           # (H, W) bool
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)

    @classmethod
    def empty(cls, width: int = 2000, height: int = 1000, origin=(0.0, 0.0, 0.0)):
        return cls(np.zeros((height, width, 3), np.float32),
                   np.zeros((height, width), np.float32),
                   np.zeros((height, width), bool), origin)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def copy(self) -> "EnvironmentMap":
        return EnvironmentMap(self.rgb.copy(), self.depth.copy(), self.valid.copy(),
                              self.origin.copy())

    def clear_invalid(self) -> None:
        self.rgb[~self.valid] = 0.0
        self.depth[~self.valid] = 0.0

    def points(self) -> np.ndarray:
        """Global 3D point of every pixel, ``(H, W, 3)`` (meaningless where invalid)."""
        dirs = em_direction_grid(self.width, self.height)
        return self.origin + dirs * self.depth[..., None].astype(np.float64)


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def save_emap(em: EnvironmentMap, path) -> None:
    """Binary layout: header ``'EMAP', u16 version, u32 W, u32 H, 3 f64
    origin`` followed by row-major float32 ``(R, G, B, depth, valid)``."""
    data = np.empty((em.height, em.width, 5), dtype="<f4")
    valid = em.valid
    data[..., :3] = np.where(valid[..., None], em.rgb, 0.0)
    data[..., 3] = np.where(valid, em.depth, 0.0)
    data[..., 4] = valid
    with open(Path(path), "wb") as fh:
        fh.write(_HEADER.pack(EMAP_MAGIC, EMAP_VERSION, em.width, em.height,
                              *em.origin.tolist()))
        fh.write(data.tobytes())


def load_emap(path) -> EnvironmentMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmapFormatError(f"{path}: truncated header")
    magic, version, width, height, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != EMAP_MAGIC:
        raise EmapFormatError(f"{path}: bad magic {magic!r}")
    if version != EMAP_VERSION:
        raise EmapFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + width * height * 5 * 4
    if len(raw) != expected:
        raise EmapFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(height, width, 5)
    valid = data[..., 4] > 0.5
    return EnvironmentMap(data[..., :3].copy(), data[..., 3].copy(), valid, (ox, oy, oz))


def tonemap_preview(em: EnvironmentMap, exposure: float = 1.0,
                    checker: int = 16) -> np.ndarray:
    """8-bit preview with gamma 1/2.2; invalid pixels drawn as a checkerboard."""
    img = np.clip(em.rgb.astype(np.float64) * exposure, 0.0, 1.0) ** (1.0 / 2.2)
    out = np.round(img * 255.0).astype(np.uint8)
    yy, xx = np.mgrid[0:em.height, 0:em.width]
    board = np.where(((yy // checker) + (xx // checker)) % 2 == 0, 200, 120).astype(np.uint8)
    out[~em.valid] = board[~em.valid, None]
    return out


def save_preview(em: EnvironmentMap, path, exposure: float = 1.0) -> None:
    from PIL import Image

    Image.fromarray(tonemap_preview(em, exposure)).save(path)


# --------------------------------------------------------------------------
# adaptive update
# --------------------------------------------------------------------------

class UpdateDecision(enum.IntEnum):
    REPLACE = 0
    MEAN_DEPTH_UPDATE = 1
    REJECTED_FAR = 2
    REJECTED_BACKFACE = 3
    REJECTED_RAY_DISTANCE = 4


@dataclass
class UpdateStats:
    counts: dict = field(default_factory=lambda: {d: 0 for d in UpdateDecision})

    @property
    def candidates(self) -> int:
        return sum(self.counts.values())

    @property
    def written(self) -> int:
        return self.counts[UpdateDecision.REPLACE] + self.counts[UpdateDecision.MEAN_DEPTH_UPDATE]

    @property
    def rejected(self) -> int:
        return self.candidates - self.written


def _decide(valid_old, r_old, r_new, xhat, device_rel, trusted: bool,
            ray_threshold: float, allow_removal: bool = True) -> np.ndarray:
    """Vectorised update decision for candidates against the current map state."""
    n = len(r_new)
    if trusted:
        return np.full(n, UpdateDecision.REPLACE, dtype=np.int64)
    decision = np.full(n, UpdateDecision.MEAN_DEPTH_UPDATE, dtype=np.int64)
    decision[~valid_old] = UpdateDecision.REPLACE
    farther = valid_old & (r_new > r_old)
    if not allow_removal:
        decision[farther] = UpdateDecision.REJECTED_FAR
        return decision
    t = xhat @ device_rel
    backface = farther & ((t > r_old) | (t > r_new))
    # distance from the device to the ray (origin, xhat); behind the origin
    # the closest ray point is the origin itself
    foot = np.maximum(t, 0.0)[:, None] * xhat
    ray_dist = np.linalg.norm(device_rel[None, :] - foot, axis=1)
    too_far = farther & ~backface & (ray_dist > ray_threshold)
    decision[backface] = UpdateDecision.REJECTED_BACKFACE
    decision[too_far] = UpdateDecision.REJECTED_RAY_DISTANCE
    return decision


def lift_frame(frame: RgbdFrame, camera: CameraModel, mask: np.ndarray | None = None):
    """Global points of depth-known, coloured pixels in scan order."""
    if mask is None:
        mask = frame.known & frame.has_colour
    pts, ys, xs = backproject(frame, camera, mask)
    return frame.pose.apply(pts), frame.rgb[ys, xs]


def project_frame_to_em(frame: RgbdFrame, em: EnvironmentMap, device_position,
                        camera: CameraModel, trusted_radius: float = 0.10,
                        ray_threshold: float = 0.03,
                        allow_removal: bool = True) -> UpdateStats:
    """Write a colour-corrected frame into ``em`` in place.

    Decision order per candidate pixel: trusted volume, empty target, closer
    surface (mean depth), then the removal checks (backface, ray distance).
    Colour is always replaced on a write; depth becomes the mean of the old
    and new values except on ``REPLACE``.  Candidates are committed in frame
    scan order so several candidates landing on one EM pixel see each other's
    writes.  With ``allow_removal=False`` farther candidates are rejected
    outright (``REJECTED_FAR``), i.e. a pure closest-surface map.
    """
    stats = UpdateStats()
    world, colours = lift_frame(frame, camera)
    if len(world) == 0:
        return stats
    rel = world - em.origin
    r_new = np.linalg.norm(rel, axis=1)
    ok = r_new > 1e-9
    rel, r_new, colours = rel[ok], r_new[ok], colours[ok]
    xhat = rel / r_new[:, None]
    u, v = dir_to_pixel(xhat, em.width, em.height)
    flat = v * em.width + u

    device_rel = np.asarray(device_position, dtype=np.float64) - em.origin
    trusted = bool(np.linalg.norm(device_rel) < trusted_radius)

    em_rgb = em.rgb.reshape(-1, 3)
    em_depth = em.depth.reshape(-1)
    em_valid = em.valid.reshape(-1)

    # k-th occurrence of each target pixel, in scan order; all candidates of
    # one round hit distinct pixels, so rounds replay the sequential commit
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    starts = np.r_[True, sorted_flat[1:] != sorted_flat[:-1]]
    group_start = np.maximum.accumulate(np.where(starts, np.arange(len(order)), 0))
    occurrence = np.empty(len(order), dtype=np.int64)
    occurrence[order] = np.arange(len(order)) - group_start
    for k in range(int(occurrence.max()) + 1 if len(occurrence) else 0):
        idx = np.nonzero(occurrence == k)[0]
        tgt = flat[idx]
        r_old = em_depth[tgt].astype(np.float64)
        dec = _decide(em_valid[tgt], r_old, r_new[idx], xhat[idx], device_rel, trusted,
                      ray_threshold, allow_removal)
        _commit(em_rgb, em_depth, em_valid, tgt, dec, colours[idx], r_old, r_new[idx])
        for d in UpdateDecision:
            stats.counts[d] += int(np.sum(dec == d))
    return stats


def _commit(em_rgb, em_depth, em_valid, tgt, dec, colours, r_old, r_new) -> None:
    rep = dec == UpdateDecision.REPLACE
    mean = dec == UpdateDecision.MEAN_DEPTH_UPDATE
    em_rgb[tgt[rep]] = colours[rep]
    em_depth[tgt[rep]] = r_new[rep]
    em_valid[tgt[rep]] = True
    em_rgb[tgt[mean]] = colours[mean]
    em_depth[tgt[mean]] = 0.5 * (r_old[mean] + r_new[mean])
    em_valid[tgt[mean]] = True


# --------------------------------------------------------------------------
# translation operators
# --------------------------------------------------------------------------

@dataclass
class TranslationResult:
    em: EnvironmentMap
    mode: str
    dropped: int = 0
    merged: int = 0


def _splat_nearest(flat_target: np.ndarray, depth32: np.ndarray, n_pixels: int):
    """Nearest-depth winner per target pixel, ties by source order.

    Returns ``(targets, winner_positions)``.
    """
    # positive float32 bit patterns sort like the floats themselves
    key = (depth32.view(np.uint32).astype(np.uint64) << np.uint64(32)) | \
        np.arange(len(depth32), dtype=np.uint64)
    best = np.full(n_pixels, np.iinfo(np.uint64).max, dtype=np.uint64)
    np.minimum.at(best, flat_target, key)
    targets = np.nonzero(best != np.iinfo(np.uint64).max)[0]
    winners = (best[targets] & np.uint64(0xFFFFFFFF)).astype(np.int64)
    return targets, winners


def translate_em(em: EnvironmentMap, new_origin, mode: str = "temporary",
                 min_depth: float = 1e-6) -> TranslationResult:
    """Re-project every valid pixel's 3D point from ``new_origin``.

    The source map is never modified.  ``mode`` is carried on the result for
    the caller: ``"permanent"`` means the returned map replaces the source
    for future updates, ``"temporary"`` means it is only used for lighting
    while acquisition continues into the source map.
    """
    if mode not in ("permanent", "temporary"):
        raise ValueError(f"unknown translation mode {mode!r}")
    new_origin = np.asarray(new_origin, dtype=np.float64).reshape(3)
    out = EnvironmentMap.empty(em.width, em.height, new_origin)
    vs, us = np.nonzero(em.valid)
    if vs.size == 0:
        return TranslationResult(out, mode)
    dirs = em_direction_grid(em.width, em.height)[vs, us]
    pts = em.origin + dirs * em.depth[vs, us, None].astype(np.float64)
    rel = pts - new_origin
    r = np.linalg.norm(rel, axis=1)
    keep = r > min_depth
    dropped = int(np.sum(~keep))
    rel, r, vs, us = rel[keep], r[keep], vs[keep], us[keep]
    nu, nv = dir_to_pixel(rel / r[:, None], em.width, em.height)
    r32 = r.astype(np.float32)
    targets, winners = _splat_nearest(nv * em.width + nu, r32, em.width * em.height)
    out.rgb.reshape(-1, 3)[targets] = em.rgb[vs[winners], us[winners]]
    out.depth.reshape(-1)[targets] = r32[winners]
    out.valid.reshape(-1)[targets] = True
    return TranslationResult(out, mode, dropped=dropped, merged=int(len(r) - len(targets)))


def _sphere_exit(origin_rel: np.ndarray, dirs: np.ndarray, radius: float) -> np.ndarray:
    """Distance along ``dirs`` from a point inside a sphere (centred at 0) to its surface."""
    b = dirs @ origin_rel
    c = origin_rel @ origin_rel - radius * radius
    return -b + np.sqrt(b * b - c)


def warp_em_distant(em: EnvironmentMap, translation, sphere_radius: float = 10.0) -> EnvironmentMap:
    """Distant-environment warp baseline (depth is ignored).

    Each output direction from the translated origin is intersected with a
    sphere of ``sphere_radius`` around the old origin and looks up the source
    pixel in that direction.  Output depth is the distance to the sphere.
    """
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if sphere_radius <= np.linalg.norm(t):
        raise ValueError("sphere radius must exceed the translation length")
    out = EnvironmentMap.empty(em.width, em.height, em.origin + t)
    dirs = em_direction_grid(em.width, em.height).reshape(-1, 3)
    s = _sphere_exit(t, dirs, sphere_radius)
    q = t + s[:, None] * dirs
    su, sv = dir_to_pixel(q / np.linalg.norm(q, axis=1, keepdims=True), em.width, em.height)
    valid = em.valid[sv, su]
    out.rgb.reshape(-1, 3)[valid] = em.rgb[sv[valid], su[valid]]
    out.depth.reshape(-1)[valid] = s[valid]
    out.valid.reshape(-1)[valid] = True
    return out


def angular_displacement(em: EnvironmentMap, translation, sphere_radius: float | None = None):
    """Angle (radians) each valid pixel moves under a translation.

    With ``sphere_radius=None`` the stored depths are used (the
    depth-aware operator); otherwise every pixel is assumed to lie on a
    sphere of that radius (the distant-environment warp).
    """
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    vs, us = np.nonzero(em.valid)
    dirs = em_direction_grid(em.width, em.height)[vs, us]
    if sphere_radius is None:
        depth = em.depth[vs, us].astype(np.float64)
    else:
        depth = np.full(len(vs), float(sphere_radius))
    rel = dirs * depth[:, None] - t
    new_dirs = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    cosang = np.clip(np.sum(dirs * new_dirs, axis=1), -1.0, 1.0)
    return np.arccos(cosang)


# --------------------------------------------------------------------------
# fidelity metrics
# --------------------------------------------------------------------------

def _check_dims(a: EnvironmentMap, b: EnvironmentMap) -> None:
    if a.depth.shape != b.depth.shape:
        raise ValueError(f"map dimensions differ: {a.depth.shape} vs {b.depth.shape}")


def data_loss(em: EnvironmentMap, ground_truth: EnvironmentMap) -> float:
    """Fraction of ground-truth-valid pixels that are invalid in ``em``."""
    _check_dims(em, ground_truth)
    total = int(np.sum(ground_truth.valid))
    if total == 0:
        return 0.0
    return float(np.sum(ground_truth.valid & ~em.valid)) / total


def weighted_correlation(em_a: EnvironmentMap, em_b: EnvironmentMap) -> float:
    """Latitude-weighted Pearson correlation, averaged over colour channels."""
    _check_dims(em_a, em_b)
    mutual = em_a.valid & em_b.valid
    if int(np.sum(mutual)) < 2:
        raise UndefinedCorrelationError("fewer than two mutually valid pixels")
    weights = np.broadcast_to(np.cos(em_latitudes(em_a.height))[:, None], mutual.shape)[mutual]
    weights = weights / weights.sum()
    a = em_a.rgb[mutual].astype(np.float64)
    b = em_b.rgb[mutual].astype(np.float64)
    corr = []
    for ch in range(3):
        da = a[:, ch] - weights @ a[:, ch]
        db = b[:, ch] - weights @ b[:, ch]
        var_a = weights @ (da * da)
        var_b = weights @ (db * db)
        # float32 inputs leave rounding-level variance on constant channels
        if var_a <= 1e-12 * (weights @ (a[:, ch] ** 2)) or var_b <= 1e-12 * (weights @ (b[:, ch] ** 2)):
            raise UndefinedCorrelationError(f"zero variance in channel {ch}")
        corr.append((weights @ (da * db)) / np.sqrt(var_a * var_b))
    return float(np.mean(corr))
