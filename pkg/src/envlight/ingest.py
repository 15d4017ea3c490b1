"""RGB-D frame generation from a colour image and a depth point cloud."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, RigidPose, project_points, undistort

MAX_CLOUD_POINTS = 38528

# scan order used by fill_holes: E, NE, N, NW, W, SW, S, SE (image y grows down)
FILL_DIRECTIONS = ((1, 0), (1, -1), (0, -1), (-1, -1),
                   (-1, 0), (-1, 1), (0, 1), (1, 1))


class MalformedInputError(ValueError):
    """Raised for buffers or files whose size or layout is wrong."""


@dataclass(frozen=True)
class Calibration:
    depth_camera: CameraModel
    colour_camera: CameraModel
    # maps depth-sensor-frame points into the colour-camera frame
    depth_to_colour: RigidPose = field(default_factory=RigidPose)

    def to_dict(self) -> dict:
        return {"depth_camera": self.depth_camera.to_dict(),
                "colour_camera": self.colour_camera.to_dict(),
                "depth_to_colour": self.depth_to_colour.as_matrix().reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(CameraModel.from_dict(d["depth_camera"]),
                   CameraModel.from_dict(d["colour_camera"]),
                   RigidPose.from_matrix(d.get("depth_to_colour", np.eye(4).reshape(-1))))


@dataclass
class PointCloud:
    points: np.ndarray          # (N, 3) depth-sensor frame, meters
    confidence: np.ndarray      # (N,)
    pose: RigidPose = field(default_factory=RigidPose)
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.confidence):
            raise MalformedInputError("points and confidences differ in length")
        if np.any((self.confidence < 0) | (self.confidence > 1)):
            raise MalformedInputError("confidence outside [0, 1]")
        if len(self.points) > MAX_CLOUD_POINTS:
            warnings.warn(f"point cloud has {len(self.points)} points, "
                          f"more than the sensor maximum of {MAX_CLOUD_POINTS}")


@dataclass
class RgbdFrame:
    """Per-pixel linear RGB, z-depth, confidence and reliability.

    ``depth == 0`` marks an unknown depth.  ``filled`` flags depths estimated
    by :func:`fill_holes`; those are never reliable.
    """

    rgb: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    has_colour: np.ndarray
    reliable: np.ndarray
    filled: np.ndarray
    pose: RigidPose = field(default_factory=RigidPose)
    timestamp: float = 0.0

    @classmethod
    def empty(cls, width: int, height: int, pose=None, timestamp: float = 0.0):
        return cls(rgb=np.zeros((height, width, 3)),
                   depth=np.zeros((height, width)),
                   confidence=np.zeros((height, width)),
                   has_colour=np.zeros((height, width), dtype=bool),
                   reliable=np.zeros((height, width), dtype=bool),
                   filled=np.zeros((height, width), dtype=bool),
                   pose=pose if pose is not None else RigidPose(),
                   timestamp=timestamp)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def known(self) -> np.ndarray:
        return self.depth > 0

    def copy(self) -> "RgbdFrame":
        return RgbdFrame(self.rgb.copy(), self.depth.copy(), self.confidence.copy(),
                         self.has_colour.copy(), self.reliable.copy(),
                         self.filled.copy(), self.pose, self.timestamp)


# --------------------------------------------------------------------------
# colour decoding
# --------------------------------------------------------------------------

def decode_nv21(data: bytes, width: int, height: int) -> np.ndarray:
    """Decode a Y'UV420sp (NV21) buffer with full-range BT.601 to 8-bit RGB."""
    if width % 2 or height % 2:
        raise MalformedInputError("NV21 needs even image dimensions")
    expected = width * height * 3 // 2
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size != expected:
        raise MalformedInputError(
            f"NV21 buffer has {buf.size} bytes, expected {expected}")
    y = buf[:width * height].reshape(height, width).astype(np.float64)
    vu = buf[width * height:].reshape(height // 2, width // 2, 2).astype(np.float64)
    v = np.repeat(np.repeat(vu[..., 0], 2, axis=0), 2, axis=1) - 128.0
    u = np.repeat(np.repeat(vu[..., 1], 2, axis=0), 2, axis=1) - 128.0
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def encode_nv21(rgb8: np.ndarray) -> bytes:
    """Inverse of :func:`decode_nv21` with 2x2 chroma averaging."""
    rgb = np.asarray(rgb8, dtype=np.float64)
    h, w = rgb.shape[:2]
    if w % 2 or h % 2:
        raise MalformedInputError("NV21 needs even image dimensions")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    u = u.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    v = v.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    y8 = np.clip(np.round(y), 0, 255).astype(np.uint8)
    vu = np.stack([v, u], axis=-1)
    vu8 = np.clip(np.round(vu), 0, 255).astype(np.uint8)
    return y8.tobytes() + vu8.tobytes()


def srgb_to_linear(rgb8) -> np.ndarray:
    """IEC 61966-2-1 decoding of 8-bit (or [0, 255] float) codes."""
    c = np.asarray(rgb8, dtype=np.float64) / 255.0
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(linear) -> np.ndarray:
    """sRGB encoding of linear values, result in [0, 1]."""
    c = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def linear_to_srgb8(linear) -> np.ndarray:
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def load_colour(path, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Read an 8-bit RGB image file, or a raw ``.nv21``/``.yuv`` blob."""
    path = Path(path)
    if path.suffix.lower() in (".nv21", ".yuv"):
        if width is None or height is None:
            raise MalformedInputError("raw NV21 input needs the image size")
        return decode_nv21(path.read_bytes(), width, height)
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_point_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    """Little-endian float32 records ``(x, y, z, confidence)``."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise MalformedInputError(f"{path}: size is not a multiple of 16 bytes")
    rec = raw.reshape(-1, 4).astype(np.float64)
    return rec[:, :3], rec[:, 3]


def write_point_cloud(path, points, confidence) -> None:
    rec = np.column_stack([np.asarray(points).reshape(-1, 3),
                           np.asarray(confidence).reshape(-1)])
    rec.astype("<f4").tofile(path)


# --------------------------------------------------------------------------
# point cloud -> RGB-D
# --------------------------------------------------------------------------

def _pixel_index(px: np.ndarray, width: int, height: int):
    u = np.floor(px[:, 0] + 0.5).astype(np.int64)
    v = np.floor(px[:, 1] + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return u, v, inside


def _depth_to_colour(cloud_pose: RigidPose, calib: Calibration,
                     colour_pose: RigidPose | None) -> RigidPose:
    if colour_pose is None:
        return calib.depth_to_colour
    return colour_pose.inverse().compose(cloud_pose)


def pointcloud_to_rgbd(cloud: PointCloud, colour: np.ndarray, calib: Calibration,
                       colour_pose: RigidPose | None = None,
                       min_confidence: float = 0.7) -> RgbdFrame:
    """Pair cloud points with colour and splat them onto the depth-sensor grid.

    ``colour`` is the linearized colour image.  ``colour_pose`` is the
    colour camera's camera-to-world pose at capture time; when omitted the
    static ``calib.depth_to_colour`` extrinsic is used.  Points below
    ``min_confidence`` are dropped and colliding points keep the smaller
    z-depth (ties by input order).
    """
    dcam = calib.depth_camera
    frame = RgbdFrame.empty(dcam.width, dcam.height, cloud.pose, cloud.timestamp)
    if len(cloud.points) == 0:
        return frame

    idx = np.nonzero(cloud.confidence >= min_confidence)[0]
    pts = cloud.points[idx]
    conf = cloud.confidence[idx]

    to_colour = _depth_to_colour(cloud.pose, calib, colour_pose)
    ccam = calib.colour_camera
    cpx, c_front = project_points(to_colour.apply(pts), ccam)
    cu, cv, c_in = _pixel_index(cpx, ccam.width, ccam.height)

    dpx, d_front = project_points(pts, dcam)
    du, dv, d_in = _pixel_index(dpx, dcam.width, dcam.height)

    keep = c_front & c_in & d_front & d_in
    if not np.any(keep):
        return frame
    order_idx = np.nonzero(keep)[0]
    z = pts[order_idx, 2]
    flat = dv[order_idx] * dcam.width + du[order_idx]
    # z-buffer: sort by pixel, then depth, then original index
    order = np.lexsort((idx[order_idx], z, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = order_idx[order[first]]
    target = flat_sorted[first]

    rgb = frame.rgb.reshape(-1, 3)
    rgb[target] = colour[cv[win], cu[win]]
    frame.depth.reshape(-1)[target] = pts[win, 2]
    frame.confidence.reshape(-1)[target] = conf[win]
    frame.has_colour.reshape(-1)[target] = True
    return frame


# --------------------------------------------------------------------------
# reliability and hole filling
# --------------------------------------------------------------------------

def _shifted(a: np.ndarray, dx: int, dy: int, fill):
    """``out[y, x] = a[y + dy, x + dx]`` with out-of-range cells set to ``fill``."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def depth_flatness_chi2(depth: np.ndarray, sigma: float = 0.01) -> np.ndarray:
    """Chi-square flatness statistic over each known pixel's 3x3 neighbourhood.

    Only known depths take part; the centre is included so a full
    neighbourhood has 9 samples and 8 degrees of freedom.
    """
    known = depth > 0
    offsets = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    vals = [_shifted(depth, dx, dy, 0.0) for dx, dy in offsets]
    masks = [_shifted(known, dx, dy, False) for dx, dy in offsets]
    count = np.zeros(depth.shape)
    total = np.zeros(depth.shape)
    for d, m in zip(vals, masks):
        count += m
        total += np.where(m, d, 0.0)
    mean = total / np.maximum(count, 1)
    ss = np.zeros(depth.shape)
    for d, m in zip(vals, masks):
        ss += np.where(m, (d - mean) ** 2, 0.0)
    chi2 = ss / (sigma * sigma)
    return np.where(known, chi2, np.inf)


def exposure_ok(rgb: np.ndarray, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    """False where all channels are under-exposed or all are over-exposed."""
    under = np.all(rgb < low, axis=-1)
    over = np.all(rgb > high, axis=-1)
    return ~(under | over)


def label_reliability(frame: RgbdFrame, sigma: float = 0.01,
                      chi2_threshold: float = 20.09,
                      exposure: tuple[float, float] = (0.05, 0.95)) -> np.ndarray:
    """Reliability mask computed before hole filling.

    A pixel is reliable when its depth is measured, it has colour, it is not
    under- or over-exposed, and its depth neighbourhood passes the flatness
    test.  The mask is stored on the frame and returned.
    """
    measured = frame.known & ~frame.filled & frame.has_colour
    flat = depth_flatness_chi2(np.where(frame.filled, 0.0, frame.depth), sigma) <= chi2_threshold
    reliable = measured & flat & exposure_ok(frame.rgb, *exposure)
    frame.reliable = reliable
    return reliable


def fill_holes(frame: RgbdFrame, reliable: np.ndarray | None = None) -> RgbdFrame:
    """Estimate unknown depths from the nearest reliable pixel in 8 directions.

    Each direction that reaches a reliable pixel after ``k`` steps
    (Chebyshev distance) contributes its depth with weight ``(w - k) / w``.
    Pixels for which no direction hits stay unknown.
    """
    if reliable is None:
        reliable = frame.reliable
    out = frame.copy()
    h, w = frame.depth.shape
    holes_y, holes_x = np.nonzero(~frame.known)
    if holes_y.size == 0:
        return out
    num = np.zeros(holes_y.size)
    den = np.zeros(holes_y.size)
    src_depth = np.where(reliable, frame.depth, 0.0)
    for dx, dy in FILL_DIRECTIONS:
        found_d = np.zeros(holes_y.size)
        found_k = np.zeros(holes_y.size)
        pending = np.ones(holes_y.size, dtype=bool)
        for k in range(1, max(w, h)):
            x = holes_x + k * dx
            y = holes_y + k * dy
            inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
            pending &= inside
            if not np.any(pending):
                break
            sel = np.nonzero(pending)[0]
            hit = reliable[y[sel], x[sel]]
            hit_idx = sel[hit]
            found_d[hit_idx] = src_depth[y[hit_idx], x[hit_idx]]
            found_k[hit_idx] = k
            pending[hit_idx] = False
        weight = np.where(found_k > 0, (w - found_k) / w, 0.0)
        num = num + weight * found_d
        den = den + weight
    ok = den > 0
    est = np.zeros(holes_y.size)
    est[ok] = num[ok] / den[ok]
    out.depth[holes_y[ok], holes_x[ok]] = est[ok]
    out.filled[holes_y[ok], holes_x[ok]] = True
    out.reliable[holes_y, holes_x] = False
    return out


def backproject(frame: RgbdFrame, camera: CameraModel, mask: np.ndarray | None = None):
    """Depth-sensor-frame 3D points for the pixels in ``mask``.

    Returns ``(points, ys, xs)``.
    """
    if mask is None:
        mask = frame.known
    ys, xs = np.nonzero(mask)
    px = np.stack([xs, ys], axis=-1).astype(np.float64)
    norm = undistort(px, camera)
    z = frame.depth[ys, xs]
    pts = np.column_stack([norm[:, 0] * z, norm[:, 1] * z, z])
    return pts, ys, xs


def colourize_filled(frame: RgbdFrame, colour: np.ndarray, calib: Calibration,
                     colour_pose: RigidPose | None = None) -> RgbdFrame:
    """Fetch colour for hole-filled pixels by projecting them into the colour image."""
    mask = frame.filled & ~frame.has_colour
    if not np.any(mask):
        return frame
    pts, ys, xs = backproject(frame, calib.depth_camera, mask)
    to_colour = _depth_to_colour(frame.pose, calib, colour_pose)
    ccam = calib.colour_camera
    cpx, front = project_points(to_colour.apply(pts), ccam)
    cu, cv, inside = _pixel_index(cpx, ccam.width, ccam.height)
    ok = front & inside
    frame.rgb[ys[ok], xs[ok]] = colour[cv[ok], cu[ok]]
    frame.has_colour[ys[ok], xs[ok]] = True
    return frame
