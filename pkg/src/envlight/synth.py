"""Synthetic RGB-D scenes with exact ground truth.

A scene is an axis-aligned room with flat-coloured faces plus coloured and
emissive rectangles.  Frames are produced by analytic ray casting, so the
exact radiance and radial depth of every direction is known.  Surface
colours are given as 8-bit sRGB codes, which makes their linear radiance
exactly representable after an 8-bit round trip.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from .envmap import EnvironmentMap
from .geometry import CameraModel, RigidPose, em_direction_grid, look_at, pixel_rays
from .ingest import (Calibration, PointCloud, linear_to_srgb, linear_to_srgb8, srgb_to_linear,
                     write_point_cloud)

DEPTH_RATE_HZ = 5.0
COLOUR_RATE_HZ = 30.0

ROOM_FACES = ("x-", "x+", "y-", "y+", "z-", "z+")


class OutsideRoomError(ValueError):
    pass


@dataclass
class Rectangle:
    """Flat rectangle ``centre ± axis_u ± axis_v`` (half-axes, meters), visible from both sides."""

    centre: tuple
    axis_u: tuple
    axis_v: tuple
    colour: tuple                    # 8-bit sRGB code
    emissive: bool = False
    present_until: float | None = None   # removed at this time (seconds)

    def present(self, t: float) -> bool:
        return self.present_until is None or t < self.present_until


@dataclass
class SyntheticScene:
    room_lo: tuple = (-2.0, -1.2, -2.0)
    room_hi: tuple = (2.0, 1.6, 2.0)
    face_colours: dict = field(default_factory=lambda: {f: (150, 150, 150) for f in ROOM_FACES})
    rectangles: list = field(default_factory=list)
    ambient: float = 1.0
    emission: float = 1.0

    def __post_init__(self):
        lo, hi = np.asarray(self.room_lo, float), np.asarray(self.room_hi, float)
        if np.any(hi <= lo):
            raise ValueError("room_hi must exceed room_lo on every axis")
        if self.ambient < 0 or self.emission < 0:
            raise ValueError("radiances must be non-negative")
        self.rectangles = [r if isinstance(r, Rectangle) else Rectangle(**r)
                           for r in self.rectangles]
        for r in self.rectangles:
            c, u, v = (np.asarray(x, float) for x in (r.centre, r.axis_u, r.axis_v))
            for corner in (c + u + v, c + u - v, c - u + v, c - u - v):
                if np.any(corner < lo) or np.any(corner > hi):
                    raise ValueError("rectangle extends outside the room")

    # -------------------------------------------------------------- presets
    @classmethod
    def uniform_box(cls, colour=(150, 150, 150), **kw) -> "SyntheticScene":
        return cls(face_colours={f: tuple(colour) for f in ROOM_FACES}, **kw)

    @classmethod
    def panel_room(cls) -> "SyntheticScene":
        """A room with distinct face colours, three coloured panels standing
        off the walls and one emissive patch on the ceiling."""
        faces = {"x-": (170, 150, 120), "x+": (120, 150, 170), "y-": (110, 90, 70),
                 "y+": (210, 210, 200), "z-": (150, 170, 140), "z+": (160, 140, 160)}
        panels = [Rectangle((0.0, 0.1, 1.6), (0.25, 0, 0), (0, 0.25, 0), (200, 40, 40)),
                  Rectangle((1.6, 0.0, 0.3), (0, 0, 0.3), (0, 0.3, 0), (40, 180, 60)),
                  Rectangle((-1.6, 0.2, -0.4), (0, 0, 0.3), (0, 0.25, 0), (50, 70, 200)),
                  Rectangle((0.6, 1.6, -0.6), (0.2, 0, 0), (0, 0, 0.2), (250, 250, 230),
                            emissive=True)]
        return cls(face_colours=faces, rectangles=panels)

    @classmethod
    def saturated_room(cls) -> "SyntheticScene":
        """High-contrast room: saturated face colours plus the panel set."""
        faces = {"x-": (230, 40, 40), "x+": (40, 210, 60), "y-": (60, 60, 220),
                 "y+": (235, 225, 60), "z-": (220, 60, 220), "z+": (60, 215, 225)}
        base = cls.panel_room()
        return cls(face_colours=faces, rectangles=[r for r in base.rectangles if not r.emissive])

    @classmethod
    def gallery_room(cls, wall=(225, 225, 225)) -> "SyntheticScene":
        """Uniform room with a 4x3 grid of saturated panels 0.2 m in front of
        each wall, so every colour edge is also a depth edge and most views
        see several distinct colours."""
        palette = [(230, 40, 40), (40, 210, 60), (60, 60, 220), (235, 225, 60),
                   (220, 60, 220), (60, 215, 225), (240, 140, 40), (140, 60, 200)]
        rects, k = [], 0
        for wall_index, (axis, sign) in enumerate(((0, -1), (0, 1), (2, -1), (2, 1))):
            for i, a in enumerate((-1.35, -0.45, 0.45, 1.35)):
                for j, b in enumerate((-0.75, 0.15, 1.05)):
                    c = [0.0, b, 0.0]
                    c[axis] = sign * 1.8
                    c[2 - axis] = a
                    u = [0.0, 0.0, 0.0]
                    u[2 - axis] = 0.3
                    colour = palette[(3 * i + j + wall_index) % len(palette)]
                    rects.append(Rectangle(tuple(c), tuple(u), (0.0, 0.3, 0.0), colour))
        return cls.uniform_box(wall, rectangles=rects)

    # -------------------------------------------------------------- io
    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_lo"], d["room_hi"] = list(self.room_lo), list(self.room_hi)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        d["face_colours"] = {k: tuple(v) for k, v in d.get("face_colours", {}).items()}
        d["rectangles"] = [Rectangle(**{k: (tuple(v) if isinstance(v, list) else v)
                                        for k, v in r.items()})
                           for r in d.get("rectangles", [])]
        full = {f: (150, 150, 150) for f in ROOM_FACES}
        full.update(d["face_colours"])
        d["face_colours"] = full
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -------------------------------------------------------------- geometry
    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, float)
        return bool(np.all(p > np.asarray(self.room_lo) + margin)
                    and np.all(p < np.asarray(self.room_hi) - margin))

    def surface_radiance(self) -> np.ndarray:
        """Linear radiance per surface id: room faces first, then rectangles."""
        rad = [srgb_to_linear(self.face_colours[f]) * self.ambient for f in ROOM_FACES]
        for r in self.rectangles:
            rad.append(srgb_to_linear(r.colour) * (self.emission if r.emissive else self.ambient))
        return np.array(rad)

    def cast(self, origin, dirs, t: float = 0.0):
        """Closest hit along each ray: ``(distance, surface_id)``."""
        o = np.asarray(origin, float)
        d = np.asarray(dirs, float).reshape(-1, 3)
        lo, hi = np.asarray(self.room_lo, float), np.asarray(self.room_hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo - o) / d
            t_hi = (hi - o) / d
        exit_t = np.where(d > 0, t_hi, np.where(d < 0, t_lo, np.inf))
        axis = np.argmin(exit_t, axis=1)
        dist = exit_t[np.arange(len(d)), axis]
        positive = d[np.arange(len(d)), axis] > 0
        surface = 2 * axis + positive.astype(np.int64)
        for k, r in enumerate(self.rectangles):
            if not r.present(t):
                continue
            c, u, v = (np.asarray(x, float) for x in (r.centre, r.axis_u, r.axis_v))
            n = np.cross(u, v)
            denom = d @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = ((c - o) @ n) / denom
            p = o + lam[:, None] * d - c
            a = (p @ u) / (u @ u)
            b = (p @ v) / (v @ v)
            hit = np.isfinite(lam) & (lam > 1e-9) & (np.abs(a) <= 1) & (np.abs(b) <= 1) & (lam < dist)
            dist = np.where(hit, lam, dist)
            surface = np.where(hit, len(ROOM_FACES) + k, surface)
        return dist, surface

    def emissive_ids(self) -> np.ndarray:
        return np.array([len(ROOM_FACES) + k for k, r in enumerate(self.rectangles) if r.emissive],
                        dtype=np.int64)


@dataclass
class SensorModel:
    """Depth noise, confidence rule and colour drift for synthetic capture.

    ``noise_scale`` multiplies a noise standard deviation that grows
    linearly from 1 mm at ``near`` to 4 cm at ``far``; 0 disables noise.
    ``drift`` is a list of ``(t_start, 3x3)`` steps applied to the radiance
    before sRGB encoding (identity before the first step).  During the
    ``corrupt`` intervals ``(t0, t1)`` the colour image is replaced by seeded
    uniform noise, which no linear correction can explain.
    ``colour_noise`` is the standard deviation, in 8-bit codes, of Gaussian
    noise added before quantization.
    """

    noise_scale: float = 0.0
    near: float = 0.5
    far: float = 4.0
    drift: list = field(default_factory=list)
    edge_threshold: float = 0.05
    edge_radius: int = 2
    seed: int = 0
    corrupt: list = field(default_factory=list)
    colour_noise: float = 0.0

    def __post_init__(self):
        steps = []
        for t0, m in self.drift:
            m = np.asarray(m, dtype=np.float64).reshape(3, 3)
            if np.linalg.cond(m) >= 10:
                raise ValueError("drift matrix condition number must be below 10")
            steps.append((float(t0), m))
        self.drift = sorted(steps, key=lambda s: s[0])

    def sigma(self, distance) -> np.ndarray:
        d = np.asarray(distance, float)
        frac = np.clip((d - self.near) / (self.far - self.near), 0.0, 1.0)
        return 0.001 + (0.04 - 0.001) * frac

    def corrupted(self, t: float) -> bool:
        return any(t0 <= t < t1 for t0, t1 in self.corrupt)

    def drift_at(self, t: float) -> np.ndarray:
        current = np.eye(3)
        for t0, m in self.drift:
            if t >= t0:
                current = m
        return current

    def to_dict(self) -> dict:
        return {"noise_scale": self.noise_scale, "near": self.near, "far": self.far,
                "drift": [[t0, m.tolist()] for t0, m in self.drift],
                "edge_threshold": self.edge_threshold, "edge_radius": self.edge_radius,
                "seed": self.seed, "corrupt": [list(c) for c in self.corrupt],
                "colour_noise": self.colour_noise}


def default_calibration() -> Calibration:
    """A 224x172 depth sensor with a co-located 320x240 colour camera."""
    depth = CameraModel(224, 172, 180.0, 180.0, 111.5, 85.5, (0.0, 0.0, 0.0))
    colour = CameraModel(320, 240, 230.0, 230.0, 159.5, 119.5, (0.0, 0.0, 0.0))
    return Calibration(depth, colour, RigidPose())


@dataclass
class SyntheticFrame:
    cloud: PointCloud
    colour8: np.ndarray         # (H, W, 3) sRGB codes from the colour camera
    drift: np.ndarray           # true camera matrix applied to radiance
    colour_pose: RigidPose


def _edge_mask(depth: np.ndarray, threshold: float, radius: int) -> np.ndarray:
    jump = np.zeros(depth.shape, dtype=bool)
    dx = np.abs(np.diff(depth, axis=1)) > threshold
    dy = np.abs(np.diff(depth, axis=0)) > threshold
    jump[:, 1:] |= dx
    jump[:, :-1] |= dx
    jump[1:, :] |= dy
    jump[:-1, :] |= dy
    if radius > 1:
        jump = ndimage.binary_dilation(jump, np.ones((3, 3), bool), iterations=radius - 1)
    return jump


def render_colour(scene: SyntheticScene, camera: CameraModel, pose: RigidPose, drift,
                  t: float = 0.0, sensor: SensorModel | None = None,
                  frame_index: int = 0) -> np.ndarray:
    if sensor is not None and sensor.corrupted(t):
        rng = np.random.default_rng([sensor.seed, frame_index, 1])
        return rng.integers(0, 256, (camera.height, camera.width, 3), dtype=np.uint8)
    rays = pixel_rays(camera).reshape(-1, 3) @ pose.rotation.T
    _, surf = scene.cast(pose.translation, rays, t)
    radiance = scene.surface_radiance()[surf] @ np.asarray(drift, float).T
    if sensor is None or sensor.colour_noise <= 0:
        return linear_to_srgb8(radiance).reshape(camera.height, camera.width, 3)
    rng = np.random.default_rng([sensor.seed, frame_index, 2])
    codes = linear_to_srgb(radiance) * 255.0 + rng.normal(0.0, sensor.colour_noise, radiance.shape)
    return np.clip(np.round(codes), 0, 255).astype(np.uint8).reshape(camera.height, camera.width, 3)


def render_synthetic_frame(scene: SyntheticScene, pose: RigidPose, sensor: SensorModel,
                           t: float = 0.0, calib: Calibration | None = None,
                           frame_index: int = 0) -> SyntheticFrame:
    """Point cloud (depth-sensor frame) and colour image for one capture.

    ``pose`` maps depth-sensor coordinates to the world.  Confidence is 1 on
    Lambertian surfaces, 0.1 on emissive ones and 0.5 within
    ``edge_radius`` pixels of a depth discontinuity.
    """
    calib = calib or default_calibration()
    if not scene.contains(pose.translation):
        raise OutsideRoomError(f"pose {pose.translation} is outside the room")
    dcam = calib.depth_camera
    rays = pixel_rays(dcam).reshape(-1, 3)
    dist, surf = scene.cast(pose.translation, rays @ pose.rotation.T, t)
    if sensor.noise_scale > 0:
        rng = np.random.default_rng([sensor.seed, frame_index])
        dist = dist + rng.normal(0.0, 1.0, dist.shape) * sensor.sigma(dist) * sensor.noise_scale
    pts = rays * dist[:, None]
    depth_img = pts[:, 2].reshape(dcam.height, dcam.width)
    conf = np.ones(len(pts))
    conf[_edge_mask(depth_img, sensor.edge_threshold, sensor.edge_radius).reshape(-1)] = 0.5
    conf[np.isin(surf, scene.emissive_ids())] = 0.1
    colour_pose = pose.compose(calib.depth_to_colour.inverse())
    drift = sensor.drift_at(t)
    colour8 = render_colour(scene, calib.colour_camera, colour_pose, drift, t, sensor, frame_index)
    return SyntheticFrame(PointCloud(pts, conf, pose, t), colour8, drift, colour_pose)


def ground_truth_em(scene: SyntheticScene, origin, width: int = 2000, height: int = 1000,
                    t: float = 0.0) -> EnvironmentMap:
    """Exact radiance and radial depth through every pixel centre from ``origin``."""
    if not scene.contains(origin):
        raise OutsideRoomError(f"origin {origin} is outside the room")
    em = EnvironmentMap.empty(width, height, origin)
    dirs = em_direction_grid(width, height).reshape(-1, 3)
    dist, surf = scene.cast(origin, dirs, t)
    em.rgb[:] = scene.surface_radiance()[surf].reshape(height, width, 3)
    em.depth[:] = dist.reshape(height, width)
    em.valid[:] = True
    return em


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass
class TrajectorySample:
    timestamp: float
    pose: RigidPose
    has_depth: bool


def _heading_pose(position, yaw: float, pitch: float) -> RigidPose:
    fwd = np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch),
                    math.cos(yaw) * math.cos(pitch)])
    return look_at(position, np.asarray(position) + fwd)


def _timeline(depth_poses: list, colour_frames: bool = True) -> list:
    """Interleave colour-only samples between depth poses at the camera rates."""
    per = int(round(COLOUR_RATE_HZ / DEPTH_RATE_HZ))
    out = []
    if not colour_frames:
        return [TrajectorySample(i / DEPTH_RATE_HZ, p, True) for i, p in enumerate(depth_poses)]
    if len(depth_poses) == 1:
        return [TrajectorySample(0.0, depth_poses[0], True)]
    for i, (a, b) in enumerate(zip(depth_poses[:-1], depth_poses[1:])):
        rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
        slerp = Slerp([0.0, 1.0], rots)
        for k in range(per):
            s = k / per
            ts = (i * per + k) / COLOUR_RATE_HZ
            if k == 0:
                out.append(TrajectorySample(ts, a, True))
            else:
                pose = RigidPose(slerp([s]).as_matrix()[0],
                                 (1 - s) * a.translation + s * b.translation)
                out.append(TrajectorySample(ts, pose, False))
    out.append(TrajectorySample((len(depth_poses) - 1) * per / COLOUR_RATE_HZ,
                                depth_poses[-1], True))
    return out


_TRAJECTORY_KEYS = {
    "orbit": {"centre", "radius", "frames", "pitches", "look", "phase"},
    "sweep": {"start", "end", "target", "frames"},
    "approach": {"start", "end", "target", "frames"},
}


def generate_trajectory(kind: str, **params) -> list:
    """Depth-frame poses at 5 Hz with colour-only poses interpolated at 30 Hz.

    ``orbit``: ``frames`` positions equally spaced in angle on a horizontal
    circle of ``radius`` around ``centre``, repeated for each value in
    ``pitches``.  ``look="outward"`` faces away from the centre,
    ``"inward"`` faces it (with radius 0 the heading stays at +z).
    ``sweep``: ``frames`` positions from ``start`` to ``end`` looking at
    ``target``.  ``approach``: moves from ``start`` to ``end`` looking at
    ``target`` with an ease-out profile.  ``colour_frames=False`` keeps only
    the depth-frame samples.
    """
    colour_frames = bool(params.pop("colour_frames", True))
    allowed = _TRAJECTORY_KEYS.get(kind)
    if allowed is None:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown {kind} parameters: {sorted(unknown)}")
    if kind == "orbit":
        centre = np.asarray(params.get("centre", (0.0, 0.0, 0.0)), float)
        radius = float(params.get("radius", 0.05))
        n = int(params.get("frames", 12))
        pitches = params.get("pitches", (0.0,))
        look = params.get("look", "inward")
        phase = float(params.get("phase", 0.0))
        poses = []
        for pitch in pitches:
            for i in range(n):
                ang = phase + 2.0 * math.pi * i / n
                pos = centre + radius * np.array([math.sin(ang), 0.0, math.cos(ang)])
                if look == "outward":
                    yaw = ang
                elif radius > 0:
                    yaw = ang + math.pi
                else:
                    yaw = 0.0
                poses.append(_heading_pose(pos, yaw, float(pitch)))
    elif kind in ("sweep", "approach"):
        start = np.asarray(params["start"], float)
        end = np.asarray(params["end"], float)
        target = np.asarray(params.get("target", (0.0, 0.0, 2.0)), float)
        n = int(params.get("frames", 10))
        s = np.linspace(0.0, 1.0, n)
        if kind == "approach":
            s = 1.0 - (1.0 - s) ** 2
        poses = [look_at(start + si * (end - start), target) for si in s]
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return _timeline(poses, colour_frames)


# --------------------------------------------------------------------------
# dataset writer
# --------------------------------------------------------------------------

def write_dataset(directory, scene: SyntheticScene, trajectory: list, sensor: SensorModel,
                  calib: Calibration | None = None) -> Path:
    """Write a manifest + PNG colour frames + binary point clouds.

    Ground-truth drift matrices per frame are written to ``truth.json``
    alongside the manifest; the pipeline never reads it.
    """
    from PIL import Image

    calib = calib or default_calibration()
    root = Path(directory)
    (root / "colour").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    frames, truth = [], []
    for i, sample in enumerate(trajectory):
        colour_name = f"colour/{i:06d}.png"
        rec = {"timestamp_s": float(sample.timestamp), "colour_path": colour_name,
               "cloud_path": None, "pose": sample.pose.as_matrix().reshape(-1).tolist()}
        drift = sensor.drift_at(sample.timestamp)
        if sample.has_depth:
            fr = render_synthetic_frame(scene, sample.pose, sensor, sample.timestamp, calib, i)
            colour8 = fr.colour8
            cloud_name = f"depth/{i:06d}.bin"
            write_point_cloud(root / cloud_name, fr.cloud.points, fr.cloud.confidence)
            rec["cloud_path"] = cloud_name
        else:
            cpose = sample.pose.compose(calib.depth_to_colour.inverse())
            colour8 = render_colour(scene, calib.colour_camera, cpose, drift, sample.timestamp,
                                    sensor, i)
        Image.fromarray(colour8).save(root / colour_name, optimize=False)
        frames.append(rec)
        truth.append({"timestamp_s": float(sample.timestamp), "drift": drift.tolist()})
    manifest = {"calibration": calib.to_dict(), "frames": frames}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (root / "truth.json").write_text(json.dumps({"scene": scene.to_dict(),
                                                 "sensor": sensor.to_dict(),
                                                 "frames": truth}, indent=1))
    return root


def dataset_digest(directory) -> str:
    """sha256 over every file of a dataset, in sorted path order."""
    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
