"""Per-frame acquisition and rendering loop, configuration and command implementations."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import color, envmap, ingest, mesh as meshes, render, sh, synth
from .envmap import EnvironmentMap
from .geometry import RigidPose
from .ingest import Calibration, PointCloud

log = logging.getLogger(__name__)

STAGES = ("Load frame data", "YUV420 to linear RGB", "Point cloud to RGB-D",
          "Mark reliable RGB-D", "Hole filling RGB-D", "Collect paired samples",
          "Compute colour correction matrix", "Calculate MSE", "Project sample to EM",
          "Calculate SH coefficients", "Render frame")


class PipelineError(Exception):
    exit_code = 1


class MissingFileError(PipelineError):
    exit_code = 3


class ManifestError(PipelineError):
    exit_code = 4


class CalibrationMissingError(PipelineError):
    exit_code = 5


class ConfigValidationError(PipelineError):
    exit_code = 6


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    min_confidence: float = 0.7
    exposure_low: float = 0.05
    exposure_high: float = 0.95
    pair_depth_threshold: float = 0.01
    mse_threshold: float = 5e-2
    ray_threshold: float = 0.03
    trusted_radius: float = 0.10
    em_width: int = 2000
    em_height: int = 1000
    sh_bands: int = 5
    fill_search: int = 50
    chi2_sigma: float = 0.01
    chi2_threshold: float = 20.09
    min_samples: int = 30
    shadow_grid: int = 32
    shadow_extent: float = 2.0
    warp_sphere_radius: float = 10.0
    transfer_samples: int = 1024
    shadow_samples: int = 512
    seed: int = 0
    record: bool = True
    render: bool = True
    em_origin: list | None = None
    object_mesh: str = "icosphere"
    object_size: float = 0.15
    object_subdivisions: int = 2
    object_position: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    object_yaw: float = 0.0
    object_albedo: list = field(default_factory=lambda: [0.8, 0.8, 0.8])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["min_confidence", "exposure_high", "pair_depth_threshold", "mse_threshold",
                    "ray_threshold", "trusted_radius", "em_width", "em_height", "fill_search",
                    "chi2_sigma", "chi2_threshold", "min_samples", "shadow_grid",
                    "shadow_extent", "warp_sphere_radius", "transfer_samples",
                    "shadow_samples", "object_size"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigValidationError(f"{name} must be positive")
        if not 0 <= self.exposure_low < self.exposure_high <= 1:
            raise ConfigValidationError("exposure bounds must satisfy 0 <= low < high <= 1")
        if not 1 <= self.sh_bands <= 10:
            raise ConfigValidationError("sh_bands must lie in [1, 10]")
        if self.seed < 0:
            raise ConfigValidationError("seed must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigValidationError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigValidationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise MissingFileError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def origin(self) -> np.ndarray:
        src = self.em_origin if self.em_origin is not None else self.object_position
        return np.asarray(src, dtype=np.float64)


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

class TimingReport:
    """Per-stage wall-clock samples; means in milliseconds."""

    def __init__(self):
        self.samples: dict[str, list[float]] = {name: [] for name in STAGES}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.samples.setdefault(name, []).append((time.perf_counter() - start) * 1e3)

    def means(self) -> dict:
        return {k: (float(np.mean(v)) if v else 0.0) for k, v in self.samples.items()}

    @property
    def total(self) -> float:
        return float(sum(self.means().values()))

    def is_empty(self) -> bool:
        return not any(self.samples.values())

    def table(self) -> str:
        rows = [(k, v) for k, v in self.means().items()]
        width = max(len(k) for k, _ in rows) + 2
        lines = [f"{'Process':<{width}}Elapsed time [ms]"]
        lines += [f"{k:<{width}}{v:.2f}" for k, v in rows]
        lines.append(f"{'Total':<{width}}{self.total:.2f}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        d = Path(directory)
        with open(d / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "mean_ms", "count"])
            for k, v in self.samples.items():
                w.writerow([k, f"{np.mean(v) if v else 0.0:.4f}", len(v)])
            w.writerow(["Total", f"{self.total:.4f}", ""])
        (d / "timings.txt").write_text(self.table())


# --------------------------------------------------------------------------
# dataset
# --------------------------------------------------------------------------

@dataclass
class FrameRecord:
    timestamp: float
    colour_path: Path
    cloud_path: Path | None
    pose: RigidPose


@dataclass
class Dataset:
    root: Path
    calibration: Calibration
    frames: list


def load_manifest(path) -> Dataset:
    """Read ``manifest.json`` (or a directory containing it)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.is_file():
        raise MissingFileError(f"manifest not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or "frames" not in data or not isinstance(data["frames"], list):
        raise ManifestError("manifest needs a 'frames' list")
    if not data.get("calibration"):
        raise CalibrationMissingError("manifest has no calibration block")
    try:
        calib = Calibration.from_dict(data["calibration"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationMissingError(f"calibration block is incomplete: {exc}") from exc
    frames = []
    for i, rec in enumerate(data["frames"]):
        try:
            pose = RigidPose.from_matrix(np.asarray(rec["pose"], dtype=np.float64))
            cloud = rec.get("cloud_path")
            frames.append(FrameRecord(float(rec["timestamp_s"]), p.parent / rec["colour_path"],
                                      p.parent / cloud if cloud else None, pose))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"frame {i} is malformed: {exc}") from exc
    frames.sort(key=lambda f: f.timestamp)
    return Dataset(p.parent, calib, frames)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing input file: {path}")
    return path


# --------------------------------------------------------------------------
# object
# --------------------------------------------------------------------------

def build_object(config: PipelineConfig) -> render.VirtualObject:
    kind = config.object_mesh
    size = config.object_size
    if kind == "icosphere":
        m = meshes.icosphere(size, config.object_subdivisions)
    elif kind == "torus":
        m = meshes.torus(size, size * 0.35)
    elif kind.endswith(".obj"):
        m = meshes.load_obj(_require(Path(kind)))
    else:
        raise ConfigValidationError(f"unknown object mesh {kind!r}")
    # rest the object on its position: the bottom of its bounds sits there
    lo, hi = m.bounds()
    m = m.transformed(translation=-np.array([0.5 * (lo[0] + hi[0]), lo[1], 0.5 * (lo[2] + hi[2])]))
    return render.VirtualObject(m, np.asarray(config.object_albedo, float),
                                np.asarray(config.object_position, float), config.object_yaw)


@dataclass
class ObjectAssets:
    obj: render.VirtualObject
    world: meshes.TriangleMesh
    transfer: sh.VertexTransfer
    grid: sh.ShadowGrid


def prepare_object(config: PipelineConfig, cache_dir) -> ObjectAssets:
    obj = build_object(config)
    world = obj.world_mesh()
    cache = sh.TransferCache(cache_dir)
    transfer = cache.transfer(world, config.transfer_samples, config.sh_bands, config.seed)
    grid = cache.shadow_grid(world, config.shadow_grid, config.shadow_samples, config.sh_bands,
                             config.seed, config.shadow_extent)
    return ObjectAssets(obj, world, transfer, grid)


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    status: int
    em: EnvironmentMap
    timings: TimingReport
    outputs: dict
    correction: color.CorrectionLog
    em_writes: list
    frames_rendered: int = 0


class _WriteLog:
    header = ["timestamp", "gate_accepted", "projected", "candidates", "written"] + \
        [d.name.lower() for d in envmap.UpdateDecision]

    def __init__(self):
        self.rows: list[list] = []

    def add(self, timestamp, gate_ok, projected, stats: envmap.UpdateStats | None):
        counts = [stats.counts[d] if stats else 0 for d in envmap.UpdateDecision]
        self.rows.append([f"{timestamp:.6f}", int(gate_ok), int(projected),
                          stats.candidates if stats else 0, stats.written if stats else 0]
                         + counts)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            w.writerows(self.rows)


def run_pipeline(dataset, config: PipelineConfig | None = None, out_dir=None,
                 initial_em: EnvironmentMap | None = None,
                 with_object: bool = True) -> RunResult:
    """Run acquisition and rendering over a dataset.

    Depth frames go through ingest, reliability labelling, hole filling,
    paired sampling, correction fitting and gating, then (when the gate
    passes and recording is on) EM projection and SH projection.  Every
    frame is composited with the inverse of the latest accepted matrix.
    """
    config = config or PipelineConfig()
    ds = dataset if isinstance(dataset, Dataset) else load_manifest(dataset)
    out = Path(out_dir) if out_dir is not None else ds.root / "out"
    out.mkdir(parents=True, exist_ok=True)
    frames_dir = out / "frames"
    calib = ds.calibration
    dcam = calib.depth_camera
    timings = TimingReport()
    corr_log = color.CorrectionLog()
    writes = _WriteLog()
    exposure = (config.exposure_low, config.exposure_high)

    if initial_em is not None:
        em = initial_em.copy()
    else:
        em = EnvironmentMap.empty(config.em_width, config.em_height, config.origin())
    state = color.CorrectionState(reference_defined=False)
    inverse = np.eye(3)
    env = sh.project_em_to_sh(em, config.sh_bands, config.fill_search) if em.valid.any() else None

    assets = None
    if with_object and config.render and ds.frames:
        assets = prepare_object(config, out / "cache")
        frames_dir.mkdir(exist_ok=True)
    # shading and shadow alphas change only when the SH coefficients do
    shade_cache = {"v": None, "a": None}
    rendered = 0

    for index, rec in enumerate(ds.frames):
        with timings.stage("Load frame data"):
            colour_path = _require(rec.colour_path)
            raw = ingest.load_colour(colour_path, calib.colour_camera.width,
                                     calib.colour_camera.height)
            cloud = None
            if rec.cloud_path is not None:
                pts, conf = ingest.read_point_cloud(_require(rec.cloud_path))
                cloud = PointCloud(pts, conf, rec.pose, rec.timestamp)
        with timings.stage("YUV420 to linear RGB"):
            colour_lin = ingest.srgb_to_linear(raw)

        if cloud is not None:
            with timings.stage("Point cloud to RGB-D"):
                frame = ingest.pointcloud_to_rgbd(cloud, colour_lin, calib,
                                                  min_confidence=config.min_confidence)
            with timings.stage("Mark reliable RGB-D"):
                ingest.label_reliability(frame, config.chi2_sigma, config.chi2_threshold, exposure)
            with timings.stage("Hole filling RGB-D"):
                frame = ingest.fill_holes(frame)
                ingest.colourize_filled(frame, colour_lin, calib)
            with timings.stage("Collect paired samples"):
                pairs = color.collect_paired_samples(frame, em, dcam, config.pair_depth_threshold,
                                                     exposure)
            if not state.reference_defined:
                state = color.bootstrap_state()
                if em.valid.any():
                    # a preloaded map defines the reference: fit against it
                    state = _fit_and_gate(pairs, state, config, timings)
            else:
                state = _fit_and_gate(pairs, state, config, timings)
            corr_log.add(rec.timestamp, state)
            try:
                inverse = render.invert_correction(state.accepted)
            except render.SingularCorrectionError:
                log.warning("accepted matrix at t=%.3f is singular; keeping previous inverse",
                            rec.timestamp)
            frame.rgb = color.apply_correction(frame.rgb, state.accepted)
            projected = state.project_enabled and config.record
            stats = None
            if projected:
                with timings.stage("Project sample to EM"):
                    stats = envmap.project_frame_to_em(
                        frame, em, rec.pose.translation, dcam, config.trusted_radius,
                        config.ray_threshold)
                if stats.written and em.valid.any():
                    with timings.stage("Calculate SH coefficients"):
                        env = sh.project_em_to_sh(em, config.sh_bands, config.fill_search)
                    shade_cache = {"v": None, "a": None}
            writes.add(rec.timestamp, state.accepted_flag, projected, stats)

        if assets is not None:
            with timings.stage("Render frame"):
                img = _render_frame(raw, rec, calib, assets, env, inverse, shade_cache)
            Image.fromarray(img).save(frames_dir / f"{index:06d}.png")
            rendered += 1

    outputs = _write_outputs(out, em, env, corr_log, writes, timings)
    return RunResult(0, em, timings, outputs, corr_log, writes.rows, rendered)


def _fit_and_gate(pairs, state, config, timings):
    with timings.stage("Compute colour correction matrix"):
        try:
            candidate = color.fit_correction_matrix(pairs, config.min_samples)
        except (color.InsufficientSamplesError, color.DegenerateSamplesError) as exc:
            log.info("correction not refitted: %s", exc)
            return color.keep_state(state, len(pairs))
    with timings.stage("Calculate MSE"):
        return color.gate_matrix(candidate, pairs, state, config.mse_threshold)


def _render_frame(raw, rec, calib, assets: ObjectAssets, env, inverse, cache):
    if raw.dtype != np.uint8:
        background = ingest.linear_to_srgb8(ingest.srgb_to_linear(raw))
    else:
        background = raw
    if env is None:
        return background.copy()
    if cache["v"] is None:
        cache["v"] = render.shade_vertices(assets.obj, assets.transfer, env)
        cache["a"] = sh.grid_alpha(assets.grid, env)
    cpose = rec.pose.compose(calib.depth_to_colour.inverse())
    ccam = calib.colour_camera
    target = render.rasterize(assets.world, cache["v"], ccam, cpose)
    s, t = render.shadow_footprint(assets.grid, ccam, cpose)
    alpha = np.zeros(s.shape)
    ok = np.isfinite(s)
    alpha[ok] = sh.sample_alpha(assets.grid, cache["a"], s[ok], t[ok])
    return render.composite(background, target, inverse, alpha)


def _write_outputs(out: Path, em, env, corr_log, writes, timings) -> dict:
    paths = {"em": out / "em.emap", "preview": out / "em_preview.png",
             "sh": out / "sh.csv", "correction_log": out / "correction_log.csv",
             "em_writes": out / "em_writes.csv", "timings": out / "timings.csv"}
    envmap.save_emap(em, paths["em"])
    envmap.save_preview(em, paths["preview"])
    if env is not None:
        sh.write_sh_csv(paths["sh"], env)
    else:
        paths["sh"].write_text("l,m,r,g,b\n")
    corr_log.write(paths["correction_log"])
    writes.write(paths["em_writes"])
    timings.write(out)
    return paths


# --------------------------------------------------------------------------
# translation / metrics / synthesis commands
# --------------------------------------------------------------------------

def _load_em(path) -> EnvironmentMap:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"environment map not found: {p}")
    try:
        return envmap.load_emap(p)
    except envmap.EmapFormatError as exc:
        raise ConfigValidationError(str(exc)) from exc


def translate_cmd(em_file, delta, out_file=None, mode: str = "temporary", steps: int = 1,
                  truth=None, metrics_csv=None) -> list:
    """Translate an EM file by ``delta`` in ``steps`` equal increments.

    ``permanent`` chains the increments, each one re-projecting the previous
    result, and overwrites ``em_file`` with the final map.  ``temporary``
    re-projects the untouched source to each intermediate origin and writes
    only ``out_file``.  ``truth`` is a scene file (ground truth rendered at
    every step) or an EMAP file (compared with the final step).  Returns the
    metric rows ``(step, data_loss, correlation)``.
    """
    if mode not in ("permanent", "temporary"):
        raise ConfigValidationError(f"unknown translation mode {mode!r}")
    if steps < 1:
        raise ConfigValidationError("steps must be at least 1")
    src = _load_em(em_file)
    delta = np.asarray(delta, dtype=np.float64).reshape(3)
    scene = truth_em = None
    if truth is not None:
        tp = Path(truth)
        if not tp.is_file():
            raise MissingFileError(f"ground truth not found: {tp}")
        if tp.suffix == ".json":
            scene = synth.SyntheticScene.load(tp)
        else:
            truth_em = _load_em(tp)
            if truth_em.depth.shape != src.depth.shape:
                raise ConfigValidationError("ground truth dimensions differ from the map")
    rows = []
    current = src
    start = time.perf_counter()
    for k in range(1, steps + 1):
        if mode == "permanent":
            current = envmap.translate_em(current, current.origin + delta / steps, mode).em
        else:
            current = envmap.translate_em(src, src.origin + delta * k / steps, mode).em
        gt = None
        if scene is not None:
            gt = synth.ground_truth_em(scene, current.origin, src.width, src.height)
        elif truth_em is not None and k == steps:
            gt = truth_em
        if gt is not None:
            rows.append((k, envmap.data_loss(current, gt), envmap.weighted_correlation(current, gt)))
    log.info("translation took %.2f ms per step", (time.perf_counter() - start) * 1e3 / steps)
    if out_file is not None:
        envmap.save_emap(current, out_file)
    if mode == "permanent":
        envmap.save_emap(current, em_file)
    if metrics_csv is not None and rows:
        with open(metrics_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "data_loss", "correlation"])
            w.writerows([(k, f"{a:.9g}", f"{b:.9g}") for k, a, b in rows])
    return rows


def metrics_cmd(em_file, truth_file) -> tuple[float, float]:
    """``(data_loss, weighted_correlation)`` of an EM against a reference EM."""
    em = _load_em(em_file)
    gt = _load_em(truth_file)
    if em.depth.shape != gt.depth.shape:
        raise ConfigValidationError("map dimensions differ")
    return envmap.data_loss(em, gt), envmap.weighted_correlation(em, gt)


DEFAULT_SYNTH = {
    "preset": "panel_room",
    "sensor": {"noise_scale": 0.0},
    "trajectory": [{"kind": "orbit", "radius": 0.0, "look": "outward", "frames": 8,
                    "pitches": [-1.2, -0.45, 0.45, 1.2]}],
}


def synth_cmd(out_dir, config=None, seed: int | None = None) -> Path:
    """Generate a dataset from a synthetic-scene config (dict or JSON path)."""
    if config is None:
        cfg = DEFAULT_SYNTH
    elif isinstance(config, dict):
        cfg = config
    else:
        p = Path(config)
        if not p.is_file():
            raise MissingFileError(f"scene config not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"scene config is not valid JSON: {exc}") from exc
    try:
        if "scene" in cfg:
            scene = synth.SyntheticScene.from_dict(cfg["scene"])
        else:
            preset = cfg.get("preset", "panel_room")
            scene = getattr(synth.SyntheticScene, preset)()
        sensor_cfg = dict(cfg.get("sensor", {}))
        if seed is not None:
            sensor_cfg["seed"] = seed
        sensor = synth.SensorModel(**sensor_cfg)
        trajectory = []
        offset = 0.0
        for seg in cfg.get("trajectory", DEFAULT_SYNTH["trajectory"]):
            seg = dict(seg)
            kind = seg.pop("kind")
            samples = synth.generate_trajectory(kind, **seg)
            for s in samples:
                trajectory.append(synth.TrajectorySample(s.timestamp + offset, s.pose, s.has_depth))
            offset = trajectory[-1].timestamp + 1.0 / synth.DEPTH_RATE_HZ
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ConfigValidationError(f"invalid scene config: {exc}") from exc
    return synth.write_dataset(out_dir, scene, trajectory, sensor)
