"""Per-frame colour correction towards the reference (first frame) colour space.

The correction is a 3x3 linear map ``M`` such that ``M @ c_cur ≈ c_ref`` for
pairs of colours observed on the same surface in the current frame and in the
environment map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, dir_to_pixel
from .ingest import RgbdFrame, backproject, exposure_ok


class InsufficientSamplesError(ValueError):
    pass


class DegenerateSamplesError(ValueError):
    pass


@dataclass
class PairedSamples:
    """Struct-of-arrays set of paired samples."""

    current: np.ndarray         # (N, 3) frame linear RGB
    reference: np.ndarray       # (N, 3) EM linear RGB
    frame_pixel: np.ndarray     # (N, 2) (x, y)
    em_pixel: np.ndarray        # (N, 2) (u, v)
    frame_depth: np.ndarray     # (N,) radial depth of the frame point from the EM origin
    em_depth: np.ndarray        # (N,)

    def __len__(self) -> int:
        return len(self.current)

    @classmethod
    def empty(cls) -> "PairedSamples":
        z3 = np.zeros((0, 3))
        z2 = np.zeros((0, 2), dtype=np.int64)
        z1 = np.zeros(0)
        return cls(z3, z3.copy(), z2, z2.copy(), z1, z1.copy())


@dataclass
class CorrectionState:
    accepted: np.ndarray = field(default_factory=lambda: np.eye(3))
    candidate: np.ndarray = field(default_factory=lambda: np.eye(3))
    mse: float = 0.0
    accepted_flag: bool = True
    reference_defined: bool = False
    project_enabled: bool = True
    refitted: bool = True
    samples: int = 0


def collect_paired_samples(frame: RgbdFrame, em, camera: CameraModel,
                           depth_threshold: float = 0.01,
                           exposure: tuple[float, float] = (0.05, 0.95)) -> PairedSamples:
    """Pair reliable frame pixels with environment-map content.

    ``frame.reliable`` must hold the pre-hole-filling mask.  Pairs whose
    radial depths differ by more than ``depth_threshold`` or whose EM colour is
    badly exposed are discarded.
    """
    if not np.any(em.valid) or not np.any(frame.reliable):
        return PairedSamples.empty()
    pts, ys, xs = backproject(frame, camera, frame.reliable)
    rel = frame.pose.apply(pts) - em.origin
    radial = np.linalg.norm(rel, axis=1)
    ok = radial > 1e-9
    dirs = rel[ok] / radial[ok, None]
    ys, xs, radial = ys[ok], xs[ok], radial[ok]
    u, v = dir_to_pixel(dirs, em.width, em.height)
    valid = em.valid[v, u]
    ref = em.rgb[v, u].astype(np.float64)
    em_depth = em.depth[v, u].astype(np.float64)
    keep = valid & (np.abs(radial - em_depth) <= depth_threshold) & exposure_ok(ref, *exposure)
    return PairedSamples(current=frame.rgb[ys[keep], xs[keep]],
                         reference=ref[keep],
                         frame_pixel=np.column_stack([xs[keep], ys[keep]]),
                         em_pixel=np.column_stack([u[keep], v[keep]]),
                         frame_depth=radial[keep],
                         em_depth=em_depth[keep])


def fit_correction_matrix(pairs: PairedSamples, min_samples: int = 30,
                          damping: float = 1e-6, rank_tol: float = 1e-3) -> np.ndarray:
    """Damped least-squares fit of ``M`` minimising ``Σ ||M c_cur - c_ref||²``.

    Every output row solves the same 3x3 normal equations
    ``(CᵀC + λI) m_k = Cᵀ r_k``.  The sample set is rejected as degenerate
    when the undamped normal matrix is close to rank deficient (smallest to
    largest eigenvalue ratio below ``rank_tol``), e.g. when every sample is
    grey or the samples hold only two surface colours.  Near-degenerate sets
    let a handful of boundary pairs decide the missing direction.
    """
    n = len(pairs)
    if n < min_samples:
        raise InsufficientSamplesError(f"{n} paired samples, need {min_samples}")
    c = np.asarray(pairs.current, dtype=np.float64)
    r = np.asarray(pairs.reference, dtype=np.float64)
    normal = c.T @ c
    eig = np.linalg.eigvalsh(normal)
    if eig[-1] <= 0 or eig[0] / eig[-1] < rank_tol:
        raise DegenerateSamplesError("paired samples do not span the colour space")
    damped = normal + damping * np.eye(3)
    try:
        m = np.linalg.solve(damped, c.T @ r).T
    except np.linalg.LinAlgError as exc:
        raise DegenerateSamplesError(str(exc)) from exc
    if not np.all(np.isfinite(m)):
        raise DegenerateSamplesError("non-finite correction matrix")
    return m


def correction_mse(matrix: np.ndarray, pairs: PairedSamples) -> float:
    """Mean over pairs of the per-channel averaged squared residual."""
    if len(pairs) == 0:
        return 0.0
    resid = pairs.current @ np.asarray(matrix).T - pairs.reference
    return float(np.mean(np.sum(resid * resid, axis=1) / 3.0))


def gate_matrix(candidate: np.ndarray, pairs: PairedSamples, state: CorrectionState,
                threshold: float = 5e-2) -> CorrectionState:
    """Accept ``candidate`` if its MSE on ``pairs`` is within ``threshold``.

    On rejection the previous accepted matrix is kept (same object) and
    projection to the EM is disabled for this frame.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    mse = correction_mse(candidate, pairs)
    if mse > threshold:
        return CorrectionState(accepted=state.accepted, candidate=candidate, mse=mse,
                               accepted_flag=False,
                               reference_defined=state.reference_defined,
                               project_enabled=False, samples=len(pairs))
    return CorrectionState(accepted=candidate, candidate=candidate, mse=mse,
                           accepted_flag=True, reference_defined=True,
                           project_enabled=True, samples=len(pairs))


def keep_state(state: CorrectionState, samples: int = 0) -> CorrectionState:
    """State for a frame whose samples cannot be fitted: the accepted matrix
    stays in use and projection remains enabled."""
    return CorrectionState(state.accepted, state.accepted, float("nan"), True,
                           state.reference_defined, True, refitted=False, samples=samples)


def bootstrap_state() -> CorrectionState:
    """State for the reference frame: identity accepted, projection on."""
    return CorrectionState(np.eye(3), np.eye(3), 0.0, True, True, True, refitted=False)


def apply_correction(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Per-pixel ``M @ c``, clamped below at zero."""
    img = np.asarray(image, dtype=np.float64)
    out = img @ np.asarray(matrix, dtype=np.float64).T
    return np.maximum(out, 0.0)


class CorrectionLog:
    """Per-frame CSV log: timestamp, MSE, accepted and refitted flags, sample
    count and the 9 entries of the matrix in use."""

    header = ["timestamp", "mse", "accepted", "refitted", "samples"] + \
        [f"m{i}{j}" for i in range(3) for j in range(3)]

    def __init__(self):
        self.rows: list[list] = []

    def add(self, timestamp: float, state: CorrectionState) -> None:
        self.rows.append([f"{timestamp:.6f}", f"{state.mse:.9g}", int(state.accepted_flag),
                          int(state.refitted), state.samples]
                         + [f"{x:.9g}" for x in np.asarray(state.accepted).reshape(-1)])

    def write(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header)
            writer.writerows(self.rows)
