"""
Rigid factorization with missing data, and xy-snapping.

Tracks become a 2F x P measurement matrix (row 2f holds x, row 2f + 1 holds y
of frame f). Factorization alternates between filling unobserved entries from
the current model, a rank-3 decomposition upgraded to metric with the
Tomasi-Kanade constraints, projection of every frame's motion onto scaled
orthonormal rows, and least-squares shape and translation on the observed
entries only.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.linalg import orthogonal_procrustes

from errors import DivergedFactorization, EmptyTracks, InsufficientData
from propagate import TrackSet

logger = logging.getLogger(__name__)

DEGENERATE_RATIO = 1e-6
DIVERGENCE_PATIENCE = 5


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    w: np.ndarray
    mask: np.ndarray
    raw: np.ndarray
    offsets: np.ndarray
    frame_ids: tuple[str, ...]
    track_ids: tuple[int, ...]
    target_frame: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.frame_ids)

    @property
    def n_points(self) -> int:
        return self.w.shape[1]


def build_measurement_matrix(tracks: TrackSet, min_visibility_frac: float = 0.10) -> MeasurementMatrix:
    """
    Stack the tracks, keep columns seen in at least ceil(frac * F) frames and
    subtract each frame's mean over its observed entries.
    """
    if len(tracks) == 0:
        raise EmptyTracks("no tracks to build a measurement matrix from")
    frames = tracks.images()
    row_of = {image: f for f, image in enumerate(frames)}
    target = row_of[tracks.target_image]

    track_ids = sorted(tracks.tracks)
    raw = np.zeros((2 * len(frames), len(track_ids)))
    mask = np.zeros_like(raw, dtype=bool)
    for p, track_id in enumerate(track_ids):
        for image, (x, y) in tracks.tracks[track_id].items():
            if math.isfinite(x) and math.isfinite(y):
                f = row_of[image]
                raw[2 * f, p], raw[2 * f + 1, p] = x, y
                mask[2 * f, p] = mask[2 * f + 1, p] = True

    needed = math.ceil(min_visibility_frac * len(frames) - 1e-9)
    seen = mask[0::2].sum(axis=0)
    keep = (seen >= needed) & mask[2 * target]
    if not keep.any():
        raise EmptyTracks(f"no track is visible in {needed} of {len(frames)} frames")
    raw, mask = raw[:, keep], mask[:, keep]
    track_ids = [t for t, k in zip(track_ids, keep) if k]

    observed = mask[0::2].any(axis=1)
    observed[target] = True
    if not observed.all():
        rows = np.repeat(observed, 2)
        raw, mask = raw[rows], mask[rows]
        target = int(np.sum(observed[:target]))
        frames = [image for image, o in zip(frames, observed) if o]
    logger.info(
        "measurement matrix: %d frames x %d tracks, %.0f%% observed", len(frames), raw.shape[1], 100 * mask.mean()
    )

    counts = mask.sum(axis=1)
    offsets = (np.where(mask, raw, 0.0).sum(axis=1) / counts).reshape(-1, 2)
    w = np.where(mask, raw - offsets.reshape(-1, 1), 0.0)
    return MeasurementMatrix(w, mask, raw, offsets, tuple(frames), tuple(track_ids), target)


@dataclass(frozen=True, eq=False)
class Reconstruction:
    shape: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    residual: float
    iterations: int
    residual_history: tuple[float, ...]
    degenerate_rank: bool = False
    converged: bool = True

    def motion(self) -> np.ndarray:
        return self.rotations.reshape(-1, 3)

    def predict(self) -> np.ndarray:
        """2F x P reprojection of the shape, in centered measurement coordinates."""
        return self.motion() @ self.shape.T + self.translations.reshape(-1, 1)

    def to_json(self) -> dict[str, Any]:
        return {
            "shape": self.shape.tolist(),
            "rotations": self.rotations.tolist(),
            "translations": self.translations.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
            "residual_history": list(self.residual_history),
            "degenerate_rank": self.degenerate_rank,
            "converged": self.converged,
        }


def _constraint_row(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coefficients of a' L b in the six unknowns of a symmetric 3 x 3 L."""
    return np.array(
        [
            a[0] * b[0],
            a[0] * b[1] + a[1] * b[0],
            a[0] * b[2] + a[2] * b[0],
            a[1] * b[1],
            a[1] * b[2] + a[2] * b[1],
            a[2] * b[2],
        ]
    )


def metric_upgrade(motion_hat: np.ndarray) -> np.ndarray:
    """
    G with motion_hat @ G closest to orthonormal frame rows.

    Solves |m1 L m1'| = |m2 L m2'| = 1, m1 L m2' = 0 per frame in least
    squares, projects L to the nearest positive definite matrix and returns
    G = V sqrt(e).
    """
    frames = motion_hat.shape[0] // 2
    a = np.zeros((3 * frames, 6))
    b = np.zeros(3 * frames)
    for f in range(frames):
        x, y = motion_hat[2 * f], motion_hat[2 * f + 1]
        a[3 * f] = _constraint_row(x, x)
        a[3 * f + 1] = _constraint_row(y, y)
        a[3 * f + 2] = _constraint_row(x, y)
        b[3 * f : 3 * f + 2] = 1.0
    l11, l12, l13, l22, l23, l33 = np.linalg.lstsq(a, b, rcond=None)[0]
    l = np.array([[l11, l12, l13], [l12, l22, l23], [l13, l23, l33]])
    values, vectors = np.linalg.eigh(l)
    if values[-1] <= 0:
        raise InsufficientData("metric upgrade found no positive definite solution")
    values = np.maximum(values, values[-1] * 1e-12)
    return vectors * np.sqrt(values)


def project_motion(motion: np.ndarray) -> np.ndarray:
    """Each frame's 2 x 3 block replaced by the nearest s * (orthonormal rows), s the mean singular value."""
    blocks = motion.reshape(-1, 2, 3)
    projected = np.empty_like(blocks)
    for f, block in enumerate(blocks):
        u, s, vt = np.linalg.svd(block, full_matrices=False)
        projected[f] = s.mean() * (u @ vt)
    return projected.reshape(-1, 3)


def _solve_shape(motion: np.ndarray, w: np.ndarray, mask: np.ndarray, translation: np.ndarray) -> np.ndarray:
    shape = np.zeros((w.shape[1], 3))
    for p in range(w.shape[1]):
        rows = mask[:, p]
        shape[p] = np.linalg.lstsq(motion[rows], w[rows, p] - translation[rows], rcond=None)[0]
    return shape


def _solve_translation(motion: np.ndarray, shape: np.ndarray, w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    residual = np.where(mask, w - motion @ shape.T, 0.0)
    return residual.sum(axis=1) / np.maximum(mask.sum(axis=1), 1)


def _rmse(model: np.ndarray, w: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sqrt(np.mean((w - model)[mask] ** 2)))


def factorize_rigid(m: MeasurementMatrix, max_iters: int = 1000, tol: float = 1e-12) -> Reconstruction:
    """
    Rank-3 rigid factorization tolerant to missing entries.

    The residual is the RMS error over observed coordinates in pixels.
    Iteration stops when it changes by less than tol; five consecutive
    increases raise DivergedFactorization. A third singular value below 1e-6
    of the first marks the result degenerate_rank and stops after one pass.
    """
    frames, points = m.n_frames, m.n_points
    if frames < 3 or points < 4:
        raise InsufficientData(f"need at least 3 frames and 4 points, got {frames} and {points}")

    w, mask = m.w, m.mask
    # increases below this are rounding noise
    noise_floor = 1e-12 * max(1.0, float(np.abs(w[mask]).max()))
    # unobserved entries start at zero, the observed mean after centering
    model = np.zeros_like(w)
    translation = np.zeros(2 * frames)
    history: list[float] = []
    increases = 0
    degenerate = False
    converged = False
    motion = shape = None

    for iteration in range(1, max_iters + 1):
        filled = np.where(mask, w, model) - translation[:, None]
        u, s, vt = np.linalg.svd(filled, full_matrices=False)
        if iteration == 1 and s[2] < DEGENERATE_RATIO * s[0]:
            degenerate = True
            logger.warning("measurement matrix is rank deficient (s3/s1 = %.2g)", s[2] / s[0] if s[0] else 0.0)
        root = np.sqrt(s[:3])
        motion_hat = u[:, :3] * root

        try:
            g = metric_upgrade(motion_hat)
            motion = project_motion(motion_hat @ g)
        except np.linalg.LinAlgError as exc:
            raise InsufficientData(f"metric upgrade failed: {exc}") from exc

        shape = _solve_shape(motion, w, mask, translation)
        translation = _solve_translation(motion, shape, w, mask)
        model = motion @ shape.T + translation[:, None]
        residual = _rmse(model, w, mask)

        if history and residual > history[-1] * (1 + 1e-9) + noise_floor:
            increases += 1
            if increases >= DIVERGENCE_PATIENCE:
                raise DivergedFactorization(f"residual increased {increases} times in a row (now {residual:.3g})")
        else:
            increases = 0
        done = bool(history) and abs(history[-1] - residual) < tol
        history.append(residual)
        if degenerate:
            break
        if done:
            converged = True
            break

    logger.info("factorization: %d iterations, residual %.3g px", len(history), history[-1])
    return Reconstruction(
        shape=shape,
        rotations=motion.reshape(-1, 2, 3),
        translations=translation.reshape(-1, 2),
        residual=history[-1],
        iterations=len(history),
        residual_history=tuple(history),
        degenerate_rank=degenerate,
        converged=converged,
    )


def xy_snap(recon: Reconstruction, m: MeasurementMatrix) -> np.ndarray:
    """
    P x 3 points: x and y are the target frame's observations as measured, z
    the reconstructed depth along the target camera axis r1 x r2 (scaled like
    the image axes).
    """
    f = m.target_frame
    if not m.mask[2 * f].all():
        raise EmptyTracks("target frame does not observe every track")
    r1, r2 = recon.rotations[f]
    scale = 0.5 * (np.linalg.norm(r1) + np.linalg.norm(r2))
    axis = np.cross(r1 / np.linalg.norm(r1), r2 / np.linalg.norm(r2))
    depth = scale * (recon.shape @ axis)
    return np.column_stack([m.raw[2 * f], m.raw[2 * f + 1], depth])


def procrustes_rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """
    RMS point distance after the best similarity alignment (reflections
    allowed) of estimate onto truth, divided by the diameter of truth.
    """
    est = estimate - estimate.mean(axis=0)
    ref = truth - truth.mean(axis=0)
    rotation, _ = orthogonal_procrustes(est, ref)
    aligned = est @ rotation
    denom = float(np.sum(aligned * aligned))
    scale = float(np.sum(aligned * ref)) / denom if denom > 0 else 0.0
    error = np.sqrt(np.mean(np.sum((scale * aligned - ref) ** 2, axis=1)))
    diameter = float(np.max(np.linalg.norm(ref[:, None] - ref[None], axis=2)))
    return float(error / diameter) if diameter > 0 else float(error)
