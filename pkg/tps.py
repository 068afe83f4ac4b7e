"""
Thin-plate-spline warps defined by control-point correspondences.

A warp maps a source frame to a target frame:

    T(p) = a0 + a1 * x + a2 * y + sum_i w_i * U(|p - x_i|),    U(r) = r^2 log r^2

with the side conditions sum w = 0, sum w * x = 0, sum w * y = 0 on both output
coordinates. The coefficients solve L theta = [x'; 0] with L = [[K, P], [P^T, 0]],
so they are linear in the target control points. That linearity is what makes
the warped points differentiable with respect to a deformed control grid.

All math runs in normalized [-1, 1] x [-1, 1] coordinates; use to_normalized /
to_pixels at the image boundary.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Sequence

import numpy as np
import numpy.typing as npt
from scipy.linalg import block_diag, lu_factor, lu_solve
from scipy.spatial.distance import cdist

from errors import DimensionMismatch, SingularSystem

logger = logging.getLogger(__name__)

Points = npt.NDArray[np.float64]

DEFAULT_CONDITION_CAP = 1e12
DEFAULT_BOUND = 1.5


def as_points(points: Sequence[Sequence[float]] | npt.ArrayLike, name: str = "points") -> Points:
    """Coerce to a finite (N, 2) float64 array."""
    array = np.asarray(points, dtype=np.float64)
    if array.size == 0:
        return array.reshape(0, 2)
    if array.ndim != 2 or array.shape[1] != 2:
        raise DimensionMismatch(f"{name} must have shape (N, 2), got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains NaN or Inf")
    return array


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def to_normalized(points: npt.ArrayLike, width: int, height: int) -> Points:
    """Pixel (x, y) to [-1, 1]^2, pixel centres 0 and size-1 mapping to -1 and 1."""
    pts = as_points(points)
    scale = np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)
    return 2.0 * pts / scale - 1.0


def to_pixels(points: npt.ArrayLike, width: int, height: int) -> Points:
    pts = as_points(points)
    scale = np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)
    return (pts + 1.0) * 0.5 * scale


def radial_kernel(r: npt.ArrayLike) -> np.ndarray | float:
    """U(r) = r^2 log r^2, with the removable singularity U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    r2 = r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r2 > 0, r2 * np.log(r2), 0.0)
    return out if out.ndim else float(out)


def regular_grid(k: int) -> Points:
    """k x k lattice on [-1, 1]^2 in row-major order (y outer, x inner)."""
    if k < 2:
        raise ValueError("grid side must be at least 2")
    axis = np.linspace(-1.0, 1.0, k)
    gx, gy = np.meshgrid(axis, axis)
    return np.column_stack([gx.ravel(), gy.ravel()])


def _affine_basis(points: Points) -> np.ndarray:
    return np.column_stack([np.ones(len(points)), points])


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """L = [[K, P], [P^T, 0]] for a fixed set of source points, with its inverse."""

    source_points: Points
    l: np.ndarray
    l_inv: np.ndarray
    _lu: tuple = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.source_points)

    @property
    def kernel(self) -> np.ndarray:
        return self.l[: self.n, : self.n]


@lru_cache(maxsize=128)
def _cached_system(key: bytes, n: int, condition_cap: float) -> SystemMatrix:
    source = np.frombuffer(key, dtype=np.float64).reshape(n, 2).copy()
    basis = _affine_basis(source)
    if np.linalg.matrix_rank(basis) < 3:
        raise SingularSystem("control points are collinear")

    l = np.zeros((n + 3, n + 3))
    l[:n, :n] = radial_kernel(cdist(source, source))
    l[:n, n:] = basis
    l[n:, :n] = basis.T

    condition = np.linalg.cond(l)
    if not np.isfinite(condition) or condition > condition_cap:
        raise SingularSystem(f"TPS system is ill-conditioned (condition {condition:.3g} > {condition_cap:.3g})")

    lu = lu_factor(l)
    l_inv = lu_solve(lu, np.eye(n + 3))
    l_inv = 0.5 * (l_inv + l_inv.T)
    return SystemMatrix(_readonly(source), _readonly(l), _readonly(l_inv), lu)


def build_system(source_points: npt.ArrayLike, condition_cap: float = DEFAULT_CONDITION_CAP) -> SystemMatrix:
    """Build (and cache per source configuration) the TPS system for the given control points."""
    source = np.ascontiguousarray(as_points(source_points, "source_points"))
    if len(source) < 3:
        raise SingularSystem(f"need at least 3 control points, got {len(source)}")
    return _cached_system(source.tobytes(), len(source), float(condition_cap))


@dataclass(frozen=True, eq=False)
class TpsWarp:
    """Solved TPS coefficients. Column 0 of w and a drives x, column 1 drives y; a rows are constant, x, y."""

    source_points: Points
    w: np.ndarray
    a: np.ndarray

    @property
    def wx(self) -> np.ndarray:
        return self.w[:, 0]

    @property
    def wy(self) -> np.ndarray:
        return self.w[:, 1]

    @property
    def ax(self) -> np.ndarray:
        return self.a[:, 0]

    @property
    def ay(self) -> np.ndarray:
        return self.a[:, 1]

    @property
    def linear_part(self) -> np.ndarray:
        """2x2 matrix [[ax1, ax2], [ay1, ay2]]."""
        return self.a[1:, :].T

    def to_json(self) -> dict[str, Any]:
        return {
            "source_points": self.source_points.tolist(),
            "wx": self.wx.tolist(),
            "wy": self.wy.tolist(),
            "ax": self.ax.tolist(),
            "ay": self.ay.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "TpsWarp":
        source = as_points(data["source_points"], "source_points")
        w = np.column_stack([np.asarray(data["wx"], dtype=np.float64), np.asarray(data["wy"], dtype=np.float64)])
        a = np.column_stack([np.asarray(data["ax"], dtype=np.float64), np.asarray(data["ay"], dtype=np.float64)])
        if w.shape != (len(source), 2) or a.shape != (3, 2):
            raise DimensionMismatch("warp coefficients do not match its source points")
        return cls(_readonly(source), _readonly(w), _readonly(a))

    @classmethod
    def identity(cls, source_points: npt.ArrayLike) -> "TpsWarp":
        source = as_points(source_points)
        a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        return cls(_readonly(source.copy()), _readonly(np.zeros((len(source), 2))), _readonly(a))


def solve_coefficients(system: SystemMatrix, targets: npt.ArrayLike) -> TpsWarp:
    """theta = L^-1 [x'; 0]: the warp taking system.source_points onto targets."""
    target = as_points(targets, "targets")
    if len(target) != system.n:
        raise DimensionMismatch(f"expected {system.n} targets, got {len(target)}")
    rhs = np.vstack([target, np.zeros((3, 2))])
    theta = lu_solve(system._lu, rhs)
    return TpsWarp(system.source_points, _readonly(theta[: system.n].copy()), _readonly(theta[system.n :].copy()))


def fit_warp(source_points: npt.ArrayLike, target_points: npt.ArrayLike, condition_cap: float = DEFAULT_CONDITION_CAP) -> TpsWarp:
    return solve_coefficients(build_system(source_points, condition_cap), target_points)


def invert_warp(warp: TpsWarp, condition_cap: float = DEFAULT_CONDITION_CAP) -> TpsWarp:
    """Swap the roles of source and target control points; exact at the control points only."""
    return fit_warp(apply_warp(warp, warp.source_points), warp.source_points, condition_cap)


def _design_matrix(source_points: Points, points: Points) -> np.ndarray:
    """[U(|p - x_i|) | 1 x y] rows for every evaluation point p."""
    return np.hstack([radial_kernel(cdist(points, source_points)), _affine_basis(points)])


def apply_warp(warp: TpsWarp, points: npt.ArrayLike) -> Points:
    pts = as_points(points)
    if len(pts) == 0:
        return pts.copy()
    design = _design_matrix(warp.source_points, pts)
    return design @ np.vstack([warp.w, warp.a])


@dataclass(frozen=True)
class WarpEnergy:
    bending: float
    affine: float

    @property
    def mean_energy(self) -> float:
        return 0.5 * (self.bending + self.affine)


def warp_energy(warp: TpsWarp, system: SystemMatrix) -> WarpEnergy:
    """Bending energy wx'K wx + wy'K wy and affine energy |A - I|_F^2."""
    if len(warp.source_points) != system.n:
        raise DimensionMismatch(f"warp has {len(warp.source_points)} control points, system has {system.n}")
    kernel = system.kernel
    bending = float(warp.wx @ kernel @ warp.wx + warp.wy @ kernel @ warp.wy)
    if bending < 0:
        if bending < -1e-12:
            logger.debug("negative bending energy %.3g clamped", bending)
        bending = 0.0
    affine = float(np.sum((warp.linear_part - np.eye(2)) ** 2))
    return WarpEnergy(bending=bending, affine=affine)


def warp_basis(system: SystemMatrix, eval_points: npt.ArrayLike) -> np.ndarray:
    """(M, N) matrix B with warped eval points = B @ target control points, per coordinate."""
    pts = as_points(eval_points, "eval_points")
    return _design_matrix(system.source_points, pts) @ system.l_inv[:, : system.n]


def warp_points_jacobian(system: SystemMatrix, eval_points: npt.ArrayLike) -> np.ndarray:
    """
    d(warped eval points) / d(target control points), shape (2M, 2N).

    Rows are ordered [x_1..x_M, y_1..y_M] and columns [x'_1..x'_N, y'_1..y'_N]; the
    two diagonal blocks are identical and the off-diagonal blocks are zero.
    """
    basis = warp_basis(system, eval_points)
    return block_diag(basis, basis)


@dataclass(frozen=True, eq=False)
class ControlGrid:
    k: int
    source: Points
    target: Points

    def __post_init__(self) -> None:
        if self.source.shape != (self.k * self.k, 2) or self.target.shape != (self.k * self.k, 2):
            raise DimensionMismatch(f"a {self.k}x{self.k} grid needs {self.k * self.k} points")

    @classmethod
    def regular(cls, k: int) -> "ControlGrid":
        source = _readonly(regular_grid(k))
        return cls(k, source, source)

    @classmethod
    def deformed(cls, k: int, target: npt.ArrayLike, bound: float = DEFAULT_BOUND) -> "ControlGrid":
        target = as_points(target, "target")
        if np.any(np.abs(target) > bound):
            raise ValueError(f"grid target leaves [-{bound}, {bound}]^2")
        return cls(k, _readonly(regular_grid(k)), _readonly(target.copy()))

    def warp(self, condition_cap: float = DEFAULT_CONDITION_CAP) -> TpsWarp:
        return solve_coefficients(build_system(self.source, condition_cap), self.target)

    def to_json(self) -> dict[str, Any]:
        return {"k": self.k, "source": self.source.tolist(), "target": self.target.tolist()}

    @classmethod
    def from_json(cls, data: dict[str, Any], bound: float = DEFAULT_BOUND) -> "ControlGrid":
        grid = cls.deformed(int(data["k"]), data["target"], bound)
        if "source" in data and not np.allclose(as_points(data["source"]), grid.source, atol=1e-9):
            raise ValueError("grid source is not the regular lattice")
        return grid


@dataclass(frozen=True)
class GridFit:
    grid: ControlGrid
    history: tuple[float, ...]

    @property
    def final_mse(self) -> float:
        return self.history[-1]


def _affine_initial_grid(source: Points, target: Points, lattice: Points) -> Points:
    basis = _affine_basis(source)
    coeffs, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return _affine_basis(lattice) @ coeffs


def fit_grid_to_correspondences(
    source_kps: npt.ArrayLike,
    target_kps: npt.ArrayLike,
    k: int = 10,
    iterations: int = 2000,
    step_size: float | None = None,
    bending_weight: float = 0.0,
    init: str = "affine",
    bound: float = DEFAULT_BOUND,
    condition_cap: float = DEFAULT_CONDITION_CAP,
) -> GridFit:
    """
    Deform a k x k control grid so its TPS carries source_kps onto target_kps.

    Projected gradient descent on the grid targets G of

        mean_i |B G - t_i|^2 + bending_weight * sum_c G_c' E G_c

    where B is warp_basis at the source keypoints and E = Linv_nn' K Linv_nn turns
    grid targets into bending energy. When step_size is None it is set to 1 / Lip,
    the inverse Lipschitz constant of the gradient, under which the objective
    decreases monotonically. Every step is projected back onto the box
    [-bound, bound]^2, so the recorded objective is that of the returned grid.
    init is "affine" (least-squares affine start) or "identity" (regular lattice).
    """
    source = as_points(source_kps, "source_kps")
    target = as_points(target_kps, "target_kps")
    if source.shape != target.shape:
        raise DimensionMismatch("source and target keypoints differ in count")
    if len(source) < 3:
        raise ValueError("need at least 3 correspondences")

    system = build_system(regular_grid(k), condition_cap)
    basis = warp_basis(system, source)
    linv_nn = system.l_inv[: system.n, : system.n]
    bending_form = linv_nn @ system.kernel @ linv_nn

    m = len(source)
    hessian = (2.0 / m) * (basis.T @ basis) + 2.0 * bending_weight * bending_form
    if step_size is None:
        lipschitz = float(np.linalg.eigvalsh(0.5 * (hessian + hessian.T))[-1])
        step_size = 1.0 / lipschitz if lipschitz > 0 else 1.0

    if init == "affine" and np.linalg.matrix_rank(_affine_basis(source)) == 3:
        grid = _affine_initial_grid(source, target, system.source_points)
    else:
        grid = system.source_points.copy()
    grid = np.clip(grid, -bound, bound)

    def objective(g: np.ndarray) -> float:
        residual = basis @ g - target
        value = float(np.mean(np.sum(residual**2, axis=1)))
        return value + bending_weight * float(np.sum(g * (bending_form @ g)))

    history = [objective(grid)]
    for _ in range(iterations):
        gradient = (2.0 / m) * basis.T @ (basis @ grid - target) + 2.0 * bending_weight * (bending_form @ grid)
        stepped = np.clip(grid - step_size * gradient, -bound, bound)
        if np.array_equal(stepped, grid):
            break
        grid = stepped
        history.append(objective(grid))

    fitted = ControlGrid(k, system.source_points, _readonly(grid))
    logger.debug("grid fit: objective %.3g -> %.3g in %d steps", history[0], history[-1], len(history) - 1)
    return GridFit(fitted, tuple(history))
