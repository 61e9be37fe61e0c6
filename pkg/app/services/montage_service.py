"""
Montage Service - Electrode projection and activity-mesh formation

Electrodes are flattened with an azimuthal equidistant projection around the
center electrode, each time frame is interpolated onto a G1 x G2 lattice with
the Clough-Tocher scheme and the outer frame of the lattice is cropped.
"""
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import CloughTocher2DInterpolator
from scipy.spatial import Delaunay

from app.core.exceptions import ShapeError
from app.models.schemas import ElectrodeMontage

logger = logging.getLogger(__name__)

OUTSIDE_HULL_FILL = 0.0
# scipy's global C1 gradient estimator (minimum-curvature, Nielson) settings
CT_GRADIENT_TOL = 1e-10
CT_GRADIENT_MAXITER = 2000
TRIALS_PER_CHUNK = 128


@dataclass(frozen=True)
class MeshGrid:
    """Uniform lattice over the bounding box of the projected electrodes."""
    xs: np.ndarray  # G2 column coordinates
    ys: np.ndarray  # G1 row coordinates

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.ys), len(self.xs)

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        return float(self.xs[0]), float(self.xs[-1]), float(self.ys[0]), float(self.ys[-1])

    def nodes(self) -> np.ndarray:
        """(G1*G2) x 2 node coordinates, row-major: node (i, j) = (xs[j], ys[i])."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class MeshFrameStack:
    """Border-cropped meshes of one trial: 1 x M1 x M2 x T."""
    data: np.ndarray
    grid_extent: Tuple[float, float, float, float]

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 1:
            raise ShapeError(f"mesh stack must be 1 x M1 x M2 x T, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mesh stack contains non-finite values")


# ============================================
# AZIMUTHAL EQUIDISTANT PROJECTION
# ============================================

def _rotation_to_pole(center: np.ndarray) -> np.ndarray:
    """Rotation matrix taking the unit vector ``center`` onto +z."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(center, z)
    sin_a = np.linalg.norm(axis)
    cos_a = float(np.dot(center, z))
    if sin_a < 1e-15:
        return np.eye(3) if cos_a > 0 else np.diag([1.0, -1.0, -1.0])
    axis = axis / sin_a
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + sin_a * k + (1 - cos_a) * (k @ k)


def project_azimuthal(montage: ElectrodeMontage) -> np.ndarray:
    """
    Flatten electrodes into the plane, n x 2.

    Planar radius equals the geodesic distance from the center electrode and
    the polar angle equals the longitude about the center's axis.
    """
    rotated = montage.as_array() @ _rotation_to_pole(montage.center()).T
    x, y, z = rotated[:, 0], rotated[:, 1], rotated[:, 2]
    radius = np.arctan2(np.hypot(x, y), z)
    antipodal = np.hypot(x, y) < 1e-12
    antipodal &= z < 0
    if np.any(antipodal):
        names = [montage.labels[i] for i in np.flatnonzero(antipodal)]
        warnings.warn(f"electrodes {names} are antipodal to the center; azimuth set to 0", RuntimeWarning, stacklevel=2)
    azimuth = np.where(antipodal, 0.0, np.arctan2(y, x))
    return np.column_stack([radius * np.cos(azimuth), radius * np.sin(azimuth)])


# ============================================
# CLOUGH-TOCHER INTERPOLATION
# ============================================

def make_grid(points: np.ndarray, g1: int, g2: Optional[int] = None) -> MeshGrid:
    """Inclusive uniform lattice over the tight bounding box of ``points``."""
    g2 = g1 if g2 is None else g2
    lo, hi = points.min(axis=0), points.max(axis=0)
    return MeshGrid(xs=np.linspace(lo[0], hi[0], g2), ys=np.linspace(lo[1], hi[1], g1))


def triangulate(points: np.ndarray) -> Delaunay:
    """Delaunay triangulation with explicit duplicate and collinearity checks."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 3:
        raise ShapeError(f"need at least 3 planar points, got shape {points.shape}")
    if len(np.unique(points, axis=0)) != len(points):
        raise ValueError("duplicate electrode positions in the plane")
    spread = points - points.mean(axis=0)
    if np.linalg.matrix_rank(spread, tol=1e-12 * max(1.0, np.abs(spread).max())) < 2:
        raise ValueError("electrode positions are collinear; no triangulation exists")
    return Delaunay(points)


def interpolate_mesh(
    points: Union[np.ndarray, Delaunay],
    values: np.ndarray,
    grid: MeshGrid,
) -> np.ndarray:
    """
    Clough-Tocher interpolant of per-electrode ``values`` sampled at grid nodes.

    ``values`` may carry trailing axes (n x ...); the result is G1 x G2 x ....
    Nodes outside the convex hull are 0.
    """
    tri = points if isinstance(points, Delaunay) else triangulate(points)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != tri.npoints:
        raise ShapeError(f"{values.shape[0]} values for {tri.npoints} electrodes")
    interpolator = CloughTocher2DInterpolator(
        tri, values, fill_value=OUTSIDE_HULL_FILL, tol=CT_GRADIENT_TOL, maxiter=CT_GRADIENT_MAXITER
    )
    sampled = interpolator(grid.nodes())
    return sampled.reshape(grid.shape + values.shape[1:])


def border_crop(field: np.ndarray) -> np.ndarray:
    """Remove the outermost node frame of a G1 x G2 field (trailing axes kept)."""
    if field.ndim < 2 or field.shape[0] < 3 or field.shape[1] < 3:
        raise ShapeError(f"border crop needs at least 3 x 3 nodes, got {field.shape[:2]}")
    return field[1:-1, 1:-1, ...]


# ============================================
# TRIAL PROJECTION
# ============================================

class MeshProjector:
    """
    Projection state shared by every trial of a montage.

    The planar layout, triangulation and grid are computed once and only read
    afterwards, so one projector can serve many threads.
    """

    def __init__(self, montage: ElectrodeMontage, grid_size: int):
        if grid_size < 3:
            raise ShapeError(f"grid size must be at least 3, got {grid_size}")
        self.montage = montage
        self.grid_size = grid_size
        self.points = project_azimuthal(montage)
        self.triangulation = triangulate(self.points)
        self.grid = make_grid(self.points, grid_size)
        logger.debug(f"Projector ready: {montage.size} electrodes, grid {grid_size}x{grid_size}")

    @property
    def mesh_size(self) -> int:
        return self.grid_size - 2

    def _check_channels(self, channels: int) -> None:
        if channels != self.montage.size:
            raise ShapeError(f"trial has {channels} channels, montage has {self.montage.size}")

    def frames(self, trial: np.ndarray) -> MeshFrameStack:
        """channels x T trial -> 1 x M x M x T."""
        trial = np.asarray(trial, dtype=np.float64)
        if trial.ndim != 2:
            raise ShapeError(f"trial must be channels x T, got {trial.shape}")
        self._check_channels(trial.shape[0])
        field = interpolate_mesh(self.triangulation, trial, self.grid)
        return MeshFrameStack(data=border_crop(field)[None, ...], grid_extent=self.grid.extent)

    def project_all(self, trials: np.ndarray, dtype=np.float32) -> np.ndarray:
        """N x channels x T trials -> N x 1 x M x M x T meshes."""
        trials = np.asarray(trials)
        if trials.ndim != 3:
            raise ShapeError(f"trials must be N x channels x T, got {trials.shape}")
        n, channels, t = trials.shape
        self._check_channels(channels)
        m = self.mesh_size
        out = np.empty((n, 1, m, m, t), dtype=dtype)
        for start in range(0, n, TRIALS_PER_CHUNK):
            chunk = trials[start:start + TRIALS_PER_CHUNK].astype(np.float64)
            values = chunk.transpose(1, 0, 2).reshape(channels, -1)
            field = border_crop(interpolate_mesh(self.triangulation, values, self.grid))
            out[start:start + len(chunk), 0] = field.reshape(m, m, len(chunk), t).transpose(2, 0, 1, 3)
        logger.info(f"Projected {n} trials onto {m}x{m} meshes")
        return out


def trial_to_frames(trial: np.ndarray, montage: ElectrodeMontage, g1: int) -> MeshFrameStack:
    """Project one channels x T trial onto border-cropped (g1-2) x (g1-2) meshes."""
    return MeshProjector(montage, g1).frames(trial)


def project_trials(trials: np.ndarray, montage: ElectrodeMontage, g1: int, dtype=np.float32) -> np.ndarray:
    return MeshProjector(montage, g1).project_all(trials, dtype=dtype)


# ============================================
# MONTAGE FILES
# ============================================

def standard_montage(n_channels: int = 124, lowest_z: float = -0.35) -> ElectrodeMontage:
    """
    Deterministic quasi-uniform scalp cap.

    The vertex electrode ``Cz`` sits at +z and is the projection center; the
    remaining electrodes follow a golden-angle spiral down to ``lowest_z``.
    """
    if n_channels < 4:
        raise ValueError("a montage needs at least 4 electrodes")
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n_channels - 1)
    z = 1.0 - (k + 0.5) * (1.0 - lowest_z) / (n_channels - 1)
    r = np.sqrt(1.0 - z ** 2)
    spiral = np.column_stack([r * np.cos(k * golden), r * np.sin(k * golden), z])
    positions = [(0.0, 0.0, 1.0)] + [tuple(p) for p in spiral]
    labels = ["Cz"] + [f"E{i}" for i in range(2, n_channels + 1)]
    return ElectrodeMontage(labels=labels, positions=positions, center_label="Cz")


def load_montage_csv(path: Union[str, Path], center_label: Optional[str] = None) -> ElectrodeMontage:
    """
    Read ``label,x,y,z`` rows (``#`` comments allowed).

    Without ``center_label`` a ``# center=<label>`` comment is honoured, else
    the electrode with the largest normalised z is used.
    """
    if center_label is None:
        for line in Path(path).read_text().splitlines():
            if line.startswith("#") and "center=" in line:
                center_label = line.split("center=", 1)[1].strip()
                break
    frame = pd.read_csv(path, comment="#", skipinitialspace=True, dtype={"label": str})
    missing = {"label", "x", "y", "z"} - set(frame.columns)
    if missing:
        raise ValueError(f"montage file {path} lacks columns {sorted(missing)}")
    positions = frame[["x", "y", "z"]].to_numpy(dtype=np.float64)
    if center_label is None:
        norms = np.linalg.norm(positions, axis=1)
        if np.any(norms == 0):
            raise ValueError("electrode coordinate with zero norm")
        center_label = str(frame["label"].iloc[int(np.argmax(positions[:, 2] / norms))])
    return ElectrodeMontage(
        labels=frame["label"].tolist(),
        positions=[tuple(p) for p in positions],
        center_label=center_label,
    )


def save_montage_csv(montage: ElectrodeMontage, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(montage.positions, columns=["x", "y", "z"])
    frame.insert(0, "label", montage.labels)
    path.write_text(f"# center={montage.center_label}\n" + frame.to_csv(index=False, float_format="%.12g"))
    return path
