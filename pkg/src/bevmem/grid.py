"""SE(2) poses and the ego-centered BEV grid.

Grid convention: the ego sits at the grid center, column index ``j`` runs
along ego-forward ``x`` and row index ``i`` runs along ego-left ``y``.
Values live at cell centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Coordinates this close to an integer are snapped so rotations by multiples
# of 90 degrees land exactly on cell centers.
SNAP_EPS = 1e-9


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map points of shape (..., 2) from this pose's local frame to its parent frame."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        px, py = pts[..., 0], pts[..., 1]
        return np.stack([c * px - s * py + self.x, s * px + c * py + self.y], axis=-1)

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), s * p.x - c * p.y, -p.yaw)


def relative_transform(pose_prev: Pose2, pose_cur: Pose2) -> Pose2:
    """Transform taking coordinates in the previous ego frame to the current one.

    Both poses are world poses. A world-fixed point known at ``q`` in the
    previous ego frame sits at ``relative_transform(prev, cur).apply(q)``
    in the current ego frame.
    """
    return compose(inverse(pose_cur), pose_prev)


@dataclass(frozen=True)
class GridSpec:
    h_cells: int = 50
    w_cells: int = 100
    cell_size_m: float = 1.0

    def __post_init__(self):
        if int(self.h_cells) < 1 or int(self.w_cells) < 1:
            raise ValueError(f"grid needs at least one cell per axis, got {self.h_cells}x{self.w_cells}")
        if not self.cell_size_m > 0:
            raise ValueError(f"cell_size_m must be positive, got {self.cell_size_m}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h_cells, self.w_cells)

    @property
    def n_cells(self) -> int:
        return self.h_cells * self.w_cells

    def grid_to_ego(self, ij: np.ndarray) -> np.ndarray:
        """Fractional (row, col) indices of shape (..., 2) to ego (x, y) meters."""
        ij = np.asarray(ij, dtype=np.float64)
        x = (ij[..., 1] - (self.w_cells - 1) / 2.0) * self.cell_size_m
        y = (ij[..., 0] - (self.h_cells - 1) / 2.0) * self.cell_size_m
        return np.stack([x, y], axis=-1)

    def ego_to_grid(self, xy: np.ndarray) -> np.ndarray:
        """Ego (x, y) meters of shape (..., 2) to fractional (row, col) indices."""
        xy = np.asarray(xy, dtype=np.float64)
        i = xy[..., 1] / self.cell_size_m + (self.h_cells - 1) / 2.0
        j = xy[..., 0] / self.cell_size_m + (self.w_cells - 1) / 2.0
        return np.stack([i, j], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """Integer (row, col) index of every cell, shape (H, W, 2)."""
        ii, jj = np.meshgrid(np.arange(self.h_cells), np.arange(self.w_cells), indexing="ij")
        return np.stack([ii, jj], axis=-1).astype(np.float64)

    def in_bounds(self, ij: np.ndarray) -> np.ndarray:
        ij = np.asarray(ij)
        return (
            (ij[..., 0] >= 0)
            & (ij[..., 0] <= self.h_cells - 1)
            & (ij[..., 1] >= 0)
            & (ij[..., 1] <= self.w_cells - 1)
        )


def snap(coords: np.ndarray, eps: float = SNAP_EPS) -> np.ndarray:
    r = np.round(coords)
    return np.where(np.abs(coords - r) < eps, r, coords)


def map_coords(spec: GridSpec, rel: Pose2, ij: np.ndarray) -> np.ndarray:
    """Source grid coordinates, in the previous frame, of current-frame grid coordinates ``ij``."""
    xy_cur = spec.grid_to_ego(ij)
    xy_prev = inverse(rel).apply(xy_cur)
    return snap(spec.ego_to_grid(xy_prev))


@dataclass(frozen=True)
class Flow:
    """Backward flow: for every destination cell, where to sample in the source grid."""

    coords: np.ndarray  # (H, W, 2) fractional (row, col) in the source grid
    in_bounds: np.ndarray  # (H, W) bool

    @property
    def rows(self) -> np.ndarray:
        return self.coords[..., 0]

    @property
    def cols(self) -> np.ndarray:
        return self.coords[..., 1]


def backward_flow(spec: GridSpec, rel: Pose2) -> Flow:
    coords = map_coords(spec, rel, spec.cell_centers())
    return Flow(coords, spec.in_bounds(coords))
