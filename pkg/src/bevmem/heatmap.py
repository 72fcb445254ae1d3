"""Temporal overlap heatmap: per-cell count of frames a BEV cell has been in view.

Starts at one everywhere, then each frame is warped by egomotion (zero
padding for cells entering the view) and incremented by one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorops as T
from .grid import GridSpec, Pose2


@dataclass
class OverlapHeatmap:
    values: T.Tensor  # (1, H, W), never requires grad
    spec: GridSpec

    @property
    def array(self) -> np.ndarray:
        return self.values.data[0]

    def copy(self) -> OverlapHeatmap:
        return OverlapHeatmap(self.values.detach(), self.spec)


def init(spec: GridSpec) -> OverlapHeatmap:
    return OverlapHeatmap(T.Tensor(np.ones((1, spec.h_cells, spec.w_cells))), spec)


def propagate(h: OverlapHeatmap, rel: Pose2) -> OverlapHeatmap:
    with T.no_grad():
        return OverlapHeatmap(T.warp(h.values, rel, h.spec), h.spec)


def increment(h_hat: OverlapHeatmap) -> OverlapHeatmap:
    return OverlapHeatmap(T.Tensor(h_hat.values.data + 1), h_hat.spec)


def step(h: OverlapHeatmap, rel: Pose2) -> OverlapHeatmap:
    return increment(propagate(h, rel))


def to_gray8(h: OverlapHeatmap, frame_index: int) -> np.ndarray:
    """8-bit grayscale rendering, scaled so the largest possible count maps to 255."""
    v = np.round(255.0 * h.array.astype(np.float64) / (frame_index + 1))
    return np.clip(v, 0, 255).astype(np.uint8)
