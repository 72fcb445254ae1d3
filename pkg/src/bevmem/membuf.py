"""Fixed-lag working memory of fused BEV features, kept aligned to the current ego frame."""

from __future__ import annotations

import numpy as np

from . import heatmap as hm
from . import tensorops as T
from .grid import GridSpec, Pose2


class WorkingMemory:
    """FIFO of the last ``capacity`` fused features (oldest first) plus the overlap heatmap.

    Entries are stored detached, so nothing a later frame computes can send
    gradient back through the buffer.
    """

    def __init__(self, f_bev_t0: T.Tensor, capacity: int, spec: GridSpec):
        if capacity < 1:
            raise ValueError(f"working memory capacity must be >= 1, got {capacity}")
        if f_bev_t0.shape[-2:] != spec.shape:
            raise T.ShapeError(f"feature {f_bev_t0.shape} does not match grid {spec.shape}")
        self.capacity = capacity
        self.spec = spec
        seed = np.array(f_bev_t0.data, copy=True)
        self.entries: list[T.Tensor] = [T.Tensor(seed) for _ in range(capacity)]
        self.heatmap = hm.init(spec)
        self._initial_pending = True

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.entries[0].shape

    def replace_initial(self, fused_t0: T.Tensor) -> None:
        if not self._initial_pending:
            raise RuntimeError("replace_initial is only valid right after the first fusion of a sequence")
        self._check(fused_t0)
        snap = np.array(fused_t0.data, copy=True)
        self.entries = [T.Tensor(snap) for _ in range(self.capacity)]
        self._initial_pending = False

    def advance(self, fused_t: T.Tensor, rel_next: Pose2) -> None:
        """Push the newest fused feature, evict the oldest, and move everything into the next ego frame."""
        self._check(fused_t)
        self._initial_pending = False
        self.entries = self.entries[1:] + [fused_t.detach()]
        with T.no_grad():
            # one warp over the whole stack; rows are independent
            warped = T.warp(T.Tensor(np.stack([e.data for e in self.entries])), rel_next, self.spec)
        self.entries = [T.Tensor(w) for w in warped.data]
        self.heatmap = hm.step(self.heatmap, rel_next)

    def stacked(self) -> T.Tensor:
        """Channel concatenation oldest-to-newest, ``(capacity * C, H, W)``."""
        return T.Tensor(np.concatenate([e.data for e in self.entries], axis=-3))

    def _check(self, f: T.Tensor) -> None:
        if f.shape != self.feature_shape:
            raise T.ShapeError(f"expected feature shape {self.feature_shape}, got {f.shape}")


def init(f_bev_t0: T.Tensor, capacity: int, spec: GridSpec) -> WorkingMemory:
    return WorkingMemory(f_bev_t0, capacity, spec)
