"""Procedural streaming driving scenarios.

A scenario is a road corridor (boundaries, dividers, crossings as
width-carrying polylines in world meters), an ego trajectory sampled at
2 Hz, and a set of ego-frame occluder rectangles. Frames are rendered into
ego-centered label rasters and noisy one-hot observations with occluded
cells zeroed.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.spatial import cKDTree

from .grid import GridSpec, Pose2, inverse, relative_transform

CLASSES = ("background", "ped_crossing", "divider", "boundary")
PED_CROSSING, DIVIDER, BOUNDARY = 1, 2, 3
# later entries overwrite earlier ones when rasterizing
TRAJECTORY_KINDS = ("straight", "turn", "varied_speed")
PRECEDENCE = ("boundary", "divider", "ped_crossing")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}
N_CLASSES = len(CLASSES)
DT = 0.5  # seconds between frames (2 Hz)
SCHEMA_VERSION = 1
SAMPLE_STEP = 0.1  # meters between polyline samples used to accelerate rasterization


@dataclass(frozen=True)
class MapElement:
    cls: str
    points: np.ndarray  # (K, 2) world meters
    width: float

    def __post_init__(self):
        if self.cls not in PRECEDENCE:
            raise ValueError(f"unknown map class {self.cls!r}")

    @functools.cached_property
    def _samples(self) -> tuple[cKDTree, float]:
        seg = np.diff(self.points, axis=0)
        lens = np.hypot(seg[:, 0], seg[:, 1])
        pts = [self.points[-1:]]
        for a, v, n in zip(self.points[:-1], seg, np.maximum(1, np.ceil(lens / SAMPLE_STEP)).astype(int)):
            pts.append(a + np.arange(n)[:, None] / n * v)
        step = float(np.max(lens / np.maximum(1, np.ceil(lens / SAMPLE_STEP)))) if len(lens) else 0.0
        return cKDTree(np.concatenate(pts)), step

    def covers(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask of points within ``width / 2`` of the polyline (exact)."""
        tree, step = self._samples
        r = self.width / 2.0
        d, _ = tree.query(pts, distance_upper_bound=r + step)
        hit = d <= r
        # the nearest sample over-estimates the distance by at most half a sample step
        unsure = ~hit & (d <= r + step / 2.0 + 1e-12)
        if unsure.any():
            idx = np.flatnonzero(unsure)
            hit[idx[_segment_distance(pts[idx], self.points) <= r]] = True
        return hit

    def __eq__(self, other):
        return (
            isinstance(other, MapElement)
            and self.cls == other.cls
            and self.width == other.width
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True)
class Occluder:
    start_frame: int
    end_frame: int  # exclusive
    rect: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in ego meters

    def active(self, frame: int) -> bool:
        return self.start_frame <= frame < self.end_frame


@dataclass
class Scenario:
    grid: GridSpec
    map_elements: list[MapElement]
    trajectory: list[Pose2]
    occluders: list[Occluder] = field(default_factory=list)
    noise_seed: int = 0

    def __post_init__(self):
        if len(self.trajectory) < 2:
            raise ValueError("a scenario needs at least two frames")
        for a, b in zip(self.trajectory, self.trajectory[1:]):
            if math.hypot(b.x - a.x, b.y - a.y) > 15.0:
                raise ValueError("consecutive poses more than 15 m apart")
        for o in self.occluders:
            if not (0 <= o.start_frame < o.end_frame <= len(self.trajectory)):
                raise ValueError(f"occluder interval [{o.start_frame}, {o.end_frame}) outside the clip")

    def __len__(self) -> int:
        return len(self.trajectory)

    def rel(self, t: int) -> Pose2:
        """Egomotion from frame t-1 to frame t."""
        return relative_transform(self.trajectory[t - 1], self.trajectory[t])


@dataclass(frozen=True)
class MapParams:
    straight: bool = False
    lane_width: tuple[float, float] = (3.0, 4.0)
    n_dividers: tuple[int, int] = (1, 3)
    n_crossings: tuple[int, int] = (0, 3)
    boundary_width: float = 1.5
    divider_width: float = 1.0
    crossing_width: tuple[float, float] = (3.0, 5.0)
    max_curvature: float = 0.01  # 1/m, only for the stand-alone corridor
    length: float = 200.0
    lateral_offset: tuple[float, float] = (-2.0, 2.0)  # ego path offset from the corridor center


@dataclass(frozen=True)
class OcclusionParams:
    per_scenario: tuple[int, int] = (2, 4)
    duration: tuple[int, int] = (3, 8)
    length_m: tuple[float, float] = (8.0, 16.0)
    width_m: tuple[float, float] = (6.0, 12.0)


@dataclass(frozen=True)
class ScenarioParams:
    frames: int = 40
    kinds: tuple[str, ...] = TRAJECTORY_KINDS
    map: MapParams = MapParams()
    occlusion: OcclusionParams = OcclusionParams()


# ---------------------------------------------------------------- geometry


def _unicycle(rng_speeds: np.ndarray, yaw_rates: np.ndarray, start: Pose2, substeps: int = 10) -> np.ndarray:
    """Integrate per-frame (speed, yaw rate) into a dense (M, 3) path of x, y, yaw."""
    x, y, yaw = start.x, start.y, start.yaw
    out = [(x, y, yaw)]
    h = DT / substeps
    for v, w in zip(rng_speeds, yaw_rates):
        for _ in range(substeps):
            mid = yaw + 0.5 * w * h
            x += v * h * math.cos(mid)
            y += v * h * math.sin(mid)
            yaw += w * h
            out.append((x, y, yaw))
    return np.array(out)


def offset_polyline(path: np.ndarray, offset: float) -> np.ndarray:
    """Shift a (K, 3) x/y/yaw path sideways by ``offset`` meters (positive = left)."""
    nx, ny = -np.sin(path[:, 2]), np.cos(path[:, 2])
    return np.stack([path[:, 0] + offset * nx, path[:, 1] + offset * ny], axis=1)


def _extend(path: np.ndarray, meters: float, step: float = 2.0) -> np.ndarray:
    """Prolong a dense path straight ahead and behind so the corridor covers the whole view."""
    n = int(meters / step)
    s = np.arange(1, n + 1) * step
    x0, y0, a0 = path[0]
    x1, y1, a1 = path[-1]
    back = np.stack([x0 - s[::-1] * math.cos(a0), y0 - s[::-1] * math.sin(a0), np.full(n, a0)], axis=1)
    fwd = np.stack([x1 + s * math.cos(a1), y1 + s * math.sin(a1), np.full(n, a1)], axis=1)
    return np.concatenate([back, path, fwd])


def gen_map(seed: int | np.random.Generator, params: MapParams = MapParams(), centerline: np.ndarray | None = None) -> list[MapElement]:
    """Road corridor: two boundaries, 1-3 dividers between them, 0-3 crossings across it.

    ``centerline`` is a dense (K, 3) x/y/yaw path; without one a corridor of
    constant curvature (zero when ``params.straight``) is laid along +x.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if centerline is None:
        kappa = 0.0 if params.straight else rng.uniform(-params.max_curvature, params.max_curvature)
        s = np.arange(0.0, params.length + 1e-9, 2.0) - params.length / 2
        yaw = kappa * s
        if kappa == 0.0:
            xs, ys = s, np.zeros_like(s)
        else:
            xs, ys = np.sin(kappa * s) / kappa, (1.0 - np.cos(kappa * s)) / kappa
        centerline = np.stack([xs, ys, yaw], axis=1)
    n_div = int(rng.integers(params.n_dividers[0], params.n_dividers[1] + 1))
    lane = rng.uniform(*params.lane_width)
    half = lane * (n_div + 1) / 2.0
    elements = [
        MapElement("boundary", offset_polyline(centerline, -half), params.boundary_width),
        MapElement("boundary", offset_polyline(centerline, half), params.boundary_width),
    ]
    for k in range(1, n_div + 1):
        elements.append(MapElement("divider", offset_polyline(centerline, -half + k * lane), params.divider_width))
    n_cross = int(rng.integers(params.n_crossings[0], params.n_crossings[1] + 1))
    # crossings sit on the middle 80% of the path, away from the extrapolated ends
    lo, hi = int(0.1 * len(centerline)), int(0.9 * len(centerline))
    for idx in np.sort(rng.integers(lo, max(hi, lo + 1), size=n_cross)):
        x, y, a = centerline[idx]
        nx, ny = -math.sin(a), math.cos(a)
        pts = np.array([[x - half * nx, y - half * ny], [x + half * nx, y + half * ny]])
        elements.append(MapElement("ped_crossing", pts, float(rng.uniform(*params.crossing_width))))
    return elements


def gen_trajectory(seed: int | np.random.Generator, kind: str = "straight", frames: int = 40, start: Pose2 | None = None) -> list[Pose2]:
    """2 Hz ego poses.

    straight: constant heading at 5-15 m/s. turn: one >=60 degree heading
    change spread over at most 10 frames. varied_speed: piecewise-constant
    speeds drawn from {2, 8, 14} m/s.
    """
    poses, _ = _trajectory_with_path(seed, kind, frames, start)
    return poses


def _trajectory_with_path(seed, kind, frames, start=None):
    if frames < 2:
        raise ValueError("a trajectory needs at least two frames")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    start = start if start is not None else Pose2(0.0, 0.0, rng.uniform(-math.pi, math.pi))
    steps = frames - 1
    yaw_rates = np.zeros(steps)
    if kind == "straight":
        speeds = np.full(steps, rng.uniform(5.0, 15.0))
    elif kind == "turn":
        speeds = np.full(steps, rng.uniform(5.0, 8.0))
        n_turn = int(min(steps, rng.integers(7, 11)))
        total = math.radians(rng.uniform(60.0, 90.0)) * rng.choice([-1.0, 1.0])
        t0 = int(rng.integers(0, steps - n_turn + 1))
        yaw_rates[t0 : t0 + n_turn] = total / (n_turn * DT)
    elif kind == "varied_speed":
        speeds = np.empty(steps)
        i = 0
        while i < steps:
            seg = int(rng.integers(3, 9))
            speeds[i : i + seg] = rng.choice([2.0, 8.0, 14.0])
            i += seg
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    substeps = 10
    path = _unicycle(speeds, yaw_rates, start, substeps)
    poses = [Pose2(*path[k * substeps]) for k in range(frames)]
    return poses, path


def gen_occluders(rng: np.random.Generator, frames: int, spec: GridSpec, params: OcclusionParams = OcclusionParams()) -> list[Occluder]:
    half_x = spec.w_cells * spec.cell_size_m / 2.0
    half_y = spec.h_cells * spec.cell_size_m / 2.0
    out = []
    for _ in range(int(rng.integers(params.per_scenario[0], params.per_scenario[1] + 1))):
        dur = int(rng.integers(params.duration[0], params.duration[1] + 1))
        dur = min(dur, frames - 1)
        start = int(rng.integers(1, frames - dur + 1))
        length = rng.uniform(*params.length_m)
        width = rng.uniform(*params.width_m)
        # vehicles ahead of the ego: centered in front, roughly on the road
        cx = rng.uniform(2.0 + length / 2, max(2.0 + length / 2, 0.6 * half_x))
        lat = max(0.0, min(8.0, half_y - width / 2))  # 0 on grids narrower than the occluder
        cy = rng.uniform(-lat, lat)
        rect = (cx - length / 2, cy - width / 2, cx + length / 2, cy + width / 2)
        out.append(Occluder(start, start + dur, tuple(float(v) for v in rect)))
    return out


def gen_scenario(seed: int, spec: GridSpec, params: ScenarioParams = ScenarioParams(), kind: str | None = None) -> Scenario:
    rng = np.random.default_rng(seed)
    kind = kind or params.kinds[int(rng.integers(len(params.kinds)))]
    poses, path = _trajectory_with_path(rng, kind, params.frames)
    off = rng.uniform(*params.map.lateral_offset)
    # the corridor follows the driven path, shifted so the ego is not on its center line
    center = np.concatenate([offset_polyline(path, -off), path[:, 2:3]], axis=1)
    reach = spec.w_cells * spec.cell_size_m + spec.h_cells * spec.cell_size_m
    center = _extend(center[::5], reach)
    elements = gen_map(rng, params.map, centerline=center)
    occluders = gen_occluders(rng, params.frames, spec, params.occlusion)
    return Scenario(spec, elements, poses, occluders, noise_seed=int(rng.integers(2**31)))


# ---------------------------------------------------------------- rendering


def _segment_distance(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each of (M, 2) points to a (K, 2) polyline."""
    a, b = poly[:-1], poly[1:]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
    best = np.full(len(pts), np.inf)
    # chunk over segments to bound memory
    for lo in range(0, len(a), 64):
        aa, vv, dd = a[lo : lo + 64], ab[lo : lo + 64], denom[lo : lo + 64]
        rel = pts[:, None, :] - aa[None]
        t = np.clip((rel * vv[None]).sum(-1) / dd[None], 0.0, 1.0)
        diff = rel - t[..., None] * vv[None]
        best = np.minimum(best, np.sqrt((diff * diff).sum(-1)).min(axis=1))
    return best


def rasterize(elements: list[MapElement], pose: Pose2, spec: GridSpec) -> np.ndarray:
    """Per-cell class index (H, W) as seen from the ego at ``pose``."""
    labels = np.zeros(spec.shape, dtype=np.int64)
    if not elements:
        return labels
    world = pose.apply(spec.grid_to_ego(spec.cell_centers())).reshape(-1, 2)
    flat = labels.reshape(-1)
    for cls in PRECEDENCE:
        for el in elements:
            if el.cls == cls:
                flat[el.covers(world)] = CLASS_INDEX[cls]
    return labels


def occlusion_mask(occluders: list[Occluder], frame: int, spec: GridSpec) -> np.ndarray:
    """True where the cell is hidden at ``frame``."""
    xy = spec.grid_to_ego(spec.cell_centers())
    hidden = np.zeros(spec.shape, dtype=bool)
    for o in occluders:
        if o.active(frame):
            x0, y0, x1, y1 = o.rect
            hidden |= (xy[..., 0] >= x0) & (xy[..., 0] <= x1) & (xy[..., 1] >= y0) & (xy[..., 1] <= y1)
    return hidden


@dataclass
class ObservationFrame:
    observation: np.ndarray  # (C_obs, H, W) float32
    gt_labels: np.ndarray  # (H, W) int
    visibility_mask: np.ndarray  # (H, W) bool


def observe(
    gt_labels: np.ndarray,
    frame_idx: int,
    occluders: list[Occluder],
    noise_seed: int,
    sigma: float = 0.3,
    spec: GridSpec | None = None,
) -> ObservationFrame:
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    spec = spec or GridSpec(*gt_labels.shape)
    obs = np.eye(N_CLASSES, dtype=np.float64)[gt_labels].transpose(2, 0, 1)
    if sigma > 0:
        rng = np.random.default_rng([noise_seed, frame_idx])
        obs = obs + rng.normal(0.0, sigma, size=obs.shape)
    hidden = occlusion_mask(occluders, frame_idx, spec)
    obs[:, hidden] = 0.0
    return ObservationFrame(obs.astype(np.float32), gt_labels, ~hidden)


def render(scn: Scenario, sigma: float = 0.3) -> list[ObservationFrame]:
    frames = []
    for t, pose in enumerate(scn.trajectory):
        labels = rasterize(scn.map_elements, pose, scn.grid)
        frames.append(observe(labels, t, scn.occluders, scn.noise_seed, sigma, scn.grid))
    return frames


def recall_window_mask(scn: Scenario, frames: list[ObservationFrame], t: int, window: int) -> np.ndarray:
    """Cells hidden at t that were in view and unoccluded in at least one of frames t-window..t-1.

    Uses exact point mapping with nearest-cell lookup.
    """
    spec = scn.grid
    qualifying = np.zeros(spec.shape, dtype=bool)
    hidden = ~frames[t].visibility_mask
    if not hidden.any():
        return qualifying
    ego_t = spec.grid_to_ego(spec.cell_centers())
    world = scn.trajectory[t].apply(ego_t)
    for k in range(max(0, t - window), t):
        ij = np.rint(spec.ego_to_grid(inverse(scn.trajectory[k]).apply(world))).astype(np.int64)
        ok = (ij[..., 0] >= 0) & (ij[..., 0] < spec.h_cells) & (ij[..., 1] >= 0) & (ij[..., 1] < spec.w_cells)
        vis = np.zeros(spec.shape, dtype=bool)
        vis[ok] = frames[k].visibility_mask[ij[..., 0][ok], ij[..., 1][ok]]
        qualifying |= vis
    return qualifying & hidden


def split_sequence(scn: Scenario, seed: int | np.random.Generator) -> tuple[Scenario, Scenario]:
    """Cut a clip at a random frame in [2, len-2]; both halves keep their own frame indexing."""
    n = len(scn)
    if n < 4:
        raise ValueError(f"cannot split a {n}-frame sequence (need >= 4)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cut = int(rng.integers(2, n - 1))
    return sub_sequence(scn, 0, cut), sub_sequence(scn, cut, n)


def sub_sequence(scn: Scenario, lo: int, hi: int) -> Scenario:
    occ = [
        Occluder(max(o.start_frame, lo) - lo, min(o.end_frame, hi) - lo, o.rect)
        for o in scn.occluders
        if o.start_frame < hi and o.end_frame > lo
    ]
    return Scenario(scn.grid, scn.map_elements, scn.trajectory[lo:hi], occ, scn.noise_seed)


# ---------------------------------------------------------------- JSON


def _schema() -> dict:
    return json.loads(resources.files("bevmem").joinpath("scenario.schema.json").read_text())


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "grid": {"h_cells": scn.grid.h_cells, "w_cells": scn.grid.w_cells, "cell_size_m": scn.grid.cell_size_m},
        "map_elements": [
            {"class": el.cls, "width": float(el.width), "points": [[float(x), float(y)] for x, y in el.points]}
            for el in scn.map_elements
        ],
        "trajectory": [[p.x, p.y, p.yaw] for p in scn.trajectory],
        "occluders": [
            {"start_frame": o.start_frame, "end_frame": o.end_frame, "rect": list(o.rect)} for o in scn.occluders
        ],
        "noise_seed": scn.noise_seed,
    }


class ScenarioError(ValueError):
    """A scenario document that does not match the schema."""


def scenario_from_dict(d: dict) -> Scenario:
    try:
        jsonschema.validate(d, _schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"invalid scenario at {path}: {exc.message}") from None
    g = d["grid"]
    return Scenario(
        GridSpec(int(g["h_cells"]), int(g["w_cells"]), float(g["cell_size_m"])),
        [MapElement(e["class"], np.asarray(e["points"], dtype=np.float64).reshape(-1, 2), float(e["width"])) for e in d["map_elements"]],
        [Pose2(*p) for p in d["trajectory"]],
        [Occluder(int(o["start_frame"]), int(o["end_frame"]), tuple(float(v) for v in o["rect"])) for o in d["occluders"]],
        int(d.get("noise_seed", 0)),
    )


def dumps(scn: Scenario) -> str:
    return json.dumps(scenario_to_dict(scn), indent=1, sort_keys=True) + "\n"


def save_scenario(scn: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps(scn))


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))

