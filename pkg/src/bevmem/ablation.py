"""Paired-seed ablation over model variants on the fixed synthetic benchmark.

Every variant trains from the same seeds, data order and budget. The
report carries a table of metrics per variant and the directional checks
(memory beats single-frame, more capacity beats less, the heatmap helps,
and the half-trained full model beats the fully trained single-frame one).
"""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import synth
from . import train as TR
from .grid import GridSpec

log = logging.getLogger(__name__)

REPORT_VERSION = 1

VARIANTS: dict[str, dict] = {
    "no_temporal": {"temporal": False},
    "twm1": {"t_wm": 1},
    "twm2": {"t_wm": 2},
    "twm4": {},
    "twm6": {"t_wm": 6},
    "twm8": {"t_wm": 8},
    "heatmap_off": {"use_heatmap": False},
    "heatmap_relu": {"heatmap_activation": "relu"},
    "dil11": {"dilation": (1, 1)},
    "dil22": {},
    "dil33": {"dilation": (3, 3)},
}
FULL = "twm4"
ACCEPTANCE_VARIANTS = ("no_temporal", "twm1", "twm4", "heatmap_off")


@dataclass(frozen=True)
class Benchmark:
    """The fixed desk-scale benchmark: seeded scenarios, preset model size, training budget."""

    n_train: int = 200
    n_eval: int = 50
    train_seed0: int = 1000
    eval_seed0: int = 100000
    params: synth.ScenarioParams = synth.ScenarioParams(frames=10)
    grid: GridSpec = GridSpec(32, 64)
    channels: int = 64
    c_h: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TR.TrainConfig = TR.TrainConfig(batch=2, stage1_frames_per_sequence=2)
    window: int = 4
    snapshot: float = 0.5
    sigma: float = 0.3

    def scenarios(self, split: str) -> list[synth.Scenario]:
        n, s0 = (self.n_train, self.train_seed0) if split == "train" else (self.n_eval, self.eval_seed0)
        return [synth.gen_scenario(s0 + i, self.grid, self.params) for i in range(n)]

    def datasets(self) -> tuple[list[TR.Clip], list[TR.Clip]]:
        return (
            TR.render_dataset(self.scenarios("train"), self.sigma),
            TR.render_dataset(self.scenarios("eval"), self.sigma),
        )

    def model_config(self, variant: str) -> TR.ModelConfig:
        if variant not in VARIANTS:
            raise KeyError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
        return TR.ModelConfig(channels=self.channels, c_h=self.c_h, grid=self.grid, **VARIANTS[variant])

    def describe(self) -> dict:
        d = asdict(self)
        d["grid"] = [self.grid.h_cells, self.grid.w_cells, self.grid.cell_size_m]
        return d


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: TR.Metrics
    mid_metrics: TR.Metrics | None
    log: list[dict]
    checkpoint: bytes = field(repr=False)
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "metrics": self.metrics.to_dict(),
            "mid_metrics": None if self.mid_metrics is None else self.mid_metrics.to_dict(),
            "losses": [{"stage": e["stage"], "epoch": e["epoch"], "loss": e["loss"]} for e in self.log],
            "checkpoint_crc32": zlib.crc32(self.checkpoint),
        }


def run_variant(
    bench: Benchmark,
    variant: str,
    seed: int,
    train_data: list[TR.Clip],
    eval_data: list[TR.Clip],
    snapshot: bool = False,
) -> RunResult:
    """Train stage 1 then stage 2 from ``seed`` and evaluate; optionally also evaluate at the stage-2 snapshot."""
    t0 = time.perf_counter()
    cfg = bench.model_config(variant)
    tc = replace(bench.train, seed=seed)
    state = TR.make_state(TR.init_model(seed, cfg), tc)
    TR.train_stage1(train_data, state, tc)
    mids: dict[float, TR.Metrics] = {}

    def on_snapshot(frac, model):
        mids[frac] = TR.evaluate(eval_data, model, bench.window)

    TR.train_stage2(
        train_data, state, tc, snapshot_at=[bench.snapshot] if snapshot else [], on_snapshot=on_snapshot
    )
    metrics = TR.evaluate(eval_data, state.model, bench.window)
    blob = TR.encode_checkpoint(TR.model_tensors(state.model))
    wall = time.perf_counter() - t0
    log.info("%s seed %d: occluded IoU %s, mean IoU %s (%.0f s)", variant, seed, metrics.occluded_iou, metrics.mean_iou, wall)
    return RunResult(variant, seed, metrics, mids.get(bench.snapshot), state.log, blob, wall)


# data shared with forked workers
_SHARED: dict = {}


def _job(args):
    bench, variant, seed, snapshot = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return run_variant(bench, variant, seed, _SHARED["train"], _SHARED["eval"], snapshot)


def run_ablation(
    bench: Benchmark,
    variants: list[str] | tuple[str, ...] = ACCEPTANCE_VARIANTS,
    data: tuple[list[TR.Clip], list[TR.Clip]] | None = None,
    workers: int = 1,
    snapshot_variants: tuple[str, ...] = (FULL,),
) -> list[RunResult]:
    """Train and evaluate every (variant, seed) pair.

    Jobs are independent and each one runs single-threaded, so the results do
    not depend on ``workers``; ``workers > 1`` forks a process pool.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise KeyError(f"unknown variant(s) {unknown}; valid: {', '.join(VARIANTS)}")
    train_data, eval_data = data if data is not None else bench.datasets()
    jobs = [(bench, v, s, v in snapshot_variants) for v in variants for s in bench.seeds]
    if workers <= 1:
        return [run_variant(bench, v, s, train_data, eval_data, snap) for _, v, s, snap in jobs]
    _SHARED.update(train=train_data, eval=eval_data)
    try:
        with ProcessPoolExecutor(workers, mp_context=get_context("fork")) as pool:
            return list(pool.map(_job, jobs))
    finally:
        _SHARED.clear()


# ---------------------------------------------------------------- report


def _points(x: float | None) -> float:
    return float("nan") if x is None else 100.0 * x


def summarize(results: list[RunResult]) -> dict[str, dict]:
    table: dict[str, dict] = {}
    for r in results:
        row = table.setdefault(r.variant, {"runs": []})
        row["runs"].append(r.to_dict())
    for row in table.values():
        occ = [_points(run["metrics"]["occluded_iou"]) for run in row["runs"]]
        miou = [_points(run["metrics"]["mean_iou"]) for run in row["runs"]]
        row["occluded_iou_points"] = float(np.mean(occ))
        row["mean_iou_points"] = float(np.mean(miou))
    return table


def _check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def directional_checks(table: dict[str, dict]) -> list[dict]:
    """The acceptance orderings, evaluated on whichever variants are present."""
    occ = {k: v["occluded_iou_points"] for k, v in table.items()}
    checks = []
    if FULL in occ and "no_temporal" in occ:
        gap = occ[FULL] - occ["no_temporal"]
        checks.append(_check("full_vs_no_temporal", gap >= 5.0, f"gap {gap:.2f} points, need >= 5.0"))
    if {"no_temporal", "twm1", FULL} <= set(occ):
        g1, g2 = occ["twm1"] - occ["no_temporal"], occ[FULL] - occ["twm1"]
        checks.append(
            _check(
                "capacity_ordering",
                g1 >= 1.0 and g2 >= 1.0,
                f"twm1 - no_temporal {g1:.2f}, twm4 - twm1 {g2:.2f} points, need each >= 1.0",
            )
        )
    if FULL in occ and "heatmap_off" in occ:
        gap = occ[FULL] - occ["heatmap_off"]
        checks.append(_check("heatmap_gain", gap >= 1.0, f"gap {gap:.2f} points, need >= 1.0"))
    if FULL in table and "no_temporal" in table:
        full_runs = {r["seed"]: r for r in table[FULL]["runs"]}
        base_runs = {r["seed"]: r for r in table["no_temporal"]["runs"]}
        pairs = []
        for s in sorted(full_runs):
            mid = full_runs[s]["mid_metrics"]
            if mid is None or s not in base_runs:
                continue
            pairs.append((s, _points(mid["mean_iou"]), _points(base_runs[s]["metrics"]["mean_iou"])))
        if pairs:
            ok = all(m > b for _, m, b in pairs)
            detail = "; ".join(f"seed {s}: {m:.2f} vs {b:.2f}" for s, m, b in pairs)
            checks.append(_check("convergence_half_budget", ok, detail))
    return checks


def ablation_report(bench: Benchmark, results: list[RunResult]) -> dict:
    seeds_by_variant = {}
    for r in results:
        seeds_by_variant.setdefault(r.variant, []).append(r.seed)
    seed_sets = {tuple(sorted(v)) for v in seeds_by_variant.values()}
    table = summarize(results)
    return {
        "version": REPORT_VERSION,
        "kind": "ablation",
        "benchmark": bench.describe(),
        "metadata": {
            "seeds": list(bench.seeds),
            "paired_seeds": len(seed_sets) == 1,
            "variants": list(seeds_by_variant),
        },
        "variants": table,
        "checks": directional_checks(table),
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(dumps_report(report))


def read_report(path: str | Path) -> dict:
    """Load a report written by :func:`write_report` (ablation or evaluation)."""
    try:
        report = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a JSON report ({exc})") from exc
    if not isinstance(report, dict) or report.get("version") != REPORT_VERSION:
        raise ValueError(f"{path}: unsupported report version {report.get('version') if isinstance(report, dict) else None}")
    return report


def default_workers() -> int:
    env = os.environ.get("BEVMEM_THREADS")
    return max(1, int(env)) if env else 1
