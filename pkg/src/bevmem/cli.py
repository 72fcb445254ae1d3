"""``bevmem`` command-line entry point.

Subcommands: gen, train, eval, ablate, viz, gradcheck. Configuration is one
INI file (sections grid, model, training, data, paths); every key is
range-checked and unknown keys are rejected. The defaults reproduce the
desk-scale benchmark preset.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 check failure.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import ablation as AB
from . import heatmap as hm
from . import synth
from . import train as TR
from .grid import GridSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
MANIFEST_VERSION = 1

log = logging.getLogger("bevmem")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class GridSection:
    h_cells: int = 32
    w_cells: int = 64
    cell_size_m: float = 1.0


@dataclass(frozen=True)
class ModelSection:
    channels: int = 64
    t_wm: int = 4
    c_h: int = 32
    dilation: tuple[int, int] = (2, 2)
    use_heatmap: bool = True
    temporal: bool = True
    heatmap_activation: str = "sigmoid"


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 5e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epochs_stage1: int = 1
    epochs_stage2: int = 1
    batch: int = 2
    stage1_frames: int = 2
    seed: int = 0
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    deterministic: bool = True
    lambda_cls: float = 5.0
    lambda_line: float = 50.0
    lambda_trans: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


@dataclass(frozen=True)
class DataSection:
    count: int = 200
    seed: int = 1000
    eval_count: int = 50
    eval_seed: int = 100000
    frames: int = 10
    kinds: tuple[str, ...] = synth.TRAJECTORY_KINDS
    occluders_min: int = 2
    occluders_max: int = 4
    occluder_frames_min: int = 3
    occluder_frames_max: int = 8
    noise_sigma: float = 0.3
    recall_window: int = 4


@dataclass(frozen=True)
class PathsSection:
    data_dir: str = "data"
    checkpoint: str = "model.bvm"
    report_dir: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    grid: GridSection = GridSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    data: DataSection = DataSection()
    paths: PathsSection = PathsSection()


# inclusive ranges, applied to every element of tuple-valued keys
RANGES: dict[str, tuple] = {
    "grid.h_cells": (1, 4096),
    "grid.w_cells": (1, 4096),
    "grid.cell_size_m": (1e-3, 100.0),
    "model.channels": (1, 4096),
    "model.t_wm": (1, 64),
    "model.c_h": (1, 1024),
    "model.dilation": (1, 16),
    "training.lr": (1e-8, 1.0),
    "training.weight_decay": (0.0, 1.0),
    "training.beta1": (0.0, 0.999999),
    "training.beta2": (0.0, 0.999999),
    "training.epochs_stage1": (0, 1000),
    "training.epochs_stage2": (0, 1000),
    "training.batch": (1, 256),
    "training.stage1_frames": (1, 1000),
    "training.seed": (0, 2**32 - 1),
    "training.ablation_seeds": (0, 2**32 - 1),
    "training.lambda_cls": (1e-9, 1e6),
    "training.lambda_line": (0.0, 1e6),
    "training.lambda_trans": (0.0, 1e6),
    "training.focal_gamma": (0.0, 10.0),
    "training.focal_alpha": (1e-6, 1.0),
    "data.count": (1, 1_000_000),
    "data.seed": (0, 2**32 - 1),
    "data.eval_count": (1, 1_000_000),
    "data.eval_seed": (0, 2**32 - 1),
    "data.frames": (2, 10_000),
    "data.occluders_min": (0, 100),
    "data.occluders_max": (0, 100),
    "data.occluder_frames_min": (1, 10_000),
    "data.occluder_frames_max": (1, 10_000),
    "data.noise_sigma": (0.0, 10.0),
    "data.recall_window": (1, 100),
}
CHOICES = {
    "model.heatmap_activation": ("sigmoid", "relu"),
    "data.kinds": synth.TRAJECTORY_KINDS,
}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            conv = type(default[0]) if default else str
            return tuple(conv(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _validate(cfg: RunConfig) -> None:
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        for f in fields(section):
            key = f"{sec.name}.{f.name}"
            val = getattr(section, f.name)
            vals = val if isinstance(val, tuple) else (val,)
            if key in RANGES:
                lo, hi = RANGES[key]
                for v in vals:
                    if not (lo <= v <= hi):
                        raise ConfigError(f"{key}={val!r} outside [{lo}, {hi}]")
            if key in CHOICES:
                for v in vals:
                    if v not in CHOICES[key]:
                        raise ConfigError(f"{key}={v!r}; valid: {', '.join(CHOICES[key])}")
            if isinstance(val, tuple) and not val:
                raise ConfigError(f"{key} must not be empty")
    m, d = cfg.model, cfg.data
    if len(m.dilation) != 2:
        raise ConfigError("model.dilation needs two integers (rows, cols)")
    if d.occluders_min > d.occluders_max:
        raise ConfigError("data.occluders_min > data.occluders_max")
    if d.occluder_frames_min > d.occluder_frames_max:
        raise ConfigError("data.occluder_frames_min > data.occluder_frames_max")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    base = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    sections = {}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]; valid: {', '.join(known)}")
        default = getattr(base, name)
        keys = {f.name for f in fields(default)}
        updates = {}
        for key, raw in cp.items(name):
            if key not in keys:
                raise ConfigError(f"unknown key {name}.{key}")
            updates[key] = _parse_value(f"{name}.{key}", raw, getattr(default, key))
        sections[name] = replace(default, **updates)
    cfg = replace(base, **sections)
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def config_to_ini(cfg: RunConfig) -> str:
    lines = []
    for sec in fields(cfg):
        lines.append(f"[{sec.name}]")
        for k, v in asdict(getattr(cfg, sec.name)).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()


def grid_spec(cfg: RunConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.h_cells, g.w_cells, g.cell_size_m)


def model_config(cfg: RunConfig) -> TR.ModelConfig:
    m = cfg.model
    return TR.ModelConfig(
        channels=m.channels,
        t_wm=m.t_wm,
        c_h=m.c_h,
        grid=grid_spec(cfg),
        dilation=tuple(m.dilation),
        use_heatmap=m.use_heatmap,
        temporal=m.temporal,
        heatmap_activation=m.heatmap_activation,
    )


def train_config(cfg: RunConfig, seed: int | None = None) -> TR.TrainConfig:
    t = cfg.training
    return TR.TrainConfig(
        lr=t.lr,
        betas=(t.beta1, t.beta2),
        weight_decay=t.weight_decay,
        epochs_stage1=t.epochs_stage1,
        epochs_stage2=t.epochs_stage2,
        batch=t.batch,
        stage1_frames_per_sequence=t.stage1_frames,
        seed=t.seed if seed is None else seed,
        gamma=t.focal_gamma,
        alpha=t.focal_alpha,
        loss=TR.LossWeights(t.lambda_cls, t.lambda_line, t.lambda_trans),
    )


def scenario_params(cfg: RunConfig) -> synth.ScenarioParams:
    d = cfg.data
    occ = replace(
        synth.OcclusionParams(),
        per_scenario=(d.occluders_min, d.occluders_max),
        duration=(d.occluder_frames_min, d.occluder_frames_max),
    )
    return synth.ScenarioParams(frames=d.frames, kinds=tuple(d.kinds), occlusion=occ)


def benchmark(cfg: RunConfig) -> AB.Benchmark:
    """The ablation benchmark described by ``cfg``; the default config gives ``Benchmark()``."""
    d = cfg.data
    return AB.Benchmark(
        n_train=d.count,
        n_eval=d.eval_count,
        train_seed0=d.seed,
        eval_seed0=d.eval_seed,
        params=scenario_params(cfg),
        grid=grid_spec(cfg),
        channels=cfg.model.channels,
        c_h=cfg.model.c_h,
        seeds=tuple(cfg.training.ablation_seeds),
        train=train_config(cfg),
        window=d.recall_window,
        sigma=d.noise_sigma,
    )


# ---------------------------------------------------------------- data dirs


def write_dataset(out: Path, cfg: RunConfig, count: int, seed: int) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    spec, params = grid_spec(cfg), scenario_params(cfg)
    files = []
    for i in range(count):
        name = f"scenario_{i:04d}.json"
        synth.save_scenario(synth.gen_scenario(seed + i, spec, params), out / name)
        files.append(name)
    manifest = {
        "version": MANIFEST_VERSION,
        "count": count,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "noise_sigma": cfg.data.noise_sigma,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir: Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise DataError(f"{data_dir}: no manifest.json (generate data with `bevmem gen`)")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    if man.get("version") != MANIFEST_VERSION or not isinstance(man.get("files"), list):
        raise DataError(f"{path}: unsupported manifest")
    if not man["files"]:
        raise DataError(f"{data_dir}: manifest lists no scenarios")
    return man


def load_dataset(data_dir: str | Path, sigma: float | None = None) -> tuple[list[TR.Clip], dict]:
    data_dir = Path(data_dir)
    man = read_manifest(data_dir)
    sigma = man.get("noise_sigma", 0.3) if sigma is None else sigma
    scenarios = []
    for name in man["files"]:
        try:
            scenarios.append(synth.load_scenario(data_dir / name))
        except (OSError, ValueError) as exc:
            raise DataError(f"{data_dir / name}: {exc}") from None
    return TR.render_dataset(scenarios, sigma), man


def _check_grid(data: list[TR.Clip], spec: GridSpec) -> None:
    for clip in data:
        if clip.scenario.grid != spec:
            raise DataError(f"scenario grid {clip.scenario.grid} does not match config grid {spec}")


# ---------------------------------------------------------------- images


PALETTE = np.array(
    [
        (0, 0, 0),  # background
        (255, 0, 0),  # ped_crossing
        (0, 0, 255),  # divider
        (0, 255, 0),  # boundary
    ],
    dtype=np.uint8,
)


def write_pgm(path: Path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes())


def write_ppm(path: Path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes())


def read_pnm(path: Path) -> np.ndarray:
    """Reader for the binary P5/P6 files written above."""
    blob = Path(path).read_bytes()
    magic, dims, maxval, rest = blob.split(b"\n", 3)
    w, h = map(int, dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM header")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(rest, np.uint8).reshape(shape)


def colorize(labels: np.ndarray) -> np.ndarray:
    # row 0 is the rightmost lateral cell; flip so ego-left is up in the image
    return PALETTE[labels[::-1]]


def heatmap_at(scn: synth.Scenario, frame: int) -> hm.OverlapHeatmap:
    h = hm.init(scn.grid)
    for t in range(1, frame + 1):
        h = hm.step(h, scn.rel(t))
    return h


# ---------------------------------------------------------------- commands


@contextlib.contextmanager
def _threads(deterministic: bool):
    from threadpoolctl import threadpool_limits

    env = os.environ.get("BEVMEM_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
    else:
        with threadpool_limits(limit):
            yield


def cmd_gen(args, cfg: RunConfig) -> int:
    count = cfg.data.count if args.count is None else args.count
    seed = cfg.data.seed if args.seed is None else args.seed
    if count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out or cfg.paths.data_dir)
    try:
        man = write_dataset(out, cfg, count, seed)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {man['count']} scenarios to {out} (config {man['config_hash'][:12]})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data, _ = load_dataset(args.data or cfg.paths.data_dir, cfg.data.noise_sigma)
    mc, tc = model_config(cfg), train_config(cfg)
    _check_grid(data, mc.grid)
    if args.init_checkpoint:
        model = _load_model(args.init_checkpoint, mc)
    else:
        model = TR.init_model(tc.seed, mc)
    state = TR.make_state(model, tc)
    if args.stage in ("1", "both"):
        TR.train_stage1(data, state, tc)
    if args.stage in ("2", "both"):
        TR.train_stage2(data, state, tc)
    ckpt = Path(args.out_checkpoint or cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    TR.save_checkpoint(state.model, ckpt)
    log_path = ckpt.parent / "train_log.jsonl"
    with open(log_path, "w") as fh:
        for entry in state.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    last = state.log[-1]["loss"] if state.log else float("nan")
    print(f"wrote {ckpt} and {log_path} (final epoch loss {last:.5f})")
    return EXIT_OK


def _load_model(path, mc: TR.ModelConfig | None = None, grid: GridSpec | None = None) -> TR.Model:
    try:
        return TR.load_checkpoint(path, grid=grid, config=mc)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    except TR.CorruptCheckpoint as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"checkpoint {path} does not match the configuration: {exc}") from None


def eval_report(model: TR.Model, data: list[TR.Clip], man: dict, checkpoint: bytes, window: int) -> dict:
    metrics, per_seq = TR.evaluate(data, model, window, per_sequence=True)
    cfg = asdict(model.config)
    cfg["grid"] = [model.config.grid.h_cells, model.config.grid.w_cells, model.config.grid.cell_size_m]
    return {
        "version": AB.REPORT_VERSION,
        "kind": "evaluation",
        "model": cfg,
        "checkpoint_crc32": int.from_bytes(checkpoint[-4:], "little"),
        "data": {"count": len(data), "seed": man.get("seed"), "config_hash": man.get("config_hash")},
        "recall_window": window,
        "metrics": metrics.to_dict(),
        "per_sequence": [{"file": f, **m.to_dict()} for f, m in zip(man["files"], per_seq)],
    }


def cmd_eval(args, cfg: RunConfig) -> int:
    data, man = load_dataset(args.data or cfg.paths.data_dir, cfg.data.noise_sigma)
    ckpt = Path(args.checkpoint or cfg.paths.checkpoint)
    model = _load_model(ckpt, grid=data[0].scenario.grid)
    _check_grid(data, model.config.grid)
    report = eval_report(model, data, man, ckpt.read_bytes(), cfg.data.recall_window)
    out = Path(args.report or Path(cfg.paths.report_dir) / "report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    AB.write_report(report, out)
    m = report["metrics"]
    print(f"mean IoU {m['mean_iou']}, occluded-region IoU {m['occluded_iou']} -> {out}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in AB.VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variant(s) {unknown}; valid: {', '.join(AB.VARIANTS)}")
    bench = benchmark(cfg)
    data = None
    if args.data:
        train, _ = load_dataset(Path(args.data) / "train", cfg.data.noise_sigma)
        evald, _ = load_dataset(Path(args.data) / "eval", cfg.data.noise_sigma)
        _check_grid(train + evald, bench.grid)
        data = (train, evald)
    workers = 1 if cfg.training.deterministic else AB.default_workers()
    t0 = time.perf_counter()
    results = AB.run_ablation(bench, variants, data, workers=workers)
    report = AB.ablation_report(bench, results)
    out = Path(args.report or Path(cfg.paths.report_dir) / "ablation.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    AB.write_report(report, out)
    timing = {f"{r.variant}/seed{r.seed}": round(r.wall_s, 3) for r in results}
    timing["total_s"] = round(time.perf_counter() - t0, 3)
    out.with_name(out.stem + "_timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    for name, row in report["variants"].items():
        print(f"{name:<14} occluded IoU {row['occluded_iou_points']:6.2f}  mean IoU {row['mean_iou_points']:6.2f}")
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}")
    return EXIT_OK if all(c["passed"] for c in report["checks"]) else EXIT_CHECK


def cmd_viz(args, cfg: RunConfig) -> int:
    try:
        scn = synth.load_scenario(args.scenario)
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.scenario}: {exc}") from None
    if not 0 <= args.frame < len(scn):
        raise DataError(f"--frame {args.frame} out of range [0, {len(scn)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = heatmap_at(scn, args.frame)
    write_pgm(out / f"heatmap_{args.frame:04d}.pgm", hm.to_gray8(h, args.frame)[::-1])
    frames = synth.render(scn, cfg.data.noise_sigma)
    write_ppm(out / f"gt_{args.frame:04d}.ppm", colorize(frames[args.frame].gt_labels))
    written = ["heatmap", "gt"]
    if args.checkpoint:
        model = _load_model(args.checkpoint, grid=scn.grid)
        clip = TR.Clip(synth.sub_sequence(scn, 0, args.frame + 1), frames[: args.frame + 1])
        pred = TR.predict([clip], model, batch=1)[0][args.frame]
        write_ppm(out / f"pred_{args.frame:04d}.ppm", colorize(pred))
        written.append("pred")
    print(f"wrote {', '.join(written)} images for frame {args.frame} to {out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from . import gradcheck as G
    from . import tensorops as T

    dtype = np.float64 if args.precision == 64 else np.float32
    ctx = T.corrupt_adjoint(args.corrupt_op) if args.corrupt_op else contextlib.nullcontext()
    t0 = time.perf_counter()
    with ctx:
        results = G.run_suite(args.seed, dtype)
    print(G.report(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f} s")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevmem", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="INI run config (defaults reproduce the benchmark preset)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate scenario JSON files and a manifest")
    g.add_argument("--out")
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train stage 1, stage 2 or both")
    t.add_argument("--data")
    t.add_argument("--out-checkpoint")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--init-checkpoint", help="start from these parameters (e.g. stage 2 after stage 1)")
    t.add_argument("--deterministic", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write report.json")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--report")

    a = sub.add_parser("ablate", help="paired-seed ablation over model variants")
    a.add_argument("--data", help="directory with train/ and eval/ datasets (default: generate the benchmark)")
    a.add_argument("--variants", default=",".join(AB.ACCEPTANCE_VARIANTS))
    a.add_argument("--report")
    a.add_argument("--deterministic", action="store_true", default=None)

    v = sub.add_parser("viz", help="render heatmap (PGM) and class maps (PPM) for one frame")
    v.add_argument("--checkpoint")
    v.add_argument("--scenario", required=True)
    v.add_argument("--frame", type=int, required=True)
    v.add_argument("--out", required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--precision", type=int, choices=(32, 64), default=32)
    c.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "deterministic", None):
            cfg = replace(cfg, training=replace(cfg.training, deterministic=True))
        with _threads(cfg.training.deterministic):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"bevmem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError) as exc:
        print(f"bevmem: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TR.CorruptCheckpoint as exc:
        print(f"bevmem: error: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
