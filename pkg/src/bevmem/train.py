"""Streaming trainer, evaluator, checkpoints and the ablation harness.

The model is a two-layer convolutional stem over the noisy observation
raster, the working memory fusion block, and a 1x1 class head. Training
follows the two-stage recipe: single frames first (memory repeat-initialized
from the frame's own feature), then streamed sub-sequences with the memory
detached between frames.
"""

from __future__ import annotations

import logging
import struct
import time
import zlib
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fusion as fu
from . import membuf
from . import synth
from . import tensorops as T
from .grid import GridSpec

log = logging.getLogger(__name__)

FOREGROUND = (1, 2, 3)
MIN_OCCLUDED_CELLS = 10


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 256
    t_wm: int = 4
    c_h: int = 32
    grid: GridSpec = GridSpec()
    dilation: tuple[int, int] = (2, 2)
    use_heatmap: bool = True
    temporal: bool = True
    heatmap_activation: str = "sigmoid"
    c_obs: int = synth.N_CLASSES
    n_classes: int = synth.N_CLASSES

    def __post_init__(self):
        if min(self.channels, self.t_wm, self.c_h, self.c_obs, self.n_classes) < 1:
            raise ValueError("all channel counts must be >= 1")

    @classmethod
    def benchmark(cls, **kw) -> ModelConfig:
        return cls(**{"channels": 64, "grid": GridSpec(32, 64), **kw})

    @property
    def fusion(self) -> fu.FusionConfig:
        return fu.FusionConfig(
            self.channels, self.t_wm, self.c_h, tuple(self.dilation), self.use_heatmap, self.heatmap_activation
        )

    @property
    def mem_in_channels(self) -> int:
        return self.fusion.mem_in_channels


@dataclass(frozen=True)
class LossWeights:
    cls: float = 5.0
    line: float = 50.0  # polyline term, not used by the raster head
    trans: float = 0.1  # query-propagation term, not used by the raster head

    def __post_init__(self):
        if not self.cls > 0:
            raise ValueError("classification weight must be positive")


@dataclass
class Model:
    config: ModelConfig
    stem: list[fu.ConvLayer]
    fusion: fu.FusionParams | None
    head: fu.ConvLayer

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {}
        for i, layer in enumerate(self.stem):
            out[f"stem.{i}.weight"] = layer.weight
            out[f"stem.{i}.bias"] = layer.bias
        if self.fusion is not None:
            out.update({f"fusion.{k}": v for k, v in self.fusion.named_tensors().items()})
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_tensors().values())


def init_model(seed: int, config: ModelConfig) -> Model:
    rng = np.random.default_rng(seed)
    c = config.channels
    stem = [
        fu.make_conv(fu.ConvSpec(config.c_obs, c, 3), rng, "stem.0"),
        fu.make_conv(fu.ConvSpec(c, c, 3), rng, "stem.1"),
    ]
    fusion = fu.init_params(rng, config.fusion) if config.temporal else None
    head = fu.make_conv(fu.ConvSpec(c, config.n_classes, 1, relu=False), rng, "head")
    return Model(config, stem, fusion, head)


# ---------------------------------------------------------------- forward


def stem_forward(obs: T.Tensor, model: Model) -> T.Tensor:
    if obs.shape[-3] != model.config.c_obs:
        raise T.ShapeError(f"observation has {obs.shape[-3]} channels, model expects {model.config.c_obs}")
    x = obs
    for layer in model.stem:
        x = layer(x)
    return x


def _stack_memories(wms: Sequence[membuf.WorkingMemory]) -> tuple[T.Tensor, T.Tensor]:
    mem = T.Tensor(np.stack([w.stacked().data for w in wms]))
    heat = T.Tensor(np.stack([w.heatmap.values.data for w in wms]))
    return mem, heat


def fuse_forward(f_bev: T.Tensor, mem: T.Tensor, heat: T.Tensor, model: Model) -> T.Tensor:
    p = model.fusion
    h_feat = fu.heatmap_features(heat, p) if model.config.use_heatmap else None
    return fu.fuse(mem, h_feat, f_bev, p)


def forward_frame(obs, wm, model: Model) -> tuple[T.Tensor, T.Tensor]:
    """Logits ``(n_classes, H, W)`` and the fused feature for one frame.

    ``obs`` is an observation array/tensor or :class:`synth.ObservationFrame`;
    ``wm`` is the sequence's working memory (ignored for non-temporal models).
    Batched calls pass ``(N, C_obs, H, W)`` observations and a list of memories.
    """
    if isinstance(obs, synth.ObservationFrame):
        obs = obs.observation
    obs = T.as_tensor(obs)
    cfg = model.config
    if obs.shape[-2:] != cfg.grid.shape:
        raise T.ShapeError(f"observation grid {obs.shape[-2:]} != model grid {cfg.grid.shape}")
    f_bev = stem_forward(obs, model)
    if not cfg.temporal:
        return model.head(f_bev), f_bev
    if obs.ndim == 3:
        if wm.capacity != cfg.t_wm or wm.feature_shape != f_bev.shape:
            raise T.ShapeError("working memory does not match the model configuration")
        mem, heat = wm.stacked(), wm.heatmap.values
    else:
        mem, heat = _stack_memories(wm)
    fused = fuse_forward(f_bev, mem, heat, model)
    return model.head(fused), fused


def focal_loss(logits: T.Tensor, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25, weight: float = 5.0) -> T.Tensor:
    """Multi-class focal loss averaged over cells, times ``weight``."""
    z = logits.data
    if z.shape[:-3] + z.shape[-2:] != labels.shape:
        raise T.ShapeError(f"logits {z.shape} and labels {labels.shape} disagree")
    zmax = z.max(axis=-3, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-3, keepdims=True))
    p = np.exp(logp)
    lab = np.expand_dims(labels, -3)
    logpt = np.take_along_axis(logp, lab, axis=-3)
    pt = np.exp(logpt)
    q = np.maximum(1.0 - pt, 0.0)
    n = labels.size
    loss = -alpha * q**gamma * logpt
    value = np.asarray(weight * loss.sum() / n, dtype=z.dtype)

    def adjoint(g):
        # d/dz_k of -a (1-pt)^g log pt = a [g (1-pt)^(g-1) pt log pt - (1-pt)^g] (1[k=y] - p_k)
        coef = -(q**gamma)
        if gamma != 0:
            coef = coef + gamma * q ** (gamma - 1) * pt * logpt
        coef = alpha * coef
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, lab, 1.0, axis=-3)
        return ((g * weight / n) * coef * (onehot - p),)

    return T._node("focal_loss", value, (logits,), adjoint)


# ---------------------------------------------------------------- data


@dataclass
class Clip:
    scenario: synth.Scenario
    frames: list[synth.ObservationFrame]

    def __len__(self):
        return len(self.frames)


def render_dataset(scenarios: Sequence[synth.Scenario], sigma: float = 0.3) -> list[Clip]:
    return [Clip(s, synth.render(s, sigma)) for s in scenarios]


def sub_stream(seq: Clip, lo: int, hi: int) -> Clip:
    return Clip(synth.sub_sequence(seq.scenario, lo, hi), seq.frames[lo:hi])


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    epochs_stage1: int = 1
    epochs_stage2: int = 1
    batch: int = 4
    stage1_frames_per_sequence: int = 2
    seed: int = 0
    gamma: float = 2.0
    alpha: float = 0.25
    loss: LossWeights = LossWeights()


@dataclass
class TrainState:
    model: Model
    optimizer: T.AdamW
    log: list[dict] = field(default_factory=list)


def make_state(model: Model, tc: TrainConfig) -> TrainState:
    return TrainState(model, T.AdamW(model.parameters(), tc.lr, tc.betas, weight_decay=tc.weight_decay))


def _step(state: TrainState, obs: np.ndarray, labels: np.ndarray, wms, tc: TrainConfig):
    model = state.model
    state.optimizer.zero_grad()
    logits, fused = forward_frame(T.Tensor(obs), wms, model)
    loss = focal_loss(logits, labels, tc.gamma, tc.alpha, tc.loss.cls)
    T.backward(loss)
    state.optimizer.step()
    return float(loss.data), fused


def train_stage1(data: Sequence[Clip], state: TrainState, tc: TrainConfig, epochs: int | None = None) -> TrainState:
    """Single-frame training; each frame's memory is its own stem feature repeated."""
    model = state.model
    cfg = model.config
    rng = np.random.default_rng([tc.seed, 1])
    for epoch in range(tc.epochs_stage1 if epochs is None else epochs):
        t0 = time.perf_counter()
        picks = []
        for si in rng.permutation(len(data)):
            k = min(tc.stage1_frames_per_sequence, len(data[si]))
            picks.extend((int(si), int(fi)) for fi in rng.choice(len(data[si]), size=k, replace=False))
        losses = []
        for lo in range(0, len(picks), tc.batch):
            chunk = picks[lo : lo + tc.batch]
            obs = np.stack([data[s].frames[f].observation for s, f in chunk])
            labels = np.stack([data[s].frames[f].gt_labels for s, f in chunk])
            wms = None
            if cfg.temporal:
                with T.no_grad():
                    f_bev = stem_forward(T.Tensor(obs), model)
                wms = [membuf.init(T.Tensor(f), cfg.t_wm, cfg.grid) for f in f_bev.data]
            loss, _ = _step(state, obs, labels, wms, tc)
            losses.append(loss)
        state.log.append(
            {"stage": 1, "epoch": epoch, "loss": float(np.mean(losses)), "wall_s": time.perf_counter() - t0}
        )
        log.info("stage 1 epoch %d loss %.5f", epoch, state.log[-1]["loss"])
    return state


class _Stream:
    def __init__(self, seq: Clip):
        self.seq = seq
        self.t = 0
        self.wm: membuf.WorkingMemory | None = None

    @property
    def done(self) -> bool:
        return self.t >= len(self.seq)


def _streams_for_epoch(data: Sequence[Clip], rng: np.random.Generator) -> list[Clip]:
    subs = []
    for si in rng.permutation(len(data)):
        seq = data[si]
        if len(seq) >= 4:
            a, b = synth.split_sequence(seq.scenario, rng)
            cut = len(a)
            subs.extend([sub_stream(seq, 0, cut), sub_stream(seq, cut, len(seq))])
        else:
            subs.append(seq)
    return subs


def run_streams(
    streams: list[Clip],
    model: Model,
    batch: int,
    step_fn: Callable,
    on_progress: Callable[[int], None] | None = None,
) -> list:
    """Drive up to ``batch`` sequences in lockstep, refilling finished slots from the queue.

    ``step_fn(obs, labels, wms, active)`` runs one synchronized frame and returns
    ``(output, fused)``; memories are then advanced with the batched fused feature.
    """
    cfg = model.config
    queue = list(streams)
    active: list[_Stream] = []
    outputs = []
    started = 0
    while queue or active:
        while queue and len(active) < batch:
            active.append(_Stream(queue.pop(0)))
            started += 1
            if on_progress is not None:
                on_progress(started)
        obs = np.stack([s.seq.frames[s.t].observation for s in active])
        labels = np.stack([s.seq.frames[s.t].gt_labels for s in active])
        if cfg.temporal:
            fresh = [s for s in active if s.wm is None]
            if fresh:
                with T.no_grad():
                    f0 = stem_forward(T.Tensor(np.stack([s.seq.frames[0].observation for s in fresh])), model)
                for s, f in zip(fresh, f0.data):
                    s.wm = membuf.init(T.Tensor(f), cfg.t_wm, cfg.grid)
        out, fused = step_fn(obs, labels, [s.wm for s in active] if cfg.temporal else None, active)
        outputs.append(out)
        for k, s in enumerate(active):
            s.t += 1
            if cfg.temporal and not s.done:
                f = T.Tensor(fused.data[k])
                if s.t == 1:
                    s.wm.replace_initial(f)
                s.wm.advance(f, s.seq.scenario.rel(s.t))
        active = [s for s in active if not s.done]
    return outputs


def train_stage2(
    data: Sequence[Clip],
    state: TrainState,
    tc: TrainConfig,
    epochs: int | None = None,
    snapshot_at: Sequence[float] = (),
    on_snapshot: Callable[[float, Model], None] | None = None,
) -> TrainState:
    """Streamed training over randomly split sub-sequences with detached memory.

    ``on_snapshot(fraction, model)`` fires once the given fractions of the
    stage's sub-sequences have been started.
    """
    model = state.model
    n_epochs = tc.epochs_stage2 if epochs is None else epochs
    rng = np.random.default_rng([tc.seed, 2])
    epoch_streams = [_streams_for_epoch(data, rng) for _ in range(n_epochs)]
    total = sum(len(s) for s in epoch_streams)
    pending = sorted(snapshot_at)
    done_before = 0

    for epoch, streams in enumerate(epoch_streams):
        t0 = time.perf_counter()
        losses = []

        def step_fn(obs, labels, wms, active):
            loss, fused = _step(state, obs, labels, wms, tc)
            losses.append(loss)
            return loss, fused

        def progress(started, _base=done_before):
            # a snapshot is taken right before the stream that crosses the fraction starts
            while pending and _base + started - 1 >= pending[0] * total:
                frac = pending.pop(0)
                if on_snapshot is not None:
                    on_snapshot(frac, model)

        run_streams(streams, model, tc.batch, step_fn, progress)
        done_before += len(streams)
        state.log.append(
            {"stage": 2, "epoch": epoch, "loss": float(np.mean(losses)), "wall_s": time.perf_counter() - t0}
        )
        log.info("stage 2 epoch %d loss %.5f", epoch, state.log[-1]["loss"])
    while pending:
        frac = pending.pop(0)
        if on_snapshot is not None:
            on_snapshot(frac, model)
    return state


# ---------------------------------------------------------------- evaluation


@dataclass
class Confusion:
    inter: np.ndarray = field(default_factory=lambda: np.zeros(synth.N_CLASSES, dtype=np.int64))
    union: np.ndarray = field(default_factory=lambda: np.zeros(synth.N_CLASSES, dtype=np.int64))

    def add(self, pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> None:
        if mask is not None:
            pred, gt = pred[mask], gt[mask]
        for c in FOREGROUND:
            p, g = pred == c, gt == c
            self.inter[c] += int(np.count_nonzero(p & g))
            self.union[c] += int(np.count_nonzero(p | g))

    def ious(self) -> dict[str, float | None]:
        return {
            synth.CLASSES[c]: (float(self.inter[c] / self.union[c]) if self.union[c] else None) for c in FOREGROUND
        }

    def mean(self) -> float | None:
        vals = [v for v in self.ious().values() if v is not None]
        return float(np.mean(vals)) if vals else None


@dataclass
class Metrics:
    per_class: dict[str, float | None]
    mean_iou: float | None
    occluded_iou: float | None
    occluded_per_class: dict[str, float | None]
    occluded_frames: int
    frames: int

    def to_dict(self) -> dict:
        return asdict(self)


def _metrics(full: Confusion, occ: Confusion, n_occ: int, n: int) -> Metrics:
    return Metrics(full.ious(), full.mean(), occ.mean(), occ.ious(), n_occ, n)


def predict(data: Sequence[Clip], model: Model, batch: int = 4) -> list[list[np.ndarray]]:
    """Per-frame argmax labels for every sequence, streaming each from its first frame."""
    preds: dict[int, list[np.ndarray]] = {id(seq): [] for seq in data}

    def step_fn(obs, labels, wms, active):
        with T.no_grad():
            logits, fused = forward_frame(T.Tensor(obs), wms, model)
        for s, lg in zip(active, logits.data):
            preds[id(s.seq)].append(np.argmax(lg, axis=0))
        return None, fused

    run_streams(list(data), model, batch, step_fn)
    return [preds[id(seq)] for seq in data]


def evaluate(data: Sequence[Clip], model: Model, window: int = 4, per_sequence: bool = False, batch: int = 4):
    """Per-class IoU, mean IoU and occluded-region IoU over every frame of every sequence.

    Occluded-region cells are hidden at t but visible in one of the previous
    ``window`` frames; only frames with at least 10 such cells count.
    """
    if not data:
        raise ValueError("cannot evaluate an empty dataset")
    full, occ = Confusion(), Confusion()
    n_occ = n = 0
    breakdown = []
    for seq, preds in zip(data, predict(data, model, batch)):
        sf, so = Confusion(), Confusion()
        s_occ = 0
        for t, pred in enumerate(preds):
            fr = seq.frames[t]
            full.add(pred, fr.gt_labels)
            sf.add(pred, fr.gt_labels)
            q = synth.recall_window_mask(seq.scenario, seq.frames, t, window)
            if q.sum() >= MIN_OCCLUDED_CELLS:
                occ.add(pred, fr.gt_labels, q)
                so.add(pred, fr.gt_labels, q)
                s_occ += 1
        n += len(preds)
        n_occ += s_occ
        breakdown.append(_metrics(sf, so, s_occ, len(preds)))
    m = _metrics(full, occ, n_occ, n)
    return (m, breakdown) if per_sequence else m


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BVM1"
CKPT_VERSION = 1


class CorruptCheckpoint(ValueError):
    pass


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    return np.array(
        [
            cfg.channels,
            cfg.t_wm,
            cfg.c_h,
            cfg.dilation[0],
            cfg.dilation[1],
            int(cfg.use_heatmap),
            int(cfg.temporal),
            int(cfg.heatmap_activation == "sigmoid"),
            cfg.c_obs,
            cfg.n_classes,
        ],
        dtype=np.float32,
    )


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CorruptCheckpoint("CRC mismatch (truncated or corrupted file)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(blob) - 4:
                raise CorruptCheckpoint(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(str(exc)) from exc
    if off != len(blob) - 4:
        raise CorruptCheckpoint("trailing bytes after the last tensor")
    return out


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {"meta.config": _config_vector(model.config)}
    out.update({k: v.data for k, v in model.named_tensors().items()})
    return out


def save_checkpoint(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model_tensors(model)))


def config_from_tensors(tensors: dict[str, np.ndarray], grid: GridSpec) -> ModelConfig:
    if "meta.config" not in tensors:
        raise CorruptCheckpoint("checkpoint has no meta.config tensor")
    v = [int(round(x)) for x in tensors["meta.config"]]
    return ModelConfig(
        channels=v[0],
        t_wm=v[1],
        c_h=v[2],
        grid=grid,
        dilation=(v[3], v[4]),
        use_heatmap=bool(v[5]),
        temporal=bool(v[6]),
        heatmap_activation="sigmoid" if v[7] else "relu",
        c_obs=v[8],
        n_classes=v[9],
    )


def load_checkpoint(path: str | Path, grid: GridSpec | None = None, config: ModelConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; shapes must match ``config`` when one is given."""
    tensors = decode_checkpoint(Path(path).read_bytes())
    stored = config_from_tensors(tensors, grid or (config.grid if config else ModelConfig().grid))
    if config is not None and replace(config, grid=stored.grid) != stored:
        raise T.ShapeError(f"checkpoint config {stored} does not match requested {config}")
    model = init_model(0, stored)
    named = model.named_tensors()
    if set(named) != set(tensors) - {"meta.config"}:
        raise CorruptCheckpoint("checkpoint tensor inventory does not match its configuration")
    for k, t in named.items():
        if t.shape != tensors[k].shape:
            raise T.ShapeError(f"{k}: checkpoint shape {tensors[k].shape} != model shape {t.shape}")
        t.data[...] = tensors[k]
    return model
