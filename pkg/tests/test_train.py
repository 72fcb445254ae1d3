import math

import numpy as np
import pytest

from bevmem import membuf, synth
from bevmem import tensorops as T
from bevmem import train as TR
from bevmem.grid import GridSpec
from oracles import confusion_iou as _confusion_iou


def confusion_iou(*args):
    return {synth.CLASSES[c]: v for c, v in _confusion_iou(*args).items()}


TINY = GridSpec(12, 24)


def tiny_config(**kw):
    return TR.ModelConfig(**{"channels": 8, "t_wm": 2, "c_h": 4, "grid": TINY, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    params = synth.ScenarioParams(frames=6)
    train = TR.render_dataset([synth.gen_scenario(500 + i, TINY, params) for i in range(12)])
    evals = TR.render_dataset([synth.gen_scenario(900 + i, TINY, params) for i in range(4)])
    return train, evals


# ---------------------------------------------------------------- model


def test_benchmark_preset_channels():
    cfg = TR.ModelConfig.benchmark()
    assert cfg.grid.shape == (32, 64) and cfg.channels == 64
    assert cfg.mem_in_channels == 352


def test_model_config_validation():
    with pytest.raises(ValueError):
        TR.ModelConfig(channels=0)
    with pytest.raises(ValueError):
        TR.LossWeights(cls=0)
    w = TR.LossWeights()
    assert (w.cls, w.line, w.trans) == (5.0, 50.0, 0.1)


def test_forward_frame_shapes(rng):
    cfg = tiny_config()
    model = TR.init_model(0, cfg)
    obs = rng.standard_normal((4, 12, 24))
    wm = membuf.init(TR.stem_forward(T.Tensor(obs), model), 2, TINY)
    logits, fused = TR.forward_frame(obs, wm, model)
    assert logits.shape == (4, 12, 24) and fused.shape == (8, 12, 24)
    assert model.fusion.conv_mem[0].weight.shape[1] == 2 * 8 + 4 + 8


def test_forward_frame_single_frame_mode(rng):
    cfg = tiny_config(temporal=False)
    model = TR.init_model(0, cfg)
    assert model.fusion is None
    obs = rng.standard_normal((4, 12, 24))
    logits, f = TR.forward_frame(obs, None, model)
    expect = model.head(TR.stem_forward(T.Tensor(obs), model)).data
    assert np.array_equal(logits.data, expect)


def test_forward_frame_config_mismatch(rng):
    model = TR.init_model(0, tiny_config())
    obs = rng.standard_normal((4, 12, 24))
    with pytest.raises(T.ShapeError):
        TR.forward_frame(obs, membuf.init(T.Tensor(np.zeros((8, 12, 24))), 3, TINY), model)
    with pytest.raises(T.ShapeError):
        TR.forward_frame(rng.standard_normal((4, 10, 24)), None, model)
    with pytest.raises(T.ShapeError):
        TR.forward_frame(rng.standard_normal((3, 12, 24)), None, model)


# ---------------------------------------------------------------- focal loss


def test_focal_perfect_logits():
    labels = np.array([[0, 1], [2, 3]])
    logits = 30.0 * (np.eye(4)[labels].transpose(2, 0, 1) * 2 - 1)
    assert float(TR.focal_loss(T.Tensor(logits), labels).data) < 1e-3


def test_focal_uniform_logits_closed_form():
    labels = np.zeros((3, 5), int)
    with T.precision(np.float64):
        got = float(TR.focal_loss(T.Tensor(np.zeros((4, 3, 5))), labels).data)
    per_cell = 0.25 * (1 - 0.25) ** 2 * math.log(4)
    assert got == pytest.approx(5.0 * per_cell, rel=1e-12)


def test_focal_reduces_to_cross_entropy(rng):
    z = rng.standard_normal((4, 3, 5))
    labels = rng.integers(0, 4, size=(3, 5))
    with T.precision(np.float64):
        got = float(TR.focal_loss(T.Tensor(z), labels, gamma=0.0, alpha=1.0).data)
    logp = z - np.log(np.exp(z).sum(0, keepdims=True))
    ce = -np.take_along_axis(logp, labels[None], 0).mean()
    assert got == pytest.approx(5.0 * ce, rel=1e-12)


def test_focal_shape_error():
    with pytest.raises(T.ShapeError):
        TR.focal_loss(T.Tensor(np.zeros((4, 3, 5))), np.zeros((3, 4), int))


# ---------------------------------------------------------------- metrics


def test_confusion_matches_oracle(rng):
    preds = [rng.integers(0, 4, size=(6, 7)) for _ in range(5)]
    gts = [rng.integers(0, 4, size=(6, 7)) for _ in range(5)]
    masks = [rng.random((6, 7)) < 0.5 for _ in range(5)]
    for use_mask in (False, True):
        c = TR.Confusion()
        for p, g, m in zip(preds, gts, masks):
            c.add(p, g, m if use_mask else None)
        ref = confusion_iou(preds, gts, masks if use_mask else None)
        assert c.ious() == ref


def test_confusion_edge_cases():
    g = np.array([[0, 1], [2, 3]])
    c = TR.Confusion()
    c.add(g, g)
    assert c.ious() == {"ped_crossing": 1.0, "divider": 1.0, "boundary": 1.0} and c.mean() == 1.0
    c = TR.Confusion()
    c.add(np.zeros_like(g), g)
    assert c.ious() == {"ped_crossing": 0.0, "divider": 0.0, "boundary": 0.0}
    c = TR.Confusion()
    c.add(np.zeros_like(g), np.zeros_like(g))
    assert c.mean() is None


def test_evaluate_perfect_predictions(tiny_data, monkeypatch):
    _, evals = tiny_data
    gts = {id(c): [f.gt_labels for f in c.frames] for c in evals}
    monkeypatch.setattr(TR, "predict", lambda data, model, batch=4: [gts[id(c)] for c in data])
    m = TR.evaluate(evals, None)
    assert m.mean_iou == 1.0 and all(v in (None, 1.0) for v in m.per_class.values())
    assert m.frames == sum(len(c) for c in evals)
    with pytest.raises(ValueError):
        TR.evaluate([], None)


def test_evaluate_matches_oracle(tiny_data):
    _, evals = tiny_data
    model = TR.init_model(0, tiny_config())
    m, per_seq = TR.evaluate(evals, model, 4, per_sequence=True)
    preds = TR.predict(evals, model)
    flat_p = [p for ps in preds for p in ps]
    flat_g = [f.gt_labels for c in evals for f in c.frames]
    ref = confusion_iou(flat_p, flat_g)
    assert m.per_class == ref
    masks, mp, mg = [], [], []
    for c, ps in zip(evals, preds):
        for t, p in enumerate(ps):
            q = synth.recall_window_mask(c.scenario, c.frames, t, 4)
            if q.sum() >= 10:
                masks.append(q)
                mp.append(p)
                mg.append(c.frames[t].gt_labels)
    assert m.occluded_frames == len(masks)
    if masks:
        occ = confusion_iou(mp, mg, masks)
        vals = [v for v in occ.values() if v is not None]
        assert m.occluded_iou == (float(np.mean(vals)) if vals else None)
    assert len(per_seq) == len(evals)
    for v in list(m.per_class.values()) + [m.mean_iou]:
        assert v is None or 0 <= v <= 1


def test_streaming_causality(tiny_data):
    _, evals = tiny_data
    model = TR.init_model(1, tiny_config())
    clip = evals[0]
    before = TR.predict([clip], model)[0]
    frames = [synth.ObservationFrame(f.observation.copy(), f.gt_labels, f.visibility_mask) for f in clip.frames]
    for f in frames[3:]:
        f.observation[...] = np.random.default_rng(0).normal(size=f.observation.shape)
    after = TR.predict([TR.Clip(clip.scenario, frames)], model)[0]
    for t in range(3):
        assert np.array_equal(before[t], after[t])


def test_batched_prediction_matches_single(tiny_data):
    _, evals = tiny_data
    model = TR.init_model(2, tiny_config())
    one = TR.predict(evals, model, batch=1)
    many = TR.predict(evals, model, batch=3)
    agree = np.mean([np.mean(a == b) for x, y in zip(one, many) for a, b in zip(x, y)])
    assert agree > 0.999


# ---------------------------------------------------------------- training


def test_stage1_deterministic_and_learns(tiny_data):
    train, _ = tiny_data
    tc = TR.TrainConfig(batch=2, epochs_stage1=3, stage1_frames_per_sequence=3)
    blobs = []
    for _ in range(2):
        state = TR.make_state(TR.init_model(0, tiny_config()), tc)
        TR.train_stage1(train, state, tc)
        blobs.append(TR.encode_checkpoint(TR.model_tensors(state.model)))
    assert blobs[0] == blobs[1]
    losses = [e["loss"] for e in state.log]
    assert losses[-1] < losses[0]


def test_stage2_keeps_buffer_length(tiny_data, monkeypatch):
    train, _ = tiny_data
    cfg = tiny_config()
    seen = []
    orig = membuf.WorkingMemory.advance

    def spy(self, fused, rel):
        orig(self, fused, rel)
        seen.append(len(self.entries))
        assert all(not e.requires_grad for e in self.entries)

    monkeypatch.setattr(membuf.WorkingMemory, "advance", spy)
    tc = TR.TrainConfig(batch=3)
    state = TR.make_state(TR.init_model(0, cfg), tc)
    TR.train_stage2(train, state, tc)
    assert seen and set(seen) == {cfg.t_wm}
    assert all(math.isfinite(e["loss"]) for e in state.log)


def test_stage2_snapshot_fires_once(tiny_data):
    train, _ = tiny_data
    tc = TR.TrainConfig(batch=2, epochs_stage2=2)
    state = TR.make_state(TR.init_model(0, tiny_config()), tc)
    fired = []
    TR.train_stage2(train, state, tc, snapshot_at=[0.5], on_snapshot=lambda f, m: fired.append(f))
    assert fired == [0.5]
    assert [e["stage"] for e in state.log] == [2, 2]


def _first_frame_losses(train, model, tc):
    """Loss of every sub-sequence's first stage-2 frame before any update."""
    with T.no_grad():
        vals = []
        for clip in train:
            obs = clip.frames[0].observation
            f0 = TR.stem_forward(T.Tensor(obs), model)
            wm = membuf.init(f0, model.config.t_wm, model.config.grid)
            logits, _ = TR.forward_frame(obs, wm, model)
            vals.append(float(TR.focal_loss(logits, clip.frames[0].gt_labels).data))
    return float(np.mean(vals))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stage1_is_a_warm_start(tiny_data, seed):
    train, _ = tiny_data
    tc = TR.TrainConfig(batch=2, seed=seed, epochs_stage1=2, stage1_frames_per_sequence=3)
    warm = TR.make_state(TR.init_model(seed, tiny_config()), tc)
    TR.train_stage1(train, warm, tc)
    cold = TR.init_model(seed, tiny_config())
    assert _first_frame_losses(train, warm.model, tc) < _first_frame_losses(train, cold, tc)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = TR.init_model(3, tiny_config())
    a = tmp_path / "a.bvm"
    TR.save_checkpoint(model, a)
    back = TR.load_checkpoint(a, TINY)
    b = tmp_path / "b.bvm"
    TR.save_checkpoint(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert back.config == model.config


def test_checkpoint_layout(tmp_path):
    import struct
    import zlib

    blob = TR.encode_checkpoint({"x": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == b"BVM1"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 12) == (1,) and blob[14:15] == b"x"
    assert blob[15] == 2 and struct.unpack_from("<II", blob, 16) == (1, 2)
    assert np.frombuffer(blob[24:32], "<f4").tolist() == [1.0, 2.0]
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    assert len(blob) == 36


def test_checkpoint_inventory_default_config():
    model = TR.init_model(0, TR.ModelConfig())
    names = set(TR.model_tensors(model))
    expect = {"meta.config", "head.weight", "head.bias", "fusion.ln.gain", "fusion.ln.bias"}
    expect |= {f"stem.{i}.{k}" for i in range(2) for k in ("weight", "bias")}
    expect |= {f"fusion.conv_h.{i}.{k}" for i in range(3) for k in ("weight", "bias")}
    expect |= {f"fusion.conv_mem.{i}.{k}" for i in range(3) for k in ("weight", "bias")}
    assert names == expect


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:-10],
        lambda b: b[:40] + bytes([b[40] ^ 1]) + b[41:],
        lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
        lambda b: b"",
    ],
)
def test_checkpoint_corruption_detected(tmp_path, corrupt):
    blob = TR.encode_checkpoint(TR.model_tensors(TR.init_model(0, tiny_config())))
    with pytest.raises(TR.CorruptCheckpoint):
        TR.decode_checkpoint(corrupt(blob))


def test_checkpoint_bad_version_even_with_valid_crc():
    import zlib

    blob = TR.encode_checkpoint({"x": np.zeros(1, np.float32)})
    body = blob[:4] + (2).to_bytes(4, "little") + blob[8:-4]
    with pytest.raises(TR.CorruptCheckpoint, match="version"):
        TR.decode_checkpoint(body + zlib.crc32(body).to_bytes(4, "little"))


def test_checkpoint_config_mismatch(tmp_path):
    p = tmp_path / "m.bvm"
    TR.save_checkpoint(TR.init_model(0, tiny_config()), p)
    with pytest.raises(T.ShapeError):
        TR.load_checkpoint(p, config=tiny_config(t_wm=3))
