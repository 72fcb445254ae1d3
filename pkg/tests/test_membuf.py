import numpy as np
import pytest

from bevmem import heatmap as hm
from bevmem import membuf
from bevmem import tensorops as T
from bevmem import train as TR
from bevmem.grid import GridSpec, Pose2, relative_transform

SPEC = GridSpec(6, 10)


def tagged(tag, c=2, spec=SPEC):
    return T.Tensor(np.full((c, *spec.shape), float(tag)))


def tags(wm):
    # the centre cell survives every small motion used here untouched
    return [float(e.data[0, 3, 5]) for e in wm.entries]


def test_init_repeats_and_detaches():
    src = T.param(np.arange(2 * 60, dtype=float).reshape(2, 6, 10))
    wm = membuf.init(src, 4, SPEC)
    assert len(wm.entries) == 4
    for e in wm.entries:
        assert np.array_equal(e.data, src.data) and not e.requires_grad
    # stored copies do not alias the producer
    src.data[...] = -1
    assert wm.entries[0].data[0, 0, 0] == 0
    assert np.all(wm.heatmap.array == 1)


def test_capacity_one_and_errors():
    wm = membuf.init(tagged(3), 1, SPEC)
    assert np.array_equal(wm.stacked().data, wm.entries[0].data)
    with pytest.raises(ValueError):
        membuf.init(tagged(0), 0, SPEC)
    with pytest.raises(T.ShapeError):
        membuf.init(T.Tensor(np.zeros((2, 5, 10))), 2, SPEC)
    with pytest.raises(T.ShapeError):
        wm.advance(tagged(1, c=3), Pose2.identity())


def test_stacked_channel_count_default_config():
    spec = GridSpec(2, 3)
    wm = membuf.init(T.Tensor(np.zeros((256, 2, 3))), 4, spec)
    assert wm.stacked().shape == (1024, 2, 3)


def test_stacked_blocks_round_trip(rng):
    wm = membuf.init(tagged(0), 3, SPEC)
    for t in range(3):
        wm.advance(T.Tensor(rng.standard_normal((2, 6, 10))), Pose2.identity())
    blocks = T.split_channels(wm.stacked(), [2, 2, 2])
    for b, e in zip(blocks, wm.entries):
        assert np.array_equal(b.data, e.data)


def test_replace_initial():
    wm = membuf.init(tagged(0), 4, SPEC)
    wm.replace_initial(tagged(7))
    assert tags(wm) == [7.0] * 4
    with pytest.raises(RuntimeError):
        wm.replace_initial(tagged(8))
    wm2 = membuf.init(tagged(0), 2, SPEC)
    wm2.advance(tagged(1), Pose2.identity())
    with pytest.raises(RuntimeError):
        wm2.replace_initial(tagged(9))


@pytest.mark.parametrize("capacity", [1, 2, 4, 8])
def test_fifo_sentinel_stream(capacity):
    """Entry identities follow a length-capacity sliding window over 100 frames."""
    wm = membuf.init(tagged(-1), capacity, SPEC)
    wm.replace_initial(tagged(0))
    window = [0.0] * capacity  # replay oracle
    rng = np.random.default_rng(capacity)
    for t in range(1, 101):
        rel = Pose2.identity() if t % 3 else Pose2(float(rng.integers(-1, 2)), 0.0, 0.0)
        wm.advance(tagged(t), rel)
        window = window[1:] + [float(t)]
        assert tags(wm) == window
        assert len(wm.entries) == capacity
        if t >= capacity:
            assert 0.0 not in tags(wm)


def test_identity_advances_keep_features_unmodified(rng):
    wm = membuf.init(tagged(0), 3, SPEC)
    feats = [rng.standard_normal((2, 6, 10)).astype(np.float32) for _ in range(5)]
    for f in feats:
        wm.advance(T.Tensor(f), Pose2.identity())
    for e, f in zip(wm.entries, feats[-3:]):
        assert np.array_equal(e.data, f)


def test_heatmap_follows_step():
    wm = membuf.init(tagged(0), 2, SPEC)
    ref = hm.init(SPEC)
    for rel in [Pose2(1, 0, 0), Pose2(0.4, 0.2, 0.1), Pose2.identity()]:
        wm.advance(tagged(1), rel)
        ref = hm.step(ref, rel)
        assert np.array_equal(wm.heatmap.array, ref.array)


def test_world_fixed_impulse_stays_put():
    spec = GridSpec(21, 41)
    cap = 10
    f = np.zeros((1, 21, 41))
    f[0, 10, 30] = 1.0
    wm = membuf.init(T.Tensor(np.zeros((1, 21, 41))), cap, spec)
    step = relative_transform(Pose2(0, 0, 0), Pose2(2.0, 0.0, 0.0))  # 2 m forward per frame
    wm.advance(T.Tensor(f), step)
    for _ in range(9):
        wm.advance(T.Tensor(np.zeros((1, 21, 41))), step)
    # the impulse entry is now the oldest, shifted 20 cells backward
    expect = np.zeros((21, 41))
    expect[10, 10] = 1.0
    assert np.abs(wm.entries[0].data[0] - expect).max() < 1e-3


def test_detach_contract_exact():
    """A later frame's loss reaches parameters only through its own forward pass."""
    cfg = TR.ModelConfig(channels=4, t_wm=2, c_h=3, grid=SPEC)
    model = TR.init_model(0, cfg)
    rng = np.random.default_rng(0)
    obs0, obs1 = rng.standard_normal((2, cfg.c_obs, 6, 10))
    params = model.parameters()

    f0 = TR.stem_forward(T.Tensor(obs0), model)
    wm = membuf.init(f0, cfg.t_wm, SPEC)
    _, fused0 = TR.forward_frame(obs0, wm, model)
    wm.replace_initial(fused0)
    wm.advance(fused0, Pose2(1.0, 0.0, 0.1))
    assert all(not e.requires_grad and e.is_leaf for e in wm.entries)

    # buffer-only path: exactly zero gradient everywhere
    T.zero_grad(params)
    T.backward(T.sum_all(T.mul(wm.stacked(), 1.0)))
    assert all(np.all(p.grad == 0) for p in params)

    # the frame-1 loss equals the one computed from a memory rebuilt out of plain arrays
    r = rng.standard_normal((cfg.n_classes, 6, 10))
    T.zero_grad(params)
    logits, _ = TR.forward_frame(obs1, wm, model)
    T.backward(T.sum_all(T.mul(logits, T.Tensor(r))))
    g1 = [p.grad.copy() for p in params]

    clone = membuf.init(T.Tensor(np.zeros_like(f0.data)), cfg.t_wm, SPEC)
    clone.entries = [T.Tensor(e.data.copy()) for e in wm.entries]
    clone.heatmap = wm.heatmap.copy()
    T.zero_grad(params)
    logits2, _ = TR.forward_frame(obs1, clone, model)
    T.backward(T.sum_all(T.mul(logits2, T.Tensor(r))))
    for a, p in zip(g1, params):
        assert np.array_equal(a, p.grad)
