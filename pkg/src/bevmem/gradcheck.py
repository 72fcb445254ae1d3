"""Central finite-difference verification of every adjoint.

Each check projects the op output onto a fixed random direction ``r`` so the
scalar ``L = sum(r * op(x))`` exercises the whole Jacobian, then compares
reverse-mode gradients against ``(L(x + h) - L(x - h)) / 2h`` coordinate by
coordinate, with one Richardson step over ``h`` and ``h/2`` to cancel the
``O(h^2)`` truncation term. The error of an input is ``max |analytic - numeric|`` divided by
the largest gradient magnitude of that input.

The adjoint under test runs at the working precision; the finite-difference
reference always runs at float64. At float32 a difference quotient with
``h = 1e-3`` carries rounding noise of order ``eps * |L| / h``, about 1e-3
for the loss sizes here, which would swamp the tolerance being checked.

ReLU makes some functions piecewise linear. A coordinate whose perturbation
flips the sign of any ReLU pre-activation has no central difference to speak
of, so it is skipped and counted.
"""

from __future__ import annotations

import contextlib
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import fusion as fu
from . import tensorops as T
from .grid import GridSpec, Pose2

# (step, tolerance) per working precision
SETTINGS = {
    np.dtype(np.float32): (1e-3, 1e-3),
    np.dtype(np.float64): (1e-5, 1e-6),
}
MAX_COORDS = 48


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _relu_signs(out: T.Tensor) -> list[np.ndarray]:
    """Sign patterns of every ReLU pre-activation in the graph below ``out``, in a fixed order."""
    signs, seen, stack = [], set(), [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._op == "relu":
            signs.append(node._parents[0].data > 0)
        stack.extend(reversed(node._parents))
    return signs


def check(
    name: str,
    fn: Callable[..., T.Tensor],
    inputs: dict[str, np.ndarray],
    wrt: list[str] | None = None,
    rng: np.random.Generator | None = None,
    max_coords: int = MAX_COORDS,
) -> CheckResult:
    """Compare ``backward`` against central differences for ``fn(**inputs)``."""
    rng = rng or np.random.default_rng(0)
    dtype = T.get_dtype()
    h, tol = SETTINGS[dtype]
    wrt = list(inputs) if wrt is None else wrt
    base = {k: np.asarray(v, dtype=dtype) for k, v in inputs.items()}

    def run(values, grad=True):
        ts = {k: T.Tensor(v, requires_grad=grad and k in wrt) for k, v in values.items()}
        return ts, fn(**ts)

    ts, out = run(base)
    r = rng.standard_normal(out.shape).astype(dtype)
    T.backward(T.sum_all(T.mul(out, T.Tensor(r))))
    analytic = {k: ts[k].grad.copy() for k in wrt}

    r64 = r.astype(np.float64)
    base = {k: v.astype(np.float64) for k, v in base.items()}

    def loss_and_signs(values):
        with T.precision(np.float64):
            _, o = run(values)
        return float((o.data * r64).sum()), _relu_signs(o)

    worst, checked, skipped = 0.0, 0, 0
    for k in wrt:
        x = base[k]
        flat = np.arange(x.size)
        if x.size > max_coords:
            flat = np.sort(rng.choice(x.size, max_coords, replace=False))
        num = np.zeros(len(flat))
        keep = np.ones(len(flat), bool)
        for n, idx in enumerate(flat):
            diffs = []
            for step in (h, h / 2):
                plus, minus = dict(base), dict(base)
                plus[k], minus[k] = x.copy(), x.copy()
                plus[k].flat[idx] += step
                minus[k].flat[idx] -= step
                lp, sp = loss_and_signs(plus)
                lm, sm = loss_and_signs(minus)
                if any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
                    keep[n] = False
                    break
                diffs.append((lp - lm) / (2 * step))
            else:
                num[n] = (4 * diffs[1] - diffs[0]) / 3
        if not keep.any():
            skipped += len(flat)
            continue
        a = analytic[k].reshape(-1)[flat][keep].astype(np.float64)
        nv = num[keep]
        scale = max(np.abs(nv).max(), np.abs(a).max(), 1e-8)
        worst = max(worst, float(np.abs(a - nv).max() / scale))
        checked += int(keep.sum())
        skipped += int((~keep).sum())
    return CheckResult(name, worst, checked, skipped, tol)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict, list[str] | None]]:
    f = lambda *s: rng.standard_normal(s)  # noqa: E731
    spec = GridSpec(6, 8, 1.0)
    rel = Pose2(0.7, -0.4, 0.3)
    return [
        ("add", lambda a, b: T.add(a, b), {"a": f(4, 6, 8), "b": f(4, 1, 1)}, None),
        ("mul", lambda a, b: T.mul(a, b), {"a": f(4, 6, 8), "b": f(4, 6, 8)}, None),
        ("scale", lambda a: T.mul(a, -1.7), {"a": f(4, 6, 8)}, None),
        ("sum", lambda a: T.sum_all(a), {"a": f(4, 6, 8)}, None),
        ("relu", lambda a: T.relu(a), {"a": _away_from_zero(rng, (4, 6, 8))}, None),
        ("sigmoid", lambda a: T.sigmoid(a), {"a": 3 * f(4, 6, 8)}, None),
        (
            "concat",
            lambda a, b, c: T.concat_channels([a, b, c]),
            {"a": f(2, 6, 8), "b": f(1, 6, 8), "c": f(1, 6, 8)},
            None,
        ),
        ("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b), {"x": f(4, 6, 8), "w": f(3, 4, 1, 1), "b": f(3)}, None),
        ("conv2d_3x3", lambda x, w, b: T.conv2d(x, w, b), {"x": f(3, 6, 8), "w": f(4, 3, 3, 3), "b": f(4)}, None),
        (
            "conv2d_3x3_dil2",
            lambda x, w, b: T.conv2d(x, w, b, (2, 2)),
            {"x": f(3, 6, 8), "w": f(4, 3, 3, 3), "b": f(4)},
            None,
        ),
        (
            "conv2d_batched",
            lambda x, w, b: T.conv2d(x, w, b, (1, 2)),
            {"x": f(2, 3, 6, 8), "w": f(2, 3, 3, 3), "b": f(2)},
            None,
        ),
        (
            "conv2d_grad_from",
            lambda x, w, b: T.conv2d(x, w, b, (2, 2), grad_from=2),
            {"x": f(4, 6, 8), "w": f(3, 4, 3, 3), "b": f(3)},
            ["w", "b"],
        ),
        (
            "layer_norm",
            lambda x, g, b: T.layer_norm(x, g, b),
            {"x": f(4, 6, 8), "g": 1 + 0.3 * f(4), "b": f(4)},
            None,
        ),
        ("warp", lambda x: T.warp(x, rel, spec), {"x": f(4, 6, 8)}, None),
    ]


def _focal_case(rng):
    from .train import focal_loss

    labels = rng.integers(0, 4, size=(6, 8))
    return ("focal_loss", lambda z: focal_loss(z, labels), {"z": 2 * rng.standard_normal((4, 6, 8))}, None)


def _fusion_case(rng):
    """The reduced fusion block: C=8, T_WM=2, C_H=4 on a 6x10 grid."""
    cfg = fu.FusionConfig(channels=8, t_wm=2, c_h=4)
    params = fu.init_params(rng, cfg)
    named = params.named_tensors()
    inputs = {k.replace(".", "_"): v.data.astype(np.float64) for k, v in named.items()}
    inputs["f_bev"] = rng.standard_normal((8, 6, 10))
    mem = rng.standard_normal((16, 6, 10))
    heat = rng.integers(1, 6, size=(1, 6, 10)).astype(np.float64)

    def fn(f_bev, **ws):
        for k, t in named.items():
            setattr_tensor(params, k, ws[k.replace(".", "_")])
        h_feat = fu.heatmap_features(T.Tensor(heat), params)
        return fu.fuse(T.Tensor(mem), h_feat, f_bev, params)

    return ("fusion_end_to_end", fn, inputs, None)


def setattr_tensor(params: fu.FusionParams, name: str, t: T.Tensor) -> None:
    """Swap one named tensor of ``params`` for ``t`` (names as in ``named_tensors``)."""
    if name == "ln.gain":
        params.ln_gain = t
        return
    if name == "ln.bias":
        params.ln_bias = t
        return
    group, idx, attr = name.split(".")
    setattr(getattr(params, group)[int(idx)], attr, t)


def run_suite(seed: int = 0, dtype=None, only: list[str] | None = None) -> list[CheckResult]:
    """Every differentiable op plus the reduced fusion block, at the current (or given) precision."""
    ctx = T.precision(dtype) if dtype is not None else contextlib.nullcontext()
    with ctx:
        rng = np.random.default_rng(seed)
        cases = _op_cases(rng) + [_focal_case(rng), _fusion_case(rng)]
        results = []
        for name, fn, inputs, wrt in cases:
            if only and name not in only:
                continue
            results.append(check(name, fn, inputs, wrt, np.random.default_rng([seed, len(results)])))
        return results


def report(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<20} max_rel_err={r.max_rel_error:.3e} tol={r.tolerance:.0e} "
            f"coords={r.checked} skipped={r.skipped} {status}"
        )
    return "\n".join(lines)


def main_suite(seed: int = 0) -> tuple[bool, str, float]:
    t0 = time.perf_counter()
    res = run_suite(seed)
    return all(r.passed for r in res), report(res), time.perf_counter() - t0
