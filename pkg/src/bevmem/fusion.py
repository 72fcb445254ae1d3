"""Working memory fusion block.

Heatmap branch: three convolutions (1->16 k3 ReLU, 16->16 k3 ReLU,
16->C_H k1) squashed by a sigmoid. Fusion branch: the memory stack, heatmap
feature and current BEV feature are concatenated in that order, passed
through three dilated 3x3 convolutions with ReLU, then layer-normalized
across channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorops as T


@dataclass(frozen=True)
class ConvSpec:
    cin: int
    cout: int
    k: int
    dilation: tuple[int, int] = (1, 1)
    relu: bool = True


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 256
    t_wm: int = 4
    c_h: int = 32
    dilation: tuple[int, int] = (2, 2)
    use_heatmap: bool = True
    heatmap_activation: str = "sigmoid"

    def __post_init__(self):
        if min(self.channels, self.t_wm, self.c_h) < 1:
            raise ValueError("channel counts and memory capacity must be >= 1")
        if self.heatmap_activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown heatmap activation {self.heatmap_activation!r}")

    @property
    def mem_in_channels(self) -> int:
        return self.t_wm * self.channels + (self.c_h if self.use_heatmap else 0) + self.channels

    def conv_h_layers(self) -> list[ConvSpec]:
        return [
            ConvSpec(1, 16, 3),
            ConvSpec(16, 16, 3),
            ConvSpec(16, self.c_h, 1, relu=False),
        ]

    def conv_mem_layers(self) -> list[ConvSpec]:
        c = self.channels
        return [
            ConvSpec(self.mem_in_channels, c, 3, self.dilation),
            ConvSpec(c, c, 3, self.dilation),
            ConvSpec(c, c, 3, self.dilation),
        ]


@dataclass
class ConvLayer:
    spec: ConvSpec
    weight: T.Tensor
    bias: T.Tensor

    def __call__(self, x: T.Tensor, grad_from: int = 0) -> T.Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.spec.dilation, grad_from)
        return T.relu(y) if self.spec.relu else y


def make_conv(spec: ConvSpec, rng: np.random.Generator, name: str) -> ConvLayer:
    fan_in = spec.cin * spec.k * spec.k
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(spec.cout, spec.cin, spec.k, spec.k))
    return ConvLayer(spec, T.param(w, f"{name}.weight"), T.param(np.zeros(spec.cout), f"{name}.bias"))


@dataclass
class FusionParams:
    config: FusionConfig
    conv_h: list[ConvLayer]
    conv_mem: list[ConvLayer]
    ln_gain: T.Tensor
    ln_bias: T.Tensor

    def named_tensors(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, layers in (("conv_h", self.conv_h), ("conv_mem", self.conv_mem)):
            for i, layer in enumerate(layers):
                out[f"{prefix}.{i}.weight"] = layer.weight
                out[f"{prefix}.{i}.bias"] = layer.bias
        out["ln.gain"] = self.ln_gain
        out["ln.bias"] = self.ln_bias
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_tensors().values())


def init_params(seed: int | np.random.Generator, config: FusionConfig = FusionConfig()) -> FusionParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    conv_h = [make_conv(s, rng, f"conv_h.{i}") for i, s in enumerate(config.conv_h_layers())] if config.use_heatmap else []
    conv_mem = [make_conv(s, rng, f"conv_mem.{i}") for i, s in enumerate(config.conv_mem_layers())]
    c = config.channels
    return FusionParams(config, conv_h, conv_mem, T.param(np.ones(c), "ln.gain"), T.param(np.zeros(c), "ln.bias"))


def heatmap_features(h: T.Tensor, p: FusionParams) -> T.Tensor:
    """Learned heatmap feature in (0, 1), shape ``(C_H, H, W)``; the heatmap itself is a constant input."""
    if h.shape[-3] != 1:
        raise T.ShapeError(f"heatmap must have a single channel, got shape {h.shape}")
    if not p.conv_h:
        raise ValueError("heatmap branch is disabled in this configuration")
    x = T.Tensor(h.data)
    for layer in p.conv_h:
        x = layer(x)
    if p.config.heatmap_activation == "relu":
        return T.relu(x)
    return T.sigmoid(x)


def fuse(wm_stacked: T.Tensor, h_feat: T.Tensor | None, f_bev: T.Tensor, p: FusionParams) -> T.Tensor:
    cfg = p.config
    c = cfg.channels
    if f_bev.shape[-3] != c:
        raise T.ShapeError(f"current feature has {f_bev.shape[-3]} channels, config expects {c}")
    if wm_stacked.shape[-3] != cfg.t_wm * c:
        raise T.ShapeError(f"memory stack has {wm_stacked.shape[-3]} channels, config expects {cfg.t_wm * c}")
    parts = [wm_stacked]
    if cfg.use_heatmap:
        if h_feat is None or h_feat.shape[-3] != cfg.c_h:
            raise T.ShapeError(f"heatmap feature must have {cfg.c_h} channels")
        parts.append(h_feat)
    parts.append(f_bev)
    x = T.concat_channels(parts)
    # the memory stack is detached, so layer 1 only needs input gradient past it
    skip = 0 if wm_stacked.requires_grad else wm_stacked.shape[-3]
    for i, layer in enumerate(p.conv_mem):
        x = layer(x, skip if i == 0 else 0)
    return T.layer_norm(x, p.ln_gain, p.ln_bias)
