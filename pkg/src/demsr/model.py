"""EfficientNetV2-style DEM super-resolution network.

Layout: 3x3 stem conv -> six stages of MBConv blocks (no batch norm, LeakyReLU
activations, squeeze-and-excite) at constant resolution -> two sub-pixel
upsampling blocks -> sum with the interpolated input -> 3x3 output conv.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List

import numpy as np

from .exceptions import ConfigError, DimensionError
from .ops import conv2d, depthwise_conv2d, leaky_relu, pixel_shuffle, se_block, upsample
from .tensor import DEFAULT_DTYPE, Tensor, add


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    expansion_ratio: int
    num_layers: int
    kernel: int = 3
    stride: int = 1
    se_ratio: float = 0.25


@dataclass(frozen=True)
class UpSpec:
    """3x3 conv ``in -> out * r**2`` followed by a pixel shuffle of factor ``r``."""

    in_channels: int
    out_channels: int
    r: int


# channels / expansion / layers per stage, EfficientNetV2-S layout
PRODUCTION_STAGES = (
    StageSpec(24, 1, 2),
    StageSpec(48, 4, 4),
    StageSpec(64, 4, 4),
    StageSpec(128, 4, 6),
    StageSpec(160, 6, 9),
    StageSpec(256, 6, 15),
)


@dataclass(frozen=True)
class ModelConfig:
    stem_channels: int = 24
    stages: tuple = PRODUCTION_STAGES
    up1: UpSpec = UpSpec(256, 64, 4)
    up2: UpSpec = UpSpec(64, 1, 4)
    skip_interpolation: str = "bicubic"
    final_kernel: int = 3
    leaky_slope: float = 0.2
    scale_factor: int = 16
    seed: int = 0
    # "skip": final conv starts as a delta kernel and up2 weights are shrunk, so
    # the untrained network already returns the interpolated input.
    head_init: str = "skip"
    up2_init_scale: float = 0.1

    def validate(self):
        if not self.stages:
            raise ConfigError("stages: at least one stage is required")
        for i, st in enumerate(self.stages):
            for fld in ("out_channels", "expansion_ratio", "num_layers"):
                if getattr(st, fld) < 1:
                    raise ConfigError(f"stages[{i}].{fld} must be positive, got {getattr(st, fld)}")
            if st.kernel % 2 == 0 or st.kernel < 1:
                raise ConfigError(f"stages[{i}].kernel must be odd, got {st.kernel}")
            if st.stride != 1:
                raise ConfigError(f"stages[{i}].stride must be 1 (resolution is kept until upsampling)")
            if not 0 < st.se_ratio <= 1:
                raise ConfigError(f"stages[{i}].se_ratio must lie in (0, 1], got {st.se_ratio}")
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.stem_channels != self.stages[0].out_channels:
            raise ConfigError(
                f"stem_channels ({self.stem_channels}) must equal stages[0].out_channels ({self.stages[0].out_channels})"
            )
        if self.up1.in_channels != self.stages[-1].out_channels:
            raise ConfigError(f"up1.in_channels must equal the last stage width {self.stages[-1].out_channels}")
        if self.up2.in_channels != self.up1.out_channels:
            raise ConfigError("up2.in_channels must equal up1.out_channels")
        if self.up2.out_channels != 1:
            raise ConfigError("up2.out_channels must be 1 to match the single-band skip path")
        if self.up1.r * self.up2.r != self.scale_factor:
            raise ConfigError(f"scale_factor {self.scale_factor} != up1.r * up2.r = {self.up1.r * self.up2.r}")
        if self.skip_interpolation not in ("bicubic", "bilinear"):
            raise ConfigError(f"skip_interpolation must be bicubic or bilinear, got {self.skip_interpolation!r}")
        if self.final_kernel % 2 == 0:
            raise ConfigError(f"final_kernel must be odd, got {self.final_kernel}")
        if self.head_init not in ("skip", "kaiming"):
            raise ConfigError(f"head_init must be skip or kaiming, got {self.head_init!r}")
        if not self.up2_init_scale > 0:
            raise ConfigError(f"up2_init_scale must be positive, got {self.up2_init_scale}")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["up1"] = UpSpec(**d["up1"])
        d["up2"] = UpSpec(**d["up2"])
        return cls(**d)


def production_config(**overrides):
    return replace(ModelConfig(), **overrides).validate()


def tiny_config(divisor=8, **overrides):
    """Production layout with channels divided by ``divisor`` and one layer per stage."""
    stages = tuple(
        StageSpec(max(1, s.out_channels // divisor), s.expansion_ratio, 1) for s in PRODUCTION_STAGES
    )
    cfg = ModelConfig(
        stem_channels=stages[0].out_channels,
        stages=stages,
        up1=UpSpec(stages[-1].out_channels, max(1, 64 // divisor), 4),
        up2=UpSpec(max(1, 64 // divisor), 1, 4),
    )
    return replace(cfg, **overrides).validate()


def se_width(expanded, se_ratio=0.25):
    return max(1, int(math.floor(expanded * se_ratio)))


@dataclass
class MBConv:
    """Inverted-residual block; parameters are views into the model's table."""

    in_channels: int
    out_channels: int
    expansion: int
    kernel: int
    params: Dict[str, Tensor]

    @property
    def residual(self):
        return self.in_channels == self.out_channels


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, Tensor]
    blocks: List[MBConv] = field(default_factory=list)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None


def _leaky_gain(slope):
    return math.sqrt(2.0 / (1.0 + slope * slope))


def build_model(config: ModelConfig, dtype=DEFAULT_DTYPE) -> Model:
    """Instantiate every parameter from ``config.seed``.

    Weights are drawn uniformly in ``+-gain * sqrt(3 / fan_in)``, where the
    gain matches the activation that follows (LeakyReLU or none).  Biases
    start at zero.  With ``head_init="skip"`` the final conv is a centred
    delta kernel and the up2 weights are scaled by ``up2_init_scale``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    leaky = _leaky_gain(config.leaky_slope)
    params: Dict[str, Tensor] = {}

    def conv(name, co, ci, k, gain):
        fan_in = ci * k * k
        bound = gain * math.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(co, ci, k, k)).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros((1, co, 1, 1), dtype=dtype), requires_grad=True, name=f"{name}.bias")

    conv("stem", config.stem_channels, 1, 3, leaky)

    blocks = []
    cin = config.stem_channels
    for si, st in enumerate(config.stages):
        for li in range(st.num_layers):
            prefix = f"stages.{si}.{li}"
            exp = cin * st.expansion_ratio
            if st.expansion_ratio > 1:
                conv(f"{prefix}.expand", exp, cin, 1, leaky)
            # depthwise: fan-in is one channel's window
            bound = leaky * math.sqrt(3.0 / (st.kernel * st.kernel))
            w = rng.uniform(-bound, bound, size=(exp, 1, st.kernel, st.kernel)).astype(dtype)
            params[f"{prefix}.dw.weight"] = Tensor(w, requires_grad=True, name=f"{prefix}.dw.weight")
            params[f"{prefix}.dw.bias"] = Tensor(np.zeros((1, exp, 1, 1), dtype=dtype), requires_grad=True)
            cr = se_width(exp, st.se_ratio)
            conv(f"{prefix}.se_reduce", cr, exp, 1, leaky)
            conv(f"{prefix}.se_expand", exp, cr, 1, 1.0)
            conv(f"{prefix}.project", st.out_channels, exp, 1, 1.0)
            names = [k for k in params if k.startswith(prefix + ".")]
            blocks.append(
                MBConv(cin, st.out_channels, st.expansion_ratio, st.kernel, {k[len(prefix) + 1:]: params[k] for k in names})
            )
            cin = st.out_channels

    conv("up1", config.up1.out_channels * config.up1.r ** 2, config.up1.in_channels, 3, leaky)
    conv("up2", config.up2.out_channels * config.up2.r ** 2, config.up2.in_channels, 3, 1.0)
    conv("final", 1, 1, config.final_kernel, 1.0)
    if config.head_init == "skip":
        params["up2.weight"].data *= config.up2_init_scale
        fw = params["final.weight"].data
        fw[...] = 0
        fw[0, 0, config.final_kernel // 2, config.final_kernel // 2] = 1
    for name, p in params.items():
        p.name = name
    return Model(config=config, params=params, blocks=blocks)


def mbconv_forward(block: MBConv, x: Tensor, negative_slope=0.2) -> Tensor:
    """Expand (if ratio > 1) -> depthwise -> SE -> linear projection (+ residual)."""
    if x.shape[1] != block.in_channels:
        raise DimensionError(f"block expects {block.in_channels} channels, input has shape {x.shape}")
    p = block.params
    h = x
    if block.expansion > 1:
        h = leaky_relu(conv2d(h, p["expand.weight"], p["expand.bias"]), negative_slope)
    pad = block.kernel // 2
    h = leaky_relu(depthwise_conv2d(h, p["dw.weight"], p["dw.bias"], stride=1, padding=pad), negative_slope)
    h = se_block(h, p["se_reduce.weight"], p["se_reduce.bias"], p["se_expand.weight"], p["se_expand.bias"], negative_slope)
    h = conv2d(h, p["project.weight"], p["project.bias"])
    if block.residual:
        h = add(h, x)
    return h


def model_forward(model: Model, lr: Tensor, return_stage_shapes=False):
    """Map ``(n, 1, h, w)`` low-resolution input to ``(n, 1, 16h, 16w)``."""
    cfg = model.config
    n, c, h, w = lr.shape
    if c != 1:
        raise DimensionError(f"model input must have 1 channel, got shape {lr.shape}")
    if h < 3 or w < 3:
        raise DimensionError(f"model input must be at least 3x3, got {h}x{w}")
    if lr.dtype != model.dtype:
        lr = Tensor(lr.data.astype(model.dtype), requires_grad=lr.requires_grad)
    p = model.params
    slope = cfg.leaky_slope

    x = leaky_relu(conv2d(lr, p["stem.weight"], p["stem.bias"], padding=1), slope)
    stage_shapes = []
    bi = 0
    for st in cfg.stages:
        for _ in range(st.num_layers):
            x = mbconv_forward(model.blocks[bi], x, slope)
            bi += 1
        if x.shape[2:] != (h, w):
            raise DimensionError(f"stage output {x.shape} changed the spatial size from {h}x{w}")
        stage_shapes.append(x.shape)

    x = conv2d(x, p["up1.weight"], p["up1.bias"], padding=1)
    x = leaky_relu(pixel_shuffle(x, cfg.up1.r), slope)
    x = conv2d(x, p["up2.weight"], p["up2.bias"], padding=1)
    x = pixel_shuffle(x, cfg.up2.r)
    H, W = h * cfg.scale_factor, w * cfg.scale_factor
    x = add(x, upsample(lr, H, W, cfg.skip_interpolation))
    out = conv2d(x, p["final.weight"], p["final.bias"], padding=cfg.final_kernel // 2)
    if return_stage_shapes:
        return out, stage_shapes
    return out


def count_params(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def num_blocks(model: Model) -> int:
    return len(model.blocks)
