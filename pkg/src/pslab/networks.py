"""Pyramid-supervised mask network, SPP baseline and CDC depth network.

Functions take a parameter dict plus inputs so they can be called on any
parameter set (gradient checks, checkpoints); the model classes bundle a
config with its parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core.ops import avgpool2d, cdc_conv2d, concat, conv2d, flatten, linear, relu, sigmoid
from .core.tensor import Tensor, TensorError
from .labels import decompose_depth_pyramid

MASK_SCALES = (8, 4, 2, 1)
DEPTH_SCALES = (32, 16)
BACKBONE_STRIDE = 8


class ConfigError(ValueError):
    pass


@dataclass
class MaskNetConfig:
    input_side: int = 64
    feature_channels: int = 64
    scales: tuple[int, ...] = MASK_SCALES
    stage_channels: tuple[int, int] = (16, 32)

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.input_side % BACKBONE_STRIDE:
            raise ConfigError(f"input_side must be divisible by {BACKBONE_STRIDE}")
        side = self.feature_side
        if not self.scales or any(s < 1 or side % s for s in self.scales):
            raise ConfigError(f"scales {self.scales} must divide the feature side {side}")
        if any(a <= b for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be strictly decreasing: {self.scales}")
        if self.feature_channels < 1:
            raise ConfigError("feature_channels must be positive")

    @property
    def feature_side(self) -> int:
        return self.input_side // BACKBONE_STRIDE

    @property
    def mask_dim(self) -> int:
        return sum(s * s for s in self.scales)


@dataclass
class DepthNetConfig:
    input_side: int = 64
    theta: float = 0.7
    scales: tuple[int, ...] = DEPTH_SCALES
    channels: tuple[int, int, int] = (32, 64, 64)
    head_channels: int = 32
    conv: str = "cdc"  # "vanilla" builds the plain-convolution twin

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.channels = tuple(int(c) for c in self.channels)
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if self.input_side % 2:
            raise ConfigError("input_side must be even")
        if len(self.channels) != 3:
            raise ConfigError("channels must list three block widths")
        if self.conv not in ("cdc", "vanilla"):
            raise ConfigError(f"conv must be 'cdc' or 'vanilla', got {self.conv!r}")
        side = self.output_side
        if not self.scales or any(s < 1 or side % s for s in self.scales):
            raise ConfigError(f"scales {self.scales} must divide the output side {side}")
        if any(a <= b for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be strictly decreasing: {self.scales}")

    @property
    def output_side(self) -> int:
        return self.input_side // 2


# -- parameter construction ---------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _add_conv(params: dict, rng, name: str, c_in: int, c_out: int, k: int, dtype) -> None:
    fan_in = c_in * k * k
    params[f"{name}.weight"] = _uniform(rng, (c_out, c_in, k, k), fan_in, dtype)
    params[f"{name}.bias"] = _uniform(rng, (c_out,), fan_in, dtype)


def _add_linear(params: dict, rng, name: str, d_in: int, d_out: int, dtype) -> None:
    params[f"{name}.weight"] = _uniform(rng, (d_out, d_in), d_in, dtype)
    params[f"{name}.bias"] = _uniform(rng, (d_out,), d_in, dtype)


def _name(params: dict) -> dict:
    for k, v in params.items():
        v.name = k
    return params


BACKBONE_LAYERS = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")


def init_backbone(params: dict, rng, cfg: MaskNetConfig, dtype) -> None:
    c1, c2 = cfg.stage_channels
    widths = [(3, c1), (c1, c1), (c1, c2), (c2, c2), (c2, cfg.feature_channels),
              (cfg.feature_channels, cfg.feature_channels)]
    for layer, (ci, co) in zip(BACKBONE_LAYERS, widths):
        _add_conv(params, rng, f"backbone.{layer}", ci, co, 3, dtype)


def init_mask_params(cfg: MaskNetConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    init_backbone(params, rng, cfg, dtype)
    for s in cfg.scales:
        _add_conv(params, rng, f"head{s}", cfg.feature_channels, 1, 1, dtype)
    _add_linear(params, rng, "classifier", cfg.mask_dim, 1, dtype)
    return _name(params)


def init_spp_params(cfg: MaskNetConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    init_backbone(params, rng, cfg, dtype)
    _add_linear(params, rng, "spp_classifier", cfg.feature_channels * cfg.mask_dim, 1, dtype)
    return _name(params)


def init_depth_params(cfg: DepthNetConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c1, c2, c3 = cfg.channels
    for name, ci, co in (("block1", 3, c1), ("block2", c1, c2), ("block3", c2, c3),
                         ("head1", c3, cfg.head_channels), ("head2", cfg.head_channels, 1)):
        _add_conv(params, rng, name, ci, co, 3, dtype)
    return _name(params)


# -- forward passes ------------------------------------------------------------

def _check_input(x: Tensor, side: int) -> None:
    if x.ndim not in (3, 4) or x.shape[-3:] != (3, side, side):
        raise TensorError(f"expected input 3 x {side} x {side} (optionally batched), got {x.shape}")


def backbone_forward(params: dict, x: Tensor, cfg: MaskNetConfig) -> Tensor:
    """Six 3x3 convolutions with ReLU; stride 2 at layers 1, 3, 5 (S -> S/8)."""
    _check_input(x, cfg.input_side)
    h = x
    for i, layer in enumerate(BACKBONE_LAYERS):
        stride = 2 if i % 2 == 0 else 1
        h = relu(conv2d(h, params[f"backbone.{layer}.weight"], params[f"backbone.{layer}.bias"], stride, 1))
    return h


def pyramid_mask_head(params: dict, features: Tensor, scales: Sequence[int]) -> dict[int, Tensor]:
    """Per scale: average pool to s x s, unshared 1x1 conv to one channel, sigmoid.

    Returns scale -> mask of shape ``s x s`` (or ``N x s x s`` when batched).
    """
    side = features.shape[-1]
    batched = features.ndim == 4
    masks = {}
    for s in scales:
        if side % s:
            raise TensorError(f"feature side {side} not divisible by scale {s}")
        pooled = avgpool2d(features, side // s)
        logits = conv2d(pooled, params[f"head{s}.weight"], params[f"head{s}.bias"])
        m = sigmoid(logits)
        masks[s] = m.reshape((m.shape[0], s, s) if batched else (s, s))
    return masks


def classify(params: dict, masks: dict[int, Tensor], scales: Sequence[int] | None = None) -> Tensor:
    """Flatten and concatenate the masks, then one linear unit and a sigmoid."""
    if scales is not None and tuple(masks) != tuple(scales):
        raise TensorError(f"mask scales {tuple(masks)} do not match config scales {tuple(scales)}")
    parts = list(masks.values())
    batched = parts[0].ndim == 3
    vec = concat([flatten(m, batched=batched) for m in parts], axis=-1)
    w = params["classifier.weight"]
    if vec.shape[-1] != w.shape[1]:
        raise TensorError(f"classifier expects {w.shape[1]} inputs, got {vec.shape[-1]}")
    logit = linear(vec, w, params["classifier.bias"])
    score = sigmoid(logit)
    return score.reshape((score.shape[0],)) if batched else score.reshape(())


def spp_head(params: dict, features: Tensor, scales: Sequence[int] = MASK_SCALES) -> Tensor:
    """Pool raw features to every scale, concatenate (C * sum s^2), linear + sigmoid."""
    side = features.shape[-1]
    batched = features.ndim == 4
    parts = [flatten(avgpool2d(features, side // s), batched=batched) for s in scales]
    vec = concat(parts, axis=-1)
    w = params["spp_classifier.weight"]
    if vec.shape[-1] != w.shape[1]:
        raise TensorError(f"SPP classifier expects {w.shape[1]} inputs, got {vec.shape[-1]}")
    score = sigmoid(linear(vec, w, params["spp_classifier.bias"]))
    return score.reshape((score.shape[0],)) if batched else score.reshape(())


def depth_fcn_forward(params: dict, x: Tensor, cfg: DepthNetConfig) -> Tensor:
    """CDC blocks (the first with stride 2), two CDC head layers, sigmoid.

    Output is ``S/2 x S/2`` (``N x S/2 x S/2`` when batched).
    """
    _check_input(x, cfg.input_side)
    if cfg.conv == "cdc":
        def conv(h, name, stride=1):
            return cdc_conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride, 1, cfg.theta)
    else:
        def conv(h, name, stride=1):
            return conv2d(h, params[f"{name}.weight"], params[f"{name}.bias"], stride, 1)
    h = relu(conv(x, "block1", stride=2))
    h = relu(conv(h, "block2"))
    h = relu(conv(h, "block3"))
    h = relu(conv(h, "head1"))
    d = sigmoid(conv(h, "head2"))
    side = cfg.output_side
    return d.reshape((d.shape[0], side, side) if d.ndim == 4 else (side, side))


def depth_pyramid_tensors(depth: Tensor, scales: Sequence[int]) -> dict[int, Tensor]:
    """Block-mean downsampling of a predicted depth map, differentiable."""
    side = depth.shape[-1]
    batched = depth.ndim == 3
    x = depth.reshape((depth.shape[0], 1, side, side) if batched else (1, side, side))
    out = {}
    for s in scales:
        if side % s:
            raise TensorError(f"depth side {side} not divisible by scale {s}")
        p = avgpool2d(x, side // s)
        out[s] = p.reshape((p.shape[0], s, s) if batched else (s, s))
    return out


def depth_score(depth, scales: Sequence[int] = DEPTH_SCALES) -> float | np.ndarray:
    """Mean over scales of each downsampled map's mean.

    With block-mean downsampling every scale has the same mean, so this
    equals the mean of the full-resolution map.
    """
    d = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    pyr = decompose_depth_pyramid(d, scales)
    per_scale = [m.mean(axis=(-2, -1)) for m in pyr.maps]
    out = np.mean(per_scale, axis=0)
    return float(out) if np.ndim(out) == 0 else out


# -- model wrappers ------------------------------------------------------------

@dataclass
class MaskNet:
    config: MaskNetConfig = field(default_factory=MaskNetConfig)
    seed: int = 0
    dtype: type = np.float64
    params: dict = None
    kind = "mask"

    def __post_init__(self):
        if self.params is None:
            self.params = init_mask_params(self.config, self.seed, self.dtype)

    def forward(self, x: Tensor) -> tuple[dict[int, Tensor], Tensor]:
        feats = backbone_forward(self.params, x, self.config)
        masks = pyramid_mask_head(self.params, feats, self.config.scales)
        return masks, classify(self.params, masks, self.config.scales)

    def score(self, x: Tensor) -> Tensor:
        return self.forward(x)[1]


@dataclass
class SppNet:
    config: MaskNetConfig = field(default_factory=MaskNetConfig)
    seed: int = 0
    dtype: type = np.float64
    params: dict = None
    kind = "spp"

    def __post_init__(self):
        if self.params is None:
            self.params = init_spp_params(self.config, self.seed, self.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return spp_head(self.params, backbone_forward(self.params, x, self.config), self.config.scales)

    def score(self, x: Tensor) -> Tensor:
        return self.forward(x)


@dataclass
class DepthNet:
    config: DepthNetConfig = field(default_factory=DepthNetConfig)
    seed: int = 0
    dtype: type = np.float64
    params: dict = None
    kind = "depth"

    def __post_init__(self):
        if self.params is None:
            self.params = init_depth_params(self.config, self.seed, self.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return depth_fcn_forward(self.params, x, self.config)

    def score(self, x: Tensor) -> Tensor:
        return Tensor(depth_score(self.forward(x).data, self.config.scales))


def config_dict(cfg) -> dict:
    return asdict(cfg)
