"""Generators, discriminators and the segmentor.

All image-valued networks consume and produce NCHW tensors in [-1, 1].
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .diffcomp import Tensor, concat, upsample_bilinear
from .diffcomp.module import (
    Activation,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    Module,
    Sequential,
)


class ArchitectureError(ValueError):
    pass


# -- configs ------------------------------------------------------------------

@dataclass
class GeneratorResNetConfig:
    input_channels: int = 3
    base_width: int = 16
    n_residual_blocks: int = 3
    n_downsampling: int = 2

    @classmethod
    def full_scale(cls):
        return cls(base_width=64, n_residual_blocks=9)


@dataclass
class DiscriminatorConfig:
    input_channels: int = 3
    widths: Tuple[int, ...] = (16, 32, 64)
    strides: Tuple[int, ...] = (2, 2, 1, 1)
    kernel: int = 4
    padding: int = 1
    slope: float = 0.2

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if len(self.strides) != len(self.widths) + 1:
            raise ArchitectureError("need one stride per hidden layer plus one for the output layer")

    @classmethod
    def full_scale(cls):
        return cls(widths=(64, 128, 256, 512), strides=(2, 2, 2, 1, 1))


@dataclass
class SegmentorConfig:
    input_channels: int = 3
    stem_width: int = 16
    stem_stride: int = 1
    stage_widths: Tuple[int, ...] = (32, 48, 64)
    low_level_stage: int = 0
    aspp_rates: Tuple[int, ...] = (1, 2, 4)
    aspp_width: int = 32
    low_level_width: int = 16
    decoder_width: int = 32
    num_classes: int = 2

    def __post_init__(self):
        self.stage_widths = tuple(self.stage_widths)
        self.aspp_rates = tuple(self.aspp_rates)

    @property
    def output_stride(self) -> int:
        return self.stem_stride * 2 ** len(self.stage_widths)

    @property
    def low_level_stride(self) -> int:
        return self.stem_stride * 2 ** (self.low_level_stage + 1)

    @classmethod
    def full_scale_geometry(cls, width_scale: float = 1.0):
        """Stride layout of the 208x208 reference: deepest 13x13, low-level 52x52."""
        w = lambda c: max(4, int(round(c * width_scale)))
        return cls(stem_width=w(64), stem_stride=2, stage_widths=(w(256), w(512), w(1024)),
                   aspp_rates=(1, 6, 12), aspp_width=w(256), low_level_width=w(48),
                   decoder_width=w(256))


@dataclass
class GeneratorBackboneConfig:
    aspp_rates: Tuple[int, ...] = (1, 2, 4)
    aspp_width: int = 32
    low_level_width: int = 16
    decoder_widths: Tuple[int, ...] = (32, 16)

    def __post_init__(self):
        self.aspp_rates = tuple(self.aspp_rates)
        self.decoder_widths = tuple(self.decoder_widths)


# -- receptive field ------------------------------------------------------------

def receptive_field(config: DiscriminatorConfig) -> int:
    """Receptive field of one patch-map unit: r += (k-1)*jump; jump *= stride."""
    r, jump = 1, 1
    for s in config.strides:
        r += (config.kernel - 1) * jump
        jump *= s
    return r


def probe_receptive_field(config: DiscriminatorConfig, size: Optional[int] = None, seed: int = 0) -> int:
    """Measure the receptive field by brute force.

    Builds the discriminator's conv stack with norms and nonlinearities removed,
    perturbs one input pixel at a time and records which pixels move the
    centre output unit. Returns the side length of that support.
    """
    rf = receptive_field(config)
    size = size or 2 * rf + 8
    rng = np.random.default_rng(seed)
    convs = []
    in_ch = config.input_channels
    for width, stride in zip(list(config.widths) + [1], config.strides):
        convs.append((rng.uniform(0.5, 1.5, size=(width, in_ch, config.kernel, config.kernel)), stride))
        in_ch = width

    from .diffcomp.kernels import _im2col_numpy

    def linear_net(img):
        x = img
        for w, s in convs:
            cols = _im2col_numpy(x, config.kernel, config.kernel, s, config.padding, 1)
            ho = (x.shape[2] + 2 * config.padding - config.kernel) // s + 1
            wo = (x.shape[3] + 2 * config.padding - config.kernel) // s + 1
            x = np.matmul(w.reshape(w.shape[0], -1), cols).reshape(1, w.shape[0], ho, wo)
        return x

    base = np.zeros((1, config.input_channels, size, size))
    out0 = linear_net(base)
    cy, cx = out0.shape[2] // 2, out0.shape[3] // 2
    rows, cols_hit = set(), set()
    for yy in range(size):
        for xx in range(size):
            img = base.copy()
            img[0, 0, yy, xx] = 1.0
            if linear_net(img)[0, 0, cy, cx] != 0.0:
                rows.add(yy)
                cols_hit.add(xx)
    if not rows:
        return 0
    return max(max(rows) - min(rows), max(cols_hit) - min(cols_hit)) + 1


def discriminator_output_size(config: DiscriminatorConfig, size: int) -> int:
    for s in config.strides:
        size = (size + 2 * config.padding - config.kernel) // s + 1
    return size


# -- building blocks ------------------------------------------------------------

def _conv_norm_act(in_ch, out_ch, k, stride, padding, rng, norm="instance", act="relu", dilation=1):
    layers = [Conv2d(in_ch, out_ch, k, stride, padding, dilation, bias=norm is None, rng=rng)]
    if norm == "instance":
        layers.append(InstanceNorm())
    elif norm == "batch":
        layers.append(BatchNorm(out_ch))
    if act is not None:
        layers.append(Activation(act))
    return Sequential(*layers)


class ResidualBlock(Module):
    def __init__(self, ch, rng):
        super().__init__()
        self.body = Sequential(
            _conv_norm_act(ch, ch, 3, 1, 1, rng),
            _conv_norm_act(ch, ch, 3, 1, 1, rng, act=None),
        )

    def forward(self, x):
        return x + self.body(x)


class ResNetGenerator(Module):
    """c7s1-w, stride-2 downsampling, residual blocks, stride-1/2 upsampling, c7s1-3, tanh."""

    def __init__(self, config: GeneratorResNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        w = config.base_width
        layers = [_conv_norm_act(config.input_channels, w, 7, 1, 3, rng)]
        ch = w
        for _ in range(config.n_downsampling):
            layers.append(_conv_norm_act(ch, ch * 2, 3, 2, 1, rng))
            ch *= 2
        for _ in range(config.n_residual_blocks):
            layers.append(ResidualBlock(ch, rng))
        for _ in range(config.n_downsampling):
            layers.append(Sequential(ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False, rng=rng),
                                     InstanceNorm(), Activation("relu")))
            ch //= 2
        layers.append(Conv2d(ch, 3, 7, 1, 3, rng=rng))
        layers.append(Activation("tanh"))
        self.net = Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        factor = 2 ** self.config.n_downsampling
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ArchitectureError(f"spatial size {x.shape[2:]} not divisible by {factor}")
        return self.net(x)


def resnet_generator_param_count(config: GeneratorResNetConfig) -> int:
    """Closed-form parameter count of :class:`ResNetGenerator`."""
    w, c = config.base_width, config.input_channels
    total = 7 * 7 * c * w
    ch = w
    for _ in range(config.n_downsampling):
        total += 3 * 3 * ch * 2 * ch
        ch *= 2
    total += config.n_residual_blocks * 2 * (3 * 3 * ch * ch)
    for _ in range(config.n_downsampling):
        total += 4 * 4 * ch * (ch // 2)
        ch //= 2
    total += 7 * 7 * ch * 3 + 3
    return total


class PatchDiscriminator(Module):
    """Fully convolutional patch classifier; raw (unsquashed) scores."""

    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        k, p = config.kernel, config.padding
        layers = []
        ch = config.input_channels
        for i, (width, stride) in enumerate(zip(config.widths, config.strides)):
            layers.append(_conv_norm_act(ch, width, k, stride, p, rng,
                                         norm=None if i == 0 else "instance", act="leaky_relu"))
            ch = width
        layers.append(Conv2d(ch, 1, k, config.strides[-1], p, rng=rng))
        self.net = Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class ASPP(Module):
    """Parallel dilated branches plus an image-pooling branch, fused by 1x1 conv."""

    def __init__(self, in_ch, width, rates, rng, norm):
        super().__init__()
        branches = []
        for r in rates:
            if r == 1:
                branches.append(_conv_norm_act(in_ch, width, 1, 1, 0, rng, norm=norm))
            else:
                branches.append(_conv_norm_act(in_ch, width, 3, 1, r, rng, norm=norm, dilation=r))
        self.branches = Sequential(*branches)
        # image-level branch: no norm, a 1x1 spatial map has no instance statistics
        self.pool_conv = Conv2d(in_ch, width, 1, rng=rng)
        self.project = _conv_norm_act(width * (len(rates) + 1), width, 1, 1, 0, rng, norm=norm)

    def forward(self, x: Tensor) -> Tensor:
        outs = [b(x) for b in self.branches]
        pooled = self.pool_conv(x.mean(axis=(2, 3), keepdims=True)).relu()
        outs.append(pooled.expand(outs[0].shape))
        return self.project(concat(outs, axis=1))


class Encoder(Module):
    """Stem plus stride-2 stages; returns (low-level features, deepest features)."""

    def __init__(self, config: SegmentorConfig, rng):
        super().__init__()
        self.config = config
        self.stem = _conv_norm_act(config.input_channels, config.stem_width, 3, config.stem_stride, 1,
                                   rng, norm="batch")
        stages = []
        ch = config.stem_width
        for width in config.stage_widths:
            stages.append(Sequential(
                _conv_norm_act(ch, width, 3, 2, 1, rng, norm="batch"),
                _conv_norm_act(width, width, 3, 1, 1, rng, norm="batch"),
            ))
            ch = width
        self.stages = Sequential(*stages)

    def forward(self, x: Tensor):
        x = self.stem(x)
        low = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == self.config.low_level_stage:
                low = x
        return low, x


class Segmentor(Module):
    """DeepLabV3+-style encoder / ASPP / decoder producing 2-class logits."""

    def __init__(self, config: SegmentorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.encoder = Encoder(c, rng)
        self.aspp = ASPP(c.stage_widths[-1], c.aspp_width, c.aspp_rates, rng, norm="batch")
        self.low_proj = _conv_norm_act(c.stage_widths[c.low_level_stage], c.low_level_width, 1, 1, 0,
                                       rng, norm="batch")
        self.decoder = _conv_norm_act(c.aspp_width + c.low_level_width, c.decoder_width, 3, 1, 1,
                                      rng, norm="batch")
        self.classifier = Conv2d(c.decoder_width, c.num_classes, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        stride = self.config.output_stride
        if h % stride or w % stride:
            raise ArchitectureError(f"spatial size {(h, w)} not divisible by output stride {stride}")
        low, deep = self.encoder(x)
        feats = self.aspp(deep)
        feats = upsample_bilinear(feats, low.shape[2:])
        feats = concat([feats, self.low_proj(low)], axis=1)
        logits = self.classifier(self.decoder(feats))
        return upsample_bilinear(logits, (h, w))

    def predict(self, x: Tensor) -> np.ndarray:
        """Hard masks (N, H, W) via channel argmax."""
        return np.argmax(self.forward(x).data, axis=1).astype(np.uint8)


class BackboneGenerator(Module):
    """Generator on top of a frozen, trained encoder: ASPP + low-level concat decoder."""

    def __init__(self, config: GeneratorBackboneConfig, encoder: Encoder, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        enc_cfg = encoder.config
        self.backbone = copy.deepcopy(encoder).freeze().eval()
        self.aspp = ASPP(enc_cfg.stage_widths[-1], config.aspp_width, config.aspp_rates, rng, norm="instance")
        self.low_proj = _conv_norm_act(enc_cfg.stage_widths[enc_cfg.low_level_stage], config.low_level_width,
                                       1, 1, 0, rng)
        ch = config.aspp_width + config.low_level_width
        d0, d1 = config.decoder_widths
        up_steps = int(np.log2(enc_cfg.low_level_stride))
        layers = [_conv_norm_act(ch, d0, 3, 1, 1, rng)]
        ch = d0
        for _ in range(up_steps):
            layers.append(Sequential(ConvTranspose2d(ch, d1, 4, 2, 1, bias=False, rng=rng),
                                     InstanceNorm(), Activation("relu")))
            ch = d1
        layers.append(Conv2d(ch, 3, 7, 1, 3, rng=rng))
        layers.append(Activation("tanh"))
        self.decoder = Sequential(*layers)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, x: Tensor) -> Tensor:
        stride = self.backbone.config.output_stride
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ArchitectureError(f"spatial size {x.shape[2:]} not divisible by {stride}")
        low, deep = self.backbone(x)
        feats = self.aspp(deep)
        feats = upsample_bilinear(feats, low.shape[2:])
        feats = concat([feats, self.low_proj(low)], axis=1)
        return self.decoder(feats)


# -- builders ---------------------------------------------------------------------

def build_generator_F(config: Optional[GeneratorResNetConfig] = None, seed: int = 0) -> ResNetGenerator:
    return ResNetGenerator(config or GeneratorResNetConfig(), seed=seed)


def build_generator_G(config: Optional[GeneratorBackboneConfig], trained_segmentor: Segmentor,
                      seed: int = 0) -> BackboneGenerator:
    if trained_segmentor is None or not isinstance(trained_segmentor, Segmentor):
        raise ArchitectureError("a trained Segmentor is required to build the backbone generator")
    return BackboneGenerator(config or GeneratorBackboneConfig(), trained_segmentor.encoder, seed=seed)


def build_discriminator(config: Optional[DiscriminatorConfig] = None, seed: int = 0) -> PatchDiscriminator:
    return PatchDiscriminator(config or DiscriminatorConfig(), seed=seed)


def build_segmentor(config: Optional[SegmentorConfig] = None, seed: int = 0) -> Segmentor:
    return Segmentor(config or SegmentorConfig(), seed=seed)


def config_to_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def param_checksum(module: Module) -> str:
    """SHA-256 over all parameters and buffers, in traversal order."""
    import hashlib

    h = hashlib.sha256()
    for name, arr in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
