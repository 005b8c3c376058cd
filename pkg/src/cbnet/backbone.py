"""Staged convolutional backbone: a stem plus L stride-2 stages.

Stage l halves the spatial dims of stage l-1, so stage l of an image of
side S produces a (stage_channels[l-1], S/2**l, S/2**l) map.  Parameters
are addressed by hierarchical names ("stem.conv.weight",
"stage3.bn1.gamma", ...) used for serialization, counting and sharing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (
    BatchNormLayer,
    BatchNormParams,
    ConfigError,
    Conv2dLayer,
    ConvParams,
    RELU,
    ADD,
    ShapeError,
    Tape,
    Tensor4,
)


@dataclass(frozen=True)
class BackboneSpec:
    num_stages: int = 5
    stem_channels: int = 8
    stage_channels: tuple = (8, 16, 32, 64, 128)
    image_size: tuple = (64, 64)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if self.num_stages < 2:
            raise ConfigError(f"need at least 2 stages, got {self.num_stages}")
        if len(self.stage_channels) != self.num_stages:
            raise ConfigError(
                f"stage_channels has {len(self.stage_channels)} entries for "
                f"{self.num_stages} stages")
        if any(c < 1 for c in self.stage_channels) or self.stem_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        h, w = self.image_size
        div = 2 ** self.num_stages
        if h % div or w % div:
            raise ConfigError(
                f"image size {h}x{w} not divisible by 2^{self.num_stages}")

    def stage_in_channels(self, l):
        return self.stem_channels if l == 1 else self.stage_channels[l - 2]

    def stage_out_channels(self, l):
        return self.stage_channels[l - 1]

    def stage_hw(self, l):
        h, w = self.image_size
        return h >> l, w >> l


TOY_SPEC = BackboneSpec(num_stages=3, stem_channels=4, stage_channels=(4, 8, 8),
                        image_size=(16, 16))


def _conv_named(prefix, p: ConvParams):
    yield f"{prefix}.weight", p.weight.data, p.weight.grad
    yield f"{prefix}.bias", p.bias, p.bias_grad


def _bn_named(prefix, p: BatchNormParams):
    yield f"{prefix}.gamma", p.gamma, p.gamma_grad
    yield f"{prefix}.beta", p.beta, p.beta_grad


def _bn_state(prefix, p: BatchNormParams):
    yield f"{prefix}.running_mean", p.running_mean
    yield f"{prefix}.running_var", p.running_var


class Stem:
    """3x3 stride-1 conv + batchnorm + relu; keeps the input spatial size."""

    def __init__(self, conv: ConvParams, bn: BatchNormParams):
        self.conv = Conv2dLayer(conv)
        self.bn = BatchNormLayer(bn)

    def run(self, tape: Tape, x: Tensor4) -> Tensor4:
        x = tape.run(self.conv, x)
        x = tape.run(self.bn, x)
        return tape.run(RELU, x)

    def learnables(self):
        yield from _conv_named("conv", self.conv.params)
        yield from _bn_named("bn", self.bn.params)

    def state(self):
        for name, value, _ in self.learnables():
            yield name, value
        yield from _bn_state("bn", self.bn.params)

    def bn_params(self):
        yield self.bn.params


class Stage:
    """One stride-2 downsample conv followed by a two-conv residual block."""

    def __init__(self, down, down_bn, conv1, bn1, conv2, bn2):
        self.down = Conv2dLayer(down)
        self.down_bn = BatchNormLayer(down_bn)
        self.conv1 = Conv2dLayer(conv1)
        self.bn1 = BatchNormLayer(bn1)
        self.conv2 = Conv2dLayer(conv2)
        self.bn2 = BatchNormLayer(bn2)

    def run(self, tape: Tape, x: Tensor4) -> Tensor4:
        x = tape.run(self.down, x)
        x = tape.run(self.down_bn, x)
        x = tape.run(RELU, x)
        h = tape.run(self.conv1, x)
        h = tape.run(self.bn1, h)
        h = tape.run(RELU, h)
        h = tape.run(self.conv2, h)
        h = tape.run(self.bn2, h)
        h = tape.run(ADD, h, x)
        return tape.run(RELU, h)

    def learnables(self):
        yield from _conv_named("down.conv", self.down.params)
        yield from _bn_named("down.bn", self.down_bn.params)
        yield from _conv_named("conv1", self.conv1.params)
        yield from _bn_named("bn1", self.bn1.params)
        yield from _conv_named("conv2", self.conv2.params)
        yield from _bn_named("bn2", self.bn2.params)

    def state(self):
        for name, value, _ in self.learnables():
            yield name, value
        yield from _bn_state("down.bn", self.down_bn.params)
        yield from _bn_state("bn1", self.bn1.params)
        yield from _bn_state("bn2", self.bn2.params)

    def bn_params(self):
        yield self.down_bn.params
        yield self.bn1.params
        yield self.bn2.params


class Backbone:
    """Stem plus stages first_stage..L.  A truncated instance (first_stage > 1)
    has no stem and is only usable inside a composite network that feeds it."""

    def __init__(self, spec: BackboneSpec, stem, stages, first_stage=1):
        self.spec = spec
        self.stem = stem
        self.stages = list(stages)
        self.first_stage = first_stage
        expected = spec.num_stages - first_stage + 1
        if len(self.stages) != expected:
            raise ConfigError(
                f"backbone needs {expected} stages from stage {first_stage}, "
                f"got {len(self.stages)}")
        if (stem is None) != (first_stage > 1):
            raise ConfigError("stem must be present exactly when first_stage == 1")

    def stage(self, l) -> Stage:
        return self.stages[l - self.first_stage]

    def stage_numbers(self):
        return range(self.first_stage, self.spec.num_stages + 1)

    def forward(self, image: Tensor4, tape: Tape):
        """Chain the stem and every stage; returns all stage outputs x^1..x^L."""
        if self.first_stage != 1:
            raise ConfigError("truncated backbone cannot run from an image")
        n, c, h, w = image.dims
        if c != self.spec.in_channels or (h, w) != self.spec.image_size:
            raise ShapeError(
                f"image dims {image.dims} do not match spec "
                f"({self.spec.in_channels}, {self.spec.image_size})")
        x = self.stem.run(tape, image)
        outs = []
        for l in self.stage_numbers():
            x = self.stage(l).run(tape, x)
            outs.append(x)
        return outs

    def learnables(self):
        if self.stem is not None:
            for name, value, grad in self.stem.learnables():
                yield f"stem.{name}", value, grad
        for l in self.stage_numbers():
            for name, value, grad in self.stage(l).learnables():
                yield f"stage{l}.{name}", value, grad

    def state(self):
        if self.stem is not None:
            for name, value in self.stem.state():
                yield f"stem.{name}", value
        for l in self.stage_numbers():
            for name, value in self.stage(l).state():
                yield f"stage{l}.{name}", value

    def bn_params(self):
        if self.stem is not None:
            yield from self.stem.bn_params()
        for l in self.stage_numbers():
            yield from self.stage(l).bn_params()


def _init_conv(rng, c_in, c_out, k, stride, pad):
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return ConvParams(weight, np.zeros(c_out), stride=stride, pad=pad)


def _init_bn(c):
    return BatchNormParams(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))


def _build_stage(rng, c_in, c_out):
    return Stage(
        _init_conv(rng, c_in, c_out, 3, stride=2, pad=1), _init_bn(c_out),
        _init_conv(rng, c_out, c_out, 3, stride=1, pad=1), _init_bn(c_out),
        _init_conv(rng, c_out, c_out, 3, stride=1, pad=1), _init_bn(c_out),
    )


def build_backbone(spec: BackboneSpec, seed: int, first_stage: int = 1) -> Backbone:
    """Deterministic build: conv weights are fan-scaled uniform draws from the
    seed, biases zero, batchnorm at gamma=1 beta=0 with running stats (0, 1)."""
    if first_stage < 1 or first_stage > spec.num_stages:
        raise ConfigError(f"first_stage {first_stage} out of range")
    rng = np.random.default_rng(seed)
    stem = None
    if first_stage == 1:
        stem = Stem(_init_conv(rng, spec.in_channels, spec.stem_channels, 3, 1, 1),
                    _init_bn(spec.stem_channels))
    stages = [_build_stage(rng, spec.stage_in_channels(l), spec.stage_out_channels(l))
              for l in range(first_stage, spec.num_stages + 1)]
    return Backbone(spec, stem, stages, first_stage)


def backbone_forward(b: Backbone, image: Tensor4):
    """Plain forward pass (fresh tape); returns the list of stage outputs."""
    return b.forward(image, Tape())
