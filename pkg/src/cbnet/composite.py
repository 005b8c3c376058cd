"""Composite backbone assembly.

K identically-specced backbones run left to right; each stage of backbone
k >= 2 receives, besides its own previous stage, features from the
previous backbone routed through learned composite connections (1x1 conv
+ batchnorm + nearest resize).  Which stages are linked is set by the
composite style:

    ahlc  stage l gets the previous backbone's stage l        (one g per l)
    slc   stage l gets the previous backbone's stage l-1, added directly
    allc  stage l gets the previous backbone's stage l+1      (absent at l=L)
    dhlc  stage l gets every previous-backbone stage i >= l   (one g per (l, i))

Only the last backbone's stage outputs (stages 2..L) are exposed as the
feature pyramid.  Weight sharing points every backbone at one parameter
store while composite connections stay per-connection; the accelerated
variant (two backbones) drops the assistant's stem and first two stages
and feeds its stage 3 from the lead's stage-2 output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .backbone import (
    Backbone,
    BackboneSpec,
    _bn_named,
    _bn_state,
    _conv_named,
    _init_bn,
    _init_conv,
    build_backbone,
)
from .engine import (
    ADD,
    BatchNormLayer,
    ConfigError,
    Conv2dLayer,
    ShapeError,
    Tape,
    Tensor4,
    UpsampleLayer,
)


class CompositeStyle(enum.Enum):
    AHLC = "ahlc"
    SLC = "slc"
    ALLC = "allc"
    DHLC = "dhlc"

    @classmethod
    def parse(cls, text):
        try:
            return cls(text.lower())
        except ValueError:
            raise ConfigError(f"unknown composite style {text!r}") from None


@dataclass(frozen=True)
class CBNetConfig:
    num_backbones: int = 2
    style: CompositeStyle = CompositeStyle.AHLC
    share_weights: bool = False
    accelerated: bool = False
    spec: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if self.num_backbones < 1:
            raise ConfigError(f"need at least one backbone, got {self.num_backbones}")
        if self.accelerated:
            if self.num_backbones != 2:
                raise ConfigError("accelerated variant requires exactly 2 backbones")
            if self.spec.num_stages < 3:
                raise ConfigError("accelerated variant needs at least 3 stages")


class CompositeConnection:
    """g(.): 1x1 channel-reducing conv + batchnorm + nearest resize to the
    spatial size of the tensor the result is added to."""

    def __init__(self, conv, bn, target_hw):
        if conv.kernel != 1:
            raise ConfigError("composite connection conv must be 1x1")
        if bn.channels != conv.c_out:
            raise ShapeError(
                f"composite bn channels {bn.channels} != conv c_out {conv.c_out}")
        self.conv = Conv2dLayer(conv)
        self.bn = BatchNormLayer(bn)
        self.upsample = UpsampleLayer(target_hw)
        self.target_hw = tuple(target_hw)

    def run(self, tape, source):
        x = tape.run(self.conv, source)
        x = tape.run(self.bn, x)
        return tape.run(self.upsample, x)

    def learnables(self):
        yield from _conv_named("conv", self.conv.params)
        yield from _bn_named("bn", self.bn.params)

    def state(self):
        for name, value, _ in self.learnables():
            yield name, value
        yield from _bn_state("bn", self.bn.params)

    def bn_params(self):
        yield self.bn.params


def composite_apply(g: CompositeConnection, source: Tensor4) -> Tensor4:
    """Functional form of one composite connection (fresh tape)."""
    return g.run(Tape(), source)


@dataclass
class FeaturePyramid:
    """Lead backbone stage outputs for stages 2..L."""

    levels: list
    first_level: int = 2

    def level(self, l) -> Tensor4:
        return self.levels[l - self.first_level]

    @property
    def last(self) -> Tensor4:
        return self.levels[-1]


def _min_receiving_stage(cfg):
    return 3 if cfg.accelerated else 2


def connection_keys(cfg: CBNetConfig):
    """Learned composite-connection keys in build order: (k, l) for ahlc/allc,
    (k, l, i) for dhlc, nothing for slc (it adds directly)."""
    L = cfg.spec.num_stages
    lmin = _min_receiving_stage(cfg)
    keys = []
    for k in range(2, cfg.num_backbones + 1):
        if cfg.style is CompositeStyle.AHLC:
            keys += [(k, l) for l in range(lmin, L + 1)]
        elif cfg.style is CompositeStyle.ALLC:
            keys += [(k, l) for l in range(lmin, L)]
        elif cfg.style is CompositeStyle.DHLC:
            keys += [(k, l, i) for l in range(lmin, L + 1) for i in range(l, L + 1)]
    return keys


def direct_add_keys(cfg: CBNetConfig):
    """(k, l) pairs where slc adds the previous backbone's stage l-1 directly."""
    if cfg.style is not CompositeStyle.SLC:
        return []
    L = cfg.spec.num_stages
    lmin = _min_receiving_stage(cfg)
    source_min = 3 if cfg.accelerated else 1
    return [(k, l) for k in range(2, cfg.num_backbones + 1)
            for l in range(lmin, L + 1) if l - 1 >= source_min]


def _source_stage(cfg, key):
    if cfg.style is CompositeStyle.AHLC:
        return key[1]
    if cfg.style is CompositeStyle.ALLC:
        return key[1] + 1
    return key[2]  # dhlc


def _connection_io(spec, l, i):
    # stage-i output feeds the connection; its result is added to x^{l-1}
    c_src = spec.stage_out_channels(i)
    c_dst = spec.stage_out_channels(l - 1)
    return c_src, c_dst, spec.stage_hw(l - 1)


class CBNet:
    def __init__(self, config: CBNetConfig, backbones, connections):
        self.config = config
        self.backbones = list(backbones)
        self.connections = dict(connections)

    @property
    def lead(self) -> Backbone:
        return self.backbones[-1]

    # -- forward ------------------------------------------------------------

    def forward(self, image: Tensor4, tape: Tape) -> FeaturePyramid:
        if self.config.accelerated:
            outs = self._forward_accelerated(image, tape)
        else:
            outs = self.backbones[0].forward(image, tape)
            for k in range(2, self.config.num_backbones + 1):
                outs = self._forward_composed(k, image, outs, tape)
        return FeaturePyramid(outs[1:])

    def _composite_terms(self, tape, k, l, prev):
        """Previous-backbone contributions to the stage-l input of backbone k,
        in the fixed left-to-right order (prev[j] is x_{k-1}^{j+1})."""
        style = self.config.style
        L = self.config.spec.num_stages
        if style is CompositeStyle.AHLC:
            yield self.connections[(k, l)].run(tape, prev[l - 1])
        elif style is CompositeStyle.SLC:
            yield prev[l - 2]
        elif style is CompositeStyle.ALLC:
            if l < L:
                yield self.connections[(k, l)].run(tape, prev[l])
        else:  # dhlc
            for i in range(l, L + 1):
                yield self.connections[(k, l, i)].run(tape, prev[i - 1])

    def _forward_composed(self, k, image, prev, tape):
        bb = self.backbones[k - 1]
        x = bb.stem.run(tape, image)
        outs = [bb.stage(1).run(tape, x)]
        for l in range(2, self.config.spec.num_stages + 1):
            inp = outs[-1]
            for term in self._composite_terms(tape, k, l, prev):
                inp = tape.run(ADD, inp, term)
            outs.append(bb.stage(l).run(tape, inp))
        return outs

    def _forward_accelerated(self, image, tape):
        L = self.config.spec.num_stages
        asst, lead = self.backbones
        x = lead.stem.run(tape, image)
        louts = [lead.stage(1).run(tape, x)]
        louts.append(lead.stage(2).run(tape, louts[0]))
        a = louts[1]  # assistant stage 3 consumes the lead's stage-2 output
        aouts = {}
        for l in range(3, L + 1):
            a = asst.stage(l).run(tape, a)
            aouts[l] = a
        style = self.config.style
        for l in range(3, L + 1):
            inp = louts[-1]
            if style is CompositeStyle.AHLC:
                inp = tape.run(ADD, inp, self.connections[(2, l)].run(tape, aouts[l]))
            elif style is CompositeStyle.SLC:
                if l - 1 >= 3:
                    inp = tape.run(ADD, inp, aouts[l - 1])
            elif style is CompositeStyle.ALLC:
                if l < L:
                    inp = tape.run(ADD, inp, self.connections[(2, l)].run(tape, aouts[l + 1]))
            else:
                for i in range(l, L + 1):
                    inp = tape.run(ADD, inp, self.connections[(2, l, i)].run(tape, aouts[i]))
            louts.append(lead.stage(l).run(tape, inp))
        return louts

    # -- parameter plumbing ---------------------------------------------------

    def _connection_prefix(self, key):
        return "g." + ".".join(str(part) for part in key)

    def learnables(self):
        """Every (name, value, grad) triple; under sharing the same arrays
        appear once per backbone namespace."""
        for k, bb in enumerate(self.backbones, 1):
            for name, value, grad in bb.learnables():
                yield f"b{k}.{name}", value, grad
        for key, conn in self.connections.items():
            prefix = self._connection_prefix(key)
            for name, value, grad in conn.learnables():
                yield f"{prefix}.{name}", value, grad

    def unique_learnables(self):
        seen = set()
        for name, value, grad in self.learnables():
            if id(value) in seen:
                continue
            seen.add(id(value))
            yield name, value, grad

    def state(self):
        for k, bb in enumerate(self.backbones, 1):
            for name, value in bb.state():
                yield f"b{k}.{name}", value
        for key, conn in self.connections.items():
            prefix = self._connection_prefix(key)
            for name, value in conn.state():
                yield f"{prefix}.{name}", value

    def bn_params(self):
        seen = set()
        for bb in self.backbones:
            for p in bb.bn_params():
                if id(p) not in seen:
                    seen.add(id(p))
                    yield p
        for conn in self.connections.values():
            yield from conn.bn_params()


def build_cbnet(cfg: CBNetConfig, seed: int) -> CBNet:
    """Assemble K backbones plus the style's composite connections.

    Weight sharing builds one backbone and points every slot at it (the
    accelerated assistant shares the lead's stage objects); connections get
    independent parameters either way.
    """
    rng = np.random.default_rng(seed)
    bseeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=cfg.num_backbones)]
    spec = cfg.spec
    if cfg.accelerated:
        if cfg.share_weights:
            lead = build_backbone(spec, bseeds[-1])
            asst = Backbone(spec, None, lead.stages[2:], first_stage=3)
        else:
            asst = build_backbone(spec, bseeds[0], first_stage=3)
            lead = build_backbone(spec, bseeds[-1])
        backbones = [asst, lead]
    elif cfg.share_weights:
        backbones = [build_backbone(spec, bseeds[0])] * cfg.num_backbones
    else:
        backbones = [build_backbone(spec, s) for s in bseeds]

    connections = {}
    for key in connection_keys(cfg):
        l = key[1]
        c_src, c_dst, target_hw = _connection_io(spec, l, _source_stage(cfg, key))
        conv = _init_conv(rng, c_src, c_dst, 1, stride=1, pad=0)
        connections[key] = CompositeConnection(conv, _init_bn(c_dst), target_hw)

    if cfg.style is CompositeStyle.SLC:
        # direct addition: the previous backbone's stage l-1 output must match
        # the receiving stage input; checked on the built objects
        for k, l in direct_add_keys(cfg):
            src = backbones[k - 2].stage(l - 1).conv2.params.c_out
            dst = backbones[k - 1].stage(l - 1).conv2.params.c_out
            if src != dst:
                raise ShapeError(f"slc add at (k={k}, l={l}): {src} vs {dst} channels")
    return CBNet(cfg, backbones, connections)


def cbnet_forward(net: CBNet, image: Tensor4) -> FeaturePyramid:
    """Forward pass on a fresh tape; returns the lead feature pyramid."""
    return net.forward(image, Tape())


def set_mode(net: CBNet, mode: str):
    """Flip every batchnorm in the model between training and inference."""
    if mode not in ("training", "inference"):
        raise ConfigError(f"unknown mode {mode!r}")
    for p in net.bn_params():
        p.mode = mode


def force_zero_composites(net: CBNet):
    """Make every composite contribution exactly zero (test/diagnostic mode).

    Learned connections get zero conv weights, zero beta and fresh (0, 1)
    inference stats.  slc has no learned connections, so its assistant
    backbones are zeroed instead, which drives their stage outputs to 0.
    """
    for conn in net.connections.values():
        conn.conv.params.weight.data[:] = 0.0
        conn.conv.params.bias[:] = 0.0
        bn = conn.bn.params
        bn.beta[:] = 0.0
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
        bn.mode = "inference"
    if net.config.style is CompositeStyle.SLC and net.config.num_backbones > 1:
        if net.config.share_weights:
            raise ConfigError("cannot zero slc assistants under weight sharing")
        for bb in net.backbones[:-1]:
            for name, value, _ in bb.learnables():
                if name.endswith((".weight", ".bias", ".beta")):
                    value[:] = 0.0
            for p in bb.bn_params():
                p.running_mean[:] = 0.0
                p.running_var[:] = 1.0
                p.mode = "inference"


# -- accounting ----------------------------------------------------------------


def param_count(model) -> int:
    """Learned parameters in unique storage (shared arrays counted once).

    Works for anything exposing learnables(): a CBNet, a Backbone, a Head.
    """
    seen, total = set(), 0
    for _, value, _ in model.learnables():
        if id(value) not in seen:
            seen.add(id(value))
            total += value.size
    return total


def _conv_flops(n, c_in, k, c_out, oh, ow):
    return 2 * c_in * k * k * c_out * oh * ow * n


def _stage_flops(spec, l, n):
    c_in = spec.stage_in_channels(l)
    c = spec.stage_out_channels(l)
    oh, ow = spec.stage_hw(l)
    elems = n * c * oh * ow
    total = _conv_flops(n, c_in, 3, c, oh, ow) + 2 * elems          # down + bn + relu
    total += 2 * (_conv_flops(n, c, 3, c, oh, ow) + elems)          # conv1/bn1, conv2/bn2
    total += 3 * elems                                              # relu, residual add, relu
    return total


def _stem_flops(spec, n):
    h, w = spec.image_size
    elems = n * spec.stem_channels * h * w
    return _conv_flops(n, spec.in_channels, 3, spec.stem_channels, h, w) + 2 * elems


def flop_count(net: CBNet, input_dims) -> int:
    """Multiply-add accounting of one forward pass at the given input dims.

    conv counts 2*c_in*k^2*c_out per output element; batchnorm, relu and
    add count one per element; upsample counts its output elements.
    """
    n = int(input_dims[0])
    spec = net.config.spec
    total = 0
    for bb in net.backbones:
        if bb.stem is not None:
            total += _stem_flops(spec, n)
        for l in bb.stage_numbers():
            total += _stage_flops(spec, l, n)
    cfg = net.config
    for key in net.connections:
        l = key[1]
        i = _source_stage(cfg, key)
        c_src, c_dst, (th, tw) = _connection_io(spec, l, i)
        sh, sw = spec.stage_hw(i)
        total += _conv_flops(n, c_src, 1, c_dst, sh, sw)  # 1x1 conv at source res
        total += n * c_dst * sh * sw                      # bn
        total += n * c_dst * th * tw                      # upsample output
        total += n * c_dst * th * tw                      # add into the stage input
    for _k, l in direct_add_keys(cfg):
        c_dst, (th, tw) = spec.stage_out_channels(l - 1), spec.stage_hw(l - 1)
        total += n * c_dst * th * tw
    return total


# -- weight application ---------------------------------------------------------


def state_dict(net: CBNet):
    """Ordered name -> array mapping of all weights and running stats."""
    return dict(net.state())


def apply_state(net: CBNet, named, head=None):
    """Copy a loaded CBNW mapping into the model, in place.

    A single-backbone file (names starting with "stem.") is replicated
    into every backbone, emulating initialization from a pretrained single
    backbone; connections keep their current values.  Otherwise names must
    cover the model exactly; "head.*" entries go to `head` when given and
    are ignored when not.
    """
    if any(name.startswith("stem.") for name in named):
        for bb in net.backbones:
            for name, value in bb.state():
                if name not in named:
                    raise WeightsMismatch(f"file lacks tensor {name!r} needed by a backbone")
                _copy_into(name, value, named[name])
        return
    model = dict(net.state())
    head_targets = dict(_head_state(head)) if head is not None else None
    for name, arr in named.items():
        if name in model:
            _copy_into(name, model[name], arr)
        elif name.startswith("head."):
            if head_targets is None:
                continue
            if name not in head_targets:
                raise WeightsMismatch(f"unknown head tensor {name!r}")
            _copy_into(name, head_targets[name], arr)
        else:
            raise WeightsMismatch(f"tensor {name!r} does not exist in this model")
    for name in model:
        if name not in named:
            raise WeightsMismatch(f"file lacks model tensor {name!r}")
    if head_targets is not None and any(n.startswith("head.") for n in named):
        for name in head_targets:
            if name not in named:
                raise WeightsMismatch(f"file lacks head tensor {name!r}")


class WeightsMismatch(ValueError):
    """Loaded tensors do not line up with the model being filled."""


def _copy_into(name, dest, src):
    if dest.shape != src.shape:
        raise WeightsMismatch(
            f"tensor {name!r}: file shape {src.shape} != model shape {dest.shape}")
    dest[:] = src


def _head_state(head):
    for name, value in head.state():
        yield f"head.{name}", value


# -- verification ----------------------------------------------------------------


def model_gradcheck(net: CBNet, image: Tensor4, epsilon=1e-5, loss_seed=0) -> float:
    """Finite-difference check of the whole model.

    The scalar under test is a fixed random projection of all pyramid
    levels; every unique learned parameter and the input image are
    perturbed.  Batchnorm runs in training mode (the path the trainer
    uses); running stats are snapshotted and restored since probe passes
    fold batch statistics into them.
    """
    snapshot = [(p, p.running_mean.copy(), p.running_var.copy()) for p in net.bn_params()]
    old_modes = [(p, p.mode) for p in net.bn_params()]
    set_mode(net, "training")
    rng = np.random.default_rng(loss_seed)
    probe = cbnet_forward(net, image)
    coeffs = [rng.standard_normal(lvl.dims) for lvl in probe.levels]

    def loss_fn():
        pyr = cbnet_forward(net, image)
        return float(sum((c * lvl.data).sum() for c, lvl in zip(coeffs, pyr.levels)))

    try:
        for _, _, grad in net.unique_learnables():
            grad[:] = 0.0
        tape = Tape()
        pyramid = net.forward(image, tape)
        tape.backward(list(zip(pyramid.levels, coeffs)))
        checks = [(value, grad.copy()) for _, value, grad in net.unique_learnables()]
        checks.append((image.data, image.grad.copy()))
        return engine.gradcheck(loss_fn, checks, epsilon)
    finally:
        image.grad = None
        for _, _, grad in net.unique_learnables():
            grad[:] = 0.0
        for p, mean, var in snapshot:
            p.running_mean[:] = mean
            p.running_var[:] = var
        for p, mode in old_modes:
            p.mode = mode
