"""Acceptance gate: one test per criterion, each timed against its budget
and printing a PASS/FAIL line (run with -s to see them on success)."""

import time
from contextlib import contextmanager

import numpy as np
import pytest

import helpers
from cbnet import (
    BackboneSpec,
    BatchNormParams,
    CBNetConfig,
    CompositeStyle,
    ConvParams,
    TOY_SPEC,
    Tensor4,
    add,
    backbone_forward,
    batchnorm,
    batchnorm_backward,
    build_backbone,
    build_cbnet,
    cbnet_forward,
    connection_keys,
    conv2d,
    conv2d_backward,
    direct_add_keys,
    flop_count,
    force_zero_composites,
    gradcheck,
    heatmap_channel_mean,
    load_weights,
    maxpool2,
    maxpool2_backward,
    model_gradcheck,
    param_count,
    relu,
    relu_backward,
    save_weights,
    state_dict,
    upsample_nearest,
    upsample_nearest_backward,
    apply_state,
)
from cbnet.task import run_training

DEFAULT = BackboneSpec()


@contextmanager
def criterion(number, name, budget_seconds):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} {name}: FAIL")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_seconds, \
        f"criterion {number} took {elapsed:.1f}s, budget {budget_seconds}s"
    print(f"ACCEPTANCE {number} {name}: PASS ({elapsed:.1f}s)")


def test_criterion_1_degenerate_equivalence():
    with criterion(1, "degenerate k=1 equivalence", 10):
        for seed in range(20):
            net = build_cbnet(CBNetConfig(num_backbones=1, spec=DEFAULT), seed)
            img = helpers.random_image(DEFAULT, 1000 + seed)
            pyramid = cbnet_forward(net, img)
            outs = backbone_forward(net.backbones[0], img)
            for lvl, out in zip(pyramid.levels, outs[1:]):
                assert np.array_equal(lvl.data, out.data)


def test_criterion_2_zero_composite_equivalence():
    with criterion(2, "zero-composite equivalence", 30):
        for style in CompositeStyle:
            net = build_cbnet(CBNetConfig(num_backbones=2, style=style,
                                          spec=DEFAULT), 7)
            force_zero_composites(net)
            img = helpers.random_image(DEFAULT, 8)
            pyramid = cbnet_forward(net, img)
            single = build_backbone(DEFAULT, 999)
            lead = dict(net.backbones[-1].state())
            for name, value in single.state():
                value[:] = lead[name]
            outs = backbone_forward(single, img)
            for lvl, out in zip(pyramid.levels, outs[1:]):
                assert np.array_equal(lvl.data, out.data), style


def test_criterion_3_equation_oracle_equivalence():
    with criterion(3, "equation-oracle equivalence", 60):
        for style in CompositeStyle:
            for k in (2, 3):
                net = build_cbnet(CBNetConfig(num_backbones=k, style=style,
                                              spec=DEFAULT), 30 + k)
                img = helpers.random_image(DEFAULT, 60 + k)
                pyramid = cbnet_forward(net, img)
                want = helpers.pyramid_oracle(net, img)
                for lvl, expect in zip(pyramid.levels, want):
                    assert np.max(np.abs(lvl.data - expect)) < 1e-9, (style, k)


def _primitive_checks():
    rng = np.random.default_rng(77)
    x = Tensor4(rng.standard_normal((2, 3, 8, 8)))

    for stride, pad in ((1, 1), (2, 1)):
        p = ConvParams(rng.standard_normal((4, 3, 3, 3)) * 0.3,
                       rng.standard_normal(4) * 0.1, stride=stride, pad=pad)
        probe = rng.standard_normal(conv2d(x, p).dims)
        gx, gw, gb = conv2d_backward(x, p, probe)
        yield f"conv2d s{stride}", \
            (lambda x=x, p=p, probe=probe: float((conv2d(x, p).data * probe).sum())), \
            [(x.data, gx), (p.weight.data, gw), (p.bias, gb)]

    for mode in ("training", "inference"):
        bp = BatchNormParams(rng.uniform(0.5, 1.5, 3), rng.standard_normal(3) * 0.2,
                             rng.standard_normal(3) * 0.2, rng.uniform(0.5, 2.0, 3),
                             mode=mode)
        probe = rng.standard_normal(x.dims)
        gx, gg, gb = batchnorm_backward(x, bp, probe)
        yield f"batchnorm {mode}", \
            (lambda x=x, bp=bp, probe=probe: float((batchnorm(x, bp).data * probe).sum())), \
            [(x.data, gx), (bp.gamma, gg), (bp.beta, gb)]

    probe = rng.standard_normal(x.dims)
    yield "relu", \
        (lambda x=x, probe=probe: float((relu(x).data * probe).sum())), \
        [(x.data, relu_backward(x, probe))]

    b = Tensor4(rng.standard_normal(x.dims))
    probe = rng.standard_normal(x.dims)
    yield "add", \
        (lambda x=x, b=b, probe=probe: float((add(x, b).data * probe).sum())), \
        [(x.data, probe.copy()), (b.data, probe.copy())]

    probe = rng.standard_normal((2, 3, 4, 4))
    yield "maxpool2", \
        (lambda x=x, probe=probe: float((maxpool2(x).data * probe).sum())), \
        [(x.data, maxpool2_backward(x, probe))]

    probe = rng.standard_normal((2, 3, 16, 16))
    yield "upsample_nearest", \
        (lambda x=x, probe=probe: float((upsample_nearest(x, (16, 16)).data * probe).sum())), \
        [(x.data, upsample_nearest_backward(x, probe))]


def test_criterion_4_gradient_correctness():
    with criterion(4, "gradient correctness", 300):
        for name, loss_fn, checks in _primitive_checks():
            err = gradcheck(loss_fn, checks)
            assert err < 1e-4, (name, err)
        net = build_cbnet(CBNetConfig(num_backbones=2, style=CompositeStyle.AHLC,
                                      spec=TOY_SPEC), 3)
        img = helpers.random_image(TOY_SPEC, 5)
        err = model_gradcheck(net, img)
        assert err < 1e-3, err


def test_criterion_5_param_count_structure():
    with criterion(5, "parameter-count structure", 5):
        single_model = param_count(build_backbone(DEFAULT, 11))
        single_oracle = helpers.backbone_params_oracle(DEFAULT)
        assert single_model == single_oracle

        cfg = CBNetConfig(num_backbones=2, style=CompositeStyle.AHLC, spec=DEFAULT)
        comp_oracle = helpers.connection_params_oracle(cfg)
        dual = param_count(build_cbnet(cfg, 11))
        assert dual == 2 * single_oracle + comp_oracle

        shared_cfg = CBNetConfig(num_backbones=2, style=CompositeStyle.AHLC,
                                 share_weights=True, spec=DEFAULT)
        shared = param_count(build_cbnet(shared_cfg, 11))
        assert shared - single_oracle == comp_oracle


def test_criterion_6_flop_ordering():
    with criterion(6, "FLOP ordering", 5):
        dims = (1, 3) + DEFAULT.image_size
        single = flop_count(build_cbnet(CBNetConfig(num_backbones=1, spec=DEFAULT), 1), dims)
        accel = flop_count(build_cbnet(CBNetConfig(num_backbones=2, accelerated=True,
                                                   spec=DEFAULT), 1), dims)
        full = flop_count(build_cbnet(CBNetConfig(num_backbones=2, spec=DEFAULT), 1), dims)
        assert single < accel < full


def test_criterion_7_connection_counts():
    with criterion(7, "connection-count structure", 5):
        def keys(style):
            return connection_keys(CBNetConfig(num_backbones=2, style=style, spec=DEFAULT))

        assert keys(CompositeStyle.AHLC) == [(2, l) for l in range(2, 6)]
        assert len(keys(CompositeStyle.DHLC)) == 10
        assert keys(CompositeStyle.ALLC) == [(2, l) for l in range(2, 5)]
        assert keys(CompositeStyle.SLC) == []
        slc = CBNetConfig(num_backbones=2, style=CompositeStyle.SLC, spec=DEFAULT)
        assert len(direct_add_keys(slc)) == 4


def test_criterion_8_end_to_end_trainability():
    with criterion(8, "end-to-end trainability", 600):
        _, _, _, log1 = run_training(CBNetConfig(num_backbones=1, spec=DEFAULT),
                                     42, 200, 0.05, 64)
        assert log1.losses[-1] < 0.5 * log1.losses[0], \
            (log1.losses[0], log1.losses[-1])

        _, _, _, log2 = run_training(
            CBNetConfig(num_backbones=2, style=CompositeStyle.AHLC, spec=DEFAULT),
            42, 200, 0.05, 64)
        assert log2.losses[-1] < 0.5 * log2.losses[0], \
            (log2.losses[0], log2.losses[-1])

        assistant = [n for n in log2.grad_seen if n.startswith("b1.")]
        never = [n for n in assistant if not log2.grad_seen[n]]
        assert assistant and not never, never

        # reported, not asserted: relative quality of the two runs
        print(f"  k=1 metrics: {log1.final_metrics}")
        print(f"  k=2 metrics: {log2.final_metrics}")


def test_criterion_9_serialization(tmp_path):
    with criterion(9, "serialization round trip", 5):
        net = build_cbnet(CBNetConfig(num_backbones=2, spec=TOY_SPEC), 21)
        first = tmp_path / "first.cbnw"
        second = tmp_path / "second.cbnw"
        save_weights(state_dict(net), first)
        save_weights(load_weights(first), second)
        assert first.read_bytes() == second.read_bytes()

        single = build_backbone(TOY_SPEC, 22)
        single_path = tmp_path / "single.cbnw"
        save_weights(dict(single.state()), single_path)
        reference = dict(single.state())
        for k in (2, 3):
            target = build_cbnet(CBNetConfig(num_backbones=k, spec=TOY_SPEC), 23)
            apply_state(target, load_weights(single_path))
            for bb in target.backbones:
                for name, value in bb.state():
                    assert np.array_equal(value, reference[name]), (k, name)


def test_criterion_10_visualization(tmp_path):
    with criterion(10, "heatmap visualization", 5):
        net = build_cbnet(CBNetConfig(num_backbones=1, spec=DEFAULT), 31)
        pyramid = cbnet_forward(net, helpers.random_image(DEFAULT, 32))
        for l in range(2, 6):
            path = tmp_path / f"stage{l}.pgm"
            heatmap_channel_mean(pyramid.level(l), path)
            w, h, _ = helpers.read_pgm(path)
            assert (h, w) == pyramid.level(l).dims[2:]

        feature = Tensor4(np.array([[[[1.0, 2.0], [3.0, 4.0]],
                                     [[3.0, 2.0], [1.0, 0.0]]]]))
        path = tmp_path / "hand.pgm"
        mean = heatmap_channel_mean(feature, path)
        assert np.array_equal(mean, [[2.0, 2.0], [2.0, 2.0]])
        _, _, gray = helpers.read_pgm(path)
        assert np.all(gray == 0)

        constant = Tensor4(np.full((1, 3, 4, 4), 1.25))
        path = tmp_path / "const.pgm"
        heatmap_channel_mean(constant, path)
        _, _, gray = helpers.read_pgm(path)
        assert np.all(gray == 0)
