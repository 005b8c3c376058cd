"""Command-line front end.

Subcommands: summarize, train, eval, gradcheck, flops, viz.  Every command
is deterministic given its flags: rerunning writes byte-identical files.
Exits 0 on success, 2 on argument errors, 1 on runtime failures (including
a gradcheck error above tolerance).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .backbone import TOY_SPEC, BackboneSpec
from .composite import (
    CBNetConfig,
    CompositeStyle,
    apply_state,
    build_cbnet,
    cbnet_forward,
    connection_keys,
    direct_add_keys,
    flop_count,
    model_gradcheck,
    param_count,
    state_dict,
)
from .engine import ConfigError, ShapeError, Tensor4
from .task import build_head, evaluate, gen_dataset, run_training, train
from .viz import heatmap_channel_mean
from .weights import WeightFormatError, load_weights, save_weights

# one user-facing seed fans out into fixed roles
NET_SEED, HEAD_SEED, DATA_SEED, SGD_SEED = 0, 1, 2, 3


def sub_seed(seed, role):
    return int(seed) + role


def _model_flags(p):
    p.add_argument("--k", type=int, default=2, help="number of backbones")
    p.add_argument("--style", choices=[s.value for s in CompositeStyle], default="ahlc")
    p.add_argument("--share-weights", action="store_true")
    p.add_argument("--accelerated", action="store_true")
    p.add_argument("--seed", type=int, default=0)


def _config(args, spec=None):
    return CBNetConfig(
        num_backbones=args.k,
        style=CompositeStyle.parse(args.style),
        share_weights=args.share_weights,
        accelerated=args.accelerated,
        spec=spec or BackboneSpec(),
    )


def _ensure_outdir(path):
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "wb"):
        pass
    os.remove(probe)


def _load_into(net, head, path):
    apply_state(net, load_weights(path), head=head)


def _full_state(net, head):
    named = state_dict(net)
    for name, value in head.state():
        named[f"head.{name}"] = value
    return named


def cmd_summarize(args):
    cfg = _config(args)
    net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
    print(f"config: k={cfg.num_backbones} style={cfg.style.value} "
          f"share_weights={cfg.share_weights} accelerated={cfg.accelerated}")
    for k, bb in enumerate(net.backbones, 1):
        count = sum(v.size for _, v, _ in bb.learnables())
        stages = f"stages {bb.first_stage}..{cfg.spec.num_stages}"
        print(f"backbone b{k}: {stages}, params {count}")
    keys = connection_keys(cfg)
    print(f"composite connections: {len(keys)}")
    comp_total = 0
    for key in keys:
        conn = net.connections[key]
        count = sum(v.size for _, v, _ in conn.learnables())
        comp_total += count
        th, tw = conn.target_hw
        print(f"  g.{'.'.join(str(p) for p in key)}: "
              f"{conn.conv.params.c_in}ch -> {conn.conv.params.c_out}ch "
              f"target {th}x{tw}, params {count}")
    adds = direct_add_keys(cfg)
    if adds:
        print(f"direct additions: {len(adds)}")
    print(f"composite params: {comp_total}")
    print(f"total params: {param_count(net)}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    _ensure_outdir(args.out)
    weights_out = args.weights_out or os.path.join(args.out, "weights.cbnw")
    parent = os.path.dirname(weights_out) or "."
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise ConfigError(f"cannot write weights to {weights_out!r}")
    if args.weights_in:
        net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
        head = build_head(cfg.spec, sub_seed(args.seed, HEAD_SEED))
        _load_into(net, head, args.weights_in)
        dataset = gen_dataset(sub_seed(args.seed, DATA_SEED), args.n)
        log = train(net, head, dataset, args.steps, args.lr, sub_seed(args.seed, SGD_SEED))
    else:
        net, head, _, log = run_training(cfg, args.seed, args.steps, args.lr, args.n)
    csv_path = os.path.join(args.out, "loss.csv")
    with open(csv_path, "w") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(log.losses):
            fh.write(f"{i},{value!r}\n")
    save_weights(_full_state(net, head), weights_out)
    print(f"wrote {csv_path}")
    print(f"wrote {weights_out}")
    print(f"cell_f1={log.final_metrics['cell_f1']!r} "
          f"class_accuracy={log.final_metrics['class_accuracy']!r}")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
    head = build_head(cfg.spec, sub_seed(args.seed, HEAD_SEED))
    if args.weights_in:
        _load_into(net, head, args.weights_in)
    dataset = gen_dataset(sub_seed(args.seed, DATA_SEED), args.n)
    metrics = evaluate(net, head, dataset)
    print(f"cell_f1={metrics['cell_f1']!r} class_accuracy={metrics['class_accuracy']!r}")
    return 0


def cmd_gradcheck(args):
    spec = TOY_SPEC if args.toy else BackboneSpec()
    if not args.toy:
        print("note: full-size gradcheck probes every parameter and may take "
              "a very long time; consider --toy", file=sys.stderr)
    cfg = _config(args, spec=spec)
    net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
    rng = np.random.default_rng(sub_seed(args.seed, DATA_SEED))
    image = Tensor4(rng.uniform(0.0, 1.0, size=(1, spec.in_channels) + spec.image_size))
    err = model_gradcheck(net, image, loss_seed=sub_seed(args.seed, HEAD_SEED))
    print(f"max_rel_error={err!r}")
    return 0 if err <= args.tolerance else 1


def cmd_flops(args):
    cfg = _config(args)
    net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
    dims = (1, cfg.spec.in_channels) + cfg.spec.image_size
    print(f"params={param_count(net)}")
    print(f"flops={flop_count(net, dims)}")
    return 0


def cmd_viz(args):
    cfg = _config(args)
    _ensure_outdir(args.out)
    net = build_cbnet(cfg, sub_seed(args.seed, NET_SEED))
    if args.weights_in:
        apply_state(net, load_weights(args.weights_in))
    sample = gen_dataset(sub_seed(args.seed, DATA_SEED), 1)[0]
    pyramid = cbnet_forward(net, sample.image)
    for l in range(2, cfg.spec.num_stages + 1):
        path = os.path.join(args.out, f"stage{l}.pgm")
        heatmap_channel_mean(pyramid.level(l), path)
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cbnet",
        description="composite backbone networks: build, profile, train, inspect")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="print the parameter/connection table")
    _model_flags(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("train", help="train on the synthetic task, write weights + loss CSV")
    _model_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--n", type=int, default=64, help="dataset size")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--weights-in")
    p.add_argument("--weights-out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report cell F1 and class accuracy")
    _model_flags(p)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--weights-in")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole model")
    _model_flags(p)
    p.add_argument("--toy", action="store_true", help="use the small 16x16 spec")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="print parameter and FLOP totals")
    _model_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("viz", help="write per-level channel-mean heatmaps (PGM)")
    _model_flags(p)
    p.add_argument("--out", default="out")
    p.add_argument("--weights-in")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, WeightFormatError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
