"""Independent oracles shared by the test modules.

Everything here recomputes expectations from first principles (closed-form
counting, straight-line evaluation of the composition rules) without going
through the graph machinery under test.
"""

import numpy as np

from cbnet import (
    CompositeStyle,
    Tensor4,
    add,
    batchnorm,
    conv2d,
    relu,
    upsample_nearest,
)


# -- parameter counting ------------------------------------------------------


def conv_params_oracle(c_in, c_out, k):
    return c_out * c_in * k * k + c_out


def bn_params_oracle(c):
    return 2 * c


def backbone_params_oracle(spec, first_stage=1):
    total = 0
    if first_stage == 1:
        total += conv_params_oracle(spec.in_channels, spec.stem_channels, 3)
        total += bn_params_oracle(spec.stem_channels)
    for l in range(first_stage, spec.num_stages + 1):
        c_in = spec.stem_channels if l == 1 else spec.stage_channels[l - 2]
        c = spec.stage_channels[l - 1]
        total += conv_params_oracle(c_in, c, 3) + bn_params_oracle(c)
        total += 2 * (conv_params_oracle(c, c, 3) + bn_params_oracle(c))
    return total


def connection_pairs_oracle(cfg):
    """(receiver stage l, source stage i) pairs per receiving backbone,
    derived straight from the composition rules."""
    L = cfg.spec.num_stages
    lmin = 3 if cfg.accelerated else 2
    if cfg.style is CompositeStyle.AHLC:
        return [(l, l) for l in range(lmin, L + 1)]
    if cfg.style is CompositeStyle.ALLC:
        return [(l, l + 1) for l in range(lmin, L)]
    if cfg.style is CompositeStyle.DHLC:
        return [(l, i) for l in range(lmin, L + 1) for i in range(l, L + 1)]
    return []


def connection_params_oracle(cfg):
    total = 0
    receivers = cfg.num_backbones - 1
    for l, i in connection_pairs_oracle(cfg):
        c_src = cfg.spec.stage_channels[i - 1]
        c_dst = cfg.spec.stage_channels[l - 2]
        total += conv_params_oracle(c_src, c_dst, 1) + bn_params_oracle(c_dst)
    return receivers * total


# -- straight-line network evaluation -----------------------------------------


def eval_stem(stem, x):
    return relu(batchnorm(conv2d(x, stem.conv.params), stem.bn.params))


def eval_stage(stage, x):
    a = relu(batchnorm(conv2d(x, stage.down.params), stage.down_bn.params))
    h = relu(batchnorm(conv2d(a, stage.conv1.params), stage.bn1.params))
    h = batchnorm(conv2d(h, stage.conv2.params), stage.bn2.params)
    return relu(add(h, a))


def eval_connection(conn, x):
    y = batchnorm(conv2d(x, conn.conv.params), conn.bn.params)
    return upsample_nearest(y, conn.target_hw)


def backbone_oracle(bb, image):
    """Plain chain x^l = F^l(x^{l-1}) without the tape."""
    x = eval_stem(bb.stem, image)
    outs = []
    for l in range(1, bb.spec.num_stages + 1):
        x = eval_stage(bb.stage(l), x)
        outs.append(x)
    return [o.data for o in outs]


def pyramid_oracle(net, image):
    """Straight-line evaluation of the composition rules for every style;
    returns the lead stage outputs for stages 2..L as arrays."""
    cfg = net.config
    assert not cfg.accelerated
    L = cfg.spec.num_stages
    style = cfg.style
    prev = None
    for k in range(1, cfg.num_backbones + 1):
        bb = net.backbones[k - 1]
        x = eval_stem(bb.stem, image)
        outs = []
        for l in range(1, L + 1):
            inp = x if l == 1 else outs[-1]
            if k >= 2 and l >= 2:
                if style is CompositeStyle.AHLC:
                    inp = add(inp, eval_connection(net.connections[(k, l)], prev[l - 1]))
                elif style is CompositeStyle.SLC:
                    inp = add(inp, prev[l - 2])
                elif style is CompositeStyle.ALLC:
                    if l < L:
                        inp = add(inp, eval_connection(net.connections[(k, l)], prev[l]))
                else:
                    for i in range(l, L + 1):
                        inp = add(inp, eval_connection(net.connections[(k, l, i)], prev[i - 1]))
            outs.append(eval_stage(bb.stage(l), inp))
        prev = outs
    return [o.data for o in prev[1:]]


# -- misc ----------------------------------------------------------------------


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob.startswith(b"P5\n"), "not a binary PGM"
    rest = blob[3:]
    dims, rest = rest.split(b"\n", 1)
    w, h = (int(t) for t in dims.split())
    maxval, payload = rest.split(b"\n", 1)
    assert maxval == b"255"
    assert len(payload) == w * h
    return w, h, np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def random_image(spec, seed):
    rng = np.random.default_rng(seed)
    return Tensor4(rng.uniform(0.0, 1.0, size=(1, spec.in_channels) + tuple(spec.image_size)))
