"""Synthetic dense-prediction task over the lead feature pyramid.

Each sample is one shape (circle, square or triangle) painted over a noise
background.  Targets are a binary objectness grid at 1/4 image resolution
(one cell per 4x4 pixel block, matching the stage-2 map) marking every
cell the shape's bounding box touches, plus the 3-way shape class.  The
toy head predicts both from the pyramid, trained with mean binary
cross-entropy over cells plus class cross-entropy, unit weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneSpec, _conv_named, _init_conv
from .composite import CBNet, CBNetConfig, build_cbnet, set_mode
from .engine import ConfigError, Conv2dLayer, GAP, ShapeError, Tape, Tensor4
from .weights import load_weights, save_weights

GRID_STRIDE = 4
CLASS_NAMES = ("circle", "square", "triangle")
TRAIN_BATCH = 4


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""


@dataclass
class SyntheticSample:
    image: Tensor4          # (1, 3, h, w), values in [0, 1]
    grid: np.ndarray        # (h/4, w/4) of {0.0, 1.0}
    label: int              # index into CLASS_NAMES


def render_sample(seed, image_size=64):
    """Deterministically draw one sample; also returns the shape's bounding
    box (r0, r1, c0, c1), inclusive pixel coords, for geometric checking."""
    size = int(image_size)
    if size % GRID_STRIDE:
        raise ConfigError(f"image size {size} not divisible by {GRID_STRIDE}")
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.0, 0.35, size=(3, size, size))
    label = int(rng.integers(0, 3))
    half = int(rng.integers(5, 11))
    cy = int(rng.integers(half, size - half))
    cx = int(rng.integers(half, size - half))
    color = rng.uniform(0.65, 1.0, size=3)

    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    if label == 0:
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= half * half
    elif label == 1:
        mask = np.maximum(np.abs(ys - cy), np.abs(xs - cx)) <= half
    else:
        # isoceles triangle, apex at the top row of the box
        inside_rows = (ys >= cy - half) & (ys <= cy + half)
        mask = inside_rows & (np.abs(xs - cx) * 2 <= (ys - (cy - half)))
    image[:, mask] = color[:, None]

    bbox = (cy - half, cy + half, cx - half, cx + half)
    grid = np.zeros((size // GRID_STRIDE, size // GRID_STRIDE))
    r0, r1, c0, c1 = bbox
    grid[r0 // GRID_STRIDE:r1 // GRID_STRIDE + 1,
         c0 // GRID_STRIDE:c1 // GRID_STRIDE + 1] = 1.0
    sample = SyntheticSample(Tensor4(image[None]), grid, label)
    return sample, bbox


def gen_dataset(seed, n, image_size=64):
    """n independent samples; sample i is drawn from seed + i."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    return [render_sample(seed + i, image_size)[0] for i in range(n)]


def save_dataset(samples, path):
    named = {}
    for i, s in enumerate(samples):
        named[f"sample{i}.image"] = s.image.data
        named[f"sample{i}.grid"] = s.grid
        named[f"sample{i}.label"] = np.array([float(s.label)])
    save_weights(named, path)


def load_dataset(path):
    named = load_weights(path)
    samples = []
    for i in range(len(named) // 3):
        samples.append(SyntheticSample(
            Tensor4(named[f"sample{i}.image"]),
            named[f"sample{i}.grid"],
            int(named[f"sample{i}.label"][0])))
    return samples


# -- head and loss ---------------------------------------------------------------


class Head:
    """Objectness: 1x1 conv on the stage-2 map.  Class: global average of the
    last map pushed through a 1x1 conv to 3 logits."""

    def __init__(self, obj_conv, cls_conv):
        self.obj = Conv2dLayer(obj_conv)
        self.cls = Conv2dLayer(cls_conv)

    def forward(self, tape, pyramid):
        objectness = tape.run(self.obj, pyramid.level(2))
        pooled = tape.run(GAP, pyramid.last)
        logits = tape.run(self.cls, pooled)
        return objectness, logits

    def learnables(self):
        yield from _conv_named("obj", self.obj.params)
        yield from _conv_named("cls", self.cls.params)

    def state(self):
        for name, value, _ in self.learnables():
            yield name, value


def build_head(spec: BackboneSpec, seed) -> Head:
    rng = np.random.default_rng(seed)
    obj = _init_conv(rng, spec.stage_out_channels(2), 1, 1, stride=1, pad=0)
    cls = _init_conv(rng, spec.stage_out_channels(spec.num_stages), 3, 1, stride=1, pad=0)
    return Head(obj, cls)


def head_forward(head: Head, pyramid):
    """Functional form (fresh tape): (objectness logits, class logits)."""
    return head.forward(Tape(), pyramid)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grads(objectness: Tensor4, logits: Tensor4, grids, labels):
    """Scalar loss plus gradients w.r.t. both logit tensors.

    Mean binary cross-entropy over all grid cells of the batch plus mean
    class cross-entropy; both terms use numerically stable log-sum forms.
    """
    z = objectness.data[:, 0]
    t = np.asarray(grids, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"objectness {z.shape} does not match targets {t.shape}")
    n = z.shape[0]
    cells = float(z.size)
    bce = float((np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).sum() / cells)

    u = logits.data.reshape(n, -1)
    labels = np.asarray(labels, dtype=np.int64)
    if u.shape[1] != len(CLASS_NAMES) or labels.shape != (n,):
        raise ShapeError(f"class logits {u.shape} / labels {labels.shape} malformed")
    umax = u.max(axis=1, keepdims=True)
    lse = umax[:, 0] + np.log(np.exp(u - umax).sum(axis=1))
    ce = float((lse - u[np.arange(n), labels]).sum() / n)

    grad_obj = ((_sigmoid(z) - t) / cells)[:, None]
    softmax = np.exp(u - lse[:, None])
    softmax[np.arange(n), labels] -= 1.0
    grad_logits = (softmax / n).reshape(logits.dims)
    return bce + ce, grad_obj, grad_logits


def loss(pred, samples) -> float:
    """Scalar loss of (objectness, logits) against one sample or a batch."""
    if isinstance(samples, SyntheticSample):
        samples = [samples]
    grids = np.stack([s.grid for s in samples])
    labels = [s.label for s in samples]
    value, _, _ = loss_and_grads(pred[0], pred[1], grids, labels)
    return value


# -- training and evaluation -------------------------------------------------------


@dataclass
class TrainLog:
    losses: list
    final_metrics: dict
    grad_seen: dict = field(default_factory=dict)


def _batch(samples):
    images = Tensor4(np.concatenate([s.image.data for s in samples]))
    grids = np.stack([s.grid for s in samples])
    labels = [s.label for s in samples]
    return images, grids, labels


def train(net: CBNet, head: Head, dataset, steps, lr, seed) -> TrainLog:
    """Plain SGD, batch size TRAIN_BATCH, epoch-wise reshuffling from seed.

    Batchnorm runs in training mode during the steps and is switched back
    to inference for the final metrics.  Aborts on a non-finite loss.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    params = list(net.unique_learnables())
    seen_params = {id(v) for _, v, _ in params}
    for name, value, grad in head.learnables():
        if id(value) not in seen_params:
            params.append((f"head.{name}", value, grad))
    grad_seen = {name: False for name, _, _ in params}

    rng = np.random.default_rng(seed)
    order = []
    losses = []
    set_mode(net, "training")
    try:
        for step in range(steps):
            if not order:
                order = list(rng.permutation(len(dataset)))
            take = [dataset[order.pop(0)] for _ in range(min(TRAIN_BATCH, len(order)))]
            images, grids, labels = _batch(take)

            for _, _, grad in params:
                grad[:] = 0.0
            tape = Tape()
            pyramid = net.forward(images, tape)
            objectness, logits = head.forward(tape, pyramid)
            value, gobj, glog = loss_and_grads(objectness, logits, grids, labels)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            tape.backward([(objectness, gobj), (logits, glog)])

            for name, value_arr, grad in params:
                if not grad_seen[name] and np.any(grad):
                    grad_seen[name] = True
                value_arr -= lr * grad
            losses.append(value)
    finally:
        set_mode(net, "inference")
    metrics = evaluate(net, head, dataset)
    return TrainLog(losses, metrics, grad_seen)


def run_training(cfg: CBNetConfig, seed, steps, lr, dataset_size):
    """Build everything from one seed and train.

    The seed fans out to fixed roles: net = seed, head = seed + 1,
    dataset = seed + 2, step order = seed + 3.  Returns (net, head,
    dataset, log).
    """
    h, w = cfg.spec.image_size
    if h != w:
        raise ConfigError("the synthetic task needs a square image size")
    net = build_cbnet(cfg, seed)
    head = build_head(cfg.spec, seed + 1)
    dataset = gen_dataset(seed + 2, dataset_size, h)
    log = train(net, head, dataset, steps, lr, seed + 3)
    return net, head, dataset, log


def metrics_from_predictions(pred_grids, true_grids, pred_labels, true_labels):
    """Micro F1 over all cells (0.0 when degenerate) and top-1 accuracy."""
    p = np.asarray(pred_grids, dtype=bool)
    t = np.asarray(true_grids, dtype=bool)
    tp = int(np.logical_and(p, t).sum())
    fp = int(np.logical_and(p, ~t).sum())
    fn = int(np.logical_and(~p, t).sum())
    denom = 2 * tp + fp + fn
    f1 = 2.0 * tp / denom if denom else 0.0
    hits = sum(int(a == b) for a, b in zip(pred_labels, true_labels))
    return {"cell_f1": f1, "class_accuracy": hits / len(true_labels)}


def evaluate(net: CBNet, head: Head, dataset, chunk=16) -> dict:
    """Inference-mode metrics: objectness thresholded at probability 0.5
    (logit > 0), class by argmax with first-index tie-break."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    set_mode(net, "inference")
    pred_grids, true_grids, pred_labels, true_labels = [], [], [], []
    for start in range(0, len(dataset), chunk):
        part = dataset[start:start + chunk]
        images, grids, labels = _batch(part)
        pyramid = net.forward(images, Tape())
        objectness, logits = head.forward(Tape(), pyramid)
        pred_grids.append(objectness.data[:, 0] > 0.0)
        true_grids.append(np.asarray(grids, dtype=bool))
        pred_labels += list(np.argmax(logits.data.reshape(len(part), -1), axis=1))
        true_labels += labels
    return metrics_from_predictions(
        np.concatenate(pred_grids), np.concatenate(true_grids), pred_labels, true_labels)
