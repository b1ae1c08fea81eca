"""Desk-scale models with hand-written backprop, and synthetic datasets to train them on.

Two architectures:

* ``mlp``: dense -> ReLU -> ... -> dense, softmax cross-entropy head.
* ``tiny_cnn``: 3x3 valid conv -> ReLU -> 2x2 mean-pool -> dense, same head.

Weights live in a :class:`~rsdgc.schedule.ModelWeights` whose layer order is
(weight, bias) per parametric layer; gradients come back as a
:class:`~rsdgc.core.ModelGradient` with the same specs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import LayerKind, LayerSpec, ModelGradient
from .errors import DivergedLoss, ShapeMismatch
from .schedule import ModelWeights


class Architecture(str, enum.Enum):
    MLP = "mlp"
    TINY_CNN = "tiny_cnn"


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    layer_specs: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    init_seed: int = 0
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.architecture is Architecture.TINY_CNN:
            conv = [s for s in self.layer_specs if s.kind is LayerKind.CONV]
            if not conv or conv[0].shape[2:] != (3, 3):
                raise ShapeMismatch("tiny_cnn needs a 3x3 conv layer")


def _pair(layer_id: int, out_dim: int, in_dim: int, patch_size: int):
    return (
        LayerSpec(layer_id, LayerKind.DENSE, (out_dim, in_dim), patch_size),
        LayerSpec(layer_id + 1, LayerKind.BIAS, (out_dim,), patch_size),
    )


def mlp(input_dim=2, hidden=(32, 32), num_classes=2, patch_size=3, init_seed=0) -> ModelSpec:
    dims = [input_dim, *hidden, num_classes]
    specs = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        specs.extend(_pair(2 * i + 1, d_out, d_in, patch_size))
    return ModelSpec(Architecture.MLP, tuple(specs), (input_dim,), num_classes, init_seed)


def tiny_cnn(image_size=12, channels=8, num_classes=2, patch_size=3, init_seed=0, pool=2) -> ModelSpec:
    side = (image_size - 2) // pool
    if side < 1:
        raise ShapeMismatch(f"image_size {image_size} too small for a 3x3 conv and {pool}x{pool} pool")
    specs = (
        LayerSpec(1, LayerKind.CONV, (channels, 1, 3, 3), patch_size),
        LayerSpec(2, LayerKind.BIAS, (channels,), patch_size),
        *_pair(3, num_classes, channels * side * side, patch_size),
    )
    return ModelSpec(Architecture.TINY_CNN, specs, (1, image_size, image_size), num_classes, init_seed, pool)


def build_model(architecture, *, num_classes=2, patch_size=3, init_seed=0, input_dim=2,
                hidden=(32, 32), image_size=12, channels=8) -> ModelSpec:
    if Architecture(architecture) is Architecture.MLP:
        return mlp(input_dim, hidden, num_classes, patch_size, init_seed)
    return tiny_cnn(image_size, channels, num_classes, patch_size, init_seed)


def _fan_in(spec: LayerSpec) -> int:
    if spec.kind is LayerKind.CONV:
        return math.prod(spec.shape[1:])
    return spec.shape[1]


def init_weights(model: ModelSpec) -> ModelWeights:
    """He-uniform weights; biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the owning layer's fan-in."""
    rng = np.random.default_rng(model.init_seed)
    values = []
    fan_in = 1
    for spec in model.layer_specs:
        if spec.kind is LayerKind.BIAS:
            bound = 1.0 / math.sqrt(fan_in)
        else:
            fan_in = _fan_in(spec)
            bound = math.sqrt(6.0 / fan_in)
        values.append(rng.uniform(-bound, bound, size=spec.element_count))
    return ModelWeights(model.layer_specs, tuple(values))


def zero_weights(model: ModelSpec) -> ModelWeights:
    return ModelWeights(model.layer_specs, tuple(np.zeros(s.element_count) for s in model.layer_specs))


class BatchResult(NamedTuple):
    loss: float
    grad: ModelGradient
    accuracy: float


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    b = labels.size
    loss = -log_p[np.arange(b), labels].mean()
    dlogits = np.exp(log_p)
    dlogits[np.arange(b), labels] -= 1.0
    return float(loss), dlogits / b


def _check_batch(model: ModelSpec, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if labels.ndim != 1 or labels.size == 0 or inputs.shape[0] != labels.size:
        raise ShapeMismatch(f"batch of {inputs.shape[0]} inputs with {labels.shape} labels")
    if inputs.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"inputs {inputs.shape[1:]} do not fit model input {model.input_shape}")
    return inputs


def _mlp_pass(params, x, labels, need_grad):
    acts = [x]
    pre = []
    n_dense = len(params) // 2
    for i in range(n_dense):
        w, b = params[2 * i], params[2 * i + 1]
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if i < n_dense - 1 else z)
    logits = acts[-1]
    loss, d = _softmax_xent(logits, labels)
    if not need_grad:
        return loss, None, logits
    grads = [None] * len(params)
    for i in reversed(range(n_dense)):
        if i < n_dense - 1:
            d = d * (pre[i] > 0)
        grads[2 * i] = d.T @ acts[i]
        grads[2 * i + 1] = d.sum(axis=0)
        if i:
            d = d @ params[2 * i]
    return loss, grads, logits


def _cnn_pass(params, x, labels, need_grad, pool):
    kernel, kbias, w, b = params
    windows = np.lib.stride_tricks.sliding_window_view(x, (3, 3), axis=(2, 3))  # B,C,Ho,Wo,3,3
    z = np.einsum("bchwij,ncij->bnhw", windows, kernel) + kbias[None, :, None, None]
    a = np.maximum(z, 0.0)
    bsz, nch, ho, wo = a.shape
    side_h, side_w = ho // pool, wo // pool
    cropped = a[:, :, : side_h * pool, : side_w * pool]
    pooled = cropped.reshape(bsz, nch, side_h, pool, side_w, pool).mean(axis=(3, 5))
    flat = pooled.reshape(bsz, -1)
    logits = flat @ w.T + b
    loss, d = _softmax_xent(logits, labels)
    if not need_grad:
        return loss, None, logits
    gw = d.T @ flat
    gb = d.sum(axis=0)
    dpooled = (d @ w).reshape(bsz, nch, side_h, 1, side_w, 1) / (pool * pool)
    da = np.zeros_like(a)
    da[:, :, : side_h * pool, : side_w * pool] = np.broadcast_to(
        dpooled, (bsz, nch, side_h, pool, side_w, pool)
    ).reshape(bsz, nch, side_h * pool, side_w * pool)
    dz = da * (z > 0)
    gk = np.einsum("bnhw,bchwij->ncij", dz, windows)
    gkb = dz.sum(axis=(0, 2, 3))
    return loss, [gk, gkb, gw, gb], logits


def _run(model: ModelSpec, weights: ModelWeights, inputs, labels, need_grad: bool):
    labels = np.asarray(labels, dtype=np.int64)
    inputs = _check_batch(model, inputs, labels)
    if tuple(weights.specs) != tuple(model.layer_specs):
        raise ShapeMismatch("weights were not built for this model")
    params = weights.reshaped()
    if model.architecture is Architecture.MLP:
        return _mlp_pass(params, inputs, labels, need_grad)
    return _cnn_pass(params, inputs, labels, need_grad, model.pool)


def forward_backward(model: ModelSpec, weights: ModelWeights, batch) -> tuple[float, ModelGradient]:
    """Mean cross-entropy over the batch and its exact gradient for every layer."""
    inputs, labels = batch
    loss, grads, _ = _run(model, weights, inputs, labels, True)
    return loss, ModelGradient.from_arrays(model.layer_specs, grads)


def batch_step(model: ModelSpec, weights: ModelWeights, batch) -> BatchResult:
    """Like :func:`forward_backward`, plus batch accuracy; a NaN/Inf loss raises DivergedLoss."""
    inputs, labels = batch
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads, logits = _run(model, weights, inputs, labels, True)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergedLoss(f"loss {loss} (or its gradient) is not finite")
    accuracy = float((logits.argmax(axis=1) == np.asarray(labels)).mean())
    return BatchResult(loss, ModelGradient.from_arrays(model.layer_specs, grads), accuracy)


def evaluate(model: ModelSpec, weights: ModelWeights, inputs, labels) -> tuple[float, float]:
    """(mean loss, accuracy) without computing gradients."""
    loss, _, logits = _run(model, weights, inputs, labels, False)
    return loss, float((logits.argmax(axis=1) == np.asarray(labels)).mean())


# --- datasets ---------------------------------------------------------------


class Generator(str, enum.Enum):
    GAUSSIAN_BLOBS = "gaussian_blobs"
    CONCENTRIC_RINGS = "concentric_rings"


@dataclass(frozen=True)
class DatasetShard:
    inputs: np.ndarray
    labels: np.ndarray
    generator: Generator
    seed: int
    size: int

    def subset(self, index) -> "DatasetShard":
        index = np.asarray(index)
        return DatasetShard(self.inputs[index], self.labels[index], self.generator, self.seed, index.size)

    def batch(self, index):
        return self.inputs[index], self.labels[index]


def _balanced_labels(rng, size, num_classes):
    labels = np.arange(size) % num_classes
    rng.shuffle(labels)
    return labels


def _blob_features(rng, labels, num_classes, dim, separation):
    # Class means on a regular simplex-like layout: pairwise distance == separation.
    means = np.zeros((num_classes, dim))
    if num_classes == 2:
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        means[0], means[1] = -separation / 2 * direction, separation / 2 * direction
    else:
        basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0] if dim >= num_classes else None
        if basis is None:
            angles = 2 * np.pi * np.arange(num_classes) / num_classes
            radius = separation / (2 * np.sin(np.pi / num_classes))
            means[:, 0], means[:, 1] = radius * np.cos(angles), radius * np.sin(angles)
        else:
            means = basis[:num_classes] * separation / np.sqrt(2)
    return means[labels] + rng.normal(size=(labels.size, dim))


def _ring_points(rng, labels, noise=0.1):
    radius = 1.0 + labels + rng.normal(scale=noise, size=labels.size)
    theta = rng.uniform(0, 2 * np.pi, size=labels.size)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def _ring_images(rng, labels, num_classes, image_size, width=0.7, pixel_noise=1.0, radius_noise=0.8):
    lo, hi = 1.5, image_size / 2 - 1.5
    radii = np.linspace(lo, hi, num_classes) if num_classes > 1 else np.array([lo])
    n = labels.size
    center = (image_size - 1) / 2 + rng.uniform(-1.0, 1.0, size=(n, 2))
    radius = radii[labels] + rng.normal(scale=radius_noise, size=n)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    dist = np.hypot(yy[None] - center[:, 0, None, None], xx[None] - center[:, 1, None, None])
    images = np.exp(-((dist - radius[:, None, None]) ** 2) / (2 * width**2))
    images += rng.normal(scale=pixel_noise, size=images.shape)
    return images[:, None, :, :]


def _standardize(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1)
    std = flat.std(axis=0)
    std[std == 0] = 1.0
    return ((flat - flat.mean(axis=0)) / std).reshape(x.shape)


def make_dataset(generator, seed: int, size: int, num_classes: int = 2, *, dim: int = 2,
                 image_size: int | None = None, separation: float = 6.0) -> DatasetShard:
    """Deterministic synthetic classification data, class-balanced within one sample.

    With ``image_size`` set, samples are 1 x image_size x image_size images
    (rings are rasterized; blobs are reshaped feature vectors).  Every input
    dimension is standardized to zero mean and unit variance.
    """
    generator = Generator(generator)
    if not size >= num_classes >= 2:
        raise ValueError(f"need size >= num_classes >= 2, got size={size}, num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, size, num_classes)
    if generator is Generator.GAUSSIAN_BLOBS:
        d = image_size * image_size if image_size else dim
        x = _blob_features(rng, labels, num_classes, d, separation)
        if image_size:
            x = x.reshape(size, 1, image_size, image_size)
    elif image_size:
        x = _ring_images(rng, labels, num_classes, image_size)
    else:
        x = _ring_points(rng, labels)
        if dim > 2:
            x = np.concatenate([x, rng.normal(size=(size, dim - 2))], axis=1)
    return DatasetShard(_standardize(x), labels.astype(np.int64), generator, seed, size)


def train_test_split(data: DatasetShard, seed: int, test_fraction: float = 0.2):
    order = np.random.default_rng([seed, 0x5EED]).permutation(data.size)
    n_test = int(round(data.size * test_fraction))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


def contiguous_shards(data: DatasetShard, count: int) -> list[DatasetShard]:
    bounds = np.linspace(0, data.size, count + 1).astype(int)
    return [data.subset(np.arange(lo, hi)) for lo, hi in zip(bounds, bounds[1:])]
