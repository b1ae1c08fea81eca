"""Shared fixtures and brute-force oracles.

The oracles here are written with plain Python loops and ``math`` so they do
not share code paths with the vectorized implementations they check.
"""
import math

import numpy as np
import pytest

from rsdgc.core import LayerKind, LayerSpec, ModelGradient
from rsdgc.models import forward_backward, init_weights
from rsdgc.schedule import ModelWeights


def oracle_tiles(spec):
    """Enumerate tile membership coordinate by coordinate."""
    if spec.kind is LayerKind.CONV:
        n, c, kh, kw = spec.shape
        rows, cols = n * c * kh, kw
        th = tw = spec.patch_size
    elif spec.kind is LayerKind.DENSE:
        rows, cols = spec.shape
        th = tw = spec.patch_size
    else:
        rows, cols = 1, spec.shape[0]
        th, tw = 1, spec.patch_size**2
    grid_cols = math.ceil(cols / tw)
    tiles = {}
    for r in range(rows):
        for col in range(cols):
            k = (r // th) * grid_cols + col // tw
            tiles.setdefault(k, []).append(r * cols + col)
    return [sorted(tiles[k]) for k in sorted(tiles)]


def oracle_scores(values, tiles, alpha):
    out = []
    for ix in tiles:
        g = [float(values[i]) for i in ix]
        n = len(g)
        mean_abs = sum(abs(x) for x in g) / n
        mean = sum(g) / n
        std = math.sqrt(sum((x - mean) ** 2 for x in g) / n)
        out.append(alpha * mean_abs + (1 - alpha) * std)
    return out


def oracle_top(scores, k):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


def random_spec(rng, layer_id=1, max_side=12, patch_sizes=(1, 2, 3)):
    kind = rng.choice(["conv", "dense", "bias"])
    p = int(rng.choice(patch_sizes))
    if kind == "conv":
        k = int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 4)), k, k)
    elif kind == "dense":
        shape = (int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1)))
    else:
        shape = (int(rng.integers(1, 3 * max_side)),)
    return LayerSpec(layer_id, kind, shape, p)


def random_model_gradient(rng, n_layers=None, patch_size=3):
    n_layers = n_layers or int(rng.integers(1, 5))
    specs = [random_spec(rng, i + 1, patch_sizes=(patch_size,)) for i in range(n_layers)]
    return ModelGradient.from_arrays(specs, (rng.normal(size=s.element_count) for s in specs))


def reference_sgd(model, shards, steps, lr, momentum, batch, seed):
    """Single-process momentum SGD over the union of per-shard minibatches, written without the simulator."""
    w = [v.copy() for v in init_weights(model).values]
    vel = [np.zeros_like(v) for v in w]
    rngs = [np.random.default_rng([seed, k]) for k in range(len(shards))]
    orders = [r.permutation(s.size) for r, s in zip(rngs, shards)]
    cursors = [0] * len(shards)
    trajectory = []
    for _ in range(steps):
        total = None
        for k, shard in enumerate(shards):
            if cursors[k] + batch > shard.size:
                orders[k], cursors[k] = rngs[k].permutation(shard.size), 0
            ix = orders[k][cursors[k] : cursors[k] + batch]
            cursors[k] += batch
            _, g = forward_backward(model, ModelWeights(model.layer_specs, tuple(w)), shard.batch(ix))
            arrays = g.arrays()
            total = [a.copy() for a in arrays] if total is None else [t + a for t, a in zip(total, arrays)]
        update = [t / len(shards) for t in total]
        for i in range(len(w)):
            vel[i] = momentum * vel[i] + update[i]
            w[i] = w[i] - lr * vel[i]
        trajectory.append([a.copy() for a in w])
    return trajectory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
