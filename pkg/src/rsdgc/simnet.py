"""Deterministic N-node data-parallel SGD with compressed gradient exchange.

Each step: every node draws a minibatch from its own shard, computes its local
gradient, compresses it, and "sends" it through the :class:`CommLedger`.  The
synchronizer densifies what arrived, sums in node-id order and divides by N.
Every replica then applies the same update, so weights stay bit-identical.

Momentum lives in the per-node accumulator for ``rs_dgc`` and ``dgc``; every
other compressor gets classical momentum applied to the synchronized gradient.
"""
from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import baselines
from .accumulator import AccumulatorState, accumulate, commit_transmitted
from .baselines import CompressorKind
from .core import (
    EncodingConfig,
    LayerSpec,
    ModelGradient,
    SparseModelGradient,
    dense_equivalent_bytes,
    dense_wire_size_bytes,
    densify,
    wire_size_bytes,
)
from .errors import DivergedLoss, EmptyLedger, ShapeMismatch
from .models import DatasetShard, ModelSpec, batch_step
from .nsi import NsiConfig, sparsify_model
from .schedule import ModelWeights, RatioSchedule


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 0.1
    # Epochs between decays; 0 keeps the rate constant.
    decay_period: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.decay_period <= 0:
            return self.learning_rate
        return self.learning_rate * self.decay_factor ** (epoch // self.decay_period)


@dataclass(frozen=True)
class CompressionConfig:
    kind: CompressorKind = CompressorKind.RS_DGC
    density: float = 0.001
    alpha: float = 0.5
    patch_size: int = 3
    dynamic: bool = True
    momentum_masking: bool = False
    encoding: EncodingConfig = EncodingConfig()

    def __post_init__(self):
        object.__setattr__(self, "kind", CompressorKind(self.kind))
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must lie in [0, 1]")

    @property
    def nsi(self) -> NsiConfig:
        return NsiConfig(self.alpha, self.patch_size)


class BatchSampler:
    """Reshuffles its shard with a node-private generator at the start of each epoch."""

    def __init__(self, shard: DatasetShard, batch_size: int, seed):
        if batch_size < 1 or batch_size > shard.size:
            raise ValueError(f"batch_size {batch_size} does not fit a shard of {shard.size}")
        self.shard = shard
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    @property
    def steps_per_epoch(self) -> int:
        return self.shard.size // self.batch_size

    def start_epoch(self) -> None:
        self._order = self.rng.permutation(self.shard.size)
        self._cursor = 0

    def next_batch(self):
        if self._cursor + self.batch_size > self._order.size:
            self.start_epoch()
        index = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.shard.batch(index)


@dataclass
class NodeState:
    node_id: int
    weights: ModelWeights
    accumulator: AccumulatorState
    shard: DatasetShard
    sampler: BatchSampler
    schedule: RatioSchedule | None = None
    velocity: list[np.ndarray] = field(default_factory=list)
    # Seed material for node-local randomness (random_k draws).
    seed: int = 0

    def __post_init__(self):
        if not self.velocity:
            self.velocity = [np.zeros_like(v) for v in self.weights.values]


def make_nodes(model: ModelSpec, weights: ModelWeights, shards: Sequence[DatasetShard], batch_size: int,
               momentum: float, master_seed: int, momentum_masking: bool = False) -> list[NodeState]:
    nodes = []
    for k, shard in enumerate(shards):
        acc = AccumulatorState(k, model.layer_specs, momentum, momentum_masking)
        sampler = BatchSampler(shard, batch_size, [master_seed, k])
        nodes.append(NodeState(k, weights.copy(), acc, shard, sampler, seed=master_seed))
    return nodes


class CommRecord(NamedTuple):
    iteration: int
    node_id: int
    bytes_sent: int
    dense_equivalent_bytes: int
    values_sent: int
    dense_values: int


@dataclass
class CommLedger:
    records: list[CommRecord] = field(default_factory=list)
    bytes_sent: int = 0
    dense_bytes: int = 0
    values_sent: int = 0
    dense_values: int = 0

    def record(self, entry: CommRecord) -> None:
        if entry.bytes_sent < 0:
            raise ValueError("bytes_sent must be >= 0")
        self.records.append(entry)
        self.bytes_sent += entry.bytes_sent
        self.dense_bytes += entry.dense_equivalent_bytes
        self.values_sent += entry.values_sent
        self.dense_values += entry.dense_values

    def per_node_bytes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            out[r.node_id] = out.get(r.node_id, 0) + r.bytes_sent
        return out


def report_ratio(ledger: CommLedger) -> float:
    """Cumulative dense-equivalent bytes over bytes actually sent."""
    if not ledger.records:
        raise EmptyLedger("no communication recorded")
    return ledger.dense_bytes / ledger.bytes_sent


def sparsification_ratio(ledger: CommLedger) -> float:
    if not ledger.records:
        raise EmptyLedger("no communication recorded")
    return ledger.dense_values / ledger.values_sent if ledger.values_sent else float("inf")


def _average(per_node: Sequence[Sequence[np.ndarray]]) -> list[np.ndarray]:
    # Fixed node-id order keeps the reduction bit-reproducible.
    n = len(per_node)
    total = [np.zeros_like(a) for a in per_node[0]]
    for arrays in per_node:
        if len(arrays) != len(total):
            raise ShapeMismatch("nodes disagree on the number of layers")
        for acc, a in zip(total, arrays):
            if acc.shape != a.shape:
                raise ShapeMismatch("nodes disagree on layer shapes")
            acc += a
    for acc in total:
        acc /= n
    return total


def sync(sparse_grads: Sequence[SparseModelGradient], node_count: int, specs: Sequence[LayerSpec]) -> ModelGradient:
    """Densify every node's sparse gradient and average them."""
    if len(sparse_grads) != node_count or node_count < 1:
        raise ShapeMismatch(f"{len(sparse_grads)} gradients for {node_count} nodes")
    dense = [densify(s, specs).arrays() for s in sparse_grads]
    return ModelGradient.from_arrays(specs, _average(dense))


class LocalResult(NamedTuple):
    loss: float
    accuracy: float
    dense_view: list[np.ndarray]
    bytes_sent: int
    values_sent: int
    kept_patches: list[int]


@dataclass(frozen=True)
class StepReport:
    iteration: int
    loss: float
    accuracy: float
    bytes_per_node: tuple[int, ...]
    kept_counts: tuple[tuple[int, ...], ...]
    node_losses: tuple[float, ...]


def _compress(node: NodeState, grad: ModelGradient, compression: CompressionConfig, density: float, t: int):
    kind = compression.kind
    specs = grad.specs
    if kind is CompressorKind.DENSE:
        g_total = sum(s.element_count for s in specs)
        return grad.arrays(), dense_wire_size_bytes(specs, compression.encoding), g_total, [1] * len(specs)
    if kind is CompressorKind.SIGN_1BIT:
        q = baselines.sign_quantize(grad, t)
        view = baselines.dequantize(q, specs).arrays()
        return view, baselines.quantized_wire_size_bytes(q), sum(s.element_count for s in specs), [1] * len(specs)
    if kind is CompressorKind.TOP_K:
        sparse = baselines.topk_sparsify(grad, density, t)
    elif kind is CompressorKind.RANDOM_K:
        seed = int(np.random.SeedSequence([node.seed, node.node_id, t]).generate_state(1)[0])
        sparse = baselines.randomk_sparsify(grad, density, seed, t)
    elif kind is CompressorKind.DGC:
        sparse = baselines.dgc_sparsify(node.accumulator, grad, density, t)
    else:
        if node.schedule is None:
            raise ValueError(f"node {node.node_id} has no ratio schedule")
        accumulated = accumulate(node.accumulator, grad)
        sparse = sparsify_model(accumulated, node.schedule, compression.nsi)
        sparse = SparseModelGradient(sparse.layers, t)
        commit_transmitted(node.accumulator, sparse)
    view = densify(sparse, specs).arrays()
    kept = [len(layer.kept) for layer in sparse.layers]
    return view, wire_size_bytes(sparse, compression.encoding), sparse.value_count, kept


def local_phase(node: NodeState, model: ModelSpec, compression: CompressionConfig, density: float, t: int):
    try:
        res = batch_step(model, node.weights, node.sampler.next_batch())
    except DivergedLoss as exc:
        raise DivergedLoss(f"node {node.node_id} at step {t}: {exc}") from None
    view, nbytes, nvalues, kept = _compress(node, res.grad, compression, density, t)
    return LocalResult(res.loss, res.accuracy, view, nbytes, nvalues, kept)


def replicas_identical(nodes: Sequence[NodeState]) -> bool:
    first = nodes[0].weights.values
    return all(
        all(np.array_equal(a, b) for a, b in zip(first, node.weights.values)) for node in nodes[1:]
    )


def apply_update(node: NodeState, update: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """In-place step on the node's replica; ``momentum`` 0 means plain SGD."""
    for w, v, g in zip(node.weights.values, node.velocity, update):
        if momentum:
            v *= momentum
            v += g
            w -= lr * v
        else:
            w -= lr * g


def train_step(nodes: Sequence[NodeState], model: ModelSpec, optimizer: OptimizerConfig,
               compression: CompressionConfig, ledger: CommLedger, t: int, *, epoch: int = 0,
               density: float | None = None, executor: Executor | None = None) -> StepReport:
    if not replicas_identical(nodes):
        raise AssertionError(f"replica weights diverged before step {t}")
    density = compression.density if density is None else density
    if executor is None:
        results = [local_phase(n, model, compression, density, t) for n in nodes]
    else:
        results = list(executor.map(lambda n: local_phase(n, model, compression, density, t), nodes))

    update = _average([r.dense_view for r in results])
    lr = optimizer.lr_at(epoch)
    momentum = 0.0 if compression.kind.uses_accumulator else optimizer.momentum
    for node in nodes:
        apply_update(node, update, lr, momentum)

    specs = model.layer_specs
    dense_bytes = dense_equivalent_bytes(specs, compression.encoding)
    dense_values = sum(s.element_count for s in specs)
    for node, r in zip(nodes, results):
        ledger.record(CommRecord(t, node.node_id, r.bytes_sent, dense_bytes, r.values_sent, dense_values))
    losses = tuple(r.loss for r in results)
    return StepReport(
        t,
        float(np.mean(losses)),
        float(np.mean([r.accuracy for r in results])),
        tuple(r.bytes_sent for r in results),
        tuple(tuple(r.kept_patches) for r in results),
        losses,
    )
