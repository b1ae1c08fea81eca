"""Per-node momentum-corrected gradient accumulation.

``accumulate`` runs u <- m*u + g, v <- v + u and hands back v for selection.
``commit_transmitted`` clears v wherever a patch was sent.  The momentum
buffer u is cleared too only when ``momentum_masking`` is on (the DGC
behaviour); by default u keeps running, so at density 1 the transmitted v
is exactly the classical momentum buffer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LayerSpec, ModelGradient, SparseModelGradient, build_partition
from .errors import IndexMismatch, ShapeMismatch


@dataclass
class AccumulatorState:
    node_id: int
    specs: tuple[LayerSpec, ...]
    momentum: float = 0.9
    momentum_masking: bool = False
    momentum_buf: list[np.ndarray] = field(default_factory=list)
    residual_buf: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        self.specs = tuple(self.specs)
        if not self.momentum_buf:
            self.momentum_buf = [np.zeros(s.element_count) for s in self.specs]
        if not self.residual_buf:
            self.residual_buf = [np.zeros(s.element_count) for s in self.specs]
        for buf in (self.momentum_buf, self.residual_buf):
            if [b.size for b in buf] != [s.element_count for s in self.specs]:
                raise ShapeMismatch("accumulator buffers do not match layer specs")


def accumulate(state: AccumulatorState, grad: ModelGradient) -> ModelGradient:
    try:
        grad.check_matches(state.specs)
    except ShapeMismatch as exc:
        raise ShapeMismatch(f"node {state.node_id}: {exc}") from None
    m = state.momentum
    for u, v, layer in zip(state.momentum_buf, state.residual_buf, grad.layers):
        u *= m
        u += layer.values
        v += u
    return ModelGradient.from_arrays(state.specs, (v.copy() for v in state.residual_buf))


def commit_transmitted(state: AccumulatorState, sparse: SparseModelGradient) -> None:
    if len(sparse.layers) != len(state.specs):
        raise ShapeMismatch(f"node {state.node_id}: {len(sparse.layers)} sparse layers for {len(state.specs)}")
    for spec, layer, u, v in zip(state.specs, sparse.layers, state.momentum_buf, state.residual_buf):
        if not layer.kept:
            continue
        partition = build_partition(spec.with_patch_size(layer.patch_size))
        for k, _ in layer.kept:
            if not 0 <= k < partition.num_patches:
                raise IndexMismatch(f"layer {spec.layer_id}: patch {k} outside {partition.num_patches} patches")
            ix = partition.patch_element_indices[k]
            v[ix] = 0.0
            if state.momentum_masking:
                u[ix] = 0.0
