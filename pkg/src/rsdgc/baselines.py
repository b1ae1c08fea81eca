"""Reference compressors: element-wise Top-k, Random-k, DGC and 1-bit sign quantization.

The sparsifiers reuse the p=1 tiling, so their output is a regular
:class:`SparseModelGradient` where every "patch" is one element and the patch
index is the flat index.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .accumulator import AccumulatorState, accumulate, commit_transmitted
from .core import (
    LayerSpec,
    ModelGradient,
    SparseModelGradient,
    build_partition,
    count_for_density,
    sparse_from_selection,
)
from .errors import ShapeMismatch
from .nsi import top_patches

_QHEADER = struct.Struct("<IfI")


class CompressorKind(str, enum.Enum):
    RS_DGC = "rs_dgc"
    TOP_K = "top_k"
    RANDOM_K = "random_k"
    DGC = "dgc"
    SIGN_1BIT = "sign_1bit"
    DENSE = "dense"

    @property
    def uses_accumulator(self) -> bool:
        return self in (CompressorKind.RS_DGC, CompressorKind.DGC)

    @property
    def is_sparse(self) -> bool:
        return self not in (CompressorKind.SIGN_1BIT, CompressorKind.DENSE)


def _elementwise(spec: LayerSpec):
    return build_partition(spec.with_patch_size(1))


def topk_sparsify(grad: ModelGradient, density: float, iteration: int = 0) -> SparseModelGradient:
    layers = []
    for layer in grad.layers:
        partition = _elementwise(layer.spec)
        k = count_for_density(layer.spec.element_count, density)
        layers.append(sparse_from_selection(layer, partition, top_patches(np.abs(layer.values), k)))
    return SparseModelGradient(tuple(layers), iteration)


def randomk_sparsify(grad: ModelGradient, density: float, rng_seed: int, iteration: int = 0) -> SparseModelGradient:
    """Uniform choice of k distinct elements per layer; the stream is keyed on (rng_seed, layer_id)."""
    layers = []
    for layer in grad.layers:
        g = layer.spec.element_count
        k = count_for_density(g, density)
        rng = np.random.default_rng([rng_seed, layer.spec.layer_id])
        chosen = rng.choice(g, size=k, replace=False) if k < g else np.arange(g)
        layers.append(sparse_from_selection(layer, _elementwise(layer.spec), chosen))
    return SparseModelGradient(tuple(layers), iteration)


def dgc_sparsify(state: AccumulatorState, grad: ModelGradient, density: float, iteration: int = 0):
    accumulated = accumulate(state, grad)
    sparse = topk_sparsify(accumulated, density, iteration)
    commit_transmitted(state, sparse)
    return sparse


@dataclass(frozen=True)
class QuantizedLayer:
    layer_id: int
    scale: float
    negative: np.ndarray  # one bool per element, True where g < 0

    @property
    def bit_count(self) -> int:
        return int(self.negative.size)


@dataclass(frozen=True)
class QuantizedModelGradient:
    layers: tuple[QuantizedLayer, ...]
    iteration: int = 0


def sign_quantize(grad: ModelGradient, iteration: int = 0) -> QuantizedModelGradient:
    layers = []
    for layer in grad.layers:
        values = layer.values
        scale = float(np.abs(values).mean())
        negative = values < 0
        negative.setflags(write=False)
        layers.append(QuantizedLayer(layer.spec.layer_id, scale, negative))
    return QuantizedModelGradient(tuple(layers), iteration)


def dequantize(quantized: QuantizedModelGradient, specs: Sequence[LayerSpec]) -> ModelGradient:
    if len(quantized.layers) != len(specs):
        raise ShapeMismatch(f"{len(quantized.layers)} quantized layers for {len(specs)} specs")
    arrays = []
    for q, spec in zip(quantized.layers, specs):
        if q.bit_count != spec.element_count or q.layer_id != spec.layer_id:
            raise ShapeMismatch(f"quantized layer {q.layer_id} does not match spec {spec.layer_id}")
        arrays.append(np.where(q.negative, -q.scale, q.scale))
    return ModelGradient.from_arrays(specs, arrays)


def quantized_wire_size_bytes(quantized: QuantizedModelGradient) -> int:
    return sum(_QHEADER.size + math.ceil(q.bit_count / 8) for q in quantized.layers)


def encode_quantized(quantized: QuantizedModelGradient) -> bytes:
    """u32 layer_id, f32 scale, u32 bit_count, then sign bits packed LSB-first (1 = negative)."""
    chunks = []
    for q in quantized.layers:
        chunks.append(_QHEADER.pack(q.layer_id, q.scale, q.bit_count))
        chunks.append(np.packbits(q.negative, bitorder="little").tobytes())
    return b"".join(chunks)


def decode_quantized(data: bytes, iteration: int = 0) -> QuantizedModelGradient:
    offset = 0
    layers = []
    while offset < len(data):
        layer_id, scale, bits = _QHEADER.unpack_from(data, offset)
        offset += _QHEADER.size
        nbytes = math.ceil(bits / 8)
        packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=offset)
        offset += nbytes
        negative = np.unpackbits(packed, count=bits, bitorder="little").astype(bool)
        layers.append(QuantizedLayer(layer_id, float(scale), negative))
    return QuantizedModelGradient(tuple(layers), iteration)
