"""Gradient tensors, neighborhood tiling and the sparse on-wire representation.

Every layer gradient is handled as a flat float64 vector in row-major order of
its declared shape.  Selection works on a 2-D view of that vector cut into
disjoint tiles ("patches"); the view is always a plain reshape, so a tile's
flat indices are computed without copying data.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import IndexMismatch, NonFinite, ShapeMismatch

_HEADER = struct.Struct("<II")
_INDEX = struct.Struct("<I")


class LayerKind(str, enum.Enum):
    CONV = "conv"
    DENSE = "dense"
    BIAS = "bias"


_RANK = {LayerKind.CONV: 4, LayerKind.DENSE: 2, LayerKind.BIAS: 1}


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    kind: LayerKind
    shape: tuple[int, ...]
    patch_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if len(self.shape) != _RANK[self.kind]:
            raise ShapeMismatch(f"{self.kind.value} layer needs {_RANK[self.kind]} dims, got {self.shape}")
        if any(d < 1 for d in self.shape):
            raise ShapeMismatch(f"layer {self.layer_id}: non-positive dimension in {self.shape}")
        if self.patch_size < 1:
            raise ValueError(f"layer {self.layer_id}: patch_size must be >= 1")

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    def with_patch_size(self, p: int) -> "LayerSpec":
        if p == self.patch_size:
            return self
        return LayerSpec(self.layer_id, self.kind, self.shape, p)

    def view_2d(self) -> tuple[int, int]:
        """Rows and columns of the plane the gradient is tiled on."""
        if self.kind is LayerKind.CONV:
            n, c, kh, kw = self.shape
            return n * c * kh, kw
        if self.kind is LayerKind.DENSE:
            return self.shape
        return 1, self.shape[0]

    def tile_2d(self) -> tuple[int, int]:
        p = self.patch_size
        if self.kind is LayerKind.BIAS:
            return 1, p * p
        return p, p


def _readonly(values, length: int | None = None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if length is not None and arr.size != length:
        raise ShapeMismatch(f"expected {length} values, got {arr.size}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LayerGradient:
    spec: LayerSpec
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values, self.spec.element_count)
        if not np.all(np.isfinite(values)):
            raise NonFinite(f"layer {self.spec.layer_id} contains NaN/Inf")
        object.__setattr__(self, "values", values)

    def reshaped(self) -> np.ndarray:
        return self.values.reshape(self.spec.shape)


@dataclass(frozen=True)
class ModelGradient:
    layers: tuple[LayerGradient, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @classmethod
    def from_arrays(cls, specs: Sequence[LayerSpec], arrays: Iterable) -> "ModelGradient":
        arrays = list(arrays)
        if len(arrays) != len(specs):
            raise ShapeMismatch(f"{len(arrays)} arrays for {len(specs)} layers")
        return cls(tuple(LayerGradient(s, a) for s, a in zip(specs, arrays)))

    @classmethod
    def zeros(cls, specs: Sequence[LayerSpec]) -> "ModelGradient":
        return cls.from_arrays(specs, (np.zeros(s.element_count) for s in specs))

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [layer.values for layer in self.layers]

    def check_matches(self, specs: Sequence[LayerSpec]) -> None:
        if len(specs) != len(self.layers):
            raise ShapeMismatch(f"{len(self.layers)} layers for {len(specs)} specs")
        for spec, layer in zip(specs, self.layers):
            if spec.layer_id != layer.spec.layer_id or spec.shape != layer.spec.shape:
                raise ShapeMismatch(f"layer {layer.spec.layer_id} does not match spec {spec}")

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class PatchPartition:
    spec: LayerSpec
    grid_rows: int
    grid_cols: int
    patch_element_indices: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def num_patches(self) -> int:
        return len(self.patch_element_indices)

    @cached_property
    def counts(self) -> np.ndarray:
        counts = np.array([len(ix) for ix in self.patch_element_indices], dtype=np.int64)
        counts.setflags(write=False)
        return counts

    @cached_property
    def gather(self) -> tuple[np.ndarray, np.ndarray]:
        """(K, max_count) index matrix padded with 0 and the matching validity mask."""
        width = int(self.counts.max())
        index = np.zeros((self.num_patches, width), dtype=np.int64)
        mask = np.zeros((self.num_patches, width), dtype=bool)
        for k, ix in enumerate(self.patch_element_indices):
            index[k, : len(ix)] = ix
            mask[k, : len(ix)] = True
        return index, mask

    def patch_of_element(self) -> np.ndarray:
        owner = np.empty(self.spec.element_count, dtype=np.int64)
        for k, ix in enumerate(self.patch_element_indices):
            owner[ix] = k
        return owner


@lru_cache(maxsize=1024)
def build_partition(spec: LayerSpec) -> PatchPartition:
    """Tile the layer's 2-D view into disjoint patches, ordered row-major over the grid.

    Edge tiles are truncated rather than padded.  Within a patch, indices are
    in row-major order of the tile.
    """
    rows, cols = spec.view_2d()
    th, tw = spec.tile_2d()
    grid_rows, grid_cols = -(-rows // th), -(-cols // tw)
    flat = np.arange(rows * cols, dtype=np.int64).reshape(rows, cols)
    patches = []
    for gr in range(grid_rows):
        for gc in range(grid_cols):
            block = flat[gr * th : (gr + 1) * th, gc * tw : (gc + 1) * tw].reshape(-1).copy()
            block.setflags(write=False)
            patches.append(block)
    return PatchPartition(spec, grid_rows, grid_cols, tuple(patches))


@dataclass(frozen=True)
class SparseLayerGradient:
    layer_id: int
    kept: tuple[tuple[int, np.ndarray], ...] = ()
    # Tiling the patch indices refer to; not carried on the wire.
    patch_size: int = 3

    def __post_init__(self):
        kept = tuple((int(k), _readonly(v)) for k, v in self.kept)
        for (a, _), (b, _) in zip(kept, kept[1:]):
            if b <= a:
                raise IndexMismatch(f"layer {self.layer_id}: patch indices not strictly increasing")
        object.__setattr__(self, "kept", kept)

    @property
    def patch_indices(self) -> list[int]:
        return [k for k, _ in self.kept]

    @property
    def value_count(self) -> int:
        return sum(len(v) for _, v in self.kept)


@dataclass(frozen=True)
class SparseModelGradient:
    layers: tuple[SparseLayerGradient, ...]
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def value_count(self) -> int:
        return sum(layer.value_count for layer in self.layers)


def count_for_density(total: int, density: float) -> int:
    """ceil(total * density), clamped to [0, total] and nonzero for any density > 0.

    The product is rounded to 9 decimals first so that e.g. 100 * 0.07 gives 7,
    not 8.
    """
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    if density == 0.0 or total == 0:
        return 0
    return min(total, max(1, math.ceil(round(total * density, 9))))


def sparse_from_selection(
    layer: LayerGradient, partition: PatchPartition, selected: Iterable[int]
) -> SparseLayerGradient:
    values = layer.values
    kept = tuple((int(k), values[partition.patch_element_indices[k]]) for k in sorted(selected))
    return SparseLayerGradient(layer.spec.layer_id, kept, partition.spec.patch_size)


def densify_layer(sparse: SparseLayerGradient, spec: LayerSpec) -> np.ndarray:
    partition = build_partition(spec.with_patch_size(sparse.patch_size))
    out = np.zeros(spec.element_count)
    for k, values in sparse.kept:
        if not 0 <= k < partition.num_patches:
            raise IndexMismatch(f"layer {spec.layer_id}: patch {k} outside {partition.num_patches} patches")
        ix = partition.patch_element_indices[k]
        if len(values) != len(ix):
            raise ShapeMismatch(f"layer {spec.layer_id}: patch {k} has {len(values)} values, expected {len(ix)}")
        out[ix] = values
    return out


def densify(sparse: SparseModelGradient, specs: Sequence[LayerSpec]) -> ModelGradient:
    if len(sparse.layers) != len(specs):
        raise ShapeMismatch(f"{len(sparse.layers)} sparse layers for {len(specs)} specs")
    arrays = []
    for layer, spec in zip(sparse.layers, specs):
        if layer.layer_id != spec.layer_id:
            raise ShapeMismatch(f"sparse layer {layer.layer_id} paired with spec {spec.layer_id}")
        arrays.append(densify_layer(layer, spec))
    return ModelGradient.from_arrays(specs, arrays)


@dataclass(frozen=True)
class EncodingConfig:
    value_bytes: int = 4
    index_bytes: int = 4
    header_bytes: int = 8


def wire_size_bytes(sparse: SparseModelGradient, encoding: EncodingConfig = EncodingConfig()) -> int:
    total = 0
    for layer in sparse.layers:
        total += encoding.header_bytes
        for _, values in layer.kept:
            total += encoding.index_bytes + len(values) * encoding.value_bytes
    return total


def dense_wire_size_bytes(specs: Sequence[LayerSpec], encoding: EncodingConfig = EncodingConfig()) -> int:
    """Bytes to ship every value of every layer, with the same per-layer header."""
    return sum(encoding.header_bytes + s.element_count * encoding.value_bytes for s in specs)


def dense_equivalent_bytes(specs: Sequence[LayerSpec], encoding: EncodingConfig = EncodingConfig()) -> int:
    return sum(s.element_count * encoding.value_bytes for s in specs)


def encode_sparse(sparse: SparseModelGradient) -> bytes:
    """Serialize to the little-endian u32/f32 wire format."""
    chunks = []
    for layer in sparse.layers:
        chunks.append(_HEADER.pack(layer.layer_id, len(layer.kept)))
        for k, values in layer.kept:
            chunks.append(_INDEX.pack(k))
            chunks.append(values.astype("<f4").tobytes())
    return b"".join(chunks)


def decode_sparse(data: bytes, specs: Sequence[LayerSpec], iteration: int = 0) -> SparseModelGradient:
    """Inverse of :func:`encode_sparse`; values come back rounded to float32."""
    offset = 0
    layers = []
    for spec in specs:
        layer_id, count = _HEADER.unpack_from(data, offset)
        offset += _HEADER.size
        if layer_id != spec.layer_id:
            raise ShapeMismatch(f"wire layer {layer_id} where {spec.layer_id} was expected")
        partition = build_partition(spec)
        kept = []
        for _ in range(count):
            (k,) = _INDEX.unpack_from(data, offset)
            offset += _INDEX.size
            if k >= partition.num_patches:
                raise IndexMismatch(f"layer {layer_id}: patch {k} outside {partition.num_patches} patches")
            n = len(partition.patch_element_indices[k])
            kept.append((k, np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64)))
            offset += 4 * n
        layers.append(SparseLayerGradient(layer_id, tuple(kept), spec.patch_size))
    if offset != len(data):
        raise ShapeMismatch(f"{len(data) - offset} trailing bytes after last layer")
    return SparseModelGradient(tuple(layers), iteration)
