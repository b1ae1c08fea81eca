"""Neighborhood-statistics patch scoring and per-layer top-k patch selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    LayerGradient,
    ModelGradient,
    PatchPartition,
    SparseLayerGradient,
    SparseModelGradient,
    build_partition,
    count_for_density,
    sparse_from_selection,
)
from .errors import NonFinite, ShapeMismatch


@dataclass(frozen=True)
class NsiConfig:
    alpha: float = 0.5
    patch_size: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")


@dataclass(frozen=True)
class PatchScore:
    patch_index: int
    mean_abs: float
    std: float
    nsi: float


def patch_statistics(values: np.ndarray, partition: PatchPartition) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch mean of |g| and population standard deviation of g.

    Each patch is normalized by its own element count, so truncated edge
    patches are not diluted by padding.
    """
    if not np.all(np.isfinite(values)):
        raise NonFinite(f"layer {partition.spec.layer_id} contains NaN/Inf")
    index, mask = partition.gather
    n = partition.counts
    block = np.where(mask, values[index], 0.0)
    mean_abs = np.abs(block).sum(axis=1) / n
    mean = block.sum(axis=1) / n
    dev = np.where(mask, block - mean[:, None], 0.0)
    std = np.sqrt((dev * dev).sum(axis=1) / n)
    return mean_abs, std


def nsi_values(values: np.ndarray, partition: PatchPartition, alpha: float) -> np.ndarray:
    mean_abs, std = patch_statistics(values, partition)
    return alpha * mean_abs + (1.0 - alpha) * std


def score_patches(layer: LayerGradient, partition: PatchPartition, config: NsiConfig) -> list[PatchScore]:
    if partition.spec.element_count != layer.spec.element_count:
        raise ShapeMismatch(f"partition of layer {partition.spec.layer_id} does not fit layer {layer.spec.layer_id}")
    mean_abs, std = patch_statistics(layer.values, partition)
    nsi = config.alpha * mean_abs + (1.0 - config.alpha) * std
    return [
        PatchScore(k, float(mean_abs[k]), float(std[k]), float(nsi[k]))
        for k in range(partition.num_patches)
    ]


def keep_count(partition: PatchPartition, density: float) -> int:
    """Number of patches to keep at ``density``: ceil(K * density).

    K is the number of patches, which equals element_count / p**2 whenever the
    tiling is exact; counting real patches keeps density 1 lossless when edge
    tiles are truncated.
    """
    return count_for_density(partition.num_patches, density)


def top_patches(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, lower index first among equals, sorted ascending."""
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:k])


def sparsify_layer(
    layer: LayerGradient, partition: PatchPartition, config: NsiConfig, density: float
) -> SparseLayerGradient:
    k = keep_count(partition, density)
    if k == 0:
        if not np.all(np.isfinite(layer.values)):
            raise NonFinite(f"layer {layer.spec.layer_id} contains NaN/Inf")
        return SparseLayerGradient(layer.spec.layer_id, (), partition.spec.patch_size)
    if k == partition.num_patches:
        selected = np.arange(k)
    else:
        selected = top_patches(nsi_values(layer.values, partition, config.alpha), k)
    return sparse_from_selection(layer, partition, selected)


def sparsify_model(grad: ModelGradient, schedule, config: NsiConfig) -> SparseModelGradient:
    """Apply :func:`sparsify_layer` to every layer at the density ``schedule`` assigns it.

    ``schedule`` is a :class:`~rsdgc.schedule.RatioSchedule` or any mapping
    from layer_id to density.
    """
    densities = getattr(schedule, "per_layer_density", schedule)
    out = []
    for layer in grad.layers:
        spec = layer.spec.with_patch_size(config.patch_size)
        try:
            density = densities[spec.layer_id]
        except KeyError:
            raise ShapeMismatch(f"schedule has no density for layer {spec.layer_id}") from None
        out.append(sparsify_layer(layer, build_partition(spec), config, density))
    return SparseModelGradient(tuple(out), getattr(schedule, "computed_at_epoch", 0))
