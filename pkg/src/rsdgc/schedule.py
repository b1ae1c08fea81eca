"""Layer-wise keep densities from a global magnitude ranking of the model weights."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import LayerSpec
from .errors import EmptyModel, NonFinite, ShapeMismatch


@dataclass(frozen=True)
class ModelWeights:
    """Flat per-layer weight arrays, laid out exactly like the model's gradients."""

    specs: tuple[LayerSpec, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        specs = tuple(self.specs)
        values = tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in self.values)
        if len(specs) != len(values):
            raise ShapeMismatch(f"{len(values)} weight arrays for {len(specs)} layers")
        for spec, v in zip(specs, values):
            if v.size != spec.element_count:
                raise ShapeMismatch(f"layer {spec.layer_id}: {v.size} weights for shape {spec.shape}")
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "values", values)

    @property
    def layers(self):
        return list(zip(self.specs, self.values))

    @property
    def total(self) -> int:
        return sum(s.element_count for s in self.specs)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.specs, tuple(v.copy() for v in self.values))

    def reshaped(self) -> list[np.ndarray]:
        return [v.reshape(s.shape) for s, v in zip(self.specs, self.values)]


@dataclass(frozen=True)
class RatioSchedule:
    per_layer_density: Mapping[int, float]
    global_density: float
    computed_at_epoch: int = 0
    # Weights surviving the global cut per layer; None for schedules not built by ranking.
    kept_per_layer: Mapping[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        for layer_id, d in self.per_layer_density.items():
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"layer {layer_id}: density {d} outside [0, 1]")

    @classmethod
    def uniform(cls, specs: Sequence[LayerSpec], density: float, epoch: int = 0) -> "RatioSchedule":
        return cls({s.layer_id: density for s in specs}, density, epoch)

    def __getitem__(self, layer_id: int) -> float:
        return self.per_layer_density[layer_id]


def budget(global_density: float, total: int) -> int:
    """round(p * total), halves rounded up."""
    return int(math.floor(round(global_density * total, 9) + 0.5))


def compute_schedule(weights: ModelWeights, global_density: float, epoch: int = 0) -> RatioSchedule:
    """Keep the top round(p * G) weights by |w| across all layers; p_l is each layer's survival fraction.

    Ties at the cut go to the earlier (layer, flat index) position.
    """
    if not 0.0 < global_density <= 1.0:
        raise ValueError(f"global density must lie in (0, 1], got {global_density}")
    if not weights.specs or weights.total == 0:
        raise EmptyModel("no weights to rank")
    magnitudes = np.abs(np.concatenate(weights.values))
    if not np.all(np.isfinite(magnitudes)):
        raise NonFinite("weights contain NaN/Inf")
    n_keep = budget(global_density, magnitudes.size)
    order = np.argsort(-magnitudes, kind="stable")
    owner = np.repeat(np.arange(len(weights.specs)), [s.element_count for s in weights.specs])
    kept = np.bincount(owner[order[:n_keep]], minlength=len(weights.specs))
    densities = {}
    kept_per_layer = {}
    for spec, count in zip(weights.specs, kept):
        kept_per_layer[spec.layer_id] = int(count)
        densities[spec.layer_id] = int(count) / spec.element_count
    return RatioSchedule(densities, global_density, epoch, kept_per_layer)


@dataclass(frozen=True)
class RecomputePolicy:
    period_epochs: int = 1

    def __post_init__(self):
        if self.period_epochs < 1:
            raise ValueError("period_epochs must be >= 1")


def should_recompute(epoch: int, policy: RecomputePolicy) -> bool:
    return epoch % policy.period_epochs == 0


def write_schedule_rows(path, schedules: Sequence[RatioSchedule], specs: Sequence[LayerSpec]) -> None:
    """Dump (epoch, layer_id, G_l, kept, p_l) rows for each schedule."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "layer_id", "G_l", "kept", "p_l"])
        for sched in schedules:
            for spec in specs:
                g = spec.element_count
                density = sched.per_layer_density[spec.layer_id]
                if sched.kept_per_layer is not None:
                    kept = sched.kept_per_layer[spec.layer_id]
                else:
                    kept = round(density * g)
                writer.writerow([sched.computed_at_epoch, spec.layer_id, g, kept, repr(density)])
