import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle_scores, oracle_tiles, oracle_top, random_spec
from rsdgc.core import LayerGradient, LayerSpec, ModelGradient, build_partition, densify
from rsdgc.errors import NonFinite
from rsdgc.nsi import (
    NsiConfig,
    keep_count,
    patch_statistics,
    score_patches,
    sparsify_layer,
    sparsify_model,
)
from rsdgc.schedule import RatioSchedule


def _layer(spec, values):
    return LayerGradient(spec, values)


class TestScorePatches:
    @pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
    def test_zero_patch(self, alpha):
        spec = LayerSpec(1, "conv", (1, 1, 3, 3), 3)
        (score,) = score_patches(_layer(spec, np.zeros(9)), build_partition(spec), NsiConfig(alpha))
        assert (score.mean_abs, score.std, score.nsi) == (0.0, 0.0, 0.0)

    def test_constant_patch(self):
        spec = LayerSpec(1, "conv", (1, 1, 3, 3), 3)
        (score,) = score_patches(_layer(spec, np.full(9, 0.5)), build_partition(spec), NsiConfig(0.3))
        assert score.mean_abs == 0.5
        assert score.std == 0.0
        assert score.nsi == pytest.approx(0.15, abs=1e-15)

    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
    def test_alternating_patch(self, alpha):
        spec = LayerSpec(1, "dense", (2, 2), 2)
        (score,) = score_patches(_layer(spec, [1.0, -1.0, 1.0, -1.0]), build_partition(spec), NsiConfig(alpha))
        assert score.mean_abs == 1.0
        assert score.std == 1.0
        assert score.nsi == 1.0

    def test_edge_patches_use_true_count(self):
        spec = LayerSpec(1, "dense", (4, 5), 3)
        values = np.arange(20.0) - 7
        scores = score_patches(_layer(spec, values), build_partition(spec), NsiConfig(0.4))
        expected = oracle_scores(values, oracle_tiles(spec), 0.4)
        assert [s.nsi for s in scores] == pytest.approx(expected, rel=1e-12)
        # patch 3 holds flat 18, 19 -> values 11, 12
        assert scores[3].mean_abs == 11.5
        assert scores[3].std == 0.5

    def test_nonfinite(self):
        spec = LayerSpec(1, "bias", (4,), 1)
        with pytest.raises(NonFinite):
            patch_statistics(np.array([0.0, np.inf, 1.0, 2.0]), build_partition(spec))

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            NsiConfig(alpha=1.5)


class TestKeepCount:
    def test_half_of_one_kernel(self):
        assert keep_count(build_partition(LayerSpec(1, "conv", (1, 1, 3, 3), 3)), 0.5) == 1

    def test_zero(self):
        assert keep_count(build_partition(LayerSpec(1, "conv", (4, 2, 3, 3), 3)), 0.0) == 0

    def test_one(self):
        part = build_partition(LayerSpec(1, "dense", (7, 11), 3))
        assert keep_count(part, 1.0) == part.num_patches == 12

    def test_exact_tiling_matches_element_formula(self):
        # 8 kernels of 3x3: 72 / 9 * 0.3 = 2.4 -> 3
        assert keep_count(build_partition(LayerSpec(1, "conv", (8, 1, 3, 3), 3)), 0.3) == 3


class TestSparsifyLayer:
    def test_larger_kernel_wins(self):
        spec = LayerSpec(1, "conv", (2, 1, 3, 3), 3)
        values = np.concatenate([np.full(9, 0.1), np.full(9, 0.9)])
        sparse = sparsify_layer(_layer(spec, values), build_partition(spec), NsiConfig(1.0), 0.5)
        assert sparse.patch_indices == [1]
        assert np.array_equal(sparse.kept[0][1], np.full(9, 0.9))

    def test_density_one_is_lossless(self):
        spec = LayerSpec(1, "dense", (5, 7), 2)
        values = np.random.default_rng(0).normal(size=35)
        sparse = sparsify_layer(_layer(spec, values), build_partition(spec), NsiConfig(), 1.0)
        assert np.array_equal(densify(_model_sparse(sparse), [spec]).layers[0].values, values)

    def test_tie_goes_to_lower_index(self):
        spec = LayerSpec(1, "conv", (3, 1, 3, 3), 3)
        values = np.concatenate([np.full(9, 0.2), np.full(9, 0.5), np.full(9, 0.5)])
        sparse = sparsify_layer(_layer(spec, values), build_partition(spec), NsiConfig(0.5), 0.2)
        assert sparse.patch_indices == [1]

    def test_kept_values_are_raw(self):
        rng = np.random.default_rng(1)
        spec = LayerSpec(1, "dense", (6, 6), 3)
        values = rng.normal(size=36)
        part = build_partition(spec)
        sparse = sparsify_layer(_layer(spec, values), part, NsiConfig(), 0.5)
        for k, v in sparse.kept:
            assert np.array_equal(v, values[part.patch_element_indices[k]])

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(7)
        for seed in range(200):
            spec = random_spec(rng)
            alpha = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
            density = float(rng.uniform(0, 1))
            values = rng.normal(size=spec.element_count) * rng.uniform(0.01, 10)
            part = build_partition(spec)
            got = sparsify_layer(_layer(spec, values), part, NsiConfig(alpha, spec.patch_size), density)
            tiles = oracle_tiles(spec)
            expected = oracle_top(oracle_scores(values, tiles, alpha), keep_count(part, density))
            assert got.patch_indices == expected, seed


def _model_sparse(layer_sparse):
    from rsdgc.core import SparseModelGradient

    return SparseModelGradient((layer_sparse,))


class TestSparsifyModel:
    def _grad(self):
        specs = [LayerSpec(1, "conv", (4, 1, 3, 3), 3), LayerSpec(2, "dense", (5, 4), 3)]
        rng = np.random.default_rng(3)
        return ModelGradient.from_arrays(specs, (rng.normal(size=s.element_count) for s in specs))

    def test_all_zero_schedule(self):
        grad = self._grad()
        sparse = sparsify_model(grad, RatioSchedule.uniform(grad.specs, 0.0), NsiConfig())
        assert all(not layer.kept for layer in sparse.layers)

    def test_all_one_schedule(self):
        grad = self._grad()
        sparse = sparsify_model(grad, RatioSchedule.uniform(grad.specs, 1.0), NsiConfig())
        for a, b in zip(grad.layers, densify(sparse, grad.specs).layers):
            assert np.array_equal(a.values, b.values)

    def test_mixed_schedule(self):
        grad = self._grad()
        sparse = sparsify_model(grad, {1: 1.0, 2: 0.0}, NsiConfig())
        assert sparse.layers[0].patch_indices == [0, 1, 2, 3]
        assert sparse.layers[1].kept == ()
        dense = densify(sparse, grad.specs)
        assert np.array_equal(dense.layers[0].values, grad.layers[0].values)
        assert not dense.layers[1].values.any()

    def test_patch_size_from_config(self):
        grad = self._grad()
        sparse = sparsify_model(grad, RatioSchedule.uniform(grad.specs, 1.0), NsiConfig(0.5, 1))
        assert len(sparse.layers[0].kept) == 36
        assert all(layer.patch_size == 1 for layer in sparse.layers)


_shape = st.tuples(st.integers(1, 9), st.integers(1, 9))


@settings(max_examples=150, deadline=None)
@given(shape=_shape, p=st.integers(1, 3), seed=st.integers(0, 2**32 - 1),
       density=st.floats(0.01, 1.0), scale=st.floats(0.01, 100.0))
def test_selection_is_scale_invariant(shape, p, seed, density, scale):
    spec = LayerSpec(1, "dense", shape, p)
    values = np.random.default_rng(seed).normal(size=spec.element_count)
    part = build_partition(spec)
    cfg = NsiConfig(0.5, p)
    base = sparsify_layer(LayerGradient(spec, values), part, cfg, density).patch_indices
    scaled_scores = score_patches(LayerGradient(spec, values * scale), part, cfg)
    for s, t in zip(score_patches(LayerGradient(spec, values), part, cfg), scaled_scores):
        assert t.nsi == pytest.approx(s.nsi * scale, rel=1e-9, abs=1e-300)
    # power-of-two scaling is exact in floating point, so the selection must not move
    scaled = sparsify_layer(LayerGradient(spec, values * 4.0), part, cfg, density).patch_indices
    assert scaled == base


@settings(max_examples=150, deadline=None)
@given(shape=_shape, p=st.integers(1, 3), seed=st.integers(0, 2**32 - 1), density=st.floats(0.0, 1.0))
def test_alpha_extremes_rank_by_single_statistic(shape, p, seed, density):
    spec = LayerSpec(1, "dense", shape, p)
    values = np.random.default_rng(seed).normal(size=spec.element_count)
    part = build_partition(spec)
    k = keep_count(part, density)
    stats = score_patches(LayerGradient(spec, values), part, NsiConfig(0.5, p))
    by_mean = oracle_top([s.mean_abs for s in stats], k)
    by_std = oracle_top([s.std for s in stats], k)
    assert sparsify_layer(LayerGradient(spec, values), part, NsiConfig(1.0, p), density).patch_indices == by_mean
    assert sparsify_layer(LayerGradient(spec, values), part, NsiConfig(0.0, p), density).patch_indices == by_std


@settings(max_examples=100, deadline=None)
@given(shape=_shape, p=st.integers(1, 3), seed=st.integers(0, 2**32 - 1), density=st.floats(0.0, 1.0))
def test_kept_element_count_conserved(shape, p, seed, density):
    spec = LayerSpec(1, "dense", shape, p)
    values = np.random.default_rng(seed).normal(size=spec.element_count)
    part = build_partition(spec)
    sparse = sparsify_layer(LayerGradient(spec, values), part, NsiConfig(0.5, p), density)
    assert sparse.value_count == sum(int(part.counts[k]) for k in sparse.patch_indices)
    assert len(sparse.kept) == keep_count(part, density)
