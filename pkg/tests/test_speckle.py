"""Speckle statistics, dataset construction, determinism."""
import numpy as np
import pytest

from specklediff.speckle import (
    ImagePair,
    SpeckleParams,
    apply_speckle,
    make_dataset,
    pair_rng,
    sample_speckle,
    synthetic_textures,
)
from specklediff.validation import ShapeError


class TestSampleSpeckle:
    def test_unit_mean_large_sample(self):
        for looks in (1.0, 4.0):
            field = sample_speckle((1000, 1000), SpeckleParams(looks=looks, seed=1))
            assert abs(field.mean() - 1.0) < 0.005

    def test_variance_is_inverse_looks(self):
        field = sample_speckle((1000, 1000), SpeckleParams(looks=4.0, seed=2))
        assert abs(field.var() / 0.25 - 1.0) < 0.05

    def test_single_look_is_exponential(self):
        # Gamma(1, 1) is Exp(1): P(N > 1) = 1/e.
        field = sample_speckle((1000, 1000), SpeckleParams(looks=1.0, seed=3))
        p = float((field > 1.0).mean())
        assert abs(p - np.exp(-1.0)) < 0.003

    def test_all_positive(self):
        field = sample_speckle((256, 256), SpeckleParams(looks=1.0, seed=4))
        assert np.all(field > 0)

    def test_rejects_low_looks(self):
        with pytest.raises(ValueError, match="looks"):
            SpeckleParams(looks=0.5)

    def test_rejects_empty_shape(self):
        with pytest.raises(ShapeError):
            sample_speckle((), SpeckleParams())

    def test_deterministic_in_seed(self):
        a = sample_speckle((64, 64), SpeckleParams(looks=2.0, seed=9))
        b = sample_speckle((64, 64), SpeckleParams(looks=2.0, seed=9))
        assert a.tobytes() == b.tobytes()


class TestApplySpeckle:
    def test_unit_field_is_identity(self):
        clean = np.random.default_rng(0).uniform(0, 1, (16, 16)).astype(np.float32)
        np.testing.assert_array_equal(apply_speckle(clean, np.ones((16, 16))), clean)

    def test_zero_clean_is_annihilated(self):
        field = sample_speckle((8, 8), SpeckleParams(seed=1))
        assert np.all(apply_speckle(np.zeros((8, 8)), field) == 0)

    def test_elementwise_product_and_clip(self):
        clean = np.array([[0.5, 0.9]])
        field = np.array([[1.2, 2.0]])
        out = apply_speckle(clean, field)
        np.testing.assert_allclose(out, [[0.6, 1.0]], rtol=1e-6)

    def test_preclip_division_recovers_field(self):
        rng = np.random.default_rng(5)
        clean = rng.uniform(0.1, 0.9, (32, 32)).astype(np.float32)
        field = sample_speckle((32, 32), SpeckleParams(seed=6))
        raw = apply_speckle(clean, field, clip=False)
        np.testing.assert_allclose(raw / clean, field, rtol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_speckle(np.zeros((4, 4)), np.ones((5, 5)))


class TestMakeDataset:
    def _sources(self):
        return synthetic_textures(3, 48, seed=0)

    def test_cardinality_and_shape(self):
        pairs = make_dataset(self._sources(), SpeckleParams(), 32, 100, seed=0)
        assert len(pairs) == 100
        assert all(p.clean.shape == (32, 32) and p.speckled.shape == (32, 32) for p in pairs)

    def test_pairs_reconstruct_from_rng_key(self):
        params = SpeckleParams(looks=1.0)
        pairs = make_dataset(self._sources(), params, 16, 10, seed=42)
        for pair in pairs:
            seed, idx = pair.rng_key
            rng = pair_rng(seed, idx)
            rng.integers(3)  # source selection
            rng.integers(48 - 16 + 1)
            rng.integers(48 - 16 + 1)
            field = sample_speckle((16, 16), params, rng)
            np.testing.assert_array_equal(pair.speckled, apply_speckle(pair.clean, field))

    def test_deterministic_in_seed(self):
        a = make_dataset(self._sources(), SpeckleParams(), 16, 20, seed=7)
        b = make_dataset(self._sources(), SpeckleParams(), 16, 20, seed=7)
        for pa, pb in zip(a, b):
            assert pa.clean.tobytes() == pb.clean.tobytes()
            assert pa.speckled.tobytes() == pb.speckled.tobytes()

    def test_unit_mean_of_preclip_products(self):
        # constant 0.5 image: mean of clean*field over many patches -> 0.5
        src = [np.full((16, 16), 0.5, np.float32)]
        params = SpeckleParams(looks=1.0)
        pairs = make_dataset(src, params, 8, 10_000, seed=3)
        total = 0.0
        for pair in pairs:
            seed, idx = pair.rng_key
            rng = pair_rng(seed, idx)
            rng.integers(1)
            rng.integers(9)
            rng.integers(9)
            field = sample_speckle((8, 8), params, rng)
            total += float((pair.clean * field).mean())
        assert abs(total / len(pairs) - 0.5) < 0.005

    def test_small_images_skipped_with_warning(self):
        srcs = [np.full((8, 8), 0.5), np.full((32, 32), 0.5)]
        with pytest.warns(UserWarning, match="skipping"):
            pairs = make_dataset(srcs, SpeckleParams(), 16, 5, seed=0)
        assert len(pairs) == 5

    def test_empty_sources_error(self):
        with pytest.raises(ValueError, match="empty"):
            make_dataset([], SpeckleParams(), 16, 5, seed=0)

    def test_all_too_small_error(self):
        with pytest.raises(ValueError, match="admits"):
            with pytest.warns(UserWarning):
                make_dataset([np.full((8, 8), 0.5)], SpeckleParams(), 16, 5, seed=0)


def test_synthetic_textures_range_and_determinism():
    texs = synthetic_textures(8, 32, seed=5)
    assert len(texs) == 8
    for t in texs:
        assert t.shape == (32, 32)
        assert t.min() >= 0.1 - 1e-6 and t.max() <= 0.9 + 1e-6
    again = synthetic_textures(8, 32, seed=5)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(texs, again))
