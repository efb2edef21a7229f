"""Sampling-layer constraint tests: hand cases plus brute-force oracles."""

import math

import numpy as np
import pytest

from dsmm.errors import ShapeError, ValidationError
from dsmm.sampling import (
    MeasurementMatrix,
    SamplingLayerState,
    constrained_matrix,
    gradient_modulation,
    measurement_dim,
    normalization_derivative,
    normalize_row,
    sample_image,
    sparsity_constraint,
)
from dsmm.seeding import stream


def brute_force_sparsify(weights, degree):
    """Oracle: zero the z smallest magnitudes, lowest flat index first on ties."""
    flat = weights.reshape(-1).copy()
    z = int(round((1.0 - degree) * flat.size))
    z = min(max(z, 0), flat.size)
    # Sort by (magnitude, flat index); python sort is exact on tuples.
    order = sorted(range(flat.size), key=lambda i: (abs(flat[i]), i))
    threshold = 0.0
    for rank in range(z):
        threshold = abs(flat[order[rank]])
        flat[order[rank]] = 0.0
    return flat.reshape(weights.shape), threshold


class TestSparsityConstraint:
    def test_hand_case(self):
        w = np.array([[3.0, -1.0], [0.5, -2.0]])
        out, thr = sparsity_constraint(w, 0.5)       # zero 2 of 4
        assert np.array_equal(out, [[3.0, 0.0], [0.0, -2.0]])
        assert thr == 1.0

    def test_degree_one_is_identity(self):
        w = np.arange(6.0).reshape(2, 3) - 2.5
        out, thr = sparsity_constraint(w, 1.0)
        assert np.array_equal(out, w)
        assert thr == 0.0

    def test_ties_break_by_flat_index(self):
        w = np.array([[1.0, -1.0, 1.0, -1.0]])
        out, thr = sparsity_constraint(w, 0.5)
        assert np.array_equal(out, [[0.0, 0.0, 1.0, -1.0]])
        assert thr == 1.0

    def test_rounding_half_even(self):
        # 10 entries, degree 0.25 -> z = round(7.5) = 8 under banker's rounding.
        w = np.arange(1.0, 11.0).reshape(2, 5)
        out, _ = sparsity_constraint(w, 0.25)
        assert np.count_nonzero(out) == 2

    @pytest.mark.parametrize("degree", [0.01, 0.05, 0.2, 0.5, 0.9, 1.0])
    def test_matches_brute_force(self, degree):
        for seed in range(10):
            w = stream(seed, "sparsify-test").standard_normal((9, 16))
            got, got_thr = sparsity_constraint(w, degree)
            want, want_thr = brute_force_sparsify(w, degree)
            assert np.array_equal(got, want)
            assert got_thr == want_thr

    def test_survivors_keep_exact_values(self):
        w = stream(0, "sparsify-test", 99).standard_normal((4, 8))
        out, _ = sparsity_constraint(w, 0.4)
        mask = out != 0
        assert np.array_equal(out[mask], w[mask])

    def test_input_not_mutated(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        before = w.copy()
        sparsity_constraint(w, 0.5)
        assert np.array_equal(w, before)

    def test_degree_out_of_range(self):
        with pytest.raises(ValidationError):
            sparsity_constraint(np.ones((2, 2)), 1.5)


class TestRowNormalization:
    def test_unit_norm(self):
        row, dead = normalize_row(np.array([3.0, 4.0]))
        assert not dead
        assert math.isclose(np.linalg.norm(row), 1.0, rel_tol=0, abs_tol=1e-15)
        assert np.allclose(row, [0.6, 0.8])

    def test_dead_row_passes_through(self):
        row, dead = normalize_row(np.zeros(4))
        assert dead
        assert np.array_equal(row, np.zeros(4))

    def test_near_dead_row_flagged(self):
        row, dead = normalize_row(np.full(4, 1e-9))
        assert dead

    def test_derivative_is_norm_scaled_jacobian_diagonal(self):
        # The modulation factor (sqrt(w) - s^2/sqrt(w)) / sqrt(w) is not the
        # calculus derivative of s -> s/sqrt(w): it equals the Jacobian
        # diagonal multiplied by the row norm.  Verify that exact relation
        # against finite differences of the actual normalization.
        rng = stream(1, "normderiv-test")
        for _ in range(5):
            row = rng.standard_normal(8)
            deriv = normalization_derivative(row)
            norm = np.linalg.norm(row)
            eps = 1e-6
            for j in range(row.size):
                plus, minus = row.copy(), row.copy()
                plus[j] += eps
                minus[j] -= eps
                num = (normalize_row(plus)[0][j] - normalize_row(minus)[0][j]) / (2 * eps)
                assert abs(deriv[j] - norm * num) < 1e-6

    def test_derivative_equals_algebraic_form(self):
        row = stream(2, "normderiv-test").standard_normal(16)
        w = float(np.sum(row * row))
        expected = 1.0 - row * row / w
        assert np.max(np.abs(normalization_derivative(row) - expected)) < 1e-12

    def test_derivative_dead_row_is_ones(self):
        assert np.array_equal(normalization_derivative(np.zeros(5)), np.ones(5))


class TestConstrainedMatrix:
    def make_state(self, seed, n_b=6, block=4, degree=0.5):
        rng = stream(seed, "state-test")
        return SamplingLayerState.initialize(n_b, block, degree, rng)

    @pytest.mark.parametrize("degree", [0.01, 0.2, 0.5, 1.0])
    def test_nonzero_count_exact(self, degree):
        state = self.make_state(3, degree=degree)
        phi = constrained_matrix(state)
        total = state.raw_weights.size
        expected = total - int(round((1.0 - degree) * total))
        assert phi.nonzero_count() == expected

    def test_rows_unit_norm_or_dead(self):
        state = self.make_state(4)
        phi = constrained_matrix(state)
        assert phi.validate_norms(tol=1e-9)

    def test_idempotent(self):
        state = self.make_state(5)
        phi = constrained_matrix(state)
        again = SamplingLayerState(raw_weights=phi.entries.copy(),
                                   sparsity_degree=state.sparsity_degree)
        phi2 = constrained_matrix(again)
        assert np.max(np.abs(phi2.entries - phi.entries)) < 1e-15

    def test_raw_weights_untouched(self):
        state = self.make_state(6)
        before = state.raw_weights.copy()
        constrained_matrix(state)
        assert np.array_equal(state.raw_weights, before)

    def test_gradient_modulation_shape_and_dead_rows(self):
        state = self.make_state(7, n_b=3, block=2, degree=0.4)
        mod = gradient_modulation(state)
        assert mod.shape == state.raw_weights.shape
        sparsified, _ = sparsity_constraint(state.raw_weights, 0.4)
        for i in range(3):
            if np.sum(sparsified[i] ** 2) < 1e-12:
                assert np.array_equal(mod[i], np.ones(4))


class TestMeasurementMatrix:
    def test_rejects_bad_block_geometry(self):
        with pytest.raises(ValidationError):
            MeasurementMatrix(n_b=2, n_B=15, block_size=4, sparsity_degree=0.5,
                              entries=np.zeros((2, 15)), provenance="learned")

    def test_rejects_entry_shape(self):
        with pytest.raises(ShapeError):
            MeasurementMatrix(n_b=2, n_B=16, block_size=4, sparsity_degree=0.5,
                              entries=np.zeros((3, 16)), provenance="learned")

    def test_rejects_unknown_provenance(self):
        with pytest.raises(ValidationError):
            MeasurementMatrix(n_b=2, n_B=16, block_size=4, sparsity_degree=0.5,
                              entries=np.zeros((2, 16)), provenance="mystery")

    def test_kernel_layout_row_major(self):
        entries = np.arange(32.0).reshape(2, 16)
        phi = MeasurementMatrix(n_b=2, n_B=16, block_size=4, sparsity_degree=1.0,
                                entries=entries, provenance="imported")
        kern = phi.as_kernels()
        assert kern.shape == (2, 1, 4, 4)
        assert np.array_equal(kern[1, 0], entries[1].reshape(4, 4))


class TestSampleImage:
    def dense_oracle(self, image, matrix, block):
        h, w = image.shape[-2:]
        out = np.zeros((image.shape[0], matrix.shape[0], h // block, w // block))
        for s in range(image.shape[0]):
            for bi in range(h // block):
                for bj in range(w // block):
                    vec = image[s, 0, bi * block:(bi + 1) * block,
                                bj * block:(bj + 1) * block].reshape(-1)
                    out[s, :, bi, bj] = matrix @ vec
        return out

    def test_matches_dense_oracle(self):
        rng = stream(8, "sample-test")
        img = rng.standard_normal((2, 1, 16, 16))
        entries = rng.standard_normal((10, 64))
        phi = MeasurementMatrix(n_b=10, n_B=64, block_size=8, sparsity_degree=1.0,
                                entries=entries, provenance="imported")
        got = sample_image(img, phi)
        want = self.dense_oracle(img, entries, 8)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_rejects_non_multiple_extent(self):
        phi = MeasurementMatrix(n_b=4, n_B=16, block_size=4, sparsity_degree=1.0,
                                entries=np.ones((4, 16)), provenance="imported")
        with pytest.raises(ValidationError):
            sample_image(np.zeros((1, 1, 10, 10)), phi)

    def test_noise_reproducible_by_seed(self):
        phi = MeasurementMatrix(n_b=4, n_B=16, block_size=4, sparsity_degree=1.0,
                                entries=np.ones((4, 16)), provenance="imported")
        img = np.ones((1, 1, 8, 8))
        a = sample_image(img, phi, noise_sigma=0.1, rng_seed=5)
        b = sample_image(img, phi, noise_sigma=0.1, rng_seed=5)
        c = sample_image(img, phi, noise_sigma=0.1, rng_seed=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestMeasurementDim:
    def test_floor_behaviour(self):
        assert measurement_dim(0.1, 32) == 102
        assert measurement_dim(0.25, 8) == 16
        assert measurement_dim(1.0, 8) == 64

    def test_rejects_zero_rows(self):
        with pytest.raises(ValidationError):
            measurement_dim(0.001, 8)

    def test_rejects_ratio_above_one(self):
        with pytest.raises(ValidationError):
            measurement_dim(1.5, 8)


class TestInitialize:
    def test_weight_scale(self):
        state = SamplingLayerState.initialize(256, 32, 0.5, stream(0, "init-test"))
        # Var = 1/n_B = 1/1024; the sample std over 256*1024 draws should sit close.
        std = float(np.std(state.raw_weights))
        assert abs(std - 1.0 / 32.0) < 0.002

    def test_geometry_properties(self):
        state = SamplingLayerState.initialize(6, 4, 0.3, stream(1, "init-test"))
        assert state.n_b == 6
        assert state.n_B == 16
        assert state.block_size == 4
