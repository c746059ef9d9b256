import numpy as np
import pytest

from utils.errors import ValidationError
from utils.grid import RegularGrid, SplineField, cubic_bspline_weights, spline_nodal_values


class TestCubicWeights:
    def test_node_values(self):
        np.testing.assert_allclose(cubic_bspline_weights(0.0), [1 / 6, 2 / 3, 1 / 6, 0.0])
        np.testing.assert_allclose(cubic_bspline_weights(1.0), [0.0, 1 / 6, 2 / 3, 1 / 6])

    def test_partition_of_unity(self):
        t = np.linspace(0.0, 1.0, 11)
        np.testing.assert_allclose(cubic_bspline_weights(t).sum(axis=-1), 1.0, rtol=1e-14)


class TestSplineStencil:
    def test_interior_weights_sum_to_one(self, geometry, small_grid, rng):
        points = geometry.c_M + rng.uniform(-0.7, 0.7, size=(200, 3))
        indices, weights = small_grid.spline_stencil(points)
        assert indices.shape == weights.shape == (200, 64)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, rtol=1e-12)

    def test_reproduces_linear_fields(self, geometry, small_grid, rng):
        nodes = small_grid.nodes()
        coefficients = nodes @ np.array([1.0, -2.0, 0.5])
        points = geometry.c_M + rng.uniform(-0.7, 0.7, size=(50, 3))
        values = SplineField(small_grid, coefficients)(points)
        np.testing.assert_allclose(values, points @ np.array([1.0, -2.0, 0.5]), rtol=1e-12)

    def test_outside_the_box(self, small_grid):
        _, weights = small_grid.spline_stencil(np.array([[10.0, 0.0, 0.0]]))
        assert np.all(weights == 0.0)

    def test_unknown_basis(self, geometry, small_grid):
        with pytest.raises(ValidationError):
            small_grid.basis_stencil(geometry.c_M[None, :], "quintic")

    def test_trilinear_basis_is_the_plain_stencil(self, geometry, small_grid):
        point = geometry.c_M[None, :] + 0.05
        for got, expected in zip(small_grid.basis_stencil(point), small_grid.stencil(point)):
            np.testing.assert_array_equal(got, expected)


class TestSplineField:
    def test_nodal_values_match_evaluation(self, small_grid, rng):
        field = SplineField(small_grid, rng.normal(size=small_grid.dims))
        expected = field(small_grid.nodes()).reshape(small_grid.dims)
        np.testing.assert_allclose(field.nodal_values(), expected, rtol=1e-12, atol=1e-14)

    def test_single_coefficient(self):
        grid = RegularGrid(origin=(0.0, 0.0, 0.0), spacing=1.0, dims=(5, 5, 5))
        coefficients = np.zeros(grid.dims)
        coefficients[2, 2, 2] = 6.0**3
        values = spline_nodal_values(grid, coefficients)
        assert values[2, 2, 2] == pytest.approx(64.0)
        assert values[1, 2, 2] == pytest.approx(16.0)
        assert values[1, 1, 1] == pytest.approx(1.0)
        assert values[0, 2, 2] == 0.0
