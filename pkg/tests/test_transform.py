import numpy as np
import pytest

from utils.errors import CoverageError, DomainError, ValidationError
from utils.geometry import GeometrySpec, leaf_frame
from utils.grid import GridFunction, RegularGrid
from utils.phantoms import (
    GaussianBump,
    SmoothedIndicator,
    SumOfBumps,
    build_phantom,
    check_support,
    stability_family,
)
from utils.transform import Sinogram, forward_sinogram, ray_velocities, xray, xray_batch


class TestXray:
    def test_gaussian_bump_matches_closed_form(self, geometry, bump, rng):
        n = 1000
        z = geometry.c_M + 0.3 * rng.uniform(-1.0, 1.0, size=(n, 3))
        lam = rng.uniform(-2.0, 2.0, size=n)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        v = ray_velocities(geometry, z, lam, theta)
        numeric = xray_batch(geometry, bump, z, v, step=5e-3)
        exact = bump.line_integral(z, v)
        np.testing.assert_allclose(numeric, exact, rtol=1e-6, atol=1e-9)

    def test_single_ray(self, geometry, bump):
        z = geometry.c_M
        e1, _ = leaf_frame(geometry, z)
        value = xray(geometry, bump, z, 0.0, e1, step=5e-3)
        assert value == pytest.approx(0.2 * np.sqrt(np.pi), rel=1e-6)

    def test_reversed_geodesic_gives_the_same_integral(self, conformal, rng):
        bump = GaussianBump(tuple(conformal.c_M + np.array([0.1, 0.1, 0.0])), 0.2)
        z = conformal.c_M + 0.3 * rng.uniform(-1.0, 1.0, size=(50, 3))
        v = ray_velocities(
            conformal, z, rng.uniform(-1.0, 1.0, size=50), rng.uniform(0.0, 2.0 * np.pi, size=50)
        )
        forward = xray_batch(conformal, bump, z, v, step=5e-3)
        backward = xray_batch(conformal, bump, z, -v, step=5e-3)
        np.testing.assert_allclose(backward, forward, rtol=1e-7, atol=1e-12)

    def test_step_halving_converges(self, geometry, bump, rng):
        z = geometry.c_M + 0.3 * rng.uniform(-1.0, 1.0, size=(50, 3))
        v = ray_velocities(
            geometry, z, rng.uniform(-2.0, 2.0, size=50), rng.uniform(0.0, 2.0 * np.pi, size=50)
        )
        coarse = xray_batch(geometry, bump, z, v, step=1e-2)
        fine = xray_batch(geometry, bump, z, v, step=5e-3)
        assert np.max(np.abs(coarse - fine)) <= 1e-8 * np.max(np.abs(fine))

    def test_smoothed_indicator(self, geometry):
        phantom = SmoothedIndicator(tuple(geometry.c_M), 0.6, 0.2)
        z = geometry.c_M + np.array([0.0, 0.1, 0.2])
        v = ray_velocities(geometry, z[None, :], np.array([0.5]), np.array([0.3]))
        numeric = xray_batch(geometry, phantom, z[None, :], v, step=2e-3)[0]
        assert numeric == pytest.approx(phantom.line_integral(z, v[0]), rel=1e-4)

    def test_grid_function_is_interpolated(self, geometry):
        grid = RegularGrid.covering(geometry, 9)
        ones = GridFunction.sample(geometry, grid, lambda p: np.ones(p.shape[0]), domain="Mprime")
        z = geometry.c_M
        e1, _ = leaf_frame(geometry, z)
        assert xray(geometry, ones, z, 0.0, e1, step=1e-3) > 1.5

    def test_foreign_grid_function_is_rejected(self, geometry):
        other = GeometrySpec(radius_Mprime=1.2)
        grid = RegularGrid.covering(other, 5)
        f = GridFunction.zeros(other, grid)
        e1, _ = leaf_frame(geometry, geometry.c_M)
        with pytest.raises(ValidationError):
            xray(geometry, f, geometry.c_M, 0.0, e1)


class TestSinogram:
    def test_forward_sinogram_shape_and_values(self, geometry, bump):
        base = geometry.c_M + np.array([[0.0, 0.0, 0.0], [0.0, 0.2, 0.0]])
        lam = np.linspace(-1.0, 1.0, 5)
        theta = 2.0 * np.pi * np.arange(8) / 8
        d = forward_sinogram(geometry, bump, base, lam, theta, step=5e-3, workers=2)
        assert d.shape == (2, 5, 8)
        assert d.geometry_hash == geometry.geometry_hash()
        v = ray_velocities(geometry, base[1], lam[3], theta[2])
        assert d.data[1, 3, 2] == pytest.approx(float(bump.line_integral(base[1], v)), rel=1e-6)

    def test_interpolation_reproduces_nodes(self, geometry, bump):
        base = geometry.c_M[None, :]
        lam = np.linspace(-1.0, 1.0, 5)
        theta = 2.0 * np.pi * np.arange(8) / 8
        d = forward_sinogram(geometry, bump, base, lam, theta)
        values = d.interpolate(0, lam[:, None], theta[None, :])
        np.testing.assert_allclose(values, d.data[0])

    def test_sinogram_is_linear(self, geometry):
        first = GaussianBump(tuple(geometry.c_M), 0.2)
        second = GaussianBump(tuple(geometry.c_M + np.array([0.0, 0.3, -0.2])), 0.15)
        combined = SumOfBumps(
            (
                GaussianBump(first.center, first.width, 2.0),
                GaussianBump(second.center, second.width, -0.5),
            )
        )
        base = geometry.c_M + np.array([[0.0, 0.0, 0.0], [0.2, -0.1, 0.0]])
        lam = np.linspace(-1.0, 1.0, 5)
        theta = 2.0 * np.pi * np.arange(8) / 8
        d1, d2, d = (
            forward_sinogram(geometry, f, base, lam, theta, step=1e-2)
            for f in (first, second, combined)
        )
        expected = 2.0 * d1.data - 0.5 * d2.data
        assert np.max(np.abs(d.data - expected)) <= 1e-12 * np.max(np.abs(expected))

    def test_interpolation_outside_lambda_range(self, geometry, bump):
        d = forward_sinogram(
            geometry, bump, geometry.c_M[None, :], np.linspace(-1, 1, 3), np.arange(4) * np.pi / 2
        )
        with pytest.raises(CoverageError):
            d.interpolate(0, np.array([2.0]), np.array([0.0]))

    def test_missing_base_point(self, geometry, bump):
        d = forward_sinogram(
            geometry, bump, geometry.c_M[None, :], np.linspace(-1, 1, 3), np.arange(4) * np.pi / 2
        )
        with pytest.raises(CoverageError):
            d.base_index(geometry.c_M + 0.1)

    def test_inconsistent_shape(self):
        with pytest.raises(ValidationError):
            Sinogram(np.zeros((1, 3)), np.zeros(4), np.zeros(5), np.zeros((1, 4, 4)), "")

    def test_non_finite_data(self):
        data = np.full((1, 2, 2), np.nan)
        with pytest.raises(ValidationError):
            Sinogram(np.zeros((1, 3)), np.zeros(2), np.zeros(2), data, "")

    def test_base_points_outside_mprime(self, geometry, bump):
        with pytest.raises(ValidationError):
            forward_sinogram(geometry, bump, np.array([[5.0, 0.0, 0.0]]), [0.0], [0.0])


class TestPhantoms:
    def test_build_known_kinds(self, geometry):
        for kind in ("gaussian_bump", "sum_of_bumps", "smoothed_indicator"):
            phantom = build_phantom(kind, geometry.c_M, 0.15)
            assert phantom(geometry.c_M[None, :]).shape == (1,)

    def test_unknown_kind(self, geometry):
        with pytest.raises(ValidationError):
            build_phantom("cube", geometry.c_M, 0.2)

    def test_support_is_checked_against_the_geometry(self, geometry):
        build_phantom("gaussian_bump", (2.9, 0.0, 0.0), 0.2)
        with pytest.raises(DomainError):
            build_phantom("gaussian_bump", (2.9, 0.0, 0.0), 0.2, geometry=geometry)
        with pytest.raises(DomainError):
            build_phantom("sum_of_bumps", geometry.c_M, 0.2, separation=1.8, geometry=geometry)

    def test_support_check(self, geometry):
        check_support(GaussianBump(tuple(geometry.c_M), 0.2), geometry)
        with pytest.raises(DomainError):
            check_support(GaussianBump(tuple(geometry.c_M + 0.5), 0.2), geometry)

    def test_stability_family_is_deterministic(self, geometry):
        first = stability_family(geometry, 5, seed=7)
        second = stability_family(geometry, 5, seed=7)
        assert first == second
        for phantom in first:
            check_support(phantom, geometry)
