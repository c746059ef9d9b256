import numpy as np
import pytest

from utils.errors import DomainError, ValidationError, WindowError
from utils.geometry import GeometrySpec
from utils.normal_operator import NormalOpConfig
from utils.selftest import PROBE_TOLERANCE, check_probe, flat_symbol_oracle, h_consistency_slope
from utils.symbols import (
    GAUSSIAN_NORMALISATION,
    HIGHFREQ_CONSTANT,
    EllipticityPlan,
    certify_ellipticity,
    footprint_radius,
    gaussian_closed_form,
    highfreq_limit,
    plane_wave_probe,
    principal_symbol,
    scattering_principal,
    scattering_symbol,
    symbol_quadrature,
)


class TestPrincipalSymbol:
    @pytest.mark.parametrize("xi", [0.0, 1.0, 3.0])
    def test_closed_form_without_leaf_frequency(self, geometry, xi):
        value = gaussian_closed_form(geometry, geometry.c_M, xi, (0.0, 0.0))
        assert value == pytest.approx(2.0 * np.pi / np.sqrt(1.0 + xi**2), rel=1e-10)

    @pytest.mark.parametrize(
        "xi, eta", [(0.0, (0.0, 0.0)), (1.0, (0.0, 0.0)), (2.0, (3.0, -1.0))]
    )
    def test_matches_gaussian_closed_form(self, geometry, op_config, xi, eta):
        value = principal_symbol(geometry, op_config, geometry.c_M, xi, eta)
        reference = GAUSSIAN_NORMALISATION * gaussian_closed_form(geometry, geometry.c_M, xi, eta)
        assert abs(value) == pytest.approx(reference, rel=0.01)

    def test_transverse_decay_ratio(self, geometry, op_config):
        zero = principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
        one = principal_symbol(geometry, op_config, geometry.c_M, 1.0, (0.0, 0.0))
        assert abs(one) / abs(zero) == pytest.approx(2.0**-0.5, rel=0.005)

    def test_zero_frequency_is_real(self, geometry, op_config):
        value = principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
        assert abs(value.imag) <= 1e-10 * abs(value)
        assert value.real > 0.0

    def test_bad_eta(self, geometry, op_config):
        with pytest.raises(ValidationError):
            principal_symbol(geometry, op_config, geometry.c_M, 0.0, (1.0, 0.0, 0.0))

    @pytest.mark.parametrize(
        "xi, eta", [(0.0, (0.0, 0.0)), (1.0, (0.5, 0.0)), (2.0, (3.0, -1.0))]
    )
    def test_quadrature_in_t_matches_closed_form(self, geometry, op_config, xi, eta):
        closed = principal_symbol(geometry, op_config, geometry.c_M, xi, eta)
        summed = principal_symbol(
            geometry, op_config, geometry.c_M, xi, eta, t_method="quadrature"
        )
        assert abs(summed - closed) <= 1e-6 * abs(closed)

    def test_unknown_t_method(self, geometry, op_config):
        with pytest.raises(ValidationError):
            principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0), t_method="simpson")

    def test_conjugate_symmetry(self, geometry, op_config):
        z = geometry.c_M + np.array([0.3, -0.2, 0.1])
        value = principal_symbol(geometry, op_config, z, 1.5, (0.7, -0.4))
        mirrored = principal_symbol(geometry, op_config, z, -1.5, (-0.7, 0.4))
        assert abs(mirrored - np.conj(value)) <= 1e-10 * abs(value)

    def test_order_minus_one_decay(self, geometry, op_config):
        far = principal_symbol(geometry, op_config, geometry.c_M, 50.0, (0.0, 0.0))
        zero = principal_symbol(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
        assert abs(far) / abs(zero) <= 0.05

    @pytest.mark.slow
    @pytest.mark.parametrize("offset", [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.0, 0.4, 0.3)])
    def test_closed_form_over_frequency_grid(self, geometry, op_config, offset):
        z = geometry.c_M + np.asarray(offset)
        for xi in np.linspace(0.0, 3.0, 21):
            for e1 in np.linspace(0.0, 3.0, 21):
                value = principal_symbol(geometry, op_config, z, xi, (e1, 0.0))
                reference = GAUSSIAN_NORMALISATION * gaussian_closed_form(
                    geometry, z, xi, (e1, 0.0)
                )
                assert abs(value) == pytest.approx(reference, rel=0.01)

    @pytest.mark.slow
    def test_homogeneous_of_order_minus_one(self, geometry, op_config):
        for phi in np.linspace(0.0, np.pi, 8):
            direction = np.array([np.cos(phi), np.sin(phi), 0.0])
            scaled = []
            for radius in (40.0, 80.0):
                xi, e1, e2 = radius * direction
                value = principal_symbol(geometry, op_config, geometry.c_M, xi, (e1, e2))
                scaled.append(radius * abs(value))
            assert scaled[1] == pytest.approx(scaled[0], rel=0.1)


class TestGaussianClosedForm:
    def test_leaf_frequency_decay(self, geometry):
        near = gaussian_closed_form(geometry, geometry.c_M, 0.0, (40.0, 0.0))
        far = gaussian_closed_form(geometry, geometry.c_M, 0.0, (80.0, 0.0))
        assert near / far == pytest.approx(2.0, rel=0.05)

    def test_rotation_symmetry_at_centre(self, geometry):
        angle = 0.7
        plain = gaussian_closed_form(geometry, geometry.c_M, 1.0, (3.0, 0.0))
        turned = gaussian_closed_form(
            geometry, geometry.c_M, 1.0, (3.0 * np.cos(angle), 3.0 * np.sin(angle))
        )
        assert turned == pytest.approx(plain, rel=1e-12)


class TestHighFrequency:
    def test_transverse_direction(self, geometry, op_config):
        value = highfreq_limit(geometry, op_config, geometry.c_M, (1.0, 0.0, 0.0))
        assert value == pytest.approx(HIGHFREQ_CONSTANT, rel=1e-3)

    def test_leaf_direction(self, geometry, op_config):
        value = highfreq_limit(geometry, op_config, geometry.c_M, (0.0, 1.0, 0.0))
        assert value == pytest.approx(2.0 * np.sqrt(2.0 * np.pi), rel=1e-3)

    def test_direction_must_be_unit(self, geometry, op_config):
        with pytest.raises(ValidationError):
            highfreq_limit(geometry, op_config, geometry.c_M, (1.0, 1.0, 0.0))

    def test_principal_symbol_approaches_the_limit(self, geometry, op_config):
        value = principal_symbol(geometry, op_config, geometry.c_M, 100.0, (0.0, 0.0))
        assert 100.0 * abs(value) == pytest.approx(
            GAUSSIAN_NORMALISATION * HIGHFREQ_CONSTANT, rel=0.02
        )


class TestSymbolQuadrature:
    def test_flat_zero_frequency_oracle(self, geometry, op_config):
        value = symbol_quadrature(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0), 0.1)
        reference = flat_symbol_oracle(geometry, op_config, 0.1)
        assert value.real == pytest.approx(reference, rel=1e-3)
        assert abs(value.imag) <= 1e-6 * reference

    @pytest.mark.slow
    @pytest.mark.parametrize("xi, eta", [(0.0, (0.0, 0.0)), (1.0, (0.0, 0.0)), (0.0, (1.0, 0.0))])
    def test_small_h_approaches_principal(self, geometry, op_config, xi, eta):
        h = 0.01
        value = symbol_quadrature(geometry, op_config, geometry.c_M, xi, eta, h)
        principal = principal_symbol(geometry, op_config, geometry.c_M, xi, eta)
        assert abs(value) == pytest.approx(h * abs(principal), rel=0.03)

    @pytest.mark.slow
    def test_error_shrinks_with_h(self, geometry, op_config):
        slope, errors = h_consistency_slope(geometry, op_config, (0.2, 0.1, 0.05, 0.025))
        assert np.all(np.diff(errors) < 0.0)
        assert slope >= 0.5

    def test_h_out_of_range(self, geometry, op_config):
        with pytest.raises(ValidationError):
            symbol_quadrature(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0), 0.7)

    def test_point_outside_mprime(self, geometry, op_config):
        with pytest.raises(DomainError):
            symbol_quadrature(geometry, op_config, np.array([5.0, 0.0, 0.0]), 0.0, (0.0, 0.0), 0.1)


class TestScatteringSymbol:
    def test_principal_carries_x_squared(self, geometry, op_config):
        x = geometry.foliation(geometry.c_M)
        plain = principal_symbol(geometry, op_config, geometry.c_M, 1.0, (0.5, 0.0))
        scaled = scattering_principal(geometry, op_config, geometry.c_M, 1.0, (0.5, 0.0))
        assert scaled == pytest.approx(x * x * plain, rel=1e-12)

    def test_requires_positive_x(self, op_config):
        layer = GeometrySpec(offset=-4.0)
        with pytest.raises(DomainError):
            scattering_principal(layer, op_config, layer.c_M, 0.0, (0.0, 0.0))
        with pytest.raises(DomainError):
            scattering_symbol(layer, op_config, layer.c_M, 0.0, (0.0, 0.0), 0.1)

    def test_transverse_ratio(self, geometry, op_config):
        one = scattering_principal(geometry, op_config, geometry.c_M, 1.0, (0.0, 0.0))
        zero = scattering_principal(geometry, op_config, geometry.c_M, 0.0, (0.0, 0.0))
        assert abs(one) / abs(zero) == pytest.approx(2.0**-0.5, rel=0.005)

    def test_vanishes_as_x_goes_to_zero(self, op_config):
        thin = GeometrySpec(offset=1e-6 - 4.0)
        unit = GeometrySpec(offset=-3.0)
        small = scattering_principal(thin, op_config, thin.c_M, 0.0, (0.0, 0.0))
        reference = scattering_principal(unit, op_config, unit.c_M, 0.0, (0.0, 0.0))
        assert abs(small) <= 1e-10 * abs(reference)

    @pytest.mark.parametrize("xi", [0.0, 1.0])
    def test_small_h_approaches_principal(self, geometry, op_config, xi):
        h = 0.001
        value = scattering_symbol(geometry, op_config, geometry.c_M, xi, (0.0, 0.0), h)
        principal = scattering_principal(geometry, op_config, geometry.c_M, xi, (0.0, 0.0))
        assert abs(value) == pytest.approx(h * abs(principal), rel=0.02)


class TestProbe:
    def test_footprint_radius(self):
        points = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]])
        mass = np.array([0.5, 0.495, 0.005])
        assert footprint_radius(points, np.zeros(3), mass) == pytest.approx(2.0)
        assert footprint_radius(points, np.zeros(3), np.zeros(3)) == 0.0

    @pytest.mark.slow
    def test_probe_matches_symbol(self, geometry):
        row = check_probe(geometry, NormalOpConfig())
        assert row["passed"], row

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "offset",
        [(0.0, 0.0, 0.0), (0.2, 0.0, 0.0), (-0.2, 0.0, 0.0), (0.0, 0.2, 0.0), (0.0, 0.0, 0.2)],
    )
    def test_plane_wave_matches_symbol_near_centre(self, geometry, offset):
        op = NormalOpConfig(h=0.1)
        z = geometry.c_M + np.asarray(offset)
        wave = plane_wave_probe(op, geometry, z, 1.0, (1.0, 0.0))
        symbol = symbol_quadrature(geometry, op, z, 1.0, (1.0, 0.0), 0.1)
        assert abs(wave) == pytest.approx(abs(symbol), rel=PROBE_TOLERANCE)

    def test_footprint_beyond_boundary(self, geometry, op_config):
        z = geometry.c_M + np.array([0.9, 0.0, 0.0])
        with pytest.raises(WindowError):
            plane_wave_probe(op_config, geometry, z, 1.0, (1.0, 0.0))

    def test_point_outside_m(self, geometry, op_config):
        z = geometry.c_M + np.array([1.05, 0.0, 0.0])
        with pytest.raises(DomainError):
            plane_wave_probe(op_config, geometry, z, 1.0, (1.0, 0.0))


class TestEllipticity:
    def test_default_plan(self, geometry):
        plan = EllipticityPlan.default(geometry)
        plan.validate(geometry)
        directions = plan.directions()
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
        np.testing.assert_allclose(directions[0], [1.0, 0.0, 0.0])
        assert directions[-1][0] == pytest.approx(-1.0)
        assert len(plan.frequencies()) == 1 + 5 * plan.n_directions

    def test_plan_must_reach_high_frequency(self, geometry):
        with pytest.raises(ValidationError):
            EllipticityPlan(points=(tuple(geometry.c_M),), radii=(0, 1, 10)).validate(geometry)

    def test_plan_points_in_m(self, geometry):
        plan = EllipticityPlan(points=((5.0, 0.0, 0.0),))
        with pytest.raises(ValidationError):
            plan.validate(geometry)

    @pytest.mark.slow
    def test_gaussian_cutoff_is_elliptic(self, geometry, op_config):
        plan = EllipticityPlan(points=(tuple(geometry.c_M),), radii=(0, 1, 10, 100), n_directions=4)
        certificate = certify_ellipticity(geometry, op_config, plan)
        assert certificate.passed
        assert certificate.n_samples == 13
        assert certificate.c_min > certificate.threshold

    @pytest.mark.slow
    def test_shifted_cutoff_loses_ellipticity(self, geometry, shifted_cutoff):
        op = NormalOpConfig(h=0.2, cutoff=shifted_cutoff, n_lambda=12, n_omega=24)
        plan = EllipticityPlan(points=(tuple(geometry.c_M),), radii=(0, 1, 10, 100), n_directions=4)
        certificate = certify_ellipticity(geometry, op, plan)
        assert not certificate.passed
        assert set(certificate.minimizer) == {"z", "xi", "eta"}
        assert certificate.to_dict()["normalised"] <= 0.01
