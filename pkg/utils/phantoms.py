"""
Analytic phantom families and their line-integral oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from utils.errors import DomainError, ValidationError

# exp(-r^2 / sigma^2) < 1e-9 beyond this many widths
GAUSSIAN_SUPPORT_WIDTHS = 4.56


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1"""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(u > 0.0, np.exp(-1.0 / np.where(u > 0.0, u, 1.0)), 0.0)
        b = np.where(u < 1.0, np.exp(-1.0 / np.where(u < 1.0, 1.0 - u, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class GaussianBump:
    center: tuple
    width: float
    amplitude: float = 1.0

    kind = "gaussian_bump"

    def evaluate(self, points):
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        return self.amplitude * np.exp(-np.sum(d * d, axis=-1) / self.width**2)

    def __call__(self, points):
        return self.evaluate(points)

    def support_radius(self):
        return GAUSSIAN_SUPPORT_WIDTHS * self.width

    def line_integral(self, z, v):
        """Closed form of the integral over t of f(z + t v) on the whole line"""
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = np.linalg.norm(v, axis=-1)
        u = v / speed[..., None] if np.ndim(speed) else v / speed
        d = z - np.asarray(self.center)
        along = np.sum(d * u, axis=-1)
        dist_sq = np.sum(d * d, axis=-1) - along**2
        return (
            self.amplitude
            * self.width
            * np.sqrt(np.pi)
            * np.exp(-dist_sq / self.width**2)
            / speed
        )


@dataclass(frozen=True)
class SumOfBumps:
    bumps: tuple

    kind = "sum_of_bumps"

    def evaluate(self, points):
        return sum(b.evaluate(points) for b in self.bumps)

    def __call__(self, points):
        return self.evaluate(points)

    def line_integral(self, z, v):
        return sum(b.line_integral(z, v) for b in self.bumps)

    def check_support(self, geometry):
        for bump in self.bumps:
            check_support(bump, geometry)


@dataclass(frozen=True)
class SmoothedIndicator:
    """1 on the ball of radius (radius - width), 0 outside the ball of radius `radius`"""

    center: tuple
    radius: float
    width: float
    amplitude: float = 1.0

    kind = "smoothed_indicator"

    def profile(self, r):
        return self.amplitude * smooth_step((self.radius - np.asarray(r)) / self.width)

    def evaluate(self, points):
        d = np.asarray(points, dtype=float) - np.asarray(self.center)
        return self.profile(np.linalg.norm(d, axis=-1))

    def __call__(self, points):
        return self.evaluate(points)

    def support_radius(self):
        return self.radius

    def line_integral(self, z, v):
        """1-D adaptive quadrature of the radial profile along the line"""
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        speed = float(np.linalg.norm(v))
        u = v / speed
        d = z - np.asarray(self.center)
        along = float(d @ u)
        dist_sq = max(float(d @ d) - along**2, 0.0)
        if dist_sq >= self.radius**2:
            return 0.0
        half = np.sqrt(self.radius**2 - dist_sq)

        def integrand(s):
            return float(self.profile(np.sqrt(dist_sq + s * s)))

        value, _ = quad(integrand, -half, half, epsabs=1e-13, epsrel=1e-12, limit=200)
        return value / speed


def check_support(phantom, geometry):
    """Raise unless the phantom support lies inside M"""
    if isinstance(phantom, SumOfBumps):
        phantom.check_support(geometry)
        return
    dist = np.linalg.norm(np.asarray(phantom.center) - geometry.c_M)
    reach = dist + phantom.support_radius()
    if reach > geometry.radius_M:
        raise DomainError(
            f"{phantom.kind} reaches {reach:.4g} from the centre of M, "
            f"beyond radius {geometry.radius_M}"
        )


def build_phantom(
    kind, center, width, amplitude=1.0, radius=0.9, separation=0.6, geometry=None
):
    """
    Build a phantom from flat parameters

    Args:
        kind: gaussian_bump | sum_of_bumps | smoothed_indicator
        center: Centre point
        width: Gaussian width or smoothing width
        amplitude: Peak value
        radius: Outer radius of the smoothed indicator
        separation: Distance between the two bumps of sum_of_bumps
        geometry: When given, the support must lie inside its M

    Returns:
        Phantom instance

    Raises:
        DomainError: Support leaves M
    """
    center = tuple(float(c) for c in center)
    phantom = _make_phantom(kind, center, width, amplitude, radius, separation)
    if geometry is not None:
        check_support(phantom, geometry)
    return phantom


def _make_phantom(kind, center, width, amplitude, radius, separation):
    if kind == "gaussian_bump":
        return GaussianBump(center, width, amplitude)
    if kind == "sum_of_bumps":
        offset = np.array([0.0, 0.5 * separation, 0.0])
        return SumOfBumps(
            (
                GaussianBump(tuple(np.asarray(center) - offset), width, amplitude),
                GaussianBump(tuple(np.asarray(center) + offset), width, amplitude),
            )
        )
    if kind == "smoothed_indicator":
        return SmoothedIndicator(center, radius, width, amplitude)
    raise ValidationError(f"Unknown phantom kind '{kind}'")


def stability_family(geometry, n, seed=0, width=0.18):
    """Deterministic family of single-bump phantoms inside M"""
    rng = np.random.default_rng(seed)
    reach = geometry.radius_M - GAUSSIAN_SUPPORT_WIDTHS * width
    family = []
    while len(family) < n:
        offset = rng.uniform(-reach, reach, size=3)
        if np.linalg.norm(offset) <= reach:
            amplitude = float(rng.uniform(0.5, 2.0))
            family.append(GaussianBump(tuple(geometry.c_M + offset), width, amplitude))
    return family
