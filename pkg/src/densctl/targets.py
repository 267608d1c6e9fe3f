"""Target (reference) densities for the follower population.

1D targets are von Mises profiles ``exp(kappa*cos(x-mu)) / (2*pi*I0(kappa))``
normalized by the analytic constant; 2D targets use a bimodal von
Mises-type exponent normalized numerically on the mesh.  ``I0`` is the
modified Bessel function of order zero, evaluated by its power series
(ample for the concentration range used here, kappa <= 20).

A :class:`TargetDensity` keeps both the unit-mass profile and the
mass-scaled one so feasibility analysis (which works with the normalized
shape) and simulation (which needs the mass-weighted field) share one
object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridFunction, PeriodicMesh, integral

__all__ = ["TargetDensity", "bessel_i0", "von_mises_1d", "bimodal_von_mises_2d", "scale_to_mass"]


def bessel_i0(x: float) -> float:
    """Modified Bessel function I0 by power series: sum ((x/2)^(2m) / m!^2).

    Accurate to ~1e-15 relative for 0 <= x <= 20 (terms decay fast once
    m > x/2; the loop stops when a term falls below 1e-18 of the sum).
    """
    x = float(x)
    if x < 0:
        raise ValueError("bessel_i0 expects x >= 0")
    if x > 20:
        raise ValueError("power series evaluation is restricted to x <= 20")
    q = 0.25 * x * x
    term, total = 1.0, 1.0
    for m in range(1, 200):
        term *= q / (m * m)
        total += term
        if term < 1e-18 * total:
            break
    return total


@dataclass(frozen=True)
class TargetDensity:
    """A follower reference density on a mesh.

    normalized: unit-mass profile (mesh integral 1)
    mass:       total mass carried by ``profile``
    profile:    ``mass * normalized``
    """

    normalized: GridFunction
    mass: float

    def __post_init__(self) -> None:
        if not (0.0 < self.mass <= 1.0):
            raise ValueError(f"mass must lie in (0, 1], got {self.mass}")
        if np.any(self.normalized.values <= 0):
            raise ValueError("target density must be strictly positive")
        total = integral(self.normalized)
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"normalized profile must integrate to 1, got {total}")

    @property
    def mesh(self) -> PeriodicMesh:
        return self.normalized.mesh

    @property
    def profile(self) -> GridFunction:
        return GridFunction(self.mesh, self.mass * self.normalized.values)


def von_mises_1d(mesh: PeriodicMesh, kappa: float, mu: float = 0.0) -> TargetDensity:
    """Unit-mass von Mises density ``exp(kappa*cos(x-mu)) / (2*pi*I0(kappa))``."""
    if mesh.dim != 1:
        raise ValueError("von_mises_1d needs a 1D mesh")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    vals = np.exp(kappa * np.cos(mesh.axis - mu)) / (2.0 * np.pi * bessel_i0(kappa))
    return TargetDensity(GridFunction(mesh, vals), mass=1.0)


def bimodal_von_mises_2d(
    mesh: PeriodicMesh,
    kappa1: float,
    kappa2: float,
    mu: float = 0.0,
    nu: float = 0.0,
) -> TargetDensity:
    """Unit-mass bimodal 2D density.

    Exponent ``kappa1*cos(x1-mu) + kappa2*cos(x2-nu) + cos(x1-mu)^2 + sin(x2-nu)^2``
    (i.e. c1 = [cos(x1-mu), cos(x2-nu)] weighted by kappa plus the squared
    terms of c2 = [cos(x1-mu), sin(x2-nu)]); the normalizing constant is
    computed numerically on the mesh.  For moderate kappa the ``sin^2``
    term splits the mass into two modes mirrored across the ``x2 = nu``
    line.
    """
    if mesh.dim != 2:
        raise ValueError("bimodal_von_mises_2d needs a 2D mesh")
    if kappa1 <= 0 or kappa2 <= 0:
        raise ValueError("concentrations must be positive")
    x1, x2 = mesh.coords()
    expo = (
        kappa1 * np.cos(x1 - mu)
        + kappa2 * np.cos(x2 - nu)
        + np.cos(x1 - mu) ** 2
        + np.sin(x2 - nu) ** 2
    )
    raw = np.exp(expo)
    z = integral(GridFunction(mesh, raw))
    return TargetDensity(GridFunction(mesh, raw / z), mass=1.0)


def scale_to_mass(target: TargetDensity, mass: float) -> TargetDensity:
    """Return the same shape carrying total mass ``mass`` in (0, 1]."""
    if not (0.0 < mass <= 1.0):
        raise ValueError(f"mass must lie in (0, 1], got {mass}")
    return TargetDensity(target.normalized, mass=mass)
