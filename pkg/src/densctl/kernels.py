"""Interaction kernel evaluators.

Two families drive the agents and the transport terms:

* the 1D repulsive profile with range ``ell``, a periodic odd function
  built from exponentials that pushes followers away from leaders,
* the Morse combination ``(1/ell_r) f_r - (zeta/ell_a) f_a`` of two such
  profiles (short-range repulsion, longer-range attraction).

In 2D the same roles are played by the radial field
``(x/|x|) exp(-|x|/ell)``, periodized by summing integer-shifted copies
over ``{-images..images}^2``.  ``materialize`` samples whichever form a
:class:`KernelSpec` describes onto a mesh so the simulators can convolve
with it.

Closed-form derivative evaluators are provided for the 1D profiles: the
profiles jump at the origin, so a mesh difference of the sampled kernel
would diverge like ``h**-0.5`` there, while away from the origin the
classical derivative below is what the stability functionals need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import GridFunction, PeriodicMesh, wrap_displacement

__all__ = [
    "KernelSpec",
    "eval_repulsive_1d",
    "eval_repulsive_1d_deriv",
    "eval_morse_1d",
    "eval_morse_1d_deriv",
    "eval_nonperiodic_2d",
    "periodize_2d",
    "materialize",
]

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class KernelSpec:
    """Declarative kernel description.

    kind:    "none" | "repulsive" | "morse"
    ell:     range of the repulsive profile (kind="repulsive")
    ell_r, ell_a, zeta: Morse ranges and attraction gain (kind="morse")
    images:  periodization copies per axis in 2D, default 5
    """

    kind: str
    ell: float = math.pi
    ell_r: float = math.pi / 2
    ell_a: float = math.pi
    zeta: float = 1.0
    images: int = 5

    def __post_init__(self) -> None:
        if self.kind not in ("none", "repulsive", "morse"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        for name in ("ell", "ell_r", "ell_a"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.zeta < 0:
            raise ValueError("zeta must be nonnegative")
        if self.images < 1:
            raise ValueError("images must be >= 1")


def eval_repulsive_1d(x, ell: float) -> np.ndarray:
    """Odd periodic repulsive profile.

    ``f(x) = sgn(x)/(e^(2*pi/ell) - 1) * (e^((2*pi-|x|)/ell) - e^(|x|/ell))``
    with ``sgn(0) = 0``; continuous at +-pi (value 0), unit jump limits
    ``f(0+) = 1``, ``f(0-) = -1``.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    denom = math.expm1(TWO_PI / ell)
    return np.sign(x) * (np.exp((TWO_PI - ax) / ell) - np.exp(ax / ell)) / denom


def eval_repulsive_1d_deriv(x, ell: float) -> np.ndarray:
    """Classical derivative of the repulsive profile away from the origin.

    Even, negative: ``-(e^((2*pi-|x|)/ell) + e^(|x|/ell)) / (ell*(e^(2*pi/ell)-1))``.
    At ``x = 0`` the (two-sided) limit is returned; the distributional jump
    part is deliberately excluded.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    denom = ell * math.expm1(TWO_PI / ell)
    return -(np.exp((TWO_PI - ax) / ell) + np.exp(ax / ell)) / denom


def eval_morse_1d(x, ell_r: float, ell_a: float, zeta: float) -> np.ndarray:
    """Morse kernel ``(1/ell_r) f_r(x) - (zeta/ell_a) f_a(x)`` from two
    repulsive profiles with ranges ``ell_r`` and ``ell_a``."""
    return eval_repulsive_1d(x, ell_r) / ell_r - zeta * eval_repulsive_1d(x, ell_a) / ell_a


def eval_morse_1d_deriv(x, ell_r: float, ell_a: float, zeta: float) -> np.ndarray:
    return (
        eval_repulsive_1d_deriv(x, ell_r) / ell_r
        - zeta * eval_repulsive_1d_deriv(x, ell_a) / ell_a
    )


def eval_nonperiodic_2d(points, ell: float) -> np.ndarray:
    """Free-space radial field ``(x/|x|) * exp(-|x|/ell)``, zero at the origin.

    ``points``: array of shape (..., 2). Returns the same shape.
    """
    p = np.asarray(points, dtype=float)
    if p.shape[-1] != 2:
        raise ValueError("points must have 2 components")
    r = np.sqrt(np.sum(p * p, axis=-1))
    safe = np.where(r > 0, r, 1.0)
    mag = np.exp(-r / ell) / safe
    out = p * mag[..., None]
    out[r == 0] = 0.0
    return out


def periodize_2d(points, ell: float, images: int = 5) -> np.ndarray:
    """Periodic sum of the radial field over shifted copies.

    ``f_per(x) = sum_{m in {-images..images}^2} f(x + 2*pi*m)``.  The
    truncation error decays like ``exp(-2*pi*images/ell)``; doubling
    ``images`` from the default moves values by < 1e-8 for ``ell <= pi/2``.
    """
    p = np.asarray(points, dtype=float)
    out = np.zeros_like(p, dtype=float)
    rng = range(-images, images + 1)
    for m1 in rng:
        for m2 in rng:
            shift = np.array([TWO_PI * m1, TWO_PI * m2])
            out += eval_nonperiodic_2d(p + shift, ell)
    return out


def _morse_2d(points, spec: KernelSpec) -> np.ndarray:
    return (
        periodize_2d(points, spec.ell_r, spec.images) / spec.ell_r
        - spec.zeta * periodize_2d(points, spec.ell_a, spec.images) / spec.ell_a
    )


def evaluate(spec: KernelSpec, points, dim: int) -> np.ndarray:
    """Point evaluation of the kernel a spec describes, in the given dimension.

    1D returns scalars (shape of ``points``); 2D returns vectors
    (shape ``points.shape``); kind="none" returns zeros.
    """
    p = np.asarray(points, dtype=float)
    if dim == 1:
        if spec.kind == "none":
            return np.zeros_like(p)
        if spec.kind == "repulsive":
            return eval_repulsive_1d(p, spec.ell)
        return eval_morse_1d(p, spec.ell_r, spec.ell_a, spec.zeta)
    if spec.kind == "none":
        return np.zeros_like(p)
    if spec.kind == "repulsive":
        return periodize_2d(p, spec.ell, spec.images)
    return _morse_2d(p, spec)


def materialize(spec: KernelSpec, mesh: PeriodicMesh) -> GridFunction:
    """Sample the kernel at the mesh nodes (node coordinates are the
    displacement argument).  1D gives a scalar field, 2D a 2-component one."""
    if mesh.dim == 1:
        return GridFunction(mesh, evaluate(spec, mesh.axis, 1))
    pts = np.stack(mesh.coords(), axis=-1)
    return GridFunction(mesh, evaluate(spec, pts, 2))


def derivative_values(spec: KernelSpec, mesh: PeriodicMesh) -> GridFunction:
    """Closed-form 1D kernel derivative sampled on the mesh (see module
    docstring for why this is not a mesh difference)."""
    if mesh.dim != 1:
        raise ValueError("closed-form kernel derivatives are 1D only")
    if spec.kind == "none":
        return GridFunction(mesh, np.zeros(mesh.n))
    if spec.kind == "repulsive":
        return GridFunction(mesh, eval_repulsive_1d_deriv(mesh.axis, spec.ell))
    return GridFunction(mesh, eval_morse_1d_deriv(mesh.axis, spec.ell_r, spec.ell_a, spec.zeta))
