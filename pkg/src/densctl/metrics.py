"""Error measures used by the run diagnostics.

l2_error is the mesh L2 distance; kl_divergence the discrete relative
entropy (requiring comparable masses so the quantity is meaningful);
normalize_series turns raw error histories into percentages of either the
initial error or a reference norm.
"""

from __future__ import annotations

import numpy as np

from .grid import GridFunction, integral, l2_norm

__all__ = ["l2_error", "kl_divergence", "normalize_series"]


def l2_error(a: GridFunction, b: GridFunction) -> float:
    """``sqrt(integral (a-b)^2)`` over the mesh."""
    return l2_norm(a - b)


def kl_divergence(p: GridFunction, q: GridFunction, mass_tol: float = 1e-6) -> float:
    """Discrete KL divergence ``integral p*log(p/q)`` with ``0*log 0 = 0``.

    ``q`` must be strictly positive; ``p`` nonnegative (tiny negative
    excursions from the transport scheme, above ``-1e-12``, are clamped).
    Masses must agree within ``mass_tol`` for the divergence to make sense.
    """
    if q.mesh != p.mesh:
        raise ValueError("fields live on different meshes")
    qv = q.values
    if np.any(qv <= 0):
        raise ValueError("kl_divergence: q must be strictly positive")
    pv = p.values
    if np.min(pv) < -1e-12:
        raise ValueError(f"kl_divergence: p has negative mass {np.min(pv):.3e}")
    pv = np.maximum(pv, 0.0)
    mp, mq = integral(p), integral(q)
    if abs(mp - mq) > mass_tol * max(abs(mq), 1e-300):
        raise ValueError(f"kl_divergence: masses differ ({mp:.8g} vs {mq:.8g})")
    pos = pv > 0
    out = np.zeros_like(pv)
    out[pos] = pv[pos] * np.log(pv[pos] / qv[pos])
    return float(out.sum() * p.mesh.cell_volume)


def normalize_series(series: np.ndarray, mode: str = "initial", reference: float | None = None) -> np.ndarray:
    """Express an error history as a fraction of a baseline.

    mode="initial": divide by the first entry (zero-safe: returns the raw
    series if the first entry is zero); mode="reference": divide by the
    supplied reference norm.
    """
    s = np.asarray(series, dtype=float)
    if mode == "initial":
        base = s[0] if s.size else 1.0
        return s if base == 0 else s / base
    if mode == "reference":
        if reference is None or reference <= 0:
            raise ValueError("mode='reference' needs a positive reference")
        return s / reference
    raise ValueError(f"unknown normalization mode {mode!r}")
