"""Scalar comparison system bounding the squared tracking error.

The error analysis reduces to a one-dimensional inequality

    eta_t = (-alpha + beta*xi) * eta + (gamma*xi + delta*eta) * sqrt(eta),

driven by the exponentially decaying gain variable xi(t) = exp(-k t).
Augmenting with xi_t = -k*xi makes the system autonomous on the
(eta, xi) plane with xi(0) = 1.  This module provides the equilibrium
analysis of that plane, the closed-form basin-of-attraction estimate
from the eta_t = 0 nullcline, and RK4 trajectory integration used to
classify initial conditions empirically (scalar and batched forms).

All quantities are plain floats; nothing here touches the mesh types.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LemmaParams",
    "Equilibrium",
    "BasinEstimate",
    "Trajectory",
    "equilibria",
    "basin_estimate",
    "integrate",
    "classify",
    "classify_batch",
]


@dataclass(frozen=True)
class LemmaParams:
    """Coefficients of the comparison system.

    alpha is the linear decay rate, beta and gamma multiply the decaying
    forcing, delta the destabilizing eta^(3/2) term, and k the forcing
    decay rate.  alpha and k must be positive; beta, gamma, delta may be
    zero for degenerate checks but never negative.
    """

    alpha: float
    beta: float
    gamma: float
    delta: float
    k: float

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        for name in ("beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")

    @property
    def saddle_eta(self) -> float:
        """eta coordinate of the nonzero equilibrium, inf when delta = 0."""
        if self.delta == 0:
            return math.inf
        return (self.alpha / self.delta) ** 2


@dataclass(frozen=True)
class Equilibrium:
    eta: float
    xi: float
    eigenvalues: tuple[float, float]
    kind: str


def equilibria(params: LemmaParams) -> list[Equilibrium]:
    """Fixed points of the augmented system with their classification.

    The origin always exists and is a stable node with eigenvalues
    (-alpha, -k).  For delta > 0 there is a second point at
    (alpha^2/delta^2, 0); the Jacobian there is triangular because the
    xi dynamics is decoupled, giving eigenvalues (alpha/2, -k): a saddle.
    """
    out = [Equilibrium(0.0, 0.0, (-params.alpha, -params.k), "stable node")]
    if params.delta > 0:
        out.append(
            Equilibrium(params.saddle_eta, 0.0, (0.5 * params.alpha, -params.k), "saddle")
        )
    return out


@dataclass(frozen=True)
class BasinEstimate:
    """Intersections of the eta_t = 0 nullcline with the line xi = 1.

    ``basin_bound`` equals ``eta_2`` when the intersections exist: every
    start with eta(0) strictly below it converges to the origin.  All
    three fields are None when the nullcline stays below xi = 1.
    """

    eta_1: float | None
    eta_2: float | None
    basin_bound: float | None


def basin_estimate(params: LemmaParams) -> BasinEstimate:
    """Closed-form conservative basin bound from the nullcline.

    Setting eta_t = 0, dividing by sqrt(eta) and substituting
    s = sqrt(eta) turns the xi = 1 intersection condition into the
    quadratic delta*s^2 + (beta - alpha)*s + gamma = 0.  Real roots with
    the larger one positive give eta_{1,2} = s_{1,2}^2 and the bound;
    otherwise the estimate is absent (the nullcline never reaches the
    initial-condition line).
    """
    if params.delta <= 0:
        raise ValueError("basin_estimate requires delta > 0")
    a, b = params.alpha, params.beta
    disc = (b - a) ** 2 - 4.0 * params.gamma * params.delta
    if disc < 0:
        return BasinEstimate(None, None, None)
    root = math.sqrt(disc)
    s2 = (a - b + root) / (2.0 * params.delta)
    if s2 <= 0:
        return BasinEstimate(None, None, None)
    # product of the roots is gamma/delta >= 0, so s1 >= 0 up to rounding
    s1 = max((a - b - root) / (2.0 * params.delta), 0.0)
    return BasinEstimate(s1 * s1, s2 * s2, s2 * s2)


@dataclass(frozen=True)
class Trajectory:
    """Sampled solution of the augmented system.

    ``diverged`` is set when eta crossed the blow-up threshold; the
    arrays then stop at the offending step.
    """

    t: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    diverged: bool


def _rhs(p: LemmaParams, eta: float, xi: float) -> tuple[float, float]:
    s = math.sqrt(eta if eta > 0.0 else 0.0)
    return ((-p.alpha + p.beta * xi) * eta + (p.gamma * xi + p.delta * eta) * s, -p.k * xi)


def integrate(
    params: LemmaParams,
    eta0: float,
    T: float,
    dt: float = 1e-3,
    blowup: float = 1e12,
) -> Trajectory:
    """RK4 integration of (eta, xi) from (eta0, 1) over [0, T].

    eta is clamped at zero from below so the square root stays defined;
    crossing ``blowup`` stops the run and flags divergence.  Growth past
    the threshold counts as divergence even when the tail would
    eventually decay.
    """
    if eta0 < 0:
        raise ValueError(f"eta0 must be nonnegative, got {eta0}")
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    n_steps = int(math.ceil(T / dt))
    ts = [0.0]
    etas = [float(eta0)]
    xis = [1.0]
    eta, xi = float(eta0), 1.0
    diverged = False
    for i in range(n_steps):
        h = min(dt, T - i * dt)
        k1e, k1x = _rhs(params, eta, xi)
        k2e, k2x = _rhs(params, eta + 0.5 * h * k1e, xi + 0.5 * h * k1x)
        k3e, k3x = _rhs(params, eta + 0.5 * h * k2e, xi + 0.5 * h * k2x)
        k4e, k4x = _rhs(params, eta + h * k3e, xi + h * k3x)
        eta = eta + (h / 6.0) * (k1e + 2.0 * k2e + 2.0 * k3e + k4e)
        xi = xi + (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        if eta < 0.0:
            eta = 0.0
        ts.append(min((i + 1) * dt, T))
        etas.append(eta)
        xis.append(xi)
        if not math.isfinite(eta) or eta > blowup:
            diverged = True
            break
    return Trajectory(np.asarray(ts), np.asarray(etas), np.asarray(xis), diverged)


def classify(
    params: LemmaParams,
    eta0: float,
    dt: float = 1e-3,
    blowup: float = 1e12,
    horizon: float | None = None,
) -> str:
    """Label a start as "converges" or "diverges".

    Integrates until the forcing has died (default horizon 200/k) and
    compares the final eta against the saddle height; blow-up past the
    threshold short-circuits to divergence.
    """
    out = classify_batch(
        np.array([params.alpha]),
        np.array([params.beta]),
        np.array([params.gamma]),
        np.array([params.delta]),
        np.array([params.k]),
        np.array([eta0]),
        dt=dt,
        blowup=blowup,
        horizon=horizon,
    )
    return "converges" if out[0] else "diverges"


def classify_batch(
    alpha: np.ndarray,
    beta: np.ndarray,
    gamma: np.ndarray,
    delta: np.ndarray,
    k: np.ndarray,
    eta0: np.ndarray,
    dt: float = 1e-3,
    blowup: float = 1e12,
    horizon: float | None = None,
) -> np.ndarray:
    """Vectorized convergence classification; True means converges.

    All arguments broadcast to a common shape.  Each tuple runs RK4 with
    its own horizon (200/k unless overridden).  Two exits cut the work
    short: once the forcing is below 1e-12 the plane is effectively
    autonomous, so eta clearly under the saddle (or over it) settles the
    label; eta past ``blowup`` is divergent on the spot.  Remaining
    undecided tuples, those hovering near the saddle, run to the horizon
    and compare eta against the saddle height there.
    """
    a, b, g, d, kk, e0 = np.broadcast_arrays(alpha, beta, gamma, delta, k, eta0)
    shape = a.shape
    a = a.astype(float).ravel()
    b = b.astype(float).ravel()
    g = g.astype(float).ravel()
    d = d.astype(float).ravel()
    kk = kk.astype(float).ravel()
    eta = e0.astype(float).ravel().copy()
    if np.any(eta < 0):
        raise ValueError("eta0 must be nonnegative")
    if np.any(a <= 0) or np.any(kk <= 0):
        raise ValueError("alpha and k must be positive")
    m = eta.size
    xi = np.ones(m)
    with np.errstate(divide="ignore"):
        saddle = np.where(d > 0, (a / np.where(d > 0, d, 1.0)) ** 2, np.inf)
    t_end = np.full(m, 200.0) / kk if horizon is None else np.full(m, float(horizon))
    converges = np.zeros(m, dtype=bool)
    active = np.arange(m)
    t = np.zeros(m)
    while active.size:
        aa, ba, ga, da, ka = a[active], b[active], g[active], d[active], kk[active]
        ea, xa = eta[active], xi[active]

        def rhs(e, x):
            s = np.sqrt(np.maximum(e, 0.0))
            return (-aa + ba * x) * e + (ga * x + da * e) * s, -ka * x

        with np.errstate(over="ignore", invalid="ignore"):
            k1e, k1x = rhs(ea, xa)
            k2e, k2x = rhs(ea + 0.5 * dt * k1e, xa + 0.5 * dt * k1x)
            k3e, k3x = rhs(ea + 0.5 * dt * k2e, xa + 0.5 * dt * k2x)
            k4e, k4x = rhs(ea + dt * k3e, xa + dt * k3x)
            ea = ea + (dt / 6.0) * (k1e + 2.0 * k2e + 2.0 * k3e + k4e)
            xa = xa + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        ea = np.maximum(ea, 0.0)
        eta[active] = ea
        xi[active] = xa
        t[active] += dt

        sad = saddle[active]
        blew = ~np.isfinite(ea) | (ea > blowup)
        quiet = xa < 1e-12
        low = quiet & (ea < 0.99 * sad)
        high = quiet & np.isfinite(sad) & (ea > 1.01 * sad)
        timed_out = t[active] >= t_end[active]
        done = blew | low | high | timed_out
        if np.any(done):
            idx = active[done]
            verdict = np.where(
                blew[done], False, np.where(low[done], True, eta[idx] < saddle[idx])
            )
            converges[idx] = verdict
            active = active[~done]
    return converges.reshape(shape)
