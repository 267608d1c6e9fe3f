"""Forward-Euler integration of the coupled leader/follower densities.

The follower density obeys a convection-diffusion law whose velocity is
the sum of two circular convolutions (leader-follower and
follower-follower kernels against the current densities).  The leader
density is purely convected by the mass-feedback control field: in 1D
the momentum rho_L*u is -K times the anchored antiderivative of the
reference error, in 2D it is -grad(phi) with phi solving a Poisson
problem with right-hand side K times the error, so the error decays
pointwise at rate K in both cases.

Space is discretized in conservative form: nodal fluxes are averaged to
faces and differenced, which telescopes over the periodic mesh, so both
masses are conserved to rounding no matter the scenario.  Diffusion uses
the compact per-axis second difference.  Time stepping is explicit Euler
with a fixed dt; the CFL numbers are advisory and logged, not enforced.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .grid import (
    GridFunction,
    PeriodicMesh,
    antiderivative,
    integral,
    l2_norm,
    laplacian,
    spectral_solve_poisson,
    sup_norm,
)
from .metrics import kl_divergence, l2_error
from .targets import TargetDensity

__all__ = [
    "EPS_RHO",
    "SimState",
    "MacroRunConfig",
    "MacroRunResult",
    "control_field_1d",
    "control_field_2d",
    "initial_state",
    "step",
    "run",
    "write_series_csv",
    "write_snapshot",
]

logger = logging.getLogger("densctl.macro")

# control denominators below this abort rather than regularize; smaller
# values would mask infeasible scenarios with enormous velocities
EPS_RHO = 1e-12


@dataclass(frozen=True)
class SimState:
    """Densities and control field at one time level.

    ``u`` is the control field consistent with this state's densities
    (diagnostic; :func:`step` rebuilds the leader momentum from the
    densities rather than multiplying ``u`` back).
    """

    t: float
    rho_L: GridFunction
    rho_F: GridFunction
    u: GridFunction
    step_count: int


@dataclass(frozen=True)
class MacroRunConfig:
    """Immutable description of one macroscopic run.

    ``fl_kernel`` and ``ff_kernel`` are materialized on ``mesh`` (vector
    fields in 2D); ``ff_kernel`` may be None for non-interacting
    followers.  ``target`` fixes the follower reference profile and mass;
    ``rho_L_ref`` is the leader reference the control drives toward.
    Omitted initial densities default to uniform profiles carrying the
    matching masses.  Diagnostics are sampled every ``output_stride``
    steps (plus the initial and final states).
    """

    mesh: PeriodicMesh
    dt: float
    T: float
    K: float
    D: float
    fl_kernel: GridFunction
    ff_kernel: GridFunction | None
    target: TargetDensity
    rho_L_ref: GridFunction
    rho_L0: GridFunction | None = None
    rho_F0: GridFunction | None = None
    output_stride: int = 10

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        if self.K <= 0:
            raise ValueError(f"control gain must be positive, got K={self.K}")
        if self.D <= 0:
            raise ValueError(f"diffusion must be positive, got D={self.D}")
        if self.output_stride < 1:
            raise ValueError("output_stride must be at least 1")
        want_comps = self.mesh.dim
        for name in ("fl_kernel", "ff_kernel"):
            kern = getattr(self, name)
            if kern is None:
                continue
            if kern.mesh != self.mesh:
                raise ValueError(f"{name} lives on a different mesh")
            if kern.components != want_comps:
                raise ValueError(
                    f"{name} must have {want_comps} component(s) on a "
                    f"{self.mesh.dim}D mesh, got {kern.components}"
                )
        if self.target.mesh != self.mesh:
            raise ValueError("target lives on a different mesh")
        if self.rho_L_ref.mesh != self.mesh or self.rho_L_ref.is_vector:
            raise ValueError("rho_L_ref must be a scalar field on the run mesh")
        mass_L = integral(self.rho_L_ref)
        if mass_L <= 0:
            raise ValueError("leader reference must carry positive mass")
        if self.rho_L0 is not None:
            if self.rho_L0.mesh != self.mesh or self.rho_L0.is_vector:
                raise ValueError("rho_L0 must be a scalar field on the run mesh")
            # equal masses keep the error field mean-free, which both
            # control constructions rely on
            if abs(integral(self.rho_L0) - mass_L) > 1e-8 * mass_L:
                raise ValueError(
                    f"rho_L0 mass {integral(self.rho_L0):.12g} does not match "
                    f"the reference mass {mass_L:.12g}"
                )
        if self.rho_F0 is not None:
            if self.rho_F0.mesh != self.mesh or self.rho_F0.is_vector:
                raise ValueError("rho_F0 must be a scalar field on the run mesh")
            if abs(integral(self.rho_F0) - self.target.mass) > 1e-8 * self.target.mass:
                raise ValueError(
                    f"rho_F0 mass {integral(self.rho_F0):.12g} does not match "
                    f"the target mass {self.target.mass:.12g}"
                )
        # kernel spectra are fixed over the run; precompute them once
        axes = tuple(range(self.mesh.dim))
        cache = {}
        for name in ("fl_kernel", "ff_kernel"):
            kern = getattr(self, name)
            if kern is not None:
                kv = np.fft.ifftshift(kern.values, axes=axes)
                cache[name] = np.fft.rfftn(kv, axes=axes)
        object.__setattr__(self, "_kernel_hats", cache)


def _convolve_cached(config: MacroRunConfig, name: str, density: GridFunction) -> np.ndarray:
    """Same arithmetic as grid.circular_convolve with the kernel FFT reused."""
    mesh = config.mesh
    axes = tuple(range(mesh.dim))
    k_hat = config._kernel_hats[name]
    d_hat = np.fft.rfftn(density.values, axes=axes)
    if k_hat.ndim > mesh.dim:
        prod = k_hat * d_hat[..., None]
    else:
        prod = k_hat * d_hat
    return np.fft.irfftn(prod, s=mesh.shape, axes=axes) * mesh.cell_volume


def _central_difference(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)


def _spectral_gradient(f: GridFunction) -> np.ndarray:
    """Exact Fourier gradient, shape mesh.shape + (dim,)."""
    mesh = f.mesh
    axes = tuple(range(mesh.dim))
    f_hat = np.fft.fftn(f.values, axes=axes)
    comps = []
    for ax in range(mesh.dim):
        k = np.asarray(mesh.wavenumbers(ax), dtype=float)
        comps.append(np.fft.ifftn(1j * k * f_hat, axes=axes).real)
    return np.stack(comps, axis=-1)


def _leader_momentum(rho_L: GridFunction, rho_L_ref: GridFunction, K: float) -> np.ndarray:
    """Nodal values of rho_L*u for the feedback law; never divides by rho_L.

    1D: -K times the anchored antiderivative of the reference error.
    2D: -grad(phi) with laplacian(phi) = K*(error minus its mean); the
    mean is conserved-mass dust at rounding level and removing it keeps
    the spectral solve well posed for near-converged states.
    """
    mesh = rho_L.mesh
    err = rho_L_ref.values - rho_L.values
    if mesh.dim == 1:
        P = antiderivative(GridFunction(mesh, err))
        return -K * P.values
    rhs = GridFunction(mesh, K * (err - err.mean()))
    phi = spectral_solve_poisson(rhs)
    return -_spectral_gradient(phi)


def _momentum_to_velocity(mesh: PeriodicMesh, momentum: np.ndarray, rho_L: GridFunction) -> GridFunction:
    """Divide momentum by density with a vacuum guard.

    Nodes where rho_L is below EPS_RHO but the momentum vanishes too get
    velocity zero (vacuum carries no momentum, e.g. a reference with a
    zero node that the leaders already sit on).  A vacuum node asked to
    carry momentum is a genuine blow-up and aborts.
    """
    rv = rho_L.values if mesh.dim == 1 else rho_L.values[..., None]
    thin = rv < EPS_RHO
    if np.any(thin):
        if np.any(thin & (np.abs(momentum) > EPS_RHO)):
            raise ValueError(
                f"leader density down to {float(np.min(rho_L.values)):.3e} where the "
                f"control must move mass; below the 1e-12 floor the velocity is "
                f"unbounded (near-vacuum leader density)"
            )
        return GridFunction(mesh, np.where(thin, 0.0, momentum / np.where(thin, 1.0, rv)))
    return GridFunction(mesh, momentum / rv)


def control_field_1d(state: SimState, rho_L_ref: GridFunction, K: float) -> GridFunction:
    """Feedback control u = -K * P / rho_L with P the anchored
    antiderivative of (rho_L_ref - rho_L).

    Zero-mean error makes P periodic, hence u periodic.  The leader
    density must stay above the 1e-12 floor everywhere; a thinner
    density aborts instead of regularizing.
    """
    if state.rho_L.mesh.dim != 1:
        raise ValueError("control_field_1d needs a 1D state")
    if float(np.min(state.rho_L.values)) < EPS_RHO:
        raise ValueError(
            f"leader density min {float(np.min(state.rho_L.values)):.3e} is below "
            f"the 1e-12 floor (near-vacuum leader density)"
        )
    momentum = _leader_momentum(state.rho_L, rho_L_ref, K)
    return GridFunction(state.rho_L.mesh, momentum / state.rho_L.values)


def control_field_2d(state: SimState, rho_L_ref: GridFunction, K: float) -> GridFunction:
    """2D feedback control: rho_L*u = -grad(phi), laplacian(phi) = K*e^L.

    The construction makes div(rho_L*u) = -K*e^L to rounding (checked
    spectrally), which forces pointwise exponential error decay at rate
    K.  Same positivity floor as the 1D law.
    """
    if state.rho_L.mesh.dim != 2:
        raise ValueError("control_field_2d needs a 2D state")
    if float(np.min(state.rho_L.values)) < EPS_RHO:
        raise ValueError(
            f"leader density min {float(np.min(state.rho_L.values)):.3e} is below "
            f"the 1e-12 floor (near-vacuum leader density)"
        )
    momentum = _leader_momentum(state.rho_L, rho_L_ref, K)
    return GridFunction(state.rho_L.mesh, momentum / state.rho_L.values[..., None])


def _interaction_velocity(config: MacroRunConfig, rho_L: GridFunction, rho_F: GridFunction) -> np.ndarray:
    v = _convolve_cached(config, "fl_kernel", rho_L)
    if config.ff_kernel is not None:
        v = v + _convolve_cached(config, "ff_kernel", rho_F)
    return v


def step(state: SimState, config: MacroRunConfig) -> SimState:
    """One forward-Euler update of both densities.

    Advective terms are central differences of the nodal fluxes
    (equivalently, differences of arithmetic-mean face fluxes), so the
    update conserves each species' mass exactly; interaction velocities
    are recomputed from the current densities every call.
    """
    mesh = config.mesh
    h = mesh.spacing
    dt = config.dt
    rho_L, rho_F = state.rho_L, state.rho_F

    v = _interaction_velocity(config, rho_L, rho_F)
    fv = rho_F.values
    if mesh.dim == 1:
        adv = _central_difference(fv * v, h, 0)
    else:
        adv = _central_difference(fv * v[..., 0], h, 0)
        adv += _central_difference(fv * v[..., 1], h, 1)
    new_F = fv + dt * (config.D * laplacian(rho_F).values - adv)

    momentum = _leader_momentum(rho_L, config.rho_L_ref, config.K)
    if mesh.dim == 1:
        div_L = _central_difference(momentum, h, 0)
    else:
        div_L = _central_difference(momentum[..., 0], h, 0)
        div_L += _central_difference(momentum[..., 1], h, 1)
    new_L = rho_L.values - dt * div_L

    count = state.step_count + 1
    t_new = state.t + dt
    if not (np.all(np.isfinite(new_F)) and np.all(np.isfinite(new_L))):
        raise RuntimeError(
            f"non-finite density after step {count} (t={t_new:.6g}); the explicit "
            f"scheme went unstable, reduce dt below the printed CFL bounds"
        )
    low = float(np.min(new_F))
    if low < -1e-8:
        raise RuntimeError(
            f"follower density reached {low:.3e} after step {count} (t={t_new:.6g}); "
            f"negativity beyond tolerance, reduce dt or refine the mesh"
        )

    out_L = GridFunction(mesh, new_L)
    out_F = GridFunction(mesh, new_F)
    u = _momentum_to_velocity(mesh, _leader_momentum(out_L, config.rho_L_ref, config.K), out_L)
    return SimState(t=t_new, rho_L=out_L, rho_F=out_F, u=u, step_count=count)


def _uniform(mesh: PeriodicMesh, mass: float) -> GridFunction:
    return GridFunction(mesh, np.full(mesh.shape, mass / (2.0 * np.pi) ** mesh.dim))


def initial_state(config: MacroRunConfig) -> SimState:
    """State at t=0; omitted initial densities become uniform profiles."""
    rho_L = config.rho_L0
    if rho_L is None:
        rho_L = _uniform(config.mesh, integral(config.rho_L_ref))
    rho_F = config.rho_F0
    if rho_F is None:
        rho_F = _uniform(config.mesh, config.target.mass)
    u = _momentum_to_velocity(
        config.mesh, _leader_momentum(rho_L, config.rho_L_ref, config.K), rho_L
    )
    return SimState(t=0.0, rho_L=rho_L, rho_F=rho_F, u=u, step_count=0)


@dataclass(frozen=True)
class MacroRunResult:
    """Sampled diagnostics plus the final state.

    kl_L is NaN when the leader reference has a nonpositive node (the
    divergence is undefined there; the fallback reference of infeasible
    scenarios touches zero by construction).
    """

    t: np.ndarray
    err_L: np.ndarray
    err_F: np.ndarray
    kl_L: np.ndarray
    kl_F: np.ndarray
    mass_L: np.ndarray
    mass_F: np.ndarray
    final_state: SimState


def _safe_kl(num: GridFunction, ref: GridFunction) -> float:
    if float(np.min(ref.values)) <= 0.0:
        return float("nan")
    clipped = GridFunction(num.mesh, np.maximum(num.values, 0.0))
    return kl_divergence(clipped, ref)


def _diagnostics(state: SimState, config: MacroRunConfig) -> tuple:
    ref_F = config.target.profile
    return (
        state.t,
        l2_error(state.rho_L, config.rho_L_ref),
        l2_error(state.rho_F, ref_F),
        _safe_kl(state.rho_L, config.rho_L_ref),
        _safe_kl(state.rho_F, ref_F),
        integral(state.rho_L),
        integral(state.rho_F),
    )


def _log_cfl_advisories(config: MacroRunConfig, state: SimState) -> None:
    h = config.mesh.spacing
    diff_limit = 0.5 * h * h / config.D
    if config.dt > diff_limit:
        logger.warning(
            "dt=%g exceeds the diffusive stability bound %.3g (D=%g, h=%.3g)",
            config.dt, diff_limit, config.D, h,
        )
    v = _interaction_velocity(config, state.rho_L, state.rho_F)
    vmax = max(float(np.max(np.abs(v))), sup_norm(state.u))
    if vmax > 0 and config.dt * vmax / h > 1.0:
        logger.warning(
            "advective CFL dt*max|v|/h = %.3g exceeds 1 (max|v|=%.3g)",
            config.dt * vmax / h, vmax,
        )


def run(config: MacroRunConfig) -> MacroRunResult:
    """Integrate to the horizon, sampling diagnostics every output stride.

    The horizon is rounded to a whole number of steps.  CFL advisories
    are evaluated once on the initial state and logged, not enforced.
    """
    state = initial_state(config)
    _log_cfl_advisories(config, state)
    n_steps = max(1, int(round(config.T / config.dt)))
    rows = [_diagnostics(state, config)]
    for m in range(1, n_steps + 1):
        state = step(state, config)
        if m % config.output_stride == 0 or m == n_steps:
            rows.append(_diagnostics(state, config))
    cols = [np.asarray(c, dtype=float) for c in zip(*rows)]
    return MacroRunResult(
        t=cols[0], err_L=cols[1], err_F=cols[2], kl_L=cols[3], kl_F=cols[4],
        mass_L=cols[5], mass_F=cols[6], final_state=state,
    )


def write_series_csv(result: MacroRunResult, path) -> None:
    """Diagnostics table: t, err_L, err_F, kl_L, kl_F, mass_L, mass_F."""
    data = np.column_stack([
        result.t, result.err_L, result.err_F, result.kl_L, result.kl_F,
        result.mass_L, result.mass_F,
    ])
    np.savetxt(
        path, data, fmt="%.17g", delimiter=",",
        header="t,err_L,err_F,kl_L,kl_F,mass_L,mass_F", comments="",
    )


def write_snapshot(state: SimState, directory, prefix: str | None = None) -> dict:
    """Export the state's fields as GridFunction CSVs; returns the paths."""
    import os

    tag = prefix if prefix is not None else f"t{state.t:.6f}"
    meta = (f"t={state.t:.17g} step={state.step_count}",)
    paths = {}
    for name, f in (("rho_L", state.rho_L), ("rho_F", state.rho_F), ("u", state.u)):
        p = os.path.join(directory, f"{tag}_{name}.csv")
        f.to_csv(p, header_lines=meta)
        paths[name] = p
    return paths
