"""Steady-state feasibility analysis and leader density synthesis.

Given a follower target shape rho_hat (unit mass), follower-follower
kernel f_ff, leader-follower range ell and diffusion D, the steady
follower balance forces the leader-induced velocity

    v_fl = D * rho_hat' / rho_hat - M_F * (f_ff * rho_hat)        (1D form)

and the leader density generating it is recovered in closed form through
the exact inverse of the repulsive-kernel convolution:

    rho_L = (D/2) g1 - (D/(2 ell^2)) g2 + M_F g_F + B,

with g1 = (log rho_hat)'', g2 = log rho_hat, g_F built from the
follower-follower field, and B fixing the leader mass.  Nonnegativity of
rho_L for a given leader mass M_L is equivalent to

    M_L * H(x) >= G(x)    for all x,

so the admissible mass interval is [max_{H>0} G/H, min_{H<0} G/H]; this
module computes those thresholds, synthesizes rho_L (with an explicit
infeasible fallback), performs the 2D least-squares deconvolution, and
evaluates the sufficient-stability functionals together with the
comparison-ODE constants they feed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as _kernels
from .grid import (
    GridFunction,
    PeriodicMesh,
    antiderivative,
    circular_convolve,
    derivative,
    integral,
    l2_norm,
    sup_norm,
)
from .targets import TargetDensity

__all__ = [
    "FeasibilityReport",
    "SynthesisResult",
    "Deconvolution2DResult",
    "StabilityReport",
    "steady_interaction_field",
    "theorem1_report",
    "synthesize_leader_density_1d",
    "deconvolve_2d",
    "stability_report",
    "leader_count_bounds",
]

TWO_PI = 2.0 * math.pi


# ----------------------------------------------------------------------------
# steady interaction field


def steady_interaction_field(
    target: TargetDensity, ff_kernel: GridFunction | None, D: float
) -> GridFunction:
    """Leader-induced velocity required to hold the target steady.

    Returns ``D * grad(rho)/rho - (f_ff * rho)`` evaluated with the
    mass-scaled target; scalar in 1D, 2-component in 2D.  ``ff_kernel``
    is the materialized follower-follower kernel (None means no
    follower-follower interaction).
    """
    if D <= 0:
        raise ValueError("D must be positive")
    mesh = target.mesh
    rho = target.profile
    if ff_kernel is not None and ff_kernel.mesh != mesh:
        raise ValueError("kernel and target live on different meshes")
    if mesh.dim == 1:
        diff = D * derivative(rho).values / rho.values
        vff = (
            circular_convolve(ff_kernel, rho).values
            if ff_kernel is not None
            else np.zeros(mesh.n)
        )
        return GridFunction(mesh, diff - vff)
    comps = [D * derivative(rho, axis=ax).values / rho.values for ax in range(2)]
    diff = np.stack(comps, axis=-1)
    if ff_kernel is not None:
        if not ff_kernel.is_vector:
            raise ValueError("2D follower-follower kernel must be vector valued")
        vff = circular_convolve(ff_kernel, rho).values
    else:
        vff = np.zeros_like(diff)
    return GridFunction(mesh, diff - vff)


# ----------------------------------------------------------------------------
# feasible mass interval


@dataclass(frozen=True)
class FeasibilityReport:
    """Admissible leader-mass interval and the fields behind it.

    M_hat_1 / M_hat_2: lower/upper mass thresholds (-inf / +inf when the
    corresponding sign set of H is empty).
    zero_set_ok: G <= 0 (within tolerance) wherever H vanishes.
    h_field = G/H on the nonvanishing set (0 where |H| <= eps_H).
    g1, g2, g_F, C, C_F: building blocks kept for synthesis and diagnostics.
    rho_L_ref: filled by the synthesis step, absent on a bare report.
    """

    M_hat_1: float
    M_hat_2: float
    zero_set_ok: bool
    H_field: GridFunction
    G_field: GridFunction
    h_field: GridFunction
    g1: GridFunction
    g2: GridFunction
    g_F: GridFunction
    C: float
    C_F: float
    eps_H: float
    eps_G: float
    rho_L_ref: GridFunction | None = None

    def feasible_for(self, M_L: float) -> bool:
        """Whether leader mass ``M_L`` admits a nonnegative exact leader density."""
        return (
            0.0 < M_L < 1.0
            and self.M_hat_1 <= M_L <= self.M_hat_2
            and self.zero_set_ok
        )


def _theorem1_fields(target: TargetDensity, ff_kernel: GridFunction | None, fl_ell: float, D: float):
    """Shared pieces: g1, g2, g_F, C, C_F on the target's (1D) mesh."""
    mesh = target.mesh
    if mesh.dim != 1:
        raise ValueError("the mass-interval analysis is one-dimensional")
    if fl_ell <= 0 or D <= 0:
        raise ValueError("fl_ell and D must be positive")
    rho_hat = target.normalized
    log_rho = GridFunction(mesh, np.log(rho_hat.values))
    g1 = derivative(derivative(log_rho))
    g2 = log_rho
    if ff_kernel is not None:
        vff_hat = circular_convolve(ff_kernel, rho_hat)
        g_F = GridFunction(
            mesh,
            antiderivative(vff_hat).values / (2.0 * fl_ell**2)
            - 0.5 * derivative(vff_hat).values,
        )
    else:
        g_F = GridFunction(mesh, np.zeros(mesh.n))
    C = integral(g2)
    C_F = integral(g_F)
    return g1, g2, g_F, C, C_F


def theorem1_report(
    target: TargetDensity,
    ff_kernel: GridFunction | None,
    fl_ell: float,
    D: float,
) -> FeasibilityReport:
    """Compute the admissible leader-mass interval for a 1D target.

    H = 1/(2*pi) + h_F and G = -(D/2) g1 + (D/(2 ell^2)) g2
    - D*C/(4*pi*ell^2) + h_F with h_F = C_F/(2*pi) - g_F; the thresholds
    are max G/H over {H > eps_H} and min G/H over {H < -eps_H}, with
    sign sets resolved at eps_H = 1e-8 * sup|H| (eps_G likewise for the
    zero-set check).
    """
    mesh = target.mesh
    g1, g2, g_F, C, C_F = _theorem1_fields(target, ff_kernel, fl_ell, D)
    h_F = C_F / TWO_PI - g_F.values
    H = 1.0 / TWO_PI + h_F
    G = (
        -0.5 * D * g1.values
        + D / (2.0 * fl_ell**2) * g2.values
        - D * C / (2.0 * TWO_PI * fl_ell**2)
        + h_F
    )
    eps_H = 1e-8 * np.max(np.abs(H))
    eps_G = 1e-8 * max(np.max(np.abs(G)), 1e-300)
    pos, neg = H > eps_H, H < -eps_H
    h = np.zeros_like(H)
    active = pos | neg
    h[active] = G[active] / H[active]
    M1 = float(np.max(h[pos])) if np.any(pos) else -math.inf
    M2 = float(np.min(h[neg])) if np.any(neg) else math.inf
    zero = ~active
    zero_ok = bool(np.all(G[zero] <= eps_G)) if np.any(zero) else True
    return FeasibilityReport(
        M_hat_1=M1,
        M_hat_2=M2,
        zero_set_ok=zero_ok,
        H_field=GridFunction(mesh, H),
        G_field=GridFunction(mesh, G),
        h_field=GridFunction(mesh, h),
        g1=g1,
        g2=g2,
        g_F=g_F,
        C=float(C),
        C_F=float(C_F),
        eps_H=float(eps_H),
        eps_G=float(eps_G),
    )


# ----------------------------------------------------------------------------
# 1D synthesis


@dataclass(frozen=True)
class SynthesisResult:
    rho_L: GridFunction
    fallback_used: bool
    B: float


def synthesize_leader_density_1d(
    report: FeasibilityReport,
    fl_ell: float,
    D: float,
    M_L: float,
    allow_infeasible: bool = False,
) -> SynthesisResult:
    """Closed-form leader density for follower mass ``1 - M_L``.

    rho_L = (D/2) g1 - (D/(2 ell^2)) g2 + M_F g_F + B with B chosen so
    the leader mass is M_L; on the mesh this equals M_L*H - G identically.
    If the profile dips negative, strict mode raises; with
    ``allow_infeasible=True`` the fallback shifts B so the minimum touches
    zero and rescales multiplicatively back to mass M_L (flagged in the
    result).
    """
    if not (0.0 < M_L < 1.0):
        raise ValueError(f"M_L must lie in (0,1), got {M_L}")
    if fl_ell <= 0 or D <= 0:
        raise ValueError("fl_ell and D must be positive")
    mesh = report.g1.mesh
    M_F = 1.0 - M_L
    B = (1.0 - M_F + D * report.C / (2.0 * fl_ell**2) - M_F * report.C_F) / TWO_PI
    vals = (
        0.5 * D * report.g1.values
        - D / (2.0 * fl_ell**2) * report.g2.values
        + M_F * report.g_F.values
        + B
    )
    lo = float(np.min(vals))
    tol = 1e-12 * max(1.0, np.max(np.abs(vals)))
    if lo >= -tol:
        return SynthesisResult(GridFunction(mesh, np.maximum(vals, 0.0)), False, float(B))
    if not allow_infeasible:
        raise ValueError(
            f"leader mass {M_L} is infeasible for this target: synthesized density "
            f"reaches {lo:.3e}; pass allow_infeasible=True for the clamped surrogate"
        )
    shifted = vals - lo  # minimum exactly zero
    mass = float(integral(GridFunction(mesh, shifted)))
    vals_fb = shifted * (M_L / mass)
    return SynthesisResult(GridFunction(mesh, vals_fb), True, float(B - lo))


# ----------------------------------------------------------------------------
# 2D deconvolution


@dataclass(frozen=True)
class Deconvolution2DResult:
    rho_L: GridFunction
    feasible: bool
    M_hat: float
    offset: float  # additive constant applied to the least-squares solution


def deconvolve_2d(
    vfl: GridFunction, fl_kernel: GridFunction, M_L: float
) -> Deconvolution2DResult:
    """Least-squares inversion of ``f_fl * rho_L = vfl`` on a 2D mesh.

    Per Fourier mode k != 0 the two velocity components give an
    overdetermined system solved by ``rho(k) = <F(k), V(k)> / |F(k)|^2``.
    The free zero mode is then fixed by lifting the solution to be
    nonnegative (adding ``-min``), which realizes the minimal leader mass
    M_hat; feasibility means M_hat <= M_L, and any surplus mass is spread
    uniformly.  Infeasible inputs return the minimal-mass profile scaled
    up to M_L, flagged ``feasible=False``.
    """
    mesh = vfl.mesh
    if mesh.dim != 2 or not vfl.is_vector or not fl_kernel.is_vector:
        raise ValueError("deconvolve_2d expects 2D vector fields")
    if fl_kernel.mesh != mesh:
        raise ValueError("kernel and field live on different meshes")
    if not (0.0 < M_L < 1.0):
        raise ValueError(f"M_L must lie in (0,1), got {M_L}")
    axes = (0, 1)
    # kernel samples live on the axis grid; spectra need displacement order
    F = np.fft.fftn(np.fft.ifftshift(fl_kernel.values, axes=axes), axes=axes) * mesh.cell_volume
    V = np.fft.fftn(vfl.values, axes=axes)
    num = np.conj(F[..., 0]) * V[..., 0] + np.conj(F[..., 1]) * V[..., 1]
    den = np.abs(F[..., 0]) ** 2 + np.abs(F[..., 1]) ** 2
    # a kernel mode whose relative amplitude is below 1e-10 is treated as
    # vanished (an odd kernel's double-Nyquist coefficient is zero only up
    # to rounding); inverting it would amplify FFT noise
    dead = den <= 1e-20 * max(np.max(den), 1e-300)
    v_scale = float(np.max(np.abs(V)))
    bad = dead & (
        np.abs(V[..., 0]) + np.abs(V[..., 1]) > 1e-10 * max(v_scale, 1e-300)
    )
    bad[0, 0] = False  # zero mode is free by construction (odd kernel)
    if np.any(bad):
        k1, k2 = np.argwhere(bad)[0]
        raise ValueError(
            f"deconvolution undefined: kernel mode ({k1},{k2}) vanishes but the "
            "velocity field carries that mode"
        )
    den_safe = np.where(dead, 1.0, den)
    R_hat = np.where(dead, 0.0, num / den_safe)
    R_hat[0, 0] = 0.0
    R = np.fft.ifftn(R_hat, axes=axes).real
    offset = -float(np.min(R))
    lifted = R + offset
    M_hat = float(lifted.sum() * mesh.cell_volume)
    if M_hat <= M_L:
        remainder = (M_L - M_hat) / (TWO_PI**2)
        rho = lifted + remainder
        return Deconvolution2DResult(GridFunction(mesh, rho), True, M_hat, offset)
    rho = lifted * (M_L / M_hat)
    return Deconvolution2DResult(GridFunction(mesh, rho), False, M_hat, offset)


# ----------------------------------------------------------------------------
# stability functionals


@dataclass(frozen=True)
class StabilityReport:
    """Sufficient-condition functionals and the comparison-ODE constants.

    condition_holds: D*(2 - ||g1||_inf) > F with F the kernel-coupling
    functional; alpha..delta feed the scalar comparison ODE (delta from
    the stated mapping, delta_cubic the raw cubic-term coefficient).
    basin_eta_star is the Appendix-style basin bound in the squared-error
    variable, present only when the condition holds and the control gain
    was supplied.
    """

    D_margin: float
    F: float
    g1_sup: float
    condition_holds: bool
    alpha: float
    beta: float
    gamma: float
    delta: float
    delta_cubic: float
    basin_eta_star: float | None


def stability_report(
    target: TargetDensity,
    ff_spec: _kernels.KernelSpec | None,
    fl_spec: _kernels.KernelSpec,
    D: float,
    rho_L0: GridFunction,
    control_gain: float | None = None,
) -> StabilityReport:
    """Evaluate the sufficient stability condition around the target.

    1D: F = 2*(||rho_F|| * ||f_ff'|| + ||rho_F'|| * ||f_ff||) with the
    mass-scaled target; kernel derivatives come from the closed forms
    (mesh differences would blow up on the kernel jump).  The forcing
    amplitudes use the initial leader density rho_L0:
    h1 = (f_fl * rho_L0)' + (f_ff * rho_F)',
    h2 = (rho_F*((f_fl * rho_L0) + (f_ff * rho_F)) - D*rho_F')'.
    """
    mesh = target.mesh
    if mesh.dim != 1:
        raise ValueError("stability_report is one-dimensional")
    if rho_L0.mesh != mesh:
        raise ValueError("rho_L0 lives on a different mesh")
    rho = target.profile
    rho_x = derivative(rho)
    log_rho = GridFunction(mesh, np.log(target.normalized.values))
    g1_sup = sup_norm(derivative(derivative(log_rho)))
    if ff_spec is not None and ff_spec.kind != "none":
        ff = _kernels.materialize(ff_spec, mesh)
        ff_x = _kernels.derivative_values(ff_spec, mesh)
        F = 2.0 * (l2_norm(rho) * l2_norm(ff_x) + l2_norm(rho_x) * l2_norm(ff))
        ff_x_l2 = l2_norm(ff_x)
        vff = circular_convolve(ff, rho)
    else:
        ff = None
        F = 0.0
        ff_x_l2 = 0.0
        vff = GridFunction(mesh, np.zeros(mesh.n))
    fl = _kernels.materialize(fl_spec, mesh)
    vfl0 = circular_convolve(fl, rho_L0)
    h1 = GridFunction(mesh, derivative(vfl0).values + derivative(vff).values)
    flux = GridFunction(mesh, rho.values * (vfl0.values + vff.values) - D * rho_x.values)
    h2 = derivative(flux)
    lin = -2.0 * D + D * g1_sup + F
    alpha = abs(lin)
    beta = sup_norm(h1)
    gamma = 2.0 * l2_norm(h2)
    delta = 0.5 * ff_x_l2
    condition = D * (2.0 - g1_sup) > F
    basin = None
    if condition and control_gain is not None and delta > 0:
        from .lemma_ode import LemmaParams, basin_estimate

        est = basin_estimate(LemmaParams(alpha, beta, gamma, delta, control_gain))
        basin = est.basin_bound
    return StabilityReport(
        D_margin=D * (2.0 - g1_sup) - F,
        F=F,
        g1_sup=g1_sup,
        condition_holds=condition,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        delta=delta,
        delta_cubic=ff_x_l2,
        basin_eta_star=basin,
    )


# ----------------------------------------------------------------------------
# agent-count bounds


def leader_count_bounds(M_hat_1: float, M_hat_2: float, N_F: int) -> tuple[int, int | None]:
    """Agent counts realizing the mass interval with ``N_F`` followers.

    The leader fraction N_L/(N_L+N_F) must reach M_hat_1, giving
    ``N_L >= ceil(M_hat_1/(1-M_hat_1) * N_F)``; when M_hat_2 < 1 the
    analogous floor gives an upper count, otherwise None.
    """
    if N_F <= 0:
        raise ValueError("N_F must be positive")
    if M_hat_1 >= 1.0:
        raise ValueError("lower mass threshold >= 1: no finite leader count works")
    lower = 0 if M_hat_1 <= 0 else math.ceil(M_hat_1 / (1.0 - M_hat_1) * N_F - 1e-12)
    upper = None
    if M_hat_2 < 1.0:
        upper = math.floor(M_hat_2 / (1.0 - M_hat_2) * N_F + 1e-12)
    return lower, upper
