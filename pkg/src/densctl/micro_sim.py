"""Agent-based counterpart of the density-control loop.

Followers obey pairwise interaction forces plus Brownian noise
(Euler-Maruyama); leaders move deterministically under the mesh control
law sampled at their positions.  The bridges between the two scales are
``kde`` (positions to density, circular von Mises kernels) and
``collocate`` (mesh field to per-agent velocities).

``follower_drift`` and ``step_euler_maruyama`` define the dynamics by
exact pairwise summation, cost O(N^2) per step.  ``run_micro`` defaults
to that path; ``method="mesh"`` switches the interaction sums and the
density estimates to a deposit/convolve/interpolate pipeline on the run
mesh, which is O(N + n log n) per step and differs from the exact path
by the deposit's O(h^2) smoothing.  Ensemble protocols need the fast
path; single-run checks should stay exact.

Noise is drawn from a counter-based stream keyed by the run seed with
the step index as counter, agents reading fixed slots in step order.
Trajectories are therefore bit-reproducible given (seed, method), and
appending agents leaves earlier agents' noise unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .grid import GridFunction, PeriodicMesh, integral, wrap_displacement
from .kernels import KernelSpec, evaluate, materialize
from .macro_sim import (
    _leader_momentum,
    _momentum_to_velocity,
    _safe_kl,
)
from .metrics import l2_error
from .targets import TargetDensity, bessel_i0

logger = logging.getLogger("densctl.micro")

__all__ = [
    "AgentState",
    "BridgeConfig",
    "MicroRunConfig",
    "MicroRunResult",
    "collocate",
    "follower_drift",
    "initial_lattice_state",
    "kde",
    "lattice_positions",
    "run_micro",
    "step_euler_maruyama",
    "write_agents_csv",
]


# -- state and configuration ------------------------------------------------


@dataclass(frozen=True)
class AgentState:
    """Positions of both species plus the reproducibility handle.

    leaders/followers are (count, dim) arrays wrapped into [-pi, pi);
    seed and step_count identify the noise stream and its position, so a
    run can be resumed bit-exactly from any state.
    """

    leaders: np.ndarray
    followers: np.ndarray
    t: float
    seed: int
    step_count: int

    @property
    def dim(self) -> int:
        return self.followers.shape[1]


@dataclass(frozen=True)
class BridgeConfig:
    """Macro<->micro bridge: estimation mesh and KDE bandwidth.

    kde_concentration is the von Mises concentration; the default suits
    a few hundred agents on a fine 1D mesh.  Results are bandwidth
    sensitive, which is why this is surfaced as configuration.
    """

    mesh: PeriodicMesh
    kde_concentration: float = 50.0

    def __post_init__(self) -> None:
        if self.kde_concentration <= 0:
            raise ValueError(
                f"kde_concentration must be positive, got {self.kde_concentration}"
            )


@dataclass(frozen=True)
class MicroRunConfig:
    """Immutable description of one agent-based run.

    Masses follow the counts: leaders carry n_leaders/N total mass and
    followers the rest, so rho_L_ref and target must be scaled to those
    masses (checked).  method="exact" uses pairwise sums and exact KDE;
    "mesh" uses the deposit-based accelerated path.
    """

    bridge: BridgeConfig
    dt: float
    T: float
    K: float
    D: float
    fl_spec: KernelSpec
    ff_spec: KernelSpec
    target: TargetDensity
    rho_L_ref: GridFunction
    n_leaders: int
    n_followers: int
    seed: int
    output_stride: int = 100
    method: str = "exact"

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")
        if self.K <= 0:
            raise ValueError(f"control gain must be positive, got K={self.K}")
        if self.D < 0:
            raise ValueError(f"diffusion must be nonnegative, got D={self.D}")
        if self.n_leaders < 1 or self.n_followers < 1:
            raise ValueError("both species need at least one agent")
        if self.output_stride < 1:
            raise ValueError("output_stride must be at least 1")
        if self.method not in ("exact", "mesh"):
            raise ValueError(f"method must be 'exact' or 'mesh', got {self.method!r}")
        mesh = self.bridge.mesh
        if self.target.mesh != mesh or self.rho_L_ref.mesh != mesh:
            raise ValueError("target and rho_L_ref must live on the bridge mesh")
        total = self.n_leaders + self.n_followers
        m_L = self.n_leaders / total
        m_F = self.n_followers / total
        if abs(integral(self.rho_L_ref) - m_L) > 1e-8:
            raise ValueError(
                f"rho_L_ref mass {integral(self.rho_L_ref):.12g} does not match "
                f"the leader count fraction {m_L:.12g}"
            )
        if abs(self.target.mass - m_F) > 1e-8:
            raise ValueError(
                f"target mass {self.target.mass:.12g} does not match "
                f"the follower count fraction {m_F:.12g}"
            )


# -- bridges ----------------------------------------------------------------


def _i0e(kappa: float) -> float:
    """exp(-kappa) * I0(kappa), stable for large arguments."""
    if kappa <= 20.0:
        return math.exp(-kappa) * bessel_i0(kappa)
    # asymptotic series; terms shrink to ~1e-16 before turning for kappa >= 20
    acc = term = 1.0
    for m in range(1, 40):
        term *= (2 * m - 1) ** 2 / (8.0 * m * kappa)
        acc += term
        if term < 1e-17 * acc:
            break
    return acc / math.sqrt(2.0 * math.pi * kappa)


def kde(positions: np.ndarray, mass: float, bridge: BridgeConfig) -> GridFunction:
    """Circular kernel density estimate on the bridge mesh.

    density(x) = (mass/N) * sum_i VM(x; x_i, concentration) with the von
    Mises kernel normalized to unit integral (product form in 2D).  The
    result integrates to ``mass`` up to quadrature error, well inside
    1e-6 for any usable bandwidth.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    if pos.shape[0] == 0:
        raise ValueError("kde needs at least one position")
    mesh = bridge.mesh
    if pos.shape[1] != mesh.dim:
        raise ValueError(f"positions are {pos.shape[1]}D but the mesh is {mesh.dim}D")
    c = bridge.kde_concentration
    norm = 2.0 * math.pi * _i0e(c)
    x = mesh.axis
    # exp(c(cos d - 1)) keeps every factor <= 1; the e^{-c} absorbed into
    # the normalization via _i0e
    if mesh.dim == 1:
        fac = np.exp(c * (np.cos(x[None, :] - pos[:, :1]) - 1.0))
        vals = fac.sum(axis=0) / norm
    else:
        fx = np.exp(c * (np.cos(x[None, :] - pos[:, 0:1]) - 1.0))
        fy = np.exp(c * (np.cos(x[None, :] - pos[:, 1:2]) - 1.0))
        vals = (fx.T @ fy) / norm**2
    return GridFunction(mesh, vals * (mass / pos.shape[0]))


def collocate(u_field: GridFunction, positions: np.ndarray) -> np.ndarray:
    """Sample a mesh velocity field at agent positions, periodic linear
    interpolation; exact at nodes, O(spacing^2) between them."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    mesh = u_field.mesh
    if pos.shape[1] != mesh.dim:
        raise ValueError(f"positions are {pos.shape[1]}D but the field is {mesh.dim}D")
    h = mesh.spacing
    s = (pos + math.pi) / h
    i0 = np.floor(s).astype(int) % mesh.n
    w = s - np.floor(s)
    i1 = (i0 + 1) % mesh.n
    if mesh.dim == 1:
        v = u_field.values
        out = (1.0 - w[:, 0]) * v[i0[:, 0]] + w[:, 0] * v[i1[:, 0]]
        return out[:, None]
    v = u_field.values  # (n, n, 2)
    wx, wy = w[:, 0], w[:, 1]
    out = (
        v[i0[:, 0], i0[:, 1]] * ((1 - wx) * (1 - wy))[:, None]
        + v[i1[:, 0], i0[:, 1]] * (wx * (1 - wy))[:, None]
        + v[i0[:, 0], i1[:, 1]] * ((1 - wx) * wy)[:, None]
        + v[i1[:, 0], i1[:, 1]] * (wx * wy)[:, None]
    )
    return out


# -- exact dynamics ---------------------------------------------------------


def follower_drift(
    state: AgentState, fl_spec: KernelSpec, ff_spec: KernelSpec
) -> np.ndarray:
    """Exact pairwise follower drift.

    For follower k: (1/(N_L+N_F)) * (sum_j fl(x_k - x_j^L)
    + sum_m ff(x_k - x_m^F)), displacements wrapped.  The m=k self term
    vanishes because every kernel is zero at the origin.
    """
    xf, xl = state.followers, state.leaders
    total = xf.shape[0] + xl.shape[0]
    dim = state.dim
    drift = np.zeros_like(xf)
    for spec, src in ((fl_spec, xl), (ff_spec, xf)):
        if spec.kind == "none" or src.shape[0] == 0:
            continue
        disp = wrap_displacement(xf[:, None, :], src[None, :, :])
        if dim == 1:
            drift[:, 0] += evaluate(spec, disp[:, :, 0], 1).sum(axis=1)
        else:
            drift += evaluate(spec, disp, 2).sum(axis=1)
    return drift / total


def _noise(seed: int, step_count: int, shape: tuple) -> np.ndarray:
    # counter-based: the step index selects the block, agents read fixed
    # row-major slots, so draws never depend on how many steps ran before
    bitgen = np.random.Philox(key=seed, counter=[step_count, 0, 0, 0])
    return np.random.Generator(bitgen).standard_normal(shape)


def step_euler_maruyama(
    state: AgentState, config: MicroRunConfig, u_field: GridFunction | None = None
) -> AgentState:
    """One Euler-Maruyama step of the exact pairwise dynamics.

    Followers: x <- wrap(x + drift dt + sqrt(2 D dt) xi); leaders:
    x <- wrap(x + u(x) dt) with u sampled by collocate, or held fixed
    when no field is given.
    """
    dt = config.dt
    drift = follower_drift(state, config.fl_spec, config.ff_spec)
    xi = _noise(state.seed, state.step_count, state.followers.shape)
    followers = wrap_displacement(
        state.followers + drift * dt + math.sqrt(2.0 * config.D * dt) * xi
    )
    leaders = state.leaders
    if u_field is not None:
        leaders = wrap_displacement(leaders + collocate(u_field, leaders) * dt)
    return AgentState(
        leaders=leaders,
        followers=followers,
        t=state.t + dt,
        seed=state.seed,
        step_count=state.step_count + 1,
    )


# -- initialization ---------------------------------------------------------


def lattice_positions(count: int, dim: int) -> np.ndarray:
    """Equally spaced positions: cell centers of a uniform partition.

    2D uses the most nearly square divisor pair of ``count``; when the
    count is prime the grid is padded to the next rectangle and the
    trailing cells dropped, leaving the last row sparser.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if dim == 1:
        return (-math.pi + (np.arange(count) + 0.5) * 2.0 * math.pi / count)[:, None]
    if dim != 2:
        raise ValueError("only 1D and 2D lattices are supported")
    best = 1
    for a in range(1, int(math.isqrt(count)) + 1):
        if count % a == 0:
            best = a
    rows = best
    cols = count // rows
    if rows == 1 and count > 3:  # prime count: truncated near-square grid
        rows = int(math.isqrt(count - 1)) + 1
        cols = -(-count // rows)
    x = -math.pi + (np.arange(rows) + 0.5) * 2.0 * math.pi / rows
    y = -math.pi + (np.arange(cols) + 0.5) * 2.0 * math.pi / cols
    X, Y = np.meshgrid(x, y, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    return pts[:count]


def initial_lattice_state(config: MicroRunConfig) -> AgentState:
    """Both species on independent uniform lattices at t = 0."""
    dim = config.bridge.mesh.dim
    return AgentState(
        leaders=lattice_positions(config.n_leaders, dim),
        followers=lattice_positions(config.n_followers, dim),
        t=0.0,
        seed=config.seed,
        step_count=0,
    )


# -- mesh-accelerated internals ---------------------------------------------


def _deposit(mesh: PeriodicMesh, positions: np.ndarray, mass: float) -> np.ndarray:
    """Cloud-in-cell deposit of point masses onto the mesh, as a density."""
    n, h = mesh.n, mesh.spacing
    s = (positions + math.pi) / h
    i0 = np.floor(s).astype(int) % n
    w = s - np.floor(s)
    i1 = (i0 + 1) % n
    per = mass / positions.shape[0]
    if mesh.dim == 1:
        out = np.bincount(i0[:, 0], weights=1.0 - w[:, 0], minlength=n)
        out += np.bincount(i1[:, 0], weights=w[:, 0], minlength=n)
        return out * (per / h)
    wx, wy = w[:, 0], w[:, 1]
    flat = np.zeros(n * n)
    for ix, iy, ww in (
        (i0[:, 0], i0[:, 1], (1 - wx) * (1 - wy)),
        (i1[:, 0], i0[:, 1], wx * (1 - wy)),
        (i0[:, 0], i1[:, 1], (1 - wx) * wy),
        (i1[:, 0], i1[:, 1], wx * wy),
    ):
        flat += np.bincount(ix * n + iy, weights=ww, minlength=n * n)
    return flat.reshape(n, n) * (per / h**2)


class _MeshEngine:
    """Cached spectra for the deposit/convolve/interpolate fast path."""

    def __init__(self, config: MicroRunConfig):
        mesh = config.bridge.mesh
        self.mesh = mesh
        axes = tuple(range(mesh.dim))
        self.axes = axes

        def spectrum(values):
            return np.fft.rfftn(np.fft.ifftshift(values, axes=axes), axes=axes)

        self.fl_hat = spectrum(materialize(config.fl_spec, mesh).values)
        self.ff_hat = spectrum(materialize(config.ff_spec, mesh).values)
        c = config.bridge.kde_concentration
        if mesh.dim == 1:
            vm = np.exp(c * (np.cos(mesh.axis) - 1.0)) / (2.0 * math.pi * _i0e(c))
        else:
            vm1 = np.exp(c * (np.cos(mesh.axis) - 1.0)) / (2.0 * math.pi * _i0e(c))
            vm = np.outer(vm1, vm1)
        self.vm_hat = spectrum(vm)

    def _convolve(self, k_hat, density_values):
        mesh = self.mesh
        d_hat = np.fft.rfftn(density_values, axes=self.axes)
        if k_hat.ndim > mesh.dim:
            d_hat = d_hat[..., None]
        shape = mesh.shape
        out = np.fft.irfftn(k_hat * d_hat, s=shape, axes=self.axes)
        return out * mesh.spacing**mesh.dim

    def density_estimate(self, positions: np.ndarray, mass: float) -> GridFunction:
        dep = _deposit(self.mesh, positions, mass)
        return GridFunction(self.mesh, self._convolve(self.vm_hat, dep))

    def follower_velocity_field(self, state: AgentState, config: MicroRunConfig):
        m_L = config.n_leaders / (config.n_leaders + config.n_followers)
        dep_L = _deposit(self.mesh, state.leaders, m_L)
        dep_F = _deposit(self.mesh, state.followers, 1.0 - m_L)
        vals = self._convolve(self.fl_hat, dep_L) + self._convolve(self.ff_hat, dep_F)
        return GridFunction(self.mesh, vals)


def _step_mesh(
    state: AgentState,
    config: MicroRunConfig,
    engine: _MeshEngine,
    u_field: GridFunction | None,
) -> AgentState:
    # same update as step_euler_maruyama, same noise stream; drift comes
    # from the deposited fields instead of pairwise sums
    dt = config.dt
    v = engine.follower_velocity_field(state, config)
    drift = collocate(v, state.followers)
    xi = _noise(state.seed, state.step_count, state.followers.shape)
    followers = wrap_displacement(
        state.followers + drift * dt + math.sqrt(2.0 * config.D * dt) * xi
    )
    leaders = state.leaders
    if u_field is not None:
        leaders = wrap_displacement(leaders + collocate(u_field, leaders) * dt)
    return AgentState(leaders, followers, state.t + dt, state.seed, state.step_count + 1)


# -- the closed-loop run ----------------------------------------------------


@dataclass(frozen=True)
class MicroRunResult:
    """Sampled diagnostics plus the final agent state.

    Errors and divergences compare kernel density estimates against the
    references, so they carry estimator bias on top of finite-size
    fluctuation; masses are count fractions, constant by construction.
    """

    t: np.ndarray
    err_L: np.ndarray
    err_F: np.ndarray
    kl_L: np.ndarray
    kl_F: np.ndarray
    mass_L: np.ndarray
    mass_F: np.ndarray
    final_state: AgentState


def run_micro(config: MicroRunConfig) -> MicroRunResult:
    """Integrate the closed loop: estimate leader density, build the
    control field, collocate it, advance every agent one step.

    Diagnostics are sampled every ``output_stride`` steps plus the final
    state; the follower density entering them is the same KDE used for
    the leaders (one estimator for everything).
    """
    mesh = config.bridge.mesh
    total = config.n_leaders + config.n_followers
    m_L = config.n_leaders / total
    m_F = config.n_followers / total
    engine = _MeshEngine(config) if config.method == "mesh" else None

    def estimate(positions, mass):
        if engine is not None:
            return engine.density_estimate(positions, mass)
        return kde(positions, mass, config.bridge)

    n_steps = max(1, round(config.T / config.dt))
    state = initial_lattice_state(config)
    rows = []

    def kl_vs(est: GridFunction, ref: GridFunction) -> float:
        # the estimator's analytic mass matches the reference, but its
        # mesh-sampled mass drifts by the kernel's aliasing error on
        # coarse meshes; rescale so the divergence precondition holds
        m_est = float(integral(est))
        if m_est <= 0.0:
            return float("nan")
        scale = float(integral(ref)) / m_est
        return _safe_kl(GridFunction(est.mesh, est.values * scale), ref)

    def sample(st):
        est_F = estimate(st.followers, m_F)
        est_L = estimate(st.leaders, m_L)
        rows.append(
            (
                st.t,
                l2_error(est_L, config.rho_L_ref),
                l2_error(est_F, config.target.profile),
                kl_vs(est_L, config.rho_L_ref),
                kl_vs(est_F, config.target.profile),
                m_L,
                m_F,
            )
        )

    sample(state)
    for m in range(n_steps):
        est_L = estimate(state.leaders, m_L)
        u_field = _momentum_to_velocity(
            mesh, _leader_momentum(est_L, config.rho_L_ref, config.K), est_L
        )
        if engine is not None:
            state = _step_mesh(state, config, engine, u_field)
        else:
            state = step_euler_maruyama(state, config, u_field)
        if (m + 1) % config.output_stride == 0 or m + 1 == n_steps:
            sample(state)

    cols = [np.array(c) for c in zip(*rows)]
    return MicroRunResult(*cols, final_state=state)


def write_agents_csv(
    state: AgentState, path, header_lines: tuple[str, ...] = ()
) -> None:
    """Trajectory snapshot: one row per agent, species then id then
    coordinates, 17 significant digits.  ``header_lines`` go first as
    ``#`` comments."""
    dim = state.dim
    coord_names = ["x"] if dim == 1 else ["x1", "x2"]
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("species,agent_id," + ",".join(coord_names) + "\n")
        for tag, block in (("L", state.leaders), ("F", state.followers)):
            for i in range(block.shape[0]):
                coords = ",".join(f"{c:.17g}" for c in block[i])
                fh.write(f"{tag},{i},{coords}\n")
