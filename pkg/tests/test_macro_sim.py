"""Scheme-level checks for the coupled transport integrator: control
field construction, conservative stepping, diagnostics, and the
dimension-reduction consistency of the 2D path."""

import logging
import math

import numpy as np
import pytest

from densctl import kernels, targets
from densctl.feasibility import synthesize_leader_density_1d, theorem1_report
from densctl.grid import (
    GridFunction,
    PeriodicMesh,
    antiderivative,
    circular_convolve,
    derivative,
    integral,
    l2_norm,
    laplacian,
)
from densctl.macro_sim import (
    MacroRunConfig,
    SimState,
    control_field_1d,
    control_field_2d,
    initial_state,
    run,
    step,
    write_series_csv,
    write_snapshot,
)

ELL = math.pi
FL = kernels.KernelSpec(kind="repulsive", ell=ELL)
WEAK = kernels.KernelSpec(kind="morse", ell_r=math.pi / 2, ell_a=math.pi, zeta=1.0)


def uniform_field(mesh, mass):
    return GridFunction(mesh, np.full(mesh.shape, mass / (2.0 * np.pi) ** mesh.dim))


def uniform_target(mesh, mass):
    norm = GridFunction(mesh, np.full(mesh.shape, 1.0 / (2.0 * np.pi) ** mesh.dim))
    return targets.TargetDensity(norm, mass)


def weak_scenario_config(mesh, M_L=0.25, dt=3e-3, T=1.0, stride=50, **kw):
    """Feasible operating point with Morse follower coupling."""
    tgt = targets.scale_to_mass(targets.von_mises_1d(mesh, kappa=1.0), 1.0 - M_L)
    ff = kernels.materialize(WEAK, mesh)
    rep = theorem1_report(tgt, ff, ELL, 0.02)
    syn = synthesize_leader_density_1d(rep, ELL, 0.02, M_L, allow_infeasible=True)
    return MacroRunConfig(
        mesh=mesh, dt=dt, T=T, K=1.0, D=0.02,
        fl_kernel=kernels.materialize(FL, mesh), ff_kernel=ff,
        target=tgt, rho_L_ref=syn.rho_L, output_stride=stride, **kw,
    )


class TestConfigValidation:
    def _base(self, mesh, **kw):
        args = dict(
            mesh=mesh, dt=1e-3, T=1.0, K=1.0, D=0.02,
            fl_kernel=kernels.materialize(FL, mesh), ff_kernel=None,
            target=uniform_target(mesh, 0.75), rho_L_ref=uniform_field(mesh, 0.25),
        )
        args.update(kw)
        return MacroRunConfig(**args)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(dt=0.0), dict(T=-1.0), dict(K=0.0), dict(D=0.0),
            dict(output_stride=0),
        ],
    )
    def test_scalar_parameters(self, kw):
        with pytest.raises(ValueError):
            self._base(PeriodicMesh(1, 64), **kw)

    def test_kernel_mesh_mismatch(self):
        mesh = PeriodicMesh(1, 64)
        other = kernels.materialize(FL, PeriodicMesh(1, 128))
        with pytest.raises(ValueError, match="mesh"):
            self._base(mesh, fl_kernel=other)

    def test_kernel_component_mismatch(self):
        mesh = PeriodicMesh(2, 16)
        scalar = GridFunction(mesh, np.zeros(mesh.shape))
        with pytest.raises(ValueError, match="component"):
            self._base(mesh, fl_kernel=scalar, rho_L_ref=uniform_field(mesh, 0.25),
                       target=uniform_target(mesh, 0.75))

    def test_initial_mass_mismatch(self):
        mesh = PeriodicMesh(1, 64)
        with pytest.raises(ValueError, match="mass"):
            self._base(mesh, rho_L0=uniform_field(mesh, 0.4))
        with pytest.raises(ValueError, match="mass"):
            self._base(mesh, rho_F0=uniform_field(mesh, 0.4))


class TestControlField1D:
    def test_zero_error_zero_control(self):
        mesh = PeriodicMesh(1, 128)
        ref = targets.scale_to_mass(targets.von_mises_1d(mesh, kappa=0.8), 0.25).profile
        st = SimState(0.0, ref, ref, GridFunction(mesh, np.zeros(mesh.n)), 0)
        u = control_field_1d(st, ref, K=1.5)
        assert np.max(np.abs(u.values)) < 1e-14

    def test_single_mode_matches_antiderivative(self):
        # rho_L = ref + eps*sin(x) gives P(x) = eps*(cos x - cos(-pi))
        mesh = PeriodicMesh(1, 256)
        x = mesh.axis
        eps, K = 0.01, 2.0
        ref = uniform_field(mesh, 0.25)
        rho_L = GridFunction(mesh, ref.values + eps * np.sin(x))
        st = SimState(0.0, rho_L, rho_L, GridFunction(mesh, np.zeros(mesh.n)), 0)
        u = control_field_1d(st, ref, K)
        expected = -K * eps * (np.cos(x) + 1.0) / rho_L.values
        assert np.max(np.abs(u.values - expected)) < 1e-3 * K * eps / ref.values[0]

    def test_seam_consistency(self):
        # zero-mean error closes the antiderivative loop, so the value at
        # the anchor node agrees with the full-circle continuation
        mesh = PeriodicMesh(1, 200)
        rng = np.random.default_rng(5)
        c = np.zeros(mesh.n)
        for k in range(1, 6):
            c += rng.normal() * np.cos(k * mesh.axis) + rng.normal() * np.sin(k * mesh.axis)
        err = GridFunction(mesh, 0.01 * c)
        P = antiderivative(err)
        h = mesh.spacing
        full_loop = P.values[-1] + 0.5 * h * (err.values[-1] + err.values[0])
        assert abs(full_loop) < 1e-10
        # re-anchoring at node n-s and continuing through the seam back to
        # node 0 must land on the anchored value there
        for s in (1, 57, 130):
            rolled = antiderivative(GridFunction(mesh, np.roll(err.values, s)))
            seg = rolled.values[s]  # integral from node n-s across the seam
            assert abs(P.values[mesh.n - s] + seg) < 1e-10

    def test_anchor_choice_cancels_in_the_update(self):
        # the leader update is the flux derivative; constants drop out
        mesh = PeriodicMesh(1, 128)
        rng = np.random.default_rng(11)
        e = rng.normal(size=mesh.n)
        e -= e.mean()
        P = antiderivative(GridFunction(mesh, e))
        for shift in (3, 40, 101):
            rolled = antiderivative(GridFunction(mesh, np.roll(e, shift)))
            P_alt = np.roll(rolled.values, -shift)
            d1 = derivative(GridFunction(mesh, P.values)).values
            d2 = derivative(GridFunction(mesh, P_alt)).values
            assert np.max(np.abs(d1 - d2)) < 1e-12

    def test_vacuum_aborts(self):
        mesh = PeriodicMesh(1, 64)
        vals = np.full(mesh.n, 0.1)
        vals[10] = 0.0
        st = SimState(0.0, GridFunction(mesh, vals), GridFunction(mesh, vals),
                      GridFunction(mesh, np.zeros(mesh.n)), 0)
        with pytest.raises(ValueError, match="vacuum"):
            control_field_1d(st, uniform_field(mesh, integral(GridFunction(mesh, vals))), 1.0)

    def test_dimension_check(self):
        mesh = PeriodicMesh(2, 16)
        f = uniform_field(mesh, 0.25)
        st = SimState(0.0, f, f, GridFunction(mesh, np.zeros(mesh.shape + (2,))), 0)
        with pytest.raises(ValueError, match="1D"):
            control_field_1d(st, f, 1.0)


class TestControlField2D:
    def test_zero_error_zero_control(self):
        mesh = PeriodicMesh(2, 32)
        ref = uniform_field(mesh, 0.25)
        st = SimState(0.0, ref, ref, GridFunction(mesh, np.zeros(mesh.shape + (2,))), 0)
        u = control_field_2d(st, ref, 1.0)
        assert np.max(np.abs(u.values)) < 1e-14

    def test_single_mode_analytic(self):
        # e^L = a*cos(x1) with constant rho_L = c: u = -(K a / c) sin(x1) e1
        mesh = PeriodicMesh(2, 32)
        X1, _ = mesh.coords()
        c = 0.25 / (2.0 * np.pi) ** 2
        a, K = 0.3 * c, 2.0
        rho_L = uniform_field(mesh, 0.25)
        ref = GridFunction(mesh, rho_L.values + a * np.cos(X1))
        st = SimState(0.0, rho_L, rho_L, GridFunction(mesh, np.zeros(mesh.shape + (2,))), 0)
        u = control_field_2d(st, ref, K)
        assert np.max(np.abs(u.values[..., 0] + (K * a / c) * np.sin(X1))) < 1e-12
        assert np.max(np.abs(u.values[..., 1])) < 1e-12

    def test_divergence_identity(self):
        # div(rho_L u) must reproduce -K e^L essentially exactly
        mesh = PeriodicMesh(2, 48)
        X1, X2 = mesh.coords()
        base = 0.3 / (2.0 * np.pi) ** 2
        rho_L = GridFunction(mesh, base * (1.0 + 0.4 * np.cos(X1) * np.sin(2 * X2)))
        rho_L = targets.scale_to_mass(
            targets.TargetDensity(GridFunction(mesh, rho_L.values / integral(rho_L)), 1.0), 0.3
        ).profile
        e = 0.1 * base * (np.cos(2 * X1) + np.sin(X2) * np.cos(X1))
        e -= e.mean()
        ref = GridFunction(mesh, rho_L.values + e)
        st = SimState(0.0, rho_L, rho_L, GridFunction(mesh, np.zeros(mesh.shape + (2,))), 0)
        K = 1.7
        u = control_field_2d(st, ref, K)
        W = rho_L.values[..., None] * u.values
        k0, k1 = mesh.wavenumbers(0), mesh.wavenumbers(1)
        div = (
            np.fft.ifftn(1j * k0 * np.fft.fftn(W[..., 0])).real
            + np.fft.ifftn(1j * k1 * np.fft.fftn(W[..., 1])).real
        )
        num = math.sqrt(np.sum((div + K * e) ** 2))
        den = K * math.sqrt(np.sum(e**2))
        assert num <= 1e-6 * den

    def test_vacuum_aborts(self):
        mesh = PeriodicMesh(2, 16)
        vals = np.full(mesh.shape, 0.01)
        vals[3, 4] = 0.0
        rho_L = GridFunction(mesh, vals)
        ref = uniform_field(mesh, integral(rho_L))
        st = SimState(0.0, rho_L, rho_L, GridFunction(mesh, np.zeros(mesh.shape + (2,))), 0)
        with pytest.raises(ValueError, match="vacuum"):
            control_field_2d(st, ref, 1.0)


class TestStep:
    def test_uniform_profiles_are_stationary(self):
        mesh = PeriodicMesh(1, 128)
        cfg = MacroRunConfig(
            mesh=mesh, dt=1e-3, T=1.0, K=1.0, D=0.05,
            fl_kernel=kernels.materialize(FL, mesh),
            ff_kernel=kernels.materialize(WEAK, mesh),
            target=uniform_target(mesh, 0.7), rho_L_ref=uniform_field(mesh, 0.3),
        )
        st = initial_state(cfg)
        for _ in range(100):
            st = step(st, cfg)
        assert np.max(np.abs(st.rho_F.values - 0.7 / (2 * np.pi))) < 1e-14
        assert np.max(np.abs(st.rho_L.values - 0.3 / (2 * np.pi))) < 1e-14

    def test_uniform_profiles_are_stationary_2d(self):
        mesh = PeriodicMesh(2, 24)
        cfg = MacroRunConfig(
            mesh=mesh, dt=1e-3, T=1.0, K=1.0, D=0.05,
            fl_kernel=kernels.materialize(FL, mesh),
            ff_kernel=kernels.materialize(WEAK, mesh),
            target=uniform_target(mesh, 0.7), rho_L_ref=uniform_field(mesh, 0.3),
        )
        st = initial_state(cfg)
        for _ in range(50):
            st = step(st, cfg)
        assert np.max(np.abs(st.rho_F.values - 0.7 / (2 * np.pi) ** 2)) < 1e-14
        assert np.max(np.abs(st.rho_L.values - 0.3 / (2 * np.pi) ** 2)) < 1e-14

    def test_matches_manual_update(self):
        # one step rebuilt from the public grid primitives
        mesh = PeriodicMesh(1, 128)
        cfg = weak_scenario_config(mesh, dt=1e-3)
        x = mesh.axis
        rho_F0 = GridFunction(mesh, cfg.target.profile.values * (1 + 0.1 * np.cos(x)))
        rho_F0 = GridFunction(mesh, rho_F0.values * cfg.target.mass / integral(rho_F0))
        st = SimState(0.0, cfg.rho_L_ref, rho_F0, GridFunction(mesh, np.zeros(mesh.n)), 0)
        nxt = step(st, cfg)

        v = circular_convolve(cfg.fl_kernel, st.rho_L) + circular_convolve(cfg.ff_kernel, st.rho_F)
        adv = derivative(GridFunction(mesh, st.rho_F.values * v.values))
        want_F = st.rho_F.values + cfg.dt * (
            cfg.D * laplacian(st.rho_F).values - adv.values
        )
        P = antiderivative(GridFunction(mesh, cfg.rho_L_ref.values - st.rho_L.values))
        want_L = st.rho_L.values + cfg.dt * cfg.K * derivative(P).values
        assert np.max(np.abs(nxt.rho_F.values - want_F)) < 1e-15
        assert np.max(np.abs(nxt.rho_L.values - want_L)) < 1e-15
        assert nxt.step_count == 1
        assert nxt.t == pytest.approx(cfg.dt)

    def test_mass_conserved_exactly(self):
        mesh = PeriodicMesh(1, 128)
        cfg = weak_scenario_config(mesh, dt=2e-3)
        rng = np.random.default_rng(2)
        bump = np.exp(0.3 * np.cos(mesh.axis + rng.uniform(-np.pi, np.pi)))
        rho_F0 = GridFunction(mesh, bump * cfg.target.mass / (bump.sum() * mesh.spacing))
        st = SimState(0.0, cfg.rho_L_ref, rho_F0, GridFunction(mesh, np.zeros(mesh.n)), 0)
        m_L0, m_F0 = integral(st.rho_L), integral(st.rho_F)
        for _ in range(1000):
            st = step(st, cfg)
        assert abs(integral(st.rho_L) - m_L0) <= 1e-12 * m_L0
        assert abs(integral(st.rho_F) - m_F0) <= 1e-12 * m_F0

    def test_instability_reports_step_and_advises(self):
        # dt far past the diffusive bound; leaders pinned at the reference
        # so only the follower field destabilizes
        mesh = PeriodicMesh(1, 128)
        base = weak_scenario_config(mesh, dt=1.0, T=50.0)
        k_high = mesh.n // 2 - 1
        vals = base.target.profile.values * (1.0 + 0.01 * np.cos(k_high * mesh.axis))
        vals *= base.target.mass / (vals.sum() * mesh.spacing)
        cfg = MacroRunConfig(
            mesh=mesh, dt=base.dt, T=base.T, K=base.K, D=base.D,
            fl_kernel=base.fl_kernel, ff_kernel=base.ff_kernel, target=base.target,
            rho_L_ref=base.rho_L_ref, rho_L0=base.rho_L_ref,
            rho_F0=GridFunction(mesh, vals),
        )
        st = initial_state(cfg)
        with pytest.raises(RuntimeError, match="reduce dt"):
            for _ in range(200):
                st = step(st, cfg)

    def test_negative_density_aborts(self):
        mesh = PeriodicMesh(1, 64)
        cfg = weak_scenario_config(mesh, dt=1e-9)
        vals = np.full(mesh.n, 0.75 / (2 * np.pi))
        vals[5] = -1e-4
        vals *= 0.75 / (vals.sum() * mesh.spacing)
        bad = SimState(0.0, cfg.rho_L_ref, GridFunction(mesh, vals),
                       GridFunction(mesh, np.zeros(mesh.n)), 0)
        with pytest.raises(RuntimeError, match="negativity"):
            step(bad, cfg)


class TestLeaderDynamics:
    def test_exact_exponential_relaxation(self):
        # rho_L(t) should track ref + (rho_L0 - ref) e^{-Kt} to within 1%
        mesh = PeriodicMesh(1, 500)
        ref = targets.scale_to_mass(targets.von_mises_1d(mesh, kappa=0.7), 0.25).profile
        rng = np.random.default_rng(8)
        pert = np.zeros(mesh.n)
        for k in range(1, 6):
            pert += rng.normal() * np.cos(k * mesh.axis) + rng.normal() * np.sin(k * mesh.axis)
        pert *= 0.02 / np.max(np.abs(pert))
        rho_L0 = GridFunction(mesh, ref.values + pert)
        assert np.min(rho_L0.values) > 0
        # D chosen so the follower field stays inside its diffusive bound
        # at this mesh/dt combination; the leader dynamics ignore D
        cfg = MacroRunConfig(
            mesh=mesh, dt=0.01, T=5.0, K=1.0, D=0.004,
            fl_kernel=kernels.materialize(FL, mesh), ff_kernel=None,
            target=uniform_target(mesh, 0.75), rho_L_ref=ref, rho_L0=rho_L0,
        )
        st = initial_state(cfg)
        e0 = GridFunction(mesh, rho_L0.values - ref.values)
        scale = l2_norm(e0)
        worst = 0.0
        for m in range(1, 501):
            st = step(st, cfg)
            exact = ref.values + e0.values * math.exp(-cfg.K * st.t)
            worst = max(worst, l2_norm(GridFunction(mesh, st.rho_L.values - exact)))
        assert worst <= 0.01 * scale

    def test_gain_doubling_halves_time_constant(self):
        mesh = PeriodicMesh(1, 250)
        rates = []
        for K in (1.0, 2.0):
            cfg = weak_scenario_config(mesh, dt=2e-3, T=3.0, stride=25)
            cfg = MacroRunConfig(
                mesh=mesh, dt=cfg.dt, T=cfg.T, K=K, D=cfg.D,
                fl_kernel=cfg.fl_kernel, ff_kernel=cfg.ff_kernel,
                target=cfg.target, rho_L_ref=cfg.rho_L_ref, output_stride=25,
            )
            res = run(cfg)
            slope = np.polyfit(res.t, np.log(res.err_L), 1)[0]
            rates.append(-slope)
        assert rates[1] / rates[0] == pytest.approx(2.0, rel=0.05)


class TestRun:
    def test_series_layout_and_masses(self):
        mesh = PeriodicMesh(1, 128)
        cfg = weak_scenario_config(mesh, dt=1e-3, T=0.5, stride=100)
        res = run(cfg)
        assert res.t[0] == 0.0
        assert res.t[-1] == pytest.approx(0.5, abs=1e-12)
        assert np.all(np.diff(res.t) > 0)
        for col in (res.err_L, res.err_F, res.kl_L, res.kl_F, res.mass_L, res.mass_F):
            assert col.shape == res.t.shape
        assert np.max(np.abs(res.mass_L - 0.25)) < 1e-12
        assert np.max(np.abs(res.mass_F - 0.75)) < 1e-12
        assert res.final_state.step_count == 500

    def test_leader_error_decays_at_gain_rate(self):
        mesh = PeriodicMesh(1, 250)
        cfg = weak_scenario_config(mesh, dt=2e-3, T=5.0, stride=50)
        res = run(cfg)
        band = np.abs(res.err_L / res.err_L[0] - np.exp(-res.t))
        assert np.max(band) <= 0.02

    def test_follower_error_decreases_from_uniform(self):
        mesh = PeriodicMesh(1, 250)
        cfg = weak_scenario_config(mesh, dt=2e-3, T=20.0, stride=500)
        res = run(cfg)
        assert res.err_F[-1] < res.err_F[0]
        assert np.isfinite(res.kl_F).all()
        assert res.kl_F[-1] < res.kl_F[0]

    def test_steady_start_stays_steady(self):
        mesh = PeriodicMesh(1, 500)
        cfg = weak_scenario_config(mesh, dt=3e-3, T=5.0, stride=200)
        cfg = MacroRunConfig(
            mesh=mesh, dt=cfg.dt, T=cfg.T, K=cfg.K, D=cfg.D,
            fl_kernel=cfg.fl_kernel, ff_kernel=cfg.ff_kernel, target=cfg.target,
            rho_L_ref=cfg.rho_L_ref, rho_L0=cfg.rho_L_ref,
            rho_F0=cfg.target.profile, output_stride=200,
        )
        res = run(cfg)
        assert np.max(res.err_F) <= 1e-3 * l2_norm(cfg.target.profile)

    def test_kl_leader_nan_when_reference_touches_zero(self):
        mesh = PeriodicMesh(1, 250)
        tgt = targets.scale_to_mass(targets.von_mises_1d(mesh, kappa=1.0), 0.85)
        ff = kernels.materialize(WEAK, mesh)
        rep = theorem1_report(tgt, ff, ELL, 0.02)
        syn = synthesize_leader_density_1d(rep, ELL, 0.02, 0.15, allow_infeasible=True)
        assert syn.fallback_used
        assert float(np.min(syn.rho_L.values)) == 0.0
        cfg = MacroRunConfig(
            mesh=mesh, dt=2e-3, T=0.1, K=1.0, D=0.02,
            fl_kernel=kernels.materialize(FL, mesh), ff_kernel=ff,
            target=tgt, rho_L_ref=syn.rho_L, rho_L0=syn.rho_L,
            rho_F0=tgt.profile, output_stride=10,
        )
        res = run(cfg)
        assert np.isnan(res.kl_L).all()
        assert np.isfinite(res.err_L).all()
        assert np.isfinite(res.kl_F).all()

    def test_cfl_advisories_logged(self, caplog):
        mesh = PeriodicMesh(1, 128)
        with caplog.at_level(logging.WARNING, logger="densctl.macro"):
            run(weak_scenario_config(mesh, dt=0.2, T=0.2, stride=1))
        assert any("diffusive stability" in r.message for r in caplog.records)
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="densctl.macro"):
            run(weak_scenario_config(mesh, dt=1e-3, T=0.01, stride=10))
        assert not caplog.records

    def test_two_dimensional_run_reduces_to_one_dimensional(self):
        n = 32
        m2, m1 = PeriodicMesh(2, n), PeriodicMesh(1, n)
        fl2 = kernels.materialize(FL, m2)
        ff2 = kernels.materialize(WEAK, m2)
        h = m1.spacing
        two_pi = 2.0 * np.pi

        def flatten_kernel(k2):
            return GridFunction(m1, k2.values[..., 0].sum(axis=1) * h / two_pi)

        def lift(values_1d):
            return np.tile((values_1d / two_pi)[:, None], (1, n))

        tgt1 = targets.scale_to_mass(targets.von_mises_1d(m1, kappa=1.0), 0.75)
        tgt2 = targets.TargetDensity(
            GridFunction(m2, lift(tgt1.normalized.values)), 0.75
        )
        refL1 = targets.scale_to_mass(targets.von_mises_1d(m1, kappa=0.5), 0.25).profile
        refL2 = GridFunction(m2, lift(refL1.values))
        pert = tgt1.profile.values * (1 + 0.2 * np.cos(2 * m1.axis))
        pert *= 0.75 / (pert.sum() * h)
        f01 = GridFunction(m1, pert)
        f02 = GridFunction(m2, lift(pert))
        shared = dict(dt=1e-3, T=0.5, K=1.0, D=0.02, output_stride=50)
        r1 = run(MacroRunConfig(mesh=m1, fl_kernel=flatten_kernel(fl2),
                                ff_kernel=flatten_kernel(ff2), target=tgt1,
                                rho_L_ref=refL1, rho_L0=refL1, rho_F0=f01, **shared))
        r2 = run(MacroRunConfig(mesh=m2, fl_kernel=fl2, ff_kernel=ff2, target=tgt2,
                                rho_L_ref=refL2, rho_L0=refL2, rho_F0=f02, **shared))
        scaled = r2.err_F * math.sqrt(two_pi)
        assert np.max(np.abs(scaled - r1.err_F)) < 1e-6


class TestSerialization:
    def test_series_csv_roundtrip(self, tmp_path):
        mesh = PeriodicMesh(1, 64)
        cfg = weak_scenario_config(mesh, dt=2e-3, T=0.1, stride=10)
        res = run(cfg)
        path = tmp_path / "series.csv"
        write_series_csv(res, path)
        header = path.read_text().splitlines()[0]
        assert header == "t,err_L,err_F,kl_L,kl_F,mass_L,mass_F"
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert data.shape == (res.t.size, 7)
        assert np.array_equal(data[:, 0], res.t)
        assert np.array_equal(data[:, 2], res.err_F)

    def test_snapshot_roundtrip(self, tmp_path):
        mesh = PeriodicMesh(1, 64)
        cfg = weak_scenario_config(mesh, dt=2e-3, T=0.05, stride=5)
        res = run(cfg)
        paths = write_snapshot(res.final_state, tmp_path)
        assert set(paths) == {"rho_L", "rho_F", "u"}
        back = GridFunction.from_csv(paths["rho_F"])
        assert back.mesh == mesh
        assert np.array_equal(back.values, res.final_state.rho_F.values)
        assert "step=" in open(paths["rho_F"]).read().splitlines()[1]


class TestInitialState:
    def test_defaults_are_uniform(self):
        mesh = PeriodicMesh(1, 64)
        cfg = weak_scenario_config(mesh)
        st = initial_state(cfg)
        assert np.max(np.abs(st.rho_F.values - 0.75 / (2 * np.pi))) < 1e-15
        assert np.max(np.abs(st.rho_L.values - 0.25 / (2 * np.pi))) < 1e-15
        assert integral(st.rho_L) == pytest.approx(0.25, rel=1e-12)
        assert st.t == 0.0 and st.step_count == 0

    def test_control_consistent_with_state(self):
        mesh = PeriodicMesh(1, 64)
        cfg = weak_scenario_config(mesh)
        st = initial_state(cfg)
        u = control_field_1d(st, cfg.rho_L_ref, cfg.K)
        assert np.max(np.abs(u.values - st.u.values)) < 1e-14
