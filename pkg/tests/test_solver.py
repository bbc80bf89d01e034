import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from citywind.advection import Advector
from citywind.grid import CellLabel, FlowState, GridSpec, PorosityField, classify_boundary
from citywind.linalg import build_ai_preconditioner, build_pressure_matrix
from citywind.solver import (
    InletProfile,
    SolverParams,
    apply_boundary_conditions,
    apply_drag,
    diffuse,
    divergence,
    make_initial_state,
    max_interior_divergence,
    project,
    region_average_speed,
    step,
    trace_streamlines,
)

CHANNEL_FACES = {
    "x_min": CellLabel.INLET, "x_max": CellLabel.OUTLET,
    "y_min": CellLabel.SOLID_WALL, "y_max": CellLabel.SOLID_WALL,
}


def channel(nx=24, ny=16, nz=1, h=1.0):
    grid = GridSpec(nx, ny, nz, h, h, h)
    faces = dict(CHANNEL_FACES)
    if nz > 1:
        faces["z_min"] = CellLabel.SOLID_WALL
        faces["z_max"] = CellLabel.SOLID_WALL
    labels = classify_boundary(grid, faces)
    return grid, labels


class TestDrag:
    def test_air_cells_unchanged(self):
        grid = GridSpec(8, 8, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.u[:] = 3.0
        apply_drag(state, SolverParams(), 0.1)
        np.testing.assert_allclose(state.u, 3.0)

    def test_opaque_cell_zeroes_velocity_in_one_step(self):
        grid = GridSpec(8, 8, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.labels[:] = int(CellLabel.BUILDING)
        state.porosity.phi[:] = 0.0
        state.u[:] = 5.0
        apply_drag(state, SolverParams(), 0.1)
        np.testing.assert_allclose(state.u, 0.0)

    def test_tree_cell_hand_computed_factor(self):
        # LAD = 1, C_d = 0.2, |u| = 2, dt = 0.1: factor 0.96
        grid = GridSpec(4, 4, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.labels[:] = int(CellLabel.TREE)
        state.porosity.lad[:] = 1.0
        state.u[:] = 2.0
        apply_drag(state, SolverParams(cd_tree=0.2), 0.1)
        np.testing.assert_allclose(state.u, 1.92, rtol=1e-12)

    @given(speed=st.floats(0.0, 50.0), dt=st.floats(0.001, 10.0),
           phi=st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_drag_never_increases_magnitude(self, speed, dt, phi):
        grid = GridSpec(4, 4, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.labels[:] = int(CellLabel.BUILDING)
        state.porosity.phi[:] = phi
        state.u[:] = speed
        apply_drag(state, SolverParams(), dt)
        assert np.all(state.u <= speed + 1e-12)
        assert np.all(state.u >= 0.0)


class TestDiffuse:
    def test_identity_with_zero_viscosity(self):
        grid = GridSpec(16, 16, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.nu_t[:] = 0.0
        rng = np.random.default_rng(0)
        state.u = rng.standard_normal(state.u.shape)
        before = state.u.copy()
        diffuse(state, SolverParams(nu=0.0), 0.1)
        np.testing.assert_allclose(state.u, before)

    def test_sinusoid_decay_matches_heat_equation(self):
        # u(x) = sin(2 pi x / L): du/dt = nu u_xx -> decay exp(-nu (2pi/L)^2 t)
        n = 64
        L = 1.0
        grid = GridSpec(n, 4, 1, L / n, L / n, L / n)
        state = FlowState.zeros(grid)
        x = np.arange(n + 1) * (L / n)
        state.u = np.sin(2 * np.pi * x / L)[:, None, None] * np.ones((n + 1, 4, 1))
        nu = 1e-3
        dt = 1e-3
        params = SolverParams(nu=nu, dt=dt)
        for _ in range(100):
            # periodic wrap by hand: copy edge columns to mimic an infinite wave
            state.u[0] = state.u[-2] if False else state.u[0]
            diffuse(state, params, dt)
        t = 100 * dt
        expected = np.exp(-nu * (2 * np.pi / L) ** 2 * t)
        mid = state.u[:, 2, 0]
        # compare the decay of the amplitude away from the x edges
        amp = np.max(np.abs(mid[8:-8] / np.sin(2 * np.pi * x[8:-8] / L)))
        assert amp == pytest.approx(expected, rel=0.02)


class TestProjection:
    def setup_system(self, nx=32, ny=32):
        grid, labels = channel(nx, ny)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        return grid, labels, psys, pre

    def test_divergence_free_input_unchanged(self):
        grid, labels, psys, pre = self.setup_system()
        state = FlowState.zeros(grid, labels)
        state.u[:] = 2.0  # uniform: divergence-free
        u0 = state.u.copy()
        _, rep = project(state, psys, 0.1, pre)
        assert rep.iterations == 0 or np.allclose(state.p, 0, atol=1e-8)
        np.testing.assert_allclose(state.u, u0, atol=1e-8)

    def test_random_field_divergence_drops_4_orders(self):
        grid, labels, psys, pre = self.setup_system()
        state = FlowState.zeros(grid, labels)
        rng = np.random.default_rng(7)
        state.u = rng.standard_normal(state.u.shape)
        state.v = rng.standard_normal(state.v.shape)
        apply_boundary_conditions(state, InletProfile(speed=1.0), SolverParams())
        before = max_interior_divergence(state)
        project(state, psys, 0.1, pre)
        after = max_interior_divergence(state)
        assert after <= 1e-4 * before

    def test_random_field_32cubed_3d(self):
        grid, labels = channel(32, 32, 16)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        state = FlowState.zeros(grid, labels)
        rng = np.random.default_rng(8)
        state.u = rng.standard_normal(state.u.shape)
        state.v = rng.standard_normal(state.v.shape)
        state.w = rng.standard_normal(state.w.shape)
        apply_boundary_conditions(state, InletProfile(speed=1.0), SolverParams())
        before = max_interior_divergence(state)
        project(state, psys, 0.1, pre)
        assert max_interior_divergence(state) <= 1e-4 * before

    def test_global_mass_balance(self):
        # inflow through one inlet column must exit through the outlet
        grid, labels = channel(24, 12)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        params = SolverParams(dt=0.1)
        prof = InletProfile(speed=2.0)
        state = make_initial_state(grid, labels, None, params, prof, mode="rest")
        apply_boundary_conditions(state, prof, params)
        project(state, psys, params.dt, pre)
        influx = float(np.sum(state.u[1, 1:-1, :])) * grid.dy * grid.dz
        outflux = float(np.sum(state.u[-2, 1:-1, :])) * grid.dy * grid.dz
        assert outflux == pytest.approx(influx, rel=1e-6)


class TestBoundaries:
    def test_log_profile_value(self):
        prof = InletProfile(kind="logarithmic", u_star=0.53, z0=0.5)
        got = prof.speed_at(np.array([5.0]))[0]
        assert got == pytest.approx(0.53 / 0.41 * np.log(10.0), rel=1e-12)
        assert got == pytest.approx(2.976, abs=2e-3)

    def test_below_roughness_is_zero(self):
        prof = InletProfile(kind="logarithmic", u_star=0.53, z0=0.5)
        assert prof.speed_at(np.array([0.2]))[0] == 0.0

    def test_uniform_inlet_faces(self):
        grid, labels = channel(12, 8)
        state = FlowState.zeros(grid, labels)
        apply_boundary_conditions(state, InletProfile(speed=2.0), SolverParams())
        np.testing.assert_allclose(state.u[0, :, :], 2.0)
        # rows shared with the wall layers take no-slip instead
        np.testing.assert_allclose(state.u[1, 1:-1, :], 2.0)

    def test_outlet_copies_interior(self):
        grid, labels = channel(12, 8)
        state = FlowState.zeros(grid, labels)
        rng = np.random.default_rng(2)
        state.u = rng.standard_normal(state.u.shape)
        apply_boundary_conditions(state, InletProfile(speed=1.0), SolverParams())
        np.testing.assert_allclose(state.u[-1, :, :], state.u[-2, :, :])

    def test_walls_zeroed(self):
        grid, labels = channel(12, 8)
        state = FlowState.zeros(grid, labels)
        state.v[:] = 1.0
        apply_boundary_conditions(state, InletProfile(speed=1.0), SolverParams())
        # faces touching the wall rows are zero
        np.testing.assert_allclose(state.v[:, 0, :], 0.0)
        np.testing.assert_allclose(state.v[:, 1, :], 0.0)
        np.testing.assert_allclose(state.v[:, -1, :], 0.0)

    def test_interior_wall_cells_zeroed(self):
        grid, labels = channel(12, 8)
        labels[6, 4, 0] = int(CellLabel.SOLID_WALL)
        state = FlowState.zeros(grid, labels)
        state.u[:] = 1.0
        state.v[:] = 1.0
        apply_boundary_conditions(state, InletProfile(speed=1.0), SolverParams())
        assert state.u[6, 4, 0] == 0.0
        assert state.u[7, 4, 0] == 0.0
        assert state.v[6, 4, 0] == 0.0
        assert state.v[6, 5, 0] == 0.0

    def test_rotated_profile(self):
        prof = InletProfile(speed=1.0, direction=(1, 0)).rotated(90.0)
        assert prof.direction[0] == pytest.approx(0.0, abs=1e-12)
        assert prof.direction[1] == pytest.approx(1.0)


class TestStep:
    def test_dt_zero_is_identity(self):
        grid, labels = channel()
        psys = build_pressure_matrix(grid, labels)
        params = SolverParams(dt=0.0)
        prof = InletProfile(speed=1.5)
        state = make_initial_state(grid, labels, None, params, prof)
        before = state.copy()
        step(state, params, psys, None, prof)
        np.testing.assert_array_equal(state.u, before.u)
        np.testing.assert_array_equal(state.k, before.k)

    def test_empty_domain_reaches_uniform_inflow(self):
        # unobstructed flow-through domain: the steady solution is the
        # uniform inflow itself
        grid = GridSpec(24, 16, 1, 1, 1, 1)
        labels = classify_boundary(grid, {
            "x_min": CellLabel.INLET, "x_max": CellLabel.OUTLET,
            "y_min": CellLabel.OUTLET, "y_max": CellLabel.OUTLET,
        })
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        params = SolverParams(dt=0.1, u_ref=2.0)
        prof = InletProfile(speed=2.0)
        state = make_initial_state(grid, labels, None, params, prof, mode="rest")
        adv = Advector(grid)
        for _ in range(500):
            step(state, params, psys, pre, prof, adv)
        interior = state.u[2:-2, 2:-2, :]
        np.testing.assert_allclose(interior, 2.0, atol=1e-3)

    def test_walled_channel_core_near_inflow(self):
        # with no-slip side walls a thin boundary layer forms; the core
        # speeds up slightly to conserve mass but stays within half a percent
        grid, labels = channel(24, 16)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        params = SolverParams(dt=0.1, u_ref=2.0)
        prof = InletProfile(speed=2.0)
        state = make_initial_state(grid, labels, None, params, prof, mode="rest")
        adv = Advector(grid)
        for _ in range(500):
            step(state, params, psys, pre, prof, adv)
        core = state.u[2:-2, 4:-4, :]
        np.testing.assert_allclose(core, 2.0, atol=1e-2)

    def test_divergence_reduced_every_step(self):
        grid, labels = channel(24, 16)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        params = SolverParams(dt=0.1, u_ref=2.0)
        prof = InletProfile(speed=2.0)
        state = make_initial_state(grid, labels, None, params, prof, mode="rest")
        for _ in range(20):
            rep = step(state, params, psys, pre, prof)
            if rep.div_before > 1e-12:
                assert rep.div_after <= 1e-4 * rep.div_before

    def test_determinism(self):
        def run():
            grid, labels = channel(16, 12)
            psys = build_pressure_matrix(grid, labels)
            pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
            params = SolverParams(dt=0.1, u_ref=1.0)
            prof = InletProfile(speed=1.0)
            state = make_initial_state(grid, labels, None, params, prof)
            for _ in range(30):
                step(state, params, psys, pre, prof)
            return state

        a, b = run(), run()
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.k, b.k)
        np.testing.assert_array_equal(a.p, b.p)

    def test_invariants_after_steps(self):
        grid, labels = channel(16, 12)
        psys = build_pressure_matrix(grid, labels)
        pre = build_ai_preconditioner(psys.A, 1.65, 1, truncate=False)
        params = SolverParams(dt=0.1, u_ref=1.0)
        prof = InletProfile(speed=1.0)
        state = make_initial_state(grid, labels, None, params, prof)
        for _ in range(50):
            step(state, params, psys, pre, prof)
        state.validate()  # k >= 0, omega > 0, nu_t >= 0, shapes


class TestStreamlines:
    def test_uniform_field_goes_straight(self):
        grid = GridSpec(20, 10, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.u[:] = 1.0
        lines = trace_streamlines(state, [[1.0, 5.0, 0.5]], step_len=0.5, max_steps=100)
        line = lines[0]
        assert len(line) > 10
        np.testing.assert_allclose(line[:, 1], 5.0, atol=1e-9)
        assert line[-1, 0] > 15.0

    def test_solid_body_rotation_closes(self):
        n = 64
        grid = GridSpec(n, n, 1, 1.0 / n, 1.0 / n, 1.0 / n)
        state = FlowState.zeros(grid)
        om = 2 * np.pi
        yu = (np.arange(n) + 0.5) / n
        state.u = (-om * (yu - 0.5))[None, :, None] * np.ones((n + 1, n, 1))
        xv = (np.arange(n) + 0.5) / n
        state.v = (om * (xv - 0.5))[:, None, None] * np.ones((n, n + 1, 1))
        r = 0.25
        seed = [0.5 + r, 0.5, 0.5 / n]
        circumference = 2 * np.pi * r
        steps = 400
        lines = trace_streamlines(state, [seed], step_len=circumference / steps,
                                  max_steps=steps)
        line = lines[0]
        radii = np.sqrt((line[:, 0] - 0.5) ** 2 + (line[:, 1] - 0.5) ** 2)
        assert np.max(np.abs(radii - r)) < 0.02 * r + 0.02

    def test_seed_outside_domain_empty(self):
        grid = GridSpec(8, 8, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        lines = trace_streamlines(state, [[100.0, 0.0, 0.0]], step_len=0.1)
        assert lines[0].shape == (0, 3)

    def test_zero_velocity_single_point(self):
        grid = GridSpec(8, 8, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        lines = trace_streamlines(state, [[4.0, 4.0, 0.5]], step_len=0.1)
        assert len(lines[0]) == 1


class TestRegionAverage:
    def test_uniform_speed(self):
        grid = GridSpec(10, 10, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.u[:] = 3.0
        got = region_average_speed(state, (2, 2, 0), (8, 8, 1))
        assert got == pytest.approx(3.0)

    def test_mixed_speeds_average(self):
        grid = GridSpec(2, 1, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.u[0] = 2.0
        state.u[1] = 2.0  # cell 0 center speed 2
        state.u[2] = 6.0  # cell 1 center speed (2+6)/2 = 4
        got = region_average_speed(state, (0, 0, 0), (2, 1, 1))
        assert got == pytest.approx(3.0)

    def test_matches_bruteforce_loop(self):
        grid = GridSpec(9, 7, 3, 0.5, 0.5, 0.5)
        state = FlowState.zeros(grid)
        rng = np.random.default_rng(10)
        state.u = rng.standard_normal(state.u.shape)
        state.v = rng.standard_normal(state.v.shape)
        state.w = rng.standard_normal(state.w.shape)
        state.labels[0, :, :] = int(CellLabel.SOLID_WALL)
        lo, hi = (0.6, 0.4, 0.0), (3.4, 2.9, 1.5)
        got = region_average_speed(state, lo, hi)
        speeds = []
        for i in range(9):
            for j in range(7):
                for k in range(3):
                    c = ((i + 0.5) * 0.5, (j + 0.5) * 0.5, (k + 0.5) * 0.5)
                    if not all(lo[a] <= c[a] <= hi[a] for a in range(3)):
                        continue
                    if state.labels[i, j, k] != int(CellLabel.AIR):
                        continue
                    uu = 0.5 * (state.u[i, j, k] + state.u[i + 1, j, k])
                    vv = 0.5 * (state.v[i, j, k] + state.v[i, j + 1, k])
                    ww = 0.5 * (state.w[i, j, k] + state.w[i, j, k + 1])
                    speeds.append(np.sqrt(uu ** 2 + vv ** 2 + ww ** 2))
        assert got == pytest.approx(np.mean(speeds), rel=1e-12)

    def test_no_air_cells_raises(self):
        grid = GridSpec(4, 4, 1, 1, 1, 1)
        state = FlowState.zeros(grid)
        state.labels[:] = int(CellLabel.BUILDING)
        with pytest.raises(ValueError):
            region_average_speed(state, (0, 0, 0), (4, 4, 1))
