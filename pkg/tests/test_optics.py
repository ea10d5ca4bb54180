"""Wave-optics forward model tests: incident field geometry, surrogate
interpolation contract, propagation invariants, PSF stacks, and the
hand-derived gradient chain against finite differences."""

import numpy as np
import pytest
from numpy.polynomial import chebyshev as cheb

from csoptics.errors import ConfigurationError, ValidationError
from csoptics.optics import (MetasurfaceGeometry, OpticalGrid, PsfStack,
                             SurrogateModel, chebyshev_nodes,
                             compute_psf_stack, eval_surrogate, fit_surrogate,
                             incident_field, inverse_spaced_depths,
                             load_surrogate_csv, make_synthetic_surrogate,
                             propagate, psf_vjp, synthetic_ramp)

LAM = 550e-9
PITCH = LAM / 2  # half-wavelength sampling keeps the angular spectrum alias-free
W_MIN, W_MAX = 60e-9, 410e-9


def small_grid(n=8, depths=(8e-6, 12e-6), sensor=5e-6):
    return OpticalGrid(n=n, pitch=PITCH, wavelength=LAM,
                       sensor_distance=sensor, depths=depths)


class TestGridAndIncident:
    def test_grid_validation(self):
        with pytest.raises(ConfigurationError):
            OpticalGrid(n=7, pitch=PITCH, wavelength=LAM, sensor_distance=1e-3, depths=(1e-3,))
        with pytest.raises(ConfigurationError):
            OpticalGrid(n=8, pitch=0.0, wavelength=LAM, sensor_distance=1e-3, depths=(1e-3,))
        with pytest.raises(ConfigurationError):
            OpticalGrid(n=8, pitch=PITCH, wavelength=LAM, sensor_distance=1e-3, depths=())
        with pytest.raises(ConfigurationError):
            OpticalGrid(n=8, pitch=PITCH, wavelength=LAM, sensor_distance=1e-3, depths=(0.0,))

    def test_depth_must_be_positive(self):
        with pytest.raises(ValidationError):
            incident_field(small_grid(), 0.0)

    def test_unit_amplitude_and_self_relative_phase(self):
        grid = small_grid()
        fld = incident_field(grid, 10e-6)
        np.testing.assert_allclose(np.abs(fld), 1.0, atol=1e-14)
        center = fld[grid.n // 2, grid.n // 2]
        assert np.abs(center / center - 1.0) == 0.0

    def test_corner_center_phase_difference(self):
        grid = small_grid(n=16)
        z = 20e-6
        fld = incident_field(grid, z)
        c = grid.coordinates()
        k = 2 * np.pi / LAM
        r2_corner = c[0] ** 2 + c[0] ** 2
        r2_center = 2 * c[grid.n // 2] ** 2
        expected = np.exp(1j * k * (r2_corner - r2_center) / (2 * z))
        got = fld[0, 0] * np.conj(fld[grid.n // 2, grid.n // 2])
        assert abs(got - expected) <= 1e-12

    def test_rotation_invariance(self):
        fld = incident_field(small_grid(n=12), 9e-6)
        np.testing.assert_allclose(fld, np.rot90(fld), atol=1e-13)


class TestSurrogateFit:
    def test_constant_table(self):
        degree = 6
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        model = fit_surrogate([(w, 0.9 + 0j) for w in nodes], degree, W_MIN, W_MAX)
        c = model.coefficients[0]
        assert abs(c[0] - 0.9) <= 1e-12
        assert np.abs(c[1:]).max() <= 1e-12
        t, dt = eval_surrogate(model, np.linspace(W_MIN, W_MAX, 31), 0)
        np.testing.assert_allclose(t, 0.9, atol=1e-12)
        np.testing.assert_allclose(dt, 0.0, atol=1e-6)

    def test_half_turn_ramp_dense_scan(self):
        degree = 16
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        ramp = lambda w: 0.98 * np.exp(1j * np.pi * (w - W_MIN) / (W_MAX - W_MIN))
        model = fit_surrogate(list(zip(nodes, ramp(nodes))), degree, W_MIN, W_MAX)
        scan = np.linspace(W_MIN, W_MAX, 1001)
        t, _ = eval_surrogate(model, scan, 0)
        assert np.abs(t - ramp(scan)).max() <= 1e-8

    def test_node_reproduction_random_samples(self):
        rng = np.random.default_rng(4)
        degree = 10
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        vals = 0.3 * (rng.normal(size=degree + 1) + 1j * rng.normal(size=degree + 1))
        model = fit_surrogate(list(zip(nodes, vals)), degree, W_MIN, W_MAX)
        t, _ = eval_surrogate(model, nodes, 0)
        assert np.abs(t - vals).max() <= 1e-10

    def test_off_node_samples_rejected(self):
        degree = 4
        wrong = np.linspace(W_MIN, W_MAX, degree + 1)
        with pytest.raises(ConfigurationError):
            fit_surrogate([(w, 0.5 + 0j) for w in wrong], degree, W_MIN, W_MAX)

    def test_wrong_sample_count_rejected(self):
        nodes = chebyshev_nodes(W_MIN, W_MAX, 5)
        with pytest.raises(ConfigurationError):
            fit_surrogate([(w, 0.5 + 0j) for w in nodes], 6, W_MIN, W_MAX)

    def test_nonpassive_table_rejected(self):
        nodes = chebyshev_nodes(W_MIN, W_MAX, 7)
        with pytest.raises(ConfigurationError):
            fit_surrogate([(w, 1.1 + 0j) for w in nodes], 6, W_MIN, W_MAX)


class TestSurrogateEval:
    def test_first_order_chebyshev_derivative(self):
        # t(w) = c1 T1(s(w)), so dt/dw = c1 * 2/(w_max - w_min)
        model = SurrogateModel(np.array([[0.0, 0.5]], dtype=complex), W_MIN, W_MAX)
        _, dt = eval_surrogate(model, np.linspace(W_MIN, W_MAX, 9), 0)
        np.testing.assert_allclose(dt, 0.5 * 2.0 / (W_MAX - W_MIN), rtol=1e-12)

    def test_derivative_matches_finite_difference(self):
        model = make_synthetic_surrogate(W_MIN, W_MAX, degree=24)
        w = np.linspace(W_MIN + 5e-9, W_MAX - 5e-9, 17)
        _, dt = eval_surrogate(model, w, 0)
        h = 1e-12
        tp, _ = eval_surrogate(model, w + h, 0)
        tm, _ = eval_surrogate(model, w - h, 0)
        fd = (tp - tm) / (2 * h)
        rel = np.abs(fd - dt) / np.abs(dt)
        assert rel.max() <= 1e-6

    def test_clamp_counts_out_of_domain(self):
        model = make_synthetic_surrogate(W_MIN, W_MAX)
        assert model.clamp_count == 0
        t_out, _ = eval_surrogate(model, W_MIN - 1e-9, 0)
        t_edge, _ = eval_surrogate(model, W_MIN, 0)
        assert model.clamp_count == 1
        assert t_out == t_edge

    def test_bad_state_rejected(self):
        model = make_synthetic_surrogate(W_MIN, W_MAX, n_states=2)
        with pytest.raises(ConfigurationError):
            eval_surrogate(model, W_MIN, 2)


class TestGeometry:
    def test_latent_widths_stay_inside_bounds(self):
        theta = np.array([[-20.0, 0.0], [20.0, 3.0]])
        geom = MetasurfaceGeometry(theta, W_MIN, W_MAX)
        p = geom.widths
        assert np.all(p > W_MIN) and np.all(p < W_MAX)

    def test_from_widths_roundtrip(self):
        rng = np.random.default_rng(1)
        p = W_MIN + (W_MAX - W_MIN) * rng.uniform(0.05, 0.95, size=(6, 6))
        geom = MetasurfaceGeometry.from_widths(p, W_MIN, W_MAX)
        np.testing.assert_allclose(geom.widths, p, rtol=1e-12)

    def test_boundary_widths_rejected(self):
        with pytest.raises(ValidationError):
            MetasurfaceGeometry.from_widths(np.full((2, 2), W_MIN), W_MIN, W_MAX)

    def test_uniform_constructor(self):
        geom = MetasurfaceGeometry.uniform(4, 200e-9, W_MIN, W_MAX)
        np.testing.assert_allclose(geom.widths, 200e-9, rtol=1e-12)


class TestPropagate:
    def test_energy_conserved_on_band(self):
        grid = small_grid(n=32)
        rng = np.random.default_rng(7)
        fld = rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32))
        # strip the evanescent corners first; on the band the transfer is unitary
        f = np.fft.fftfreq(32, d=PITCH)
        band = (1.0 / LAM ** 2 - (f[:, None] ** 2 + f[None, :] ** 2)) > 0
        fld_bl = np.fft.ifft2(np.fft.fft2(fld) * band)
        out = propagate(fld_bl, 30e-6, grid)
        assert abs(np.linalg.norm(out) - np.linalg.norm(fld_bl)) <= 1e-10 * np.linalg.norm(fld_bl)

    def test_semigroup_composition(self):
        grid = small_grid(n=16)
        rng = np.random.default_rng(3)
        fld = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        two_step = propagate(propagate(fld, 7e-6, grid), 11e-6, grid)
        one_step = propagate(fld, 18e-6, grid)
        assert np.abs(two_step - one_step).max() <= 1e-8 * np.abs(one_step).max()

    def test_lens_phase_focuses(self):
        n, f = 64, 20e-6
        grid = OpticalGrid(n=n, pitch=PITCH, wavelength=LAM,
                           sensor_distance=f, depths=(f,))
        c = grid.coordinates()
        r2 = c[:, None] ** 2 + c[None, :] ** 2
        k = 2 * np.pi / LAM
        out = propagate(np.exp(-1j * k * r2 / (2 * f)), f, grid)
        intensity = np.abs(out) ** 2
        peak_idx = np.unravel_index(intensity.argmax(), intensity.shape)
        center = {n // 2 - 1, n // 2}
        assert peak_idx[0] in center and peak_idx[1] in center
        assert intensity.max() >= 100.0 * intensity.mean()

    def test_coarse_sampling_warns(self):
        grid = OpticalGrid(n=8, pitch=LAM, wavelength=LAM,
                           sensor_distance=1e-5, depths=(1e-5,))
        with pytest.warns(UserWarning, match="coarser"):
            propagate(np.ones((8, 8), dtype=complex), 1e-5, grid)

    def test_input_validation(self):
        grid = small_grid()
        with pytest.raises(ValidationError):
            propagate(np.ones((4, 4), dtype=complex), 1e-5, grid)
        with pytest.raises(ValidationError):
            propagate(np.ones((8, 8), dtype=complex), 0.0, grid)


def lens_geometry(grid, focal):
    """Widths realizing the mod-2pi lens phase through the one-turn ramp."""
    c = grid.coordinates()
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    k = 2 * np.pi / grid.wavelength
    frac = (-k * r2 / (2 * focal) / (2 * np.pi)) % 1.0
    frac = np.clip(frac, 1e-6, 1 - 1e-6)
    return MetasurfaceGeometry.from_widths(W_MIN + (W_MAX - W_MIN) * frac, W_MIN, W_MAX)


class TestPsfStack:
    def test_unit_transmission_matches_free_space(self):
        grid = small_grid(n=16, depths=(15e-6,), sensor=10e-6)
        degree = 6
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        model = fit_surrogate([(w, 1.0 + 0j) for w in nodes], degree, W_MIN, W_MAX)
        geom = MetasurfaceGeometry.uniform(16, 200e-9, W_MIN, W_MAX)
        stack = compute_psf_stack(geom, model, grid)
        direct = np.abs(propagate(incident_field(grid, 15e-6), 10e-6, grid)) ** 2
        direct /= direct.sum()
        np.testing.assert_allclose(stack.data[0, 0], direct, atol=1e-12)

    def test_reference_psf_sums_to_one(self):
        grid = small_grid(n=16, depths=(15e-6, 25e-6))
        model = make_synthetic_surrogate(W_MIN, W_MAX, n_states=2)
        rng = np.random.default_rng(5)
        geom = MetasurfaceGeometry(rng.normal(size=(16, 16)), W_MIN, W_MAX)
        stack = compute_psf_stack(geom, model, grid)
        assert abs(stack.data[0, 0].sum() - 1.0) <= 1e-12
        assert stack.data.shape == (2, 2, 16, 16)
        assert np.all(stack.data >= 0.0)
        assert np.all(np.isfinite(stack.data))

    def test_identical_state_tables_give_identical_psfs(self):
        grid = small_grid(n=12, depths=(15e-6, 25e-6))
        one = make_synthetic_surrogate(W_MIN, W_MAX, n_states=1, degree=20)
        twin = SurrogateModel(np.vstack([one.coefficients, one.coefficients]),
                              W_MIN, W_MAX)
        rng = np.random.default_rng(6)
        geom = MetasurfaceGeometry(rng.normal(size=(12, 12)), W_MIN, W_MAX)
        stack = compute_psf_stack(geom, twin, grid)
        np.testing.assert_array_equal(stack.data[:, 0], stack.data[:, 1])

    def test_lens_surrogate_focuses_at_focal_depth(self):
        v, zstar = 40e-6, 60e-6
        focal = 1.0 / (1.0 / zstar + 1.0 / v)
        grid = OpticalGrid(n=64, pitch=PITCH, wavelength=LAM,
                           sensor_distance=v, depths=(zstar,))
        stack = compute_psf_stack(lens_geometry(grid, focal),
                                  make_synthetic_surrogate(W_MIN, W_MAX), grid)
        psf = stack.data[0, 0]
        assert psf.max() >= 100.0 * psf.mean()

    def test_depth_ordering_around_focus(self):
        v, zstar = 40e-6, 60e-6
        focal = 1.0 / (1.0 / zstar + 1.0 / v)
        inv = 1.0 / zstar + np.array([-8000.0, -4000.0, 0.0, 4000.0, 8000.0])
        depths = tuple(sorted(1.0 / inv))
        grid = OpticalGrid(n=64, pitch=PITCH, wavelength=LAM,
                           sensor_distance=v, depths=depths)
        stack = compute_psf_stack(lens_geometry(grid, focal),
                                  make_synthetic_surrogate(W_MIN, W_MAX), grid)
        peaks = stack.data.max(axis=(2, 3))[:, 0]
        nearest = int(np.abs(np.array(depths) - zstar).argmin())
        top = int(peaks.argmax())
        assert top == nearest
        assert np.all(np.diff(peaks[:top + 1]) > 0)
        assert np.all(np.diff(peaks[top:]) < 0)

    def test_geometry_grid_mismatch(self):
        grid = small_grid(n=8)
        geom = MetasurfaceGeometry.uniform(6, 200e-9, W_MIN, W_MAX)
        with pytest.raises(ConfigurationError):
            compute_psf_stack(geom, make_synthetic_surrogate(W_MIN, W_MAX), grid)


class TestPsfVjp:
    def setup_case(self, n_states=2, seed=0):
        grid = small_grid(n=8, depths=(8e-6, 12e-6))
        model = make_synthetic_surrogate(W_MIN, W_MAX, n_states=n_states, degree=24)
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=(8, 8))
        geom = MetasurfaceGeometry(theta, W_MIN, W_MAX)
        cot = rng.normal(size=(2, n_states, 8, 8))
        return grid, model, geom, cot, rng

    def test_zero_cotangent(self):
        grid, model, geom, cot, _ = self.setup_case()
        g = psf_vjp(geom, model, grid, np.zeros_like(cot))
        assert np.all(g == 0.0)

    def test_matches_finite_differences(self):
        grid, model, geom, cot, rng = self.setup_case()
        g = psf_vjp(geom, model, grid, cot)

        def loss(theta):
            stack = compute_psf_stack(MetasurfaceGeometry(theta, W_MIN, W_MAX),
                                      model, grid)
            return float((cot * stack.data).sum())

        for _ in range(5):
            d = rng.normal(size=geom.theta.shape)
            d /= np.linalg.norm(d)
            h = 1e-5
            fd = (loss(geom.theta + h * d) - loss(geom.theta - h * d)) / (2 * h)
            an = float((g * d).sum())
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an))

    def test_single_coordinate_finite_difference(self):
        grid, model, geom, cot, _ = self.setup_case(seed=3)
        g = psf_vjp(geom, model, grid, cot)
        h = 1e-5
        for idx in [(0, 0), (3, 5), (7, 7)]:
            tp = geom.theta.copy()
            tp[idx] += h
            tm = geom.theta.copy()
            tm[idx] -= h
            sp = compute_psf_stack(MetasurfaceGeometry(tp, W_MIN, W_MAX), model, grid)
            sm = compute_psf_stack(MetasurfaceGeometry(tm, W_MIN, W_MAX), model, grid)
            fd = float((cot * (sp.data - sm.data)).sum()) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * max(abs(fd), abs(g[idx]), 1e-12)

    def test_state_isolation_with_identical_tables(self):
        grid = small_grid(n=8, depths=(9e-6,))
        one = make_synthetic_surrogate(W_MIN, W_MAX, n_states=1, degree=20)
        twin_coeffs = np.vstack([one.coefficients, one.coefficients])
        twin = SurrogateModel(twin_coeffs.copy(), W_MIN, W_MAX)
        rng = np.random.default_rng(11)
        geom = MetasurfaceGeometry(rng.normal(size=(8, 8)), W_MIN, W_MAX)
        cot = np.zeros((1, 2, 8, 8))
        cot[0, 0] = rng.normal(size=(8, 8))  # state 0 only
        base = psf_vjp(geom, twin, grid, cot)

        bump = np.zeros_like(twin_coeffs)
        bump[1, 3] = 1e-3  # perturb the unused state's table
        other = SurrogateModel(twin_coeffs + bump, W_MIN, W_MAX)
        np.testing.assert_allclose(psf_vjp(geom, other, grid, cot), base, atol=1e-12)

        bump = np.zeros_like(twin_coeffs)
        bump[0, 3] = 1e-3  # perturb the observed state's table
        used = SurrogateModel(twin_coeffs + bump, W_MIN, W_MAX)
        assert np.abs(psf_vjp(geom, used, grid, cot) - base).max() > 1e-10

    def test_both_states_couple_to_shared_geometry(self):
        grid, model, geom, _, rng = self.setup_case(seed=9)
        for state in range(2):
            cot = np.zeros((2, 2, 8, 8))
            cot[:, state] = rng.normal(size=(2, 8, 8))
            g = psf_vjp(geom, model, grid, cot)
            assert np.abs(g).max() > 0.0

    def test_shape_mismatch_rejected(self):
        grid, model, geom, cot, _ = self.setup_case()
        with pytest.raises(ValidationError):
            psf_vjp(geom, model, grid, cot[:, :1])


class TestDepthsAndCsv:
    def test_inverse_spacing_matches_endpoints(self):
        depths = inverse_spaced_depths(1.65e-3, 6.6e-3, 64)
        assert len(depths) == 64
        assert abs(depths[0] - 1.65e-3) <= 1e-15
        assert abs(depths[-1] - 6.6e-3) <= 1e-15
        inv = 1.0 / np.array(depths)
        np.testing.assert_allclose(np.diff(inv), np.diff(inv)[0], rtol=1e-10)

    def test_single_depth_and_validation(self):
        assert inverse_spaced_depths(1e-3, 2e-3, 1) == (1e-3,)
        with pytest.raises(ConfigurationError):
            inverse_spaced_depths(2e-3, 1e-3, 4)
        with pytest.raises(ConfigurationError):
            inverse_spaced_depths(1e-3, 2e-3, 0)

    def test_csv_roundtrip(self, tmp_path):
        degree = 20
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        path = tmp_path / "table.csv"
        lines = ["width_m,re_t,im_t,state_id"]
        for state in range(2):
            t = synthetic_ramp(nodes, W_MIN, W_MAX, state)
            for w, tv in zip(nodes, t):
                lines.append(f"{float(w)!r},{float(tv.real)!r},{float(tv.imag)!r},{state}")
        path.write_text("\n".join(lines) + "\n")
        model = load_surrogate_csv(path, degree, W_MIN, W_MAX)
        assert model.n_states == 2
        scan = np.linspace(W_MIN, W_MAX, 101)
        for state in range(2):
            t, _ = eval_surrogate(model, scan, state)
            ref = synthetic_ramp(scan, W_MIN, W_MAX, state)
            assert np.abs(t - ref).max() <= 1e-8

    def test_csv_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("width_m,re_t\n1e-7,0.5\n")
        with pytest.raises(ConfigurationError):
            load_surrogate_csv(path, 4, W_MIN, W_MAX)

    def test_csv_bad_state_ids(self, tmp_path):
        degree = 3
        nodes = chebyshev_nodes(W_MIN, W_MAX, degree + 1)
        path = tmp_path / "bad_states.csv"
        lines = ["width_m,re_t,im_t,state_id"]
        for w in nodes:
            lines.append(f"{float(w)!r},0.5,0.0,2")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ConfigurationError):
            load_surrogate_csv(path, degree, W_MIN, W_MAX)
