import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp

from mimosar.autofocus import (AutofocusSettings, DopplerEstimate, Gcp, doppler_bin_velocity, estimate_doppler,
                               estimate_velocity_error, incoherent_mean, iterative_autofocus, max_angular_error,
                               max_height_error, max_radial_velocity_error, reject_outliers, residual_phase,
                               select_gcps, solve_wls)
from mimosar.echo import with_moving_target
from mimosar.errors import IllConditionedGeometryError, InsufficientGcpError
from mimosar.focusing import ComplexImage, ImageGrid, ImageStack, focus_stack
from mimosar.geometry import C, RadarParams, SphericalDir, to_spherical, wavenumber

from simutil import autofocus_case, disk_mask, patch, sar_image

LAM = C / 77e9
K0 = 4 * math.pi / LAM


def make_gcp(theta, phi, amplitude=1.0, m=200):
    return Gcp((0, 0), np.zeros(3), SphericalDir(10.0, theta, phi), amplitude, np.zeros(m), weight=amplitude)


def doppler(theta, phi, omega, amplitude=1.0):
    return DopplerEstimate(make_gcp(theta, phi, amplitude), omega, 1.0, 10.0)


def tiny_stack(frames):
    g = ImageGrid(np.arange(frames[0].shape[0]) * 0.025, np.arange(frames[0].shape[1]) * 0.025)
    return ImageStack(g, np.array(frames), np.arange(len(frames)) * 1e-3)


# -- incoherent mean ------------------------------------------------------------------

def test_incoherent_mean_examples():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(4, 5)) + 1j * rng.normal(size=(4, 5))
    np.testing.assert_allclose(incoherent_mean(tiny_stack([img])), np.abs(img), rtol=1e-15)
    np.testing.assert_allclose(incoherent_mean(tiny_stack([img, -img])), np.abs(img), rtol=1e-15)
    np.testing.assert_allclose(incoherent_mean(tiny_stack([img] * 7)), np.abs(img), rtol=1e-15)


# -- GCP selection ----------------------------------------------------------------------

def _bright_spots(shape, spots, floor=0.01, seed=0):
    rng = np.random.default_rng(seed)
    img = floor * rng.random(shape)
    for (i, j), a in spots:
        img[i, j] += a
    return img


def _oracle_maxima(img, threshold):
    # exhaustive scan: strictly above threshold and >= all 8 neighbours
    out = set()
    nx, ny = img.shape
    for i in range(nx):
        for j in range(ny):
            v = img[i, j]
            if v <= threshold:
                continue
            nb = img[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            if v >= nb.max():
                out.add((i, j))
    return out


def test_select_five_isolated_targets():
    spots = [((10, 10), 5.0), ((10, 60), 4.0), ((50, 30), 3.0), ((80, 80), 2.5), ((90, 15), 2.0)]
    img = _bright_spots((100, 100), spots)
    stack = tiny_stack([img.astype(complex)] * 8)
    gcps = select_gcps(incoherent_mean(stack), stack, max_count=5, min_separation_cells=10, threshold_quantile=0.99)
    chosen = {g.pixel_index for g in gcps}
    mean = incoherent_mean(stack)
    assert chosen == {s[0] for s in spots}
    assert chosen <= _oracle_maxima(mean, np.quantile(mean, 0.99))
    assert [g.amplitude for g in gcps] == sorted((g.amplitude for g in gcps), reverse=True)
    for g in gcps:
        assert g.phase_history.size == 8
        assert g.weight == g.amplitude
        assert g.amplitude >= g.threshold


def test_uniform_image_has_no_gcps():
    stack = tiny_stack([np.ones((40, 40), complex)] * 8)
    with pytest.raises(InsufficientGcpError):
        select_gcps(incoherent_mean(stack), stack, threshold_quantile=0.9)


def test_huge_separation_leaves_one_candidate():
    spots = [((10, 10), 5.0), ((10, 60), 4.0), ((50, 30), 3.0)]
    img = _bright_spots((100, 100), spots)
    stack = tiny_stack([img.astype(complex)] * 8)
    with pytest.raises(InsufficientGcpError):
        select_gcps(incoherent_mean(stack), stack, min_separation_cells=500)


def test_select_requires_three():
    stack = tiny_stack([np.ones((5, 5), complex)] * 8)
    with pytest.raises(ValueError):
        select_gcps(incoherent_mean(stack), stack, max_count=2)


def test_residual_phase_unwraps_negated_image_phase():
    tau = np.arange(200) * 1e-3
    rate = 300.0
    hist = np.exp(-1j * rate * tau)
    ph = residual_phase(hist)
    assert np.all(np.abs(np.diff(ph)) <= math.pi)
    assert np.polyfit(tau, ph, 1)[0] == pytest.approx(rate, rel=1e-9)


# -- Doppler estimation ------------------------------------------------------------------

def _gcp_with_phase(phase):
    return Gcp((0, 0), np.zeros(3), SphericalDir(10.0, math.pi / 2, 0.0), 1.0, np.asarray(phase))


def test_doppler_of_constant_phase_is_zero():
    tau = np.arange(200) * 1e-3
    est = estimate_doppler(_gcp_with_phase(np.zeros(200)), tau)
    assert est.omega == 0.0
    # no other phase history reaches a higher peak-to-median ratio
    rng = np.random.default_rng(2)
    for ph in (2 * math.pi * 37.3 * tau, rng.normal(0, 0.5, 200), 0.3 * np.sin(40 * tau)):
        assert estimate_doppler(_gcp_with_phase(ph), tau).prominence <= est.prominence


def test_doppler_of_50hz_tone():
    tau = np.arange(200) * 1e-3
    est = estimate_doppler(_gcp_with_phase(2 * math.pi * 50 * tau), tau, zero_pad_factor=8)
    assert est.omega / (2 * math.pi) == pytest.approx(50.0, abs=0.5)


def test_doppler_input_validation():
    tau = np.arange(200) * 1e-3
    ph = np.zeros(200)
    ph[3] = np.nan
    with pytest.raises(ValueError):
        estimate_doppler(_gcp_with_phase(ph), tau)
    with pytest.raises(ValueError):
        estimate_doppler(_gcp_with_phase(np.zeros(5)), tau[:5])
    with pytest.raises(ValueError):
        estimate_doppler(_gcp_with_phase(np.zeros(200)), tau, zero_pad_factor=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-600.0, 600.0), st.floats(-math.pi, math.pi), st.integers(8, 300))
def test_doppler_stays_in_unambiguous_band_and_finds_tones(freq, phase0, m):
    pri = 1e-3
    tau = np.arange(m) * pri
    est = estimate_doppler(_gcp_with_phase(phase0 + 2 * math.pi * freq * tau), tau)
    assert -math.pi / pri <= est.omega < math.pi / pri
    # within one zero-padded bin of the (aliased) tone
    alias = (freq + 500.0) % 1000.0 - 500.0
    err = abs((est.omega / (2 * math.pi) - alias + 500.0) % 1000.0 - 500.0)
    assert err <= 1.0 / (8 * m * pri)


def test_doppler_matches_wavenumber_projection_end_to_end():
    # target at theta = pi/2, injected dv: GCP Doppler = k . dv within one padded bin
    p = RadarParams(mount_offset=(0.0, 0.0, 0.0))
    dv = np.array([0.12, -0.04, 0.0])
    for phi in (0.3, -0.7, 1.0):
        xc = 0.7
        tgt = (xc + 15 * math.cos(phi), 15 * math.sin(phi), 0.0)
        grid = patch(tgt, 0.1, 0.025)
        _, stack, traj, _ = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1)
        i, j = grid.nearest_index(tgt)
        hist = stack.histories([(i, j)])[0]
        g = Gcp((i, j), grid.position(i, j), to_spherical(grid.position(i, j), stack.aperture_centre), 1.0,
                residual_phase(hist))
        est = estimate_doppler(g, stack.slow_times)
        expected = wavenumber(g.direction, p.wavelength) @ dv
        bin_omega = 2 * math.pi / (8 * len(traj) * p.pri)
        assert abs(est.omega - expected) <= bin_omega


def _history_at_target(phi, r, dv, n_pulses=200):
    p = RadarParams()
    tgt = (0.7 + r * math.cos(phi), r * math.sin(phi), 0.0)
    grid = patch(tgt, 0.05, 0.025)
    _, stack, traj, _ = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1, n_pulses=n_pulses)
    return stack.slow_times, residual_phase(stack.histories([grid.nearest_index(tgt)])[0]), p


@pytest.mark.parametrize("phi,r", [(0.2, 18.0), (0.9, 18.0), (-0.6, 18.0), (1.0, 10.0)])
def test_linear_phase_model(phi, r):
    # 200 pulses at 7 m/s, injected error of the field trial
    t, ph, _ = _history_at_target(phi, r, [0.2278, 0.0107, 0.0])
    fit = np.polyval(np.polyfit(t, ph, 1), t)
    assert np.sqrt(np.mean((ph - fit) ** 2)) < 0.1


def test_residual_phase_curvature_follows_line_of_sight_rotation():
    # quadratic term (4 pi/lam) (du/dtau . dv) (tau - tau_c)^2, |du_x/dtau| = v sin^2(phi) / r along x
    for phi, r in ((0.9, 18.0), (-0.6, 18.0), (0.4, 12.0)):
        t, ph, p = _history_at_target(phi, r, [0.2278, 0.0, 0.0])
        quad = np.polyfit(t, ph, 2)[0]
        expected = -4 * math.pi / p.wavelength * 0.2278 * 7.0 * math.sin(phi) ** 2 / r
        assert quad == pytest.approx(expected, rel=0.1)


# -- outlier rejection ---------------------------------------------------------------------

def test_zero_dopplers_all_kept():
    ests = [doppler(math.pi / 2, phi, 0.0) for phi in np.linspace(-1, 1, 5)]
    assert len(reject_outliers(ests, 0.2, LAM)) == 5


def test_one_metre_per_second_is_rejected():
    ests = [doppler(math.pi / 2, phi, 0.0) for phi in np.linspace(-1, 1, 5)]
    ests.append(doppler(math.pi / 2, 0.0, K0 * 1.0))
    kept, mask = reject_outliers(ests, 0.2, LAM, return_mask=True)
    assert len(kept) == 5 and not mask[-1]


def test_rejection_leaving_too_few_raises():
    ests = [doppler(math.pi / 2, 0.0, K0 * 1.0)] * 3 + [doppler(math.pi / 2, 0.5, 0.0)] * 2
    with pytest.raises(InsufficientGcpError):
        reject_outliers(ests, 0.2, LAM)
    with pytest.raises(ValueError):
        reject_outliers(ests, 0.0, LAM)


# -- WLS ----------------------------------------------------------------------------------

def test_wls_exactly_determined_example():
    ests = [doppler(math.pi / 2, 0.0, K0 * 0.10), doppler(math.pi / 2, math.pi / 2, K0 * -0.05)]
    est = solve_wls(ests, LAM)
    np.testing.assert_allclose(est.delta_v[:2], [0.10, -0.05], rtol=1e-12)
    assert est.delta_v[2] == 0.0
    assert est.covariance.shape == (2, 2)
    assert math.isnan(est.sigma2)


def test_wls_all_ahead_is_ill_conditioned():
    ests = [doppler(math.pi / 2, phi, 0.0) for phi in np.linspace(-1e-5, 1e-5, 10)]
    with pytest.raises(IllConditionedGeometryError, match="phi"):
        solve_wls(ests, LAM)


def test_wls_thirty_noisy_gcps_within_three_sigma():
    rng = np.random.default_rng(4)
    dv = np.array([0.2278, 0.0107, 0.0])
    phis = rng.uniform(-math.pi / 3, math.pi / 3, 30)
    sigma_v = 0.02
    ests = []
    for phi in phis:
        d = SphericalDir(15.0, math.pi / 2, phi)
        ests.append(DopplerEstimate(make_gcp(math.pi / 2, phi), wavenumber(d, LAM) @ dv + rng.normal(0, K0 * sigma_v),
                                    1.0, 10.0))
    est = solve_wls(ests, LAM, weight_mode="uniform")
    assert np.all(np.abs(est.delta_v[:2] - dv[:2]) <= 3 * est.sigma)
    # same order as the field result (1.27, 2.24) cm/s
    assert 0.001 < est.sigma[0] < 0.05 and 0.001 < est.sigma[1] < 0.1


def test_wls_vz_needs_three_and_reports_3x3():
    ests = [doppler(t, p, K0 * 0.01) for t, p in [(1.2, 0.0), (1.6, 0.8), (2.0, -0.8), (1.4, 0.3)]]
    est = solve_wls(ests, LAM, estimate_vz=True)
    assert est.covariance.shape == (3, 3)
    with pytest.raises(InsufficientGcpError):
        solve_wls(ests[:2], LAM, estimate_vz=True)


def test_wls_rejects_bad_weights():
    ests = [doppler(math.pi / 2, phi, 0.0) for phi in (0.0, 0.5, -0.5)]
    with pytest.raises(ValueError):
        solve_wls(ests, LAM, weights=[0, 0, 0])
    with pytest.raises(ValueError):
        solve_wls(ests, LAM, weights=[1, -1, 1])


def test_wls_components_hold_other_axes():
    rng = np.random.default_rng(1)
    ests = [doppler(math.pi / 2, phi, K0 * (0.1 * math.cos(phi)) + rng.normal(0, 1.0))
            for phi in np.linspace(-1, 1, 12)]
    est = solve_wls(ests, LAM, components=[0])
    assert est.delta_v[1] == 0.0
    assert est.covariance[1, 1] == 0.0 and est.covariance[0, 1] == 0.0
    assert est.delta_v[0] == pytest.approx(0.1, abs=0.01)
    with pytest.raises(ValueError):
        solve_wls(ests, LAM, components=[2])


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e6), st.integers(0, 10_000))
def test_wls_weight_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    n = 12
    phis = rng.uniform(-1.2, 1.2, n)
    thetas = rng.uniform(1.4, 1.75, n)
    omegas = rng.normal(0, 50, n)
    w = rng.uniform(0.1, 3.0, n)
    ests = [doppler(t, p, o) for t, p, o in zip(thetas, phis, omegas)]
    a = solve_wls(ests, LAM, weights=w)
    b = solve_wls(ests, LAM, weights=w * scale)
    np.testing.assert_allclose(b.delta_v, a.delta_v, rtol=1e-12, atol=1e-12 * np.abs(a.delta_v).max())
    np.testing.assert_allclose(b.covariance, a.covariance, rtol=1e-10, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_wls_covariance_is_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    ests = [doppler(t, p, o) for t, p, o in zip(rng.uniform(1.3, 1.8, 8), rng.uniform(-1, 1, 8), rng.normal(0, 20, 8))]
    for vz in (False, True):
        cov = solve_wls(ests, LAM, estimate_vz=vz).covariance
        assert np.array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= -1e-12 * max(np.abs(cov).max(), 1e-300)


# -- error budgets ----------------------------------------------------------------------------

def test_max_radial_velocity_error_examples():
    assert max_radial_velocity_error(LAM, 0.040) == pytest.approx(0.0487, abs=5e-4)
    assert max_radial_velocity_error(C / 24e9, 0.125) == pytest.approx(0.05, abs=1e-3)
    assert max_radial_velocity_error(2.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        max_radial_velocity_error(LAM, 0.0)


def test_height_budget_grazing_is_infinite():
    assert max_height_error(SphericalDir(10.0, math.pi / 2, 0.3), [15.0, 0, 0], LAM, 0.2) == math.inf


def _height_oracle(r_h, height, v, lam, t_ap):
    mp.dps = 40
    r_h, height, v, lam, t_ap = (mp.mpf(str(x)) for x in (r_h, height, v, lam, t_ap))
    r = mp.sqrt(r_h ** 2 + height ** 2)
    theta = mp.pi / 2 + mp.atan(height / r_h)
    dvr = lam / (2 * t_ap)
    # k'_theta . v = (4 pi/lam) v cos(theta) cos(phi), phi = 0
    return float(dvr * r * mp.sin(theta) / abs(v * mp.cos(theta)))


def test_height_budget_near_and_far_ahead():
    radar = np.array([0.0, 0.0, 0.5])
    out = []
    for r in (5.0, 25.0):
        d = to_spherical(np.array([r, 0.0, 0.0]), radar)
        got = max_height_error(d, [15.0, 0, 0], LAM, 0.2)
        assert got == pytest.approx(_height_oracle(r, 0.5, 15.0, LAM, 0.2), rel=1e-9)
        out.append(got)
    assert out[1] > out[0]


def test_angular_budget_examples():
    assert max_angular_error(SphericalDir(10.0, math.pi / 2, 0.0), [15.0, 0, 0], LAM, 0.2) == math.inf
    got = max_angular_error(SphericalDir(10.0, math.pi / 2, math.pi / 2), [15.0, 0, 0], LAM, 0.2)
    assert got == pytest.approx((LAM / 0.4) / 15.0, rel=1e-9)
    assert got == pytest.approx(6.5e-4, abs=1e-5)
    assert max_angular_error(SphericalDir(10.0, 1.0, 0.4), [0.0, 0, 0], LAM, 0.2) == math.inf


def test_budgets_broadcast_over_arrays():
    d = SphericalDir(np.array([5.0, 10.0]), np.array([1.6, 1.7]), np.array([0.3, 0.9]))
    assert max_height_error(d, [15.0, 0, 0], LAM, 0.2).shape == (2,)
    assert max_angular_error(d, [15.0, 0, 0], LAM, 0.2).shape == (2,)


def test_bin_velocity():
    assert doppler_bin_velocity(LAM, 200, 1e-3, 8) == pytest.approx(LAM / 3.2)


def test_settings_validation():
    with pytest.raises(ValueError):
        AutofocusSettings(max_gcps=2)
    with pytest.raises(ValueError):
        AutofocusSettings(weight_mode="loud")
    with pytest.raises(ValueError):
        AutofocusSettings(nav_accuracy=0)


# -- end-to-end ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def noiseless_injected():
    dv = np.array([0.2278, 0.0107, 0.0])
    cube, traj, p, grid, targets = autofocus_case(3, dv, noise_power=0.0)
    return dv, cube, traj, p, grid


def test_noiseless_end_to_end_consistency(noiseless_injected):
    dv, cube, traj, p, grid = noiseless_injected
    res = iterative_autofocus(cube, traj, p, grid)
    bound = max(doppler_bin_velocity(p.wavelength, len(traj), p.pri, 8), 5e-3)
    assert np.linalg.norm(res.estimate.delta_v - dv) <= bound


def test_single_pass_is_biased_low_along_track(noiseless_injected):
    # the incoherent-mean peak is pulled toward the Doppler-null point
    dv, cube, traj, p, grid = noiseless_injected
    first = iterative_autofocus(cube, traj, p, grid, max_iterations=1).estimate
    refined = iterative_autofocus(cube, traj, p, grid).estimate
    assert first.delta_v[0] < 0.85 * dv[0]
    assert abs(refined.delta_v[0] - dv[0]) < abs(first.delta_v[0] - dv[0])


def test_zero_error_fixed_point():
    cube, traj, p, grid, _ = autofocus_case(5, np.zeros(3), noise_power=0.0)
    stack = focus_stack(cube, traj, p, grid, lazy=True)
    res = estimate_velocity_error(stack, p.wavelength)
    bin_v = doppler_bin_velocity(p.wavelength, len(traj), p.pri, 8)
    bin_omega = 2 * math.pi / (8 * len(traj) * p.pri)
    assert all(abs(d.omega) < bin_omega for d in res.dopplers)
    assert np.all(np.abs(res.estimate.delta_v) < bin_v)


def test_moving_target_rejection():
    # radial speed ~0.8 m/s: above the 1.5 x 0.2 m/s gate, inside the unambiguous band
    dv = np.array([0.2278, 0.0107, 0.0])
    mover = np.array([16.0, -3.0, 0.0])

    def add_mover(scene, traj):
        return with_moving_target(scene, mover, (-0.8, 0.2, 0.0), traj.slow_times, reflectivity=3.0)

    cube, traj, p, grid, _ = autofocus_case(6, dv, extra=add_mover)
    grid = grid.with_mask(grid.active() | disk_mask(grid, [mover], 0.75))
    with_rej = iterative_autofocus(cube, traj, p, grid).estimate
    no_rej = iterative_autofocus(cube, traj, p, grid, AutofocusSettings(kappa=1e9)).estimate
    assert np.all(np.abs(with_rej.delta_v[:2] - dv[:2]) <= 2 * with_rej.sigma)
    assert np.any(np.abs(no_rej.delta_v[:2] - dv[:2]) > 2 * no_rej.sigma)


def test_iterative_result_bookkeeping(noiseless_injected):
    dv, cube, traj, p, grid = noiseless_injected
    res = iterative_autofocus(cube, traj, p, grid, max_iterations=3)
    assert 1 <= res.converged_in <= 3
    np.testing.assert_allclose(np.sum(res.increments, axis=0), res.estimate.delta_v, atol=1e-15)
    assert len(res.frozen_at) == 2
    with pytest.raises(ValueError):
        iterative_autofocus(cube, traj, p, grid, max_iterations=0)
