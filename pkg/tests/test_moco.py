import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from mpmath import mp

from mimosar.autofocus import iterative_autofocus
from mimosar.focusing import ImageGrid, ImageStack, coherent_sum, focus_stack
from mimosar.geometry import C, RadarParams, TrajectorySet
from mimosar.metrics import local_peak
from mimosar.moco import PhaseScreenSet, apply_tps, compute_tps, correct_trajectory, form_sar, tps_for_stack

from simutil import autofocus_case, patch, sar_image

LAM = C / 77e9


def test_zero_velocity_gives_zero_screens():
    g = ImageGrid(np.linspace(5, 6, 5), np.linspace(-1, 1, 7))
    s = compute_tps(g, [0.5, 0, 0.5], [0, 0, 0], np.arange(20) * 1e-3, LAM)
    assert all(not np.any(sc) for sc in s)


def test_reference_time_screen_is_zero():
    g = ImageGrid(np.linspace(5, 6, 5), np.linspace(-1, 1, 7))
    t = np.arange(21) * 1e-3
    s = compute_tps(g, [0.5, 0, 0.5], [0.2, -0.1, 0], t, LAM)
    assert s.ref_time == pytest.approx(0.01)
    assert not np.any(s[10])
    assert not np.any(s.at(s.ref_time))


def test_screen_value_example():
    mp.dps = 30
    oracle = float(4 * mp.pi / (mp.mpf(299792458) / mp.mpf("77e9")) * mp.mpf("0.01"))
    assert oracle == pytest.approx(32.28, abs=0.01)
    # pixel straight ahead of the aperture centre and level with it: phi = 0, theta = pi/2
    g = ImageGrid(np.array([10.0]), np.array([0.0]), z_plane=0.5)
    s = compute_tps(g, [0.0, 0.0, 0.5], [0.1, 0.0, 0.0], np.array([0.0, 0.1]), LAM, ref_time=0.0)
    assert s[1][0, 0] == pytest.approx(oracle, rel=1e-12)


def test_non_finite_velocity_rejected():
    g = ImageGrid(np.linspace(5, 6, 5), np.linspace(-1, 1, 7))
    with pytest.raises(ValueError):
        compute_tps(g, [0, 0, 0.5], [np.nan, 0, 0], np.arange(5) * 1e-3, LAM)


def _random_stack(seed, m=6, shape=(5, 7)):
    rng = np.random.default_rng(seed)
    g = ImageGrid(np.linspace(5, 6, shape[0]), np.linspace(-1, 1, shape[1]))
    data = rng.normal(size=(m,) + shape) + 1j * rng.normal(size=(m,) + shape)
    return ImageStack(g, data, np.arange(m) * 1e-3, np.array([0.0, 0.0, 0.5]))


def test_apply_zero_screens_is_identity():
    st_ = _random_stack(0)
    out = apply_tps(st_, PhaseScreenSet(np.zeros(st_.grid.shape), st_.slow_times, 0.0))
    assert np.array_equal(out.data, st_.data)


def test_opposite_screens_cancel():
    st_ = _random_stack(1)
    s = tps_for_stack(st_, [0.3, -0.2, 0.0], LAM)
    back = apply_tps(apply_tps(st_, s), s.scaled(-1.0))
    assert np.abs(back.data - st_.data).max() <= 1e-12 * np.abs(st_.data).max()


def test_shape_mismatch_rejected():
    st_ = _random_stack(2)
    with pytest.raises(ValueError):
        apply_tps(st_, PhaseScreenSet(np.zeros((3, 3)), st_.slow_times, 0.0))
    with pytest.raises(ValueError):
        apply_tps(st_, PhaseScreenSet(np.zeros(st_.grid.shape), st_.slow_times[:-1], 0.0))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.1, 0.1))
def test_apply_tps_preserves_magnitude(seed, dvx, dvy, dvz):
    st_ = _random_stack(seed)
    out = apply_tps(st_, tps_for_stack(st_, [dvx, dvy, dvz], LAM))
    np.testing.assert_allclose(np.abs(out.data), np.abs(st_.data), rtol=1e-6)


def test_form_sar_matches_apply_then_sum():
    st_ = _random_stack(3)
    s = tps_for_stack(st_, [0.2, 0.05, 0.0], LAM)
    a = form_sar(st_, s).pixels
    b = coherent_sum(apply_tps(st_, s)).pixels
    assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max()
    assert np.array_equal(form_sar(st_, None).pixels, coherent_sum(st_).pixels)
    zero = PhaseScreenSet(np.zeros(st_.grid.shape), st_.slow_times, st_.reference_time)
    np.testing.assert_allclose(form_sar(st_, zero).pixels, coherent_sum(st_).pixels, rtol=0, atol=1e-13)


def test_same_screen_twice_differs_from_once():
    p = RadarParams()
    dv = np.array([0.2278, 0.0107, 0.0])
    tgt = (0.7 + 15 * math.cos(0.6), 15 * math.sin(0.6), 0.0)
    grid = patch(tgt, 0.3, 0.025)
    _, stack, _, _ = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1)
    s = tps_for_stack(stack, dv, p.wavelength)
    once = coherent_sum(apply_tps(stack, s)).pixels
    twice = coherent_sum(apply_tps(apply_tps(stack, s), s)).pixels
    assert np.abs(once - twice).max() > 1e-3 * np.abs(once).max()


# -- single-target refocusing -------------------------------------------------------------------

CASES = [(15.0, 0.6, (0.2278, 0.0107, 0.0)), (12.0, -0.9, (0.1, -0.05, 0.0)), (22.0, 0.3, (0.25, 0.02, 0.0))]


@pytest.mark.parametrize("r,phi,dv", CASES)
def test_true_screens_refocus_single_target(r, phi, dv):
    p = RadarParams()
    tgt = (0.7 + r * math.cos(phi), r * math.sin(phi), 0.0)
    grid = patch(tgt, 0.5, 0.025)
    ref_img, *_ = sar_image([tgt], p, grid=grid)
    bad_img, stack, _, _ = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1)
    fixed = form_sar(stack, tps_for_stack(stack, dv, p.wavelength))
    idx_ref, _, amp_ref = local_peak(ref_img, tgt, 0.5)
    idx_fix, _, amp_fix = local_peak(fixed, tgt, 0.5)
    assert idx_fix == idx_ref
    assert amp_fix == pytest.approx(amp_ref, rel=0.05)
    assert amp_fix >= 0.95 * amp_ref
    # corrupted image is clearly worse
    _, _, amp_bad = local_peak(bad_img, tgt, 0.5)
    assert amp_bad < 0.9 * amp_ref


def test_zero_screens_leave_cross_track_displacement():
    p = RadarParams()
    vx, dvy, r0 = 10.0, 0.1, 20.0
    traj = TrajectorySet.constant_velocity([vx, 0, 0], 200, p.pri)
    xc = traj.true_pos[:, 0].mean()
    tgt = (xc, r0, 0.0)
    grid = patch(tgt, 0.6, 0.025)
    _, stack, _, _ = sar_image([tgt], p, v=(vx, 0, 0), delta_v=(0, dvy, 0), grid=grid)
    img = form_sar(stack, tps_for_stack(stack, [0, 0, 0], p.wavelength))
    _, pos, _ = local_peak(img, tgt, 0.6)
    shift = np.linalg.norm(pos[:2] - np.array(tgt[:2]))
    assert abs(shift - r0 * dvy / vx) <= grid.cell + 0.1 * r0 * dvy / vx


# -- trajectory correction ------------------------------------------------------------------

def test_correct_with_zero_is_identity():
    t = TrajectorySet.constant_velocity([7.0, 0, 0], 30, 1e-3).with_velocity_error([0.1, 0.1, 0])
    c = correct_trajectory(t, [0, 0, 0])
    np.testing.assert_array_equal(c.nav_pos, t.nav_pos)
    np.testing.assert_array_equal(c.nav_vel, t.nav_vel)


@pytest.mark.parametrize("ref", [None, "centre"])
def test_correct_with_true_error_restores_truth(ref):
    t0 = TrajectorySet.constant_velocity([7.0, 0.3, 0], 200, 1e-3)
    dv = np.array([0.2278, 0.0107, -0.01])
    r = None if ref is None else t0.centre_time
    t = t0.with_velocity_error(dv, r)
    c = correct_trajectory(t, dv, r)
    assert np.abs(c.nav_pos - c.true_pos).max() <= 1e-9
    assert np.abs(c.nav_vel - c.true_vel).max() <= 1e-12


def test_noisy_estimate_shrinks_end_position_error():
    dv = np.array([0.3, 0.2, 0.0])
    cube, traj, p, grid, _ = autofocus_case(11, dv)
    res = iterative_autofocus(cube, traj, p, grid)
    est = res.estimate
    assert np.linalg.norm(dv[:2]) >= 10 * np.linalg.norm(est.sigma)
    fixed = correct_trajectory(traj, est, traj.centre_time)
    before = np.linalg.norm(traj.nav_pos[-1] - traj.true_pos[-1])
    after = np.linalg.norm(fixed.nav_pos[-1] - fixed.true_pos[-1])
    assert after * 10 <= before


def test_data_domain_refocus_matches_true_track():
    # refocusing the raw data with the corrected track and compensating the images
    # are alternative paths; both must put the target back on its node
    p = RadarParams()
    dv = np.array([0.2278, 0.0107, 0.0])
    tgt = (0.7 + 15 * math.cos(0.6), 15 * math.sin(0.6), 0.0)
    grid = patch(tgt, 0.4, 0.025)
    ref_img, *_ = sar_image([tgt], p, grid=grid)
    _, stack, traj, cube = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1)
    data_dom = coherent_sum(focus_stack(cube, correct_trajectory(traj, dv, 0.1), p, grid, lazy=True))
    img_dom = form_sar(stack, tps_for_stack(stack, dv, p.wavelength))
    node = local_peak(ref_img, tgt, 0.4)[0]
    assert local_peak(data_dom, tgt, 0.4)[0] == node
    assert local_peak(img_dom, tgt, 0.4)[0] == node


# -- line-of-sight rotation term -----------------------------------------------------------

def test_rotation_term_flattens_residual_phase():
    p = RadarParams()
    dv = np.array([0.2278, 0.0107, 0.0])
    tgt = (0.7 + 15 * math.cos(0.9), 15 * math.sin(0.9), 0.0)
    grid = patch(tgt, 0.05, 0.025)
    _, good, _, _ = sar_image([tgt], p, grid=grid)
    _, bad, _, _ = sar_image([tgt], p, delta_v=dv, grid=grid, ref_time=0.1)
    c = (grid.shape[0] // 2, grid.shape[1] // 2)
    ratio = bad.histories([c])[0] / good.histories([c])[0]
    t = bad.slow_times - bad.reference_time

    def curvature_left(screens):
        scr = np.array([s[c] for s in screens])
        res = np.unwrap(np.angle(ratio * np.exp(1j * scr)))
        return abs(np.polyfit(t, res, 2)[0])

    linear_only = curvature_left(tps_for_stack(bad, dv, p.wavelength, rotation=False))
    full = curvature_left(tps_for_stack(bad, dv, p.wavelength))
    assert linear_only > 20.0
    assert full < 0.1 * linear_only


def test_rotation_term_example():
    # pixel abeam at range 10 with v = 10 along x: du_x/dtau = -v / r = -1 /s
    g = ImageGrid(np.array([0.0]), np.array([10.0]), z_plane=0.0)
    s = compute_tps(g, [0, 0, 0], [0.1, 0, 0], np.array([-0.1, 0.0, 0.1]), LAM, platform_velocity=[10.0, 0, 0])
    k0 = 4 * math.pi / LAM
    assert s.curvature[0, 0] == pytest.approx(-k0 * 0.1, rel=1e-12)
    assert s[2][0, 0] == pytest.approx(-k0 * 0.1 * 0.01, rel=1e-12)
    assert s[1][0, 0] == 0.0


def test_rotation_term_off_centre_reference_is_consistent():
    g = ImageGrid(np.linspace(5, 6, 3), np.linspace(-1, 1, 4))
    t = np.arange(11) * 1e-2
    a = compute_tps(g, [0.3, 0, 0.5], [0.2, -0.1, 0], t, LAM, platform_velocity=[7, 0, 0])
    b = compute_tps(g, [0.3, 0, 0.5], [0.2, -0.1, 0], t, LAM, ref_time=0.0, platform_velocity=[7, 0, 0])
    # same screens up to a constant phase per pixel
    diff = np.array([b[m] - a[m] for m in range(len(t))])
    np.testing.assert_allclose(diff - diff[0], 0.0, atol=1e-9)


def test_form_sar_with_rotation_matches_apply_then_sum():
    p = RadarParams()
    tgt = (0.7 + 12 * math.cos(0.5), 12 * math.sin(0.5), 0.0)
    _, stack, _, _ = sar_image([tgt], p, delta_v=(0.2, 0.05, 0), grid=patch(tgt, 0.1, 0.025), n_pulses=40)
    s = tps_for_stack(stack, [0.2, 0.05, 0], p.wavelength)
    assert s.curvature is not None
    lazy = form_sar(stack, s).pixels
    dense = stack.materialize()
    assert dense.platform_velocity is not None
    via_dense = form_sar(dense, s).pixels
    applied = coherent_sum(apply_tps(stack, s)).pixels
    scale = np.abs(applied).max()
    assert np.abs(lazy - applied).max() <= 1e-12 * scale
    assert np.abs(via_dense - applied).max() <= 1e-12 * scale
