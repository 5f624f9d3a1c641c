"""
Motion compensation from an estimated constant velocity error.

The trajectory phase screen (TPS) of pixel ``x`` at slow time ``tau`` is
``(k(x) . dv) * (tau - tau_ref)``, with ``k(x)`` frozen at the aperture
centre and ``tau_ref`` the middle of the aperture.  It equals the residual
path phase a static scatterer at ``x`` accumulates, so compensation
multiplies each frame by ``exp(+j * screen)`` (see the sign note in
:mod:`mimosar.autofocus`).

When the platform velocity ``v_p`` is known, the screens also carry the
second-order term from the line of sight turning over the aperture:
``k0 * (du/dtau . dv) * (tau - tau_c)**2`` with
``du/dtau = -(v_p - (u . v_p) u) / r``.  Without it, long apertures at
short range leave a residual quadratic phase that defocuses the target.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from .focusing import ComplexImage, ImageGrid, ImageStack, BackprojectedStack
from .geometry import SphericalDir, TrajectorySet, as_vec3, wavenumber


class PhaseScreenSet:
    """Per-slow-time phase screens generated from one rate image.

    ``screens[m]`` is the ``(Px, Py)`` screen in radians at slow time ``m``:
    ``rate * dt + curvature * dt**2`` with ``dt = tau_m - ref_time``.
    """

    def __init__(self, rate: np.ndarray, slow_times, ref_time: float, curvature: Optional[np.ndarray] = None):
        self.rate = np.asarray(rate, dtype=float)
        self.slow_times = np.asarray(slow_times, dtype=float)
        self.ref_time = float(ref_time)
        self.curvature = None if curvature is None else np.asarray(curvature, dtype=float)
        if self.curvature is not None and self.curvature.shape != self.rate.shape:
            raise ValueError("curvature image must match the rate image")

    @property
    def offsets(self) -> np.ndarray:
        return self.slow_times - self.ref_time

    def __len__(self):
        return self.slow_times.size

    def _screen(self, dt) -> np.ndarray:
        if self.curvature is None:
            return self.rate * dt
        return (self.rate + self.curvature * dt) * dt

    def __getitem__(self, m) -> np.ndarray:
        return self._screen(self.offsets[m])

    def at(self, tau: float) -> np.ndarray:
        return self._screen(float(tau) - self.ref_time)

    def __iter__(self):
        for m in range(len(self)):
            yield self[m]

    def scaled(self, factor: float) -> "PhaseScreenSet":
        curv = None if self.curvature is None else self.curvature * factor
        return PhaseScreenSet(self.rate * factor, self.slow_times, self.ref_time, curv)


def _dv_vector(delta_v) -> np.ndarray:
    dv = getattr(delta_v, "delta_v", delta_v)
    dv = as_vec3(dv, "delta_v")
    if not np.all(np.isfinite(dv)):
        raise ValueError("delta_v must be finite")
    return dv


def phase_rate_image(grid: ImageGrid, aperture_centre, delta_v, lam: float) -> np.ndarray:
    """``k(x) . dv`` for every grid node (rad/s)."""
    dv = _dv_vector(delta_v)
    d = SphericalDir.from_cartesian(grid.positions(), origin=np.asarray(aperture_centre, float))
    return wavenumber(d, lam) @ dv


def phase_curvature_image(grid: ImageGrid, aperture_centre, delta_v, platform_velocity, lam: float) -> np.ndarray:
    """``k0 * (du/dtau . dv)`` for every grid node (rad/s^2).

    ``u`` is the unit vector from the aperture centre to the node; it turns
    at ``du/dtau = -(v_p - (u . v_p) u) / r`` as the platform moves.
    """
    dv = _dv_vector(delta_v)
    vp = as_vec3(platform_velocity, "platform_velocity")
    rel = grid.positions() - np.asarray(aperture_centre, float)
    r = np.linalg.norm(rel, axis=-1)
    u = rel / r[..., None]
    du = -(vp - (u @ vp)[..., None] * u) / r[..., None]
    return 4 * np.pi / lam * (du @ dv)


def compute_tps(grid: ImageGrid, aperture_centre, delta_v, slow_times, lam: float,
                ref_time: Optional[float] = None, platform_velocity=None) -> PhaseScreenSet:
    """Trajectory phase screens for a constant velocity error.

    Parameters
    ----------
    aperture_centre : array_like, shape (3,)
        Mean APC position over the aperture; fixes ``k(x)`` for all screens.
    delta_v : VelocityEstimate or array_like
    ref_time : float, optional
        Phase reference; defaults to the middle of ``slow_times``.
    platform_velocity : array_like, shape (3,), optional
        Adds the line-of-sight rotation term about the middle of
        ``slow_times``; omitted when ``None``.
    """
    t = np.asarray(slow_times, dtype=float)
    centre = 0.5 * (t[0] + t[-1])
    ref = centre if ref_time is None else float(ref_time)
    rate = phase_rate_image(grid, aperture_centre, delta_v, lam)
    curv = None
    if platform_velocity is not None:
        curv = phase_curvature_image(grid, aperture_centre, delta_v, platform_velocity, lam)
        # re-centre b (tau - tau_c)^2 on ref_time; the constant phase is dropped
        rate = rate + 2.0 * curv * (ref - centre)
    return PhaseScreenSet(rate, t, ref, curv)


def tps_for_stack(stack, delta_v, lam: float, rotation: bool = True) -> PhaseScreenSet:
    """Screens for ``stack``; ``rotation`` adds the line-of-sight term when the stack knows its platform velocity."""
    vp = getattr(stack, "platform_velocity", None) if rotation else None
    return compute_tps(stack.grid, stack.aperture_centre, delta_v, stack.slow_times, lam, stack.reference_time, vp)


def _check_screens(stack, screens: PhaseScreenSet):
    if len(screens) != len(stack):
        raise ValueError(f"{len(screens)} screens for {len(stack)} frames")
    if screens.rate.shape != stack.grid.shape or (screens.curvature is not None
                                                  and screens.curvature.shape != stack.grid.shape):
        raise ValueError(f"screen shape {screens.rate.shape} does not match grid {stack.grid.shape}")
    if not np.allclose(screens.slow_times, stack.slow_times, rtol=0, atol=1e-12):
        raise ValueError("screen slow times do not match the stack")


def apply_tps(stack, screens: PhaseScreenSet) -> ImageStack:
    """Multiply frame ``m`` by ``exp(+j * screens[m])``; magnitudes are untouched."""
    if isinstance(stack, BackprojectedStack):
        stack = stack.materialize()
    _check_screens(stack, screens)

    def rotate(m, frame):
        ph = screens[m]
        return frame * (np.cos(ph) + 1j * np.sin(ph))

    return stack.map_frames(rotate)


def form_sar(stack, screens: Optional[PhaseScreenSet] = None) -> ComplexImage:
    """Coherent sum of the compensated stack, without storing compensated frames.

    Equal (to rounding) to ``coherent_sum(apply_tps(stack, screens))``.
    """
    if screens is None:
        return stack.screened_sum(None)
    _check_screens(stack, screens)
    return stack.screened_sum(screens.rate, screens.ref_time, screens.curvature)


def correct_trajectory(traj: TrajectorySet, delta_v, ref_time: Optional[float] = None) -> TrajectorySet:
    """Remove a constant velocity error from the navigation states.

    Velocities drop by ``dv``; positions by ``dv * (tau - ref_time)`` with
    ``ref_time`` defaulting to the first slow time.
    """
    dv = _dv_vector(delta_v)
    ref = traj.slow_times[0] if ref_time is None else float(ref_time)
    dt = traj.slow_times - ref
    return replace(traj, nav_pos=traj.nav_pos - np.outer(dt, dv), nav_vel=traj.nav_vel - dv)
