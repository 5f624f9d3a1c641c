"""
Coordinates, platform trajectories and wavenumber vectors.

Frame convention: right-handed, x along the nominal direction of motion,
y to the left, z up.  The azimuth angle ``phi`` is measured from +x toward
+y, the elevation angle ``theta`` from +z, so a pixel at radar height has
``theta = pi/2``.  All angles are radians.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (or ``(..., 3)`` when
batched).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

# Speed of light in vacuum (m/s), exact.
C = 299_792_458.0

Vec3 = np.ndarray
ArrayLike = Union[float, np.ndarray]


def as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SphericalDir:
    """Slant range ``r`` (m), elevation ``theta`` and azimuth ``phi`` (rad).

    Fields may be scalars or broadcastable arrays.
    """

    r: ArrayLike
    theta: ArrayLike
    phi: ArrayLike

    def to_cartesian(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.stack(
            np.broadcast_arrays(
                self.r * st * np.cos(self.phi),
                self.r * st * np.sin(self.phi),
                self.r * np.cos(self.theta),
            ),
            axis=-1,
        ).astype(float)

    @classmethod
    def from_cartesian(cls, xyz, origin=None) -> "SphericalDir":
        """Direction of ``xyz`` as seen from ``origin`` (default: the origin)."""
        d = np.asarray(xyz, dtype=float)
        if origin is not None:
            d = d - np.asarray(origin, dtype=float)
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        r = np.sqrt(x * x + y * y + z * z)
        theta = np.arctan2(np.hypot(x, y), z)
        phi = np.arctan2(y, x)
        if np.ndim(r) == 0:
            return cls(float(r), float(theta), float(phi))
        return cls(r, theta, phi)


def to_spherical(xyz, origin=None) -> SphericalDir:
    """Cartesian point(s) to :class:`SphericalDir` (see :meth:`SphericalDir.from_cartesian`)."""
    return SphericalDir.from_cartesian(xyz, origin)


@dataclass(frozen=True)
class RadarParams:
    """FMCW MIMO radar description.

    Defaults reproduce the 77 GHz forward-looking campaign set-up: 3 GHz
    bandwidth, 55 us chirp, 1 ms PRI, 2 Tx x 4 Rx, 27 m maximum range.
    ``dy`` defaults to a quarter wavelength.  ``mount_offset`` is the array
    centre relative to the vehicle reference point expressed in the body frame
    (forward, left, up); when omitted it is ``(0, 0, mount_height)``.
    """

    fc: float = 77e9
    bandwidth: float = 3e9
    pulse_len: float = 55e-6
    pri: float = 1e-3
    n_tx: int = 2
    n_rx: int = 4
    dy: Optional[float] = None
    mount_height: float = 0.5
    mount_offset: Optional[Tuple[float, float, float]] = None
    max_range: float = 27.0

    def __post_init__(self):
        for name in ("fc", "bandwidth", "pulse_len", "pri", "max_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.n_tx) < 1 or int(self.n_rx) < 1:
            raise ValueError("n_tx and n_rx must be >= 1")
        if self.dy is None:
            object.__setattr__(self, "dy", self.wavelength / 4)
        if not self.dy > 0:
            raise ValueError("dy must be positive")
        if self.mount_offset is None:
            object.__setattr__(self, "mount_offset", (0.0, 0.0, float(self.mount_height)))
        else:
            object.__setattr__(self, "mount_offset", tuple(float(v) for v in as_vec3(self.mount_offset, "mount_offset")))
        if self.angle_ambiguous:
            warnings.warn(
                f"element spacing dy={self.dy:.4g} m exceeds lambda/4={self.wavelength / 4:.4g} m; "
                "the MIMO image has grating lobes inside the visible region",
                stacklevel=3,
            )

    @property
    def wavelength(self) -> float:
        return C / self.fc

    @property
    def n_virtual(self) -> int:
        return int(self.n_tx) * int(self.n_rx)

    @property
    def range_resolution(self) -> float:
        return C / (2.0 * self.bandwidth)

    @property
    def angle_ambiguous(self) -> bool:
        # relative slack so that dy = lambda/4 computed elsewhere does not trip it
        return self.dy > self.wavelength / 4 * (1 + 1e-9)

    def to_dict(self) -> dict:
        return {
            "fc": self.fc,
            "bandwidth": self.bandwidth,
            "pulse_len": self.pulse_len,
            "pri": self.pri,
            "n_tx": int(self.n_tx),
            "n_rx": int(self.n_rx),
            "dy": self.dy,
            "mount_height": self.mount_height,
            "mount_offset": list(self.mount_offset),
            "max_range": self.max_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadarParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown radar parameter(s): {sorted(unknown)}")
        kw = dict(d)
        if kw.get("mount_offset") is not None:
            kw["mount_offset"] = tuple(kw["mount_offset"])
        return cls(**kw)


def _body_axes(heading) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward, left and up unit vectors for a heading vector."""
    h = np.asarray(heading, dtype=float)
    horiz = np.array([h[0], h[1], 0.0])
    n = np.linalg.norm(horiz)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("heading must have a nonzero horizontal component")
    fwd = horiz / n
    up = np.array([0.0, 0.0, 1.0])
    left = np.cross(up, fwd)
    return fwd, left, up


def apc_positions(params: RadarParams, state, heading) -> np.ndarray:
    """Virtual antenna phase centres at one slow time.

    Parameters
    ----------
    params : RadarParams
    state : (position, velocity)
        Vehicle reference point position (m) and velocity (m/s).
    heading : array_like, shape (3,)
        Direction of travel.  Must be unit norm; the array is laid out
        along ``z x heading`` in the horizontal plane.

    Returns
    -------
    ndarray, shape (n_virtual, 3)
    """
    h = as_vec3(heading, "heading")
    hn = np.linalg.norm(h)
    if hn == 0.0 or not np.isfinite(hn):
        raise ValueError("heading must be a nonzero finite vector")
    if abs(hn - 1.0) > 1e-9:
        raise ValueError(f"heading must be unit norm, got norm {hn:.6g}")
    position = as_vec3(state[0], "position")
    fwd, left, up = _body_axes(h)
    off = params.mount_offset
    centre = position + off[0] * fwd + off[1] * left + off[2] * up
    n = params.n_virtual
    idx = np.arange(n) - (n - 1) / 2.0
    return centre + np.outer(idx * params.dy, left)


def array_centre(params: RadarParams, position, heading) -> np.ndarray:
    fwd, left, up = _body_axes(heading)
    off = params.mount_offset
    return np.asarray(position, dtype=float) + off[0] * fwd + off[1] * left + off[2] * up


def wavenumber(direction: SphericalDir, lam: float) -> np.ndarray:
    """Two-way wavenumber vector ``(4 pi / lam) * unit line of sight``."""
    if not lam > 0:
        raise ValueError("wavelength must be positive")
    st, ct = np.sin(direction.theta), np.cos(direction.theta)
    sp, cp = np.sin(direction.phi), np.cos(direction.phi)
    k = 4.0 * np.pi / lam
    return k * np.stack(np.broadcast_arrays(st * cp, st * sp, ct), axis=-1)


def wavenumber_dtheta(direction: SphericalDir, lam: float) -> np.ndarray:
    """Derivative of :func:`wavenumber` with respect to ``theta``."""
    if not lam > 0:
        raise ValueError("wavelength must be positive")
    st, ct = np.sin(direction.theta), np.cos(direction.theta)
    sp, cp = np.sin(direction.phi), np.cos(direction.phi)
    k = 4.0 * np.pi / lam
    return k * np.stack(np.broadcast_arrays(ct * cp, ct * sp, -st), axis=-1)


def wavenumber_dphi(direction: SphericalDir, lam: float) -> np.ndarray:
    """Derivative of :func:`wavenumber` with respect to ``phi``."""
    if not lam > 0:
        raise ValueError("wavelength must be positive")
    st = np.sin(direction.theta)
    sp, cp = np.sin(direction.phi), np.cos(direction.phi)
    k = 4.0 * np.pi / lam
    return k * np.stack(np.broadcast_arrays(-st * sp, st * cp, np.zeros_like(st * sp)), axis=-1)


def range_to(apc, pixel) -> float:
    """Euclidean antenna-to-pixel distance."""
    d = np.asarray(pixel, dtype=float) - np.asarray(apc, dtype=float)
    return float(math.sqrt(float(d @ d)))


@dataclass(frozen=True)
class TrajectorySet:
    """True and navigation platform states sampled on the slow-time grid.

    All arrays have ``M`` rows; positions and velocities are ``(M, 3)``.
    ``pri`` is the slow-time step, checked against ``slow_times``.
    """

    slow_times: np.ndarray
    true_pos: np.ndarray
    true_vel: np.ndarray
    nav_pos: np.ndarray
    nav_vel: np.ndarray
    pri: float

    def __post_init__(self):
        t = np.asarray(self.slow_times, dtype=float)
        m = t.shape[0] if t.ndim == 1 else -1
        if t.ndim != 1 or m < 1:
            raise ValueError("slow_times must be a non-empty 1-D array")
        for name in ("true_pos", "true_vel", "nav_pos", "nav_vel"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (m, 3):
                raise ValueError(f"{name} must have shape ({m}, 3), got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "slow_times", t)
        if not self.pri > 0:
            raise ValueError("pri must be positive")
        if m > 1:
            steps = np.diff(t)
            if np.any(steps <= 0):
                raise ValueError("slow_times must be strictly increasing")
            if np.max(np.abs(steps - self.pri)) > 1e-12:
                raise ValueError("slow_times step does not match pri")

    def __len__(self) -> int:
        return self.slow_times.shape[0]

    @property
    def duration(self) -> float:
        """Aperture time ``M * pri``."""
        return len(self) * self.pri

    @property
    def centre_time(self) -> float:
        return 0.5 * (self.slow_times[0] + self.slow_times[-1])

    @classmethod
    def constant_velocity(cls, velocity, n_pulses: int, pri: float, start=(0.0, 0.0, 0.0),
                          t0: float = 0.0) -> "TrajectorySet":
        """Straight-line motion; navigation equals truth."""
        if n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        v = as_vec3(velocity, "velocity")
        p0 = as_vec3(start, "start")
        # integer steps keep the grid exactly uniform
        t = t0 + np.arange(n_pulses) * pri
        pos = p0 + np.outer(t - t0, v)
        vel = np.tile(v, (n_pulses, 1))
        return cls(t, pos, vel, pos.copy(), vel.copy(), pri)

    @classmethod
    def from_waypoints(cls, times: Sequence[float], positions, pri: float, n_pulses: int,
                       t0: Optional[float] = None) -> "TrajectorySet":
        """Piecewise-linear path through ``positions`` at ``times``."""
        times = np.asarray(times, dtype=float)
        pts = np.asarray(positions, dtype=float)
        if times.ndim != 1 or times.size < 2 or pts.shape != (times.size, 3):
            raise ValueError("need >= 2 waypoints with matching (time, xyz) rows")
        if np.any(np.diff(times) <= 0):
            raise ValueError("waypoint times must be strictly increasing")
        t0 = times[0] if t0 is None else t0
        t = t0 + np.arange(n_pulses) * pri
        if t[0] < times[0] or t[-1] > times[-1]:
            raise ValueError("slow-time span exceeds the waypoint time range")
        pos = np.stack([np.interp(t, times, pts[:, i]) for i in range(3)], axis=1)
        seg = np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2)
        seg_vel = np.diff(pts, axis=0) / np.diff(times)[:, None]
        vel = seg_vel[seg]
        return cls(t, pos, vel, pos.copy(), vel.copy(), pri)

    def with_velocity_error(self, delta_v, ref_time: Optional[float] = None) -> "TrajectorySet":
        """Navigation states corrupted by a constant velocity error.

        The navigation position error is ``delta_v * (tau - ref_time)``;
        ``ref_time`` defaults to the first slow time.
        """
        dv = as_vec3(delta_v, "delta_v")
        ref = self.slow_times[0] if ref_time is None else float(ref_time)
        dt = self.slow_times - ref
        return replace(
            self,
            nav_pos=self.true_pos + np.outer(dt, dv),
            nav_vel=self.true_vel + dv,
        )

    def states(self, which: str = "nav") -> Tuple[np.ndarray, np.ndarray]:
        if which == "nav":
            return self.nav_pos, self.nav_vel
        if which == "true":
            return self.true_pos, self.true_vel
        raise ValueError(f"which must be 'nav' or 'true', got {which!r}")

    def headings(self, which: str = "nav") -> np.ndarray:
        _, vel = self.states(which)
        horiz = vel.copy()
        horiz[:, 2] = 0.0
        n = np.linalg.norm(horiz, axis=1)
        if np.any(n == 0):
            raise ValueError("velocity has no horizontal component; heading undefined")
        return horiz / n[:, None]

    def to_dict(self) -> dict:
        return {
            "pri": self.pri,
            "slow_times": self.slow_times.tolist(),
            "true_pos": self.true_pos.tolist(),
            "true_vel": self.true_vel.tolist(),
            "nav_pos": self.nav_pos.tolist(),
            "nav_vel": self.nav_vel.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySet":
        return cls(
            np.asarray(d["slow_times"], float),
            np.asarray(d["true_pos"], float),
            np.asarray(d["true_vel"], float),
            np.asarray(d["nav_pos"], float),
            np.asarray(d["nav_vel"], float),
            float(d["pri"]),
        )


def apc_track(params: RadarParams, traj: TrajectorySet, which: str = "nav",
              headings=None) -> np.ndarray:
    """APC positions for every slow time, shape ``(M, n_virtual, 3)``.

    Headings default to the horizontal direction of the selected velocity.
    A single heading vector is broadcast to all slow times.
    """
    pos, _ = traj.states(which)
    if headings is None:
        hd = traj.headings(which)
    else:
        hd = np.broadcast_to(np.asarray(headings, dtype=float), pos.shape)
    out = np.empty((len(traj), params.n_virtual, 3))
    for m in range(len(traj)):
        out[m] = apc_positions(params, (pos[m], None), hd[m] / np.linalg.norm(hd[m]))
    return out


def aperture_length(traj: TrajectorySet, which: str = "true") -> float:
    """Path length travelled over the aperture, ``sum |v| * pri``."""
    _, vel = traj.states(which)
    return float(np.sum(np.linalg.norm(vel, axis=1)) * traj.pri)
