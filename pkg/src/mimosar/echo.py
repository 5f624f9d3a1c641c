"""
Range-compressed MIMO echo simulation for point scatterers.

The simulator works directly at the range-compressed level: every virtual
channel at every slow time sees, for each target,

    a_k * sinc((r - r_nk) / rho_r) * exp(-j * 4*pi/lam * r_nk)

where ``r_nk`` is the exact APC-to-target distance and ``sinc(u) =
sin(pi u) / (pi u)``.  Chirp duration scaling is normalised away (unit peak
amplitude for a unit reflectivity).  Platform motion inside one PRI is
ignored (stop-and-go).
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import C, RadarParams, TrajectorySet, apc_positions, as_vec3


def range_resolution(params: RadarParams) -> float:
    """``c / (2 B)``."""
    if not params.bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    return C / (2.0 * params.bandwidth)


@dataclass
class Scene:
    """Point scatterers.

    ``positions`` is ``(K, 3)``; ``reflectivity`` is complex ``(K,)``.
    ``offsets`` optionally gives a per-slow-time displacement ``(K, M, 3)``
    used to inject moving objects into autofocus tests.
    """

    positions: np.ndarray
    reflectivity: np.ndarray
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        refl = np.asarray(self.reflectivity, dtype=complex).reshape(-1)
        if refl.shape[0] != pos.shape[0]:
            raise ValueError("positions and reflectivity lengths differ")
        self.positions = pos
        self.reflectivity = refl
        if self.offsets is not None:
            off = np.asarray(self.offsets, dtype=float)
            if off.ndim != 3 or off.shape[0] != pos.shape[0] or off.shape[2] != 3:
                raise ValueError("offsets must have shape (K, M, 3)")
            self.offsets = off

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros(0, complex))

    @classmethod
    def from_targets(cls, targets) -> "Scene":
        """Build from ``[(xyz, reflectivity), ...]``."""
        targets = list(targets)
        if not targets:
            return cls.empty()
        pos = [t[0] for t in targets]
        refl = [t[1] for t in targets]
        return cls(np.asarray(pos, float), np.asarray(refl, complex))

    def to_dict(self) -> dict:
        return {
            "targets": [
                {"position": p.tolist(), "reflectivity": [float(a.real), float(a.imag)]}
                for p, a in zip(self.positions, self.reflectivity)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        items = []
        for t in d["targets"]:
            a = t.get("reflectivity", 1.0)
            if isinstance(a, (list, tuple)):
                a = complex(a[0], a[1])
            items.append((t["position"], a))
        return cls.from_targets(items)


def with_moving_target(scene: Scene, position, velocity, slow_times, reflectivity=1.0) -> Scene:
    """Return a copy of ``scene`` with one extra target moving at ``velocity``.

    Static targets get zero offsets.  This is a test utility, not a model of
    target dynamics.
    """
    t = np.asarray(slow_times, dtype=float)
    m = t.size
    k = len(scene)
    off = np.zeros((k + 1, m, 3))
    if scene.offsets is not None:
        if scene.offsets.shape[1] != m:
            raise ValueError("existing offsets use a different slow-time length")
        off[:k] = scene.offsets
    off[k] = np.outer(t - t[0], np.asarray(velocity, dtype=float))
    return Scene(
        np.vstack([scene.positions, np.asarray(position, float)[None, :]]),
        np.append(scene.reflectivity, complex(reflectivity)),
        off,
    )


@dataclass
class RcCube:
    """Range-compressed data, ``data[range_bin, channel, slow_time]``."""

    range_axis: np.ndarray
    data: np.ndarray
    params: RadarParams
    slow_times: np.ndarray

    def __post_init__(self):
        self.range_axis = np.asarray(self.range_axis, dtype=float)
        self.slow_times = np.asarray(self.slow_times, dtype=float)
        r = self.range_axis
        if r.ndim != 1 or r.size < 2:
            raise ValueError("range_axis needs at least two samples")
        d = np.diff(r)
        if np.any(d <= 0) or np.max(np.abs(d - d[0])) > 1e-12 * max(1.0, abs(r[-1])):
            raise ValueError("range_axis must be uniform and increasing")
        expected = (r.size, self.params.n_virtual, self.slow_times.size)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} != {expected}")

    @property
    def range_spacing(self) -> float:
        return float(self.range_axis[1] - self.range_axis[0])

    @property
    def shape(self):
        return self.data.shape

    def slice(self, m: int) -> "RcCube":
        """Single slow-time cube."""
        return RcCube(self.range_axis, self.data[:, :, m:m + 1], self.params, self.slow_times[m:m + 1])


def default_range_axis(params: RadarParams, oversample: float = 2.0, r_max: Optional[float] = None,
                       margin_cells: int = 8) -> np.ndarray:
    """Uniform range axis from 0 to ``max_range`` at ``rho_r / oversample`` spacing."""
    if oversample < 2:
        raise ValueError("oversample must be >= 2 (spacing <= rho_r/2)")
    rho = range_resolution(params)
    step = rho / oversample
    top = (params.max_range if r_max is None else r_max) + margin_cells * rho
    n = int(np.ceil(top / step)) + 1
    return np.arange(n) * step


def _simulate_column(m, scene, apcs, range_axis, rho, k0, noise_power, seed_seq):
    n = apcs.shape[0]
    out = np.zeros((range_axis.size, n), dtype=complex)
    if len(scene):
        pos = scene.positions
        if scene.offsets is not None:
            pos = pos + scene.offsets[:, m, :]
        # (N, K) exact ranges, no plane-wave approximation
        r = np.linalg.norm(apcs[:, None, :] - pos[None, :, :], axis=2)
        amp = scene.reflectivity[None, :] * np.exp(-1j * k0 * r)
        for k in range(len(scene)):
            env = np.sinc((range_axis[:, None] - r[None, :, k]) / rho)
            out += env * amp[None, :, k]
    if noise_power > 0:
        rng = np.random.default_rng(seed_seq)
        s = np.sqrt(noise_power / 2.0)
        out += s * (rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape))
    return out


def simulate_rc(scene: Scene, traj: TrajectorySet, params: RadarParams, noise_power: float = 0.0,
                seed: Optional[int] = 0, range_axis: Optional[np.ndarray] = None,
                workers: int = 1, heading=None) -> RcCube:
    """Simulate range-compressed data along the TRUE trajectory.

    Parameters
    ----------
    scene : Scene
    traj : TrajectorySet
        Only the true states are used.
    params : RadarParams
        ``params.pri`` must match the trajectory slow-time step.
    noise_power : float
        Power of the circular complex Gaussian noise added to every sample.
    seed : int
        Root seed; slow time ``m`` draws from its own spawned substream, so
        the cube does not depend on ``workers``.
    range_axis : ndarray, optional
        Defaults to :func:`default_range_axis`.
    workers : int
        Thread count for the per-slow-time loop.
    heading : array_like, shape (3,), optional
        Fixed unit heading for every slow time (needed for a static
        platform); defaults to the direction of the true velocity.
    """
    if noise_power < 0:
        raise ValueError("noise_power must be >= 0")
    if abs(traj.pri - params.pri) > 1e-12:
        raise ValueError(f"trajectory pri {traj.pri} does not match radar pri {params.pri}")
    if scene.offsets is not None and scene.offsets.shape[1] != len(traj):
        raise ValueError("scene offsets do not match the trajectory length")
    if range_axis is None:
        range_axis = default_range_axis(params)
    range_axis = np.asarray(range_axis, dtype=float)
    rho = range_resolution(params)
    if range_axis[1] - range_axis[0] > rho / 2 * (1 + 1e-9):
        warnings.warn("range axis spacing exceeds rho_r/2; the sinc envelope is undersampled", stacklevel=2)
    k0 = 4.0 * np.pi / params.wavelength
    m_count = len(traj)

    if len(scene):
        _warn_out_of_range(scene, traj, params)

    if heading is None:
        headings = traj.headings("true")
    else:
        headings = np.broadcast_to(as_vec3(heading, "heading"), (m_count, 3))
    seeds = np.random.SeedSequence(seed).spawn(m_count)

    def column(m):
        apcs = apc_positions(params, (traj.true_pos[m], traj.true_vel[m]), headings[m])
        return _simulate_column(m, scene, apcs, range_axis, rho, k0, noise_power, seeds[m])

    data = np.empty((range_axis.size, params.n_virtual, m_count), dtype=complex)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            for m, col in enumerate(ex.map(column, range(m_count))):
                data[:, :, m] = col
    else:
        for m in range(m_count):
            data[:, :, m] = column(m)
    return RcCube(range_axis, data, params, traj.slow_times.copy())


def _warn_out_of_range(scene, traj, params):
    d = np.linalg.norm(scene.positions[:, None, :] - traj.true_pos[None, :, :], axis=2)
    far = np.min(d, axis=1) > params.max_range
    if np.any(far):
        warnings.warn(f"{int(far.sum())} target(s) beyond max_range from every aperture position", stacklevel=3)
