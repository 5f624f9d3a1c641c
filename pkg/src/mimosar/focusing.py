"""
Time-domain back-projection onto a fixed ground grid.

Every slow time yields a low-resolution MIMO image formed from the ``N``
virtual channels; summing those images coherently gives the SAR image.
All images of a stack share one :class:`ImageGrid`, so they are co-registered
by construction.

Two stack flavours exist with the same interface:

* :class:`ImageStack` keeps every frame in memory.
* :class:`BackprojectedStack` keeps the range-compressed data and the APC
  track instead, and back-projects on demand.  The incoherent mean, phase
  histories at chosen pixels and phase-screened coherent sums are computed
  in streaming passes, which keeps memory at a few images even for large
  grids.  Numbers are identical to the in-memory flavour.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .echo import RcCube
from .geometry import RadarParams, TrajectorySet, apc_positions, apc_track


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Cartesian focusing grid at constant height ``z_plane``.

    ``mask`` (optional, boolean ``(Px, Py)``) restricts which pixels are
    back-projected; masked-out pixels stay zero.
    """

    x_axis: np.ndarray
    y_axis: np.ndarray
    z_plane: float = 0.0
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("x_axis", "y_axis"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1 or a.size < 1:
                raise ValueError(f"{name} must be a non-empty 1-D array")
            if a.size > 1:
                d = np.diff(a)
                if np.any(d <= 0):
                    raise ValueError(f"{name} must be strictly increasing")
                if np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(d[0])):
                    raise ValueError(f"{name} must be uniformly spaced")
            object.__setattr__(self, name, a)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != self.shape:
                raise ValueError(f"mask shape {m.shape} != grid shape {self.shape}")
            object.__setattr__(self, "mask", m)
        object.__setattr__(self, "z_plane", float(self.z_plane))

    @classmethod
    def from_extent(cls, x_min, x_max, y_min, y_max, spacing, z_plane=0.0) -> "ImageGrid":
        """Grid with nodes at ``x_min + i * spacing`` up to ``x_max`` inclusive (within rounding)."""
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        nx = int(math.floor((x_max - x_min) / spacing + 1e-9)) + 1
        ny = int(math.floor((y_max - y_min) / spacing + 1e-9)) + 1
        return cls(x_min + np.arange(nx) * spacing, y_min + np.arange(ny) * spacing, z_plane)

    @classmethod
    def centred(cls, centre, size_x, size_y, spacing, z_plane=0.0) -> "ImageGrid":
        """Patch of ``size_x x size_y`` metres with a node exactly at ``centre``."""
        hx = int(round(size_x / (2 * spacing)))
        hy = int(round(size_y / (2 * spacing)))
        cx, cy = float(centre[0]), float(centre[1])
        return cls(cx + np.arange(-hx, hx + 1) * spacing, cy + np.arange(-hy, hy + 1) * spacing, z_plane)

    @property
    def shape(self):
        return (self.x_axis.size, self.y_axis.size)

    @property
    def dx(self) -> float:
        return float(self.x_axis[1] - self.x_axis[0]) if self.x_axis.size > 1 else 0.0

    @property
    def dy(self) -> float:
        return float(self.y_axis[1] - self.y_axis[0]) if self.y_axis.size > 1 else 0.0

    @property
    def cell(self) -> float:
        """Larger of the two spacings."""
        return max(self.dx, self.dy)

    def with_mask(self, mask) -> "ImageGrid":
        return ImageGrid(self.x_axis, self.y_axis, self.z_plane, mask)

    def active(self) -> np.ndarray:
        """Boolean ``(Px, Py)`` map of the pixels that get back-projected."""
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return self.mask

    def positions(self) -> np.ndarray:
        """All node positions, ``(Px, Py, 3)``."""
        x, y = np.meshgrid(self.x_axis, self.y_axis, indexing="ij")
        return np.stack([x, y, np.full_like(x, self.z_plane)], axis=-1)

    def position(self, i, j) -> np.ndarray:
        return np.array([self.x_axis[i], self.y_axis[j], self.z_plane])

    def active_positions(self) -> np.ndarray:
        """``(P_active, 3)`` positions in x-major order."""
        return self.positions()[self.active()]

    def nearest_index(self, xy):
        """Grid index nearest to a horizontal position."""
        i = int(np.clip(np.rint((xy[0] - self.x_axis[0]) / (self.dx or 1.0)), 0, self.x_axis.size - 1))
        j = int(np.clip(np.rint((xy[1] - self.y_axis[0]) / (self.dy or 1.0)), 0, self.y_axis.size - 1))
        return i, j

    def same_as(self, other: "ImageGrid") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.x_axis, other.x_axis)
            and np.array_equal(self.y_axis, other.y_axis)
            and self.z_plane == other.z_plane
        )


def default_grid(params: RadarParams, spacing: Optional[float] = None) -> ImageGrid:
    """Forward-looking field of view: x in [2, max_range], |y| <= max_range / 2, ground plane."""
    step = params.range_resolution / 2 if spacing is None else spacing
    half = params.max_range / 2
    return ImageGrid.from_extent(2.0, params.max_range, -half, half, step, 0.0)


def annulus_mask(grid: ImageGrid, origin, r_min: float, r_max: float, max_abs_phi=None) -> np.ndarray:
    """Boolean mask of grid nodes with horizontal range in ``[r_min, r_max]`` of ``origin``."""
    pos = grid.positions()
    d = pos[..., :2] - np.asarray(origin, float)[:2]
    r = np.hypot(d[..., 0], d[..., 1])
    m = (r >= r_min) & (r <= r_max)
    if max_abs_phi is not None:
        m &= np.abs(np.arctan2(d[..., 1], d[..., 0])) <= max_abs_phi
    return m


@dataclass
class ComplexImage:
    grid: ImageGrid
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != self.grid.shape:
            raise ValueError(f"pixel array {self.pixels.shape} does not match grid {self.grid.shape}")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.pixels)

    def peak_index(self):
        return np.unravel_index(int(np.argmax(np.abs(self.pixels))), self.pixels.shape)

    def peak_position(self) -> np.ndarray:
        return self.grid.position(*self.peak_index())

    def peak_value(self) -> complex:
        return complex(self.pixels[self.peak_index()])


def interp_rc(column, range_axis, r_query):
    """Linear interpolation of a range-compressed column.

    Real and imaginary parts are interpolated separately; queries outside the
    axis return 0.  ``r_query`` may be a scalar or an array.
    """
    column = np.asarray(column)
    range_axis = np.asarray(range_axis, dtype=float)
    rq = np.asarray(r_query, dtype=float)
    re = np.interp(rq, range_axis, column.real, left=0.0, right=0.0)
    im = np.interp(rq, range_axis, column.imag, left=0.0, right=0.0)
    out = re + 1j * im
    if out.ndim == 0:
        return complex(out)
    return out


def _check_cube(cube: RcCube):
    if not np.all(np.isfinite(cube.data)):
        raise ValueError("range-compressed data contains NaN or infinite samples")


def _set_workers(workers: Optional[int]):
    if workers is None or not _kernels.have_numba():
        return
    import numba

    numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))


def _wavenumber(params: RadarParams) -> float:
    return 4.0 * math.pi / params.wavelength


def focus_mimo_single(cube_slice: RcCube, nav_state, params: RadarParams, grid: ImageGrid,
                      heading=None, use_numba: bool = True) -> ComplexImage:
    """Low-resolution MIMO image from one slow time.

    Parameters
    ----------
    cube_slice : RcCube
        Cube with a single slow time (see :meth:`RcCube.slice`).
    nav_state : (position, velocity)
        Platform state used to place the APCs.  Navigation errors enter here.
    heading : array_like, optional
        Unit heading; defaults to the horizontal direction of the velocity.
    """
    if cube_slice.data.shape[2] != 1:
        raise ValueError("focus_mimo_single expects a single slow-time cube")
    _check_cube(cube_slice)
    pos, vel = nav_state
    if heading is None:
        v = np.array([vel[0], vel[1], 0.0], dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0:
            raise ValueError("velocity has no horizontal component; pass heading explicitly")
        heading = v / nv
    apcs = apc_positions(params, (pos, vel), heading)[None]
    prepared = _kernels.PreparedCube(cube_slice.data, cube_slice.range_axis[0], cube_slice.range_spacing,
                                     _wavenumber(params))
    active = grid.active()
    flat = _kernels.bp_stack(prepared, apcs, grid.positions()[active], use_numba=use_numba)[0]
    pixels = np.zeros(grid.shape, dtype=np.complex128)
    pixels[active] = flat
    return ComplexImage(grid, pixels)


class _StackBase:
    grid: ImageGrid
    slow_times: np.ndarray
    aperture_centre: np.ndarray

    def __len__(self):
        return self.slow_times.size

    @property
    def reference_time(self) -> float:
        """Middle of the slow-time span."""
        return 0.5 * float(self.slow_times[0] + self.slow_times[-1])

    @property
    def duration(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(self.slow_times[1] - self.slow_times[0]) * len(self)

    def frame(self, m: int) -> ComplexImage:
        raise NotImplementedError

    def histories(self, indices) -> np.ndarray:
        """Complex values at the given ``(i, j)`` pixels over slow time, ``(K, M)``."""
        raise NotImplementedError

    def incoherent_mean(self) -> np.ndarray:
        raise NotImplementedError

    def screened_sum(self, rate: Optional[np.ndarray], ref_time: Optional[float] = None,
                     curvature: Optional[np.ndarray] = None) -> ComplexImage:
        """``sum_m I_m * exp(j * (rate + curvature * dt_m) * dt_m)``, ``dt_m = tau_m - ref_time``.

        ``rate`` is a ``(Px, Py)`` phase-rate image in rad/s, or ``None`` for
        the plain coherent sum; ``curvature`` an optional quadratic
        coefficient image in rad/s^2.
        """
        raise NotImplementedError


class ImageStack(_StackBase):
    """In-memory stack, ``data[m, i, j]``.

    Parameters
    ----------
    grid : ImageGrid
    data : ndarray, shape (M, Px, Py)
    slow_times : ndarray, shape (M,)
    aperture_centre : array_like, shape (3,), optional
        Mean APC position over the aperture; used to derive pixel directions.
    platform_velocity : array_like, shape (3,), optional
        Mean APC velocity over the aperture, when known.
    """

    def __init__(self, grid: ImageGrid, data, slow_times, aperture_centre=None, platform_velocity=None):
        data = np.asarray(data)
        slow_times = np.asarray(slow_times, dtype=float).reshape(-1)
        if data.ndim != 3 or data.shape[1:] != grid.shape:
            raise ValueError(f"stack data {data.shape} does not match grid {grid.shape}")
        if data.shape[0] != slow_times.size or slow_times.size == 0:
            raise ValueError("stack needs one slow time per frame and at least one frame")
        self.grid = grid
        self.data = data
        self.slow_times = slow_times
        self.aperture_centre = np.zeros(3) if aperture_centre is None else np.asarray(aperture_centre, float)
        self.platform_velocity = None if platform_velocity is None else np.asarray(platform_velocity, float)

    @classmethod
    def from_images(cls, images: Sequence[ComplexImage], slow_times, aperture_centre=None) -> "ImageStack":
        images = list(images)
        if not images:
            raise ValueError("empty image list")
        grid = images[0].grid
        for im in images[1:]:
            if not (im.grid is grid or im.grid.same_as(grid)):
                raise ValueError("all images in a stack must share one grid")
        return cls(grid, np.stack([im.pixels for im in images]), slow_times, aperture_centre)

    def frame(self, m: int) -> ComplexImage:
        return ComplexImage(self.grid, self.data[m])

    def histories(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=int).reshape(-1, 2)
        return np.ascontiguousarray(self.data[:, idx[:, 0], idx[:, 1]].T)

    def incoherent_mean(self) -> np.ndarray:
        acc = np.zeros(self.grid.shape)
        for m in range(len(self)):
            f = self.data[m]
            # same operation order as the streaming kernel
            acc += np.sqrt(f.real * f.real + f.imag * f.imag)
        return acc / len(self)

    def screened_sum(self, rate=None, ref_time=None, curvature=None) -> ComplexImage:
        ref = self.reference_time if ref_time is None else float(ref_time)
        acc = np.zeros(self.grid.shape, dtype=np.complex128)
        curv = 0.0 if curvature is None else np.asarray(curvature, dtype=float)
        for m in range(len(self)):
            if rate is None:
                acc += self.data[m]
            else:
                dt = self.slow_times[m] - ref
                ph = (rate + curv * dt) * dt
                acc += self.data[m] * (np.cos(ph) + 1j * np.sin(ph))
        return ComplexImage(self.grid, acc)

    def map_frames(self, fn) -> "ImageStack":
        """New stack with ``fn(m, frame_pixels)`` applied to every frame."""
        out = np.empty_like(self.data)
        for m in range(len(self)):
            out[m] = fn(m, self.data[m])
        return ImageStack(self.grid, out, self.slow_times, self.aperture_centre, self.platform_velocity)


class BackprojectedStack(_StackBase):
    """Stack whose frames are back-projected on demand.

    Built by :func:`focus_stack` with ``lazy=True``.  The first call to
    :meth:`incoherent_mean` (or a plain :meth:`screened_sum`) runs one
    streaming pass that caches both results.
    """

    def __init__(self, grid: ImageGrid, prepared: "_kernels.PreparedCube", apcs: np.ndarray,
                 slow_times, use_numba: bool = True):
        self.grid = grid
        self.prepared = prepared
        self.apcs = np.ascontiguousarray(apcs, dtype=float)
        self.slow_times = np.asarray(slow_times, dtype=float)
        self.aperture_centre = self.apcs.reshape(-1, 3).mean(axis=0)
        self.platform_velocity = None
        if self.slow_times.size >= 2:
            track = self.apcs.reshape(self.slow_times.size, -1, 3).mean(axis=1)
            self.platform_velocity = np.polyfit(self.slow_times - self.slow_times[0], track, 1)[0]
        self.use_numba = use_numba
        self._mean = None
        self._sum = None

    def _pass(self, rate_flat=None, ref_time=None, curv_flat=None):
        active = self.grid.active()
        pix = self.grid.positions()[active]
        dt = None
        if rate_flat is not None:
            ref = self.reference_time if ref_time is None else float(ref_time)
            dt = self.slow_times - ref
        mean, acc = _kernels.accumulate(self.prepared, self.apcs, pix, rate_flat, dt, use_numba=self.use_numba,
                                        curv=curv_flat)
        mean_img = np.zeros(self.grid.shape)
        sum_img = np.zeros(self.grid.shape, dtype=np.complex128)
        mean_img[active] = mean
        sum_img[active] = acc
        return mean_img, sum_img

    def frame(self, m: int) -> ComplexImage:
        active = self.grid.active()
        sub = _kernels.PreparedCube(self.prepared.rc[:, :, m:m + 1], self.prepared.r0, self.prepared.dr,
                                    self.prepared.k0)
        flat = _kernels.bp_stack(sub, self.apcs[m:m + 1], self.grid.positions()[active], use_numba=self.use_numba)[0]
        px = np.zeros(self.grid.shape, dtype=np.complex128)
        px[active] = flat
        return ComplexImage(self.grid, px)

    def histories(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=int).reshape(-1, 2)
        pos = self.grid.positions()[idx[:, 0], idx[:, 1]]
        return _kernels.bp_stack(self.prepared, self.apcs, pos, use_numba=self.use_numba).T.copy()

    def incoherent_mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean, self._sum = self._pass()
        return self._mean

    def screened_sum(self, rate=None, ref_time=None, curvature=None) -> ComplexImage:
        if rate is None:
            if self._sum is None:
                self._mean, self._sum = self._pass()
            return ComplexImage(self.grid, self._sum)
        rate = np.asarray(rate, dtype=float)
        if rate.shape != self.grid.shape:
            raise ValueError("rate image does not match grid")
        active = self.grid.active()
        curv = None
        if curvature is not None:
            curv = np.asarray(curvature, dtype=float)
            if curv.shape != self.grid.shape:
                raise ValueError("curvature image does not match grid")
            curv = curv[active]
        _, acc = self._pass(rate[active], ref_time, curv)
        return ComplexImage(self.grid, acc)

    def prime(self, mean: np.ndarray, total: Optional[np.ndarray] = None) -> "BackprojectedStack":
        """Install a previously computed incoherent mean (and plain sum) to skip the streaming pass."""
        mean = np.asarray(mean, dtype=float)
        if mean.shape != self.grid.shape:
            raise ValueError("cached mean does not match grid")
        self._mean = mean
        if total is not None:
            total = np.asarray(total, dtype=np.complex128)
            if total.shape != self.grid.shape:
                raise ValueError("cached sum does not match grid")
            self._sum = total
        return self

    def materialize(self) -> ImageStack:
        """Back-project every frame into an in-memory :class:`ImageStack`."""
        active = self.grid.active()
        flat = _kernels.bp_stack(self.prepared, self.apcs, self.grid.positions()[active], use_numba=self.use_numba)
        data = np.zeros((len(self),) + self.grid.shape, dtype=np.complex128)
        data[:, active] = flat
        return ImageStack(self.grid, data, self.slow_times, self.aperture_centre, self.platform_velocity)


def focus_stack(cube: RcCube, traj: TrajectorySet, params: RadarParams, grid: ImageGrid,
                which: str = "nav", workers: Optional[int] = None, lazy: bool = False,
                use_numba: bool = True, heading=None):
    """Back-project every slow time of ``cube`` onto ``grid``.

    Parameters
    ----------
    which : {'nav', 'true'}
        Trajectory states used to place the APCs.  ``'true'`` is the oracle
        mode used for error-free references.
    workers : int, optional
        Numba thread count.  Output does not depend on it.
    lazy : bool
        Return a :class:`BackprojectedStack` instead of materialising frames.
    heading : array_like, shape (3,), optional
        Fixed unit heading for every slow time instead of the velocity direction.
    """
    if len(traj) != cube.data.shape[2]:
        raise ValueError(f"trajectory has {len(traj)} states but cube has {cube.data.shape[2]} slow times")
    if cube.data.shape[1] != params.n_virtual:
        raise ValueError("cube channel count does not match params.n_virtual")
    _check_cube(cube)
    _set_workers(workers)
    apcs = apc_track(params, traj, which, headings=heading)
    prepared = _kernels.PreparedCube(cube.data, cube.range_axis[0], cube.range_spacing, _wavenumber(params))
    stack = BackprojectedStack(grid, prepared, apcs, cube.slow_times, use_numba=use_numba)
    return stack if lazy else stack.materialize()


def coherent_sum(stack) -> ComplexImage:
    """Pixelwise complex sum over slow time (sequential, complex128)."""
    if len(stack) == 0:
        raise ValueError("empty stack")
    return stack.screened_sum(None)


def mimo_angular_resolution(lam: float, n: int, dy: float, phi: float = 0.0) -> float:
    """``lam / (2 N dy cos(phi))``; ``inf`` with a warning at endfire."""
    c = math.cos(phi)
    if abs(c) < 1e-12:
        warnings.warn("cos(phi) = 0: MIMO angular resolution is unbounded", RuntimeWarning, stacklevel=2)
        return math.inf
    return lam / (2.0 * n * dy * abs(c))


def sar_angular_resolution(lam: float, aperture_len: float, phi: float) -> float:
    """``lam / (2 A_s sin(phi))``; ``inf`` with a warning along the track."""
    s = math.sin(phi)
    if abs(s) < 1e-12 or aperture_len <= 0:
        warnings.warn("sin(phi) = 0 or empty aperture: SAR angular resolution is unbounded",
                      RuntimeWarning, stacklevel=2)
        return math.inf
    return lam / (2.0 * aperture_len * abs(s))


def cross_range_resolution(r: float, angular_resolution: float) -> float:
    return r * angular_resolution
