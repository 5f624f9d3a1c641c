"""
Residual velocity estimation from a stack of low-resolution images.

A constant navigation velocity error ``dv`` leaves, at every bright static
scatterer, a residual phase that grows linearly over slow time at the rate
``k(x) . dv``, where ``k(x)`` is the two-way wavenumber vector toward the
pixel.  The chain implemented here:

1. incoherent mean of the stack and selection of bright isolated maxima
   (ground control points, GCPs);
2. per-GCP phase history and its dominant frequency (zero-padded FFT of the
   unit phasor, parabolic peak refinement);
3. rejection of GCPs whose Doppler is implausible for the declared
   navigation accuracy (e.g. moving objects);
4. weighted least squares for ``dv`` with a residual-based covariance.

Sign convention: the image phase of a static scatterer after
back-projection with the navigation track is ``-(k . dv) tau``.  The phase
history stored on a :class:`Gcp` is the residual path phase, i.e. the
negated image phase, so that its slope equals ``+k . dv`` and the solved
velocity is the navigation error itself (navigation minus truth).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import IllConditionedGeometryError, InsufficientGcpError
from .geometry import SphericalDir, wavenumber, wavenumber_dphi, wavenumber_dtheta

MIN_GCPS = 3
CONDITION_LIMIT = 1e8


@dataclass
class Gcp:
    """A selected ground control point."""

    pixel_index: tuple
    position: np.ndarray
    direction: SphericalDir
    amplitude: float
    phase_history: np.ndarray
    weight: float = 1.0
    threshold: float = 0.0

    def __post_init__(self):
        if self.amplitude < self.threshold:
            raise ValueError("GCP amplitude below the selection threshold")
        if self.weight < 0:
            raise ValueError("GCP weight must be >= 0")


@dataclass
class DopplerEstimate:
    gcp: Gcp
    omega: float
    spectrum_peak: float
    prominence: float
    spectrum: Optional[np.ndarray] = field(default=None, repr=False)
    frequencies: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class VelocityEstimate:
    """WLS solution.

    ``delta_v`` is always a 3-vector; when the vertical component is not
    estimated it is 0 and ``covariance`` is 2 x 2 over (x, y).
    """

    delta_v: np.ndarray
    covariance: np.ndarray
    n_gcps_used: int
    residual_rms: float
    sigma2: float
    condition_number: float
    estimate_vz: bool = False

    @property
    def sigma(self) -> np.ndarray:
        """Standard deviations for (x, y[, z])."""
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "delta_v": [float(v) for v in self.delta_v],
            "covariance": np.asarray(self.covariance).tolist(),
            "sigma": self.sigma.tolist(),
            "n_gcps_used": int(self.n_gcps_used),
            "residual_rms": float(self.residual_rms),
            "sigma2": float(self.sigma2),
            "condition_number": float(self.condition_number),
            "estimate_vz": bool(self.estimate_vz),
        }


@dataclass(frozen=True)
class AutofocusSettings:
    max_gcps: int = 30
    threshold_quantile: float = 0.99
    # a point response in the incoherent mean is a ~1 m long arc at 2.5 cm
    # cells; 40 cells keeps one GCP per scatterer
    min_separation_cells: float = 40.0
    zero_pad_factor: int = 8
    nav_accuracy: float = 0.2
    kappa: float = 1.5
    estimate_vz: bool = False
    weight_mode: str = "amplitude"

    def __post_init__(self):
        if self.max_gcps < MIN_GCPS:
            raise ValueError(f"max_gcps must be >= {MIN_GCPS}")
        if not 0.0 <= self.threshold_quantile < 1.0:
            raise ValueError("threshold_quantile must lie in [0, 1)")
        if self.min_separation_cells < 0:
            raise ValueError("min_separation_cells must be >= 0")
        if self.zero_pad_factor < 1:
            raise ValueError("zero_pad_factor must be >= 1")
        if not self.nav_accuracy > 0:
            raise ValueError("nav_accuracy must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.weight_mode not in ("amplitude", "prominence", "uniform"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


def incoherent_mean(stack) -> np.ndarray:
    """Pixelwise mean of ``|I_m|`` over the stack."""
    if len(stack) == 0:
        raise ValueError("empty stack")
    return stack.incoherent_mean()


def residual_phase(history) -> np.ndarray:
    """Unwrapped residual path phase from complex pixel values over slow time."""
    h = np.asarray(history)
    return np.unwrap(np.angle(np.conj(h)))


def _dominates(img, idx, radius: float) -> bool:
    """True if no pixel within ``radius`` cells of ``idx`` is brighter."""
    r = int(math.floor(radius))
    i, j = int(idx[0]), int(idx[1])
    i0, i1 = max(i - r, 0), min(i + r + 1, img.shape[0])
    j0, j1 = max(j - r, 0), min(j + r + 1, img.shape[1])
    di = np.arange(i0, i1)[:, None] - i
    dj = np.arange(j0, j1)[None, :] - j
    win = np.where(di * di + dj * dj <= radius * radius, img[i0:i1, j0:j1], -np.inf)
    return bool(win.max() <= img[i, j])


def select_gcps(mean_img, stack, max_count: int = 30, min_separation_cells: float = 40.0,
                threshold_quantile: float = 0.99) -> List[Gcp]:
    """Pick bright, isolated local maxima of the incoherent mean.

    Candidates are 8-neighbourhood local maxima strictly above the
    ``threshold_quantile`` of the (active) mean image.  They are taken in
    descending amplitude, skipping any closer than ``min_separation_cells``
    (Euclidean, in grid cells) to one already chosen, and any with a
    brighter pixel within that radius.  The second rule drops points on the
    long arc a single scatterer leaves in the mean image.

    Raises
    ------
    InsufficientGcpError
        Fewer than three points survive.
    """
    if max_count < MIN_GCPS:
        raise ValueError(f"max_count must be >= {MIN_GCPS}")
    img = np.asarray(mean_img, dtype=float)
    grid = stack.grid
    if img.shape != grid.shape:
        raise ValueError("mean image does not match the stack grid")
    active = grid.active()
    values = img[active]
    if values.size == 0:
        raise InsufficientGcpError("no active pixels")
    threshold = float(np.quantile(values, threshold_quantile))
    masked = np.where(active, img, -np.inf)
    peaks = (img == ndimage.maximum_filter(masked, size=3, mode="constant", cval=-np.inf))
    peaks &= (img > threshold) & active
    ii, jj = np.nonzero(peaks)
    order = np.argsort(-img[ii, jj], kind="stable")
    chosen = []
    for o in order:
        cand = np.array([ii[o], jj[o]])
        if any(np.hypot(*(cand - c)) < min_separation_cells for c in chosen):
            continue
        if not _dominates(masked, cand, min_separation_cells):
            continue
        chosen.append(cand)
        if len(chosen) == max_count:
            break
    if len(chosen) < MIN_GCPS:
        raise InsufficientGcpError(
            f"found {len(chosen)} GCP candidate(s) above the {threshold_quantile:.3g} quantile; need {MIN_GCPS}")
    idx = np.array(chosen)
    hist = stack.histories(idx)
    gcps = []
    for (i, j), h in zip(idx, hist):
        pos = grid.position(i, j)
        amp = float(img[i, j])
        gcps.append(Gcp(
            pixel_index=(int(i), int(j)),
            position=pos,
            direction=SphericalDir.from_cartesian(pos, origin=stack.aperture_centre),
            amplitude=amp,
            phase_history=residual_phase(h),
            weight=amp,
            threshold=threshold,
        ))
    return gcps


def estimate_doppler(gcp: Gcp, slow_times, zero_pad_factor: int = 8, keep_spectrum: bool = False) -> DopplerEstimate:
    """Dominant angular frequency of ``exp(j * phase_history)``.

    The peak of the zero-padded spectrum is refined by a parabola through
    the log-magnitudes of the peak bin and its two neighbours.  The result
    lies in ``[-pi/PRI, pi/PRI)``.
    """
    phase = np.asarray(gcp.phase_history, dtype=float)
    t = np.asarray(slow_times, dtype=float)
    m = phase.size
    if m < 8:
        raise ValueError("need at least 8 slow-time samples")
    if t.size != m:
        raise ValueError("phase history and slow times differ in length")
    if zero_pad_factor < 1:
        raise ValueError("zero_pad_factor must be >= 1")
    if not np.all(np.isfinite(phase)):
        raise ValueError("phase history contains NaN")
    pri = float(t[1] - t[0])
    nfft = int(zero_pad_factor) * m
    spec = np.abs(np.fft.fft(np.exp(1j * phase), nfft))
    k = int(np.argmax(spec))
    peak = float(spec[k])
    lo, mid, hi = spec[(k - 1) % nfft], spec[k], spec[(k + 1) % nfft]
    tiny = np.finfo(float).tiny
    a, b, c = np.log(max(lo, tiny)), np.log(max(mid, tiny)), np.log(max(hi, tiny))
    den = a - 2.0 * b + c
    delta = 0.5 * (a - c) / den if den < 0 else 0.0
    delta = float(np.clip(delta, -0.5, 0.5))
    f = (k + delta) / (nfft * pri)
    fs = 1.0 / pri
    f = (f + fs / 2) % fs - fs / 2
    med = float(np.median(spec))
    prominence = peak / med if med > 0 else math.inf
    est = DopplerEstimate(gcp, 2.0 * math.pi * f, peak / m, prominence)
    if keep_spectrum:
        est.spectrum = spec / m
        est.frequencies = np.fft.fftfreq(nfft, d=pri)
    return est


def doppler_bin_velocity(lam: float, n_slow: int, pri: float, zero_pad_factor: int) -> float:
    """Velocity equivalent of one zero-padded frequency bin, ``lam / (2 Z M PRI)``."""
    return lam / (2.0 * zero_pad_factor * n_slow * pri)


def reject_outliers(estimates: Sequence[DopplerEstimate], nav_accuracy: float, lam: float,
                    kappa: float = 1.5, return_mask: bool = False):
    """Drop estimates with ``|omega| > kappa * (4 pi / lam) * nav_accuracy``."""
    if not nav_accuracy > 0:
        raise ValueError("nav_accuracy must be positive")
    limit = kappa * 4.0 * math.pi / lam * nav_accuracy
    mask = np.array([abs(e.omega) <= limit for e in estimates], dtype=bool)
    kept = [e for e, k in zip(estimates, mask) if k]
    if len(kept) < MIN_GCPS:
        raise InsufficientGcpError(f"only {len(kept)} GCP(s) left after outlier rejection (limit {limit:.4g} rad/s)")
    return (kept, mask) if return_mask else kept


def _weights(estimates, weight_mode):
    if weight_mode == "amplitude":
        w = np.array([e.gcp.weight for e in estimates], dtype=float)
    elif weight_mode == "prominence":
        w = np.array([e.prominence for e in estimates], dtype=float)
    elif weight_mode == "uniform":
        w = np.ones(len(estimates))
    else:
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    return w


def _collinearity_hint(directions: SphericalDir) -> str:
    phi = np.atleast_1d(directions.phi)
    theta = np.atleast_1d(directions.theta)
    deg = np.degrees
    return (f"GCP azimuths span {deg(phi.min()):.1f} to {deg(phi.max()):.1f} deg "
            f"(all GCPs near phi={deg(np.median(phi)):.1f} deg?), elevations "
            f"{deg(theta.min()):.1f} to {deg(theta.max()):.1f} deg")


def solve_wls(estimates: Sequence[DopplerEstimate], lam: float, estimate_vz: bool = False,
              weight_mode: str = "amplitude", weights=None, components=None) -> VelocityEstimate:
    """Weighted least squares for the constant velocity error.

    Rows of the design matrix are the wavenumber vectors of the GCPs (z
    column dropped unless ``estimate_vz``).  Weights are rescaled to unit
    mean, so multiplying them by a constant does not change the result.
    ``covariance = (K^T W K)^-1 * sigma2`` with ``sigma2`` the weighted
    residual sum of squares over ``P - dof``.

    ``components`` optionally restricts the fit to a subset of the axes
    (indices into x, y[, z]); the others are held at zero and get zero
    rows and columns in the covariance.

    Raises
    ------
    InsufficientGcpError
        Fewer estimates than unknowns.
    IllConditionedGeometryError
        Condition number of ``K^T W K`` above 1e8.
    """
    n_axes = 3 if estimate_vz else 2
    cols = np.arange(n_axes) if components is None else np.unique(np.asarray(components, dtype=int))
    if cols.size == 0 or cols.min() < 0 or cols.max() >= n_axes:
        raise ValueError(f"components must index the {n_axes} estimated axes")
    dof = cols.size
    p = len(estimates)
    if p < dof:
        raise InsufficientGcpError(f"{p} estimate(s) for {dof} unknowns")
    w = _weights(estimates, weight_mode) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (p,) or np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, >= 0 and not all zero")
    w = w / w.mean()
    dirs = SphericalDir(
        np.array([e.gcp.direction.r for e in estimates], dtype=float),
        np.array([e.gcp.direction.theta for e in estimates], dtype=float),
        np.array([e.gcp.direction.phi for e in estimates], dtype=float),
    )
    k_full = wavenumber(dirs, lam)
    k_mat = k_full[:, cols]
    omega = np.array([e.omega for e in estimates], dtype=float)
    normal = k_mat.T @ (w[:, None] * k_mat)
    cond = float(np.linalg.cond(normal))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedGeometryError(
            f"normal matrix condition number {cond:.3g} exceeds {CONDITION_LIMIT:.0e}; " + _collinearity_hint(dirs),
            condition_number=cond,
        )
    normal_inv = np.linalg.inv(normal)
    normal_inv = 0.5 * (normal_inv + normal_inv.T)
    sol = normal_inv @ (k_mat.T @ (w * omega))
    resid = omega - k_mat @ sol
    if p > dof:
        sigma2 = float(np.sum(w * resid ** 2) / (p - dof))
    else:
        sigma2 = math.nan
    dv = np.zeros(3)
    dv[cols] = sol
    cov = np.zeros((n_axes, n_axes))
    cov[np.ix_(cols, cols)] = normal_inv * sigma2
    return VelocityEstimate(
        delta_v=dv,
        covariance=cov,
        n_gcps_used=p,
        residual_rms=float(np.sqrt(np.mean(resid ** 2))),
        sigma2=sigma2,
        condition_number=cond,
        estimate_vz=estimate_vz,
    )


@dataclass
class AutofocusResult:
    estimate: VelocityEstimate
    gcps: List[Gcp]
    dopplers: List[DopplerEstimate]
    kept: np.ndarray
    mean_image: np.ndarray

    def report(self, lam: float) -> dict:
        return autofocus_report(self.dopplers, self.kept, self.estimate, lam)


def estimate_velocity_error(stack, lam: float, settings: AutofocusSettings = AutofocusSettings()) -> AutofocusResult:
    """Run GCP selection, Doppler estimation, outlier rejection and WLS."""
    mean = incoherent_mean(stack)
    gcps = select_gcps(mean, stack, settings.max_gcps, settings.min_separation_cells, settings.threshold_quantile)
    dopplers = [estimate_doppler(g, stack.slow_times, settings.zero_pad_factor, keep_spectrum=True) for g in gcps]
    kept, mask = reject_outliers(dopplers, settings.nav_accuracy, lam, settings.kappa, return_mask=True)
    est = solve_wls(kept, lam, settings.estimate_vz, settings.weight_mode)
    return AutofocusResult(est, gcps, dopplers, mask, mean)


def autofocus_report(dopplers: Sequence[DopplerEstimate], kept, estimate: Optional[VelocityEstimate],
                     lam: float) -> dict:
    """JSON-ready summary: per-GCP Doppler and the WLS solution."""
    rows = []
    for d, k in zip(dopplers, kept):
        g = d.gcp
        rows.append({
            "pixel": list(g.pixel_index),
            "position": [float(v) for v in g.position],
            "direction": {"r": float(g.direction.r), "theta": float(g.direction.theta),
                          "phi": float(g.direction.phi)},
            "amplitude": float(g.amplitude),
            "omega": float(d.omega),
            "radial_velocity": float(d.omega * lam / (4.0 * math.pi)),
            "prominence": float(d.prominence),
            "kept": bool(k),
        })
    out = {"gcps": rows, "n_gcps": len(rows), "n_kept": int(np.sum(kept))}
    if estimate is not None:
        out.update(estimate.to_dict())
    return out


# -- error budgets -----------------------------------------------------------

def max_radial_velocity_error(lam: float, aperture_time: float) -> float:
    """Largest radial velocity error that keeps the residual phase below pi: ``lam / (2 T)``."""
    if not aperture_time > 0:
        raise ValueError("aperture_time must be positive")
    return lam / (2.0 * aperture_time)


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den == 0.0, np.inf, num / np.where(den == 0.0, 1.0, den))
    return out if out.ndim else float(out)


def max_height_error(pixel_dir: SphericalDir, v, lam: float, aperture_time: float):
    """Tolerable focusing-height error, ``dv_r_max (4 pi/lam) r sin(theta) / |k'_theta . v|``.

    Broadcasts over array-valued directions.  Returns ``inf`` where the
    height derivative of the Doppler vanishes.
    """
    dvr = max_radial_velocity_error(lam, aperture_time)
    kt = wavenumber_dtheta(pixel_dir, lam)
    rate = np.abs(kt @ np.asarray(v, dtype=float))
    num = dvr * (4.0 * math.pi / lam) * np.asarray(pixel_dir.r) * np.sin(pixel_dir.theta)
    # treat floating-point residue as an exact zero
    rate = np.where(rate <= 1e-12 * (4.0 * math.pi / lam) * max(np.linalg.norm(v), 1e-300), 0.0, rate)
    return _safe_ratio(num, rate)


def perpendicular_velocity(pixel_dir: SphericalDir, v, lam: float):
    """``|k'_phi . v| * lam / (4 pi)``."""
    kp = wavenumber_dphi(pixel_dir, lam)
    return np.abs(kp @ np.asarray(v, dtype=float)) * lam / (4.0 * math.pi)


def max_angular_error(pixel_dir: SphericalDir, v, lam: float, aperture_time: float):
    """Tolerable azimuth error ``dv_r_max / v_perp``; ``inf`` when ``v_perp`` is 0."""
    dvr = max_radial_velocity_error(lam, aperture_time)
    vp = perpendicular_velocity(pixel_dir, v, lam)
    vp = np.where(vp <= 1e-12 * max(np.linalg.norm(v), 1e-300), 0.0, vp)
    return _safe_ratio(dvr, vp)


# -- iterative refinement ----------------------------------------------------------

def _window_mask(shape, centres, radius: int) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for i, j in centres:
        mask[max(i - radius, 0):i + radius + 1, max(j - radius, 0):j + radius + 1] = True
    return mask


def track_gcps(stack, previous: Sequence[Gcp], radius_cells: int) -> List[Gcp]:
    """Re-locate each GCP at the incoherent-mean maximum within a square window.

    ``stack`` is usually focused on a grid masked to the windows (see
    :func:`iterative_autofocus`).  Tracked points are not re-thresholded.
    """
    mean = stack.incoherent_mean()
    grid = stack.grid
    nx, ny = grid.shape
    picks = []
    for g in previous:
        i0, j0 = g.pixel_index
        ia, ib = max(i0 - radius_cells, 0), min(i0 + radius_cells + 1, nx)
        ja, jb = max(j0 - radius_cells, 0), min(j0 + radius_cells + 1, ny)
        win = mean[ia:ib, ja:jb]
        di, dj = np.unravel_index(int(np.argmax(win)), win.shape)
        picks.append((ia + int(di), ja + int(dj)))
    hist = stack.histories(np.array(picks))
    out = []
    for (i, j), h in zip(picks, hist):
        pos = grid.position(i, j)
        amp = float(mean[i, j])
        out.append(Gcp((i, j), pos, SphericalDir.from_cartesian(pos, origin=stack.aperture_centre), amp,
                       residual_phase(h), weight=amp, threshold=0.0))
    return out


@dataclass
class IterativeResult:
    """Outcome of :func:`iterative_autofocus`.

    ``estimate.delta_v`` is the accumulated correction.  Each axis keeps
    the variance of the last pass that updated it; correlations come from
    the last pass that updated both axes of a pair (zero if none did).
    ``frozen_at[i]`` is 0 if axis ``i`` was held after the first pass.
    """

    estimate: VelocityEstimate
    passes: List[AutofocusResult]
    increments: List[np.ndarray]
    first_pass: VelocityEstimate
    frozen_at: List[Optional[int]] = field(default_factory=list)

    @property
    def converged_in(self) -> int:
        return len(self.passes)


def _combine_covariance(passes: Sequence[AutofocusResult], updated: Sequence[np.ndarray]) -> np.ndarray:
    n = passes[0].estimate.covariance.shape[0]
    cov = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            for res, act in zip(reversed(passes), reversed(updated)):
                if act[i] and act[j]:
                    c = res.estimate.covariance
                    if i == j:
                        cov[i, i] = c[i, i]
                    else:
                        # last joint correlation, rescaled to the per-axis variances set above
                        den = math.sqrt(c[i, i] * c[j, j])
                        rho = c[i, j] / den if den > 0 else 0.0
                        cov[i, j] = cov[j, i] = rho
                    break
    sd = np.sqrt(np.diag(cov))
    off = ~np.eye(n, dtype=bool)
    cov[off] = cov[off] * np.outer(sd, sd)[off]
    return cov


def iterative_autofocus(cube, traj, params, grid, settings: AutofocusSettings = AutofocusSettings(),
                        max_iterations: int = 8, tolerance: Optional[float] = None,
                        track_radius_cells=(24, 8), workers: Optional[int] = None,
                        first_stack=None, freeze_sigma: float = 3.0) -> IterativeResult:
    """Alternate velocity estimation and data-domain refocusing.

    GCPs are located on the incoherent mean, and the mean's peak is pulled
    toward the point whose nominal range history best matches the
    corrupted one; a single pass therefore under-reads the error.  Each
    further pass corrects the navigation track with the running estimate
    (reference: aperture centre), refocuses windows around the GCPs,
    re-locates them and estimates the remaining error.

    An axis whose first-pass estimate is below ``freeze_sigma`` times its
    standard deviation is frozen: later passes hold it fixed.  Without
    this, an axis the geometry barely constrains (the cross-track axis
    for a straight track, whose error mostly rotates the whole image)
    random-walks as the re-located GCPs follow the rotation.  Axes that
    stay active converge geometrically, so they are iterated until the
    increment drops below ``tolerance``.

    Parameters
    ----------
    grid : ImageGrid
        Grid for the first, full pass (a mask may restrict it).
    max_iterations : int
        Total number of passes, including the first.  1 gives the plain
        single-pass estimator.
    tolerance : float, optional
        Stop once an increment is shorter than this (m/s).  Defaults to a
        quarter of the zero-padded Doppler bin in velocity units.
    track_radius_cells : (int, int)
        Window half-width for the second pass and for later passes.
    first_stack : stack, optional
        Already focused navigation stack on ``grid`` for the first pass.
    freeze_sigma : float
        Significance below which an axis is frozen; ``0`` never freezes.
    """
    from .focusing import focus_stack
    from .moco import correct_trajectory

    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if freeze_sigma < 0:
        raise ValueError("freeze_sigma must be >= 0")
    lam = params.wavelength
    if tolerance is None:
        tolerance = 0.25 * doppler_bin_velocity(lam, len(traj), traj.pri, settings.zero_pad_factor)
    ref = traj.centre_time
    stack = first_stack if first_stack is not None else focus_stack(cube, traj, params, grid, lazy=True,
                                                                     workers=workers)
    first = estimate_velocity_error(stack, lam, settings)
    n_axes = first.estimate.covariance.shape[0]
    total = first.estimate.delta_v.copy()
    passes = [first]
    increments = [first.estimate.delta_v.copy()]
    updated = [np.ones(n_axes, dtype=bool)]
    active = np.ones(n_axes, dtype=bool)
    frozen_at: List[Optional[int]] = [None] * n_axes
    gcps = [d.gcp for d, k in zip(first.dopplers, first.kept) if k]
    for it in range(1, max_iterations):
        if np.linalg.norm(increments[-1]) < tolerance:
            break
        if it == 1:
            sig = first.estimate.sigma
            for i in range(n_axes):
                if abs(increments[0][i]) < freeze_sigma * sig[i]:
                    active[i] = False
                    frozen_at[i] = 0
            if not active.any():
                break
        radius = int(track_radius_cells[0] if it == 1 else track_radius_cells[1])
        corrected = correct_trajectory(traj, total, ref)
        window = grid.with_mask(_window_mask(grid.shape, [g.pixel_index for g in gcps], radius))
        stack = focus_stack(cube, corrected, params, window, lazy=True, workers=workers)
        gcps = track_gcps(stack, gcps, radius)
        dopplers = [estimate_doppler(g, stack.slow_times, settings.zero_pad_factor, keep_spectrum=True) for g in gcps]
        kept, mask = reject_outliers(dopplers, settings.nav_accuracy, lam, settings.kappa, return_mask=True)
        est = solve_wls(kept, lam, settings.estimate_vz, settings.weight_mode, components=np.flatnonzero(active))
        passes.append(AutofocusResult(est, gcps, dopplers, mask, stack.incoherent_mean()))
        increments.append(est.delta_v.copy())
        updated.append(active.copy())
        total = total + est.delta_v
        gcps = [g for g, k in zip(gcps, mask) if k]
    last = passes[-1].estimate
    # the first pass solves for every axis, so its condition number describes the geometry
    final = VelocityEstimate(total, _combine_covariance(passes, updated), last.n_gcps_used, last.residual_rms,
                             last.sigma2, first.estimate.condition_number, last.estimate_vz)
    return IterativeResult(final, passes, increments, first.estimate, frozen_at)
