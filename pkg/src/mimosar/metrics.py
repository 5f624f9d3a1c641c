"""Image quality measures: peaks, -3 dB widths, sidelobe proxy, localisation."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from .focusing import ComplexImage


def half_power_width(profile, axis) -> float:
    """-3 dB (half-power) width of the main lobe of a 1-D magnitude profile.

    Crossings of ``max / sqrt(2)`` on both sides of the maximum are located
    by linear interpolation.  Returns ``nan`` if the lobe is not closed
    inside the profile.
    """
    mag = np.abs(np.asarray(profile))
    x = np.asarray(axis, dtype=float)
    k = int(np.argmax(mag))
    level = mag[k] / math.sqrt(2.0)
    i = k
    while i > 0 and mag[i - 1] >= level:
        i -= 1
    j = k
    while j < mag.size - 1 and mag[j + 1] >= level:
        j += 1
    if i == 0 or j == mag.size - 1:
        return math.nan
    left = x[i - 1] + (level - mag[i - 1]) * (x[i] - x[i - 1]) / (mag[i] - mag[i - 1])
    right = x[j] + (mag[j] - level) * (x[j + 1] - x[j]) / (mag[j] - mag[j + 1])
    return float(right - left)


def local_peak(image: ComplexImage, near, radius: float):
    """Brightest pixel within ``radius`` metres of ``near``; returns ``(index, position, amplitude)``."""
    pos = image.grid.positions()
    d = np.hypot(pos[..., 0] - near[0], pos[..., 1] - near[1])
    mag = np.where(d <= radius, np.abs(image.pixels), -1.0)
    idx = np.unravel_index(int(np.argmax(mag)), mag.shape)
    if mag[idx] < 0:
        raise ValueError("no pixel within the search radius")
    return idx, image.grid.position(*idx), float(np.abs(image.pixels[idx]))


def axis_widths(image: ComplexImage, index):
    """Half-power widths along x and y through ``index``."""
    i, j = index
    mag = np.abs(image.pixels)
    return (half_power_width(mag[:, j], image.grid.x_axis),
            half_power_width(mag[i, :], image.grid.y_axis))


def pislr_proxy(image: ComplexImage, index, main_radius: float, window_radius: float) -> float:
    """Sidelobe-to-mainlobe energy ratio in dB around a peak.

    Main lobe: pixels within ``main_radius`` of the peak; side lobes: the
    annulus out to ``window_radius``.
    """
    pos = image.grid.positions()
    c = image.grid.position(*index)
    d = np.hypot(pos[..., 0] - c[0], pos[..., 1] - c[1])
    p = np.abs(image.pixels) ** 2
    main = float(p[d <= main_radius].sum())
    side = float(p[(d > main_radius) & (d <= window_radius)].sum())
    if main <= 0:
        return math.inf
    if side <= 0:
        return -math.inf
    return 10.0 * math.log10(side / main)


def image_shift(before: ComplexImage, after: ComplexImage):
    """Translation (metres) that best maps ``|before|`` onto ``|after|`` (cross-correlation peak)."""
    if not before.grid.same_as(after.grid):
        raise ValueError("images are on different grids")
    a = np.abs(before.pixels)
    b = np.abs(after.pixels)
    xc = signal.correlate(b - b.mean(), a - a.mean(), mode="full", method="fft")
    k = np.unravel_index(int(np.argmax(xc)), xc.shape)
    di = k[0] - (a.shape[0] - 1)
    dj = k[1] - (a.shape[1] - 1)
    return np.array([di * before.grid.dx, dj * before.grid.dy])


def target_metrics(image: ComplexImage, targets, search_radius: float = 1.0, main_radius: Optional[float] = None,
                   window_radius: Optional[float] = None) -> list:
    """Per-target peak position, localisation error, amplitude, widths and sidelobe proxy."""
    g = image.grid
    main_radius = 2.0 * g.cell if main_radius is None else main_radius
    window_radius = search_radius if window_radius is None else window_radius
    rows = []
    for t in np.asarray(targets, dtype=float).reshape(-1, 3):
        idx, pos, amp = local_peak(image, t, search_radius)
        wx, wy = axis_widths(image, idx)
        err = pos[:2] - t[:2]
        rows.append({
            "truth": t.tolist(),
            "peak_index": [int(idx[0]), int(idx[1])],
            "peak_position": pos.tolist(),
            "offset": err.tolist(),
            "localization_error": float(np.hypot(*err)),
            "localization_cells": float(max(abs(err[0]) / (g.dx or 1.0), abs(err[1]) / (g.dy or 1.0))),
            "amplitude": amp,
            "width_x": wx,
            "width_y": wy,
            "pislr_db": pislr_proxy(image, idx, main_radius, window_radius),
        })
    return rows


def peak_separation_cells(image: ComplexImage, index, truth) -> float:
    """Chebyshev distance in cells between ``index`` and the node nearest ``truth``."""
    ti, tj = image.grid.nearest_index(truth)
    return float(max(abs(index[0] - ti), abs(index[1] - tj)))


def local_maxima(mag, threshold):
    peaks = (mag == ndimage.maximum_filter(mag, size=3, mode="constant", cval=-np.inf)) & (mag > threshold)
    return np.argwhere(peaks)
