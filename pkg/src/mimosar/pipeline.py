"""
Config-driven orchestration: simulate, focus, autofocus + compensate, report.

Every stage reads and writes files in an output directory and records
SHA-256 digests of what it wrote in ``manifest.json`` together with the
normalised configuration, the seed and the package version.

Outputs per stage
-----------------
simulate   ``cube.rcc`` (+ ``cube.rcc.json``), ``trajectory.json``, ``scene.json``, ``config.json``
focus      ``stack.json`` (stack descriptor), ``mean.npy``, ``image.cim``, ``image.pgm``,
           ``focus.json``; ``stack.cis`` when the stack is small enough or requested
autofocus  ``autofocus.json``, ``gcp_spectra.csv``, ``autofocused.cim``, ``autofocused.pgm``,
           ``trajectory_corrected.json``
report     ``metrics.json``, ``metrics.csv``

A stack descriptor is a JSON document naming the cube, the trajectory, the
state set used (``nav`` or ``true``) and the grid; frames are re-created
on demand by back-projection, which avoids writing multi-gigabyte stacks.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .autofocus import (AutofocusResult, autofocus_report, doppler_bin_velocity, estimate_velocity_error,
                        iterative_autofocus)
from .config import ExperimentConfig, parse_config
from .echo import Scene, default_range_axis, simulate_rc
from .errors import ConfigError, FormatError, MimosarError
from .focusing import BackprojectedStack, ComplexImage, ImageGrid, focus_stack
from .geometry import RadarParams
from .io import (ensure_dir, read_cim, read_cis, read_json, read_rcc, read_trajectory, render_pgm, write_cim,
                 write_cis, write_json, write_rcc, write_trajectory)
from .metrics import image_shift, target_metrics
from .moco import correct_trajectory, form_sar, tps_for_stack

# stacks up to this many complex samples are also written as CIS1 (1.6 GB at the default grid otherwise)
STACK_FILE_LIMIT = 20_000_000

log = logging.getLogger("mimosar")


# -- config and manifest ----------------------------------------------------------

def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Read and validate a JSON config; ``seed_override`` replaces its ``seed``."""
    cfg = parse_config(read_json(path))
    if seed_override is not None:
        if int(seed_override) < 0:
            raise ConfigError("seed override must be >= 0")
        cfg = replace(cfg, seed=int(seed_override))
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(out_dir, stage: str, outputs, config: Optional[ExperimentConfig] = None) -> dict:
    """Merge one stage's outputs into ``manifest.json``."""
    path = Path(out_dir) / "manifest.json"
    manifest = read_json(path) if path.exists() else {"tool": "mimosar", "version": __version__, "stages": {}}
    if config is not None:
        manifest["config"] = config.to_dict()
        manifest["seed"] = config.seed
    manifest["stages"][stage] = {Path(p).name: _sha256(p) for p in outputs}
    write_json(path, manifest)
    return manifest


def _workers(workers, config):
    if workers is not None:
        return int(workers)
    return config.workers if config is not None else None


# -- simulate ------------------------------------------------------------------------

def simulation_range_axis(config: ExperimentConfig, traj) -> np.ndarray:
    """Range axis long enough for every grid corner seen from every APC."""
    grid = config.image_grid()
    xs, ys = grid.x_axis[[0, -1]], grid.y_axis[[0, -1]]
    corners = np.array([[x, y, grid.z_plane] for x in xs for y in ys])
    pos = np.concatenate([traj.true_pos, traj.nav_pos])
    far = float(np.max(np.linalg.norm(corners[None] - pos[:, None], axis=-1)))
    return default_range_axis(config.radar, config.range_oversample, r_max=max(far, config.radar.max_range))


def run_simulate(config: ExperimentConfig, out_dir, workers: Optional[int] = None) -> dict:
    """Simulate the range-compressed cube for ``config`` and write it with trajectory and scene."""
    out = ensure_dir(out_dir)
    traj = config.trajectories()
    scene = config.build_scene()
    cube = simulate_rc(scene, traj, config.radar, noise_power=config.noise_power, seed=config.noise_seed(),
                       range_axis=simulation_range_axis(config, traj), workers=_workers(workers, config) or 1)
    paths = {
        "cube": out / "cube.rcc",
        "trajectory": out / "trajectory.json",
        "scene": out / "scene.json",
        "config": out / "config.json",
    }
    write_rcc(paths["cube"], cube)
    write_trajectory(paths["trajectory"], traj)
    write_json(paths["scene"], {"format": "scene", **scene.to_dict()})
    write_json(paths["config"], config.to_dict())
    update_manifest(out, "simulate",
                    [paths["cube"], Path(str(paths["cube"]) + ".json"), paths["trajectory"], paths["scene"],
                     paths["config"]], config)
    return {"paths": paths, "cube": cube, "trajectory": traj, "scene": scene}


# -- focus ---------------------------------------------------------------------------

def _grid_dict(grid: ImageGrid) -> dict:
    px, py = grid.shape
    return {"x0": float(grid.x_axis[0]), "dx": grid.dx, "nx": px,
            "y0": float(grid.y_axis[0]), "dy": grid.dy, "ny": py, "z_plane": grid.z_plane}


def _grid_from_dict(d: dict, path) -> ImageGrid:
    try:
        return ImageGrid(d["x0"] + np.arange(int(d["nx"])) * d["dx"], d["y0"] + np.arange(int(d["ny"])) * d["dy"],
                         float(d["z_plane"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad grid description: {exc}", path=path) from None


def _rel(path, base) -> str:
    return os.path.relpath(os.path.abspath(path), os.path.abspath(base))


def run_focus(cube_path, traj_path, grid: ImageGrid, out_dir, use_nav: bool = True, workers: Optional[int] = None,
              write_stack: Optional[bool] = None) -> dict:
    """Back-project a cube with navigation (default) or true states.

    Writes the stack descriptor, the incoherent mean, the coherent sum as
    CIM1 and PGM, and ``focus.json`` with the sum image's peak.
    ``write_stack`` forces (True) or suppresses (False) the CIS1 file; by
    default it is written when the stack has at most
    :data:`STACK_FILE_LIMIT` samples.
    """
    out = ensure_dir(out_dir)
    cube = read_rcc(cube_path)
    traj = read_trajectory(traj_path)
    which = "nav" if use_nav else "true"
    try:
        stack = focus_stack(cube, traj, cube.params, grid, which=which, workers=workers, lazy=True)
    except ValueError as exc:
        raise FormatError(str(exc), path=traj_path) from None
    image = stack.screened_sum(None)
    mean = stack.incoherent_mean()
    paths = {
        "stack": out / "stack.json",
        "mean": out / "mean.npy",
        "image": out / "image.cim",
        "render": out / "image.pgm",
        "meta": out / "focus.json",
    }
    np.save(paths["mean"], mean)
    write_cim(paths["image"], image)
    render_pgm(paths["render"], image)
    descriptor = {
        "format": "stack",
        "cube": _rel(cube_path, out),
        "trajectory": _rel(traj_path, out),
        "which": which,
        "grid": _grid_dict(grid),
        "mean": paths["mean"].name,
    }
    if write_stack is None:
        write_stack = len(stack) * grid.shape[0] * grid.shape[1] <= STACK_FILE_LIMIT
    if write_stack:
        paths["frames"] = out / "stack.cis"
        write_cis(paths["frames"], stack)
        descriptor["frames"] = paths["frames"].name
    write_json(paths["stack"], descriptor)
    idx = image.peak_index()
    write_json(paths["meta"], {
        "which": which,
        "grid": _grid_dict(grid),
        "peak_index": [int(idx[0]), int(idx[1])],
        "peak_position": [float(v) for v in image.peak_position()],
        "peak_amplitude": float(abs(image.peak_value())),
    })
    update_manifest(out, "focus", list(paths.values()))
    return {"paths": paths, "stack": stack, "image": image}


class LoadedStack:
    """A stack read from disk plus, for descriptors, the data needed to refocus."""

    def __init__(self, stack, cube=None, trajectory=None, params: Optional[RadarParams] = None, which="nav"):
        self.stack = stack
        self.cube = cube
        self.trajectory = trajectory
        self.params = params
        self.which = which


def load_stack(path, workers: Optional[int] = None) -> LoadedStack:
    """Open a CIS1 file or a stack descriptor (``.json``)."""
    path = Path(path)
    if path.suffix.lower() != ".json":
        return LoadedStack(read_cis(path))
    d = read_json(path)
    if not isinstance(d, dict) or d.get("format") != "stack":
        raise FormatError("not a stack descriptor", path=path)
    base = path.parent
    try:
        cube_path, traj_path, which = base / d["cube"], base / d["trajectory"], d["which"]
    except KeyError as exc:
        raise FormatError(f"stack descriptor lacks {exc}", path=path) from None
    grid = _grid_from_dict(d.get("grid"), path)
    cube = read_rcc(cube_path)
    traj = read_trajectory(traj_path)
    try:
        stack = focus_stack(cube, traj, cube.params, grid, which=which, workers=workers, lazy=True)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None
    if "mean" in d:
        mean_path = base / d["mean"]
        try:
            stack.prime(np.load(mean_path, allow_pickle=False))
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot use cached mean: {exc}", path=mean_path) from None
    return LoadedStack(stack, cube, traj, cube.params, which)


# -- autofocus -----------------------------------------------------------------------

def _write_spectra(path, passes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pass", "gcp", "kept", "frequency_hz", "omega_rad_s", "magnitude"])
        for p, res in passes:
            for g, (d, kept) in enumerate(zip(res.dopplers, res.kept)):
                if d.spectrum is None:
                    continue
                order = np.argsort(d.frequencies, kind="stable")
                for f, s in zip(d.frequencies[order], d.spectrum[order]):
                    w.writerow([p, g, int(bool(kept)), repr(float(f)), repr(float(2 * math.pi * f)),
                                repr(float(s))])


def _error_report(path, exc: MimosarError) -> None:
    body = {"status": "error", "error": {"code": exc.code, "exit_code": exc.exit_code, "message": str(exc)}}
    cn = getattr(exc, "condition_number", None)
    if cn is not None:
        body["error"]["condition_number"] = float(cn)
    write_json(path, body)


def run_autofocus(stack_path, config: ExperimentConfig, out_dir, workers: Optional[int] = None) -> dict:
    """Estimate the velocity error, compensate the stack and write report, spectra and image.

    With ``config.refine_iterations > 1`` and a navigation-focused stack
    descriptor, windows around the GCPs are refocused with the corrected
    track between passes.  Other stacks (CIS1 files, oracle focusing) get a
    single pass and a warning.
    Failures (too few GCPs, ill-conditioned geometry) are written to
    ``autofocus.json`` with a machine-readable code before re-raising.
    """
    out = ensure_dir(out_dir)
    report_path = out / "autofocus.json"
    workers = _workers(workers, config)
    loaded = load_stack(stack_path, workers)
    stack = loaded.stack
    params = loaded.params or config.radar
    lam = params.wavelength
    settings = config.autofocus
    try:
        refine = config.refine_iterations > 1
        if refine and (loaded.cube is None or loaded.which != "nav"):
            log.warning("refinement needs a navigation-focused stack descriptor; running a single pass")
            refine = False
        if refine:
            it = iterative_autofocus(loaded.cube, loaded.trajectory, params, stack.grid, settings,
                                     max_iterations=config.refine_iterations, workers=workers,
                                     first_stack=stack)
            estimate, passes, increments = it.estimate, it.passes, it.increments
        else:
            res = estimate_velocity_error(stack, lam, settings)
            estimate, passes, increments = res.estimate, [res], [res.estimate.delta_v]
    except MimosarError as exc:
        _error_report(report_path, exc)
        update_manifest(out, "autofocus", [report_path])
        raise
    first: AutofocusResult = passes[0]
    image = form_sar(stack, tps_for_stack(stack, estimate, lam))
    truth = np.asarray(config.injected_error, dtype=float)
    report = {
        "status": "ok",
        **estimate.to_dict(),
        "wavelength": lam,
        "bin_velocity": doppler_bin_velocity(lam, len(stack), float(stack.slow_times[1] - stack.slow_times[0]),
                                             settings.zero_pad_factor),
        "passes": [{"increment": [float(v) for v in inc], "n_gcps_used": int(p.estimate.n_gcps_used),
                    "sigma": p.estimate.sigma.tolist()} for inc, p in zip(increments, passes)],
        "first_pass": autofocus_report(first.dopplers, first.kept, first.estimate, lam),
        "injected_error": truth.tolist(),
    }
    n = estimate.sigma.size
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (estimate.delta_v[:n] - truth[:n]) / estimate.sigma
    report["z_scores"] = [float(v) for v in z]
    paths = {
        "report": report_path,
        "spectra": out / "gcp_spectra.csv",
        "image": out / "autofocused.cim",
        "render": out / "autofocused.pgm",
    }
    write_json(report_path, report)
    _write_spectra(paths["spectra"], [(0, first)] + ([(len(passes) - 1, passes[-1])] if len(passes) > 1 else []))
    write_cim(paths["image"], image)
    render_pgm(paths["render"], image)
    if loaded.trajectory is not None:
        paths["trajectory"] = out / "trajectory_corrected.json"
        write_trajectory(paths["trajectory"],
                         correct_trajectory(loaded.trajectory, estimate, loaded.trajectory.centre_time))
    update_manifest(out, "autofocus", list(paths.values()))
    return {"paths": paths, "estimate": estimate, "report": report, "image": image, "passes": passes}


# -- report --------------------------------------------------------------------------

_CSV_FIELDS = ("target", "truth_x", "truth_y", "before_x", "before_y", "after_x", "after_y", "before_error",
               "after_error", "before_cells", "after_cells", "before_amplitude", "after_amplitude",
               "after_width_x", "after_width_y", "after_pislr_db")


def compare_images(before: ComplexImage, after: ComplexImage, truth: Scene, search_radius: float = 1.0) -> dict:
    """Metrics of ``before`` and ``after`` against the true scatterer positions."""
    if not before.grid.same_as(after.grid):
        raise ConfigError("before and after images are on different grids")
    b = target_metrics(before, truth.positions, search_radius)
    a = target_metrics(after, truth.positions, search_radius)
    targets = []
    for k, (rb, ra) in enumerate(zip(b, a)):
        targets.append({"target": k, "truth": rb["truth"], "before": rb, "after": ra,
                        "localization_delta": ra["localization_error"] - rb["localization_error"],
                        "peak_shift": [ra["peak_position"][0] - rb["peak_position"][0],
                                       ra["peak_position"][1] - rb["peak_position"][1]]})

    def mean_of(rows, key):
        return float(np.mean([r[key] for r in rows])) if rows else math.nan

    return {
        "grid_cell": before.grid.cell,
        "image_shift": image_shift(before, after).tolist(),
        "n_targets": len(targets),
        "summary": {
            "before_mean_localization_error": mean_of(b, "localization_error"),
            "after_mean_localization_error": mean_of(a, "localization_error"),
            "before_max_localization_cells": max((r["localization_cells"] for r in b), default=math.nan),
            "after_max_localization_cells": max((r["localization_cells"] for r in a), default=math.nan),
            "before_mean_amplitude": mean_of(b, "amplitude"),
            "after_mean_amplitude": mean_of(a, "amplitude"),
        },
        "targets": targets,
    }


def run_report(before_path, after_path, truth_scene_path, out_dir, search_radius: float = 1.0) -> dict:
    """Write ``metrics.json`` and ``metrics.csv`` comparing two images with the true scene."""
    out = ensure_dir(out_dir)
    before = read_cim(before_path)
    after = read_cim(after_path)
    d = read_json(truth_scene_path)
    try:
        truth = Scene.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad scene document: {exc}", path=truth_scene_path) from None
    metrics = compare_images(before, after, truth, search_radius)
    paths = {"json": out / "metrics.json", "csv": out / "metrics.csv"}
    write_json(paths["json"], metrics)
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for t in metrics["targets"]:
            b, a = t["before"], t["after"]
            w.writerow([t["target"], *t["truth"][:2], *b["peak_position"][:2], *a["peak_position"][:2],
                        b["localization_error"], a["localization_error"], b["localization_cells"],
                        a["localization_cells"], b["amplitude"], a["amplitude"], a["width_x"], a["width_y"],
                        a["pislr_db"]])
    update_manifest(out, "report", list(paths.values()))
    return {"paths": paths, "metrics": metrics}


# -- all stages ----------------------------------------------------------------------

def run_all(config: ExperimentConfig, out_dir, workers: Optional[int] = None, use_nav: bool = True) -> dict:
    """simulate, focus, autofocus + compensate, report."""
    sim = run_simulate(config, out_dir, workers)
    foc = run_focus(sim["paths"]["cube"], sim["paths"]["trajectory"], config.image_grid(), out_dir,
                    use_nav=use_nav, workers=_workers(workers, config))
    af = run_autofocus(foc["paths"]["stack"], config, out_dir, workers)
    rep = run_report(foc["paths"]["image"], af["paths"]["image"], sim["paths"]["scene"], out_dir)
    return {"simulate": sim, "focus": foc, "autofocus": af, "report": rep}
