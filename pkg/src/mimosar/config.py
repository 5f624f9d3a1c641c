"""
Experiment configuration (strict JSON).

Every section and key is checked before any computation starts; unknown
keys are rejected.  Example::

    {
      "radar": {"fc": 77e9, "bandwidth": 3e9},
      "trajectory": {"mode": "constant_velocity", "speed": 7.0, "duration": 0.2},
      "injected_error": [0.2278, 0.0107, 0.0],
      "scene": {"mode": "random", "count": 30, "seed": 1,
                "region": {"r_min": 10, "r_max": 27, "phi_min_deg": -60, "phi_max_deg": 60}},
      "autofocus": {"max_gcps": 30},
      "noise_power": 0.06,
      "seed": 7
    }
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, List, Optional, Tuple

import numpy as np

from .autofocus import AutofocusSettings
from .echo import Scene
from .errors import ConfigError
from .focusing import ImageGrid, default_grid
from .geometry import RadarParams, TrajectorySet


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


def _num(d, key, where, default=None, positive=False, nonneg=False, integer=False):
    if key not in d:
        if default is None:
            raise ConfigError(f"{where}.{key}: required")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{where}.{key}: must be finite")
    if integer and int(v) != v:
        raise ConfigError(f"{where}.{key}: expected an integer, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}.{key}: must be > 0, got {v!r}")
    if nonneg and v < 0:
        raise ConfigError(f"{where}.{key}: must be >= 0, got {v!r}")
    return int(v) if integer else float(v)


def _vec3(v, where):
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ConfigError(f"{where}: expected a list of 3 numbers")
    out = []
    for k, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(f"{where}[{k}]: expected a finite number")
        out.append(float(x))
    return tuple(out)


@dataclass(frozen=True)
class TrajectorySpec:
    mode: str = "constant_velocity"
    speed: float = 7.0
    duration: float = 0.2
    heading_deg: float = 0.0
    start: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    waypoints: Optional[List[Tuple[float, Tuple[float, float, float]]]] = None

    def build(self, pri: float) -> TrajectorySet:
        n = int(round(self.duration / pri))
        if self.mode == "constant_velocity":
            h = math.radians(self.heading_deg)
            vel = (self.speed * math.cos(h), self.speed * math.sin(h), 0.0)
            return TrajectorySet.constant_velocity(vel, n, pri, start=self.start)
        times = [w[0] for w in self.waypoints]
        pts = [w[1] for w in self.waypoints]
        return TrajectorySet.from_waypoints(times, pts, pri, n)


@dataclass(frozen=True)
class SceneSpec:
    mode: str = "random"
    targets: Optional[List[Tuple[Tuple[float, float, float], complex]]] = None
    count: int = 30
    seed: Optional[int] = None
    r_min: float = 10.0
    r_max: float = 27.0
    phi_min_deg: float = -60.0
    phi_max_deg: float = 60.0
    reflectivity: float = 1.0


@dataclass(frozen=True)
class GridSpec:
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    y_min: Optional[float] = None
    y_max: Optional[float] = None
    spacing: Optional[float] = None
    z_plane: float = 0.0

    def build(self, params: RadarParams) -> ImageGrid:
        base = default_grid(params, self.spacing)
        x0 = base.x_axis[0] if self.x_min is None else self.x_min
        x1 = base.x_axis[-1] if self.x_max is None else self.x_max
        y0 = base.y_axis[0] if self.y_min is None else self.y_min
        y1 = base.y_axis[-1] if self.y_max is None else self.y_max
        step = params.range_resolution / 2 if self.spacing is None else self.spacing
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("grid: empty extent")
        return ImageGrid.from_extent(x0, x1, y0, y1, step, self.z_plane)


@dataclass(frozen=True)
class ExperimentConfig:
    radar: RadarParams = field(default_factory=RadarParams)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    injected_error: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    error_reference: str = "center"
    scene: SceneSpec = field(default_factory=SceneSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    autofocus: AutofocusSettings = field(default_factory=AutofocusSettings)
    refine_iterations: int = 8
    range_oversample: float = 2.0
    noise_power: float = 0.0
    seed: int = 0
    workers: int = 1

    # -- derived objects -------------------------------------------------------------

    def rng(self, stream: str) -> np.random.Generator:
        """Independent generator per named stream, all derived from ``seed``."""
        names = ("noise", "scene", "montecarlo")
        if stream not in names:
            raise ValueError(f"unknown stream {stream!r}")
        seq = np.random.SeedSequence(self.seed).spawn(len(names))[names.index(stream)]
        return np.random.default_rng(seq)

    def noise_seed(self) -> int:
        return int(self.rng("noise").integers(0, 2**63 - 1))

    def true_trajectory(self) -> TrajectorySet:
        return self.trajectory.build(self.radar.pri)

    def trajectories(self) -> TrajectorySet:
        """True states plus navigation states corrupted by ``injected_error``."""
        traj = self.true_trajectory()
        ref = traj.centre_time if self.error_reference == "center" else traj.slow_times[0]
        return traj.with_velocity_error(np.array(self.injected_error), ref)

    def image_grid(self) -> ImageGrid:
        return self.grid.build(self.radar)

    def build_scene(self) -> Scene:
        s = self.scene
        if s.mode == "explicit":
            return Scene.from_targets(s.targets)
        rng = self.rng("scene") if s.seed is None else np.random.default_rng(s.seed)
        traj = self.true_trajectory()
        centre = 0.5 * (traj.true_pos[0] + traj.true_pos[-1])
        grid = self.image_grid()
        pts = []
        tries = 0
        while len(pts) < s.count:
            tries += 1
            if tries > 10000 * max(1, s.count):
                raise ConfigError("scene: could not place random targets inside the grid")
            r = rng.uniform(s.r_min, s.r_max)
            phi = math.radians(rng.uniform(s.phi_min_deg, s.phi_max_deg))
            x = centre[0] + r * math.cos(phi)
            y = centre[1] + r * math.sin(phi)
            if not (grid.x_axis[0] <= x <= grid.x_axis[-1] and grid.y_axis[0] <= y <= grid.y_axis[-1]):
                continue
            pts.append((x, y, grid.z_plane))
        return Scene(np.array(pts).reshape(-1, 3), np.full(len(pts), s.reflectivity, dtype=complex))

    def to_dict(self) -> dict:
        t = self.trajectory
        s = self.scene
        g = self.grid
        a = self.autofocus
        traj = {"mode": t.mode, "speed": t.speed, "duration": t.duration, "heading_deg": t.heading_deg,
                "start": list(t.start)}
        if t.waypoints is not None:
            traj["waypoints"] = [{"t": w[0], "position": list(w[1])} for w in t.waypoints]
        scene = {"mode": s.mode}
        if s.mode == "explicit":
            scene["targets"] = [{"position": list(p), "reflectivity": [complex(r).real, complex(r).imag]}
                                for p, r in s.targets]
        else:
            scene.update({"count": s.count, "region": {"r_min": s.r_min, "r_max": s.r_max,
                                                       "phi_min_deg": s.phi_min_deg, "phi_max_deg": s.phi_max_deg},
                          "reflectivity": s.reflectivity})
            if s.seed is not None:
                scene["seed"] = s.seed
        grid = {k.name: getattr(g, k.name) for k in fields(g) if getattr(g, k.name) is not None}
        return {
            "radar": self.radar.to_dict(),
            "trajectory": traj,
            "injected_error": list(self.injected_error),
            "error_reference": self.error_reference,
            "scene": scene,
            "grid": grid,
            "autofocus": {"max_gcps": a.max_gcps, "threshold_quantile": a.threshold_quantile,
                          "min_separation": a.min_separation_cells, "zero_pad_factor": a.zero_pad_factor,
                          "nav_accuracy": a.nav_accuracy, "kappa": a.kappa, "estimate_vz": a.estimate_vz,
                          "weight_mode": a.weight_mode},
            "refine_iterations": self.refine_iterations,
            "range_oversample": self.range_oversample,
            "noise_power": self.noise_power,
            "seed": self.seed,
            "workers": self.workers,
        }


_TOP_KEYS = ("radar", "trajectory", "injected_error", "error_reference", "scene", "grid", "autofocus",
             "refine_iterations", "range_oversample", "noise_power", "seed", "workers")


def _parse_radar(d) -> RadarParams:
    _check_keys(d, RadarParams.__dataclass_fields__.keys(), "radar")
    try:
        return RadarParams.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"radar: {exc}") from None


def _parse_trajectory(d) -> TrajectorySpec:
    where = "trajectory"
    _check_keys(d, ("mode", "speed", "duration", "heading_deg", "start", "waypoints"), where)
    mode = d.get("mode", "constant_velocity")
    if mode not in ("constant_velocity", "waypoints"):
        raise ConfigError(f"{where}.mode: expected 'constant_velocity' or 'waypoints', got {mode!r}")
    duration = _num(d, "duration", where, default=0.2)
    if not duration > 0:
        raise ConfigError(f"{where}.duration: must be > 0, got {duration!r}")
    speed = _num(d, "speed", where, default=7.0, nonneg=True)
    waypoints = None
    if mode == "waypoints":
        wps = d.get("waypoints")
        if not isinstance(wps, list) or len(wps) < 2:
            raise ConfigError(f"{where}.waypoints: need a list of at least 2 waypoints")
        waypoints = []
        for k, w in enumerate(wps):
            _check_keys(w, ("t", "position"), f"{where}.waypoints[{k}]")
            waypoints.append((_num(w, "t", f"{where}.waypoints[{k}]"), _vec3(w.get("position"), f"{where}.waypoints[{k}].position")))
    elif "waypoints" in d:
        raise ConfigError(f"{where}.waypoints: only valid with mode 'waypoints'")
    elif not speed > 0:
        raise ConfigError(f"{where}.speed: must be > 0 for constant-velocity motion")
    return TrajectorySpec(mode, speed, duration, _num(d, "heading_deg", where, default=0.0),
                          _vec3(d.get("start", [0.0, 0.0, 0.0]), f"{where}.start"), waypoints)


def _parse_scene(d) -> SceneSpec:
    where = "scene"
    _check_keys(d, ("mode", "targets", "count", "seed", "region", "reflectivity"), where)
    mode = d.get("mode", "random")
    if mode == "explicit":
        for key in ("count", "seed", "region"):
            if key in d:
                raise ConfigError(f"{where}.{key}: not valid with mode 'explicit'")
        tl = d.get("targets")
        if not isinstance(tl, list):
            raise ConfigError(f"{where}.targets: required list for mode 'explicit'")
        targets = []
        for k, t in enumerate(tl):
            w = f"{where}.targets[{k}]"
            _check_keys(t, ("position", "reflectivity"), w)
            refl = t.get("reflectivity", 1.0)
            if isinstance(refl, list):
                if len(refl) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in refl):
                    raise ConfigError(f"{w}.reflectivity: expected a number or [re, im]")
                refl = complex(refl[0], refl[1])
            elif isinstance(refl, bool) or not isinstance(refl, (int, float)):
                raise ConfigError(f"{w}.reflectivity: expected a number or [re, im]")
            targets.append((_vec3(t.get("position"), f"{w}.position"), complex(refl)))
        return SceneSpec(mode="explicit", targets=targets)
    if mode != "random":
        raise ConfigError(f"{where}.mode: expected 'explicit' or 'random', got {mode!r}")
    if "targets" in d:
        raise ConfigError(f"{where}.targets: not valid with mode 'random'")
    region = d.get("region", {})
    _check_keys(region, ("r_min", "r_max", "phi_min_deg", "phi_max_deg"), f"{where}.region")
    r_min = _num(region, "r_min", f"{where}.region", default=10.0, positive=True)
    r_max = _num(region, "r_max", f"{where}.region", default=27.0, positive=True)
    p0 = _num(region, "phi_min_deg", f"{where}.region", default=-60.0)
    p1 = _num(region, "phi_max_deg", f"{where}.region", default=60.0)
    if not r_max > r_min or not p1 > p0:
        raise ConfigError(f"{where}.region: empty range/azimuth interval")
    seed = d.get("seed")
    if seed is not None:
        seed = _num(d, "seed", where, integer=True, nonneg=True)
    return SceneSpec("random", None, _num(d, "count", where, default=30, integer=True, nonneg=True), seed,
                     r_min, r_max, p0, p1, _num(d, "reflectivity", where, default=1.0, positive=True))


def _parse_grid(d) -> GridSpec:
    where = "grid"
    keys = ("x_min", "x_max", "y_min", "y_max", "spacing", "z_plane")
    _check_keys(d, keys, where)
    kw = {}
    for k in keys:
        if k in d:
            kw[k] = _num(d, k, where, positive=(k == "spacing"))
    return GridSpec(**kw)


def _parse_autofocus(d) -> AutofocusSettings:
    where = "autofocus"
    _check_keys(d, ("max_gcps", "threshold_quantile", "min_separation", "zero_pad_factor", "nav_accuracy",
                    "kappa", "estimate_vz", "weight_mode"), where)
    base = AutofocusSettings()
    kw = {}
    if "max_gcps" in d:
        kw["max_gcps"] = _num(d, "max_gcps", where, integer=True)
    if "threshold_quantile" in d:
        kw["threshold_quantile"] = _num(d, "threshold_quantile", where)
    if "min_separation" in d:
        kw["min_separation_cells"] = _num(d, "min_separation", where, nonneg=True)
    if "zero_pad_factor" in d:
        kw["zero_pad_factor"] = _num(d, "zero_pad_factor", where, integer=True)
    if "nav_accuracy" in d:
        kw["nav_accuracy"] = _num(d, "nav_accuracy", where)
    if "kappa" in d:
        kw["kappa"] = _num(d, "kappa", where)
    if "estimate_vz" in d:
        if not isinstance(d["estimate_vz"], bool):
            raise ConfigError(f"{where}.estimate_vz: expected true/false")
        kw["estimate_vz"] = d["estimate_vz"]
    if "weight_mode" in d:
        kw["weight_mode"] = d["weight_mode"]
    try:
        return replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(d: Any) -> ExperimentConfig:
    """Validate a decoded JSON document and build an :class:`ExperimentConfig`."""
    _check_keys(d, _TOP_KEYS, "config")
    kw = {}
    if "radar" in d:
        kw["radar"] = _parse_radar(d["radar"])
    if "trajectory" in d:
        kw["trajectory"] = _parse_trajectory(d["trajectory"])
    if "injected_error" in d:
        kw["injected_error"] = _vec3(d["injected_error"], "injected_error")
    if "error_reference" in d:
        if d["error_reference"] not in ("start", "center"):
            raise ConfigError("error_reference: expected 'start' or 'center'")
        kw["error_reference"] = d["error_reference"]
    if "scene" in d:
        kw["scene"] = _parse_scene(d["scene"])
    if "grid" in d:
        kw["grid"] = _parse_grid(d["grid"])
    if "autofocus" in d:
        kw["autofocus"] = _parse_autofocus(d["autofocus"])
    if "refine_iterations" in d:
        kw["refine_iterations"] = _num(d, "refine_iterations", "config", integer=True, positive=True)
    if "range_oversample" in d:
        kw["range_oversample"] = _num(d, "range_oversample", "config")
        if kw["range_oversample"] < 2:
            raise ConfigError("range_oversample: must be >= 2")
    if "noise_power" in d:
        kw["noise_power"] = _num(d, "noise_power", "config", nonneg=True)
    if "seed" in d:
        kw["seed"] = _num(d, "seed", "config", integer=True, nonneg=True)
    if "workers" in d:
        kw["workers"] = _num(d, "workers", "config", integer=True, positive=True)
    cfg = ExperimentConfig(**kw)
    n = int(round(cfg.trajectory.duration / cfg.radar.pri))
    if n < 1:
        raise ConfigError("trajectory.duration: shorter than one PRI")
    cfg.image_grid()
    return cfg
