"""
File formats.

All binary formats are little-endian and store complex samples as
interleaved float32 (re, im) pairs.

RCC1  range-compressed cube
    ``b"RCC1"``, u32 R, u32 N, u32 M, f64 range_axis[R], f64 slow_times[M],
    samples ordered slow time (outer), channel, range bin (inner).
    Radar parameters go to a JSON sidecar ``<path>.json``.
CIM1  complex image
    ``b"CIM1"``, u32 Px, u32 Py, f64 x0, dx, y0, dy, z_plane,
    samples x-major (``pixels[i, j]`` at ``i * Py + j``).
CIS1  image stack
    ``b"CIS1"``, u32 M, u32 Px, u32 Py, f64 x0, dx, y0, dy, z_plane,
    f64 aperture_centre[3], f64 slow_times[M], then M frames laid out as in
    CIM1.
PGM   8-bit binary greymap (P5) of ``|pixels|`` scaled to the maximum;
    one row per x node.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .echo import RcCube
from .errors import FormatError
from .focusing import ComplexImage, ImageGrid, ImageStack
from .geometry import RadarParams, TrajectorySet

_C64 = np.dtype("<c8")
_F64 = np.dtype("<f8")


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


# -- JSON ------------------------------------------------------------------

def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise FormatError("file not found", path=path) from None
    except OSError as exc:
        raise FormatError(str(exc), path=path) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise FormatError(f"invalid JSON: {exc.msg}", path=path, offset=offset) from None


# -- binary helpers ----------------------------------------------------------

class _Reader:
    def __init__(self, path, magic: bytes):
        self.path = path
        try:
            self.buf = Path(path).read_bytes()
        except FileNotFoundError:
            raise FormatError("file not found", path=path) from None
        except OSError as exc:
            raise FormatError(str(exc), path=path) from None
        self.pos = 0
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", path=path, offset=0)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                path=self.path, offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype=_F64).astype(float)

    def c64(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype=_C64).astype(np.complex128)

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", path=self.path, offset=self.pos)


def _grid_header(grid: ImageGrid) -> bytes:
    return struct.pack("<5d", float(grid.x_axis[0]), grid.dx, float(grid.y_axis[0]), grid.dy, grid.z_plane)


def _read_grid(rd: _Reader, px: int, py: int) -> ImageGrid:
    at = rd.pos
    x0, dx, y0, dy, z = rd.f64(5, "grid header")
    if (px > 1 and not dx > 0) or (py > 1 and not dy > 0):
        raise FormatError("non-positive grid spacing", path=rd.path, offset=at)
    return ImageGrid(x0 + np.arange(px) * dx, y0 + np.arange(py) * dy, z)


# -- RCC1 ------------------------------------------------------------------

def write_rcc(path, cube: RcCube) -> None:
    """Write ``cube`` and its radar-parameter sidecar."""
    r, n, m = cube.data.shape
    body = np.transpose(cube.data, (2, 1, 0)).astype(_C64)
    with open(path, "wb") as fh:
        fh.write(b"RCC1")
        fh.write(struct.pack("<3I", r, n, m))
        fh.write(cube.range_axis.astype(_F64).tobytes())
        fh.write(cube.slow_times.astype(_F64).tobytes())
        fh.write(np.ascontiguousarray(body).tobytes())
    write_json(sidecar_path(path), {"format": "RCC1", "radar": cube.params.to_dict()})


def read_rcc(path) -> RcCube:
    side = sidecar_path(path)
    if not side.exists():
        raise FormatError(f"missing radar-parameter sidecar {side}", path=side)
    meta = read_json(side)
    try:
        params = RadarParams.from_dict(meta["radar"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad radar parameters: {exc}", path=side) from None
    rd = _Reader(path, b"RCC1")
    r, n, m = rd.u32("R"), rd.u32("N"), rd.u32("M")
    if n != params.n_virtual:
        raise FormatError(f"channel count {n} disagrees with sidecar n_virtual {params.n_virtual}", path=path, offset=8)
    axis = rd.f64(r, "range_axis")
    times = rd.f64(m, "slow_times")
    data = rd.c64(r * n * m, "samples").reshape(m, n, r).transpose(2, 1, 0)
    rd.finish()
    try:
        return RcCube(axis, np.ascontiguousarray(data), params, times)
    except ValueError as exc:
        raise FormatError(str(exc), path=path, offset=16) from None


# -- CIM1 ------------------------------------------------------------------

def write_cim(path, image: ComplexImage) -> None:
    px, py = image.grid.shape
    with open(path, "wb") as fh:
        fh.write(b"CIM1")
        fh.write(struct.pack("<2I", px, py))
        fh.write(_grid_header(image.grid))
        fh.write(np.ascontiguousarray(image.pixels).astype(_C64).tobytes())


def read_cim(path) -> ComplexImage:
    rd = _Reader(path, b"CIM1")
    px, py = rd.u32("Px"), rd.u32("Py")
    grid = _read_grid(rd, px, py)
    pixels = rd.c64(px * py, "pixels").reshape(px, py)
    rd.finish()
    return ComplexImage(grid, pixels)


# -- CIS1 ------------------------------------------------------------------

def write_cis(path, stack) -> None:
    """Write an image stack; lazy stacks are back-projected frame by frame."""
    m = len(stack)
    px, py = stack.grid.shape
    with open(path, "wb") as fh:
        fh.write(b"CIS1")
        fh.write(struct.pack("<3I", m, px, py))
        fh.write(_grid_header(stack.grid))
        fh.write(np.asarray(stack.aperture_centre, dtype=_F64).tobytes())
        fh.write(stack.slow_times.astype(_F64).tobytes())
        if isinstance(stack, ImageStack):
            fh.write(np.ascontiguousarray(stack.data).astype(_C64).tobytes())
        else:
            for k in range(m):
                fh.write(np.ascontiguousarray(stack.frame(k).pixels).astype(_C64).tobytes())


def read_cis(path) -> ImageStack:
    rd = _Reader(path, b"CIS1")
    m, px, py = rd.u32("M"), rd.u32("Px"), rd.u32("Py")
    if m == 0:
        raise FormatError("stack has no frames", path=path, offset=4)
    grid = _read_grid(rd, px, py)
    centre = rd.f64(3, "aperture_centre")
    times = rd.f64(m, "slow_times")
    data = rd.c64(m * px * py, "frames").reshape(m, px, py)
    rd.finish()
    return ImageStack(grid, data, times, centre)


# -- PGM -------------------------------------------------------------------

def render_pgm(path, image) -> None:
    """8-bit P5 render of ``|pixels|`` normalised to its maximum."""
    pixels = image.pixels if isinstance(image, ComplexImage) else np.asarray(image)
    mag = np.abs(pixels).astype(float)
    top = float(mag.max()) if mag.size else 0.0
    scaled = np.zeros_like(mag) if top == 0 else mag / top
    out = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = out.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(out.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path=path, offset=pos)
        parts.append(buf[start:pos])
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM", path=path, offset=0)
    w, h = int(parts[1]), int(parts[2])
    pos += 1
    if len(buf) - pos != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(buf) - pos}", path=path, offset=pos)
    return np.frombuffer(buf[pos:], dtype=np.uint8).reshape(h, w)


# -- trajectories ---------------------------------------------------------------

def write_trajectory(path, traj: TrajectorySet) -> None:
    write_json(path, {"format": "trajectory", **traj.to_dict()})


def read_trajectory(path) -> TrajectorySet:
    d = read_json(path)
    try:
        return TrajectorySet.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad trajectory document: {exc}", path=path) from None


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
