"""4D range-azimuth-doppler-elevation power tensors.

Holds the sensor geometry, a synthetic generator that superimposes separable
Gaussian target responses, the max-projection into concatenated RAD/RAE
planes, memory accounting, and the portable binary container used by the CLI.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._atomic import atomic_write_bytes

MAGIC = b"RADETNSR"
FORMAT_VERSION = 1
PAD_MULTIPLE = 8


class FormatError(ValueError):
    """Raised when a tensor file is malformed."""


class TruncatedFileError(FormatError):
    """Raised when a tensor file ends before its declared payload."""


@dataclass(frozen=True)
class SensorGeometry:
    """Bin counts and field of view of the radar cube.

    Angles are in degrees, ``range_max`` in meters, ``doppler_max`` in m/s and
    ``z0`` is the mounting height of the sensor above ground.
    """

    n_r: int = 256
    n_a: int = 107
    n_d: int = 64
    n_e: int = 37
    range_max: float = 118.0
    azimuth_fov: float = 107.0
    elevation_fov: float = 37.0
    doppler_max: float = 2.0
    z0: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_r", "n_a", "n_d", "n_e"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        for name in ("range_max", "azimuth_fov", "elevation_fov", "doppler_max", "z0"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        if self.range_max <= 0:
            raise ValueError("range_max must be positive")
        if not 0 < self.azimuth_fov <= 360 or not 0 < self.elevation_fov <= 180:
            raise ValueError("fields of view must be positive")
        if self.doppler_max <= 0:
            raise ValueError("doppler_max must be positive")

    # bin widths
    @property
    def range_res(self) -> float:
        return self.range_max / self.n_r

    @property
    def azimuth_res(self) -> float:
        return self.azimuth_fov / self.n_a

    @property
    def doppler_res(self) -> float:
        return 2.0 * self.doppler_max / self.n_d

    @property
    def elevation_res(self) -> float:
        return self.elevation_fov / self.n_e

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n_r, self.n_a, self.n_d, self.n_e)

    @property
    def n_de(self) -> int:
        return self.n_d + self.n_e

    @property
    def n_a_pad(self) -> int:
        return _round_up(self.n_a, PAD_MULTIPLE)

    # bin centers; accept scalars or arrays
    def range_of(self, r):
        return (np.asarray(r) + 0.5) * self.range_res

    def azimuth_of(self, a):
        return -self.azimuth_fov / 2 + (np.asarray(a) + 0.5) * self.azimuth_res

    def doppler_of(self, d):
        return -self.doppler_max + (np.asarray(d) + 0.5) * self.doppler_res

    def elevation_of(self, e):
        return -self.elevation_fov / 2 + (np.asarray(e) + 0.5) * self.elevation_res

    # fractional bin coordinates (inverse of the above)
    def range_bin(self, value):
        return np.asarray(value) / self.range_res - 0.5

    def azimuth_bin(self, value):
        return (np.asarray(value) + self.azimuth_fov / 2) / self.azimuth_res - 0.5

    def doppler_bin(self, value):
        return (np.asarray(value) + self.doppler_max) / self.doppler_res - 0.5

    def elevation_bin(self, value):
        return (np.asarray(value) + self.elevation_fov / 2) / self.elevation_res - 0.5

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.n_r, self.n_a, self.n_d, self.n_e, self.range_max,
            self.azimuth_fov, self.elevation_fov, self.doppler_max, self.z0,
        )


@dataclass(frozen=True, eq=False)
class RadeTensor:
    geometry: SensorGeometry
    data: np.ndarray

    def __post_init__(self) -> None:
        data = self.data
        if not isinstance(data, np.ndarray) or data.dtype != np.float32:
            raise ValueError("RadeTensor data must be a float32 ndarray")
        if data.shape != self.geometry.shape:
            raise ValueError(f"data shape {data.shape} does not match geometry {self.geometry.shape}")
        if not np.isfinite(data).all() or (data < 0).any():
            raise ValueError("RadeTensor data must be finite and non-negative")
        data.flags.writeable = False


@dataclass(frozen=True)
class TargetSpec:
    """One point scatterer: range [m], azimuth [deg], doppler [m/s], elevation [deg]."""

    range: float
    azimuth: float
    doppler: float
    elevation: float
    amplitude: float = 1.0
    window_widths: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        vals = (self.range, self.azimuth, self.doppler, self.elevation, self.amplitude, *self.window_widths)
        if len(self.window_widths) != 4:
            raise ValueError("window_widths needs one entry per axis")
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("target parameters must be finite")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if min(self.window_widths) <= 0:
            raise ValueError("window widths must be positive")

    def check_fov(self, g: SensorGeometry) -> None:
        ok = (
            0 <= self.range <= g.range_max
            and abs(self.azimuth) <= g.azimuth_fov / 2
            and abs(self.doppler) <= g.doppler_max
            and abs(self.elevation) <= g.elevation_fov / 2
        )
        if not ok:
            raise ValueError(f"target {self} lies outside the sensor field of view")


@dataclass(frozen=True, eq=False)
class RaProjection:
    """Channels-first projection: RAD block then RAE block, azimuth zero-padded."""

    geometry: SensorGeometry
    data: np.ndarray
    n_a: int
    pad: int

    def __post_init__(self) -> None:
        g = self.geometry
        expected = (g.n_de, g.n_r, self.n_a + self.pad)
        if self.data.shape != expected:
            raise ValueError(f"projection shape {self.data.shape} != {expected}")
        if self.n_a != g.n_a:
            raise ValueError("pad record disagrees with geometry")
        if self.data.dtype not in (np.float32, np.float64):
            raise ValueError("projection data must be float32 or float64")
        if self.pad and np.any(self.data[:, :, self.n_a:]):
            raise ValueError("padded columns must be zero")
        self.data.flags.writeable = False

    @property
    def channels(self) -> int:
        return self.geometry.n_de

    @property
    def n_a_pad(self) -> int:
        return self.n_a + self.pad

    @property
    def rad(self) -> np.ndarray:
        return self.data[: self.geometry.n_d]

    @property
    def rae(self) -> np.ndarray:
        return self.data[self.geometry.n_d :]

    def unpadded(self) -> np.ndarray:
        return self.data[:, :, : self.n_a]


@dataclass(frozen=True)
class MemoryStats:
    full_bytes: int
    projection_bytes: int
    reduction_percent: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "reduction_percent", 100.0 * (1.0 - self.projection_bytes / self.full_bytes)
        )


def _round_up(n: int, k: int) -> int:
    return -(-n // k) * k


def _window(n: int, center: float, width: float) -> np.ndarray:
    idx = np.arange(n, dtype=np.float64)
    return np.exp(-((idx - center) ** 2) / (2.0 * width * width)).astype(np.float32)


def target_response(geometry: SensorGeometry, target: TargetSpec) -> np.ndarray:
    """Separable Gaussian response of one target, float32, unit-height peak times amplitude."""
    g = geometry
    wr, wa, wd, we = target.window_widths
    vr = _window(g.n_r, float(g.range_bin(target.range)), wr)
    va = _window(g.n_a, float(g.azimuth_bin(target.azimuth)), wa)
    vd = _window(g.n_d, float(g.doppler_bin(target.doppler)), wd)
    ve = _window(g.n_e, float(g.elevation_bin(target.elevation)), we)
    ra = (np.float32(target.amplitude) * vr)[:, None] * va[None, :]
    de = vd[:, None] * ve[None, :]
    return ra[:, :, None, None] * de[None, None, :, :]


def synthesize(
    geometry: SensorGeometry,
    targets: Sequence[TargetSpec],
    noise_floor: float = 0.0,
    seed: int = 0,
) -> RadeTensor:
    """Superimpose target responses on a seeded uniform noise floor."""
    if not math.isfinite(noise_floor) or noise_floor < 0:
        raise ValueError("noise_floor must be finite and non-negative")
    for t in targets:
        t.check_fov(geometry)
    if noise_floor > 0:
        rng = np.random.default_rng(seed)
        data = rng.random(geometry.shape, dtype=np.float32)
        data *= np.float32(noise_floor)
    else:
        data = np.zeros(geometry.shape, dtype=np.float32)
    for t in targets:
        data += target_response(geometry, t)
    return RadeTensor(geometry, data)


def project(t: RadeTensor) -> RaProjection:
    g = t.geometry
    rad = t.data.max(axis=3).transpose(2, 0, 1)
    rae = t.data.max(axis=2).transpose(2, 0, 1)
    pad = g.n_a_pad - g.n_a
    out = np.zeros((g.n_de, g.n_r, g.n_a_pad), dtype=t.data.dtype)
    out[: g.n_d, :, : g.n_a] = rad
    out[g.n_d :, :, : g.n_a] = rae
    return RaProjection(g, out, g.n_a, pad)


def memory_stats(geometry: SensorGeometry, element_bytes: int = 4) -> MemoryStats:
    if element_bytes not in (4, 8):
        raise ValueError("element_bytes must be 4 or 8")
    g = geometry
    full = g.n_r * g.n_a * g.n_d * g.n_e * element_bytes
    proj = g.n_de * g.n_r * g.n_a_pad * element_bytes
    return MemoryStats(full, proj)


# --- portable container -----------------------------------------------------

_GEOM = struct.Struct("<9d")


def _dtype_for(width: int) -> np.dtype:
    return np.dtype("<f4") if width == 4 else np.dtype("<f8")


def encode_tensor(obj: RadeTensor | RaProjection) -> bytes:
    data = obj.data
    width = data.dtype.itemsize
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, data.ndim)]
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    parts.append(struct.pack("<B", width))
    parts.append(_GEOM.pack(*obj.geometry.as_tuple()))
    if isinstance(obj, RaProjection):
        parts.append(struct.pack("<II", obj.n_a, obj.pad))
    parts.append(np.ascontiguousarray(data, dtype=_dtype_for(width)).tobytes())
    return b"".join(parts)


def decode_tensor(buf: bytes) -> RadeTensor | RaProjection:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends at byte {len(view)}, needed {pos + n}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError("bad magic, not a radar tensor file")
    version, rank = struct.unpack("<HH", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if rank not in (3, 4):
        raise FormatError(f"unsupported rank {rank}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    (width,) = struct.unpack("<B", take(1))
    if width not in (4, 8):
        raise FormatError(f"unsupported element width {width}")
    fields = _GEOM.unpack(take(_GEOM.size))
    try:
        geometry = SensorGeometry(*fields)
    except ValueError as exc:
        raise FormatError(f"invalid geometry block: {exc}") from exc
    if rank == 3:
        n_a, pad = struct.unpack("<II", take(8))
        if n_a != geometry.n_a or dims != (geometry.n_de, geometry.n_r, n_a + pad):
            raise FormatError(f"dimension mismatch: dims {dims} vs geometry")
    elif dims != geometry.shape:
        raise FormatError(f"dimension mismatch: dims {dims} vs geometry {geometry.shape}")
    count = math.prod(dims)
    payload = take(count * width)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=_dtype_for(width)).reshape(dims)
    arr = arr.astype(arr.dtype.newbyteorder("="))
    try:
        if rank == 3:
            return RaProjection(geometry, arr, n_a, pad)
        return RadeTensor(geometry, arr)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_tensor(path: str | Path, obj: RadeTensor | RaProjection) -> None:
    atomic_write_bytes(Path(path), encode_tensor(obj))


def load_tensor(path: str | Path) -> RadeTensor | RaProjection:
    return decode_tensor(Path(path).read_bytes())
