"""Scene scripts: labeled objects that double as synthetic radar targets.

Script syntax, one directive per line (``#`` starts a comment)::

    frame <frame_id> [condition]
    obj <class_id> <x> <y> <z> <l> <w> <h> <yaw> [doppler=<m/s>] [amp=<a>] [width=<w> | width=<wr>,<wa>,<wd>,<we>]

Objects before the first ``frame`` line belong to frame ``000000`` (condition
``normal``). An empty script yields a single empty frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D
from .losses import center_bin
from .tensor import SensorGeometry, TargetSpec


class ScriptError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box3D
    doppler: float = 0.0
    amplitude: float = 1.0
    widths: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def target(self, geometry: SensorGeometry) -> TargetSpec:
        b = self.box
        rng = math.hypot(b.x, b.y)
        return TargetSpec(
            range=rng,
            azimuth=math.degrees(math.atan2(b.y, b.x)),
            doppler=self.doppler,
            elevation=math.degrees(math.atan2(b.z - geometry.z0, rng)),
            amplitude=self.amplitude,
            window_widths=self.widths,
        )


@dataclass
class Scene:
    frame_id: str
    condition: str = "normal"
    objects: list = field(default_factory=list)

    def labels(self) -> list[tuple[int, Box3D]]:
        return [(o.class_id, o.box) for o in self.objects]


def parse_script(text: str) -> list[Scene]:
    scenes: list[Scene] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "frame":
            if not 1 <= len(rest) <= 2:
                raise ScriptError(lineno, "usage: frame <id> [condition]")
            if any(s.frame_id == rest[0] for s in scenes):
                raise ScriptError(lineno, f"duplicate frame id {rest[0]}")
            scenes.append(Scene(rest[0], rest[1] if len(rest) > 1 else "normal"))
        elif head == "obj":
            if not scenes:
                scenes.append(Scene("000000"))
            scenes[-1].objects.append(_parse_obj(lineno, rest))
        else:
            raise ScriptError(lineno, f"unknown directive {head!r}")
    return scenes or [Scene("000000")]


def _parse_obj(lineno: int, tokens: list[str]) -> SceneObject:
    pos = [t for t in tokens if "=" not in t]
    kw = dict(t.split("=", 1) for t in tokens if "=" in t)
    if len(pos) != 8:
        raise ScriptError(lineno, f"obj needs 8 positional fields, got {len(pos)}")
    unknown = set(kw) - {"doppler", "amp", "width"}
    if unknown:
        raise ScriptError(lineno, f"unknown options {sorted(unknown)}")
    try:
        cls = int(pos[0])
        box = Box3D(*(float(v) for v in pos[1:]))
        doppler = float(kw.get("doppler", 0.0))
        amp = float(kw.get("amp", 1.0))
        w = [float(v) for v in kw.get("width", "1.0").split(",")]
    except ValueError as exc:
        raise ScriptError(lineno, str(exc)) from None
    if len(w) == 1:
        w = w * 4
    if len(w) != 4:
        raise ScriptError(lineno, "width takes one value or four comma-separated values")
    if cls < 1:
        raise ScriptError(lineno, "class_id must be >= 1")
    return SceneObject(cls, box, doppler, amp, tuple(w))


def format_script(scenes: list[Scene]) -> str:
    out = []
    for s in scenes:
        out.append(f"frame {s.frame_id} {s.condition}")
        for o in s.objects:
            b = o.box
            nums = " ".join(repr(float(v)) for v in (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw))
            width = ",".join(repr(float(v)) for v in o.widths)
            out.append(f"obj {o.class_id} {nums} doppler={o.doppler!r} amp={o.amplitude!r} width={width}")
    return "\n".join(out) + "\n"


# nominal (l, w, h) per class id
CLASS_DIMS = {1: (4.5, 1.9, 1.6), 2: (10.0, 2.6, 3.2), 3: (0.7, 0.7, 1.7), 4: (1.8, 0.7, 1.5)}
CONDITIONS = ("normal", "overcast", "fog", "rain", "sleet", "lightsnow", "heavysnow")


def random_scene(
    rng: np.random.Generator,
    geometry: SensorGeometry,
    frame_id: str,
    n_objects: int = 3,
    n_classes: int = 4,
    condition: str | None = None,
    x_range: tuple[float, float] = (5.0, 70.0),
    y_half: float = 6.0,
    max_tries: int = 1000,
) -> Scene:
    """Non-overlapping objects with distinct, well-separated center bins inside the FoV."""
    objects: list[SceneObject] = []
    bins: list[tuple[int, int]] = []
    x_hi = min(x_range[1], geometry.range_max * 0.95)
    tries = 0
    while len(objects) < n_objects:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place objects; scene too crowded")
        cls = int(rng.integers(1, n_classes + 1))
        l, w, h = (d * rng.uniform(0.85, 1.15) for d in CLASS_DIMS.get(cls, (2.0, 1.0, 1.5)))
        x = rng.uniform(x_range[0], x_hi)
        y = rng.uniform(-y_half, y_half)
        az = math.degrees(math.atan2(y, x))
        if abs(az) > geometry.azimuth_fov / 2 * 0.95:
            continue
        z = geometry.z0 + rng.uniform(-0.5, 1.0)
        box = Box3D(x, y, z, l, w, h, rng.uniform(-math.pi, math.pi))
        try:
            rb, ab = center_bin(geometry, box)
        except ValueError:
            continue
        if any(abs(rb - r) < 3 and abs(ab - a) < 3 for r, a in bins):
            continue
        if any(_close(box, o.box) for o in objects):
            continue
        elev = math.degrees(math.atan2(z - geometry.z0, math.hypot(x, y)))
        if abs(elev) > geometry.elevation_fov / 2:
            continue
        doppler = rng.uniform(-0.9, 0.9) * geometry.doppler_max
        objects.append(SceneObject(cls, box, doppler, float(rng.uniform(0.5, 1.0))))
        bins.append((rb, ab))
    cond = condition if condition is not None else CONDITIONS[int(rng.integers(len(CONDITIONS)))]
    return Scene(frame_id, cond, objects)


def _close(a: Box3D, b: Box3D) -> bool:
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    return math.hypot(a.x - b.x, a.y - b.y) < reach
