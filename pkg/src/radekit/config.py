"""Run configuration: one INI-style file, sectioned per module, plus overrides.

Unknown sections or keys are rejected. ``dump()`` writes the effective config
in the same syntax, so a dumped config reproduces a run exactly.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .evaluation import Roi
from .geometry import DEFAULT_NMS_IOU, DEFAULT_TAU_CLS
from .losses import LossConfig
from .network import NetworkConfig
from .tensor import SensorGeometry

ENV_VAR = "RADEKIT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSection:
    n_cls: int = 5
    feature_dim: int = 128
    use_cbam: bool = True
    use_dilated_neck: bool = True
    use_expanded_heads: bool = True
    use_input_stem: bool = False
    use_feature_expansion: bool = False
    groupnorm_groups: int = 32
    cbam_reduction: int = 16
    seed: int = 0


@dataclass(frozen=True)
class DecodeSection:
    tau_cls: float = DEFAULT_TAU_CLS
    nms_iou: float = DEFAULT_NMS_IOU

    def __post_init__(self) -> None:
        if not 0 < self.tau_cls < 1 or not 0 < self.nms_iou <= 1:
            raise ValueError("tau_cls must lie in (0, 1) and nms_iou in (0, 1]")


@dataclass(frozen=True)
class EvalSection:
    metrics: tuple = ("3D", "BEV")
    iou_thrs: tuple = (0.3, 0.5)
    interp: str = "r40"

    def __post_init__(self) -> None:
        if not set(self.metrics) <= {"3D", "BEV"} or not self.metrics:
            raise ValueError("metrics must be drawn from 3D, BEV")
        if not all(0 < t <= 1 for t in self.iou_thrs):
            raise ValueError("iou thresholds must lie in (0, 1]")
        if self.interp not in ("r40", "exact"):
            raise ValueError("interp must be r40 or exact")


@dataclass(frozen=True)
class SynthSection:
    noise_floor: float = 0.05
    seed: int = 0
    objects_per_frame: int = 3


SECTIONS = {
    "sensor": SensorGeometry,
    "network": NetworkSection,
    "decode": DecodeSection,
    "roi": Roi,
    "loss": LossConfig,
    "eval": EvalSection,
    "synth": SynthSection,
}


@dataclass(frozen=True)
class RunConfig:
    sensor: SensorGeometry = field(default_factory=SensorGeometry)
    network: NetworkSection = field(default_factory=NetworkSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    roi: Roi = field(default_factory=Roi)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def __post_init__(self) -> None:
        self.network_config()  # validates cross-section invariants

    def network_config(self) -> NetworkConfig:
        g = self.sensor
        n = self.network
        return NetworkConfig(
            n_de=g.n_de, n_r=_pad8(g.n_r), n_a_pad=g.n_a_pad, n_d=g.n_d,
            **dataclasses.asdict(n),
        )

    def loss_config(self) -> LossConfig:
        return dataclasses.replace(self.loss, tau_cls=self.decode.tau_cls)

    def dump(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec) if f.init}
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in cp[name].items())
            lines.append("")
        return "\n".join(lines)


def _pad8(n: int) -> int:
    if n % 8:
        raise ConfigError(f"sensor.n_r = {n} must be divisible by 8")
    return n


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        proto = default[0] if default else ""
        return tuple(_parse(p, proto) for p in parts)
    return raw


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    """Construct a RunConfig from ``{section: {key: text}}``, rejecting unknown names."""
    kwargs = {}
    for sec, entries in values.items():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        cls = SECTIONS[sec]
        proto = cls()
        names = {f.name for f in dataclasses.fields(cls) if f.init}
        parsed = {}
        for key, text in entries.items():
            if key not in names:
                raise ConfigError(f"unknown key {sec}.{key}")
            try:
                parsed[key] = _parse(text, getattr(proto, key))
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}: {exc}") from None
        try:
            kwargs[sec] = cls(**parsed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_text(text: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return {s: dict(cp[s]) for s in cp.sections()}


def apply_overrides(values: dict[str, dict[str, str]], overrides: Sequence[str]) -> dict[str, dict[str, str]]:
    out = {k: dict(v) for k, v in values.items()}
    for item in overrides:
        key, sep, val = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not section.key=value")
        out.setdefault(sec, {})[name] = val
    return out


def load(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load ``path`` (or ``$RADEKIT_CONFIG``), then apply ``section.key=value`` overrides."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    values = parse_text(Path(path).read_text()) if path else {}
    return build(apply_overrides(values, overrides))
