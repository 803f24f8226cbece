"""Central finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D
from .losses import (
    LossConfig,
    encode_box,
    focal_loss,
    gwd_loss_raw,
    smooth_l1_loss,
    total_loss,
    center_bin,
)
from .network import HeadOutputs
from .tensor import SensorGeometry

STEP = 1e-4
TOLERANCE = 1e-3


def central_difference(f, x: np.ndarray, step: float = STEP, indices=None) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        g[i] = (hi - lo) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def random_box(rng: np.random.Generator, center=(0.0, 0.0, 0.0), spread: float = 1.5) -> Box3D:
    c = np.asarray(center) + rng.normal(0.0, spread, 3)
    dims = np.exp(rng.normal(0.5, 0.5, 3))
    return Box3D(*c, *dims, rng.uniform(-math.pi, math.pi))


def random_raw(rng: np.random.Generator) -> np.ndarray:
    return np.concatenate([rng.normal(0, 1, 3), rng.normal(0.5, 0.5, 3), rng.normal(0, 1, 2)])


def check_gwd(rng, cfg: LossConfig = LossConfig()) -> float:
    ref = tuple(rng.uniform(-20, 20, 3))
    raw = random_raw(rng)
    gt = random_box(rng, ref)
    _, g = gwd_loss_raw(raw, ref, gt, cfg)
    fd = central_difference(lambda r: gwd_loss_raw(r, ref, gt, cfg)[0], raw)
    return rel_error(g, fd)


def check_focal(rng, cfg: LossConfig = LossConfig(), shape=(3, 6, 6)) -> float:
    target = np.zeros(shape)
    for _ in range(2):
        c, r, a = (int(rng.integers(1, shape[0])), int(rng.integers(shape[1])), int(rng.integers(shape[2])))
        rr, aa = np.mgrid[: shape[1], : shape[2]]
        target[c] = np.maximum(target[c], np.exp(-((rr - r) ** 2 + (aa - a) ** 2) / (2 * cfg.sigma**2)))
    conf = rng.uniform(0.02, 0.98, shape)
    _, g = focal_loss(conf, target, cfg)
    fd = central_difference(lambda p: focal_loss(p, target, cfg)[0], conf)
    return rel_error(g, fd)


def check_smooth_l1(rng, cfg: LossConfig = LossConfig(), k: int = 5) -> float:
    pred = rng.normal(0, 1.5, (k, 8))
    target = rng.normal(0, 1.5, (k, 8))
    # keep clear of the |d| = beta kink where the second derivative jumps
    d = pred - target
    near = np.abs(np.abs(d) - cfg.beta) < 10 * STEP
    pred[near] += 0.01
    _, g = smooth_l1_loss(pred, target, beta=cfg.beta)
    fd = central_difference(lambda p: smooth_l1_loss(p, target, beta=cfg.beta)[0], pred)
    return rel_error(g, fd)


TINY_GEOMETRY = SensorGeometry(n_r=8, n_a=8, n_d=4, n_e=4, range_max=24.0, azimuth_fov=60.0, elevation_fov=30.0)


def random_frame(rng, geometry: SensorGeometry = TINY_GEOMETRY, n_cls: int = 3, cfg: LossConfig = LossConfig()):
    """Small random head outputs plus ground truth, with some bins regressing near their GT."""
    g = geometry
    gt = []
    used = set()
    while len(gt) < 2:
        r = int(rng.integers(2, g.n_r))
        a = int(rng.integers(1, g.n_a - 1))
        if (r, a) in used:
            continue
        used.add((r, a))
        rng_m = float(g.range_of(r + rng.uniform(-0.4, 0.4)))
        az = math.radians(float(g.azimuth_of(a + rng.uniform(-0.4, 0.4))))
        box = Box3D(rng_m * math.cos(az), rng_m * math.sin(az), rng.uniform(-0.5, 1.0),
                    rng.uniform(2.0, 4.5), rng.uniform(1.2, 2.0), rng.uniform(1.0, 2.0), rng.uniform(-3, 3))
        gt.append((int(rng.integers(1, n_cls)), box))
    conf = rng.uniform(0.02, 0.25, (n_cls, g.n_r, g.n_a_pad))
    params = rng.normal(0, 0.3, (8, g.n_r, g.n_a_pad))
    params[3:6] += 0.5
    for cls, box in gt:
        r, a = center_bin(g, box)
        for dr, da in ((0, 0), (0, 1), (1, 0)):
            rr, aa = r + dr, a + da
            if rr >= g.n_r or aa >= g.n_a:
                continue
            conf[cls, rr, aa] = rng.uniform(0.45, 0.95)
            params[:, rr, aa] = encode_box(g, box, rr, aa) + rng.normal(0, 0.15, 8)
    # keep every confidence clear of the decode threshold
    close = np.abs(conf - cfg.tau_cls) < 0.02
    conf[close] += 0.05
    return HeadOutputs(conf, params), gt


def check_total(rng, cfg: LossConfig = LossConfig(), batch: int = 2, geometry: SensorGeometry = TINY_GEOMETRY) -> float:
    frames = [random_frame(rng, geometry, cfg=cfg) for _ in range(batch)]
    report = total_loss(frames, geometry, cfg)
    norms = report.normalizers
    worst = 0.0
    for i, (h, gt) in enumerate(frames):
        def f_conf(c, i=i):
            b = list(frames)
            b[i] = (HeadOutputs(c, frames[i][0].params), gt)
            return total_loss(b, geometry, cfg, normalizers=norms).l_all

        def f_params(p, i=i):
            b = list(frames)
            b[i] = (HeadOutputs(frames[i][0].conf, p), gt)
            return total_loss(b, geometry, cfg, normalizers=norms).l_all

        worst = max(worst, rel_error(report.grad_conf[i], central_difference(f_conf, h.conf)))
        worst = max(worst, rel_error(report.grad_params[i], central_difference(f_params, h.params)))
    return worst


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_all(seed: int = 0, instances: int = 100, total_instances: int = 3) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    suites = [
        ("gwd_3d", lambda: check_gwd(rng, LossConfig(gwd_mode="3d")), instances),
        ("gwd_bev", lambda: check_gwd(rng, LossConfig(gwd_mode="bev")), instances),
        ("focal", lambda: check_focal(rng), instances),
        ("smooth_l1", lambda: check_smooth_l1(rng), instances),
        ("total", lambda: check_total(rng), total_instances),
    ]
    for name, fn, n in suites:
        worst = max(fn() for _ in range(n))
        results.append(SuiteResult(name, n, worst))
    return results
