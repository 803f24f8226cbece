"""Training objectives with analytic gradients with respect to head outputs.

* focal: penalty-reduced pixelwise focal loss against Gaussian center heatmaps
* gwd: Gaussian-Wasserstein distance between box Gaussians, ``1 - 1/(tau + sqrt(d2))``
* smooth-L1 on the eight raw regression channels of matched bins

The three components are divided by their mini-batch mean (treated as a
constant) and combined with weights (2, 1, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, bin_centers_xy, decode, iou_bev
from .network import N_PARAMS, HeadOutputs
from .tensor import SensorGeometry

_KZ = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 3.0
    alpha: float = 2.0
    gamma: float = 4.0
    tau: float = 1.65
    beta: float = 1.0
    w_foc: float = 2.0
    w_gwd: float = 1.0
    w_l1: float = 1.0
    eps: float = 1e-6
    match_iou: float = 0.1
    tau_cls: float = 0.3
    gwd_mode: str = "3d"

    def __post_init__(self) -> None:
        if self.gwd_mode not in ("3d", "bev"):
            raise ValueError("gwd_mode must be '3d' or 'bev'")
        if min(self.sigma, self.tau, self.beta, self.eps) <= 0:
            raise ValueError("sigma, tau, beta and eps must be positive")


@dataclass(frozen=True, eq=False)
class FocalTarget:
    map: np.ndarray  # (n_cls, n_r, n_a_pad)
    peaks: tuple  # ((class, r, a), ...)


@dataclass(frozen=True, eq=False)
class Targets:
    focal: FocalTarget
    params: np.ndarray  # (8, n_r, n_a_pad)
    mask: np.ndarray  # (n_r, n_a_pad) bool


def canonical_gt(gt: Sequence[tuple[int, Box3D]]) -> list[tuple[int, Box3D]]:
    return sorted(((int(c), b) for c, b in gt), key=lambda cb: (cb[0], *cb[1].as_array()))


def center_bin(geometry: SensorGeometry, box: Box3D) -> tuple[int, int]:
    rng = math.hypot(box.x, box.y)
    az = math.degrees(math.atan2(box.y, box.x))
    r = math.floor(rng / geometry.range_res)
    a = math.floor((az + geometry.azimuth_fov / 2) / geometry.azimuth_res)
    if not (0 <= r < geometry.n_r and 0 <= a < geometry.n_a):
        raise ValueError(f"box center ({box.x:.3f}, {box.y:.3f}) lies outside the range-azimuth grid")
    return r, a


def encode_box(geometry: SensorGeometry, box: Box3D, r: int, a: int) -> np.ndarray:
    """Raw regression vector of ``box`` relative to bin (r, a)."""
    xb, yb = bin_centers_xy(geometry, r, a)
    return np.array([
        box.x - float(xb), box.y - float(yb), box.z - geometry.z0,
        math.log(box.l), math.log(box.w), math.log(box.h),
        math.sin(box.yaw), math.cos(box.yaw),
    ])


def build_targets(
    gt: Sequence[tuple[int, Box3D]],
    geometry: SensorGeometry,
    n_cls: int,
    n_a_pad: int | None = None,
    cfg: LossConfig = LossConfig(),
) -> Targets:
    """Gaussian center heatmaps plus per-peak regression targets.

    Boxes are processed in canonical order; if two boxes share a center bin the
    regression target of the first one wins.
    """
    g = geometry
    n_a_pad = g.n_a_pad if n_a_pad is None else n_a_pad
    heat = np.zeros((n_cls, g.n_r, n_a_pad))
    params = np.zeros((N_PARAMS, g.n_r, n_a_pad))
    mask = np.zeros((g.n_r, n_a_pad), dtype=bool)
    rr = np.arange(g.n_r)[:, None]
    aa = np.arange(g.n_a)[None, :]
    peaks = []
    for cls, box in canonical_gt(gt):
        if not 1 <= cls < n_cls:
            raise ValueError(f"class {cls} outside 1..{n_cls - 1}")
        r, a = center_bin(g, box)
        bump = np.exp(-((rr - r) ** 2 + (aa - a) ** 2) / (2.0 * cfg.sigma**2))
        np.maximum(heat[cls, :, : g.n_a], bump, out=heat[cls, :, : g.n_a])
        peaks.append((cls, r, a))
        if not mask[r, a]:
            mask[r, a] = True
            params[:, r, a] = encode_box(g, box, r, a)
    return Targets(FocalTarget(heat, tuple(peaks)), params, mask)


def heads_from_targets(t: Targets) -> HeadOutputs:
    """Oracle head outputs: the target heatmap as confidence, targets as parameters."""
    return HeadOutputs(conf=t.focal.map.copy(), params=t.params.copy())


# --- focal ------------------------------------------------------------------


def focal_loss(conf: np.ndarray, target: np.ndarray | FocalTarget, cfg: LossConfig = LossConfig()):
    """Mean penalty-reduced focal loss and its gradient w.r.t. ``conf``."""
    y = target.map if isinstance(target, FocalTarget) else target
    if conf.shape != y.shape:
        raise ValueError(f"shape mismatch {conf.shape} vs {y.shape}")
    a, gm, eps = cfg.alpha, cfg.gamma, cfg.eps
    p_raw = conf.astype(np.float64)
    p = np.clip(p_raw, eps, 1.0 - eps)
    pos = y == 1.0
    neg_w = (1.0 - y) ** gm
    log_p, log_q = np.log(p), np.log1p(-p)
    loss = np.where(pos, -((1.0 - p) ** a) * log_p, -neg_w * p**a * log_q)
    d_pos = a * (1.0 - p) ** (a - 1) * log_p - (1.0 - p) ** a / p
    d_neg = -neg_w * (a * p ** (a - 1) * log_q - p**a / (1.0 - p))
    grad = np.where(pos, d_pos, d_neg)
    grad[(p_raw < eps) | (p_raw > 1.0 - eps)] = 0.0
    n = loss.size
    return float(loss.sum() / n), grad / n


# --- smooth L1 --------------------------------------------------------------


def smooth_l1_loss(pred, target, mask=None, beta: float = 1.0):
    """Elementwise smooth-L1 averaged over selected elements; 0 for an empty selection.

    With ``mask`` of shape ``pred.shape[1:]`` the leading axis is the parameter
    axis and only masked positions contribute.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shape mismatch")
    sel = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(mask, pred.shape)
    n = int(sel.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    d = np.where(sel, pred - target, 0.0)
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(quad, d / beta, np.sign(d)) * sel / n
    return float(loss[sel].sum() / n), grad


# --- GWD --------------------------------------------------------------------


def rot_z(theta: float, dim: int = 3) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    r = np.eye(dim)
    r[:2, :2] = ((c, -s), (s, c))
    return r


def box_gaussian(box: Box3D, mode: str = "3d") -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance R diag((l/2)^2, (w/2)^2, (h/2)^2) R^T."""
    half = np.array([box.l, box.w, box.h]) / 2.0
    rot = rot_z(box.yaw)
    sigma = rot @ np.diag(half**2) @ rot.T
    mu = box.center
    if mode == "bev":
        return mu[:2], sigma[:2, :2]
    return mu, sigma


def sqrtm_psd(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    if vals.min() <= 0:
        raise ValueError("covariance is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def _bures_parts(s1: np.ndarray, s2: np.ndarray):
    r1, r2 = sqrtm_psd(s1), sqrtm_psd(s2)
    u, sv, vt = np.linalg.svd(r1 @ r2)
    q = vt.T @ u.T
    # ||r1 - r2 q||^2 == tr s1 + tr s2 - 2 tr sqrt(r1 s2 r1), without cancellation
    resid = r1 - r2 @ q
    return float(np.sum(resid * resid)), r1, u, sv


def gwd_distance2(mu1, s1, mu2, s2) -> float:
    """Squared 2-Wasserstein distance between N(mu1, s1) and N(mu2, s2)."""
    dmu = np.asarray(mu1, float) - np.asarray(mu2, float)
    return float(dmu @ dmu) + _bures_parts(s1, s2)[0]


def gwd_distance2_trace(mu1, s1, mu2, s2) -> float:
    """Textbook trace form, kept for cross-checking."""
    r1 = sqrtm_psd(s1)
    m = r1 @ s2 @ r1
    vals = np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0.0, None)
    dmu = np.asarray(mu1, float) - np.asarray(mu2, float)
    return float(dmu @ dmu + np.trace(s1) + np.trace(s2) - 2.0 * np.sqrt(vals).sum())


def box_distance2(a: Box3D, b: Box3D, mode: str = "3d") -> float:
    return gwd_distance2(*box_gaussian(a, mode), *box_gaussian(b, mode))


def gwd_transform(d2: float, tau: float) -> float:
    return 1.0 - 1.0 / (tau + math.sqrt(max(d2, 0.0)))


def gwd_loss(pred: Box3D, gt: Box3D, cfg: LossConfig = LossConfig()) -> float:
    return gwd_transform(box_distance2(pred, gt, cfg.gwd_mode), cfg.tau)


def box_from_raw(raw: np.ndarray, ref_xyz: Sequence[float]) -> Box3D:
    raw = np.asarray(raw, dtype=np.float64)
    return Box3D(
        ref_xyz[0] + raw[0], ref_xyz[1] + raw[1], ref_xyz[2] + raw[2],
        math.exp(raw[3]), math.exp(raw[4]), math.exp(raw[5]),
        math.atan2(raw[6], raw[7]),
    )


def gwd_loss_raw(raw: np.ndarray, ref_xyz: Sequence[float], gt: Box3D, cfg: LossConfig = LossConfig()):
    """GWD loss of the box encoded by ``raw`` at reference point ``ref_xyz``, and d loss / d raw."""
    raw = np.asarray(raw, dtype=np.float64)
    pred = box_from_raw(raw, ref_xyz)
    mode = cfg.gwd_mode
    k = 3 if mode == "3d" else 2
    mu1, s1 = box_gaussian(pred, mode)
    mu2, s2 = box_gaussian(gt, mode)
    bures, r1, u, sv = _bures_parts(s1, s2)
    dmu = mu1 - mu2
    d2 = float(dmu @ dmu) + bures
    f = math.sqrt(max(d2, 0.0))
    value = 1.0 - 1.0 / (cfg.tau + f)

    # d(d2)/d(sigma1) = I - T, T = r1^-1 sqrt(r1 s2 r1) r1^-1 (transport map)
    r1_inv = np.linalg.inv(r1)
    t_map = r1_inv @ (u * sv) @ u.T @ r1_inv
    g_sigma = np.eye(k) - (t_map + t_map.T) / 2.0

    rot = rot_z(pred.yaw, 3)[:k, :k]
    half2 = (np.array([pred.l, pred.w, pred.h]) / 2.0) ** 2
    local = rot.T @ g_sigma @ rot  # gradient expressed in the box frame
    d_d2 = np.zeros(N_PARAMS)
    d_d2[:k] = 2.0 * dmu
    for i in range(k):
        d_d2[3 + i] = 2.0 * half2[i] * local[i, i]
    dmat = np.diag(half2[:k])
    kz = _KZ[:k, :k]
    d_theta = float(np.sum(local * (kz @ dmat - dmat @ kz)))
    s, c = raw[6], raw[7]
    nrm = s * s + c * c
    d_d2[6] = d_theta * c / nrm
    d_d2[7] = -d_theta * s / nrm

    dl_dd2 = 1.0 / (cfg.tau + f) ** 2 / (2.0 * max(f, 1e-12))
    return value, dl_dd2 * d_d2


# --- combined loss ----------------------------------------------------------


@dataclass
class FrameLoss:
    foc: float
    gwd: float
    l1: float
    grad_conf: np.ndarray
    grad_params_gwd: np.ndarray
    grad_params_l1: np.ndarray
    matches: list = field(default_factory=list)  # [(r, a, gt_index)]


@dataclass
class LossReport:
    l_foc: float
    l_gwd: float
    l_l1: float
    n_foc: float
    n_gwd: float
    n_l1: float
    l_all: float
    normalizers: tuple[float, float, float]
    grad_conf: list
    grad_params: list

    def record(self) -> str:
        return f"{self.l_foc!r} {self.l_gwd!r} {self.l_l1!r} {self.l_all!r}"


def match_predictions(outputs: HeadOutputs, gt, geometry: SensorGeometry, cfg: LossConfig):
    """Assign each decoded bin to its highest-BEV-IoU ground truth of the same class.

    Returns ``[(r, a, gt_index)]`` with indices into ``canonical_gt(gt)``.
    """
    gts = canonical_gt(gt)
    if not gts:
        return [], gts
    matches = []
    for det in decode(outputs, geometry, cfg.tau_cls):
        best, best_iou = None, cfg.match_iou
        for j, (cls, box) in enumerate(gts):
            if cls != det.class_id:
                continue
            iou = iou_bev(det.box, box)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            matches.append((det.cell[0], det.cell[1], best))
    return matches, gts


def frame_loss(outputs: HeadOutputs, gt, geometry: SensorGeometry, cfg: LossConfig = LossConfig()) -> FrameLoss:
    n_cls, _, n_a_pad = outputs.conf.shape
    targets = build_targets(gt, geometry, n_cls, n_a_pad, cfg)
    foc, g_conf = focal_loss(outputs.conf, targets.focal, cfg)
    matches, gts = match_predictions(outputs, gt, geometry, cfg)
    g_gwd = np.zeros(outputs.params.shape)
    g_l1 = np.zeros(outputs.params.shape)
    gwd = l1 = 0.0
    if matches:
        k = len(matches)
        preds = np.empty((k, N_PARAMS))
        tgts = np.empty((k, N_PARAMS))
        for i, (r, a, j) in enumerate(matches):
            raw = outputs.params[:, r, a].astype(np.float64)
            xb, yb = bin_centers_xy(geometry, r, a)
            val, g = gwd_loss_raw(raw, (float(xb), float(yb), geometry.z0), gts[j][1], cfg)
            gwd += val / k
            g_gwd[:, r, a] += g / k
            preds[i] = raw
            tgts[i] = encode_box(geometry, gts[j][1], r, a)
        l1, g = smooth_l1_loss(preds, tgts, beta=cfg.beta)
        for i, (r, a, _) in enumerate(matches):
            g_l1[:, r, a] += g[i]
    return FrameLoss(foc, gwd, l1, g_conf, g_gwd, g_l1, matches)


def _safe_div(x: float, c: float) -> float:
    return x / c if c > 0 else 0.0


def total_loss(batch, geometry: SensorGeometry, cfg: LossConfig = LossConfig(), normalizers=None) -> LossReport:
    """Weighted, mean-normalized loss over a mini-batch of ``(HeadOutputs, gt)`` pairs.

    ``normalizers`` fixes the per-component divisors; by default they are the
    batch means, held constant for the gradient.
    """
    frames = [frame_loss(h, gt, geometry, cfg) for h, gt in batch]
    b = len(frames)
    if b == 0:
        raise ValueError("empty batch")
    raw = [sum(getattr(f, k) for f in frames) / b for k in ("foc", "gwd", "l1")]
    c_foc, c_gwd, c_l1 = normalizers if normalizers is not None else raw
    n_foc, n_gwd, n_l1 = _safe_div(raw[0], c_foc), _safe_div(raw[1], c_gwd), _safe_div(raw[2], c_l1)
    l_all = cfg.w_foc * n_foc + cfg.w_gwd * n_gwd + cfg.w_l1 * n_l1
    kf = cfg.w_foc * _safe_div(1.0, c_foc) / b
    kg = cfg.w_gwd * _safe_div(1.0, c_gwd) / b
    kl = cfg.w_l1 * _safe_div(1.0, c_l1) / b
    grad_conf = [kf * f.grad_conf for f in frames]
    grad_params = [kg * f.grad_params_gwd + kl * f.grad_params_l1 for f in frames]
    return LossReport(
        raw[0], raw[1], raw[2], n_foc, n_gwd, n_l1, l_all,
        (c_foc, c_gwd, c_l1), grad_conf, grad_params,
    )
