"""ROI filtering, greedy matching and AP_3D / AP_BEV over a dataset."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .formats import ManifestEntry, read_detections, read_labels, read_manifest, resolve
from .geometry import IOU_FUNCS, Box3D, Detection, sort_key

log = logging.getLogger(__name__)

TOTAL = "total"
N_RECALL_POINTS = 40


@dataclass(frozen=True)
class Roi:
    x: tuple[float, float] = (0.0, 72.0)
    y: tuple[float, float] = (-6.4, 6.4)
    z: tuple[float, float] = (-2.0, 6.0)

    def __post_init__(self) -> None:
        for lo, hi in (self.x, self.y, self.z):
            if not lo < hi:
                raise ValueError("ROI bounds need min < max on every axis")

    def contains(self, box: Box3D) -> bool:
        return (
            self.x[0] <= box.x <= self.x[1]
            and self.y[0] <= box.y <= self.y[1]
            and self.z[0] <= box.z <= self.z[1]
        )


def _box_of(item) -> Box3D:
    return item.box if isinstance(item, Detection) else item[1]


def filter_roi(items, roi: Roi = Roi()) -> list:
    """Keep detections or ``(class, box)`` labels whose center is inside the closed ROI."""
    return [it for it in items if roi.contains(_box_of(it))]


def _gt_key(cb):
    return (cb[0], *cb[1].as_array())


def match_frame(preds: Sequence[Detection], gts: Sequence[tuple[int, Box3D]], class_id: int, metric: str, iou_thr: float):
    """Score-greedy one-to-one matching for one class in one frame.

    Returns ``(scored, n_gt)`` where ``scored`` is ``[(sort_key, is_tp, det)]``.
    """
    iou = IOU_FUNCS[metric]
    gt_boxes = [b for c, b in sorted(gts, key=_gt_key) if c == class_id]
    taken = [False] * len(gt_boxes)
    scored = []
    for det in sorted((d for d in preds if d.class_id == class_id), key=sort_key):
        best, best_iou = -1, iou_thr
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(det.box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        scored.append((sort_key(det), best >= 0, det))
    return scored, len(gt_boxes)


def pr_curve(tp_flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each ranked prediction."""
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.int64))
    fp = np.arange(1, len(tp_flags) + 1) - tp
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def ap_from_flags(tp_flags: Sequence[bool], n_gt: int, interp: str = "r40") -> float | None:
    """AP from ranked TP/FP flags; ``None`` when there is no ground truth."""
    if n_gt == 0:
        return None
    if len(tp_flags) == 0 or not any(tp_flags):
        return 0.0
    recall, precision = pr_curve(tp_flags, n_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interp == "exact":
        prev = np.concatenate([[0.0], recall[:-1]])
        return float(np.sum((recall - prev) * envelope))
    if interp != "r40":
        raise ValueError(f"unknown interpolation {interp!r}")
    points = np.arange(1, N_RECALL_POINTS + 1) / N_RECALL_POINTS
    idx = np.searchsorted(recall, points - 1e-12, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def _ranked(frames_scored) -> list[bool]:
    flat = []
    for fid, scored in frames_scored:
        for key, tp, _ in scored:
            flat.append((key, fid, tp))
    flat.sort(key=lambda t: (t[0], t[1]))
    return [tp for _, _, tp in flat]


def _classes(preds, gts) -> set[int]:
    return {d.class_id for d in preds} | {c for c, _ in gts}


def average_precision(
    preds: Sequence[Detection],
    gts: Sequence[tuple[int, Box3D]],
    metric: str = "3D",
    iou_thr: float = 0.5,
    class_id: int | None = None,
    interp: str = "r40",
) -> float | None:
    """AP of one class over a single frame's (already ROI-filtered) items."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    if metric not in IOU_FUNCS:
        raise ValueError(f"metric must be one of {sorted(IOU_FUNCS)}")
    if class_id is None:
        cls = _classes(preds, gts)
        if len(cls) > 1:
            raise ValueError("several classes present; pass class_id")
        if not cls:
            return None
        class_id = cls.pop()
    scored, n_gt = match_frame(preds, gts, class_id, metric, iou_thr)
    return ap_from_flags([tp for _, tp, _ in scored], n_gt, interp)


@dataclass
class FrameData:
    frame_id: str
    condition: str
    preds: list
    gts: list


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)  # (class, condition, metric, thr) -> AP | None
    mean_ap: dict = field(default_factory=dict)  # (condition, metric, thr) -> mAP | None
    counts: dict = field(default_factory=dict)  # (class, condition, metric, thr) -> (tp, fp, fn)
    curves: dict = field(default_factory=dict)  # (class, condition, metric, thr) -> (recall, precision)
    classes: list = field(default_factory=list)
    conditions: list = field(default_factory=list)
    metrics: tuple = ()
    thresholds: tuple = ()

    def to_csv(self) -> str:
        lines = ["class,condition,metric,iou_thr,AP"]
        for cond in self.conditions:
            for metric in self.metrics:
                for thr in self.thresholds:
                    for cls in self.classes:
                        ap = self.ap[(cls, cond, metric, thr)]
                        lines.append(f"{cls},{cond},{metric},{thr:g},{_fmt(ap)}")
                    lines.append(f"mAP,{cond},{metric},{thr:g},{_fmt(self.mean_ap[(cond, metric, thr)])}")
        return "\n".join(lines) + "\n"

    def to_table(self, thr: float | None = None) -> str:
        """Classes x conditions x {3D, BEV}, one block per IoU threshold, values in percent."""
        blocks = []
        for t in self.thresholds if thr is None else (thr,):
            head = ["class"] + [f"{c}:{m}" for c in self.conditions for m in self.metrics]
            rows = [head]
            for cls in self.classes:
                rows.append([str(cls)] + [
                    _pct(self.ap[(cls, c, m, t)]) for c in self.conditions for m in self.metrics
                ])
            rows.append(["mAP"] + [_pct(self.mean_ap[(c, m, t)]) for c in self.conditions for m in self.metrics])
            widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
            body = "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)
            blocks.append(f"IoU={t:g}\n{body}")
        return "\n\n".join(blocks) + "\n"

    def plot_data(self) -> str:
        lines = ["class,condition,metric,iou_thr,recall,precision"]
        for key in sorted(self.curves, key=lambda k: (k[1], k[2], k[3], k[0])):
            cls, cond, metric, thr = key
            rec, prec = self.curves[key]
            for r, p in zip(rec, prec):
                lines.append(f"{cls},{cond},{metric},{thr:g},{r:.6f},{p:.6f}")
        return "\n".join(lines) + "\n"


def _fmt(ap) -> str:
    return "nan" if ap is None else f"{ap:.6f}"


def _pct(ap) -> str:
    return "-" if ap is None else f"{100 * ap:.2f}"


def evaluate(
    frames: Iterable[FrameData],
    metrics: Sequence[str] = ("3D", "BEV"),
    iou_thrs: Sequence[float] = (0.3, 0.5),
    roi: Roi | None = Roi(),
    interp: str = "r40",
) -> EvalResult:
    """Dataset-level AP: matches are made per frame, PR curves built over all frames."""
    frames = sorted(frames, key=lambda f: f.frame_id)
    if roi is not None:
        frames = [FrameData(f.frame_id, f.condition, filter_roi(f.preds, roi), filter_roi(f.gts, roi)) for f in frames]
    classes = sorted(set().union(*(_classes(f.preds, f.gts) for f in frames))) if frames else []
    conditions = [TOTAL] + sorted({f.condition for f in frames} - {TOTAL})
    res = EvalResult(classes=classes, conditions=conditions, metrics=tuple(metrics), thresholds=tuple(iou_thrs))
    for metric in metrics:
        for thr in iou_thrs:
            per_frame = defaultdict(dict)
            for f in frames:
                for cls in classes:
                    per_frame[cls][f.frame_id] = (f.condition, *match_frame(f.preds, f.gts, cls, metric, thr))
            for cond in conditions:
                defined = []
                for cls in classes:
                    chosen = [
                        (fid, scored, n)
                        for fid, (c, scored, n) in per_frame[cls].items()
                        if cond == TOTAL or c == cond
                    ]
                    n_gt = sum(n for _, _, n in chosen)
                    flags = _ranked([(fid, scored) for fid, scored, _ in chosen])
                    ap = ap_from_flags(flags, n_gt, interp)
                    key = (cls, cond, metric, thr)
                    res.ap[key] = ap
                    tp = int(sum(flags))
                    res.counts[key] = (tp, len(flags) - tp, n_gt - tp)
                    if n_gt and flags:
                        res.curves[key] = pr_curve(flags, n_gt)
                    if ap is not None:
                        defined.append(ap)
                res.mean_ap[(cond, metric, thr)] = sum(defined) / len(defined) if defined else None
    return res


def load_frames(pred_dir: str | Path, manifest: str | Path) -> list[FrameData]:
    """Pair ``<pred_dir>/<frame_id>.txt`` with the manifest's label files."""
    manifest = Path(manifest)
    pred_dir = Path(pred_dir)
    entries: list[ManifestEntry] = read_manifest(manifest)
    known = {e.frame_id for e in entries}
    stray = sorted(p.stem for p in pred_dir.glob("*.txt") if p.stem not in known)
    if stray:
        raise ValueError(f"prediction files without a manifest entry: {stray}")
    frames = []
    for e in entries:
        gts = read_labels(resolve(manifest.parent, e.label_path))
        pf = pred_dir / f"{e.frame_id}.txt"
        if pf.exists():
            preds = read_detections(pf)
        else:
            log.warning("no predictions for frame %s; counting its labels as missed", e.frame_id)
            preds = []
        frames.append(FrameData(e.frame_id, e.condition, preds, gts))
    return frames
