"""Line-oriented label, detection, manifest and head-output files."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ._atomic import atomic_write_bytes, atomic_write_text
from .geometry import Box3D, Detection
from .network import HeadOutputs

HEAD_MAGIC = b"RADEHEAD"


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _num(v: float) -> str:
    return repr(float(v))


def format_labels(items: Iterable[tuple[int, Box3D]]) -> str:
    lines = []
    for cls, b in items:
        lines.append(" ".join([str(int(cls))] + [_num(v) for v in (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)]))
    return "".join(line + "\n" for line in lines)


def format_detections(dets: Iterable[Detection]) -> str:
    lines = []
    for d in dets:
        b = d.box
        vals = [_num(v) for v in (d.score, b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)]
        lines.append(" ".join([str(d.class_id)] + vals))
    return "".join(line + "\n" for line in lines)


def _rows(text: str, path, ncols: int):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise ParseError(path, lineno, f"expected {ncols} fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        yield lineno, cls, vals


def parse_labels(text: str, path="<labels>") -> list[tuple[int, Box3D]]:
    out = []
    for lineno, cls, v in _rows(text, path, 8):
        try:
            out.append((cls, Box3D(*v)))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return out


def parse_detections(text: str, path="<detections>") -> list[Detection]:
    out = []
    for lineno, cls, v in _rows(text, path, 9):
        try:
            out.append(Detection(Box3D(*v[1:]), cls, v[0]))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
    return out


def read_labels(path) -> list[tuple[int, Box3D]]:
    return parse_labels(Path(path).read_text(), path)


def read_detections(path) -> list[Detection]:
    return parse_detections(Path(path).read_text(), path)


def write_labels(path, items) -> None:
    atomic_write_text(Path(path), format_labels(items))


def write_detections(path, dets) -> None:
    atomic_write_text(Path(path), format_detections(dets))


# --- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    tensor_path: str
    label_path: str
    condition: str


def format_manifest(entries: Iterable[ManifestEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for e in entries:
        w.writerow([e.frame_id, e.tensor_path, e.label_path, e.condition])
    return buf.getvalue()


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    out = []
    seen = set()
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise ParseError(path, lineno, f"expected 4 comma-separated fields, got {len(row)}")
            fid = row[0].strip()
            if fid in seen:
                raise ParseError(path, lineno, f"duplicate frame id {fid}")
            seen.add(fid)
            out.append(ManifestEntry(fid, row[1].strip(), row[2].strip(), row[3].strip()))
    return out


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


# --- head outputs -----------------------------------------------------------


def encode_heads(h: HeadOutputs) -> bytes:
    width = 8 if h.conf.dtype == np.float64 or h.params.dtype == np.float64 else 4
    dt = "<f8" if width == 8 else "<f4"
    n_cls, n_r, n_a = h.conf.shape
    head = HEAD_MAGIC + struct.pack("<HIIIB", 1, n_cls, n_r, n_a, width)
    return head + np.ascontiguousarray(h.conf, dtype=dt).tobytes() + np.ascontiguousarray(h.params, dtype=dt).tobytes()


def decode_heads(buf: bytes) -> HeadOutputs:
    hdr = struct.calcsize("<HIIIB")
    if len(buf) < 8 + hdr or buf[:8] != HEAD_MAGIC:
        raise ValueError("not a head-output file")
    version, n_cls, n_r, n_a, width = struct.unpack("<HIIIB", buf[8 : 8 + hdr])
    if version != 1 or width not in (4, 8):
        raise ValueError("unsupported head-output file")
    dt = np.dtype("<f8" if width == 8 else "<f4")
    nc, npar = n_cls * n_r * n_a, 8 * n_r * n_a
    body = buf[8 + hdr :]
    if len(body) != (nc + npar) * width:
        raise ValueError("head-output payload size mismatch")
    conf = np.frombuffer(body, dt, nc).reshape(n_cls, n_r, n_a).astype(dt.newbyteorder("="))
    params = np.frombuffer(body, dt, npar, nc * width).reshape(8, n_r, n_a).astype(dt.newbyteorder("="))
    return HeadOutputs(conf, params)


def save_heads(path, h: HeadOutputs) -> None:
    atomic_write_bytes(Path(path), encode_heads(h))


def load_heads(path) -> HeadOutputs:
    return decode_heads(Path(path).read_bytes())
