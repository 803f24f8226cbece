"""``radekit`` command-line entry point.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from ._atomic import atomic_write_text
from .evaluation import evaluate, load_frames
from .formats import (
    ManifestEntry,
    format_manifest,
    load_heads,
    read_labels,
    read_manifest,
    resolve,
    save_heads,
    write_detections,
    write_labels,
)
from .geometry import decode, nms
from .gradcheck import run_all
from .losses import build_targets, heads_from_targets
from .network import DetectorNet, load_checkpoint, save_checkpoint
from .scenes import format_script, parse_script, random_scene
from .tensor import RadeTensor, load_tensor, memory_stats, project, save_tensor, synthesize

log = logging.getLogger("radekit")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3

TENSOR_EXT = ".rdt"
PROJECTION_EXT = ".rdp"
HEADS_EXT = ".rdh"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would exit with 2, which this tool reserves for I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _run_frames(fn, items, jobs: int) -> list:
    """Apply ``fn`` to every item; results keep input order whatever the job count."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _expand_inputs(paths: list[str]) -> list[tuple[str, Path]]:
    """``(frame_id, path)`` pairs; a ``.csv`` argument expands to its manifest's tensors."""
    out = []
    for p in map(Path, paths):
        if p.suffix == ".csv":
            out.extend((e.frame_id, resolve(p.parent, e.tensor_path)) for e in read_manifest(p))
        else:
            out.append((p.stem, p))
    ids = [fid for fid, _ in out]
    if len(set(ids)) != len(ids):
        raise UsageError("duplicate frame ids among inputs")
    return out


def _ci95(values: list[float]) -> float:
    if len(values) < 2:
        return float("nan")
    return 1.96 * statistics.stdev(values) / math.sqrt(len(values))


# --- commands -----------------------------------------------------------------


def cmd_config(args, cfg) -> int:
    sys.stdout.write(cfg.dump())
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    g = cfg.sensor
    seed = cfg.synth.seed if args.seed is None else args.seed
    if args.random is not None:
        if args.script:
            raise UsageError("give a scene script or --random, not both")
        if args.random < 1:
            raise UsageError("--random needs at least one frame")
        rng = np.random.default_rng(seed)
        n_classes = min(4, cfg.network.n_cls - 1)
        scenes = [
            random_scene(rng, g, f"{i:06d}", cfg.synth.objects_per_frame, n_classes)
            for i in range(args.random)
        ]
    elif args.script:
        scenes = parse_script(Path(args.script).read_text())
    else:
        raise UsageError("give a scene script or --random N")
    for s in scenes:
        for o in s.objects:
            if not 1 <= o.class_id < cfg.network.n_cls:
                raise UsageError(f"frame {s.frame_id}: class {o.class_id} outside 1..{cfg.network.n_cls - 1}")
    out = Path(args.out)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)

    def work(item):
        i, scene = item
        targets = [o.target(g) for o in scene.objects]
        t = synthesize(g, targets, cfg.synth.noise_floor, _frame_seed(seed, i))
        save_tensor(out / "tensors" / f"{scene.frame_id}{TENSOR_EXT}", t)
        write_labels(out / "labels" / f"{scene.frame_id}.txt", scene.labels())

    _run_frames(work, list(enumerate(scenes)), args.jobs)
    entries = [
        ManifestEntry(s.frame_id, f"tensors/{s.frame_id}{TENSOR_EXT}", f"labels/{s.frame_id}.txt", s.condition)
        for s in scenes
    ]
    atomic_write_text(out / "manifest.csv", format_manifest(entries))
    atomic_write_text(out / "scenes.txt", format_script(scenes))
    print(f"wrote {len(scenes)} frame(s) to {out}")
    return EXIT_OK


def cmd_project(args, cfg) -> int:
    inputs = _expand_inputs(args.inputs)
    if inputs and not args.out:
        raise UsageError("--out is required when projecting tensors")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def work(item):
        fid, path = item
        t = load_tensor(path)
        if not isinstance(t, RadeTensor):
            raise UsageError(f"{path}: expected a 4D radar tensor")
        start = time.perf_counter()
        p = project(t)
        elapsed = time.perf_counter() - start
        save_tensor(out / f"{fid}{PROJECTION_EXT}", p)
        return t.geometry, elapsed

    results = _run_frames(work, inputs, args.jobs)
    if args.stats:
        geoms = {g for g, _ in results}
        if len(geoms) > 1:
            raise UsageError("inputs disagree on sensor geometry; stats need one geometry")
        g = geoms.pop() if geoms else cfg.sensor
        print(f"geometry {g.n_r}x{g.n_a}x{g.n_d}x{g.n_e} -> {g.n_de}x{g.n_r}x{g.n_a_pad}")
        for width in (4, 8):
            m = memory_stats(g, width)
            print(
                f"memory element_bytes={width} full_bytes={m.full_bytes} "
                f"projection_bytes={m.projection_bytes} reduction_percent={m.reduction_percent:.2f}"
            )
        if results:
            ms = [1000 * e for _, e in results]
            print(f"latency frames={len(ms)} mean_ms={statistics.fmean(ms):.3f} ci95_ms={_ci95(ms):.3f}")
    if inputs:
        print(f"wrote {len(inputs)} projection(s) to {out}")
    return EXIT_OK


def _network(args, cfg) -> DetectorNet:
    ncfg = cfg.network_config()
    if args.checkpoint:
        return DetectorNet.from_checkpoint(ncfg, load_checkpoint(args.checkpoint, ncfg))
    return DetectorNet(ncfg)


def cmd_init_checkpoint(args, cfg) -> int:
    net = DetectorNet(cfg.network_config())
    save_checkpoint(args.out, net.checkpoint())
    print(f"wrote seeded checkpoint ({net.param_count()} parameters) to {args.out}")
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    g = cfg.sensor
    inputs = _expand_inputs(args.inputs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_cls = cfg.network.n_cls
    if args.inject_gt:
        labels = Path(args.inject_gt)

        def work(item):
            fid, _ = item
            gt = read_labels(labels / f"{fid}.txt")
            t = build_targets(gt, g, n_cls, g.n_a_pad, cfg.loss_config())
            save_heads(out / f"{fid}{HEADS_EXT}", heads_from_targets(t))
    else:
        net = _network(args, cfg)

        def work(item):
            fid, path = item
            x = load_tensor(path)
            if isinstance(x, RadeTensor):
                x = project(x)
            if x.geometry != g:
                raise UsageError(f"{path}: sensor geometry differs from the configured one")
            save_heads(out / f"{fid}{HEADS_EXT}", net.forward(x.data))

    _run_frames(work, inputs, args.jobs)
    print(f"wrote {len(inputs)} head output file(s) to {out}")
    return EXIT_OK


def cmd_decode(args, cfg) -> int:
    g = cfg.sensor
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = [(p.stem, p) for p in map(Path, args.inputs)]
    tau, thr = cfg.decode.tau_cls, cfg.decode.nms_iou

    def work(item):
        fid, path = item
        h = load_heads(path)
        if h.conf.shape[1:] != (g.n_r, g.n_a_pad):
            raise UsageError(f"{path}: head grid {h.conf.shape[1:]} != ({g.n_r}, {g.n_a_pad})")
        dets = nms(decode(h, g, tau), thr)
        write_detections(out / f"{fid}.txt", dets)
        return len(dets)

    counts = _run_frames(work, items, args.jobs)
    print(f"wrote {len(items)} detection file(s), {sum(counts)} detection(s), to {out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    frames = load_frames(args.pred, args.manifest)
    ev = cfg.eval
    res = evaluate(frames, ev.metrics, ev.iou_thrs, cfg.roi, ev.interp)
    sys.stdout.write(res.to_table())
    if args.csv == "-":
        sys.stdout.write(res.to_csv())
    elif args.csv:
        atomic_write_text(args.csv, res.to_csv())
    if args.plot_data:
        atomic_write_text(args.plot_data, res.plot_data())
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    results = run_all(args.seed, args.instances, args.total_instances)
    ok = True
    for r in results:
        ok &= r.passed
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:10s} instances={r.instances:4d} max_rel_error={r.max_rel_error:.3e} {status}")
    print("gradcheck passed" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench(args, cfg) -> int:
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    ncfg = cfg.network_config()
    net = _network(args, cfg)
    rng = np.random.default_rng(args.seed)
    stages = {"backbone": [], "neck": [], "heads": [], "total": []}
    for i in range(args.warmup + args.frames):
        x = rng.random(ncfg.stage_shape(1), dtype=np.float32)
        t0 = time.perf_counter()
        m = net.backbone_forward(x)
        t1 = time.perf_counter()
        m = net.neck_forward(m)
        t2 = time.perf_counter()
        net.heads_forward(m)
        t3 = time.perf_counter()
        if i < args.warmup:
            continue
        for name, v in zip(stages, (t1 - t0, t2 - t1, t3 - t2, t3 - t0)):
            stages[name].append(1000 * v)
    print("host CPU timings (numpy); not comparable to published GPU latencies")
    for name, ms in stages.items():
        print(f"{name:8s} mean_ms={statistics.fmean(ms):9.2f} ci95_ms={_ci95(ms):8.2f} n={len(ms)}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file (default: ${config_mod.ENV_VAR})")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--jobs", type=int, default=1, help="frames processed concurrently")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="radekit", description="Radar-only 3D detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("config", parents=[common], help="print the effective config")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("synth", parents=[common], help="synthesize tensors and labels")
    s.add_argument("script", nargs="?", help="scene script")
    s.add_argument("--random", type=int, metavar="N", help="generate N random scenes instead")
    s.add_argument("--seed", type=int, help="overrides synth.seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("project", parents=[common], help="max-project 4D tensors")
    s.add_argument("inputs", nargs="*", help="tensor files or manifests")
    s.add_argument("--out")
    s.add_argument("--stats", action="store_true", help="print memory and latency statistics")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("init-checkpoint", parents=[common], help="write a seeded random checkpoint")
    s.add_argument("out")
    s.set_defaults(func=cmd_init_checkpoint)

    s = sub.add_parser("infer", parents=[common], help="run the network (or the ground-truth oracle)")
    s.add_argument("inputs", nargs="+", help="projection/tensor files or manifests")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="weights; seeded random init when omitted")
    s.add_argument("--inject-gt", metavar="LABEL_DIR", help="build head outputs from labels instead")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("decode", parents=[common], help="head outputs to detections")
    s.add_argument("inputs", nargs="*", help="head output files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", parents=[common], help="AP tables for a detection directory")
    s.add_argument("--pred", required=True, help="directory of <frame_id>.txt detection files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--csv", help="write the CSV table here ('-' for stdout)")
    s.add_argument("--plot-data", help="write PR-curve points here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--total-instances", type=int, default=3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="per-stage forward latency")
    s.add_argument("--frames", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        cfg = config_mod.load(args.config, args.set)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"radekit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as exc:
        print(f"radekit: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
