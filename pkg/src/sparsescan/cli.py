"""Command-line front end.

Subcommands: gen (synthetic scenes), stca (score and threshold a stream),
scan-viz (dump a serialization order), forward (run the backbone, with an
optional FLOPs report), bench (threaded multi-scene benchmark), selftest
(the acceptance battery). Domain errors exit 1, usage errors exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backbone import BackboneConfig, backbone_forward, cast_params, \
    init_backbone_params
from .errors import ConfigError, SparseScanError
from .event_io import EventStream, build_voxel_grid, event_spatial_ratio, \
    generate_synthetic_scene, load_events, save_events, scene_preset
from .flops import measure
from .scan_order import IplConfig, cross_orders, ipl_order
from .sparsify import gather_tokens, kept_ratio
from .stca import GaussianConfig, run_stca, write_map_csv, write_map_pgm

THREADS_ENV = "SPARSE_SCAN_THREADS"

_ORDER_CHOICES = ("bidi-forward", "bidi-backward",
                  "cross-col-forward", "cross-col-backward", "ipl")


def _split_windows(stream: EventStream, n: int) -> list[EventStream]:
    """Cut the stream into n contiguous equal sub-windows."""
    if n == 1:
        return [stream]
    edges = np.linspace(stream.window_start, stream.window_end, n + 1)
    edges = np.rint(edges).astype(np.int64)
    out = []
    for i in range(n):
        lo, hi = int(edges[i]), int(edges[i + 1])
        sel = (stream.ts >= lo) & ((stream.ts <= hi) if i + 1 == n else (stream.ts < hi))
        out.append(EventStream(stream.xs[sel], stream.ys[sel],
                               stream.ts[sel], stream.ps[sel],
                               width=stream.width, height=stream.height,
                               window_start=lo, window_end=hi))
    return out


def cmd_gen(args) -> int:
    spec = scene_preset(args.preset, width=args.width, height=args.height,
                        duration_us=args.duration_us)
    stream, truth = generate_synthetic_scene(spec, seed=args.seed)
    save_events(stream, args.out)
    if args.truth:
        write_map_pgm(truth, args.truth)
    print(f"wrote {stream.n_events} events to {args.out} "
          f"({stream.width}x{stream.height}, span {stream.span} us, "
          f"spatial ratio {event_spatial_ratio(stream):.3f})")
    return 0


def _gauss_from_args(args) -> GaussianConfig:
    return GaussianConfig(radius=args.radius, sigma=args.sigma)


def cmd_stca(args) -> int:
    stream = load_events(args.events)
    res = run_stca(stream, patch=args.patch, gauss=_gauss_from_args(args),
                   beta=args.beta)
    if args.out:
        if args.out.endswith(".pgm"):
            write_map_pgm(res.keep, args.out)
        else:
            write_map_csv(res.keep, args.out)
    if args.scores:
        write_map_csv(res.scores, args.scores)
    th, tw = res.keep.shape
    print(f"token grid {th}x{tw}, threshold {res.threshold:.6g}, "
          f"kept {int(res.keep.sum())}/{res.keep.size} "
          f"({100 * kept_ratio(res.keep):.1f}%)")
    return 0


def cmd_scan_viz(args) -> int:
    stream = load_events(args.events)
    res = run_stca(stream, patch=args.patch, beta=args.beta)
    ts = gather_tokens(np.zeros((1,) + res.keep.shape), res.keep)
    rf, rb, cf, cb = cross_orders(ts)
    orders = {"bidi-forward": rf, "bidi-backward": rb,
              "cross-col-forward": cf, "cross-col-backward": cb}
    if args.order == "ipl":
        perm = ipl_order(ts, res.scores, IplConfig(args.k))
    else:
        perm = orders[args.order]
    lines = ["position,row,col"]
    for i, t in enumerate(perm):
        lines.append(f"{i},{ts.coords[t, 0]},{ts.coords[t, 1]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(perm)} positions to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_forward(args) -> int:
    if args.timesteps < 1:
        raise ConfigError("--timesteps must be at least 1")
    stream = load_events(args.events)
    cfg = BackboneConfig(height=stream.height, width=stream.width, bins=args.bins)
    # shrink IPL windows on geometries too small for the 2x2 default
    ks = []
    for s in range(cfg.n_stages):
        gh, gw = cfg.grid(s)
        ks.append(2 if gh % 2 == 0 and gw % 2 == 0 and min(gh, gw) >= 2 else 1)
    cfg = dataclasses.replace(cfg, ipl_k=tuple(ks))
    cfg.validate()
    res = run_stca(stream, patch=cfg.patch, beta=args.beta)
    voxels = [build_voxel_grid(sub, cfg.bins) for sub in
              _split_windows(stream, args.timesteps)]
    params = init_backbone_params(cfg, seed=args.seed)
    run_params = params
    vox_in = voxels
    if args.precision == "single":
        run_params = cast_params(params, np.float32)
        vox_in = [v.values.astype(np.float32) for v in voxels]
    t0 = time.perf_counter()
    outputs, _ = backbone_forward(vox_in, res.keep, res.scores, cfg, run_params,
                                  parallel=args.parallel)
    wall = time.perf_counter() - t0
    print(f"{len(voxels)} timestep(s), kept ratio {kept_ratio(res.keep):.3f}, "
          f"forward {1000 * wall:.1f} ms ({args.precision})")
    for s, out in enumerate(outputs[-1]):
        print(f"  stage{s + 1} out {out.shape}, rms {np.sqrt(np.mean(out ** 2)):.4f}")
    if args.report:
        report = measure(cfg, params, voxels, res.scores, res.keep,
                         parallel=args.parallel)
        report.save_json(args.report)
        print(report.table())
        print(f"wrote FLOPs report to {args.report}")
    return 0


def _bench_worker_count(n_scenes: int) -> int:
    workers = os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            cap_val = int(cap)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}")
        if cap_val < 1:
            raise ConfigError(f"{THREADS_ENV} must be at least 1")
        workers = min(workers, cap_val)
    return max(1, min(workers, n_scenes))


def cmd_bench(args) -> int:
    cfg = BackboneConfig()
    params = init_backbone_params(cfg, seed=args.seed)
    spec = scene_preset(args.preset)

    def run_one(i: int):
        stream, _ = generate_synthetic_scene(spec, seed=args.seed + i)
        t0 = time.perf_counter()
        res = run_stca(stream, patch=cfg.patch)
        vox = build_voxel_grid(stream, cfg.bins)
        report = measure(cfg, params, [vox], res.scores, res.keep)
        wall = time.perf_counter() - t0
        return (i, stream.n_events, event_spatial_ratio(stream),
                kept_ratio(res.keep), report.sparse_total,
                report.dense_total, report.reduction, wall)

    workers = _bench_worker_count(args.scenes)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        # map() returns results in submission order, so output is
        # deterministic regardless of which worker finishes first
        rows = list(ex.map(run_one, range(args.scenes)))
    header = (f"{'scene':>5} {'events':>8} {'spatial':>8} {'kept':>6} "
              f"{'sparse MF':>10} {'dense MF':>9} {'saved':>6} {'ms':>8}")
    print(f"bench: {args.scenes} scene(s), {workers} worker(s)")
    print(header)
    for i, n_ev, spatial, kept, sp, dn, red, wall in rows:
        print(f"{i:>5} {n_ev:>8} {spatial:>8.3f} {kept:>6.3f} "
              f"{sp / 1e6:>10.2f} {dn / 1e6:>9.2f} {100 * red:>5.1f}% "
              f"{1000 * wall:>8.1f}")
    total_sp = sum(r[4] for r in rows)
    total_dn = sum(r[5] for r in rows)
    print(f"total sparse {total_sp / 1e6:.2f} MF, dense {total_dn / 1e6:.2f} MF, "
          f"saved {100 * (1 - total_sp / total_dn):.1f}%")
    return 0


def cmd_selftest(args) -> int:
    from .acceptance import run_all
    results = run_all(verbose=True)
    total = sum(r.seconds for r in results)
    runtime_ok = total < 60.0
    status = "PASS" if runtime_ok else "FAIL"
    print(f"{status}  battery runtime: {total:.1f}s (budget 60s)")
    n_pass = sum(r.passed for r in results) + int(runtime_ok)
    n_all = len(results) + 1
    print(f"{n_pass}/{n_all} criteria passed")
    return 0 if n_pass == n_all else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sparsescan",
        description="Sparse event-stream state-space backbone tools")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic event scene")
    g.add_argument("--preset", required=True,
                   choices=("edge-noise", "sparse30", "noise-only"))
    g.add_argument("-o", "--out", required=True,
                   help="output path; .csv is text, anything else binary")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--duration-us", type=int, default=100_000)
    g.add_argument("--truth", help="optional PGM of the true activity mask")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("stca", help="score a stream and write the keep mask")
    s.add_argument("events")
    s.add_argument("-o", "--out", help="mask output, .pgm or .csv")
    s.add_argument("--scores", help="optional aggregated score CSV")
    s.add_argument("-P", "--patch", type=int, default=4)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--radius", type=int, default=1)
    s.set_defaults(func=cmd_stca)

    v = sub.add_parser("scan-viz", help="dump a token serialization order")
    v.add_argument("events")
    v.add_argument("--order", choices=_ORDER_CHOICES, default="ipl")
    v.add_argument("-k", type=int, default=2, help="IPL window size")
    v.add_argument("-P", "--patch", type=int, default=4)
    v.add_argument("--beta", type=float, default=1.0)
    v.add_argument("-o", "--out", help="CSV output (default stdout)")
    v.set_defaults(func=cmd_scan_viz)

    f = sub.add_parser("forward", help="run the backbone on a stream")
    f.add_argument("events")
    f.add_argument("--seed", type=int, default=0, help="parameter init seed")
    f.add_argument("--timesteps", type=int, default=1)
    f.add_argument("-B", "--bins", type=int, default=10, help="voxel time bins")
    f.add_argument("--beta", type=float, default=1.0)
    f.add_argument("--precision", choices=("double", "single"), default="double")
    f.add_argument("--parallel", action="store_true",
                   help="use the parallel scan kernels")
    f.add_argument("--report", help="write a FLOPs report JSON here")
    f.set_defaults(func=cmd_forward)

    b = sub.add_parser("bench", help="threaded multi-scene benchmark")
    b.add_argument("--scenes", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--preset", choices=("edge-noise", "sparse30", "noise-only"),
                   default="sparse30")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("selftest", help="run the acceptance battery")
    t.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseScanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
