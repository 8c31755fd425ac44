"""``scenekit`` command line.

Exit codes: 0 on success, 1 on a domain error or missing input file, 2 on a
usage error.  Messages go to standard error; products are written to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError, load_config
from .errors import NoObservations, SceneKitError, UnsatisfiableRequest

logger = logging.getLogger("scenekit")


def _floats(n):
    def parse(text):
        vals = [float(x) for x in text.replace(",", " ").split()]
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
        return vals
    return parse


def _size(text):
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 640x480, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _pose(vals):
    from .geometry import Pose
    return Pose(np.array(vals[3:]), np.array(vals[:3]))


def _open_dataset(path):
    from .dataset import Dataset
    if not Path(path).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return Dataset.open(path)


# ---------------------------------------------------------------------------
# commands


def cmd_flexion(args, cfg: Config) -> None:
    from .dataset import frame_name, write_gray_png
    from .flexion import depth_to_flexion
    ds = _open_dataset(args.input)
    if ds.intrinsics is None:
        raise UnsatisfiableRequest("flexion needs intrinsics.txt")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for i in ds.ids:
        depth = ds.depth(i)
        if depth is None:
            continue
        flex = depth_to_flexion(depth, ds.intrinsics, args.step)
        write_gray_png(out / f"{frame_name(i)}.png", np.where(flex.validity, flex.values, 0.0))
        n += 1
    if n == 0:
        raise NoObservations(f"no depth images in {args.input}")
    logger.info("wrote %d flexion images to %s", n, out)


def _auto_sources(ds, ref, cfg, use_poses):
    from .dba.selection import select_neighbors
    others = [j for j in ds.ids if j != ref and ds.flow(ref, j) is not None]
    if use_poses and ds.poses and ref in ds.poses:
        pc = cfg.pipeline
        cands = [(j, ds.poses[j]) for j in others if j in ds.poses]
        return select_neighbors(cands, ds.poses[ref], pc.tau_baseline, pc.tau_facing, pc.tau_nb,
                                pc.facing_greater)
    return sorted(others, key=lambda j: (abs(j - ref), j))[:cfg.pipeline.tau_nb]


def cmd_mvd(args, cfg: Config) -> None:
    from .dataset import frame_name, write_depth_png, write_gray_png
    from .mvd import estimate_depth, guess_intrinsics
    ds = _open_dataset(args.dataset)
    if args.ref not in ds.ids:
        raise FileNotFoundError(f"frame {args.ref} not in {args.dataset}")
    use_poses = not args.no_poses
    if args.sources == "auto":
        sources = _auto_sources(ds, args.ref, cfg, use_poses)
    else:
        sources = [int(x) for x in args.sources.replace(",", " ").split()]
    if not sources:
        raise UnsatisfiableRequest(f"no usable source frame for reference {args.ref}")
    flows = {}
    for j in sources:
        fwd = ds.flow(args.ref, j)
        if fwd is None:
            raise FileNotFoundError(f"flow {args.ref}->{j} missing")
        flows[(args.ref, j)] = fwd
        bwd = ds.flow(j, args.ref)
        if bwd is not None:
            flows[(j, args.ref)] = bwd
    if args.no_intrinsics or ds.intrinsics is None:
        h, w = flows[(args.ref, sources[0])].shape
        k, refine = guess_intrinsics(w, h), True
    else:
        k, refine = ds.intrinsics, False
    poses = None
    if use_poses:
        missing = [i for i in [args.ref, *sources] if i not in ds.poses]
        if missing:
            raise UnsatisfiableRequest(f"poses missing for frames {missing}; use --no-poses")
        poses = {i: ds.poses[i] for i in [args.ref, *sources]}
    est = estimate_depth(args.ref, sources, flows, k, cfg, poses, ds.prior(args.ref),
                         optimize_intrinsics=refine)
    out = Path(args.out) if args.out else Path(args.dataset) / "mvd"
    out.mkdir(parents=True, exist_ok=True)
    name = frame_name(args.ref)
    write_depth_png(out / f"depth_{name}.png", est.depth.values)
    inv = np.where(est.depth.validity, 1.0 / np.maximum(est.depth.values, 1e-9), 0.0)
    top = inv.max() if inv.max() > 0 else 1.0
    write_gray_png(out / f"inv_depth_{name}.png", inv / top)
    sol = est.solution
    kk = sol.intrinsics
    lines = [f"ref={args.ref}", f"sources={','.join(map(str, sources))}",
             f"initial_cost={sol.initial_cost:.9g}", f"cost={sol.cost:.9g}",
             f"iterations={sol.iterations}", f"converged={sol.converged}",
             f"solved_pixels={int(est.sparse.validity.sum())}",
             f"intrinsics={kk.fx:.6f} {kk.fy:.6f} {kk.cx:.6f} {kk.cy:.6f}",
             f"inv_depth_max={top:.9g}"]
    (out / f"report_{name}.txt").write_text("\n".join(lines) + "\n")
    logger.info("mvd: cost %.3g after %d iterations, output in %s", sol.cost, sol.iterations, out)


def cmd_complete(args, cfg: Config) -> None:
    from .dataset import read_depth_png, read_rgb_png, write_depth_png
    from .scalecov import RbfKernel, complete_depth
    if not Path(args.sparse_depth).is_file():
        raise NoObservations(f"sparse depth file not found: {args.sparse_depth}")
    if not Path(args.prior_depth).is_file():
        raise FileNotFoundError(f"prior depth file not found: {args.prior_depth}")
    sparse = read_depth_png(args.sparse_depth)
    prior = read_depth_png(args.prior_depth)
    if args.rgb:
        rgb = read_rgb_png(args.rgb)
        if rgb.shape != sparse.shape:
            raise UnsatisfiableRequest(f"rgb {rgb.shape} and depth {sparse.shape} sizes differ")
    sc = cfg.scalecov
    post = complete_depth(sparse, prior, RbfKernel(sc.length_scale, sc.variance), sc.sigma_n,
                          sc.n_obs_max, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_depth_png(out / "depth.png", post.depth.values)
    h, w = post.variance.shape
    with open(out / "variance.f32", "wb") as f:
        f.write(np.array([h, w], "<u4").tobytes())
        f.write(np.asarray(post.variance, "<f4").tobytes())
    logger.info("completed %dx%d depth from %d observations", w, h, int(sparse.validity.sum()))


def cmd_raster(args, cfg: Config) -> None:
    if args.raster_cmd == "bench":
        from .rasterizer import bench
        w, h = args.size
        r = bench(args.points, w, h, args.repeat, cfg.seed)
        print(f"points={r['points']} size={w}x{h} ms_per_frame={r['ms_per_frame']:.3f} "
              f"fps={r['fps']:.2f}")
        return
    for name in ("model", "pose", "intrinsics", "size", "out"):
        if getattr(args, name) is None:
            raise _Usage(f"raster: --{name} is required")
    from .dataset import write_depth_png, write_rgb_png
    from .geometry import Intrinsics
    from .neuralpoints import load_checkpoint, render_view
    ps = load_checkpoint(args.model)
    w, h = args.size
    k = Intrinsics(*args.intrinsics, w, h)
    rp = cfg.raster
    rgb, depth, valid = render_view(ps, _pose(args.pose), k, rp.th, rp.k_ray, rp.sigma, args.level)
    write_depth_png(args.out, np.where(valid, depth, 0.0))
    if args.color:
        write_rgb_png(args.color, rgb)
    logger.info("rendered %d of %d pixels", int(valid.sum()), w * h)


def cmd_slf(args, cfg: Config) -> None:
    from .neuralpoints import (NeuralPointSet, load_checkpoint, render_view, save_checkpoint,
                               train_on_frames)
    from .dataset import write_rgb_png
    npar = cfg.neuralpoints
    if args.slf_cmd == "train":
        ds = _open_dataset(args.dataset)
        if ds.intrinsics is None or not ds.poses:
            raise UnsatisfiableRequest("slf train needs intrinsics.txt and poses.txt")
        frames = [ds.frame(i) for i in ds.ids]
        frames = [f for f in frames if f.color is not None and f.depth is not None and f.pose]
        if not frames:
            raise NoObservations(f"no posed RGB-D frames in {args.dataset}")
        ps = NeuralPointSet(npar.levels, npar.r0, npar.multiplier, npar.feature_dim, npar.k,
                            seed=cfg.seed)
        _, _, losses = train_on_frames(ps, frames, ds.intrinsics, args.steps, npar.n_train,
                                       npar.lr, npar.jump_start, cfg.seed)
        save_checkpoint(args.out, ps)
        logger.info("trained %d steps, final loss %.6g, points per level %s", args.steps,
                    losses[-1] if losses else float("nan"), ps.counts())
        return
    from .geometry import Intrinsics
    ps = load_checkpoint(args.model)
    if args.intrinsics is not None:
        if args.size is None:
            raise _Usage("slf render: --size is required with --intrinsics")
        k = Intrinsics(*args.intrinsics, *args.size)
    elif args.dataset is not None:
        k = _open_dataset(args.dataset).intrinsics
        if k is None:
            raise UnsatisfiableRequest("dataset has no intrinsics.txt")
    else:
        raise _Usage("slf render: give --intrinsics and --size, or --dataset")
    rp = cfg.raster
    rgb, _, valid = render_view(ps, _pose(args.pose), k, rp.th, rp.k_ray, rp.sigma)
    write_rgb_png(args.out, rgb)
    logger.info("rendered %d of %d pixels", int(valid.sum()), valid.size)


def cmd_pipeline(args, cfg: Config) -> None:
    from .pipeline import run_sequence
    ds_path = Path(args.dataset)
    if not ds_path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {ds_path}")
    metrics = run_sequence(args.app, ds_path, args.out, cfg)
    for key in sorted(metrics):
        logger.info("%s = %s", key, metrics[key])


def cmd_synth(args, cfg: Config) -> None:
    from .synth import default_room, generate_dataset, load_scene_spec
    if args.spec:
        if not Path(args.spec).is_file():
            raise FileNotFoundError(f"scene spec not found: {args.spec}")
        scene = load_scene_spec(args.spec, args.frames)
    else:
        scene = default_room(frames=args.frames or 12, seed=cfg.seed)
    out = generate_dataset(scene, args.out, args.flow_gap, not args.no_prior, args.sparse_fraction)
    logger.info("wrote %d frames to %s", len(scene), out)


def cmd_bench(args, cfg: Config) -> None:
    import time

    from .geometry import Intrinsics
    from .rasterizer import RasterConfig, bench, rasterize, rasterize_oracle
    w, h = args.size
    r = bench(args.points, w, h, args.repeat, cfg.seed)
    print(f"rasterize points={r['points']} size={w}x{h} ms_per_frame={r['ms_per_frame']:.3f} "
          f"fps={r['fps']:.2f}")
    rng = np.random.default_rng(cfg.seed)
    n = min(args.points, 2000)
    k = Intrinsics(0.8 * w, 0.8 * w, (w - 1) / 2, (h - 1) / 2, w, h)
    z = rng.uniform(0.5, 4.0, n)
    u, v = rng.uniform(0, w, n), rng.uniform(0, h, n)
    pts = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)
    rc = RasterConfig(k)
    t0 = time.perf_counter()
    rasterize(pts, rc)
    t1 = time.perf_counter()
    rasterize_oracle(pts, rc)
    t2 = time.perf_counter()
    print(f"oracle points={n} size={w}x{h} fast_ms={1e3 * (t1 - t0):.3f} "
          f"oracle_ms={1e3 * (t2 - t1):.3f} speedup={(t2 - t1) / max(t1 - t0, 1e-12):.1f}")


# ---------------------------------------------------------------------------
# argument parsing


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    def options(default):
        parser = argparse.ArgumentParser(add_help=False)
        parser.add_argument("--seed", type=int, default=default(None),
                            help="global seed (overrides config)")
        parser.add_argument("--config", default=default(None), help="key = value config file")
        parser.add_argument("-v", "--verbose", action="store_true", default=default(False))
        return parser

    # subcommands must not reset options already given before the subcommand name
    top = options(lambda value: value)
    common = options(lambda value: argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="scenekit", parents=[top],
                                description="Incremental scene modelling toolkit.")
    p.add_argument("--version", action="version", version=f"scenekit {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        sp.add_argument("--version", action="version", version=f"scenekit {__version__}")
        return sp

    sp = add("flexion", "convert dataset depth images to flexion images")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--step", type=int, default=2)
    sp.set_defaults(func=cmd_flexion)

    sp = add("mvd", "multi-view depth for one reference frame")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--ref", type=int, required=True)
    sp.add_argument("--sources", default="auto", help="comma separated ids, or 'auto'")
    sp.add_argument("--no-intrinsics", action="store_true", help="start from a guessed focal length")
    sp.add_argument("--no-poses", action="store_true", help="ignore poses.txt")
    sp.add_argument("--out", default=None, help="output directory (default <dataset>/mvd)")
    sp.set_defaults(func=cmd_mvd)

    sp = add("complete", "complete sparse metric depth with a dense prior")
    sp.add_argument("--rgb", default=None)
    sp.add_argument("--sparse-depth", required=True)
    sp.add_argument("--prior-depth", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_complete)

    sp = add("raster", "render depth (and colour) of a model checkpoint")
    sp.add_argument("--model")
    sp.add_argument("--pose", type=_floats(7), help="'tx ty tz qx qy qz qw', camera-to-world")
    sp.add_argument("--intrinsics", type=_floats(4), help="'fx fy cx cy'")
    sp.add_argument("--size", type=_size)
    sp.add_argument("--out")
    sp.add_argument("--color", default=None)
    sp.add_argument("--level", type=int, default=0)
    rsub = sp.add_subparsers(dest="raster_cmd", metavar="bench")
    bp = rsub.add_parser("bench", parents=[common], help="time the rasterizer")
    bp.add_argument("--points", type=int, default=100_000)
    bp.add_argument("--size", type=_size, default=(640, 480))
    bp.add_argument("--repeat", type=int, default=5)
    sp.set_defaults(func=cmd_raster, raster_cmd=None)

    sp = add("slf", "train or render a surface light field")
    ssub = sp.add_subparsers(dest="slf_cmd", metavar="{train,render}")
    ssub.required = True
    tp = ssub.add_parser("train", parents=[common], help="train on a posed RGB-D dataset")
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--steps", type=int, default=2000)
    rp = ssub.add_parser("render", parents=[common], help="render a colour image")
    rp.add_argument("--model", required=True)
    rp.add_argument("--pose", type=_floats(7), required=True)
    rp.add_argument("--intrinsics", type=_floats(4), default=None)
    rp.add_argument("--size", type=_size, default=None)
    rp.add_argument("--dataset", default=None, help="take intrinsics from this dataset")
    rp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_slf)

    sp = add("pipeline", "run an application over a dataset")
    sp.add_argument("--app", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pipeline)

    sp = add("synth", "generate synthetic datasets")
    gsub = sp.add_subparsers(dest="synth_cmd", metavar="generate")
    gsub.required = True
    gp = gsub.add_parser("generate", parents=[common], help="render a scene to a dataset")
    gp.add_argument("--spec", default=None, help="scene description (default: built-in room)")
    gp.add_argument("--frames", type=int, default=None)
    gp.add_argument("--out", required=True)
    gp.add_argument("--flow-gap", type=int, default=3)
    gp.add_argument("--sparse-fraction", type=float, default=0.0)
    gp.add_argument("--no-prior", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = add("bench", "rasterizer timings against the brute-force oracle")
    sp.add_argument("--points", type=int, default=100_000)
    sp.add_argument("--size", type=_size, default=(640, 480))
    sp.add_argument("--repeat", type=int, default=5)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed)
        args.func(args, cfg)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"scenekit: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"scenekit: config error: {exc}", file=sys.stderr)
        return 1
    except SceneKitError as exc:
        print(f"scenekit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"scenekit: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
