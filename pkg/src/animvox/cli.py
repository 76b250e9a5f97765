"""Operator command line: carve, bake, fit, render, animate, bench, serve.

Every subcommand exits 0 on success and nonzero with a one-line,
machine-parsable error category on domain failures. With a fixed seed in
deterministic mode, repeated runs of the same argv produce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import subprocess
import sys

import numpy as np

from . import __version__, backend
from .errors import AnimvoxError, ContractViolation
from .render import CharacterAsset, RenderOptions, timed_render_frame
from .rigging import (
    Pose,
    Skeleton,
    SkinnedMesh,
    SkinWeights,
    bake_skinning_weights,
)
from .volume import FLUT, Bounds, VoxelSet, carve_volume

_STAGE_ROWS = ("warp", "build-octree", "volume-render")


# ---------------------------------------------------------------------------
# logging


class Log:
    """Progress sink: human-readable lines or JSON records (--json-logs)."""

    def __init__(self, as_json: bool):
        self.as_json = as_json

    def event(self, name: str, **fields) -> None:
        if self.as_json:
            print(json.dumps({"event": name, **fields}))
        elif fields:
            pairs = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
            print(f"{name}: {pairs}")
        else:
            print(name)

    def error(self, category: str, message: str) -> None:
        if self.as_json:
            print(
                json.dumps({"event": "error", "category": category, "message": message}),
                file=sys.stderr,
            )
        else:
            print(f"error [{category}] {message}", file=sys.stderr)

    def table(self, title: str, rows: list[tuple], header: tuple) -> None:
        if self.as_json:
            print(json.dumps({"event": title, "rows": [dict(zip(header, r)) for r in rows]}))
            return
        widths = [
            max(len(str(h)), *(len(_fmt(r[i])) for r in rows))
            for i, h in enumerate(header)
        ]
        print(title)
        print("  " + "  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
        for r in rows:
            print("  " + "  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


# ---------------------------------------------------------------------------
# shared camera / pose / stage plumbing


def _resolve_camera(args, parser):
    """Camera from --scene/--view or --orbit, with --size/--scale applied."""
    from .assetio import load_scene

    if args.orbit is not None and args.scene is not None:
        parser.error("--orbit and --scene/--view are mutually exclusive")
    if args.view is not None and args.scene is None:
        parser.error("--view requires --scene")
    if args.orbit is not None:
        from .synthetic import orbit_camera

        size = tuple(args.size) if args.size else (512, 512)
        cam = orbit_camera(
            args.orbit[0], args.orbit[1], args.orbit[2],
            target=tuple(args.target), image_size=size, focal=args.focal,
        )
    elif args.scene is not None:
        manifest = load_scene(args.scene)
        view = args.view if args.view is not None else 0
        if not 0 <= view < len(manifest.cameras):
            raise ContractViolation(
                f"view {view} out of range (scene has {len(manifest.cameras)} cameras)"
            )
        cam = manifest.cameras[view]
    else:
        parser.error("pick a camera: --scene [--view N] or --orbit AZ EL RADIUS")
    size = None
    if args.orbit is None and args.size:
        size = tuple(args.size)
    if args.scale != 1.0:
        base = size or (cam.width, cam.height)
        size = (max(1, round(base[0] * args.scale)), max(1, round(base[1] * args.scale)))
    return cam, size


def _resolve_pose(args, n_joints: int | None) -> Pose | None:
    from .assetio import load_clip

    if args.frame is not None and args.clip is None:
        raise ContractViolation("--frame requires --clip")
    if args.clip is None:
        return None
    clip = load_clip(args.clip)
    frame = args.frame if args.frame is not None else 0
    if not 0 <= frame < len(clip.frames):
        raise ContractViolation(f"frame {frame} out of range (clip has {len(clip.frames)})")
    if n_joints is not None and clip.n_joints != n_joints:
        raise ContractViolation(
            f"clip has {clip.n_joints} joints, the asset's rig has {n_joints}"
        )
    return clip.frames[frame]


def _render_once(asset, pose, camera, options):
    """(frame, stage seconds) for one pose via the library render path."""
    return timed_render_frame(asset, pose, camera, options)


def _export_frame(frame, out_path, background, depth_path=None):
    from .assetio import frame_to_straight_rgba, save_depth, save_png

    if background is not None:
        rgb = frame.over_background(background)
        rgba = np.concatenate([rgb, np.ones_like(frame.alpha)[:, :, None]], axis=2)
    else:
        rgba = frame_to_straight_rgba(frame.features, frame.alpha)
    save_png(out_path, rgba)
    if depth_path:
        save_depth(depth_path, frame.depth)


def _median_table(samples: dict[str, list[float]]) -> list[tuple]:
    rows = []
    total = 0.0
    for stage in _STAGE_ROWS:
        med = statistics.median(samples[stage]) * 1e3
        total += med
        rows.append((stage, med, len(samples[stage])))
    rows.append(("total", total, len(samples[_STAGE_ROWS[0]])))
    return rows


# ---------------------------------------------------------------------------
# subcommands


def _cmd_carve(args, log: Log) -> int:
    from .assetio import load_png, load_scene, save_asset_file

    manifest = load_scene(args.scene)
    views = []
    for ref in manifest.images:
        rgba = load_png(manifest.image_path(ref))
        views.append((manifest.cameras[ref.camera], rgba[:, :, 3]))
    resolution = args.resolution or manifest.resolution
    voxels = carve_volume(
        views, resolution, manifest.bounds,
        dilation_radius_px=args.dilation,
        alpha_threshold=args.alpha_threshold,
    )
    flut = FLUT.initialize(
        len(voxels), args.degree, args.channels,
        float(np.min(voxels.cell_size)), np.random.default_rng(args.seed),
    )
    save_asset_file(CharacterAsset(voxels, flut), args.out)
    log.event(
        "carved",
        cells=len(voxels),
        resolution=resolution,
        occupancy=len(voxels) / resolution**3,
        views=len(views),
        out=args.out,
    )
    return 0


def _cmd_bake(args, log: Log) -> int:
    from .assetio import load_asset_file, load_obj, load_skeleton, save_asset_file

    asset = load_asset_file(args.asset)
    vertices, _ = load_obj(args.mesh)
    skeleton, vertex_weights = load_skeleton(args.skeleton)
    if vertex_weights is None:
        raise ContractViolation("skeleton file carries no vertex weights to bake from")
    if vertex_weights.shape[0] != vertices.shape[0]:
        raise ContractViolation(
            f"{vertex_weights.shape[0]} weight rows for {vertices.shape[0]} mesh vertices"
        )
    mesh = SkinnedMesh(vertices, vertex_weights)
    weights = bake_skinning_weights(
        asset.voxels, mesh, args.neighbors, exponent_sign=args.exponent_sign
    )
    save_asset_file(
        CharacterAsset(asset.voxels, asset.flut, skeleton, weights), args.out
    )
    log.event(
        "baked",
        voxels=len(asset.voxels),
        joints=skeleton.n_joints,
        neighbors=args.neighbors,
        out=args.out,
    )
    return 0


def _cmd_fit(args, log: Log) -> int:
    from .assetio import load_asset_file, load_scene, save_asset_file
    from .fit import FitConfig, FitDataset, fit

    manifest = load_scene(args.scene)
    carved = load_asset_file(args.voxels)
    probe = args.probe if args.probe is not None and args.probe >= 0 else None
    dataset = FitDataset.from_manifest(manifest, probe_index=probe)
    config = FitConfig(
        iterations=args.iterations,
        rays_per_batch=args.rays_per_batch,
        learning_rate=args.learning_rate,
        lambda_vrt=args.lambda_vrt,
        pose_policy=args.pose_policy,
        seed=args.seed,
        probe_interval=args.probe_interval,
        log_interval=args.log_interval,
        deterministic=args.deterministic,
    )
    init = carved.flut if args.resume else None
    flut, reports = fit(
        carved.voxels, dataset, config,
        skeleton=carved.skeleton, weights=carved.weights,
        init=init, degree=args.degree, channels=dataset.channels,
        log_path=args.log_file,
    )
    save_asset_file(
        CharacterAsset(carved.voxels, flut, carved.skeleton, carved.weights),
        args.out,
    )
    log.event(
        "fit-complete",
        iterations=config.iterations,
        final_loss=reports[-1].total,
        probe_psnr=reports[-1].probe_psnr,
        out=args.out,
    )
    return 0


def _cmd_render(args, log: Log, parser) -> int:
    from .assetio import load_asset_file

    asset = load_asset_file(args.asset)
    camera, size = _resolve_camera(args, parser)
    pose = _resolve_pose(args, asset.skeleton.n_joints if asset.rigged else None)
    options = RenderOptions(
        lambda_th=args.lambda_th,
        sigma_dep=args.sigma_dep,
        image_size=size,
    )
    frame, times = _render_once(asset, pose, camera, options)
    _export_frame(frame, args.out, args.background, args.depth)
    log.event(
        "rendered",
        out=args.out,
        width=frame.width,
        height=frame.height,
        render_ms=times["volume-render"] * 1e3,
    )
    return 0


def _cmd_animate(args, log: Log, parser) -> int:
    from .assetio import load_asset_file, load_clip

    asset = load_asset_file(args.asset)
    camera, size = _resolve_camera(args, parser)
    clip = load_clip(args.clip)
    if asset.rigged and clip.n_joints != asset.skeleton.n_joints:
        raise ContractViolation(
            f"clip has {clip.n_joints} joints, the asset's rig has {asset.skeleton.n_joints}"
        )
    options = RenderOptions(
        lambda_th=args.lambda_th, sigma_dep=args.sigma_dep, image_size=size
    )
    os.makedirs(args.out_dir, exist_ok=True)
    samples = {stage: [] for stage in _STAGE_ROWS}
    written = []
    # first render warms caches and allocators; its timing is discarded
    timed = -1
    i = 0
    while True:
        pose = clip.frames[i % len(clip.frames)]
        frame, times = _render_once(asset, pose, camera, options)
        if i < len(clip.frames):
            path = os.path.join(args.out_dir, f"frame_{i:04d}.png")
            _export_frame(frame, path, args.background)
            written.append(path)
        if timed >= 0:
            for stage in _STAGE_ROWS:
                samples[stage].append(times[stage])
        timed += 1
        i += 1
        if i >= len(clip.frames) and timed >= args.timing_frames:
            break
    log.table(
        "frame-timing",
        _median_table(samples),
        ("stage", "median_ms", "frames"),
    )
    log.event("animated", frames=len(written), out_dir=args.out_dir, fps=clip.fps)
    return 0


def _cmd_bench(args, log: Log) -> int:
    rng = np.random.default_rng(args.seed)
    n = args.voxels
    resolution = 2
    while resolution**3 < n:
        resolution *= 2
    flat = rng.choice(resolution**3, size=n, replace=False)
    cells = np.stack(
        np.unravel_index(np.sort(flat), (resolution,) * 3), axis=1
    ).astype(np.int32)
    bounds = Bounds(np.full(3, -1.0), np.full(3, 1.0))
    voxels = VoxelSet(resolution, bounds, cells)
    flut = FLUT.initialize(n, 1, 3, float(np.min(voxels.cell_size)), rng)

    # a minimal two-bone rig so the warp stage does representative work
    skeleton = Skeleton(
        names=("lower", "upper"),
        parents=(-1, 0),
        bind_local=(
            _translation(0.0, 0.0, -1.0),
            _translation(0.0, 0.0, 1.0),
        ),
    )
    centers = voxels.centers()
    idx = np.where(centers[:, 2] < 0.0, 0, 1).astype(np.int32).reshape(-1, 1)
    weights = SkinWeights(idx, np.ones((n, 1)))
    pose = Pose(
        joint_rotations=np.array([[0.0, 0.0, 0.0], [0.2, 0.0, 0.0]]),
        global_rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        global_translation=np.zeros(3),
    )
    from .synthetic import orbit_camera

    camera = orbit_camera(0.6, 0.35, 3.2, image_size=(args.size, args.size))
    options = RenderOptions(lambda_th=args.lambda_th)
    asset = CharacterAsset(voxels, flut, skeleton, weights)

    samples = {stage: [] for stage in _STAGE_ROWS}
    for r in range(args.repeats + 1):
        _, times = _render_once(asset, pose, camera, options)
        if r == 0:
            continue  # warmup excluded
        for stage in _STAGE_ROWS:
            samples[stage].append(times[stage])
    rows = _median_table(samples)
    log.table("stage-timing", rows, ("stage", "median_ms", "frames"))
    build_s = statistics.median(samples["build-octree"])
    render_s = statistics.median(samples["volume-render"])
    log.event(
        "throughput",
        backend=backend.backend_name(),
        threads=backend.get_num_threads(),
        voxels=n,
        build_voxels_per_s=n / build_s,
        render_rays_per_s=args.size * args.size / render_s,
    )

    if args.compare_pure and backend.backend_name() == "compiled":
        small = min(n, args.compare_voxels)
        argv = [
            sys.executable, "-m", "animvox.cli", "bench",
            "--voxels", str(small), "--size", str(min(args.size, 128)),
            "--repeats", str(args.repeats), "--seed", str(args.seed),
            "--no-compare-pure", "--json-logs",
        ]
        env = dict(os.environ, ANIMVOX_BACKEND="pure")
        out = subprocess.run(argv, capture_output=True, text=True, env=env, check=True)
        pure = next(
            json.loads(line)
            for line in out.stdout.splitlines()
            if '"throughput"' in line
        )
        log.event(
            "backend-comparison",
            voxels=small,
            pure_build_voxels_per_s=pure["build_voxels_per_s"],
            pure_render_rays_per_s=pure["render_rays_per_s"],
            note="compiled numbers above are at full --voxels",
        )
    return 0


def _cmd_serve(args, log: Log) -> int:
    from .service import run_server

    run_server(
        args.asset,
        host=args.host,
        port=args.port,
        lambda_th=args.lambda_th,
        image_size=args.size,
        ui_dir=args.ui_dir,
        log=log,
    )
    return 0


def _translation(x: float, y: float, z: float):
    from .geometry import RigidTransform

    return RigidTransform(
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        translation=np.array([x, y, z]),
    )


# ---------------------------------------------------------------------------
# parser


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", help="scene manifest supplying cameras")
    p.add_argument("--view", type=int, default=None,
                   help="camera index inside --scene (default: 0)")
    p.add_argument("--orbit", type=float, nargs=3, metavar=("AZ", "EL", "RADIUS"),
                   default=None,
                   help="orbit camera: azimuth and elevation in radians, radius")
    p.add_argument("--target", type=float, nargs=3, default=(0.0, 0.0, 0.0),
                   metavar=("X", "Y", "Z"), help="orbit target (default: origin)")
    p.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), default=None,
                   help="output resolution (default: camera native, orbit 512x512)")
    p.add_argument("--focal", type=float, default=None,
                   help="orbit focal length in pixels (default: 1.25 * width)")
    p.add_argument("--scale", type=float, default=1.0,
                   help="resolution multiplier applied last (default: %(default)s)")


def _add_render_option_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda-th", type=float, default=0.01,
                   help="early-stop opacity margin; integration stops once "
                        "alpha exceeds 1 - lambda_th (default: %(default)s)")
    p.add_argument("--sigma-dep", type=float, default=5.0,
                   help="density threshold for the depth buffer (default: %(default)s)")
    p.add_argument("--background", type=float, nargs=3, default=None,
                   metavar=("R", "G", "B"),
                   help="composite over a solid color (default: transparent)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json-logs", action="store_true",
                        help="emit progress as JSON lines (default: human-readable)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap all internal thread pools "
                             "(default: available parallelism)")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=True,
                        help="bit-reproducible outputs for a fixed seed (default: on)")

    parser = argparse.ArgumentParser(
        prog="animvox",
        description="Animatable sparse-voxel characters: carve, bake, fit, "
                    "render, animate, bench, serve.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("carve", parents=[common],
                       help="visual-hull carve a scene into an occupancy asset")
    p.add_argument("--scene", required=True, help="scene manifest (cameras + images)")
    p.add_argument("--out", required=True, help="output asset path (.nvo)")
    p.add_argument("--resolution", type=int, default=None,
                   help="grid resolution (default: the manifest's)")
    p.add_argument("--dilation", type=int, default=5,
                   help="mask dilation radius in pixels (default: %(default)s)")
    p.add_argument("--alpha-threshold", type=float, default=0.005,
                   help="mask coverage threshold (default: %(default)s)")
    p.add_argument("--degree", type=int, default=2,
                   help="SH degree of the initialized table (default: %(default)s)")
    p.add_argument("--channels", type=int, default=3,
                   help="color channels (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="table initialization seed (default: %(default)s)")

    p = sub.add_parser("bake", parents=[common],
                       help="transfer mesh skinning weights onto an asset's voxels")
    p.add_argument("--asset", required=True, help="input asset (.nvo)")
    p.add_argument("--mesh", required=True, help="OBJ mesh with matching topology")
    p.add_argument("--skeleton", required=True,
                   help="skeleton JSON carrying per-vertex weights")
    p.add_argument("--out", required=True, help="output rigged asset path (.nvo)")
    p.add_argument("--neighbors", type=int, default=4,
                   help="mesh vertices blended per voxel (default: %(default)s)")
    p.add_argument("--exponent-sign", type=float, default=-1.0,
                   help="distance-blend exponent sign (default: %(default)s)")

    p = sub.add_parser("fit", parents=[common],
                       help="optimize an asset's color/density table against a scene")
    p.add_argument("--scene", required=True, help="scene manifest with images")
    p.add_argument("--voxels", required=True,
                   help="asset supplying occupancy (and rig) to fit, e.g. carve output")
    p.add_argument("--out", required=True, help="output fitted asset path (.nvo)")
    p.add_argument("--iterations", type=int, default=2000,
                   help="optimizer iterations (default: %(default)s)")
    p.add_argument("--rays-per-batch", type=int, default=4096,
                   help="rays sampled per iteration (default: %(default)s)")
    p.add_argument("--learning-rate", type=float, default=0.05,
                   help="adaptive-moment step size (default: %(default)s)")
    p.add_argument("--lambda-vrt", type=float, default=0.01,
                   help="collision-consistency weight (default: %(default)s)")
    p.add_argument("--pose-policy", choices=("round_robin", "random"),
                   default="round_robin",
                   help="pose-group sampling order (default: %(default)s)")
    p.add_argument("--probe", type=int, default=None,
                   help="held-out image index for PSNR probes (default: none)")
    p.add_argument("--probe-interval", type=int, default=50,
                   help="iterations between probes (default: %(default)s)")
    p.add_argument("--log-interval", type=int, default=50,
                   help="iterations between progress records (default: %(default)s)")
    p.add_argument("--log-file", default=None,
                   help="also write progress records to this file")
    p.add_argument("--degree", type=int, default=2,
                   help="SH degree for a fresh table (default: %(default)s)")
    p.add_argument("--resume", action="store_true",
                   help="start from the input asset's table instead of a fresh one")
    p.add_argument("--seed", type=int, default=0,
                   help="sampling and initialization seed (default: %(default)s)")

    p = sub.add_parser("render", parents=[common],
                       help="render one pose to a PNG (and optionally a depth raster)")
    p.add_argument("--asset", required=True, help="asset to render (.nvo)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--depth", default=None, help="also write a depth raster here")
    p.add_argument("--clip", default=None, help="pose clip JSON")
    p.add_argument("--frame", type=int, default=None,
                   help="clip frame to pose (default: 0 when --clip is given)")
    _add_camera_flags(p)
    _add_render_option_flags(p)

    p = sub.add_parser("animate", parents=[common],
                       help="render every clip frame and report per-stage timing")
    p.add_argument("--asset", required=True, help="asset to render (.nvo)")
    p.add_argument("--clip", required=True, help="pose clip JSON")
    p.add_argument("--out-dir", required=True, help="directory for frame_XXXX.png")
    p.add_argument("--timing-frames", type=int, default=20,
                   help="minimum timed frames behind the medians, cycling the "
                        "clip if it is shorter (default: %(default)s)")
    _add_camera_flags(p)
    _add_render_option_flags(p)

    p = sub.add_parser("bench", parents=[common],
                       help="octree build and render throughput on a synthetic asset")
    p.add_argument("--voxels", type=int, default=1_000_000,
                   help="voxel count of the synthetic asset (default: %(default)s)")
    p.add_argument("--size", type=int, default=256,
                   help="render resolution (default: %(default)s)")
    p.add_argument("--repeats", type=int, default=5,
                   help="timed repetitions after one warmup (default: %(default)s)")
    p.add_argument("--lambda-th", type=float, default=0.01,
                   help="early-stop opacity margin (default: %(default)s)")
    p.add_argument("--compare-pure", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="also run the pure-Python backend in a subprocess "
                        "(default: on; skipped when already pure)")
    p.add_argument("--compare-voxels", type=int, default=20_000,
                   help="voxel cap for the pure comparison (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="synthetic asset seed (default: %(default)s)")

    p = sub.add_parser("serve", parents=[common],
                       help="serve interactive pose/camera renders over a socket")
    p.add_argument("--asset", required=True, help="asset to serve (.nvo)")
    p.add_argument("--host", default="127.0.0.1",
                   help="bind address (default: %(default)s)")
    p.add_argument("--port", type=int, default=8765,
                   help="bind port (default: %(default)s)")
    p.add_argument("--lambda-th", type=float, default=0.01,
                   help="early-stop opacity margin (default: %(default)s)")
    p.add_argument("--size", type=int, default=512,
                   help="default preview resolution (default: %(default)s)")
    p.add_argument("--ui-dir", default=None,
                   help="also serve static viewer files from this directory")

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:  # argparse already printed the diagnostic
        return int(exit_.code or 0)
    log = Log(args.json_logs)
    if args.threads is not None:
        backend.set_num_threads(args.threads)
    try:
        if args.subcommand == "carve":
            return _cmd_carve(args, log)
        if args.subcommand == "bake":
            return _cmd_bake(args, log)
        if args.subcommand == "fit":
            return _cmd_fit(args, log)
        if args.subcommand == "render":
            return _cmd_render(args, log, parser)
        if args.subcommand == "animate":
            return _cmd_animate(args, log, parser)
        if args.subcommand == "bench":
            return _cmd_bench(args, log)
        if args.subcommand == "serve":
            return _cmd_serve(args, log)
        raise AssertionError(f"unhandled subcommand {args.subcommand}")
    except SystemExit as exit_:
        return int(exit_.code or 0)
    except AnimvoxError as err:
        log.error(err.category, str(err))
        return 1
    except OSError as err:
        log.error("io", str(err))
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
