"""End-to-end acceptance gate: one test per shipping criterion.

Every test here checks a headline guarantee of the engine against an
independent reference (oracles.py, gradcheck.py) or a measurable floor,
and prints one PASS line with the measured figure so a verbose run
doubles as the acceptance report. Thresholds are asserted exactly as
stated; nothing is loosened for slow hosts, and criteria that need
hardware this host does not have skip with an explicit reason instead
of silently passing.
"""

from __future__ import annotations

import io
import math
import os
import time

import numpy as np
import pytest

from animvox import backend
from animvox.assetio import (
    encode_png,
    frame_to_straight_rgba,
    load_asset,
    save_asset,
)
from animvox.backend import backend_name, kernels
from animvox.fit import FitConfig, FitDataset, fit, psnr
from animvox.geometry import (
    Camera,
    Ray,
    RigidTransform,
    quat_conj,
    quat_from_axis_angle,
    quat_to_matrix,
)
from animvox.render import (
    CharacterAsset,
    RenderOptions,
    integrate_ray,
    render_frame,
    render_view,
)
from animvox.rigging import (
    Pose,
    Skeleton,
    SkinWeights,
    identity_warp,
    resolve_collisions,
    warp_voxels,
)
from animvox.synthetic import (
    FurCapsule,
    FuzzySphere,
    make_synthetic_scene,
    march_image,
    orbit_camera,
    ring_cameras,
    voxelize,
)
from animvox.volume import FLUT, Bounds, VoxelSet, build_octree, traverse_ray

from gradcheck import fd_relative_error
from oracles import dda_walk, dense_march
from test_assetio import _assert_assets_equal, _random_asset

CUBE2 = Bounds(np.full(3, -1.0), np.full(3, 1.0))
UNIT = Bounds(np.zeros(3), np.ones(3))


def _report(name: str, detail: str) -> None:
    print(f"PASS {name}: {detail}")


# ---------------------------------------------------------------------------
# analytic gradients vs finite differences


def test_gradients_match_finite_differences():
    """Backward-pass gradients agree with central finite differences on 100
    random small scenes per precision: 1e-6 in double, 1e-3 in single."""
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = {}
    for dtype, tol in ((np.float64, 1e-6), (np.float32, 1e-3)):
        errs = [fd_relative_error(kernels, rng, dtype) for _ in range(100)]
        worst[dtype] = max(errs)
        assert worst[dtype] <= tol, (
            f"{np.dtype(dtype).name} max FD relative error {worst[dtype]:.3e}"
        )
    wall = time.perf_counter() - start
    assert wall <= 120.0, f"gradient check took {wall:.1f}s"
    _report(
        "gradient-check",
        f"max FD rel err {worst[np.float64]:.2e} (f64), "
        f"{worst[np.float32]:.2e} (f32) in {wall:.1f}s",
    )


# ---------------------------------------------------------------------------
# octree traversal vs independent grid walker


def test_traversal_matches_independent_grid_walker():
    """1000 rays over random 32^3 occupancies visit exactly the voxels the
    textbook grid walker reports, with path lengths within 1e-5."""
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    lo, cell = UNIT.lo, UNIT.cell_size(32)
    checked = 0
    worst_len = 0.0
    for _ in range(4):
        occ = rng.random((32, 32, 32)) < float(rng.uniform(0.1, 0.5))
        cells = np.argwhere(occ).astype(np.int32)
        tree = build_octree(cells, resolution=32, bounds=UNIT)
        cell_to_idx = {tuple(c): i for i, c in enumerate(cells)}
        origins = rng.uniform(-0.5, 1.5, size=(250, 3))
        targets = rng.uniform(0.1, 0.9, size=(250, 3))
        dirs = targets - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for o, d in zip(origins, dirs):
            segs = traverse_ray(tree, Ray(o, d))
            ref = dda_walk(occ, lo, cell, o, d)
            assert len(segs) == len(ref)
            ref_idx = [cell_to_idx[c] for c, _, _ in ref]
            np.testing.assert_array_equal(segs.flut_indices, ref_idx)
            gap = abs(float(segs.deltas.sum()) - sum(t1 - t0 for _, t0, t1 in ref))
            worst_len = max(worst_len, gap)
            assert gap <= 1e-5
            checked += 1
    wall = time.perf_counter() - start
    assert checked == 1000
    assert wall <= 30.0, f"traversal check took {wall:.1f}s"
    _report(
        "traversal-oracle",
        f"1000 rays identical, worst length gap {worst_len:.2e} in {wall:.1f}s",
    )


# ---------------------------------------------------------------------------
# ray integration vs fine-step dense marcher


def _unit_quat(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _integration_scene(rng, res=32, count=8000, degree=2, channels=3, sigma_max=12.0):
    """Random sparse scene with per-voxel rotation tables plus the dense
    index map the marcher oracle consumes."""
    flat = rng.choice(res * res * res, size=count, replace=False)
    cells = np.stack(np.unravel_index(flat, (res,) * 3), axis=1).astype(np.int32)
    voxels = VoxelSet(resolution=res, bounds=CUBE2, cells=cells)
    h = (degree + 1) ** 2
    data = rng.normal(scale=0.5, size=(count, h * channels + 1))
    data[:, -1] = rng.uniform(0.0, sigma_max, size=count)
    flut = FLUT(data, degree=degree, channels=channels)
    occ = np.full((res,) * 3, -1, dtype=np.int64)
    occ[cells[:, 0], cells[:, 1], cells[:, 2]] = np.arange(count)
    n_rot = 6
    rot_index = rng.integers(0, n_rot, size=count).astype(np.int32)
    rot_inv = np.stack(
        [quat_to_matrix(quat_conj(_unit_quat(rng))) for _ in range(n_rot)]
    )
    warp = identity_warp(voxels)
    object.__setattr__(warp, "rotation_joint", rot_index)
    object.__setattr__(warp, "joint_rot_inv", rot_inv)
    return voxels, flut, occ, warp


def _sphere_rays(rng, n):
    origins = rng.normal(size=(n, 3))
    origins *= 3.0 / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-0.8, 0.8, size=(n, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


def test_ray_integration_matches_dense_marcher():
    """integrate_ray agrees with the cell/64 fixed-step marcher within 1e-3
    per channel on 1000 rays, and the 0.01 early-stop threshold moves alpha
    by at most 0.01 on every one of them."""
    rng = np.random.default_rng(103)
    voxels, flut, occ, warp = _integration_scene(rng)
    octree = build_octree(voxels)
    origins, dirs = _sphere_rays(rng, 1000)
    args = (
        occ, CUBE2.lo, voxels.cell_size, flut.data, flut.degree, flut.channels,
        warp.rotation_joint, warp.joint_rot_inv,
    )
    full = RenderOptions(lambda_th=1e-12)
    early = RenderOptions(lambda_th=0.01)
    worst = 0.0
    worst_stop = 0.0
    for o, d in zip(origins, dirs):
        ray = Ray(o, d)
        f, a, _, _ = integrate_ray(octree, flut, ray, warp, full)
        f_ref, a_ref = dense_march(*args, o, d, step_divisor=64)
        worst = max(worst, float(np.abs(f - f_ref).max()), abs(a - a_ref))
        _, a_early, _, _ = integrate_ray(octree, flut, ray, warp, early)
        worst_stop = max(worst_stop, abs(a_early - a))
    assert worst <= 1e-3, f"worst per-channel gap {worst:.3e}"
    assert worst_stop <= 0.01, f"worst early-stop alpha deviation {worst_stop:.4f}"
    _report(
        "integration-oracle",
        f"worst channel gap {worst:.2e}, worst early-stop drift {worst_stop:.2e}",
    )


# ---------------------------------------------------------------------------
# synthetic sphere reconstruction


def test_synthetic_sphere_fit_reaches_heldout_psnr(tmp_path):
    """Fitting 20 views of the fuzzy-sphere scene at 64^3 reconstructs the 4
    held-out views at 28 dB or better, against ground truth rendered by the
    independent marcher pipeline."""
    start = time.perf_counter()
    cams = ring_cameras(24, image_size=(128, 128))
    _, asset, images = make_synthetic_scene(
        FuzzySphere(), cams, tmp_path / "scene", resolution=64
    )
    feats = tuple(im[:, :, :3] * im[:, :, 3:] for im in images)
    alphas = tuple(im[:, :, 3] for im in images)
    ds = FitDataset(
        cameras=cams, features=feats, alphas=alphas,
        train_indices=tuple(range(20)), probe_index=20,
    )
    cfg = FitConfig(
        iterations=2000, rays_per_batch=4096, probe_interval=200,
        log_interval=200, seed=1,
    )
    flut, _ = fit(asset.voxels, ds, cfg, degree=2, log_stream=io.StringIO())
    octree = build_octree(asset.voxels)
    options = RenderOptions()
    held_out = []
    for view in range(20, 24):
        frame = render_view(octree, flut, None, cams[view], options)
        pred = np.concatenate([frame.features, frame.alpha[..., None]], axis=2)
        gt = np.concatenate([feats[view], alphas[view][..., None]], axis=2)
        held_out.append(psnr(pred, gt))
    wall = time.perf_counter() - start
    assert min(held_out) >= 28.0, (
        "held-out PSNR " + ", ".join(f"{p:.2f}" for p in held_out)
    )
    assert wall <= 900.0, f"scene + fit + eval took {wall:.0f}s"
    _report(
        "synthetic-fit",
        f"held-out PSNR min {min(held_out):.2f} dB, "
        f"mean {float(np.mean(held_out)):.2f} dB in {wall:.0f}s",
    )


# ---------------------------------------------------------------------------
# collision-consistency ablation


def test_collision_term_reduces_folded_pair_error():
    """With the collision-consistency weight at 0.01, colliding voxel pairs
    of a folded two-bone capsule end up with strictly smaller mean feature
    L1 distance than the identical fit with the term disabled."""
    field = FurCapsule()
    asset = voxelize(field, resolution=32, degree=1, channels=3, rigged=True)
    folded = Pose(
        joint_rotations=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.4]]),
        global_rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        global_translation=np.zeros(3),
    )
    warp = warp_voxels(asset.voxels, asset.weights, asset.skeleton, folded)
    assert resolve_collisions(warp, asset.flut).pairs.shape[0] > 0

    cams = ring_cameras(4, image_size=(32, 32))
    options = RenderOptions(lambda_th=1e-6)
    canonical_tree = build_octree(asset.voxels)
    resolved = resolve_collisions(warp, asset.flut)
    folded_tree = build_octree(
        resolved.cells, resolved.flut_indices,
        resolution=asset.voxels.resolution, bounds=asset.voxels.bounds,
    )
    feats, alphas, frames = [], [], []
    for cam in cams:
        frame = render_view(canonical_tree, asset.flut, None, cam, options)
        feats.append(frame.features)
        alphas.append(frame.alpha)
        frames.append(None)
    for cam in cams:
        frame = render_view(folded_tree, asset.flut, warp, cam, options)
        feats.append(frame.features)
        alphas.append(frame.alpha)
        frames.append(0)
    ds = FitDataset(
        cameras=cams + cams, features=tuple(feats), alphas=tuple(alphas),
        frames=tuple(frames), poses=(folded,),
    )

    def pair_gap(lam: float) -> float:
        cfg = FitConfig(
            iterations=120, rays_per_batch=512, lambda_vrt=lam, log_interval=1000,
        )
        flut, _ = fit(
            asset.voxels, ds, cfg,
            skeleton=asset.skeleton, weights=asset.weights,
            degree=1, log_stream=io.StringIO(),
        )
        pairs = resolve_collisions(warp, flut).pairs
        assert pairs.shape[0] > 0
        return float(
            np.abs(flut.data[pairs[:, 0], :-1] - flut.data[pairs[:, 1], :-1]).mean()
        )

    gap_off = pair_gap(0.0)
    gap_on = pair_gap(0.01)
    assert gap_on < gap_off, f"pair L1 {gap_off:.5f} (off) vs {gap_on:.5f} (on)"
    _report(
        "collision-ablation",
        f"mean colliding-pair feature L1 {gap_off:.4f} -> {gap_on:.4f}",
    )


# ---------------------------------------------------------------------------
# rigging invariants


def _two_bone_chain() -> Skeleton:
    return Skeleton(
        names=("root", "tip"),
        parents=np.array([-1, 0]),
        bind_local=(
            RigidTransform.identity(),
            RigidTransform(
                np.array([1.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
            ),
        ),
    )


def _grid_voxels(resolution: int, lo: int, hi: int) -> VoxelSet:
    r = np.arange(lo, hi)
    cells = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return VoxelSet(resolution=resolution, bounds=CUBE2, cells=cells.astype(np.int32))


def test_rigging_invariants_hold():
    """Identity pose moves no cell center by more than 1e-6 cells, a global
    rigid pose preserves pairwise distances within 1e-5, and a rigid pose
    with the counter-moved camera reproduces the canonical frame to 1e-3."""
    rng = np.random.default_rng(106)
    skel = _two_bone_chain()
    voxels = _grid_voxels(16, 2, 14)
    n = len(voxels)
    w = rng.uniform(0.1, 1.0, (n, 2))
    w /= w.sum(axis=1, keepdims=True)
    weights = SkinWeights(np.tile(np.array([0, 1], dtype=np.int32), (n, 1)), w)

    warp = warp_voxels(voxels, weights, skel, Pose.canonical(2))
    ident_cells = float(
        np.max(np.abs(warp.positions - voxels.centers())) / np.min(voxels.cell_size)
    )
    assert ident_cells < 1e-6

    q = quat_from_axis_angle(np.array([1.0, 2.0, 0.5]), 0.7)
    pose = Pose(np.zeros((2, 3)), q, np.array([0.05, -0.02, 0.01]))
    warp = warp_voxels(voxels, weights, skel, pose)
    centers = voxels.centers()
    pick = rng.choice(n, 30, replace=False)
    before = np.linalg.norm(centers[pick, None] - centers[None, pick], axis=-1)
    after = np.linalg.norm(
        warp.positions[pick, None] - warp.positions[None, pick], axis=-1
    )
    dist_err = float(np.max(np.abs(after - before)))
    assert dist_err <= 1e-5

    count = 1500
    flat = rng.choice(16**3, size=count, replace=False)
    cells = np.stack(np.unravel_index(flat, (16,) * 3), axis=1).astype(np.int32)
    scene_voxels = VoxelSet(resolution=16, bounds=CUBE2, cells=cells)
    data = rng.normal(scale=0.5, size=(count, 9 * 3 + 1))
    data[:, -1] = rng.uniform(0.0, 8.0, size=count)
    scene_flut = FLUT(data, degree=2, channels=3)
    one_joint = Skeleton(
        names=("root",),
        parents=np.array([-1], dtype=np.int32),
        bind_local=(RigidTransform.identity(),),
    )
    one_weights = SkinWeights(
        joint_indices=np.zeros((count, 1), dtype=np.int32),
        weights=np.ones((count, 1)),
    )
    asset = CharacterAsset(
        voxels=scene_voxels, flut=scene_flut, skeleton=one_joint, weights=one_weights
    )
    angle = math.pi / 2
    g_rot = np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])
    rigid = Pose(
        joint_rotations=np.zeros((1, 3)),
        global_rotation=g_rot,
        global_translation=np.zeros(3),
    )
    # generic principal point: a centered one grazes cell corners exactly
    c2w = RigidTransform(translation=np.array([0.0, 0.0, -3.0]))
    cam = Camera(
        fx=40.0, fy=40.0, cx=12.313, cy=11.779, width=24, height=24,
        world_to_camera=c2w.invert(),
    )
    g = RigidTransform(rotation=g_rot)
    cam_moved = Camera(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        width=cam.width, height=cam.height,
        world_to_camera=g.compose(cam.world_to_camera.invert()).invert(),
    )
    opts = RenderOptions(lambda_th=1e-9, sigma_dep=1.0)
    fb_posed = render_frame(asset, rigid, cam_moved, opts)
    fb_canon = render_frame(asset, None, cam, opts)
    render_err = max(
        float(np.abs(fb_posed.features - fb_canon.features).max()),
        float(np.abs(fb_posed.alpha - fb_canon.alpha).max()),
    )
    assert render_err <= 1e-3

    _report(
        "rigging-invariants",
        f"identity {ident_cells:.1e} cells, distances {dist_err:.1e}, "
        f"rigid render {render_err:.1e}",
    )


# ---------------------------------------------------------------------------
# determinism across runs and thread counts


def test_outputs_deterministic_across_runs_and_threads():
    """A repeated fit and fits at 2, 4, and 8 threads produce byte-identical
    tables, and the rendered PNG bytes match across the same sweep."""
    saved = backend.get_num_threads()
    try:
        field = FuzzySphere(sigma=4.0)
        asset = voxelize(field, resolution=16, degree=1, channels=3)
        cams = ring_cameras(3, image_size=(32, 32))
        feats, alphas = [], []
        for cam in cams:
            img = march_image(asset, cam)
            feats.append(img[:, :, :3] * img[:, :, 3:])
            alphas.append(img[:, :, 3])
        ds = FitDataset(cameras=cams, features=tuple(feats), alphas=tuple(alphas))
        cfg = FitConfig(iterations=40, rays_per_batch=512, seed=7, log_interval=1000)
        cam = orbit_camera(0.6, 0.35, 3.2, image_size=(64, 64))
        options = RenderOptions()
        fits, pngs = [], []
        for nthreads in (2, 2, 4, 8):
            backend.set_num_threads(nthreads)
            flut, _ = fit(asset.voxels, ds, cfg, degree=1, log_stream=io.StringIO())
            fits.append(flut.data.tobytes())
            frame = render_frame(asset, None, cam, options)
            pngs.append(encode_png(frame_to_straight_rgba(frame.features, frame.alpha)))
        assert all(blob == fits[0] for blob in fits[1:])
        assert all(png == pngs[0] for png in pngs[1:])
        _report(
            "determinism",
            f"fit table ({len(fits[0])} B) and frame png ({len(pngs[0])} B) "
            "identical across repeat run and 2/4/8 threads",
        )
    finally:
        backend.set_num_threads(saved)


# ---------------------------------------------------------------------------
# octree rebuild performance


def _million_cell_voxels(seed: int) -> VoxelSet:
    rng = np.random.default_rng(seed)
    res, n = 128, 1_000_000
    flat = rng.choice(res * res * res, size=n, replace=False)
    cells = np.stack(np.unravel_index(flat, (res,) * 3), axis=1).astype(np.int32)
    return VoxelSet(resolution=res, bounds=CUBE2, cells=cells)


@pytest.mark.skipif(
    backend_name() == "pure",
    reason="the rebuild throughput floor is a compiled-core target",
)
def test_octree_rebuild_meets_throughput_floor():
    """Rebuilding a one-million-voxel octree sustains at least one million
    voxels per second end to end."""
    voxels = _million_cell_voxels(108)
    build_octree(voxels)
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        build_octree(voxels)
        times.append(time.perf_counter() - t0)
    rate = len(voxels) / min(times)
    assert rate >= 1e6, f"{rate / 1e6:.2f}M voxels/s"
    _report(
        "rebuild-throughput",
        f"{rate / 1e6:.2f}M voxels/s at {backend.get_num_threads()} thread(s)",
    )


@pytest.mark.skipif(
    backend_name() == "pure",
    reason="thread scaling is a compiled-core target",
)
@pytest.mark.skipif(
    (os.cpu_count() or 1) < 8,
    reason=(
        f"host exposes {os.cpu_count()} hardware thread(s); the 1-to-8-thread "
        "scaling measurement needs at least 8"
    ),
)
def test_octree_rebuild_scales_with_threads():
    """The same one-million-voxel rebuild runs at least 3x faster with 8
    threads than with 1."""
    voxels = _million_cell_voxels(109)
    saved = backend.get_num_threads()

    def median_build(nthreads: int) -> float:
        backend.set_num_threads(nthreads)
        build_octree(voxels)
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            build_octree(voxels)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    try:
        t_one = median_build(1)
        t_eight = median_build(8)
    finally:
        backend.set_num_threads(saved)
    speedup = t_one / t_eight
    assert speedup >= 3.0, f"speedup {speedup:.2f}x"
    _report("rebuild-scaling", f"{speedup:.2f}x from 1 to 8 threads")


# ---------------------------------------------------------------------------
# asset round trip


def test_asset_round_trip_is_bit_exact(tmp_path):
    """100 random assets (mixed sizes, degrees, channel counts, with and
    without rigs) survive save -> load -> save with identical bytes."""
    rng = np.random.default_rng(110)
    for i in range(100):
        asset = _random_asset(
            rng,
            count=int(rng.integers(1, 400)),
            resolution=int(rng.choice([16, 64, 256])),
            degree=int(rng.integers(0, 3)),
            channels=int(rng.choice([1, 3])),
            rigged=bool(rng.integers(0, 2)),
        )
        blob = save_asset(asset)
        path = tmp_path / f"asset_{i:03d}.nvo"
        path.write_bytes(blob)
        loaded = load_asset(path.read_bytes())
        _assert_assets_equal(asset, loaded)
        assert save_asset(loaded) == blob
    _report("asset-round-trip", "100 assets byte-stable through save/load/save")
