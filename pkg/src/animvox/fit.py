"""FLUT optimization from multi-view RGBA images.

The training loop renders ray batches through the differentiable volume
renderer (full integration, no early stop), scores an L1 photometric loss
plus a collision-consistency term, back-propagates analytic gradients into
the touched FLUT entries, and applies a sparse adaptive-moment update.
Ground-truth colors are premultiplied on load to match the renderer's
output semantics; probe quality is likewise reported on premultiplied
color + alpha channels.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass

import numpy as np

from .backend import get_num_threads, kernels
from .errors import ContractViolation, EmptyWarpError, FitDivergenceError
from .geometry import Camera, rays_for_camera
from .render import RenderOptions, _grid_rays, _rotation_tables, render_view
from .rigging import (
    Pose,
    Skeleton,
    SkinWeights,
    WarpResult,
    resolve_collisions,
    warp_voxels,
)
from .volume import FLUT, VoxelSet, build_octree

# ---------------------------------------------------------------------------
# losses and metrics


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for an exact match."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def loss_rgba(
    pred_features: np.ndarray,
    pred_alpha: np.ndarray,
    gt_features: np.ndarray,
    gt_alpha: np.ndarray,
) -> float:
    """Mean over rays of (summed per-channel color L1 + alpha L1).

    Both color arrays hold premultiplied values.
    """
    pf = np.asarray(pred_features, dtype=np.float64)
    gf = np.asarray(gt_features, dtype=np.float64)
    pa = np.asarray(pred_alpha, dtype=np.float64)
    ga = np.asarray(gt_alpha, dtype=np.float64)
    if pf.shape != gf.shape or pa.shape != ga.shape or pf.shape[0] != pa.shape[0]:
        raise ContractViolation("prediction and ground truth batches differ in shape")
    return float(np.mean(np.sum(np.abs(pf - gf), axis=1) + np.abs(pa - ga)))


def loss_vrt(pairs: np.ndarray, flut: FLUT) -> float:
    """Mean over collision pairs of the componentwise-mean L1 distance
    between the two entries' full feature blocks (coefficients and density)."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.size == 0:
        return 0.0
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ContractViolation("pairs must be (P, 2) entry indices")
    diff = flut.data[pairs[:, 0]] - flut.data[pairs[:, 1]]
    return float(np.mean(np.abs(diff)))


# ---------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class GradBuffer:
    """Dense gradient congruent to the FLUT plus the touched-entry bitmap;
    entries outside the bitmap are exactly zero."""

    values: np.ndarray
    touched: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != self.touched.shape[0]:
            raise ContractViolation("bitmap length must match the entry count")

    def validate(self) -> None:
        if np.any(self.values[~self.touched] != 0.0):
            raise ContractViolation("gradient leaked into untouched entries")

    def add(self, rows: np.ndarray, grads: np.ndarray) -> None:
        np.add.at(self.values, rows, grads)
        self.touched[rows] = True


def backward_batch(
    flut: FLUT,
    warp: WarpResult | None,
    dirs_world: np.ndarray,
    offsets: np.ndarray,
    hit_idx: np.ndarray,
    hit_t0: np.ndarray,
    hit_t1: np.ndarray,
    dldf: np.ndarray,
    dlda: np.ndarray,
    deterministic: bool = True,
) -> GradBuffer:
    """Analytic gradient of the batch loss w.r.t. every touched FLUT entry.

    ``offsets``/``hit_*`` are the trace returned by the fitting forward pass
    (full integration); ``dldf``/``dlda`` are the loss gradients w.r.t. each
    ray's premultiplied color and alpha.
    """
    rot_index, rot_inv = _rotation_tables(warp, len(flut))
    dtype = flut.data.dtype
    values = kernels.backward_rays(
        offsets,
        hit_idx,
        hit_t0,
        hit_t1,
        np.ascontiguousarray(dirs_world, dtype=np.float64),
        rot_index,
        rot_inv,
        flut.data,
        np.ascontiguousarray(dldf, dtype=dtype),
        np.ascontiguousarray(dlda, dtype=dtype),
        flut.degree,
        flut.channels,
        deterministic,
        get_num_threads(),
    )
    touched = np.zeros(len(flut), dtype=bool)
    touched[np.unique(np.asarray(hit_idx, dtype=np.int64))] = True
    return GradBuffer(values=values, touched=touched)


# ---------------------------------------------------------------------------
# configuration, datasets, reports


@dataclass(frozen=True)
class FitConfig:
    """Training-loop knobs; defaults suit the bundled synthetic scenes."""

    iterations: int = 2000
    rays_per_batch: int = 4096
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_vrt: float = 0.01
    pose_policy: str = "round_robin"
    seed: int = 0
    probe_interval: int = 50
    log_interval: int = 50
    deterministic: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_batch < 1:
            raise ContractViolation("iterations and rays_per_batch must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ContractViolation("rates must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("moment decays must lie in [0, 1)")
        if self.lambda_vrt < 0:
            raise ContractViolation("lambda_vrt must be >= 0")
        if self.pose_policy not in ("round_robin", "random"):
            raise ContractViolation(f"unknown pose policy {self.pose_policy!r}")
        if self.probe_interval < 1 or self.log_interval < 1:
            raise ContractViolation("intervals must be >= 1")


@dataclass(frozen=True)
class LossReport:
    """Per-iteration training record. ``probe_psnr`` is the most recent
    held-out measurement (NaN before the first probe, or with no probe view).
    """

    iteration: int
    l_rgba: float
    l_vrt: float
    total: float
    probe_psnr: float
    rays_per_s: float

    def __post_init__(self):
        if self.l_rgba < 0 or self.l_vrt < 0 or self.total < 0:
            raise ContractViolation("loss terms must be non-negative")

    def record(self) -> str:
        return json.dumps(
            {
                "iteration": self.iteration,
                "l_rgba": round(self.l_rgba, 8),
                "l_vrt": round(self.l_vrt, 8),
                "total": round(self.total, 8),
                "probe_psnr": None if math.isnan(self.probe_psnr) else round(self.probe_psnr, 4),
                "rays_per_s": round(self.rays_per_s, 1),
            }
        )


@dataclass(frozen=True)
class FitDataset:
    """Training images with their cameras and (optional) per-image poses.

    ``features`` are premultiplied color images (H, W, C); ``alphas`` are
    coverage images (H, W). ``frames[i]`` names the pose of image i (an index
    into ``poses``) or None for the canonical pose. Ray ids number every
    pixel of every image consecutively, in dataset order, row-major.
    """

    cameras: tuple[Camera, ...]
    features: tuple[np.ndarray, ...]
    alphas: tuple[np.ndarray, ...]
    frames: tuple[int | None, ...] = ()
    poses: tuple[Pose, ...] = ()
    train_indices: tuple[int, ...] = ()
    probe_index: int | None = None

    def __post_init__(self):
        n = len(self.cameras)
        if n == 0:
            raise ContractViolation("dataset needs at least one image")
        if len(self.features) != n or len(self.alphas) != n:
            raise ContractViolation("cameras, features, and alphas differ in length")
        frames = self.frames if self.frames else (None,) * n
        if len(frames) != n:
            raise ContractViolation("frames must name a pose per image")
        for cam, f, a, fr in zip(self.cameras, self.features, self.alphas, frames):
            if f.shape[:2] != (cam.height, cam.width) or a.shape != f.shape[:2]:
                raise ContractViolation("image dimensions do not match the camera")
            if not (np.isfinite(f).all() and np.isfinite(a).all()):
                raise ContractViolation("ground truth contains non-finite values")
            if fr is not None and not 0 <= fr < len(self.poses):
                raise ContractViolation(f"frame {fr} has no pose")
        train = self.train_indices if self.train_indices else tuple(
            i for i in range(n) if i != self.probe_index
        )
        for i in train:
            if not 0 <= i < n:
                raise ContractViolation(f"train index {i} out of range")
        if not train:
            raise ContractViolation("no training images")
        if self.probe_index is not None:
            if not 0 <= self.probe_index < n:
                raise ContractViolation("probe index out of range")
            if self.probe_index in train:
                raise ContractViolation("the probe view must be held out")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "train_indices", train)

    @property
    def channels(self) -> int:
        return self.features[0].shape[2]

    def pose(self, image_index: int) -> Pose | None:
        f = self.frames[image_index]
        return None if f is None else self.poses[f]

    @staticmethod
    def from_manifest(
        manifest,
        train_indices: tuple[int, ...] = (),
        probe_index: int | None = None,
    ) -> "FitDataset":
        """Load a scene directory; PNG colors are premultiplied here."""
        from .assetio import load_png

        features = []
        alphas = []
        frames = []
        cameras = []
        for ref in manifest.images:
            rgba = load_png(manifest.image_path(ref))
            features.append(rgba[:, :, :3] * rgba[:, :, 3:])
            alphas.append(rgba[:, :, 3])
            frames.append(ref.frame)
            cameras.append(manifest.cameras[ref.camera])
        clip = manifest.clip()
        return FitDataset(
            cameras=tuple(cameras),
            features=tuple(features),
            alphas=tuple(alphas),
            frames=tuple(frames),
            poses=clip.frames if clip is not None else (),
            train_indices=train_indices,
            probe_index=probe_index,
        )


# ---------------------------------------------------------------------------
# sparse adaptive-moment optimizer


class SparseAdam:
    """First/second-moment update applied only to touched rows; bias
    correction uses the global step count. Untouched rows keep stale moments.
    """

    def __init__(self, shape: tuple[int, int], config: FitConfig):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.config = config
        self.t = 0

    def step(self, params: np.ndarray, grad: GradBuffer) -> None:
        c = self.config
        self.t += 1
        rows = np.flatnonzero(grad.touched)
        if rows.size == 0:
            return
        g = grad.values[rows]
        self.m[rows] = c.beta1 * self.m[rows] + (1.0 - c.beta1) * g
        self.v[rows] = c.beta2 * self.v[rows] + (1.0 - c.beta2) * g * g
        m_hat = self.m[rows] / (1.0 - c.beta1**self.t)
        v_hat = self.v[rows] / (1.0 - c.beta2**self.t)
        params[rows] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


# ---------------------------------------------------------------------------
# the training loop


class _PoseGroup:
    """All training rays that share one pose, with the warp cached and the
    octree rebuilt lazily (collision winners depend on the live densities,
    so posed groups rebuild at every visit; the canonical group never does).
    """

    def __init__(self, pose, image_indices, dataset, voxels, skeleton, weights, ray_base):
        self.pose = pose
        origins = []
        dirs = []
        gt_f = []
        gt_a = []
        ids = []
        for i in image_indices:
            o, d = rays_for_camera(dataset.cameras[i])
            origins.append(o)
            dirs.append(d)
            gt_f.append(dataset.features[i].reshape(-1, dataset.channels))
            gt_a.append(dataset.alphas[i].reshape(-1))
            ids.append(ray_base[i] + np.arange(o.shape[0], dtype=np.int64))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.gt_f = np.concatenate(gt_f)
        self.gt_a = np.concatenate(gt_a)
        self.ray_ids = np.concatenate(ids)
        self.voxels = voxels
        self.skeleton = skeleton
        self.weights = weights
        if pose is None:
            self.warp = None
            self._octree = None
        else:
            self.warp = warp_voxels(voxels, weights, skeleton, pose)
        self.pairs = np.empty((0, 2), dtype=np.int64)

    def octree(self, flut: FLUT):
        if self.pose is None:
            if self._octree is None:
                self._octree = build_octree(self.voxels)
            return self._octree
        resolved = resolve_collisions(self.warp, flut)
        if resolved.cells.shape[0] == 0:
            raise EmptyWarpError(self.warp.dropped)
        self.pairs = resolved.pairs
        return build_octree(
            resolved.cells,
            resolved.flut_indices,
            resolution=self.voxels.resolution,
            bounds=self.voxels.bounds,
        )


def fit(
    voxels: VoxelSet,
    dataset: FitDataset,
    config: FitConfig | None = None,
    *,
    skeleton: Skeleton | None = None,
    weights: SkinWeights | None = None,
    init: FLUT | None = None,
    degree: int = 2,
    channels: int | None = None,
    log_stream=None,
    log_path: str | None = None,
) -> tuple[FLUT, list[LossReport]]:
    """Optimize a FLUT against the dataset; returns it with the loss series.

    Every iteration samples a pose (round-robin or at random), rebuilds the
    posed octree, draws ``rays_per_batch`` rays uniformly from that pose's
    views, runs the full-integration forward pass, and applies one sparse
    adaptive-moment step; densities are clamped non-negative afterwards.
    Reproducible end to end for a fixed seed in deterministic mode. Progress
    records (iteration, losses, probe PSNR, rays/s) stream as JSON lines.
    """
    config = config or FitConfig()
    channels = dataset.channels if channels is None else channels
    if dataset.channels != channels:
        raise ContractViolation("dataset channel count does not match the model")
    rng = np.random.default_rng(config.seed)

    if init is None:
        flut = FLUT.initialize(
            len(voxels), degree, channels, float(np.min(voxels.cell_size)), rng
        )
    else:
        if len(init) != len(voxels):
            raise ContractViolation("init FLUT does not match the voxel count")
        flut = FLUT(init.data.copy(), init.degree, init.channels)

    # pose groups over the training images, canonical first
    ray_base = np.zeros(len(dataset.cameras), dtype=np.int64)
    sizes = [c.width * c.height for c in dataset.cameras]
    ray_base[1:] = np.cumsum(sizes)[:-1]
    by_frame: dict = {}
    for i in dataset.train_indices:
        by_frame.setdefault(dataset.frames[i], []).append(i)
    if any(f is not None for f in by_frame) and (skeleton is None or weights is None):
        raise ContractViolation("posed images need a skeleton and skin weights")
    keys = sorted(by_frame, key=lambda f: (f is not None, f if f is not None else 0))
    groups = [
        _PoseGroup(
            None if f is None else dataset.poses[f],
            by_frame[f], dataset, voxels, skeleton, weights, ray_base,
        )
        for f in keys
    ]

    optimizer = SparseAdam(flut.data.shape, config)
    reports: list[LossReport] = []
    probe_psnr = math.nan
    n_p = config.rays_per_batch
    nthreads = get_num_threads()
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    stream = log_stream if log_stream is not None else sys.stdout
    window_start = time.perf_counter()
    window_iters = 0

    def emit(report: LossReport) -> None:
        line = report.record()
        print(line, file=stream)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()

    try:
        for t in range(1, config.iterations + 1):
            if config.pose_policy == "round_robin":
                group = groups[(t - 1) % len(groups)]
            else:
                group = groups[int(rng.integers(0, len(groups)))]
            octree = group.octree(flut)

            pick = rng.integers(0, group.origins.shape[0], size=n_p)
            origins = group.origins[pick]
            dirs = group.dirs[pick]
            origins_g, dirs_g = _grid_rays(octree, origins, dirs)
            rot_index, rot_inv = _rotation_tables(group.warp, len(flut))
            f, a, offsets, hit_idx, hit_t0, hit_t1 = kernels.forward_fit(
                octree.codes, octree.flut_idx, octree.root, octree.left,
                octree.right, octree.box_min, octree.box_size,
                origins_g, dirs_g, np.ascontiguousarray(dirs),
                0.0, np.inf, flut.data, rot_index, rot_inv,
                flut.degree, channels, nthreads,
            )
            bad = ~(np.isfinite(f).all(axis=1) & np.isfinite(a))
            if bad.any():
                raise FitDivergenceError(t, int(group.ray_ids[pick][np.argmax(bad)]))

            gt_f = group.gt_f[pick]
            gt_a = group.gt_a[pick]
            l_rgba = loss_rgba(f, a, gt_f, gt_a)
            grad = backward_batch(
                flut, group.warp, dirs, offsets, hit_idx, hit_t0, hit_t1,
                np.sign(f - gt_f) / n_p, np.sign(a - gt_a) / n_p,
                deterministic=config.deterministic,
            )

            l_vrt = 0.0
            if config.lambda_vrt > 0 and group.pairs.size:
                pairs = group.pairs
                l_vrt = loss_vrt(pairs, flut)
                s = np.sign(flut.data[pairs[:, 0]] - flut.data[pairs[:, 1]])
                s *= config.lambda_vrt / (pairs.shape[0] * flut.data.shape[1])
                grad.add(pairs[:, 0], s)
                grad.add(pairs[:, 1], -s)

            optimizer.step(flut.data, grad)
            flut.clamp_densities()

            window_iters += 1
            probe_due = (
                t == 1 or t == config.iterations or t % config.probe_interval == 0
            )
            if probe_due and dataset.probe_index is not None:
                probe_psnr = _probe(dataset, voxels, flut, skeleton, weights, groups)
            elapsed = time.perf_counter() - window_start
            rays_per_s = window_iters * n_p / elapsed if elapsed > 0 else 0.0
            report = LossReport(
                iteration=t,
                l_rgba=l_rgba,
                l_vrt=l_vrt,
                total=l_rgba + config.lambda_vrt * l_vrt,
                probe_psnr=probe_psnr,
                rays_per_s=rays_per_s,
            )
            reports.append(report)
            if t == 1 or t == config.iterations or t % config.log_interval == 0:
                emit(report)
                window_start = time.perf_counter()
                window_iters = 0
    finally:
        if log_file:
            log_file.close()
    return flut, reports


def _probe(
    dataset: FitDataset,
    voxels: VoxelSet,
    flut: FLUT,
    skeleton: Skeleton | None,
    weights: SkinWeights | None,
    groups: list[_PoseGroup],
) -> float:
    """Held-out PSNR over premultiplied color + alpha, at inference options."""
    i = dataset.probe_index
    pose = dataset.pose(i)
    if pose is None:
        canonical = next((g for g in groups if g.pose is None), None)
        octree = canonical.octree(flut) if canonical else build_octree(voxels)
        warp = None
    else:
        if skeleton is None or weights is None:
            raise ContractViolation("posed probe needs a skeleton and skin weights")
        warp = warp_voxels(voxels, weights, skeleton, pose)
        resolved = resolve_collisions(warp, flut)
        if resolved.cells.shape[0] == 0:
            raise EmptyWarpError(warp.dropped)
        octree = build_octree(
            resolved.cells, resolved.flut_indices,
            resolution=voxels.resolution, bounds=voxels.bounds,
        )
    frame = render_view(octree, flut, warp, dataset.cameras[i], RenderOptions())
    pred = np.concatenate([frame.features, frame.alpha[:, :, None]], axis=2)
    gt = np.concatenate([dataset.features[i], dataset.alphas[i][:, :, None]], axis=2)
    return psnr(pred, gt)
