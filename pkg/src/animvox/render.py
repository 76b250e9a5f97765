"""Volume rendering over the posed octree.

A frame is produced in four steps: warp the canonical voxels into the
requested pose, resolve live-cell collisions, rebuild the octree over the
surviving cells, and integrate every pixel ray front to back. Per-ray work
runs in the selected kernel backend and is deterministic for fixed inputs
regardless of thread count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import backend
from .backend import kernels
from .errors import ContractViolation, EmptyWarpError
from .geometry import Camera, Ray, rays_for_camera
from .rigging import (
    Pose,
    SkinWeights,
    Skeleton,
    WarpResult,
    identity_warp,
    resolve_collisions,
    warp_voxels,
)
from .volume import FLUT, VoxelOctree, VoxelSet, build_octree


@dataclass(frozen=True)
class RenderOptions:
    """Rendering knobs.

    ``lambda_th`` is the early-stop opacity margin: integration stops once
    accumulated alpha exceeds 1 - lambda_th, bounding the dropped tail by
    lambda_th. ``sigma_dep`` is the density above which a voxel registers in
    the depth buffer. ``background`` (a length-C solid color) is consumed
    when buffers are converted for display or export, never during
    integration; None keeps frames transparent. ``image_size`` (width,
    height), when set, re-scales the camera to that resolution.
    """

    lambda_th: float = 0.01
    sigma_dep: float = 5.0
    background: np.ndarray | None = None
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not 0.0 < self.lambda_th < 1.0:
            raise ContractViolation("lambda_th must be in (0, 1)")
        if self.sigma_dep < 0.0:
            raise ContractViolation("sigma_dep must be >= 0")
        if self.background is not None:
            bg = np.asarray(self.background, dtype=np.float64).reshape(-1)
            object.__setattr__(self, "background", bg)
        if self.image_size is not None:
            w, h = self.image_size
            if w < 1 or h < 1:
                raise ContractViolation("image_size must be positive")


@dataclass(frozen=True)
class IntegrationTrace:
    """Per-hit integration record of one ray: exclusive transmittance
    T (T of the first hit is 1), per-hit alpha, and segment length."""

    flut_indices: np.ndarray
    deltas: np.ndarray
    alphas: np.ndarray
    transmittances: np.ndarray


@dataclass(frozen=True)
class FrameBuffers:
    """Premultiplied feature map F (H, W, C), coarse alpha A (H, W), and
    depth (H, W; +inf where no voxel passed the depth threshold)."""

    features: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    def over_background(self, color) -> np.ndarray:
        """F composited over a solid background color; (H, W, C)."""
        bg = np.asarray(color, dtype=np.float64).reshape(1, 1, -1)
        if bg.shape[2] != self.channels:
            raise ContractViolation("background channel count mismatch")
        return self.features + (1.0 - self.alpha)[:, :, None] * bg


@dataclass(frozen=True)
class CharacterAsset:
    """A renderable character: canonical voxels, their FLUT, and (optionally)
    the rig that poses them."""

    voxels: VoxelSet
    flut: FLUT
    skeleton: Skeleton | None = None
    weights: SkinWeights | None = None

    def __post_init__(self):
        if len(self.flut) != len(self.voxels):
            raise ContractViolation("FLUT length != voxel count")
        if (self.skeleton is None) != (self.weights is None):
            raise ContractViolation("skeleton and weights must come together")
        if self.weights is not None and self.weights.n_voxels != len(self.voxels):
            raise ContractViolation("weights were baked for a different voxel set")

    @property
    def rigged(self) -> bool:
        return self.skeleton is not None


def _scaled_camera(camera: Camera, image_size: tuple[int, int] | None) -> Camera:
    if image_size is None:
        return camera
    w, h = image_size
    sx = w / camera.width
    sy = h / camera.height
    return Camera(
        fx=camera.fx * sx,
        fy=camera.fy * sy,
        cx=camera.cx * sx,
        cy=camera.cy * sy,
        width=w,
        height=h,
        world_to_camera=camera.world_to_camera,
    )


def _rotation_tables(warp: WarpResult | None, n_entries: int):
    """(per-entry rotation index, per-rotation inverse matrices) for the
    kernels; identity when no warp is involved."""
    if warp is None:
        return np.zeros(n_entries, dtype=np.int32), np.eye(3)[None].copy()
    return warp.rotation_joint, warp.joint_rot_inv


def posed_octree(
    asset: CharacterAsset, pose: Pose | None
) -> tuple[VoxelOctree, WarpResult]:
    """Warp, resolve collisions, and rebuild the octree for one pose.

    A None pose (or an unrigged asset with the canonical pose) renders the
    canonical voxels directly.
    """
    if pose is None or not asset.rigged:
        if pose is not None and not asset.rigged and not pose.is_canonical:
            raise ContractViolation("asset has no rig; only the canonical pose renders")
        warp = identity_warp(asset.voxels)
        octree = build_octree(asset.voxels)
        return octree, warp
    warp = warp_voxels(asset.voxels, asset.weights, asset.skeleton, pose)
    resolved = resolve_collisions(warp, asset.flut)
    if resolved.cells.shape[0] == 0:
        raise EmptyWarpError(warp.dropped)
    octree = build_octree(
        resolved.cells,
        resolved.flut_indices,
        resolution=asset.voxels.resolution,
        bounds=asset.voxels.bounds,
    )
    return octree, warp


def _grid_rays(octree: VoxelOctree, origins: np.ndarray, dirs: np.ndarray):
    cell = octree.cell_size
    origins_g = (origins - octree.bounds.lo) / cell
    dirs_g = dirs / cell
    return np.ascontiguousarray(origins_g), np.ascontiguousarray(dirs_g)


def integrate_ray(
    octree: VoxelOctree,
    flut: FLUT,
    ray: Ray,
    warp: WarpResult | None = None,
    options: RenderOptions | None = None,
    return_trace: bool = False,
):
    """Integrate one ray; returns (F (C,), alpha, depth, trace or None).

    Transmittance is exclusive (T = 1 entering the first voxel) and each
    segment contributes alpha_i = T_i (1 - exp(-sigma_i delta_i)) with the
    exact slab-derived delta_i. Integration stops once alpha exceeds
    1 - lambda_th; depth is the entry distance of the first voxel denser
    than sigma_dep.
    """
    opts = options or RenderOptions()
    rot_index, rot_inv = _rotation_tables(warp, len(flut))
    origins_g, dirs_g = _grid_rays(
        octree, ray.origin[None, :], ray.direction[None, :]
    )
    f, a, d = kernels.render_rays(
        octree.codes,
        octree.flut_idx,
        octree.root,
        octree.left,
        octree.right,
        octree.box_min,
        octree.box_size,
        origins_g,
        dirs_g,
        np.ascontiguousarray(ray.direction[None, :]),
        0.0,
        np.inf,
        flut.data,
        rot_index,
        rot_inv,
        flut.degree,
        flut.channels,
        opts.lambda_th,
        opts.sigma_dep,
        True,
        backend.get_num_threads(),
    )
    trace = None
    if return_trace:
        trace = _trace_ray(octree, flut, ray, opts)
    return f[0], float(a[0]), float(d[0]), trace


def _trace_ray(
    octree: VoxelOctree, flut: FLUT, ray: Ray, opts: RenderOptions
) -> IntegrationTrace:
    from .volume import traverse_ray as _traverse

    segs = _traverse(octree, ray)
    sigma = flut.densities[segs.flut_indices]
    stop = 1.0 - opts.lambda_th
    idx_out: list[int] = []
    deltas: list[float] = []
    alphas: list[float] = []
    ts: list[float] = []
    transmit = 1.0
    acc = 0.0
    for i in range(segs.flut_indices.size):
        delta = float(segs.deltas[i])
        em = math.exp(-float(sigma[i]) * delta)
        a = transmit * (1.0 - em)
        idx_out.append(int(segs.flut_indices[i]))
        deltas.append(delta)
        alphas.append(a)
        ts.append(transmit)
        transmit *= em
        acc += a
        if acc > stop:
            break
    return IntegrationTrace(
        flut_indices=np.array(idx_out, dtype=np.int64),
        deltas=np.array(deltas),
        alphas=np.array(alphas),
        transmittances=np.array(ts),
    )


def render_frame(
    asset: CharacterAsset,
    pose: Pose | None,
    camera: Camera,
    options: RenderOptions | None = None,
) -> FrameBuffers:
    """Render one frame: warp, resolve, rebuild, integrate every pixel."""
    opts = options or RenderOptions()
    octree, warp = posed_octree(asset, pose)
    return render_view(octree, asset.flut, warp, camera, opts)


def timed_render_frame(
    asset: CharacterAsset,
    pose: Pose | None,
    camera: Camera,
    options: RenderOptions | None = None,
) -> tuple[FrameBuffers, dict[str, float]]:
    """render_frame plus per-stage wall-clock seconds, keyed "warp",
    "build-octree", and "volume-render"."""
    opts = options or RenderOptions()
    t0 = time.perf_counter()
    if pose is None or not asset.rigged:
        if pose is not None and not asset.rigged and not pose.is_canonical:
            raise ContractViolation("asset has no rig; only the canonical pose renders")
        warp = identity_warp(asset.voxels)
        t1 = time.perf_counter()
        octree = build_octree(asset.voxels)
    else:
        warp = warp_voxels(asset.voxels, asset.weights, asset.skeleton, pose)
        t1 = time.perf_counter()
        resolved = resolve_collisions(warp, asset.flut)
        if resolved.cells.shape[0] == 0:
            raise EmptyWarpError(warp.dropped)
        octree = build_octree(
            resolved.cells,
            resolved.flut_indices,
            resolution=asset.voxels.resolution,
            bounds=asset.voxels.bounds,
        )
    t2 = time.perf_counter()
    frame = render_view(octree, asset.flut, warp, camera, opts)
    times = {
        "warp": t1 - t0,
        "build-octree": t2 - t1,
        "volume-render": time.perf_counter() - t2,
    }
    return frame, times


def render_view(
    octree: VoxelOctree,
    flut: FLUT,
    warp: WarpResult | None,
    camera: Camera,
    options: RenderOptions | None = None,
) -> FrameBuffers:
    """Integrate every pixel of a camera against an already-posed octree."""
    opts = options or RenderOptions()
    cam = _scaled_camera(camera, opts.image_size)
    origins, dirs = rays_for_camera(cam)
    origins_g, dirs_g = _grid_rays(octree, origins, dirs)
    rot_index, rot_inv = _rotation_tables(warp, len(flut))
    f, a, d = kernels.render_rays(
        octree.codes,
        octree.flut_idx,
        octree.root,
        octree.left,
        octree.right,
        octree.box_min,
        octree.box_size,
        origins_g,
        dirs_g,
        np.ascontiguousarray(dirs),
        0.0,
        np.inf,
        flut.data,
        rot_index,
        rot_inv,
        flut.degree,
        flut.channels,
        opts.lambda_th,
        opts.sigma_dep,
        True,
        backend.get_num_threads(),
    )
    h, w = cam.height, cam.width
    return FrameBuffers(
        features=f.reshape(h, w, flut.channels),
        alpha=a.reshape(h, w),
        depth=d.reshape(h, w),
    )


def composite(
    fg: FrameBuffers, bg_color: np.ndarray, bg_depth: np.ndarray
) -> np.ndarray:
    """Depth-resolved blend of a rendered frame over a rasterized scene.

    Where the volume is nearer (fg.depth <= bg.depth) the premultiplied
    foreground goes over the background; elsewhere the background wins.
    """
    bg_color = np.asarray(bg_color, dtype=np.float64)
    bg_depth = np.asarray(bg_depth, dtype=np.float64)
    h, w = fg.alpha.shape
    if bg_color.shape != (h, w, fg.channels) or bg_depth.shape != (h, w):
        raise ContractViolation("composite buffer dimensions mismatch")
    front = fg.depth <= bg_depth
    out = bg_color.copy()
    out[front] = fg.features[front] + (1.0 - fg.alpha[front])[:, None] * bg_color[front]
    return out
