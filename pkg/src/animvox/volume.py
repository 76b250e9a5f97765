"""Sparse voxel model: conservative carving, Morton/radix-tree octree,
point queries, exact ray traversal, and the feature look-up table.

The octree is a binary radix tree over Morton-sorted leaf cells (one leaf
per occupied unit cell at the finest level). Internal nodes are Morton
octants derived from common code prefixes, so the same leaf set always
rebuilds to bit-identical arrays no matter the backend or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .backend import kernels
from .errors import CarvedEmptyError, ContractViolation, DuplicateMortonError
from .geometry import Camera, Ray

MAX_GRID_BITS = 21


# ---------------------------------------------------------------------------
# bounds and voxel sets


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned world box [lo, hi)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ContractViolation("bounds must be 3-vectors")
        if not np.all(hi > lo):
            raise ContractViolation("bounds must have positive extent")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def cell_size(self, resolution: int) -> np.ndarray:
        return (self.hi - self.lo) / resolution

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


def _check_resolution(resolution: int) -> None:
    if resolution < 1 or resolution & (resolution - 1):
        raise ContractViolation(f"resolution {resolution} is not a power of two")
    if resolution > (1 << MAX_GRID_BITS):
        raise ContractViolation(f"resolution {resolution} exceeds 2^{MAX_GRID_BITS}")


@dataclass(frozen=True)
class VoxelSet:
    """Occupied cells of a regular grid plus their world placement."""

    resolution: int
    bounds: Bounds
    cells: np.ndarray

    def __post_init__(self):
        _check_resolution(self.resolution)
        cells = np.ascontiguousarray(np.asarray(self.cells), dtype=np.int32)
        if cells.ndim != 2 or cells.shape[1] != 3 or cells.shape[0] < 1:
            raise ContractViolation("cells must be a non-empty (N, 3) array")
        if cells.min() < 0 or cells.max() >= self.resolution:
            raise ContractViolation("cell coordinates outside [0, resolution)")
        if np.unique(morton_encode(cells)).size != cells.shape[0]:
            raise ContractViolation("duplicate cells")
        object.__setattr__(self, "cells", cells)

    def __len__(self) -> int:
        return self.cells.shape[0]

    def centers(self) -> np.ndarray:
        """Canonical world positions p_i = cell centers; (N, 3) float64."""
        cell = self.bounds.cell_size(self.resolution)
        return self.bounds.lo + (self.cells.astype(np.float64) + 0.5) * cell

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.cell_size(self.resolution)


# ---------------------------------------------------------------------------
# Morton codes (public scalar/array forms; kernels do the bit work)


def morton_encode(cells) -> np.ndarray | np.uint64:
    """Interleave grid coordinates into 64-bit codes (x lowest slot, then y, z)."""
    arr = np.atleast_2d(np.asarray(cells, dtype=np.int64))
    if arr.shape[-1] != 3:
        raise ContractViolation("expected (i, j, k) coordinates")
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << MAX_GRID_BITS)):
        raise ContractViolation(f"coordinates outside [0, 2^{MAX_GRID_BITS})")
    codes = kernels.morton_encode(arr)
    if np.asarray(cells).ndim == 1:
        return np.uint64(codes[0])
    return codes


def morton_decode(codes) -> np.ndarray:
    """Inverse of morton_encode; returns int64 coordinates."""
    arr = np.atleast_1d(np.asarray(codes, dtype=np.uint64))
    out = kernels.morton_decode(arr)
    if np.asarray(codes).ndim == 0:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# FLUT


@dataclass
class FLUT:
    """Per-voxel appearance table: H*C SH coefficients then one density.

    ``data[i, h*channels + c]`` is coefficient k_h for channel c of entry i;
    ``data[i, -1]`` is the density (1/world units, kept >= 0).
    """

    data: np.ndarray
    degree: int
    channels: int

    def __post_init__(self):
        if not (0 <= self.degree <= 4):
            raise ContractViolation("SH degree outside [0, 4]")
        if not (1 <= self.channels <= 16):
            raise ContractViolation("channel count outside [1, 16]")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        h = (self.degree + 1) * (self.degree + 1)
        if data.ndim != 2 or data.shape[1] != h * self.channels + 1:
            raise ContractViolation(
                f"FLUT width {data.shape[1] if data.ndim == 2 else '?'} != H*C+1 = {h * self.channels + 1}"
            )
        if np.any(data[:, -1] < 0):
            raise ContractViolation("negative density")
        self.data = data

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def h_count(self) -> int:
        return (self.degree + 1) * (self.degree + 1)

    @property
    def densities(self) -> np.ndarray:
        return self.data[:, -1]

    @property
    def coefficients(self) -> np.ndarray:
        """(N, H, C) view of the SH coefficients."""
        n = self.data.shape[0]
        return self.data[:, :-1].reshape(n, self.h_count, self.channels)

    def clamp_densities(self) -> None:
        np.maximum(self.data[:, -1], 0.0, out=self.data[:, -1])

    @staticmethod
    def initialize(
        count: int, degree: int, channels: int, cell_size: float, rng: np.random.Generator
    ) -> "FLUT":
        """Random start: mid-gray band-0, small noise elsewhere, density
        0.1/cell so initial transmittance is neither opaque nor dead."""
        h = (degree + 1) * (degree + 1)
        data = rng.uniform(-0.01, 0.01, size=(count, h * channels + 1))
        data[:, :channels] = 0.5 / 0.28209479177387814
        data[:, -1] = 0.1 / cell_size
        return FLUT(data, degree, channels)


# ---------------------------------------------------------------------------
# octree


@dataclass(frozen=True)
class VoxelOctree:
    """Immutable Morton radix tree over occupied cells."""

    resolution: int
    bounds: Bounds
    codes: np.ndarray
    flut_idx: np.ndarray
    root: int
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    box_min: np.ndarray = field(repr=False)
    box_size: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.cell_size(self.resolution)

    def to_grid(self, points: np.ndarray) -> np.ndarray:
        """World points -> continuous grid coordinates (cells are unit cubes)."""
        return (np.asarray(points, dtype=np.float64) - self.bounds.lo) / self.cell_size


def build_octree(voxels, flut_indices=None, *, resolution=None, bounds=None) -> VoxelOctree:
    """Morton-encode, sort, and link cells into a radix tree.

    ``voxels`` is a VoxelSet or an (N, 3) integer cell array (then
    ``resolution`` and ``bounds`` are required). ``flut_indices`` defaults to
    0..N-1 in the given cell order. Duplicate cells are the caller's problem
    and rejected loudly.
    """
    if isinstance(voxels, VoxelSet):
        cells = voxels.cells
        resolution = voxels.resolution
        bounds = voxels.bounds
    else:
        cells = np.ascontiguousarray(np.asarray(voxels), dtype=np.int32)
        if resolution is None or bounds is None:
            raise ContractViolation("raw cell arrays need resolution and bounds")
        _check_resolution(resolution)
    if cells.shape[0] < 1:
        raise ContractViolation("empty cell list")
    if cells.min() < 0 or cells.max() >= resolution:
        raise ContractViolation("cell coordinates outside [0, resolution)")
    if flut_indices is None:
        flut_indices = np.arange(cells.shape[0], dtype=np.uint32)
    else:
        flut_indices = np.ascontiguousarray(np.asarray(flut_indices), dtype=np.uint32)
        if flut_indices.shape != (cells.shape[0],):
            raise ContractViolation("flut_indices length != cell count")

    codes = kernels.morton_encode(cells.astype(np.int64))
    order = kernels.sort_order(codes, nthreads=backend.get_num_threads())
    codes = np.ascontiguousarray(codes[order])
    flut_idx = np.ascontiguousarray(flut_indices[order])
    dup = np.nonzero(codes[1:] == codes[:-1])[0]
    if dup.size:
        i, j = morton_decode(codes[dup[0]]), int(codes[dup[0]])
        raise DuplicateMortonError(f"duplicate cell {tuple(int(v) for v in i)} (code {j})")
    root, left, right, box_min, box_size = kernels.build_tree(
        codes, nthreads=backend.get_num_threads()
    )
    return VoxelOctree(
        resolution=resolution,
        bounds=bounds,
        codes=codes,
        flut_idx=flut_idx,
        root=int(root),
        left=left,
        right=right,
        box_min=box_min,
        box_size=box_size,
    )


def query_point(octree: VoxelOctree, p) -> int | None:
    """FLUT index of the leaf containing world point p, or None."""
    g = octree.to_grid(np.asarray(p, dtype=np.float64))
    if np.any(g < 0) or np.any(g >= octree.resolution):
        return None
    code = morton_encode(np.floor(g).astype(np.int64))
    k = int(np.searchsorted(octree.codes, code))
    if k < len(octree.codes) and octree.codes[k] == code:
        return int(octree.flut_idx[k])
    return None


def query_points(octree: VoxelOctree, points: np.ndarray) -> np.ndarray:
    """Vectorized query_point; -1 marks empty space / out of bounds."""
    g = octree.to_grid(points)
    inside = np.all((g >= 0) & (g < octree.resolution), axis=1)
    out = np.full(points.shape[0], -1, dtype=np.int64)
    if not inside.any():
        return out
    codes = kernels.morton_encode(np.floor(g[inside]).astype(np.int64))
    k = np.searchsorted(octree.codes, codes)
    k_clip = np.minimum(k, len(octree.codes) - 1)
    hit = octree.codes[k_clip] == codes
    vals = np.where(hit, octree.flut_idx[k_clip].astype(np.int64), -1)
    out[inside] = vals
    return out


# ---------------------------------------------------------------------------
# traversal


@dataclass(frozen=True)
class RaySegmentList:
    """Per-ray occupied segments, front to back, t in world units."""

    flut_indices: np.ndarray
    t_enter: np.ndarray
    t_exit: np.ndarray

    def __len__(self) -> int:
        return self.flut_indices.shape[0]

    @property
    def deltas(self) -> np.ndarray:
        return self.t_exit - self.t_enter


def traverse_ray(
    octree: VoxelOctree, ray: Ray, t_min: float = 0.0, t_max: float = np.inf
) -> RaySegmentList:
    """Exact slab-test traversal of every occupied leaf along the ray."""
    if not t_min < t_max:
        raise ContractViolation(f"t_min {t_min} must be < t_max {t_max}")
    cell = octree.cell_size
    origin_g = (ray.origin - octree.bounds.lo) / cell
    dir_g = ray.direction / cell
    idx, t0, t1 = kernels.traverse_ray(
        octree.codes,
        octree.flut_idx,
        octree.root,
        octree.left,
        octree.right,
        octree.box_min,
        octree.box_size,
        np.ascontiguousarray(origin_g),
        np.ascontiguousarray(dir_g),
        float(t_min),
        float(t_max),
    )
    return RaySegmentList(idx, t0, t1)


# ---------------------------------------------------------------------------
# carving


def _disk(radius: int) -> np.ndarray:
    if radius < 0:
        raise ContractViolation("dilation radius must be >= 0")
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def carve_volume(
    views: list[tuple[Camera, np.ndarray]],
    resolution: int,
    bounds: Bounds,
    dilation_radius_px: int = 5,
    alpha_threshold: float = 0.005,
) -> VoxelSet:
    """Visual-hull carve: keep a cell iff every camera that sees its center
    finds the dilated alpha mask set there; drop cells no camera sees.

    ``views`` pairs each camera with its (H, W) alpha image in [0, 1].
    """
    from scipy import ndimage

    if not views:
        raise ContractViolation("need at least one view")
    if not (0.0 < alpha_threshold < 1.0):
        raise ContractViolation("alpha_threshold must be in (0, 1)")
    _check_resolution(resolution)

    prepared = []
    for cam, alpha in views:
        alpha = np.asarray(alpha)
        if alpha.shape != (cam.height, cam.width):
            raise ContractViolation(
                f"mask shape {alpha.shape} != camera {cam.height}x{cam.width}"
            )
        mask = alpha >= alpha_threshold
        if dilation_radius_px > 0:
            mask = ndimage.binary_dilation(mask, structure=_disk(dilation_radius_px))
        prepared.append((cam, mask))

    n = resolution
    cell = bounds.cell_size(n)
    survivors = []
    view_survival = np.zeros(len(prepared), dtype=np.int64)
    # slab over x to bound peak memory at high resolutions
    chunk = max(1, (1 << 24) // (n * n))
    for x0 in range(0, n, chunk):
        x1 = min(n, x0 + chunk)
        ix, iy, iz = np.meshgrid(
            np.arange(x0, x1), np.arange(n), np.arange(n), indexing="ij"
        )
        cells = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
        centers = bounds.lo + (cells.astype(np.float64) + 0.5) * cell
        alive = np.ones(cells.shape[0], dtype=bool)
        observed = np.zeros(cells.shape[0], dtype=bool)
        for v, (cam, mask) in enumerate(prepared):
            px, z = cam.project(centers)
            u = np.floor(px[:, 0] + 0.5).astype(np.int64)
            w = np.floor(px[:, 1] + 0.5).astype(np.int64)
            inside = (z > 0) & (u >= 0) & (u < cam.width) & (w >= 0) & (w < cam.height)
            observed |= inside
            ok = ~inside
            ok[inside] = mask[w[inside], u[inside]]
            view_survival[v] += int(np.count_nonzero(ok))
            alive &= ok
        alive &= observed
        survivors.append(cells[alive])

    cells = np.concatenate(survivors, axis=0)
    if cells.shape[0] == 0:
        raise CarvedEmptyError(view_survival.tolist())
    return VoxelSet(resolution=resolution, bounds=bounds, cells=cells.astype(np.int32))
