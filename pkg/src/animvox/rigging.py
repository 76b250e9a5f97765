"""Skeleton kinematics, skinning-weight baking, and LBS voxel warping.

The pipeline: a skinned mesh carries artist weights; `bake_skinning_weights`
transfers them to voxel centers by blending the nearest vertices;
`warp_voxels` moves every voxel from the canonical pose to a live pose by
linear blend skinning and quantizes back into the grid; `resolve_collisions`
picks a winner per contested live cell and reports the collision pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolation
from .geometry import (
    RigidTransform,
    quat_conj,
    quat_from_euler_xyz,
    quat_to_matrix,
)
from .volume import FLUT, VoxelSet, morton_encode

_WEIGHT_SUM_TOL = 1e-5
_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Skeleton:
    """Joint tree with bind-pose local transforms.

    Joints are stored parents-first: ``parents[j] < j`` for every non-root
    joint and exactly one joint (the root) has parent -1. The canonical
    global transforms are the plain chain of bind locals.
    """

    names: tuple[str, ...]
    parents: np.ndarray
    bind_local: tuple[RigidTransform, ...]
    canonical_global: tuple[RigidTransform, ...] = field(init=False, repr=False)

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int32)
        object.__setattr__(self, "parents", parents)
        j = len(self.names)
        if parents.shape != (j,) or len(self.bind_local) != j or j == 0:
            raise ContractViolation("names, parents, and bind_local lengths differ")
        if int(np.sum(parents == -1)) != 1:
            raise ContractViolation("skeleton must have exactly one root")
        for i, p in enumerate(parents):
            if p != -1 and not 0 <= p < i:
                raise ContractViolation(f"joint {i} parent {p} not earlier in the tree")
        object.__setattr__(
            self, "canonical_global", forward_kinematics(self, Pose.canonical(j))
        )

    @property
    def n_joints(self) -> int:
        return len(self.names)


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap radians into (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, _TWO_PI)


@dataclass(frozen=True)
class Pose:
    """Per-joint local rotations plus a global rigid motion.

    ``joint_rotations`` are intrinsic XYZ Euler angles in radians, wrapped to
    (-pi, pi]. The global rotation/translation applies once, above the root.
    """

    joint_rotations: np.ndarray
    global_rotation: np.ndarray
    global_translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.joint_rotations, dtype=np.float64)
        q = np.asarray(self.global_rotation, dtype=np.float64)
        t = np.asarray(self.global_translation, dtype=np.float64)
        if r.ndim != 2 or r.shape[1] != 3:
            raise ContractViolation("joint_rotations must be (J, 3)")
        if q.shape != (4,) or t.shape != (3,):
            raise ContractViolation("global motion must be a quaternion and a 3-vector")
        if not (np.isfinite(r).all() and np.isfinite(q).all() and np.isfinite(t).all()):
            raise ContractViolation("pose contains non-finite values")
        if abs(float(q @ q) - 1.0) > 1e-6:
            raise ContractViolation("global_rotation must be a unit quaternion")
        object.__setattr__(self, "joint_rotations", _wrap_angle(r))
        object.__setattr__(self, "global_rotation", q)
        object.__setattr__(self, "global_translation", t)

    @classmethod
    def canonical(cls, n_joints: int) -> "Pose":
        return cls(
            joint_rotations=np.zeros((n_joints, 3)),
            global_rotation=np.array([1.0, 0.0, 0.0, 0.0]),
            global_translation=np.zeros(3),
        )

    @property
    def n_joints(self) -> int:
        return self.joint_rotations.shape[0]

    @property
    def is_canonical(self) -> bool:
        """True when the pose moves nothing: zero joint rotations and an
        identity global motion."""
        return (
            not np.any(self.joint_rotations)
            and self.global_rotation[0] in (1.0, -1.0)
            and not np.any(self.global_rotation[1:])
            and not np.any(self.global_translation)
        )


@dataclass(frozen=True)
class SkinnedMesh:
    """Canonical-pose vertices with per-vertex weights over J joints."""

    vertices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] == 0:
            raise ContractViolation("vertices must be a non-empty (V, 3) array")
        if w.ndim != 2 or w.shape[0] != v.shape[0]:
            raise ContractViolation("weights must be (V, J)")
        if np.any(w < 0):
            raise ContractViolation("vertex weights must be non-negative")
        if np.max(np.abs(w.sum(axis=1) - 1.0)) > _WEIGHT_SUM_TOL:
            raise ContractViolation("vertex weights must sum to 1 per vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "weights", w)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class SkinWeights:
    """Sparse per-voxel joint weights, padded to a fixed slot count.

    ``joint_indices`` is (N, K) int32 with -1 in unused slots; ``weights`` is
    (N, K) with zeros there. Live slots are sorted by joint index so
    argmax tie-breaks are deterministic.
    """

    joint_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        idx = np.ascontiguousarray(self.joint_indices, dtype=np.int32)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if idx.shape != w.shape or idx.ndim != 2:
            raise ContractViolation("joint_indices and weights must share (N, K) shape")
        if np.any(w < 0):
            raise ContractViolation("skin weights must be non-negative")
        sums = w.sum(axis=1)
        if sums.size and np.max(np.abs(sums - 1.0)) > _WEIGHT_SUM_TOL:
            raise ContractViolation("skin weights must sum to 1 per voxel")
        object.__setattr__(self, "joint_indices", idx)
        object.__setattr__(self, "weights", w)

    @property
    def n_voxels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class WarpResult:
    """One posed frame of the voxel set.

    Positions are the LBS outputs for every canonical voxel; ``cells`` holds
    the floor-quantized live cell, or -1 where the voxel left the grid
    (flagged in ``in_bounds``, never wrapped). ``rotations`` is each voxel's
    rigid view-canonicalization rotation, taken from its maximum-weight
    joint; ``rotation_joint`` is that joint's index and ``joint_rot_inv``
    the per-joint inverse rotation matrices the renderer consumes.
    """

    resolution: int
    bounds_lo: np.ndarray
    cell_size: np.ndarray
    positions: np.ndarray
    cells: np.ndarray
    rotations: np.ndarray
    rotation_joint: np.ndarray
    joint_rot_inv: np.ndarray
    in_bounds: np.ndarray
    collision_groups: tuple[np.ndarray, ...]

    @property
    def n_voxels(self) -> int:
        return self.positions.shape[0]

    @property
    def dropped(self) -> int:
        return int(self.n_voxels - np.count_nonzero(self.in_bounds))


@dataclass(frozen=True)
class CollisionResolution:
    """Deduplicated live cells plus the (winner, loser) pairs of every
    contested cell, ordered by live-cell Morton code."""

    cells: np.ndarray
    flut_indices: np.ndarray
    pairs: np.ndarray


# ---------------------------------------------------------------------------
# kinematics


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> tuple[RigidTransform, ...]:
    """Global joint transforms for a pose: root first, children after parents.

    Each joint's local is its bind transform followed by the posed rotation;
    the pose's global rigid motion premultiplies the root.
    """
    j = skeleton.n_joints
    if pose.n_joints != j:
        raise ContractViolation(f"pose has {pose.n_joints} joints, skeleton has {j}")
    g = RigidTransform(pose.global_rotation, pose.global_translation)
    out: list[RigidTransform] = []
    zero = np.zeros(3)
    for i in range(j):
        local = skeleton.bind_local[i].compose(
            RigidTransform(quat_from_euler_xyz(pose.joint_rotations[i]), zero)
        )
        parent = int(skeleton.parents[i])
        base = g if parent == -1 else out[parent]
        out.append(base.compose(local))
    return tuple(out)


# ---------------------------------------------------------------------------
# weight baking


def bake_skinning_weights(
    voxels: VoxelSet,
    mesh: SkinnedMesh,
    m: int,
    exponent_sign: float = -1.0,
) -> SkinWeights:
    """Transfer mesh weights to voxel centers by nearest-vertex blending.

    For each voxel the m nearest vertices are blended with coefficients
    exp(exponent_sign * (d_j - min_k d_k)), normalized. The default sign
    favors close vertices; +1.0 reproduces a blend that grows with distance
    instead (kept available as a switch, see README).
    """
    if m < 1:
        raise ContractViolation("m must be >= 1")
    if exponent_sign not in (-1.0, 1.0):
        raise ContractViolation("exponent_sign must be -1.0 or +1.0")
    if m > mesh.n_vertices:
        warnings.warn(
            f"m={m} exceeds the {mesh.n_vertices}-vertex mesh; clamped",
            RuntimeWarning,
            stacklevel=2,
        )
        m = mesh.n_vertices

    centers = voxels.centers()
    n = centers.shape[0]
    tree = cKDTree(mesh.vertices)
    dists, vidx = tree.query(centers, k=m)
    dists = dists.reshape(n, m)
    vidx = vidx.reshape(n, m)

    delta = dists - dists.min(axis=1, keepdims=True)
    alpha = np.exp(exponent_sign * delta)
    alpha /= alpha.sum(axis=1, keepdims=True)

    # blend to a dense (chunk, J) block, then keep only the touched joints
    j = mesh.n_joints
    chunks_idx: list[np.ndarray] = []
    chunks_w: list[np.ndarray] = []
    k_max = 1
    step = max(1, (1 << 22) // max(j, 1))
    for a in range(0, n, step):
        b = min(a + step, n)
        dense = np.einsum("nm,nmj->nj", alpha[a:b], mesh.weights[vidx[a:b]])
        dense /= dense.sum(axis=1, keepdims=True)
        nz = dense > 0.0
        counts = nz.sum(axis=1)
        k = int(counts.max()) if counts.size else 1
        k_max = max(k_max, k)
        idx = np.full((b - a, k), -1, dtype=np.int32)
        w = np.zeros((b - a, k), dtype=np.float64)
        rows, cols = np.nonzero(nz)
        slot = np.concatenate([np.arange(c) for c in counts]) if rows.size else rows
        idx[rows, slot] = cols.astype(np.int32)
        w[rows, slot] = dense[rows, cols]
        chunks_idx.append(idx)
        chunks_w.append(w)

    idx = np.full((n, k_max), -1, dtype=np.int32)
    w = np.zeros((n, k_max), dtype=np.float64)
    at = 0
    for ci, cw in zip(chunks_idx, chunks_w):
        idx[at : at + ci.shape[0], : ci.shape[1]] = ci
        w[at : at + cw.shape[0], : cw.shape[1]] = cw
        at += ci.shape[0]
    return SkinWeights(joint_indices=idx, weights=w)


# ---------------------------------------------------------------------------
# warping


def warp_voxels(
    voxels: VoxelSet,
    weights: SkinWeights,
    skeleton: Skeleton,
    pose: Pose,
) -> WarpResult:
    """Linear-blend-skin every voxel center into the live pose.

    Positions blend the per-joint delta transforms M^t_j (M^c_j)^-1 over the
    voxel's baked weights; the per-voxel rotation is the maximum-weight
    joint's delta rotation (the blended matrix is not rigid). Voxels landing
    outside the canonical grid are flagged, not wrapped.
    """
    n = voxels.cells.shape[0]
    if weights.n_voxels != n:
        raise ContractViolation("weights were baked for a different voxel set")
    posed = forward_kinematics(skeleton, pose)
    deltas = [t.compose(c.invert()) for t, c in zip(posed, skeleton.canonical_global)]
    delta_mats = np.stack([d.matrix() for d in deltas])
    delta_quats = np.stack([d.rotation for d in deltas])
    rot_inv = np.stack([quat_to_matrix(quat_conj(d.rotation)) for d in deltas])

    centers = voxels.centers()
    positions = np.zeros((n, 3), dtype=np.float64)
    idx = weights.joint_indices
    w = weights.weights
    for k in range(idx.shape[1]):
        live = idx[:, k] >= 0
        if not live.any():
            continue
        mk = delta_mats[idx[live, k]]
        rotated = np.einsum("nij,nj->ni", mk[:, :3, :3], centers[live]) + mk[:, :3, 3]
        positions[live] += w[live, k, None] * rotated

    slot = np.argmax(w, axis=1)
    rotation_joint = idx[np.arange(n), slot].astype(np.int32)
    rotation_joint[rotation_joint < 0] = 0  # all-zero weight rows cannot occur
    rotations = delta_quats[rotation_joint]

    res = voxels.resolution
    cell = voxels.cell_size
    grid = (positions - voxels.bounds.lo) / cell
    cells = np.floor(grid).astype(np.int64)
    in_bounds = np.all((cells >= 0) & (cells < res), axis=1)
    cells[~in_bounds] = -1

    groups: list[np.ndarray] = []
    ib = np.flatnonzero(in_bounds)
    if ib.size:
        codes = morton_encode(cells[ib])
        order = np.argsort(codes, kind="stable")
        sorted_codes = codes[order]
        bounds_at = np.flatnonzero(sorted_codes[1:] != sorted_codes[:-1]) + 1
        starts = np.concatenate([[0], bounds_at])
        ends = np.concatenate([bounds_at, [sorted_codes.size]])
        for a, b in zip(starts, ends):
            if b - a >= 2:
                groups.append(ib[order[a:b]])

    return WarpResult(
        resolution=res,
        bounds_lo=voxels.bounds.lo.copy(),
        cell_size=cell,
        positions=positions,
        cells=cells.astype(np.int32),
        rotations=rotations,
        rotation_joint=rotation_joint,
        joint_rot_inv=rot_inv,
        in_bounds=in_bounds,
        collision_groups=tuple(groups),
    )


def identity_warp(voxels: VoxelSet) -> WarpResult:
    """The trivial warp: every voxel stays in its canonical cell."""
    n = voxels.cells.shape[0]
    rotations = np.zeros((n, 4), dtype=np.float64)
    rotations[:, 0] = 1.0
    return WarpResult(
        resolution=voxels.resolution,
        bounds_lo=voxels.bounds.lo.copy(),
        cell_size=voxels.cell_size,
        positions=voxels.centers(),
        cells=voxels.cells.copy(),
        rotations=rotations,
        rotation_joint=np.zeros(n, dtype=np.int32),
        joint_rot_inv=np.eye(3)[None].copy(),
        in_bounds=np.ones(n, dtype=bool),
        collision_groups=(),
    )


def resolve_collisions(warp: WarpResult, flut: FLUT) -> CollisionResolution:
    """Pick one canonical voxel per live cell; emit (winner, loser) pairs.

    The winner is the voxel with the highest density, ties broken by the
    lowest canonical index, so the output depends on input order only
    through that tie-break. Output rows are sorted by live-cell Morton code.
    """
    ib = np.flatnonzero(warp.in_bounds)
    if ib.size == 0:
        return CollisionResolution(
            cells=np.empty((0, 3), dtype=np.int32),
            flut_indices=np.empty(0, dtype=np.int64),
            pairs=np.empty((0, 2), dtype=np.int64),
        )
    codes = morton_encode(warp.cells[ib])
    sigma = np.asarray(flut.densities, dtype=np.float64)[ib]
    order = np.lexsort((ib, -sigma, codes))
    sc = codes[order]
    canon = ib[order]
    bounds_at = np.flatnonzero(sc[1:] != sc[:-1]) + 1
    starts = np.concatenate([[0], bounds_at])
    ends = np.concatenate([bounds_at, [sc.size]])

    winners = canon[starts]
    pair_list: list[np.ndarray] = []
    for a, b in zip(starts, ends):
        if b - a >= 2:
            p = np.empty((b - a - 1, 2), dtype=np.int64)
            p[:, 0] = canon[a]
            p[:, 1] = canon[a + 1 : b]
            pair_list.append(p)
    pairs = (
        np.concatenate(pair_list, axis=0)
        if pair_list
        else np.empty((0, 2), dtype=np.int64)
    )
    return CollisionResolution(
        cells=warp.cells[winners].astype(np.int32),
        flut_indices=winners.astype(np.int64),
        pairs=pairs,
    )
