"""Analytic test characters and their ground-truth images.

Two closed-form density/color fields (a fuzzy sphere and a furry two-bone
capsule), a voxelizer that samples them onto a grid, and a deliberately
simple fixed-step ray marcher that renders the voxelized field. The marcher
is this module's oracle: it shares no traversal or integration code with the
sparse renderer, stepping blindly at ``min(cell) / step_divisor`` and looking
up one cell per step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import Camera, RigidTransform, rays_for_camera
from .render import CharacterAsset
from .rigging import Skeleton, SkinnedMesh, bake_skinning_weights
from .volume import FLUT, Bounds, VoxelSet

_ISO = 0.28209479177387814  # band-0 basis value; color = iso coefficient * this

CUBE = Bounds(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def _wave_color(points: np.ndarray, channels: int, freq: float, phases) -> np.ndarray:
    """Smooth per-channel color in (0, 1): sinusoid over a cycling axis."""
    p = np.asarray(points, dtype=np.float64)
    out = np.empty((p.shape[0], channels))
    for c in range(channels):
        out[:, c] = 0.5 + 0.35 * np.sin(freq * p[:, c % 3] + phases[c % len(phases)])
    return out


@dataclass(frozen=True)
class FuzzySphere:
    """Constant-density core with a Gaussian falloff shell.

    ``shell_width = 0`` degenerates to a hard ball, which makes chord
    opacities closed-form: alpha = 1 - exp(-sigma * L).
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    core_radius: float = 0.5
    shell_width: float = 0.08
    sigma: float = 4.0
    color_freq: float = 3.0
    color_phases: tuple[float, ...] = (0.0, 2.1, 4.2)

    def density(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        r = np.linalg.norm(p - np.asarray(self.center), axis=-1)
        if self.shell_width == 0.0:
            return np.where(r < self.core_radius, self.sigma, 0.0)
        excess = np.maximum(r - self.core_radius, 0.0)
        return self.sigma * np.exp(-0.5 * (excess / self.shell_width) ** 2)

    def color(self, points: np.ndarray, channels: int = 3) -> np.ndarray:
        return _wave_color(points, channels, self.color_freq, self.color_phases)

    def rig(self, voxels: VoxelSet):
        return None, None


@dataclass(frozen=True)
class FurCapsule:
    """Two connected bone segments wrapped in a noisy density sleeve.

    The multiplicative sin-product noise is deterministic and high-frequency
    relative to the capsule radius, giving a fur-like silhouette. ``rig``
    returns a two-joint skeleton (pivots at the chain ends p0 and p1) and
    weights baked from one-hot samples along the bones.
    """

    p0: tuple[float, float, float] = (0.0, -0.55, 0.0)
    p1: tuple[float, float, float] = (0.0, 0.0, 0.0)
    p2: tuple[float, float, float] = (0.0, 0.55, 0.0)
    radius: float = 0.2
    falloff: float = 0.06
    sigma: float = 5.0
    fur_amp: float = 0.6
    fur_freq: float = 23.0
    color_freq: float = 4.0
    color_phases: tuple[float, ...] = (0.7, 2.9, 5.1)

    def _segment_distance(self, p: np.ndarray) -> np.ndarray:
        d = np.full(p.shape[0], np.inf)
        for a, b in ((self.p0, self.p1), (self.p1, self.p2)):
            a = np.asarray(a, dtype=np.float64)
            ab = np.asarray(b, dtype=np.float64) - a
            t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
            d = np.minimum(d, np.linalg.norm(p - (a + t[:, None] * ab), axis=1))
        return d

    def density(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        d = self._segment_distance(p)
        excess = np.maximum(d - self.radius, 0.0)
        base = self.sigma * np.exp(-0.5 * (excess / self.falloff) ** 2)
        f = self.fur_freq
        grain = 0.5 + 0.5 * np.sin(f * p[:, 0]) * np.sin(f * p[:, 1]) * np.sin(f * p[:, 2])
        return base * (1.0 - self.fur_amp + self.fur_amp * grain)

    def color(self, points: np.ndarray, channels: int = 3) -> np.ndarray:
        return _wave_color(points, channels, self.color_freq, self.color_phases)

    def rig(self, voxels: VoxelSet, samples_per_bone: int = 32, m: int = 4):
        p0 = np.asarray(self.p0)
        p1 = np.asarray(self.p1)
        p2 = np.asarray(self.p2)
        skeleton = Skeleton(
            names=("bone0", "bone1"),
            parents=np.array([-1, 0], dtype=np.int32),
            bind_local=(
                RigidTransform(translation=p0),
                RigidTransform(translation=p1 - p0),
            ),
        )
        t = np.linspace(0.0, 1.0, samples_per_bone)[:, None]
        vertices = np.concatenate([p0 + t * (p1 - p0), p1 + t * (p2 - p1)])
        weights = np.zeros((2 * samples_per_bone, 2))
        weights[:samples_per_bone, 0] = 1.0
        weights[samples_per_bone:, 1] = 1.0
        mesh = SkinnedMesh(vertices=vertices, weights=weights)
        return skeleton, bake_skinning_weights(voxels, mesh, m=m)


def voxelize(
    field,
    resolution: int = 64,
    bounds: Bounds = CUBE,
    degree: int = 2,
    channels: int = 3,
    sigma_floor: float = 1e-3,
    rigged: bool = False,
) -> CharacterAsset:
    """Sample the field at cell centers into a sparse character.

    Colors land in the isotropic band only (the fields are view-independent);
    higher bands are zero. Cells below ``sigma_floor`` are dropped.
    """
    cell = bounds.cell_size(resolution)
    axes = [bounds.lo[a] + (np.arange(resolution) + 0.5) * cell[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    sigma = field.density(centers)
    keep = sigma > sigma_floor
    if not keep.any():
        raise ContractViolation("field is empty at this resolution")

    idx = np.nonzero(keep)[0]
    cells = np.stack(np.unravel_index(idx, (resolution,) * 3), axis=1).astype(np.int32)
    voxels = VoxelSet(resolution=resolution, bounds=bounds, cells=cells)

    h = (degree + 1) ** 2
    data = np.zeros((idx.size, h * channels + 1))
    data[:, :channels] = field.color(centers[idx], channels) / _ISO
    data[:, -1] = sigma[idx]
    flut = FLUT(data, degree=degree, channels=channels)

    skeleton = weights = None
    if rigged:
        skeleton, weights = field.rig(voxels)
        if skeleton is None:
            raise ContractViolation("this field does not define a rig")
    return CharacterAsset(voxels=voxels, flut=flut, skeleton=skeleton, weights=weights)


# ---------------------------------------------------------------------------
# the oracle marcher


def march_rays(
    voxels: VoxelSet,
    flut: FLUT,
    origins: np.ndarray,
    directions: np.ndarray,
    step_divisor: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the voxelized field with blind fixed-length midpoint steps.

    Steps are ``min(cell edge) / step_divisor`` long, walked front to back
    across the occupied cells' bounding box with one density/color lookup at
    each step midpoint, plus one shorter step for the leftover span. No
    early termination, no cell skipping. Returns premultiplied features
    (R, C) and alpha (R,).
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != 3 or o.shape != d.shape:
        raise ContractViolation("origins and directions must be (R, 3)")
    res = voxels.resolution
    lo = voxels.bounds.lo
    cell = voxels.cell_size

    sigma_grid = np.zeros(res**3)
    rgb_grid = np.zeros((res**3, flut.channels))
    lin = (voxels.cells[:, 0].astype(np.int64) * res + voxels.cells[:, 1]) * res + voxels.cells[:, 2]
    sigma_grid[lin] = flut.densities
    rgb_grid[lin] = flut.coefficients[:, 0, :] * _ISO

    # slab test against the occupied bounding box (cells are half-open)
    bb_lo = lo + voxels.cells.min(axis=0) * cell
    bb_hi = lo + (voxels.cells.max(axis=0) + 1) * cell
    t0 = np.zeros(o.shape[0])
    t1 = np.full(o.shape[0], np.inf)
    for a in range(3):
        da = d[:, a]
        moving = da != 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (bb_lo[a] - o[:, a]) / da
            tb = (bb_hi[a] - o[:, a]) / da
        near = np.where(moving, np.minimum(ta, tb), -np.inf)
        far = np.where(moving, np.maximum(ta, tb), np.inf)
        inside = (o[:, a] >= bb_lo[a]) & (o[:, a] < bb_hi[a])
        near[~moving & ~inside] = np.inf
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)

    span = np.maximum(t1 - t0, 0.0)
    span[~np.isfinite(span)] = 0.0
    dt = float(np.min(cell)) / step_divisor
    n_full = np.floor(span / dt).astype(np.int64)
    rem = span - n_full * dt

    # sort by step count so each step's active set is a contiguous prefix
    order = np.argsort(-n_full, kind="stable")
    o_s, d_s, t0_s = o[order], d[order], t0[order]
    n_s, rem_s = n_full[order], rem[order]

    n_rays = o.shape[0]
    features = np.zeros((n_rays, flut.channels))
    alpha = np.zeros(n_rays)
    trans = np.ones(n_rays)

    def lookup(pos: np.ndarray) -> np.ndarray:
        ijk = np.floor((pos - lo) / cell).astype(np.int64)
        np.clip(ijk, 0, res - 1, out=ijk)
        return (ijk[:, 0] * res + ijk[:, 1]) * res + ijk[:, 2]

    def deposit(rows: slice | np.ndarray, tau: np.ndarray, g: np.ndarray) -> None:
        a = -trans[rows] * np.expm1(-tau)
        features[rows] += a[:, None] * rgb_grid[g]
        alpha[rows] += a
        trans[rows] *= np.exp(-tau)

    max_n = int(n_s[0]) if n_rays else 0
    live = n_rays
    for s in range(max_n):
        while live > 0 and n_s[live - 1] <= s:
            live -= 1
        rows = slice(0, live)
        t_mid = t0_s[rows] + (s + 0.5) * dt
        g = lookup(o_s[rows] + t_mid[:, None] * d_s[rows])
        deposit(rows, sigma_grid[g] * dt, g)

    tail = np.nonzero(rem_s > 1e-12)[0]
    if tail.size:
        t_mid = t0_s[tail] + n_s[tail] * dt + 0.5 * rem_s[tail]
        g = lookup(o_s[tail] + t_mid[:, None] * d_s[tail])
        deposit(tail, sigma_grid[g] * rem_s[tail], g)

    undo = np.empty_like(order)
    undo[order] = np.arange(n_rays)
    return features[undo], alpha[undo]


def march_image(
    asset: CharacterAsset, camera: Camera, step_divisor: int = 64
) -> np.ndarray:
    """Ground-truth straight-alpha RGBA image (H, W, 4) of the asset."""
    if asset.flut.channels != 3:
        raise ContractViolation("image export needs 3 color channels")
    origins, directions = rays_for_camera(camera)
    feats, alpha = march_rays(
        asset.voxels, asset.flut, origins, directions, step_divisor=step_divisor
    )
    h, w = camera.height, camera.width
    rgb = np.zeros_like(feats)
    hit = alpha > 0
    rgb[hit] = feats[hit] / alpha[hit, None]
    return np.concatenate(
        [np.clip(rgb, 0.0, 1.0), alpha[:, None]], axis=1
    ).reshape(h, w, 4)


# ---------------------------------------------------------------------------
# cameras and full scene assembly


def look_at_camera(
    position,
    target,
    width: int,
    height: int,
    focal: float,
    up=(0.0, 0.0, 1.0),
) -> Camera:
    """Camera at ``position`` looking at ``target``; +x right, +y down."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ContractViolation("view direction is parallel to the up axis")
    right /= norm
    down = np.cross(forward, right)
    cam_to_world = np.eye(4)
    cam_to_world[:3, :3] = np.stack([right, down, forward], axis=1)
    cam_to_world[:3, 3] = position
    return Camera(
        fx=focal,
        fy=focal,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        world_to_camera=RigidTransform.from_matrix(cam_to_world).invert(),
    )


def ring_cameras(
    count: int,
    radius: float = 2.8,
    elevation: float = 0.35,
    image_size: tuple[int, int] = (128, 128),
    focal: float | None = None,
    target=(0.0, 0.0, 0.0),
) -> tuple[Camera, ...]:
    """Cameras uniformly spaced on a circle around the +z axis, all aimed at
    ``target``; ``elevation`` is the polar angle above the ring plane (rad)."""
    if count < 1:
        raise ContractViolation("need at least one camera")
    w, h = image_size
    focal = 1.25 * w if focal is None else focal
    target = np.asarray(target, dtype=np.float64)
    z = radius * np.sin(elevation)
    rho = radius * np.cos(elevation)
    cams = []
    for i in range(count):
        theta = 2.0 * np.pi * i / count
        pos = target + np.array([rho * np.cos(theta), rho * np.sin(theta), z])
        cams.append(look_at_camera(pos, target, w, h, focal))
    return tuple(cams)


def orbit_camera(
    azimuth: float,
    elevation: float,
    radius: float,
    target=(0.0, 0.0, 0.0),
    image_size: tuple[int, int] = (512, 512),
    focal: float | None = None,
) -> Camera:
    """One camera on the orbit sphere around ``target``; angles in radians,
    azimuth around +z, elevation above the equatorial plane."""
    if radius <= 0:
        raise ContractViolation("orbit radius must be positive")
    w, h = image_size
    focal = 1.25 * w if focal is None else focal
    target = np.asarray(target, dtype=np.float64)
    pos = target + radius * np.array(
        [
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ]
    )
    return look_at_camera(pos, target, w, h, focal)


def make_synthetic_scene(
    field,
    cameras,
    out_dir: str | os.PathLike,
    resolution: int = 64,
    bounds: Bounds = CUBE,
    degree: int = 2,
    channels: int = 3,
    step_divisor: int = 64,
    rigged: bool = False,
):
    """Voxelize the field, render every camera with the oracle marcher, and
    write a scene directory (PNGs + manifest).

    Returns ``(manifest, asset, images)`` where ``images`` are the float
    straight-alpha ground-truth frames in camera order.
    """
    from . import assetio

    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    asset = voxelize(
        field, resolution=resolution, bounds=bounds, degree=degree,
        channels=channels, rigged=rigged,
    )
    images = []
    refs = []
    for i, cam in enumerate(cameras):
        rgba = march_image(asset, cam, step_divisor=step_divisor)
        name = f"view_{i:03d}.png"
        assetio.save_png(os.path.join(out_dir, name), rgba)
        images.append(rgba)
        refs.append(assetio.ImageRef(camera=i, path=name))
    manifest = assetio.SceneManifest(
        resolution=resolution,
        bounds=bounds,
        cameras=tuple(cameras),
        images=tuple(refs),
        base_dir=out_dir,
    )
    assetio.save_scene(manifest, os.path.join(out_dir, "scene.json"))
    return manifest, asset, images
