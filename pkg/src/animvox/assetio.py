"""Persistent formats: binary character assets, JSON manifests for scenes,
skeletons and pose clips, PNG images, raw depth rasters, and an OBJ-subset
mesh reader.

Binary layouts are little-endian throughout. The asset container stores the
FLUT at single precision, so the bit-exact round-trip guarantee quantifies
over single-precision-representable values; loading never loses stored bits
and re-saving a loaded asset reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    AssetFormatError,
    CarvedEmptyError,
    ContractViolation,
    CountMismatchError,
    MagicMismatchError,
    TruncatedAssetError,
)
from .geometry import Camera, RigidTransform
from .render import CharacterAsset
from .rigging import Pose, Skeleton, SkinWeights
from .volume import FLUT, Bounds, VoxelSet, morton_decode, morton_encode

ASSET_MAGIC = b"NVO1"
ASSET_VERSION = 1
DEPTH_MAGIC = b"DPT1"

# header: magic, version u32, resolution u32, count u64, degree u8,
# channels u8, bounds 6 x f32, rig offset u64
_HEADER = struct.Struct("<4sIIQBB6fQ")
_DEPTH_HEADER = struct.Struct("<4sIII")
_LEAF_DTYPE = np.dtype([("code", "<u8"), ("flut", "<u4")])


def _need(data: bytes, end: int, what: str) -> None:
    if len(data) < end:
        raise TruncatedAssetError(f"file ends inside {what} ({len(data)} < {end} bytes)")


def save_asset(asset: CharacterAsset) -> bytes:
    """Serialize a character to the binary container."""
    n = len(asset.voxels)
    if n == 0:
        raise CarvedEmptyError([])
    flut = asset.flut
    codes = morton_encode(asset.voxels.cells)
    order = np.argsort(codes, kind="stable")

    leaf = np.empty(n, dtype=_LEAF_DTYPE)
    leaf["code"] = codes[order]
    leaf["flut"] = order.astype(np.uint32)

    body = [
        leaf.tobytes(),
        np.ascontiguousarray(flut.data, dtype="<f4").tobytes(),
    ]
    rig_offset = 0
    if asset.rigged:
        rig_offset = _HEADER.size + sum(len(b) for b in body)
        body.append(_encode_rig(asset.skeleton, asset.weights))

    b = asset.voxels.bounds
    header = _HEADER.pack(
        ASSET_MAGIC,
        ASSET_VERSION,
        asset.voxels.resolution,
        n,
        flut.degree,
        flut.channels,
        *np.asarray(b.lo, dtype=np.float32),
        *np.asarray(b.hi, dtype=np.float32),
        rig_offset,
    )
    return header + b"".join(body)


def load_asset(data: bytes) -> CharacterAsset:
    """Parse the binary container back into a character."""
    _need(data, _HEADER.size, "header")
    (magic, version, resolution, count, degree, channels,
     lx, ly, lz, hx, hy, hz, rig_offset) = _HEADER.unpack_from(data)
    if magic != ASSET_MAGIC:
        raise MagicMismatchError(f"magic {magic!r} != {ASSET_MAGIC!r}")
    if version != ASSET_VERSION:
        raise AssetFormatError(f"unsupported container version {version}")
    if count == 0:
        raise CountMismatchError("declared voxel count is zero")

    leaf_end = _HEADER.size + count * _LEAF_DTYPE.itemsize
    _need(data, leaf_end, "leaf table")
    leaf = np.frombuffer(data, dtype=_LEAF_DTYPE, count=count, offset=_HEADER.size)

    width = ((degree + 1) ** 2) * channels + 1
    flut_end = leaf_end + count * width * 4
    _need(data, flut_end, "FLUT block")
    flut_data = np.frombuffer(
        data, dtype="<f4", count=count * width, offset=leaf_end
    ).reshape(count, width).astype(np.float64)

    idx = leaf["flut"].astype(np.int64)
    if np.unique(idx).size != count or idx.max() >= count:
        raise CountMismatchError("leaf table indices are not a permutation")
    cells = np.empty((count, 3), dtype=np.int32)
    cells[idx] = morton_decode(leaf["code"].astype(np.uint64)).astype(np.int32)

    skeleton = weights = None
    if rig_offset:
        if rig_offset != flut_end:
            raise CountMismatchError(
                f"rig offset {rig_offset} does not follow the FLUT block ({flut_end})"
            )
        skeleton, weights, end = _decode_rig(data, rig_offset, count)
    else:
        end = flut_end
    if len(data) != end:
        raise CountMismatchError(f"{len(data) - end} trailing bytes after the asset")

    bounds = Bounds(
        np.array([lx, ly, lz], dtype=np.float64),
        np.array([hx, hy, hz], dtype=np.float64),
    )
    return CharacterAsset(
        voxels=VoxelSet(resolution=resolution, bounds=bounds, cells=cells),
        flut=FLUT(flut_data, degree=degree, channels=channels),
        skeleton=skeleton,
        weights=weights,
    )


def _encode_rig(skeleton: Skeleton, weights: SkinWeights) -> bytes:
    out = [struct.pack("<I", len(skeleton.names))]
    for name, parent, bind in zip(
        skeleton.names, skeleton.parents, skeleton.bind_local
    ):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<i", int(parent)))
        out.append(struct.pack("<7d", *bind.rotation, *bind.translation))
    for joints, ws in zip(weights.joint_indices, weights.weights):
        live = joints >= 0
        k = int(np.count_nonzero(live))
        out.append(struct.pack("<B", k))
        for j, w in zip(joints[live], ws[live]):
            out.append(struct.pack("<Hf", int(j), float(np.float32(w))))
    return b"".join(out)


def _decode_rig(data: bytes, offset: int, n_voxels: int):
    pos = offset
    _need(data, pos + 4, "rig header")
    (n_joints,) = struct.unpack_from("<I", data, pos)
    pos += 4
    names: list[str] = []
    parents = np.empty(n_joints, dtype=np.int32)
    binds: list[RigidTransform] = []
    for j in range(n_joints):
        _need(data, pos + 2, "joint name")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        _need(data, pos + ln + 4 + 56, "joint record")
        names.append(data[pos : pos + ln].decode("utf-8"))
        pos += ln
        (parents[j],) = struct.unpack_from("<i", data, pos)
        pos += 4
        vals = struct.unpack_from("<7d", data, pos)
        pos += 56
        binds.append(RigidTransform(np.array(vals[:4]), np.array(vals[4:])))

    rows_j: list[np.ndarray] = []
    rows_w: list[np.ndarray] = []
    k_max = 1
    for _ in range(n_voxels):
        _need(data, pos + 1, "weight row")
        k = data[pos]
        pos += 1
        _need(data, pos + 6 * k, "weight row")
        j = np.empty(k, dtype=np.int32)
        w = np.empty(k, dtype=np.float64)
        for s in range(k):
            j[s], w[s] = struct.unpack_from("<Hf", data, pos)
            pos += 6
        rows_j.append(j)
        rows_w.append(w)
        k_max = max(k_max, k)

    joints = np.full((n_voxels, k_max), -1, dtype=np.int32)
    ws = np.zeros((n_voxels, k_max), dtype=np.float64)
    for i, (j, w) in enumerate(zip(rows_j, rows_w)):
        joints[i, : j.size] = j
        ws[i, : j.size] = w
    skeleton = Skeleton(names=tuple(names), parents=parents, bind_local=tuple(binds))
    return skeleton, SkinWeights(joint_indices=joints, weights=ws), pos


def save_asset_file(asset: CharacterAsset, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(save_asset(asset))


def load_asset_file(path: str | os.PathLike) -> CharacterAsset:
    with open(path, "rb") as f:
        return load_asset(f.read())


# ---------------------------------------------------------------------------
# images: PNG with straight (non-premultiplied) 8-bit alpha, raw f32 depth


def save_png(path: str | os.PathLike, rgba: np.ndarray) -> None:
    """Write an (H, W, 4) float image in [0, 1], straight alpha, as 8-bit
    RGBA. Rendered frames are premultiplied; un-premultiply before saving."""
    from PIL import Image

    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.ndim != 3 or rgba.shape[2] != 4:
        raise ContractViolation("expected an (H, W, 4) RGBA image")
    q = np.clip(np.round(rgba * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGBA").save(path, format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG as (H, W, 4) float64 in [0, 1], straight alpha."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64)
    return arr / 255.0


def encode_png(rgba: np.ndarray) -> bytes:
    """PNG bytes of an (H, W, 4) float image in [0, 1] (wire format)."""
    import io

    from PIL import Image

    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.ndim != 3 or rgba.shape[2] != 4:
        raise ContractViolation("expected an (H, W, 4) RGBA image")
    q = np.clip(np.round(rgba * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def frame_to_straight_rgba(features: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Convert premultiplied frame buffers to a straight-alpha RGBA image."""
    f = np.asarray(features, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 3 or a.shape != f.shape[:2]:
        raise ContractViolation("expected (H, W, 3) features and (H, W) alpha")
    rgb = np.zeros_like(f)
    hit = a > 0
    rgb[hit] = f[hit] / a[hit, None]
    return np.concatenate([np.clip(rgb, 0.0, 1.0), a[:, :, None]], axis=2)


def save_depth(path: str | os.PathLike, depth: np.ndarray) -> None:
    """Write an (H, W) float depth raster; +inf marks no hit."""
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ContractViolation("expected an (H, W) depth raster")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        f.write(np.ascontiguousarray(depth).tobytes())


def load_depth(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    _need(data, _DEPTH_HEADER.size, "depth header")
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise MagicMismatchError(f"magic {magic!r} != {DEPTH_MAGIC!r}")
    end = _DEPTH_HEADER.size + 4 * w * h
    _need(data, end, "depth raster")
    if len(data) != end:
        raise CountMismatchError(f"{len(data) - end} trailing bytes after the raster")
    raster = np.frombuffer(data, dtype="<f4", offset=_DEPTH_HEADER.size)
    return raster.reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# JSON text formats: skeletons, pose clips, scene manifests


def _load_json(path: str | os.PathLike, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise AssetFormatError(f"{what} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise AssetFormatError(f"{what} must be a JSON object")
    return doc


def _get(doc: dict, key: str, what: str):
    if key not in doc:
        raise AssetFormatError(f"{what} is missing key {key!r}")
    return doc[key]


def save_skeleton(
    skeleton: Skeleton,
    path: str | os.PathLike,
    vertex_weights: np.ndarray | None = None,
) -> None:
    doc = {
        "names": list(skeleton.names),
        "parents": [int(p) for p in skeleton.parents],
        "bind_local": [
            {
                "rotation": [float(v) for v in b.rotation],
                "translation": [float(v) for v in b.translation],
            }
            for b in skeleton.bind_local
        ],
    }
    if vertex_weights is not None:
        doc["vertex_weights"] = np.asarray(vertex_weights, dtype=np.float64).tolist()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_skeleton(path: str | os.PathLike) -> tuple[Skeleton, np.ndarray | None]:
    doc = _load_json(path, "skeleton file")
    names = tuple(_get(doc, "names", "skeleton file"))
    parents = np.asarray(_get(doc, "parents", "skeleton file"), dtype=np.int32)
    binds = tuple(
        RigidTransform(
            np.asarray(_get(b, "rotation", "bind transform"), dtype=np.float64),
            np.asarray(_get(b, "translation", "bind transform"), dtype=np.float64),
        )
        for b in _get(doc, "bind_local", "skeleton file")
    )
    skeleton = Skeleton(names=names, parents=parents, bind_local=binds)
    weights = doc.get("vertex_weights")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    return skeleton, weights


@dataclass(frozen=True)
class PoseClip:
    """A fixed-rate sequence of poses."""

    fps: float
    frames: tuple[Pose, ...]

    def __post_init__(self):
        if self.fps <= 0:
            raise ContractViolation("fps must be positive")
        if not self.frames:
            raise ContractViolation("clip needs at least one frame")
        counts = {p.joint_rotations.shape[0] for p in self.frames}
        if len(counts) != 1:
            raise ContractViolation(f"joint count varies across frames: {sorted(counts)}")

    @property
    def n_joints(self) -> int:
        return self.frames[0].joint_rotations.shape[0]


def _pose_to_doc(pose: Pose) -> dict:
    return {
        "rotations": pose.joint_rotations.tolist(),
        "root_rotation": pose.global_rotation.tolist(),
        "root_translation": pose.global_translation.tolist(),
    }


def pose_from_doc(doc: dict, what: str = "pose") -> Pose:
    rotations = np.asarray(_get(doc, "rotations", what), dtype=np.float64)
    if rotations.size == 0:
        rotations = rotations.reshape(0, 3)  # [] parses as 1-D
    return Pose(
        joint_rotations=rotations,
        global_rotation=np.asarray(_get(doc, "root_rotation", what), dtype=np.float64),
        global_translation=np.asarray(
            _get(doc, "root_translation", what), dtype=np.float64
        ),
    )


def save_clip(clip: PoseClip, path: str | os.PathLike) -> None:
    doc = {"fps": clip.fps, "frames": [_pose_to_doc(p) for p in clip.frames]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_clip(path: str | os.PathLike) -> PoseClip:
    doc = _load_json(path, "clip file")
    frames = tuple(
        pose_from_doc(fr, "clip frame") for fr in _get(doc, "frames", "clip file")
    )
    return PoseClip(fps=float(_get(doc, "fps", "clip file")), frames=frames)


@dataclass(frozen=True)
class ImageRef:
    """One training image: which camera took it, where it lives, and the
    clip frame posed in it (None = canonical pose)."""

    camera: int
    path: str
    frame: int | None = None


@dataclass(frozen=True)
class SceneManifest:
    """A multi-view capture: cameras, their images, optional pose clip."""

    resolution: int
    bounds: Bounds
    cameras: tuple[Camera, ...]
    images: tuple[ImageRef, ...]
    clip_path: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if not self.cameras:
            raise ContractViolation("manifest needs at least one camera")
        for ref in self.images:
            if not 0 <= ref.camera < len(self.cameras):
                raise ContractViolation(f"image references camera {ref.camera}")

    def image_path(self, ref: ImageRef) -> str:
        return os.path.join(self.base_dir, ref.path)

    def clip(self) -> PoseClip | None:
        if self.clip_path is None:
            return None
        return load_clip(os.path.join(self.base_dir, self.clip_path))


def camera_to_doc(cam: Camera) -> dict:
    """JSON-ready dict for one camera (intrinsics + world-to-camera)."""
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.world_to_camera.rotation.tolist(),
        "translation": cam.world_to_camera.translation.tolist(),
    }


def camera_from_doc(doc: dict) -> Camera:
    """Parse a camera doc produced by camera_to_doc (manifests, wire)."""
    return Camera(
        fx=float(_get(doc, "fx", "camera")),
        fy=float(_get(doc, "fy", "camera")),
        cx=float(_get(doc, "cx", "camera")),
        cy=float(_get(doc, "cy", "camera")),
        width=int(_get(doc, "width", "camera")),
        height=int(_get(doc, "height", "camera")),
        world_to_camera=RigidTransform(
            np.asarray(_get(doc, "rotation", "camera"), dtype=np.float64),
            np.asarray(_get(doc, "translation", "camera"), dtype=np.float64),
        ),
    )


def save_scene(manifest: SceneManifest, path: str | os.PathLike) -> None:
    doc = {
        "resolution": manifest.resolution,
        "bounds": {
            "lo": manifest.bounds.lo.tolist(),
            "hi": manifest.bounds.hi.tolist(),
        },
        "cameras": [camera_to_doc(c) for c in manifest.cameras],
        "images": [
            {"camera": r.camera, "path": r.path, "frame": r.frame}
            for r in manifest.images
        ],
        "clip": manifest.clip_path,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(path: str | os.PathLike) -> SceneManifest:
    """Parse a scene manifest; every referenced file must exist."""
    doc = _load_json(path, "scene manifest")
    base = os.path.dirname(os.path.abspath(path))
    b = _get(doc, "bounds", "scene manifest")
    manifest = SceneManifest(
        resolution=int(_get(doc, "resolution", "scene manifest")),
        bounds=Bounds(
            np.asarray(_get(b, "lo", "bounds"), dtype=np.float64),
            np.asarray(_get(b, "hi", "bounds"), dtype=np.float64),
        ),
        cameras=tuple(
            camera_from_doc(c) for c in _get(doc, "cameras", "scene manifest")
        ),
        images=tuple(
            ImageRef(
                camera=int(_get(r, "camera", "image entry")),
                path=str(_get(r, "path", "image entry")),
                frame=r.get("frame"),
            )
            for r in _get(doc, "images", "scene manifest")
        ),
        clip_path=doc.get("clip"),
        base_dir=base,
    )
    missing = [
        r.path for r in manifest.images if not os.path.exists(manifest.image_path(r))
    ]
    if manifest.clip_path is not None and not os.path.exists(
        os.path.join(base, manifest.clip_path)
    ):
        missing.append(manifest.clip_path)
    if missing:
        raise AssetFormatError(f"scene references missing files: {missing[:5]}")
    return manifest


# ---------------------------------------------------------------------------
# OBJ subset: v/f records only, for skinning source meshes


def load_obj(path: str | os.PathLike) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Read vertices and faces from an OBJ file (v and f records; face
    entries may carry /vt/vn suffixes; negative indices count from the end).
    """
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, ...]] = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag, args = parts[0], parts[1:]
            if tag == "v":
                if len(args) < 3:
                    raise AssetFormatError(f"line {ln}: vertex needs 3 coordinates")
                vertices.append((float(args[0]), float(args[1]), float(args[2])))
            elif tag == "f":
                if len(args) < 3:
                    raise AssetFormatError(f"line {ln}: face needs 3 vertices")
                idx = []
                for a in args:
                    raw = int(a.split("/", 1)[0])
                    if raw == 0:
                        raise AssetFormatError(f"line {ln}: face index 0")
                    i = raw - 1 if raw > 0 else len(vertices) + raw
                    if not 0 <= i < len(vertices):
                        raise AssetFormatError(f"line {ln}: face index {raw} out of range")
                    idx.append(i)
                faces.append(tuple(idx))
            # other record types (vn, vt, o, g, s, usemtl, ...) are ignored
    if not vertices:
        raise AssetFormatError("OBJ contains no vertices")
    return np.asarray(vertices, dtype=np.float64), faces
