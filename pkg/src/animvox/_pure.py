"""Reference kernels in pure numpy/Python.

This module and the compiled module `_core` implement the same flat-array
kernel API; `backend` picks one at import time. Everything here favors
clarity over speed and is the behavioral reference the compiled kernels are
tested against.

Kernel-level conventions:

* Morton codes are u64 with x in the least significant interleave slot,
  then y, then z; 21 bits per axis.
* The radix tree over N sorted leaves has N-1 internal nodes numbered as in
  the parallel construction of Karras: node i covers a leaf range whose
  split boundary gamma makes its children the nodes/leaves at gamma and
  gamma+1; node 0 is the root. Child links encode internal nodes as the
  index itself (>= 0) and leaves as the bitwise complement ~leaf (< 0). A
  single-leaf tree has root = ~0.
* Node boxes come from the common Morton prefix of the node's first/last
  codes, so they are power-of-two octants; identical across backends.
* Ray kernels work in grid space (cells are unit cubes): ``origin_g`` is
  (origin - bounds_min) / cell_size and ``dir_g`` is dir / cell_size, which
  keeps the ray parameter t in world units.
* The FLUT is a (N_v, H*C+1) array: SH coefficient (h, c) at column h*C+c,
  density last.
* Transmittance is exclusive: T_1 = 1 before the first voxel.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import _C0, _C1, _C2, _C3, _C4

IS_COMPILED = False

_MORTON_BITS = 21


def _part1by2(x: np.ndarray) -> np.ndarray:
    x = x & 0x1FFFFF
    x = (x | (x << 32)) & 0x1F00000000FFFF
    x = (x | (x << 16)) & 0x1F0000FF0000FF
    x = (x | (x << 8)) & 0x100F00F00F00F00F
    x = (x | (x << 4)) & 0x10C30C30C30C30C3
    x = (x | (x << 2)) & 0x1249249249249249
    return x


def _compact1by2(x: np.ndarray) -> np.ndarray:
    x = x & 0x1249249249249249
    x = (x ^ (x >> 2)) & 0x10C30C30C30C30C3
    x = (x ^ (x >> 4)) & 0x100F00F00F00F00F
    x = (x ^ (x >> 8)) & 0x1F0000FF0000FF
    x = (x ^ (x >> 16)) & 0x1F00000000FFFF
    x = (x ^ (x >> 32)) & 0x1FFFFF
    return x


def morton_encode(coords: np.ndarray) -> np.ndarray:
    """(N, 3) integer grid coordinates -> (N,) u64 Morton codes."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= (1 << _MORTON_BITS)):
        raise ValueError(f"grid coordinates outside [0, 2^{_MORTON_BITS})")
    code = _part1by2(c[:, 0]) | (_part1by2(c[:, 1]) << 1) | (_part1by2(c[:, 2]) << 2)
    return code.astype(np.uint64)


def morton_decode(codes: np.ndarray) -> np.ndarray:
    """(N,) u64 Morton codes -> (N, 3) int64 grid coordinates."""
    c = np.asarray(codes).astype(np.int64)
    return np.stack(
        [_compact1by2(c), _compact1by2(c >> 1), _compact1by2(c >> 2)], axis=-1
    )


def sort_order(codes: np.ndarray, nthreads: int = 1) -> np.ndarray:
    """Stable permutation that sorts the codes ascending; (N,) int64."""
    return np.argsort(np.asarray(codes, dtype=np.uint64), kind="stable").astype(np.int64)


# ---------------------------------------------------------------------------
# radix tree


def _box_from_range(c_first: int, c_last: int):
    """Octant (min cell, size per axis) covering a sorted Morton range."""
    if c_first == c_last:
        raise ValueError("degenerate range")
    free = (c_first ^ c_last).bit_length()
    base = (c_first >> free) << free
    mn = (_compact1by2(np.array([base, base >> 1, base >> 2], dtype=np.int64)))
    # free low bits per axis: x gets ceil(free/3), then y, then z
    size = [1 << ((free + 2 - a) // 3) for a in range(3)]
    return int(mn[0]), int(mn[1]), int(mn[2]), size[0], size[1], size[2]


def _prefix_len(codes, i: int, j: int, n: int) -> int:
    """Common-prefix length of codes i and j; -1 outside the array."""
    if j < 0 or j >= n:
        return -1
    return 64 - (int(codes[i]) ^ int(codes[j])).bit_length()


def build_tree(codes: np.ndarray, nthreads: int = 1):
    """Build the radix tree over strictly sorted Morton codes.

    Every internal node is computed independently from prefix lengths of
    neighboring codes (range by exponential + binary search, then the split
    by bisection), so the compiled backend can build all nodes in parallel
    and both backends produce identical arrays.
    """
    codes = np.asarray(codes, dtype=np.uint64)
    n = codes.shape[0]
    if n == 0:
        raise ValueError("empty leaf set")
    left = np.empty(max(n - 1, 1), dtype=np.int32)
    right = np.empty(max(n - 1, 1), dtype=np.int32)
    box_min = np.empty((max(n - 1, 1), 3), dtype=np.int32)
    box_size = np.empty((max(n - 1, 1), 3), dtype=np.int32)
    if n == 1:
        return ~0, left[:0], right[:0], box_min[:0], box_size[:0]

    for i in range(n - 1):
        d = 1 if _prefix_len(codes, i, i + 1, n) > _prefix_len(codes, i, i - 1, n) else -1
        p_min = _prefix_len(codes, i, i - d, n)
        l_max = 2
        while _prefix_len(codes, i, i + l_max * d, n) > p_min:
            l_max <<= 1
        length = 0
        t = l_max >> 1
        while t >= 1:
            if _prefix_len(codes, i, i + (length + t) * d, n) > p_min:
                length += t
            t >>= 1
        j = i + length * d
        first, last = (i, j) if d > 0 else (j, i)

        p_node = _prefix_len(codes, first, last, n)
        split = first
        stride = last - first
        while True:
            stride = (stride + 1) >> 1
            if split + stride < last and _prefix_len(codes, first, split + stride, n) > p_node:
                split += stride
            if stride == 1:
                break

        left[i] = ~split if split == first else split
        right[i] = ~(split + 1) if split + 1 == last else split + 1
        box_min[i], box_size[i] = np.array(
            _box_from_range(int(codes[first]), int(codes[last]))
        ).reshape(2, 3)
    return 0, left, right, box_min, box_size


# ---------------------------------------------------------------------------
# traversal


def _slab(lo0, lo1, lo2, hi0, hi1, hi2, og, dg, t0, t1):
    """Ray/box overlap of [lo, hi) within [t0, t1]; None when empty."""
    for a, lo_a, hi_a in ((0, lo0, hi0), (1, lo1, hi1), (2, lo2, hi2)):
        d = dg[a]
        o = og[a]
        if d == 0.0:
            if o < lo_a or o >= hi_a:
                return None
        else:
            ta = (lo_a - o) / d
            tb = (hi_a - o) / d
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 >= t1:
                return None
    return t0, t1


def traverse_ray(
    codes: np.ndarray,
    flut_idx: np.ndarray,
    root: int,
    left: np.ndarray,
    right: np.ndarray,
    box_min: np.ndarray,
    box_size: np.ndarray,
    origin_g: np.ndarray,
    dir_g: np.ndarray,
    t_min: float,
    t_max: float,
):
    """All occupied leaves pierced by the ray, front to back.

    Returns (leaf flut indices, t_enter, t_exit) arrays; t in world units.
    """
    out_idx: list[int] = []
    out_t0: list[float] = []
    out_t1: list[float] = []
    og = [float(origin_g[0]), float(origin_g[1]), float(origin_g[2])]
    dg = [float(dir_g[0]), float(dir_g[1]), float(dir_g[2])]

    def child_hit(node: int):
        if node < 0:
            leaf = ~node
            c = int(codes[leaf])
            x = _compact_scalar(c)
            y = _compact_scalar(c >> 1)
            z = _compact_scalar(c >> 2)
            return _slab(x, y, z, x + 1, y + 1, z + 1, og, dg, t_min, t_max)
        bm = box_min[node]
        bs = box_size[node]
        return _slab(
            bm[0], bm[1], bm[2], bm[0] + bs[0], bm[1] + bs[1], bm[2] + bs[2],
            og, dg, t_min, t_max,
        )

    stack = [root]
    while stack:
        node = stack.pop()
        hit = child_hit(node)
        if hit is None:
            continue
        if node < 0:
            t0, t1 = hit
            if t1 > t0:
                out_idx.append(int(flut_idx[~node]))
                out_t0.append(t0)
                out_t1.append(t1)
            continue
        l, r = int(left[node]), int(right[node])
        hl = child_hit(l)
        hr = child_hit(r)
        if hl is None:
            if hr is not None:
                stack.append(r)
        elif hr is None:
            stack.append(l)
        elif hl[0] <= hr[0]:
            stack.append(r)
            stack.append(l)
        else:
            stack.append(l)
            stack.append(r)
    return (
        np.array(out_idx, dtype=np.int64),
        np.array(out_t0, dtype=np.float64),
        np.array(out_t1, dtype=np.float64),
    )


def _compact_scalar(c: int) -> int:
    c &= 0x1249249249249249
    c = (c ^ (c >> 2)) & 0x10C30C30C30C30C3
    c = (c ^ (c >> 4)) & 0x100F00F00F00F00F
    c = (c ^ (c >> 8)) & 0x1F0000FF0000FF
    c = (c ^ (c >> 16)) & 0x1F00000000FFFF
    c = (c ^ (c >> 32)) & 0x1FFFFF
    return c


# ---------------------------------------------------------------------------
# spherical harmonics (scalar, mirrors geometry.sh_basis_many)


def _sh_eval(x: float, y: float, z: float, degree: int, out: list):
    out[0] = _C0
    if degree >= 1:
        out[1] = _C1 * y
        out[2] = _C1 * z
        out[3] = _C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[4] = _C2[0] * x * y
        out[5] = _C2[1] * y * z
        out[6] = _C2[2] * (3.0 * zz - 1.0)
        out[7] = _C2[3] * x * z
        out[8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[9] = _C3[0] * y * (3.0 * xx - yy)
        out[10] = _C3[1] * x * y * z
        out[11] = _C3[2] * y * (5.0 * zz - 1.0)
        out[12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[13] = _C3[4] * x * (5.0 * zz - 1.0)
        out[14] = _C3[5] * z * (xx - yy)
        out[15] = _C3[6] * x * (xx - 3.0 * yy)
    if degree >= 4:
        out[16] = _C4[0] * x * y * (xx - yy)
        out[17] = _C4[1] * y * z * (3.0 * xx - yy)
        out[18] = _C4[2] * x * y * (7.0 * zz - 1.0)
        out[19] = _C4[3] * y * z * (7.0 * zz - 3.0)
        out[20] = _C4[4] * (zz * (35.0 * zz - 30.0) + 3.0)
        out[21] = _C4[5] * x * z * (7.0 * zz - 3.0)
        out[22] = _C4[6] * (xx - yy) * (7.0 * zz - 1.0)
        out[23] = _C4[7] * x * z * (xx - 3.0 * yy)
        out[24] = _C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))


# ---------------------------------------------------------------------------
# rendering and fitting kernels


def _canonical_dir(rot_inv: np.ndarray, rot_index: np.ndarray, i: int, dw):
    m = rot_inv[rot_index[i]]
    return (
        m[0, 0] * dw[0] + m[0, 1] * dw[1] + m[0, 2] * dw[2],
        m[1, 0] * dw[0] + m[1, 1] * dw[1] + m[1, 2] * dw[2],
        m[2, 0] * dw[0] + m[2, 1] * dw[1] + m[2, 2] * dw[2],
    )


def render_rays(
    codes,
    flut_idx,
    root,
    left,
    right,
    box_min,
    box_size,
    origins_g,
    dirs_g,
    dirs_w,
    t_min,
    t_max,
    flut,
    rot_index,
    rot_inv,
    degree,
    channels,
    lambda_th,
    sigma_dep,
    early_stop,
    nthreads=1,
):
    """Integrate every ray; returns (F (R,C), alpha (R,), depth (R,))."""
    n_rays = origins_g.shape[0]
    hc = flut.shape[1] - 1
    h_count = (degree + 1) * (degree + 1)
    fbuf = np.zeros((n_rays, channels), dtype=np.float64)
    abuf = np.zeros(n_rays, dtype=np.float64)
    dbuf = np.full(n_rays, np.inf, dtype=np.float64)
    ybuf = [0.0] * h_count
    stop = 1.0 - lambda_th
    for r in range(n_rays):
        idx, t0s, t1s = traverse_ray(
            codes, flut_idx, root, left, right, box_min, box_size,
            origins_g[r], dirs_g[r], t_min, t_max,
        )
        if idx.size == 0:
            continue
        dw = dirs_w[r]
        transmit = 1.0
        acc_a = 0.0
        depth = math.inf
        frow = fbuf[r]
        for k in range(idx.size):
            i = int(idx[k])
            sigma = float(flut[i, hc])
            delta = float(t1s[k]) - float(t0s[k])
            if math.isinf(depth) and sigma > sigma_dep:
                depth = float(t0s[k])
            em = math.exp(-sigma * delta)
            a = transmit * (1.0 - em)
            if a > 0.0:
                dx, dy, dz = _canonical_dir(rot_inv, rot_index, i, dw)
                _sh_eval(dx, dy, dz, degree, ybuf)
                for c in range(channels):
                    s = 0.0
                    for h in range(h_count):
                        s += float(flut[i, h * channels + c]) * ybuf[h]
                    frow[c] += a * s
                acc_a += a
            transmit *= em
            if early_stop and acc_a > stop:
                break
        abuf[r] = acc_a
        dbuf[r] = depth
    return fbuf, abuf, dbuf


def forward_fit(
    codes,
    flut_idx,
    root,
    left,
    right,
    box_min,
    box_size,
    origins_g,
    dirs_g,
    dirs_w,
    t_min,
    t_max,
    flut,
    rot_index,
    rot_inv,
    degree,
    channels,
    nthreads=1,
):
    """Full (no early stop) forward pass that also returns the hit trace.

    Returns (F, alpha, offsets, hit_idx, hit_t0, hit_t1) where the CSR slice
    offsets[r]:offsets[r+1] lists ray r's hits front to back.
    """
    n_rays = origins_g.shape[0]
    hc = flut.shape[1] - 1
    h_count = (degree + 1) * (degree + 1)
    segs = []
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    for r in range(n_rays):
        seg = traverse_ray(
            codes, flut_idx, root, left, right, box_min, box_size,
            origins_g[r], dirs_g[r], t_min, t_max,
        )
        segs.append(seg)
        offsets[r + 1] = offsets[r] + seg[0].size
    total = int(offsets[-1])
    hit_idx = np.empty(total, dtype=np.int64)
    hit_t0 = np.empty(total, dtype=np.float64)
    hit_t1 = np.empty(total, dtype=np.float64)
    for r, (idx, t0s, t1s) in enumerate(segs):
        hit_idx[offsets[r] : offsets[r + 1]] = idx
        hit_t0[offsets[r] : offsets[r + 1]] = t0s
        hit_t1[offsets[r] : offsets[r + 1]] = t1s

    fbuf = np.zeros((n_rays, channels), dtype=np.float64)
    abuf = np.zeros(n_rays, dtype=np.float64)
    ybuf = [0.0] * h_count
    for r in range(n_rays):
        dw = dirs_w[r]
        transmit = 1.0
        frow = fbuf[r]
        acc_a = 0.0
        for k in range(int(offsets[r]), int(offsets[r + 1])):
            i = int(hit_idx[k])
            sigma = float(flut[i, hc])
            delta = float(hit_t1[k]) - float(hit_t0[k])
            em = math.exp(-sigma * delta)
            a = transmit * (1.0 - em)
            if a > 0.0:
                dx, dy, dz = _canonical_dir(rot_inv, rot_index, i, dw)
                _sh_eval(dx, dy, dz, degree, ybuf)
                for c in range(channels):
                    s = 0.0
                    for h in range(h_count):
                        s += float(flut[i, h * channels + c]) * ybuf[h]
                    frow[c] += a * s
                acc_a += a
            transmit *= em
        abuf[r] = acc_a
    return fbuf, abuf, offsets, hit_idx, hit_t0, hit_t1


def backward_rays(
    offsets,
    hit_idx,
    hit_t0,
    hit_t1,
    dirs_w,
    rot_index,
    rot_inv,
    flut,
    dldf,
    dlda,
    degree,
    channels,
    deterministic=True,
    nthreads=1,
):
    """Analytic gradient of the loss w.r.t. the FLUT.

    Per hit i on a ray with upstream gradients dldf (per channel) and dlda:
    d/dk[i,h,c] = alpha_i * Y_h(d_canonical) * dldf[c]; the density gradient
    combines the local alpha response with the occlusion of everything
    behind: d/dsigma_i = delta_i * (g_i * T_i * exp(-tau_i) - G_i) where
    g_i = dlda + sum_c dldf[c] * S_i[c] and G_i = sum_{j>i} g_j * alpha_j.
    Accumulation runs in ray order (always sequential here).
    """
    hc = flut.shape[1] - 1
    h_count = (degree + 1) * (degree + 1)
    # the gradient keeps the FLUT's dtype; math runs in double either way
    grad = np.zeros_like(np.asarray(flut))
    n_rays = len(offsets) - 1
    ybuf = [0.0] * h_count
    for r in range(n_rays):
        s0, s1 = int(offsets[r]), int(offsets[r + 1])
        n = s1 - s0
        if n == 0:
            continue
        dw = dirs_w[r]
        dlf = dldf[r]
        gscalar = float(dlda[r])
        transmit = 1.0
        alphas = [0.0] * n
        gs = [0.0] * n
        t_excl = [0.0] * n
        ems = [0.0] * n
        deltas = [0.0] * n
        for k in range(n):
            i = int(hit_idx[s0 + k])
            sigma = float(flut[i, hc])
            delta = float(hit_t1[s0 + k]) - float(hit_t0[s0 + k])
            em = math.exp(-sigma * delta)
            a = transmit * (1.0 - em)
            dx, dy, dz = _canonical_dir(rot_inv, rot_index, i, dw)
            _sh_eval(dx, dy, dz, degree, ybuf)
            g = gscalar
            for c in range(channels):
                s = 0.0
                for h in range(h_count):
                    s += float(flut[i, h * channels + c]) * ybuf[h]
                g += float(dlf[c]) * s
                w = a * float(dlf[c])
                for h in range(h_count):
                    grad[i, h * channels + c] += w * ybuf[h]
            alphas[k] = a
            gs[k] = g
            t_excl[k] = transmit
            ems[k] = em
            deltas[k] = delta
            transmit *= em
        suffix = 0.0
        for k in range(n - 1, -1, -1):
            i = int(hit_idx[s0 + k])
            grad[i, hc] += deltas[k] * (gs[k] * t_excl[k] * ems[k] - suffix)
            suffix += gs[k] * alphas[k]
    return grad
