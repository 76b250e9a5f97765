# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Behavioral mirror of `animvox._pure` (the reference);
same array layouts, same node numbering, same operation order per ray, so
the two backends agree bit-for-bit in double precision.

Parallel loops use OpenMP through `prange`; everything written in parallel
is partitioned per ray / per node / per chunk, so results never depend on
the thread count except where explicitly documented (backward_rays fast
mode, which uses atomic float adds)."""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel cimport parallel, prange
from libc.math cimport INFINITY, exp, fabs

cnp.import_array()

IS_COMPILED = True

cdef extern from *:
    """
    static inline void av_atomic_addd(double* x, double v) {
        #pragma omp atomic
        *x += v;
    }
    static inline void av_atomic_addf(float* x, float v) {
        #pragma omp atomic
        *x += v;
    }
    static inline int av_clzll(unsigned long long x) {
        return __builtin_clzll(x);
    }
    """
    void av_atomic_addd(double* x, double v) nogil
    void av_atomic_addf(float* x, float v) nogil
    int av_clzll(unsigned long long x) nogil

ctypedef unsigned long long u64
ctypedef long long i64

ctypedef fused real_t:
    float
    double


# ---------------------------------------------------------------------------
# Morton codes

cdef u64 M0 = <u64> 0x1FFFFF
cdef u64 M1 = <u64> 0x1F00000000FFFF
cdef u64 M2 = <u64> 0x1F0000FF0000FF
cdef u64 M3 = <u64> 0x100F00F00F00F00F
cdef u64 M4 = <u64> 0x10C30C30C30C30C3
cdef u64 M5 = <u64> 0x1249249249249249


cdef inline u64 part1by2(u64 x) noexcept nogil:
    x = x & M0
    x = (x | (x << 32)) & M1
    x = (x | (x << 16)) & M2
    x = (x | (x << 8)) & M3
    x = (x | (x << 4)) & M4
    x = (x | (x << 2)) & M5
    return x


cdef inline u64 compact1by2(u64 x) noexcept nogil:
    x = x & M5
    x = (x ^ (x >> 2)) & M4
    x = (x ^ (x >> 4)) & M3
    x = (x ^ (x >> 8)) & M2
    x = (x ^ (x >> 16)) & M1
    x = (x ^ (x >> 32)) & M0
    return x


def morton_encode(coords):
    arr = np.ascontiguousarray(coords, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << 21)):
        raise ValueError("grid coordinates outside [0, 2^21)")
    cdef cnp.int64_t[:, ::1] c = arr
    cdef Py_ssize_t n = c.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef u64[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = part1by2(<u64> c[i, 0]) | (part1by2(<u64> c[i, 1]) << 1) | (
                part1by2(<u64> c[i, 2]) << 2
            )
    return out


def morton_decode(codes):
    cdef u64[::1] c = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef Py_ssize_t n = c.shape[0], i
    out = np.empty((n, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    with nogil:
        for i in range(n):
            o[i, 0] = <cnp.int64_t> compact1by2(c[i])
            o[i, 1] = <cnp.int64_t> compact1by2(c[i] >> 1)
            o[i, 2] = <cnp.int64_t> compact1by2(c[i] >> 2)
    return out


# ---------------------------------------------------------------------------
# stable LSD radix sort -> permutation

def sort_order(codes, int nthreads=1):
    """Stable ascending permutation of u64 codes; identical for any
    partitioning because per-chunk scatter offsets preserve input order."""
    codes_arr = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef Py_ssize_t n = codes_arr.shape[0]
    perm = np.arange(n, dtype=np.int64)
    if n <= 1:
        return perm
    cdef int passes = max(1, (int(codes_arr.max()).bit_length() + 7) // 8)
    cdef int t_count = max(1, min(nthreads, <int> ((n + 16383) // 16384)))
    cdef Py_ssize_t chunk = (n + t_count - 1) // t_count

    keys_a = codes_arr.copy()
    keys_b = np.empty_like(keys_a)
    perm_b = np.empty_like(perm)
    hist = np.zeros((t_count, 256), dtype=np.int64)
    cdef u64[::1] ka = keys_a, kb = keys_b
    cdef i64[::1] pa = perm, pb = perm_b
    cdef i64[:, ::1] h = hist
    cdef Py_ssize_t i, lo, hi, pos
    cdef int p, t, d, shift
    cdef i64 run, tmp
    for p in range(passes):
        shift = 8 * p
        h[:, :] = 0
        with nogil:
            for t in prange(t_count, num_threads=t_count, schedule='static'):
                lo = t * chunk
                hi = lo + chunk
                if hi > n:
                    hi = n
                for i in range(lo, hi):
                    h[t, (ka[i] >> shift) & 0xFF] += 1
        # exclusive offsets in (digit, chunk) order keep the sort stable
        run = 0
        for d in range(256):
            for t in range(t_count):
                tmp = h[t, d]
                h[t, d] = run
                run += tmp
        with nogil:
            for t in prange(t_count, num_threads=t_count, schedule='static'):
                lo = t * chunk
                hi = lo + chunk
                if hi > n:
                    hi = n
                for i in range(lo, hi):
                    d = <int> ((ka[i] >> shift) & 0xFF)
                    pos = h[t, d]
                    h[t, d] += 1
                    kb[pos] = ka[i]
                    pb[pos] = pa[i]
        ka, kb = kb, ka
        pa, pb = pb, pa
    if passes % 2 == 1:
        return perm_b
    return perm


# ---------------------------------------------------------------------------
# radix tree

cdef inline int prefix_len(const u64* codes, Py_ssize_t n, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    if j < 0 or j >= n:
        return -1
    cdef u64 x = codes[i] ^ codes[j]
    if x == 0:
        return 64
    return av_clzll(x)


cdef inline void box_of(u64 c_first, u64 c_last, int* bmin, int* bsize) noexcept nogil:
    cdef int free_bits = 64 - av_clzll(c_first ^ c_last)
    cdef u64 base = (c_first >> free_bits) << free_bits
    bmin[0] = <int> compact1by2(base)
    bmin[1] = <int> compact1by2(base >> 1)
    bmin[2] = <int> compact1by2(base >> 2)
    bsize[0] = 1 << ((free_bits + 2) // 3)
    bsize[1] = 1 << ((free_bits + 1) // 3)
    bsize[2] = 1 << (free_bits // 3)


def build_tree(codes, int nthreads=1):
    codes_arr = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef Py_ssize_t n = codes_arr.shape[0]
    if n == 0:
        raise ValueError("empty leaf set")
    left = np.empty(max(n - 1, 1), dtype=np.int32)
    right = np.empty(max(n - 1, 1), dtype=np.int32)
    box_min = np.empty((max(n - 1, 1), 3), dtype=np.int32)
    box_size = np.empty((max(n - 1, 1), 3), dtype=np.int32)
    if n == 1:
        return ~0, left[:0], right[:0], box_min[:0], box_size[:0]

    cdef u64[::1] cv = codes_arr
    cdef const u64* cp = &cv[0]
    cdef int[::1] lv = left, rv = right
    cdef int[:, ::1] bmv = box_min, bsv = box_size
    cdef Py_ssize_t i, j, first, last
    cdef int d, p_min, p_node
    cdef Py_ssize_t l_max, length, split, stride
    with nogil:
        for i in prange(n - 1, num_threads=nthreads, schedule='static'):
            d = 1 if prefix_len(cp, n, i, i + 1) > prefix_len(cp, n, i, i - 1) else -1
            p_min = prefix_len(cp, n, i, i - d)
            l_max = 2
            while prefix_len(cp, n, i, i + l_max * d) > p_min:
                l_max = l_max << 1
            length = 0
            stride = l_max >> 1
            while stride >= 1:
                if prefix_len(cp, n, i, i + (length + stride) * d) > p_min:
                    length = length + stride
                stride = stride >> 1
            j = i + length * d
            if d > 0:
                first = i
                last = j
            else:
                first = j
                last = i

            p_node = prefix_len(cp, n, first, last)
            split = first
            stride = last - first
            while True:
                stride = (stride + 1) >> 1
                if split + stride < last and prefix_len(cp, n, first, split + stride) > p_node:
                    split = split + stride
                if stride == 1:
                    break

            lv[i] = <int> (~split) if split == first else <int> split
            rv[i] = <int> (~(split + 1)) if split + 1 == last else <int> (split + 1)
            box_of(cp[first], cp[last], &bmv[i, 0], &bsv[i, 0])
    return 0, left, right, box_min, box_size


# ---------------------------------------------------------------------------
# traversal

cdef inline bint slab(double lo0, double lo1, double lo2,
                      double hi0, double hi1, double hi2,
                      const double* og, const double* dg,
                      double t_min, double t_max,
                      double* t0_out, double* t1_out) noexcept nogil:
    cdef double t0 = t_min, t1 = t_max, ta, tb, d, o
    cdef int a
    cdef double lo_a, hi_a
    for a in range(3):
        if a == 0:
            lo_a = lo0; hi_a = hi0
        elif a == 1:
            lo_a = lo1; hi_a = hi1
        else:
            lo_a = lo2; hi_a = hi2
        d = dg[a]
        o = og[a]
        if d == 0.0:
            if o < lo_a or o >= hi_a:
                return 0
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
                return 0
    t0_out[0] = t0
    t1_out[0] = t1
    return 1


cdef inline bint node_hit(const u64* codes, const int* box_min, const int* box_size,
                          int node, const double* og, const double* dg,
                          double t_min, double t_max,
                          double* t0_out, double* t1_out) noexcept nogil:
    cdef double x, y, z
    cdef const int* bm
    cdef const int* bs
    if node < 0:
        x = <double> compact1by2(codes[~node])
        y = <double> compact1by2(codes[~node] >> 1)
        z = <double> compact1by2(codes[~node] >> 2)
        return slab(x, y, z, x + 1.0, y + 1.0, z + 1.0, og, dg, t_min, t_max, t0_out, t1_out)
    bm = box_min + 3 * node
    bs = box_size + 3 * node
    return slab(<double> bm[0], <double> bm[1], <double> bm[2],
                <double> (bm[0] + bs[0]), <double> (bm[1] + bs[1]), <double> (bm[2] + bs[2]),
                og, dg, t_min, t_max, t0_out, t1_out)


cdef int _traverse(const u64* codes, const unsigned int* flut_idx, int root,
                   const int* left, const int* right,
                   const int* box_min, const int* box_size,
                   const double* og, const double* dg,
                   double t_min, double t_max,
                   i64* out_idx, double* out_t0, double* out_t1, bint fill) noexcept nogil:
    """Front-to-back leaf hits; returns the count, writes when `fill`."""
    cdef int stack[128]
    cdef int top = 0, node, l, r, count = 0
    cdef double t0, t1, lt0, lt1, rt0, rt1
    cdef bint hl, hr
    stack[top] = root
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if node < 0:
            if node_hit(codes, box_min, box_size, node, og, dg, t_min, t_max, &t0, &t1):
                if t1 > t0:
                    if fill:
                        out_idx[count] = <i64> flut_idx[~node]
                        out_t0[count] = t0
                        out_t1[count] = t1
                    count += 1
            continue
        if not node_hit(codes, box_min, box_size, node, og, dg, t_min, t_max, &t0, &t1):
            continue
        l = left[node]
        r = right[node]
        hl = node_hit(codes, box_min, box_size, l, og, dg, t_min, t_max, &lt0, &lt1)
        hr = node_hit(codes, box_min, box_size, r, og, dg, t_min, t_max, &rt0, &rt1)
        if not hl:
            if hr:
                stack[top] = r
                top += 1
        elif not hr:
            stack[top] = l
            top += 1
        elif lt0 <= rt0:
            stack[top] = r
            top += 1
            stack[top] = l
            top += 1
        else:
            stack[top] = l
            top += 1
            stack[top] = r
            top += 1
    return count


def traverse_ray(codes, flut_idx, root, left, right, box_min, box_size,
                 origin_g, dir_g, double t_min, double t_max):
    cdef u64[::1] cv = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef unsigned int[::1] fv = np.ascontiguousarray(flut_idx, dtype=np.uint32)
    cdef int[::1] lv = np.ascontiguousarray(left, dtype=np.int32)
    cdef int[::1] rv = np.ascontiguousarray(right, dtype=np.int32)
    cdef int[:, ::1] bmv = np.ascontiguousarray(box_min, dtype=np.int32)
    cdef int[:, ::1] bsv = np.ascontiguousarray(box_size, dtype=np.int32)
    cdef double[::1] og = np.ascontiguousarray(origin_g, dtype=np.float64)
    cdef double[::1] dg = np.ascontiguousarray(dir_g, dtype=np.float64)
    cdef int rt = root
    cdef Py_ssize_t n = cv.shape[0]
    cdef const int* lp = NULL
    cdef const int* rp = NULL
    cdef const int* bmp = NULL
    cdef const int* bsp = NULL
    if n > 1:
        lp = &lv[0]; rp = &rv[0]; bmp = &bmv[0, 0]; bsp = &bsv[0, 0]
    cdef int count
    with nogil:
        count = _traverse(&cv[0], &fv[0], rt, lp, rp, bmp, bsp,
                          &og[0], &dg[0], t_min, t_max, NULL, NULL, NULL, 0)
    out_idx = np.empty(count, dtype=np.int64)
    out_t0 = np.empty(count, dtype=np.float64)
    out_t1 = np.empty(count, dtype=np.float64)
    cdef i64[::1] oi = out_idx
    cdef double[::1] o0 = out_t0, o1 = out_t1
    if count:
        with nogil:
            _traverse(&cv[0], &fv[0], rt, lp, rp, bmp, bsp,
                      &og[0], &dg[0], t_min, t_max, &oi[0], &o0[0], &o1[0], 1)
    return out_idx, out_t0, out_t1


# ---------------------------------------------------------------------------
# spherical harmonics (constants mirror geometry.py literally)

cdef double C0 = 0.28209479177387814
cdef double C1 = 0.4886025119029199
cdef double C2_0 = 1.0925484305920792
cdef double C2_1 = 1.0925484305920792
cdef double C2_2 = 0.31539156525252005
cdef double C2_3 = 1.0925484305920792
cdef double C2_4 = 0.5462742152960396
cdef double C3_0 = 0.5900435899266435
cdef double C3_1 = 2.890611442640554
cdef double C3_2 = 0.4570457994644658
cdef double C3_3 = 0.3731763325901154
cdef double C3_4 = 0.4570457994644658
cdef double C3_5 = 1.445305721320277
cdef double C3_6 = 0.5900435899266435
cdef double C4_0 = 2.5033429417967046
cdef double C4_1 = 1.7701307697799304
cdef double C4_2 = 0.9461746957575601
cdef double C4_3 = 0.6690465435572892
cdef double C4_4 = 0.10578554691520431
cdef double C4_5 = 0.6690465435572892
cdef double C4_6 = 0.47308734787878004
cdef double C4_7 = 1.7701307697799304
cdef double C4_8 = 0.6258357354491761


cdef inline void sh_eval(int degree, double x, double y, double z, double* out) noexcept nogil:
    cdef double xx, yy, zz
    out[0] = C0
    if degree >= 1:
        out[1] = C1 * y
        out[2] = C1 * z
        out[3] = C1 * x
    if degree >= 2:
        xx = x * x; yy = y * y; zz = z * z
        out[4] = C2_0 * x * y
        out[5] = C2_1 * y * z
        out[6] = C2_2 * (3.0 * zz - 1.0)
        out[7] = C2_3 * x * z
        out[8] = C2_4 * (xx - yy)
    if degree >= 3:
        out[9] = C3_0 * y * (3.0 * xx - yy)
        out[10] = C3_1 * x * y * z
        out[11] = C3_2 * y * (5.0 * zz - 1.0)
        out[12] = C3_3 * z * (5.0 * zz - 3.0)
        out[13] = C3_4 * x * (5.0 * zz - 1.0)
        out[14] = C3_5 * z * (xx - yy)
        out[15] = C3_6 * x * (xx - 3.0 * yy)
    if degree >= 4:
        out[16] = C4_0 * x * y * (xx - yy)
        out[17] = C4_1 * y * z * (3.0 * xx - yy)
        out[18] = C4_2 * x * y * (7.0 * zz - 1.0)
        out[19] = C4_3 * y * z * (7.0 * zz - 3.0)
        out[20] = C4_4 * (zz * (35.0 * zz - 30.0) + 3.0)
        out[21] = C4_5 * x * z * (7.0 * zz - 3.0)
        out[22] = C4_6 * (xx - yy) * (7.0 * zz - 1.0)
        out[23] = C4_7 * x * z * (xx - 3.0 * yy)
        out[24] = C4_8 * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))


cdef inline int max_hits_bound(Py_ssize_t n_leaves, int root, const int* box_size) noexcept nogil:
    cdef i64 extent = 1, cap
    if root >= 0:
        extent = box_size[3 * root]
        if box_size[3 * root + 1] > extent:
            extent = box_size[3 * root + 1]
        if box_size[3 * root + 2] > extent:
            extent = box_size[3 * root + 2]
    cap = 3 * extent + 4
    if cap > <i64> n_leaves:
        cap = n_leaves
    if cap < 4:
        cap = 4
    return <int> cap


# ---------------------------------------------------------------------------
# rendering

def render_rays(codes, flut_idx, root, left, right, box_min, box_size,
                origins_g, dirs_g, dirs_w, double t_min, double t_max,
                flut, rot_index, rot_inv, int degree, int channels,
                double lambda_th, double sigma_dep, bint early_stop, int nthreads=1):
    cdef u64[::1] cv = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef unsigned int[::1] fv = np.ascontiguousarray(flut_idx, dtype=np.uint32)
    cdef int[::1] lv = np.ascontiguousarray(left, dtype=np.int32)
    cdef int[::1] rv = np.ascontiguousarray(right, dtype=np.int32)
    cdef int[:, ::1] bmv = np.ascontiguousarray(box_min, dtype=np.int32)
    cdef int[:, ::1] bsv = np.ascontiguousarray(box_size, dtype=np.int32)
    cdef double[:, ::1] ogv = np.ascontiguousarray(origins_g, dtype=np.float64)
    cdef double[:, ::1] dgv = np.ascontiguousarray(dirs_g, dtype=np.float64)
    cdef double[:, ::1] dwv = np.ascontiguousarray(dirs_w, dtype=np.float64)
    cdef double[:, ::1] fl = np.ascontiguousarray(flut, dtype=np.float64)
    cdef int[::1] riv = np.ascontiguousarray(rot_index, dtype=np.int32)
    cdef double[:, :, ::1] rotv = np.ascontiguousarray(rot_inv, dtype=np.float64)
    cdef int rt = root
    cdef Py_ssize_t n = cv.shape[0], n_rays = ogv.shape[0]
    cdef const int* lp = NULL
    cdef const int* rp = NULL
    cdef const int* bmp = NULL
    cdef const int* bsp = NULL
    if n > 1:
        lp = &lv[0]; rp = &rv[0]; bmp = &bmv[0, 0]; bsp = &bsv[0, 0]

    cdef int hc = <int> fl.shape[1] - 1
    cdef int h_count = (degree + 1) * (degree + 1)
    cdef double stop = 1.0 - lambda_th
    fbuf = np.zeros((n_rays, channels), dtype=np.float64)
    abuf = np.zeros(n_rays, dtype=np.float64)
    dbuf = np.full(n_rays, np.inf, dtype=np.float64)
    cdef double[:, ::1] fb = fbuf
    cdef double[::1] ab = abuf, db = dbuf

    cdef int nt = max(1, nthreads)
    cdef int cap = max_hits_bound(n, rt, bsp) if n > 1 else 4
    seg_idx = np.empty((nt, cap), dtype=np.int64)
    seg_t0 = np.empty((nt, cap), dtype=np.float64)
    seg_t1 = np.empty((nt, cap), dtype=np.float64)
    ybufs = np.empty((nt, 25), dtype=np.float64)
    cdef i64[:, ::1] siv = seg_idx
    cdef double[:, ::1] s0v = seg_t0, s1v = seg_t1, yv = ybufs

    cdef Py_ssize_t r
    cdef int tid, m, k, c, h
    cdef i64 i
    cdef int ri
    cdef double sigma, delta, em, a, transmit, acc_a, depth, s
    cdef double dx, dy, dz, wx, wy, wz
    with nogil, parallel(num_threads=nt):
        tid = openmp.omp_get_thread_num()
        for r in prange(n_rays, schedule='static'):
            m = _traverse(&cv[0], &fv[0], rt, lp, rp, bmp, bsp,
                          &ogv[r, 0], &dgv[r, 0], t_min, t_max,
                          &siv[tid, 0], &s0v[tid, 0], &s1v[tid, 0], 1)
            if m == 0:
                continue
            wx = dwv[r, 0]; wy = dwv[r, 1]; wz = dwv[r, 2]
            transmit = 1.0
            acc_a = 0.0
            depth = INFINITY
            for k in range(m):
                i = siv[tid, k]
                sigma = fl[i, hc]
                delta = s1v[tid, k] - s0v[tid, k]
                if depth == INFINITY and sigma > sigma_dep:
                    depth = s0v[tid, k]
                em = exp(-sigma * delta)
                a = transmit * (1.0 - em)
                if a > 0.0:
                    ri = riv[i]
                    dx = rotv[ri, 0, 0] * wx + rotv[ri, 0, 1] * wy + rotv[ri, 0, 2] * wz
                    dy = rotv[ri, 1, 0] * wx + rotv[ri, 1, 1] * wy + rotv[ri, 1, 2] * wz
                    dz = rotv[ri, 2, 0] * wx + rotv[ri, 2, 1] * wy + rotv[ri, 2, 2] * wz
                    sh_eval(degree, dx, dy, dz, &yv[tid, 0])
                    for c in range(channels):
                        s = 0.0
                        for h in range(h_count):
                            s = s + fl[i, h * channels + c] * yv[tid, h]
                        fb[r, c] += a * s
                    acc_a = acc_a + a
                transmit = transmit * em
                if early_stop and acc_a > stop:
                    break
            ab[r] = acc_a
            db[r] = depth
    return fbuf, abuf, dbuf


def forward_fit(codes, flut_idx, root, left, right, box_min, box_size,
                origins_g, dirs_g, dirs_w, double t_min, double t_max,
                flut, rot_index, rot_inv, int degree, int channels, int nthreads=1):
    cdef u64[::1] cv = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef unsigned int[::1] fv = np.ascontiguousarray(flut_idx, dtype=np.uint32)
    cdef int[::1] lv = np.ascontiguousarray(left, dtype=np.int32)
    cdef int[::1] rv = np.ascontiguousarray(right, dtype=np.int32)
    cdef int[:, ::1] bmv = np.ascontiguousarray(box_min, dtype=np.int32)
    cdef int[:, ::1] bsv = np.ascontiguousarray(box_size, dtype=np.int32)
    cdef double[:, ::1] ogv = np.ascontiguousarray(origins_g, dtype=np.float64)
    cdef double[:, ::1] dgv = np.ascontiguousarray(dirs_g, dtype=np.float64)
    cdef double[:, ::1] dwv = np.ascontiguousarray(dirs_w, dtype=np.float64)
    cdef double[:, ::1] fl = np.ascontiguousarray(flut, dtype=np.float64)
    cdef int[::1] riv = np.ascontiguousarray(rot_index, dtype=np.int32)
    cdef double[:, :, ::1] rotv = np.ascontiguousarray(rot_inv, dtype=np.float64)
    cdef int rt = root
    cdef Py_ssize_t n = cv.shape[0], n_rays = ogv.shape[0]
    cdef const int* lp = NULL
    cdef const int* rp = NULL
    cdef const int* bmp = NULL
    cdef const int* bsp = NULL
    if n > 1:
        lp = &lv[0]; rp = &rv[0]; bmp = &bmv[0, 0]; bsp = &bsv[0, 0]

    cdef int nt = max(1, nthreads)
    counts = np.zeros(n_rays + 1, dtype=np.int64)
    cdef i64[::1] cnt = counts
    cdef Py_ssize_t r
    with nogil:
        for r in prange(n_rays, num_threads=nt, schedule='static'):
            cnt[r + 1] = _traverse(&cv[0], &fv[0], rt, lp, rp, bmp, bsp,
                                   &ogv[r, 0], &dgv[r, 0], t_min, t_max,
                                   NULL, NULL, NULL, 0)
    offsets = np.cumsum(counts, dtype=np.int64)
    cdef i64 total = offsets[n_rays]
    hit_idx = np.empty(total, dtype=np.int64)
    hit_t0 = np.empty(total, dtype=np.float64)
    hit_t1 = np.empty(total, dtype=np.float64)
    cdef i64[::1] off = offsets, hi = hit_idx
    cdef double[::1] h0 = hit_t0, h1 = hit_t1

    cdef int hc = <int> fl.shape[1] - 1
    cdef int h_count = (degree + 1) * (degree + 1)
    fbuf = np.zeros((n_rays, channels), dtype=np.float64)
    abuf = np.zeros(n_rays, dtype=np.float64)
    cdef double[:, ::1] fb = fbuf
    cdef double[::1] ab = abuf
    ybufs = np.empty((nt, 25), dtype=np.float64)
    cdef double[:, ::1] yv = ybufs

    cdef int tid, m, k, c, h, ri
    cdef i64 i, base
    cdef double sigma, delta, em, a, transmit, acc_a, s
    cdef double dx, dy, dz, wx, wy, wz
    cdef i64* hip
    cdef double* h0p
    cdef double* h1p
    if total:
        hip = &hi[0]; h0p = &h0[0]; h1p = &h1[0]
    else:
        hip = NULL; h0p = NULL; h1p = NULL
    with nogil, parallel(num_threads=nt):
        tid = openmp.omp_get_thread_num()
        for r in prange(n_rays, schedule='static'):
            base = off[r]
            if off[r + 1] == base:
                continue
            m = _traverse(&cv[0], &fv[0], rt, lp, rp, bmp, bsp,
                          &ogv[r, 0], &dgv[r, 0], t_min, t_max,
                          hip + base, h0p + base, h1p + base, 1)
            wx = dwv[r, 0]; wy = dwv[r, 1]; wz = dwv[r, 2]
            transmit = 1.0
            acc_a = 0.0
            for k in range(m):
                i = hip[base + k]
                sigma = fl[i, hc]
                delta = h1p[base + k] - h0p[base + k]
                em = exp(-sigma * delta)
                a = transmit * (1.0 - em)
                if a > 0.0:
                    ri = riv[i]
                    dx = rotv[ri, 0, 0] * wx + rotv[ri, 0, 1] * wy + rotv[ri, 0, 2] * wz
                    dy = rotv[ri, 1, 0] * wx + rotv[ri, 1, 1] * wy + rotv[ri, 1, 2] * wz
                    dz = rotv[ri, 2, 0] * wx + rotv[ri, 2, 1] * wy + rotv[ri, 2, 2] * wz
                    sh_eval(degree, dx, dy, dz, &yv[tid, 0])
                    for c in range(channels):
                        s = 0.0
                        for h in range(h_count):
                            s = s + fl[i, h * channels + c] * yv[tid, h]
                        fb[r, c] += a * s
                    acc_a = acc_a + a
                transmit = transmit * em
            ab[r] = acc_a
    return fbuf, abuf, offsets, hit_idx, hit_t0, hit_t1


# ---------------------------------------------------------------------------
# gradients

def backward_rays(offsets, hit_idx, hit_t0, hit_t1, dirs_w, rot_index, rot_inv,
                  real_t[:, ::1] flut, real_t[:, ::1] dldf, real_t[::1] dlda,
                  int degree, int channels, bint deterministic=True, int nthreads=1):
    cdef i64[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef i64[::1] hi = np.ascontiguousarray(hit_idx, dtype=np.int64)
    cdef double[::1] h0 = np.ascontiguousarray(hit_t0, dtype=np.float64)
    cdef double[::1] h1 = np.ascontiguousarray(hit_t1, dtype=np.float64)
    cdef double[:, ::1] dwv = np.ascontiguousarray(dirs_w, dtype=np.float64)
    cdef int[::1] riv = np.ascontiguousarray(rot_index, dtype=np.int32)
    cdef double[:, :, ::1] rotv = np.ascontiguousarray(rot_inv, dtype=np.float64)

    cdef Py_ssize_t n_rays = off.shape[0] - 1
    cdef int hc = <int> flut.shape[1] - 1
    cdef int h_count = (degree + 1) * (degree + 1)
    if real_t is float:
        grad_np = np.zeros((flut.shape[0], flut.shape[1]), dtype=np.float32)
    else:
        grad_np = np.zeros((flut.shape[0], flut.shape[1]), dtype=np.float64)
    cdef real_t[:, ::1] grad = grad_np

    cdef i64 max_hits = 0
    diffs = np.diff(np.asarray(off))
    if diffs.size:
        max_hits = int(diffs.max())
    if max_hits == 0:
        return grad_np
    cdef int nt = 1 if deterministic else max(1, nthreads)
    scratch = np.empty((nt, max_hits, 5), dtype=np.float64)
    ybufs = np.empty((nt, 25), dtype=np.float64)
    cdef double[:, :, ::1] sc = scratch
    cdef double[:, ::1] yv = ybufs

    cdef Py_ssize_t r
    cdef int tid, k, c, h, ri, nhits
    cdef i64 i, s0
    cdef double sigma, delta, em, a, transmit, s, g, w, suffix
    cdef double dx, dy, dz, wx, wy, wz, dla
    with nogil, parallel(num_threads=nt):
        tid = openmp.omp_get_thread_num()
        for r in prange(n_rays, schedule='static'):
            s0 = off[r]
            nhits = <int> (off[r + 1] - s0)
            if nhits == 0:
                continue
            wx = dwv[r, 0]; wy = dwv[r, 1]; wz = dwv[r, 2]
            dla = <double> dlda[r]
            transmit = 1.0
            for k in range(nhits):
                i = hi[s0 + k]
                sigma = <double> flut[i, hc]
                delta = h1[s0 + k] - h0[s0 + k]
                em = exp(-sigma * delta)
                a = transmit * (1.0 - em)
                ri = riv[i]
                dx = rotv[ri, 0, 0] * wx + rotv[ri, 0, 1] * wy + rotv[ri, 0, 2] * wz
                dy = rotv[ri, 1, 0] * wx + rotv[ri, 1, 1] * wy + rotv[ri, 1, 2] * wz
                dz = rotv[ri, 2, 0] * wx + rotv[ri, 2, 1] * wy + rotv[ri, 2, 2] * wz
                sh_eval(degree, dx, dy, dz, &yv[tid, 0])
                g = dla
                for c in range(channels):
                    s = 0.0
                    for h in range(h_count):
                        s = s + (<double> flut[i, h * channels + c]) * yv[tid, h]
                    g = g + (<double> dldf[r, c]) * s
                    w = a * (<double> dldf[r, c])
                    if deterministic:
                        for h in range(h_count):
                            grad[i, h * channels + c] += <real_t> (w * yv[tid, h])
                    else:
                        for h in range(h_count):
                            if real_t is float:
                                av_atomic_addf(<float*> &grad[i, h * channels + c],
                                               <float> (w * yv[tid, h]))
                            else:
                                av_atomic_addd(<double*> &grad[i, h * channels + c],
                                               w * yv[tid, h])
                sc[tid, k, 0] = a
                sc[tid, k, 1] = g
                sc[tid, k, 2] = transmit
                sc[tid, k, 3] = em
                sc[tid, k, 4] = delta
                transmit = transmit * em
            suffix = 0.0
            for k in range(nhits - 1, -1, -1):
                i = hi[s0 + k]
                w = sc[tid, k, 4] * (sc[tid, k, 1] * sc[tid, k, 2] * sc[tid, k, 3] - suffix)
                if deterministic:
                    grad[i, hc] += <real_t> w
                else:
                    if real_t is float:
                        av_atomic_addf(<float*> &grad[i, hc], <float> w)
                    else:
                        av_atomic_addd(<double*> &grad[i, hc], w)
                suffix = suffix + sc[tid, k, 1] * sc[tid, k, 0]
    return grad_np
