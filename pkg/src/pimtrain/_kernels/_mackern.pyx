# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled MAC kernel. Semantics are defined by _macref.mac_layer; the two
implementations must agree bit-for-bit (asserted in the test suite).

Operands are bit-packed: every activation bit plane and weight bit plane of
one group becomes a few uint64 words, and every plane dot product is an
AND + popcount reduction. All scheme conversions are integer combinations
of the resulting b_a x b_w popcount table, so one packing pass serves every
(scheme, DAC width) combination.
"""

import numpy as np

cimport cython
cimport openmp
from cython.parallel cimport prange, threadid
from libc.math cimport floor

cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    static inline long long pt_popcount64(unsigned long long x)
    { return __builtin_popcountll(x); }
    #else
    static inline long long pt_popcount64(unsigned long long x)
    {
        x = x - ((x >> 1) & 0x5555555555555555ULL);
        x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
        x = (x + (x >> 4)) & 0x0f0f0f0f0f0f0f0fULL;
        return (long long)((x * 0x0101010101010101ULL) >> 56);
    }
    #endif
    """
    long long pt_popcount64(unsigned long long x) nogil

SCHEME_NATIVE = 0
SCHEME_DIFFERENTIAL = 1
SCHEME_BIT_SERIAL = 2

cdef int _NATIVE = 0
cdef int _DIFFERENTIAL = 1
cdef int _BIT_SERIAL = 2

DEF MAX_BITS = 16  # popcount table bound; real configs stay <= 10 bits


def _pack_bits(codes, int n_bits, int groups, int n_group):
    """(rows, n_in) nonneg ints -> (rows, groups, n_bits*wpg) uint64,
    bit-plane-major inside each group block."""
    cdef long long[:, ::1] src = np.ascontiguousarray(codes, dtype=np.int64)
    cdef Py_ssize_t rows = src.shape[0]
    cdef int wpg = (n_group + 63) // 64
    out_arr = np.zeros((rows, groups, n_bits * wpg), dtype=np.uint64)
    cdef unsigned long long[:, :, ::1] out = out_arr
    cdef Py_ssize_t r
    cdef int g, i, j, w, bitpos
    cdef long long c
    cdef unsigned long long one = 1
    for r in prange(rows, nogil=True, schedule="static"):
        for g in range(groups):
            for i in range(n_group):
                c = src[r, g * n_group + i]
                w = i >> 6
                bitpos = i & 63
                for j in range(n_bits):
                    if (c >> j) & 1:
                        out[r, g, j * wpg + w] |= one << bitpos
    return out_arr


cdef inline long long _ideal_code(long long num, long long den) nogil:
    if num >= 0:
        return (2 * num + den) // (2 * den)
    return -((-2 * num + den) // (2 * den))


cdef inline double _round_half_away(double v) nogil:
    if v >= 0.0:
        return floor(v + 0.5)
    return -floor(-v + 0.5)


cdef inline long long _noisy_code(double a, const double[:, ::1] curves,
                                  long long cidx, double eps,
                                  long long cmax, bint signed_range,
                                  bint have_curve) nogil:
    cdef double v = a
    cdef long long idx, npts
    cdef double t, y0, y1, c
    if have_curve:
        npts = curves.shape[1]
        idx = <long long>floor(v)
        if idx < 0:
            idx = 0
        elif idx > npts - 2:
            idx = npts - 2
        t = v - idx
        y0 = curves[cidx, idx]
        y1 = curves[cidx, idx + 1]
        v = y0 + t * (y1 - y0)
    v = v + eps
    c = _round_half_away(v)
    if c > <double>cmax:
        return cmax
    if signed_range:
        if c < <double>(-cmax):
            return -cmax
    elif c < 0.0:
        return 0
    return <long long>c


def mac_layer(int scheme, acodes_in, wcodes_in, int n_group, int b_imc,
              int b_w, int b_a, int m, curves=None, curve_idx=None,
              noise=None, bint capture_codes=False, int n_threads=0):
    """Drop-in twin of _macref.mac_layer backed by popcount loops (OpenMP)."""
    acodes_np = np.ascontiguousarray(acodes_in, dtype=np.int64)
    wcodes_np = np.ascontiguousarray(wcodes_in, dtype=np.int64)
    cdef Py_ssize_t rows = acodes_np.shape[0]
    cdef Py_ssize_t n_in = acodes_np.shape[1]
    cdef Py_ssize_t n_out = wcodes_np.shape[0]
    if wcodes_np.shape[1] != n_in:
        raise ValueError("weight/activation input width mismatch")
    if n_in % n_group != 0:
        raise ValueError(f"n_in={n_in} not a multiple of n_group={n_group}")
    if b_a % m != 0:
        raise ValueError("dac bits must divide b_a")
    if b_a > MAX_BITS or b_w > MAX_BITS:
        raise ValueError(f"bit widths beyond {MAX_BITS} unsupported")

    cdef int groups = n_in // n_group
    cdef int planes = b_a // m
    cdef long long delta = 1LL << m
    cdef long long cmax = (1LL << b_imc) - 1
    cdef long long dmask = delta - 1

    cdef int per_group
    if scheme == _NATIVE:
        per_group = planes
    elif scheme == _DIFFERENTIAL:
        per_group = 2 * planes
    elif scheme == _BIT_SERIAL:
        per_group = b_w * planes
    else:
        raise ValueError(f"bad scheme id {scheme}")
    cdef int n_conv = groups * per_group

    # bit-packed operand planes, one contiguous block per (row/out, group)
    cdef unsigned long long[:, :, ::1] abits = _pack_bits(
        acodes_np, b_a, groups, n_group)
    cdef unsigned long long[:, :, ::1] wbits
    cdef unsigned long long[:, :, ::1] wneg
    if scheme == _DIFFERENTIAL:
        wbits = _pack_bits(np.maximum(wcodes_np, 0), b_w, groups, n_group)
        wneg = _pack_bits(np.maximum(-wcodes_np, 0), b_w, groups, n_group)
    else:
        # two's complement lanes reconstruct the signed codes exactly
        wbits = _pack_bits(wcodes_np & ((1 << b_w) - 1), b_w, groups, n_group)
        wneg = wbits[:1]  # unused placeholder

    cdef bint have_curve = curves is not None
    cdef bint have_noise = noise is not None
    cdef bint nonideal = have_curve or have_noise
    cdef double[:, ::1] curves_v
    cdef long long[::1] cidx_v
    cdef double[:, :, ::1] noise_v
    if have_curve:
        if curve_idx is None:
            raise ValueError("curves given without curve assignment")
        curves_v = np.ascontiguousarray(curves, dtype=np.float64)
        cidx_v = np.ascontiguousarray(curve_idx, dtype=np.int64)
    else:
        curves_v = np.zeros((1, 2), dtype=np.float64)
        cidx_v = np.zeros(n_out if n_out else 1, dtype=np.int64)
    if have_noise:
        if (<object>noise).shape != (rows, n_out, n_conv):
            raise ValueError(
                f"noise shape {(<object>noise).shape} != {(rows, n_out, n_conv)}")
        noise_v = np.ascontiguousarray(noise, dtype=np.float64)
    else:
        noise_v = np.zeros((1, 1, 1), dtype=np.float64)

    codes_arr = np.zeros((rows, n_out, n_conv), dtype=np.int32) \
        if capture_codes else None
    cdef int[:, :, ::1] codes_v
    if capture_codes:
        codes_v = codes_arr
    else:
        codes_v = np.zeros((1, 1, 1), dtype=np.int32)

    out_arr = np.zeros((rows, n_out), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef long long den
    cdef double den_out = <double>cmax * <double>((1LL << b_a) - 1)
    if scheme == _BIT_SERIAL:
        den = <long long>n_group * dmask
        den_out *= <double>((1LL << (b_w - 1)) - 1)
    else:
        den = <long long>n_group * dmask * ((1LL << (b_w - 1)) - 1)
    cdef double num_scale = <double>n_group * <double>dmask

    if n_threads > 0:
        openmp.omp_set_num_threads(n_threads)

    cdef int wpg = (n_group + 63) // 64
    cdef Py_ssize_t r, o
    cdef int g, j, k, l, w, conv, tid
    # per-thread popcount tables: C-array locals would be shared across
    # OpenMP threads, so scratch is indexed by thread id instead
    cdef int maxt = openmp.omp_get_max_threads()
    scratch_arr = np.zeros((max(maxt, 1), 2 * MAX_BITS * MAX_BITS),
                           dtype=np.int64)
    cdef long long[:, ::1] scratch = scratch_arr
    cdef long long *S
    cdef long long *SN
    cdef long long acc, dot, T, code, num, sgn
    cdef double a, eps
    cdef const unsigned long long *pa
    cdef const unsigned long long *pw

    for r in prange(rows, nogil=True, schedule="static"):
        tid = threadid()
        S = &scratch[tid, 0]
        SN = &scratch[tid, MAX_BITS * MAX_BITS]
        for o in range(n_out):
            T = 0
            conv = 0
            for g in range(groups):
                # popcount table S[j * MAX_BITS + k] over this group's packed words
                pa = &abits[r, g, 0]
                pw = &wbits[o, g, 0]
                for j in range(b_a):
                    for k in range(b_w):
                        acc = 0
                        for w in range(wpg):
                            acc = acc + pt_popcount64(
                                pa[j * wpg + w] & pw[k * wpg + w])
                        S[j * MAX_BITS + k] = acc
                if scheme == _DIFFERENTIAL:
                    pw = &wneg[o, g, 0]
                    for j in range(b_a):
                        for k in range(b_w):
                            acc = 0
                            for w in range(wpg):
                                acc = acc + pt_popcount64(
                                    pa[j * wpg + w] & pw[k * wpg + w])
                            SN[j * MAX_BITS + k] = acc
                if scheme == _NATIVE:
                    for l in range(planes):
                        dot = 0
                        for k in range(b_w):
                            acc = 0
                            for j in range(m):
                                acc = acc + (1LL << j) * S[(l * m + j) * MAX_BITS + k]
                            if k == b_w - 1:
                                dot = dot - (1LL << k) * acc
                            else:
                                dot = dot + (1LL << k) * acc
                        num = cmax * dot
                        if not nonideal:
                            code = _ideal_code(num, den)
                        else:
                            a = <double>num / <double>den
                            eps = noise_v[r, o, conv] if have_noise else 0.0
                            code = _noisy_code(a, curves_v, cidx_v[o], eps,
                                               cmax, True, have_curve)
                        if capture_codes:
                            codes_v[r, o, conv] = <int>code
                        conv = conv + 1
                        T = T + (1LL << (m * l)) * code
                elif scheme == _DIFFERENTIAL:
                    for l in range(planes):
                        dot = 0
                        for k in range(b_w):
                            acc = 0
                            for j in range(m):
                                acc = acc + (1LL << j) * S[(l * m + j) * MAX_BITS + k]
                            dot = dot + (1LL << k) * acc
                        if not nonideal:
                            code = _ideal_code(cmax * dot, den)
                        else:
                            a = <double>(cmax * dot) / <double>den
                            eps = noise_v[r, o, conv] if have_noise else 0.0
                            code = _noisy_code(a, curves_v, cidx_v[o], eps,
                                               cmax, False, have_curve)
                        if capture_codes:
                            codes_v[r, o, conv] = <int>code
                        conv = conv + 1
                        T = T + (1LL << (m * l)) * code
                        dot = 0
                        for k in range(b_w):
                            acc = 0
                            for j in range(m):
                                acc = acc + (1LL << j) * SN[(l * m + j) * MAX_BITS + k]
                            dot = dot + (1LL << k) * acc
                        if not nonideal:
                            code = _ideal_code(cmax * dot, den)
                        else:
                            a = <double>(cmax * dot) / <double>den
                            eps = noise_v[r, o, conv] if have_noise else 0.0
                            code = _noisy_code(a, curves_v, cidx_v[o], eps,
                                               cmax, False, have_curve)
                        if capture_codes:
                            codes_v[r, o, conv] = <int>code
                        conv = conv + 1
                        T = T - (1LL << (m * l)) * code
                else:  # bit serial
                    for k in range(b_w):
                        sgn = -1 if k == b_w - 1 else 1
                        for l in range(planes):
                            dot = 0
                            for j in range(m):
                                dot = dot + (1LL << j) * S[(l * m + j) * MAX_BITS + k]
                            num = cmax * dot
                            if not nonideal:
                                code = _ideal_code(num, den)
                            else:
                                a = <double>num / <double>den
                                eps = noise_v[r, o, conv] if have_noise else 0.0
                                code = _noisy_code(a, curves_v, cidx_v[o], eps,
                                                   cmax, False, have_curve)
                            if capture_codes:
                                codes_v[r, o, conv] = <int>code
                            conv = conv + 1
                            T = T + sgn * (1LL << k) * (1LL << (m * l)) * code
            out[r, o] = num_scale * <double>T / den_out

    return out_arr, codes_arr
