# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: causal row softmax, token edit distance, LSB-first bit packing."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def causal_softmax_forward(const double[:, :, ::1] scores):
    """Softmax over the last axis, restricted to columns ``<= row``.

    Entries above the diagonal are exactly zero in the result.
    """
    cdef Py_ssize_t n = scores.shape[0], l = scores.shape[1], k = scores.shape[2]
    out_arr = np.zeros((n, l, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, lim
    cdef double mx, total, e
    with nogil:
        for b in range(n):
            for i in range(l):
                lim = i + 1 if i < k else k
                mx = scores[b, i, 0]
                for j in range(1, lim):
                    if scores[b, i, j] > mx:
                        mx = scores[b, i, j]
                total = 0.0
                for j in range(lim):
                    e = exp(scores[b, i, j] - mx)
                    out[b, i, j] = e
                    total += e
                for j in range(lim):
                    out[b, i, j] = out[b, i, j] / total
    return out_arr


def causal_softmax_backward(const double[:, :, ::1] probs, const double[:, :, ::1] grad_out):
    cdef Py_ssize_t n = probs.shape[0], l = probs.shape[1], k = probs.shape[2]
    out_arr = np.zeros((n, l, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, lim
    cdef double dot
    with nogil:
        for b in range(n):
            for i in range(l):
                lim = i + 1 if i < k else k
                dot = 0.0
                for j in range(lim):
                    dot += probs[b, i, j] * grad_out[b, i, j]
                for j in range(lim):
                    out[b, i, j] = probs[b, i, j] * (grad_out[b, i, j] - dot)
    return out_arr


def edit_distance(hyp, ref):
    """Unit-cost Levenshtein distance between two integer sequences."""
    cdef cnp.int64_t[::1] a = np.ascontiguousarray(hyp, dtype=np.int64)
    cdef cnp.int64_t[::1] b = np.ascontiguousarray(ref, dtype=np.int64)
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0], i, j
    if m == 0:
        return int(n)
    if n == 0:
        return int(m)
    prev_arr = np.arange(n + 1, dtype=np.int64)
    cur_arr = np.empty(n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    cdef cnp.int64_t best, cand
    with nogil:
        for i in range(1, m + 1):
            cur[0] = i
            for j in range(1, n + 1):
                best = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
                cand = prev[j] + 1
                if cand < best:
                    best = cand
                cand = cur[j - 1] + 1
                if cand < best:
                    best = cand
                cur[j] = best
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[n])


def pack_bits(bits):
    """Pack a flat 0/1 sequence into bytes, least-significant bit first."""
    cdef cnp.uint8_t[::1] src = np.ascontiguousarray(bits, dtype=np.uint8)
    cdef Py_ssize_t count = src.shape[0], i
    out_arr = np.zeros((count + 7) // 8, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    for i in range(count):
        if src[i]:
            out[i >> 3] |= <cnp.uint8_t>(1 << (i & 7))
    return out_arr.tobytes()


def unpack_bits(payload, Py_ssize_t count):
    """Inverse of ``pack_bits``; returns a uint8 array of ``count`` bits."""
    cdef const cnp.uint8_t[::1] src = np.frombuffer(payload, dtype=np.uint8)
    out_arr = np.zeros(count, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(count):
        out[i] = (src[i >> 3] >> (i & 7)) & 1
    return out_arr
