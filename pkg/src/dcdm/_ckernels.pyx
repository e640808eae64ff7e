# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled counterparts of ``dcdm._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def masked_softmax(const double[:, :, :, ::1] scores, allow=None):
    cdef Py_ssize_t n = scores.shape[0], nh = scores.shape[1]
    cdef Py_ssize_t rows = scores.shape[2], cols = scores.shape[3]
    out_arr = np.zeros((n, nh, rows, cols), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef const cnp.uint8_t[:, :, ::1] a
    cdef bint masked = allow is not None
    if masked:
        a = np.ascontiguousarray(allow, dtype=np.uint8)
    cdef Py_ssize_t b, h, i, j
    cdef double mx, z, v
    cdef bint any_allowed
    for b in range(n):
        for h in range(nh):
            for i in range(rows):
                any_allowed = False
                mx = 0.0
                for j in range(cols):
                    if masked and not a[b, i, j]:
                        continue
                    v = scores[b, h, i, j]
                    if not any_allowed or v > mx:
                        mx = v
                        any_allowed = True
                if not any_allowed:
                    continue
                z = 0.0
                for j in range(cols):
                    if masked and not a[b, i, j]:
                        continue
                    v = exp(scores[b, h, i, j] - mx)
                    out[b, h, i, j] = v
                    z += v
                z = 1.0 / z
                for j in range(cols):
                    out[b, h, i, j] *= z
    return out_arr


def masked_softmax_grad(const double[:, :, :, ::1] probs, const double[:, :, :, ::1] grad):
    cdef Py_ssize_t n = probs.shape[0], nh = probs.shape[1]
    cdef Py_ssize_t rows = probs.shape[2], cols = probs.shape[3]
    out_arr = np.empty((n, nh, rows, cols), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, h, i, j
    cdef double dot
    for b in range(n):
        for h in range(nh):
            for i in range(rows):
                dot = 0.0
                for j in range(cols):
                    dot += probs[b, h, i, j] * grad[b, h, i, j]
                for j in range(cols):
                    out[b, h, i, j] = probs[b, h, i, j] * (grad[b, h, i, j] - dot)
    return out_arr


def noise_masks(nu_in):
    cdef const cnp.uint8_t[:, ::1] nu = np.ascontiguousarray(nu_in, dtype=np.uint8)
    cdef Py_ssize_t n = nu.shape[0], length = nu.shape[1]
    out_arr = np.zeros((n, length, length), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j
    for b in range(n):
        for i in range(length):
            for j in range(length):
                if nu[b, j] == 0:
                    out[b, i, j] = 1
            if nu[b, i]:
                out[b, i, i] = 1
    return out_arr.view(np.bool_)


def chunk_causal_masks(c_in):
    cdef const cnp.int64_t[:, ::1] c = np.ascontiguousarray(c_in, dtype=np.int64)
    cdef Py_ssize_t n = c.shape[0], length = c.shape[1]
    out_arr = np.zeros((n, length, length), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j
    for b in range(n):
        for i in range(length):
            for j in range(length):
                if c[b, j] <= c[b, i]:
                    out[b, i, j] = 1
    return out_arr.view(np.bool_)


def training_masks(c_in, nu_in):
    cdef const cnp.int64_t[:, ::1] c = np.ascontiguousarray(c_in, dtype=np.int64)
    cdef const cnp.uint8_t[:, ::1] nu = np.ascontiguousarray(nu_in, dtype=np.uint8)
    cdef Py_ssize_t n = c.shape[0], length = c.shape[1]
    out_arr = np.zeros((n, 2 * length, 2 * length), dtype=np.uint8)
    cdef cnp.uint8_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j
    for b in range(n):
        for i in range(length):
            for j in range(length):
                # clause 1: noisy -> noisy, same chunk
                if c[b, i] == c[b, j]:
                    out[b, i, j] = 1
                # clause 2: noisy -> clean, strictly earlier chunk
                if c[b, i] > c[b, j]:
                    out[b, i, length + j] = 1
                # clause 3 intersected with the noise mask
                if c[b, i] >= c[b, j] and (nu[b, j] == 0 or (nu[b, i] and i == j)):
                    out[b, length + i, length + j] = 1
    return out_arr.view(np.bool_)


def reach(first_in, rest_in, Py_ssize_t source):
    cdef const cnp.uint8_t[:, ::1] first = np.ascontiguousarray(first_in, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] rest = np.ascontiguousarray(rest_in, dtype=np.uint8)
    cdef Py_ssize_t size = first.shape[0]
    parent_arr = np.full(size, -1, dtype=np.int64)
    via_arr = np.zeros(size, dtype=np.uint8)
    queue_arr = np.empty(size, dtype=np.int64)
    cdef cnp.int64_t[::1] parent = parent_arr
    cdef cnp.uint8_t[::1] via = via_arr
    cdef cnp.int64_t[::1] queue = queue_arr
    cdef Py_ssize_t head = 0, tail = 0, q, k
    parent[source] = source
    queue[tail] = source
    tail += 1
    for q in range(size):
        if first[q, source] and parent[q] == -1:
            parent[q] = source
            via[q] = 1
            queue[tail] = q
            tail += 1
    while head < tail:
        k = queue[head]
        head += 1
        for q in range(size):
            if rest[q, k] and parent[q] == -1:
                parent[q] = k
                queue[tail] = q
                tail += 1
    return parent_arr, via_arr
