# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CSR sparse-dense products and sharing-stop pair weights."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def spmm_csr(const cnp.int64_t[::1] indptr,
             const cnp.int64_t[::1] indices,
             const double[::1] data,
             const double[:, ::1] dense):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t width = dense.shape[1]
    out_arr = np.zeros((n_rows, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, c
    cdef double v
    with nogil:
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(width):
                    out[i, c] += v * dense[j, c]
    return out_arr


def spmm_csr_t(const cnp.int64_t[::1] indptr,
               const cnp.int64_t[::1] indices,
               const double[::1] data,
               const double[:, ::1] dense,
               Py_ssize_t n_cols):
    """Transposed product ``S.T @ dense`` without materialising ``S.T``."""
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t width = dense.shape[1]
    out_arr = np.zeros((n_cols, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, j, c
    cdef double v
    with nogil:
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(width):
                    out[j, c] += v * dense[i, c]
    return out_arr


def sharing_stop_upper(const cnp.int64_t[::1] p_ptr,
                       const cnp.int64_t[::1] p_stops,
                       const cnp.int64_t[::1] p_counts,
                       const cnp.int64_t[::1] s_ptr,
                       const cnp.int64_t[::1] s_pax,
                       const cnp.int64_t[::1] s_counts):
    """Upper-triangle (i < j) weights sum_s min(count_i(s), count_j(s)).

    Passenger-major and stop-major incidence lists must both be sorted.
    Returns row-major sorted COO arrays.
    """
    cdef Py_ssize_t n_pax = p_ptr.shape[0] - 1
    acc_arr = np.zeros(n_pax, dtype=np.int64)
    mark_arr = np.zeros(n_pax, dtype=np.uint8)
    touched_arr = np.empty(n_pax, dtype=np.int64)
    cdef cnp.int64_t[::1] acc = acc_arr
    cdef cnp.uint8_t[::1] mark = mark_arr
    cdef cnp.int64_t[::1] touched = touched_arr

    rows = []
    cols = []
    vals = []
    cdef Py_ssize_t i, a, s, b, j, n_touched, t
    cdef cnp.int64_t ci, cj
    for i in range(n_pax):
        n_touched = 0
        for a in range(p_ptr[i], p_ptr[i + 1]):
            s = p_stops[a]
            ci = p_counts[a]
            for b in range(s_ptr[s], s_ptr[s + 1]):
                j = s_pax[b]
                if j <= i:
                    continue
                cj = s_counts[b]
                if mark[j] == 0:
                    mark[j] = 1
                    touched[n_touched] = j
                    n_touched += 1
                acc[j] += ci if ci < cj else cj
        if n_touched == 0:
            continue
        idx = np.sort(touched_arr[:n_touched])
        rows.append(np.full(n_touched, i, dtype=np.int64))
        cols.append(idx)
        vals.append(acc_arr[idx].copy())
        for t in range(n_touched):
            j = touched[t]
            acc[j] = 0
            mark[j] = 0
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
