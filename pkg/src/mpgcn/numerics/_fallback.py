"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module; only speed differs.
"""

import numpy as np


def spmm_csr(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, dense.shape[1]), dtype=np.float64)
    if data.size == 0:
        return out
    prod = data[:, None] * dense[indices]
    starts = indptr[:-1]
    nonempty = np.flatnonzero(indptr[1:] > starts)
    out[nonempty] = np.add.reduceat(prod, starts[nonempty], axis=0)
    return out


def spmm_csr_t(indptr, indices, data, dense, n_cols):
    out = np.zeros((n_cols, dense.shape[1]), dtype=np.float64)
    if data.size == 0:
        return out
    rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
    np.add.at(out, indices, data[:, None] * dense[rows])
    return out


def sharing_stop_upper(p_ptr, p_stops, p_counts, s_ptr, s_pax, s_counts):
    n_pax = p_ptr.shape[0] - 1
    rows, cols, vals = [], [], []
    for s in range(s_ptr.shape[0] - 1):
        members = s_pax[s_ptr[s]:s_ptr[s + 1]]
        if members.size < 2:
            continue
        counts = s_counts[s_ptr[s]:s_ptr[s + 1]]
        iu, ju = np.triu_indices(members.size, k=1)
        rows.append(members[iu])
        cols.append(members[ju])
        vals.append(np.minimum(counts[iu], counts[ju]))
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    keys = r * n_pax + c
    uniq, inverse = np.unique(keys, return_inverse=True)
    summed = np.zeros(uniq.size, dtype=np.int64)
    np.add.at(summed, inverse, v)
    return uniq // n_pax, uniq % n_pax, summed
