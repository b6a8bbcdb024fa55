"""Pure-Python/numpy fallback for the compiled kernels.

Same results as the Cython build, bit for bit: every reported similarity
is a float64 dot product accumulated one coordinate at a time, in index
order.  Top-k screens candidates with a BLAS product first and only
recomputes the rows that can still make the cut.
"""
import numpy as np

# rows per block, scaled by d so the float64 working copy stays near 2 MiB
_BLOCK_ELEMS = 1 << 18


def _block_rows(d):
    return max(1, _BLOCK_ELEMS // max(1, d))


def row_norms(matrix):
    n, d = matrix.shape
    out = np.empty(n, dtype=np.float64)
    step = _block_rows(d)
    for r0 in range(0, n, step):
        block = matrix[r0:r0 + step].astype(np.float64)
        acc = np.zeros(block.shape[0])
        for j in range(d):
            acc += block[:, j] * block[:, j]
        out[r0:r0 + step] = np.sqrt(acc)
    return out


_U = 2.0 ** -53


def _margin(d):
    # |BLAS dot - sequential dot| <= 2 * gamma_d * sum|m_j q_j| <= ~2 d u * |m| |q|
    # for any summation order; in cosine units, plus division rounding, twice that
    # bound separates the exact top k from everything else.  Generous factor.
    return (8 * d + 16) * _U


def _cosines(dots, norms, qnorms):
    den = norms * qnorms
    safe = np.where(den > 0.0, den, 1.0)
    return np.where(den > 0.0, dots / safe, 0.0)


def _exact_pairs(matrix, norms, queries, qnorms, rows, cols):
    """Sequential float64 cosine for each (row, query) pair, coordinate by coordinate."""
    m = matrix[rows].astype(np.float64)
    q = queries[cols]
    acc = np.zeros(len(rows))
    for j in range(matrix.shape[1]):
        acc += m[:, j] * q[:, j]
    return _cosines(acc, norms[rows], qnorms[cols])


def _topk_chunk(matrix, m64, norms, queries, qnorms, k):
    n = matrix.shape[0]
    nq = queries.shape[0]
    approx = _cosines(m64 @ queries.T, norms[:, None], qnorms[None, :])
    if k < n:
        kth = -np.partition(-approx, k - 1, axis=0)[k - 1]
        rows, cols = np.nonzero(approx >= kth - _margin(matrix.shape[1]))
    else:
        rows, cols = np.nonzero(np.ones((n, nq), dtype=bool))
    sims = _exact_pairs(matrix, norms, queries, qnorms, rows, cols)
    order = np.lexsort((rows, -sims, cols))
    rows, cols, sims = rows[order], cols[order], sims[order]
    starts = np.searchsorted(cols, np.arange(nq))
    take = (starts[:, None] + np.arange(k)[None, :]).ravel()
    return rows[take].reshape(nq, k).astype(np.int64), sims[take].reshape(nq, k)


def cosine_topk(matrix, norms, query, qnorm, k):
    idx, sims = cosine_topk_batch(matrix, norms, query[None, :], np.array([qnorm]), k)
    return idx[0], sims[0]


def cosine_topk_batch(matrix, norms, queries, qnorms, k):
    """Screen with a BLAS product, then recompute the near-threshold rows exactly."""
    n = matrix.shape[0]
    nq = queries.shape[0]
    k = min(k, n)
    out_idx = np.zeros((nq, k), dtype=np.int64)
    out_sim = np.zeros((nq, k), dtype=np.float64)
    if k == 0 or nq == 0:
        return out_idx, out_sim
    m64 = matrix.astype(np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    qnorms = np.asarray(qnorms, dtype=np.float64)
    step = max(1, (_BLOCK_ELEMS * 16) // n)
    for c0 in range(0, nq, step):
        sl = slice(c0, c0 + step)
        out_idx[sl], out_sim[sl] = _topk_chunk(matrix, m64, norms, queries[sl], qnorms[sl], k)
    return out_idx, out_sim


def lcs_length(a, b):
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for x in a:
        diag = 0
        for j, y in enumerate(b):
            tmp = row[j + 1]
            if x == y:
                row[j + 1] = diag + 1
            elif row[j] > row[j + 1]:
                row[j + 1] = row[j]
            diag = tmp
    return row[-1]
