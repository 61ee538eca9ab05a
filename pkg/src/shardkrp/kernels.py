"""Elementwise-computation kernels.

Both backends implement the same contract with identical floating-point
behavior: per element, the value times the input-mode factor rows in
ascending mode order, accumulated into the output row in element order.
The numba backend releases the GIL so worker threads scale on real
cores; set SHARDKRP_NO_NUMBA=1 to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised via env flag in tests
    if os.environ.get("SHARDKRP_NO_NUMBA"):
        raise ImportError("numba disabled by SHARDKRP_NO_NUMBA")
    import numba
    from numba import njit
    from numba.typed import List as _TypedList

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _ec_accumulate_py(idx, vals, mode, factors, out, base):
    n = idx.shape[1]
    acc = np.repeat(vals.astype(out.dtype)[:, None], out.shape[1], axis=1)
    for w in range(n):
        if w == mode:
            continue
        acc *= factors[w][idx[:, w]]
    np.add.at(out, idx[:, mode] - base, acc)


def _ec_contrib_py(idx, vals, mode, factors):
    rank = factors[0].shape[1]
    acc = np.repeat(vals.astype(factors[0].dtype)[:, None], rank, axis=1)
    for w in range(idx.shape[1]):
        if w == mode:
            continue
        acc *= factors[w][idx[:, w]]
    return acc


def _scatter_add_py(out, rows, contrib, base):
    np.add.at(out, rows - base, contrib)


if HAVE_NUMBA:

    @njit(nogil=True, cache=True)
    def _ec_accumulate_nb(idx, vals, mode, factors, out, base):  # pragma: no cover - jitted
        q, n = idx.shape
        rank = out.shape[1]
        ell = np.empty(rank, dtype=out.dtype)
        for k in range(q):
            v = vals[k]
            for r in range(rank):
                ell[r] = v
            for w in range(n):
                if w == mode:
                    continue
                row = factors[w][idx[k, w]]
                for r in range(rank):
                    ell[r] *= row[r]
            o = idx[k, mode] - base
            for r in range(rank):
                out[o, r] += ell[r]

    @njit(nogil=True, cache=True)
    def _ec_contrib_nb(idx, vals, mode, factors):  # pragma: no cover - jitted
        q, n = idx.shape
        rank = factors[0].shape[1]
        acc = np.empty((q, rank), dtype=factors[0].dtype)
        for k in range(q):
            v = vals[k]
            for r in range(rank):
                acc[k, r] = v
            for w in range(n):
                if w == mode:
                    continue
                row = factors[w][idx[k, w]]
                for r in range(rank):
                    acc[k, r] *= row[r]
        return acc

    @njit(nogil=True, cache=True)
    def _scatter_add_nb(out, rows, contrib, base):  # pragma: no cover - jitted
        rank = out.shape[1]
        for k in range(rows.shape[0]):
            o = rows[k] - base
            for r in range(rank):
                out[o, r] += contrib[k, r]


def pack_factors(arrays: list[np.ndarray]):
    """Bundle factor arrays for kernel calls (typed list under numba)."""
    if HAVE_NUMBA:
        packed = _TypedList()
        for a in arrays:
            packed.append(a)
        return packed
    return list(arrays)


def ec_accumulate(idx, vals, mode, packed_factors, out, base=0):
    """Fused gather-product-scatter over one block of elements."""
    if HAVE_NUMBA:
        _ec_accumulate_nb(idx, vals, mode, packed_factors, out, base)
    else:
        _ec_accumulate_py(idx, vals, mode, packed_factors, out, base)


def ec_contributions(idx, vals, mode, packed_factors):
    """Per-element contribution rows without accumulation."""
    if HAVE_NUMBA:
        return _ec_contrib_nb(idx, vals, mode, packed_factors)
    return _ec_contrib_py(idx, vals, mode, packed_factors)


def scatter_add(out, rows, contrib, base=0):
    """Add contribution rows into `out` in element order."""
    if HAVE_NUMBA:
        _scatter_add_nb(out, rows, contrib, base)
    else:
        _scatter_add_py(out, rows, contrib, base)


def warmup(num_modes: int = 3, dtype=np.float64):
    """Trigger JIT compilation outside timed sections."""
    if not HAVE_NUMBA:
        return
    idx = np.zeros((1, num_modes), dtype=np.int64)
    vals = np.ones(1, dtype=dtype)
    packed = pack_factors([np.ones((1, 1), dtype=dtype) for _ in range(num_modes)])
    out = np.zeros((1, 1), dtype=dtype)
    ec_accumulate(idx, vals, 0, packed, out)
    scatter_add(out, np.zeros(1, dtype=np.int64), ec_contributions(idx, vals, 0, packed))
