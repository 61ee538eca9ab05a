"""Reference computations used as ground truth for the parallel engine.

The MTTKRP oracle here is deliberately a plain sequential element loop,
optimized for clarity: it fixes the summation order that the engine's
deterministic mode must reproduce.
"""

from __future__ import annotations

import numpy as np

from .tensor import FactorMatrix, SparseTensorCOO


def khatri_rao(m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; rows sweep m2's rows fastest."""
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.ndim != 2 or m2.ndim != 2:
        raise ValueError("khatri_rao expects 2-D matrices")
    if m1.shape[1] != m2.shape[1]:
        raise ValueError(f"column count mismatch: {m1.shape[1]} vs {m2.shape[1]}")
    j, r = m1.shape
    k, _ = m2.shape
    return (m1[:, None, :] * m2[None, :, :]).reshape(j * k, r)


def _factor_arrays(factors) -> list[np.ndarray]:
    return [f.data if isinstance(f, FactorMatrix) else np.asarray(f) for f in factors]


def dense_mttkrp_oracle(
    tensor: SparseTensorCOO, factors: list[FactorMatrix], mode: int
) -> np.ndarray:
    """Ground-truth MTTKRP for one output mode.

    out[i, r] = sum over nonzeros with c_mode == i of
                val * prod over other modes w of factors[w][c_w, r]

    Elements are visited in storage order; per-element the input-mode
    rows multiply in ascending mode order. Always accumulates in float64.
    """
    if not 0 <= mode < tensor.num_modes:
        raise ValueError(f"mode {mode} out of range for {tensor.num_modes}-mode tensor")
    mats = _factor_arrays(factors)
    if len(mats) != tensor.num_modes:
        raise ValueError("need one factor matrix per mode")
    ranks = {m.shape[1] for m in mats}
    if len(ranks) != 1:
        raise ValueError(f"factor ranks differ: {sorted(ranks)}")
    for w, m in enumerate(mats):
        if m.shape[0] != tensor.shape[w]:
            raise ValueError(
                f"factor for mode {w} has {m.shape[0]} rows, tensor needs {tensor.shape[w]}"
            )
    rank = ranks.pop()

    out = np.zeros((tensor.shape[mode], rank), dtype=np.float64)
    idx = tensor.indices
    vals = tensor.values
    for k in range(tensor.nnz):
        prod = float(vals[k]) * np.ones(rank)
        for w in range(tensor.num_modes):
            if w == mode:
                continue
            prod = prod * mats[w][int(idx[k, w])]
        out[int(idx[k, mode])] += prod
    return out
