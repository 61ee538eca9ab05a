"""Synthetic sparse tensor generators.

Uniform index draws model well-balanced tensors; Zipf draws concentrate
nonzeros on head indices the way user/item popularity does, which is the
regime that stresses partition load balance.
"""

from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_VALUE_DTYPE, LoadStats, SparseTensorCOO

_MAX_ROUNDS = 200


def _zipf_cdfs(shape: tuple[int, ...], exponent: float) -> list[np.ndarray]:
    cdfs = []
    for size in shape:
        weights = np.arange(1, size + 1, dtype=np.float64) ** (-exponent)
        cdfs.append(np.cumsum(weights) / weights.sum())
    return cdfs


def synth_tensor(
    shape: tuple[int, ...],
    nnz: int,
    distribution: str = "uniform",
    zipf_exponent: float = 1.2,
    value_dist: str = "uniform",
    seed: int = 0,
    value_dtype=DEFAULT_VALUE_DTYPE,
    name: str = "",
) -> SparseTensorCOO:
    """Generate a tensor with `nnz` unique coordinates, deterministically.

    Duplicate draws are discarded and regenerated until `nnz` unique
    tuples exist (first-occurrence order is kept, so the index
    distribution is unbiased). distribution: "uniform" or "zipf";
    value_dist: "uniform" (0,1) or "normal".
    """
    shape = tuple(int(s) for s in shape)
    nnz = int(nnz)
    if nnz < 0:
        raise ValueError("nnz must be >= 0")
    capacity = 1
    for s in shape:
        capacity *= int(s)
    if nnz > capacity:
        raise ValueError(f"nnz={nnz} infeasible for shape {shape} (capacity {capacity})")
    if distribution not in ("uniform", "zipf"):
        raise ValueError(f"unknown distribution {distribution!r}")
    if value_dist not in ("uniform", "normal"):
        raise ValueError(f"unknown value_dist {value_dist!r}")

    rng = np.random.default_rng(seed)
    cdfs = _zipf_cdfs(shape, zipf_exponent) if distribution == "zipf" else None

    def draw(n: int) -> np.ndarray:
        cols = []
        for w, size in enumerate(shape):
            if cdfs is None:
                cols.append(rng.integers(0, size, n, dtype=np.int64))
            else:
                cols.append(np.searchsorted(cdfs[w], rng.random(n)).astype(np.int64))
        return np.stack(cols, axis=1)

    collected = np.empty((0, len(shape)), dtype=np.int64)
    duplicates = 0
    for _ in range(_MAX_ROUNDS):
        if len(collected) >= nnz:
            break
        need = nnz - len(collected)
        batch = draw(max(need + need // 4 + 16, 64))
        pool = np.concatenate([collected, batch], axis=0)
        _, first = np.unique(pool, axis=0, return_index=True)
        duplicates += len(pool) - len(first)
        collected = pool[np.sort(first)]
    else:
        raise ValueError(
            f"could not collect {nnz} unique coordinates in {_MAX_ROUNDS} rounds; "
            "distribution too concentrated for requested nnz"
        )
    indices = collected[:nnz]

    if value_dist == "uniform":
        values = rng.random(nnz).astype(value_dtype)
    else:
        values = rng.standard_normal(nnz).astype(value_dtype)

    tensor = SparseTensorCOO(shape, indices, values, name=name or f"synth-{distribution}-{seed}")
    tensor.stats = LoadStats(nnz=nnz, zero_values=int(np.count_nonzero(values == 0)), duplicates=duplicates)
    return tensor
