"""Sparse COO tensor core: types, .tns text I/O, and load statistics.

Indices are 0-based in memory and 1-based in `.tns` files (FROSTT
convention). Index storage is 64-bit unsigned throughout so that index
width never limits tensor scale, even though desk-scale tests are small.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

INDEX_DTYPE = np.uint64
DEFAULT_VALUE_DTYPE = np.float64


class TnsFormatError(ValueError):
    """Raised for malformed `.tns` input."""


@dataclass(frozen=True)
class NonzeroElement:
    """One stored tensor element: an index tuple and its value."""

    indices: tuple[int, ...]
    value: float


@dataclass
class LoadStats:
    """Bookkeeping from a parse or synthesis pass."""

    nnz: int = 0
    zero_values: int = 0
    duplicates: int = 0
    coalesced: bool = False


@dataclass
class SparseTensorCOO:
    """N-mode sparse tensor in coordinate format.

    indices: (nnz, N) uint64 array, each row one element's coordinates.
    values:  (nnz,) float array (float64 default, float32 opt-in).
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray
    name: str = ""
    stats: LoadStats | None = field(default=None, compare=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) < 3:
            raise ValueError(f"tensor must have at least 3 modes, got {len(self.shape)}")
        if any(s <= 0 for s in self.shape):
            raise ValueError(f"all mode sizes must be positive, got {self.shape}")
        idx = np.asarray(self.indices)
        if idx.ndim != 2 or (idx.size and idx.shape[1] != len(self.shape)):
            raise ValueError("indices must be a (nnz, num_modes) array")
        if idx.size and np.issubdtype(idx.dtype, np.signedinteger) and idx.min() < 0:
            raise ValueError("negative index")
        self.indices = np.ascontiguousarray(idx.reshape(-1, len(self.shape)), dtype=INDEX_DTYPE)
        self.values = np.ascontiguousarray(self.values).reshape(-1)
        if self.values.dtype not in (np.float64, np.float32):
            self.values = self.values.astype(DEFAULT_VALUE_DTYPE)
        if len(self.values) != len(self.indices):
            raise ValueError("indices and values length mismatch")
        bound = np.asarray(self.shape, dtype=INDEX_DTYPE)
        if self.indices.size and (self.indices >= bound).any():
            bad = int(np.argwhere((self.indices >= bound).any(axis=1))[0][0])
            raise ValueError(
                f"element {bad} index {tuple(self.indices[bad])} out of bounds for shape {self.shape}"
            )

    @property
    def num_modes(self) -> int:
        return len(self.shape)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def density(self) -> float:
        return self.nnz / float(np.prod([float(s) for s in self.shape]))

    def element(self, i: int) -> NonzeroElement:
        return NonzeroElement(tuple(int(c) for c in self.indices[i]), float(self.values[i]))

    def elements(self):
        for i in range(self.nnz):
            yield self.element(i)

    def scaled(self, alpha: float) -> "SparseTensorCOO":
        return SparseTensorCOO(self.shape, self.indices.copy(), self.values * alpha, name=self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensorCOO):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass
class FactorMatrix:
    """Dense factor matrix for one mode: rows x rank, row-major.

    lambdas optionally carries per-column weights folded out during
    normalization.
    """

    mode: int
    data: np.ndarray
    lambdas: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("factor matrix must be 2-D")
        if self.lambdas is not None:
            self.lambdas = np.asarray(self.lambdas, dtype=np.float64).reshape(-1)
            if len(self.lambdas) != self.rank:
                raise ValueError("lambdas length must equal rank")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def rank(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "FactorMatrix":
        return FactorMatrix(
            self.mode, self.data.copy(), None if self.lambdas is None else self.lambdas.copy()
        )

    def check_finite(self):
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite entries in factor matrix of mode {self.mode}")


def random_factors(
    shape: tuple[int, ...], rank: int, seed: int = 0
) -> list[FactorMatrix]:
    """Seeded uniform(0,1) factor matrices, one per mode."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    return [FactorMatrix(d, rng.random((s, rank))) for d, s in enumerate(shape)]


def _coalesce_rows(indices: np.ndarray, values: np.ndarray):
    """Sum values of duplicate coordinate rows, first-occurrence order."""
    uniq, first, inverse = np.unique(indices, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    # remap so output rows appear in first-occurrence order
    rankmap = np.empty(len(order), dtype=np.int64)
    rankmap[order] = np.arange(len(order))
    summed = np.zeros(len(uniq), dtype=values.dtype)
    np.add.at(summed, rankmap[inverse.reshape(-1)], values)
    return uniq[order], summed, len(values) - len(uniq)


def parse_tns(
    source,
    coalesce_duplicates: bool = False,
    shape: tuple[int, ...] | None = None,
    value_dtype=DEFAULT_VALUE_DTYPE,
    name: str = "",
) -> SparseTensorCOO:
    """Parse FROSTT-style `.tns` text into a tensor.

    Each data line holds N 1-based indices followed by one value; blank
    lines and lines starting with '#' are skipped. A `# shape: I0 I1 ...`
    comment is honored when no explicit `shape` is given. The returned
    tensor carries a LoadStats in `.stats`.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r") as fh:
            return parse_tns(fh, coalesce_duplicates, shape, value_dtype, name or str(source))

    header_shape = None
    rows: list[list[str]] = []
    ncols = None
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("shape:"):
                header_shape = tuple(int(t) for t in body[len("shape:"):].split())
            continue
        toks = line.split()
        if ncols is None:
            ncols = len(toks)
            if ncols < 4:
                raise TnsFormatError(
                    f"line {lineno}: expected at least 3 index columns and a value, got {ncols} columns"
                )
        elif len(toks) != ncols:
            raise TnsFormatError(
                f"line {lineno}: inconsistent column count ({len(toks)} vs {ncols})"
            )
        rows.append(toks)

    if not rows:
        raise TnsFormatError("no data lines")

    nmodes = ncols - 1
    try:
        idx = np.array([[int(t) for t in r[:nmodes]] for r in rows], dtype=np.int64)
        vals = np.array([float(r[nmodes]) for r in rows], dtype=value_dtype)
    except ValueError as exc:
        raise TnsFormatError(f"non-numeric token: {exc}") from None
    if (idx <= 0).any():
        bad = int(np.argwhere((idx <= 0).any(axis=1))[0][0])
        raise TnsFormatError(f"data line {bad + 1}: index must be >= 1 (1-based format)")
    idx -= 1

    stats = LoadStats(nnz=len(vals), zero_values=int(np.count_nonzero(vals == 0)))
    uniq = np.unique(idx, axis=0)
    ndup = len(idx) - len(uniq)
    if ndup:
        if not coalesce_duplicates:
            raise TnsFormatError(
                f"{ndup} duplicate coordinate tuple(s); pass coalesce_duplicates=True to sum them"
            )
        idx, vals, ndup = _coalesce_rows(idx, vals)
        stats.coalesced = True
    stats.duplicates = ndup
    stats.nnz = len(vals)

    if shape is None:
        shape = header_shape if header_shape is not None else tuple(int(m) + 1 for m in idx.max(axis=0))
    tensor = SparseTensorCOO(shape, idx, vals, name=name)
    tensor.stats = stats
    return tensor


def write_tns(tensor: SparseTensorCOO, dest, shape_header: bool = False):
    """Write a tensor as `.tns` text (1-based indices, %.17g values)."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w") as fh:
            write_tns(tensor, fh, shape_header)
        return
    fh: io.TextIOBase = dest
    if tensor.name:
        fh.write(f"# {tensor.name}\n")
    if shape_header:
        fh.write("# shape: " + " ".join(str(s) for s in tensor.shape) + "\n")
    one_based = tensor.indices.astype(np.int64) + 1
    for row, val in zip(one_based, tensor.values):
        fh.write(" ".join(str(c) for c in row) + f" {val:.17g}\n")
