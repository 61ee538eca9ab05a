"""Per-mode tensor partitioning into shards and inter-shard partitions.

A mode plan is a reordered copy of the tensor, stably sorted by the
output-mode index and cut into shards. Every output index lives in
exactly one shard, so two shards can never update the same output row:
devices need no cross-device coherence. Shards are further cut into
fixed-capacity inter-shard partitions (ISPs), the work quantum handed to
one worker.
"""

from __future__ import annotations

import struct
import time
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import INDEX_DTYPE, SparseTensorCOO

PLAN_MAGIC = b"SKRPPLN\x00"
PLAN_VERSION = 1

STRATEGIES = ("equal-index", "nnz-balanced")
_STRATEGY_TAG = {name: i for i, name in enumerate(STRATEGIES)}
_VALUE_TAG = {np.dtype(np.float64): 8, np.dtype(np.float32): 4}
_TAG_VALUE = {v: k for k, v in _VALUE_TAG.items()}


class PlanError(Exception):
    """Base class for plan cache problems."""


class PlanVersionError(PlanError):
    """Unsupported plan file version or layout."""


class PlanIntegrityError(PlanError):
    """Checksum mismatch: truncated or corrupted plan file."""


@dataclass(frozen=True)
class PartitionConfig:
    devices: int = 1
    workers_per_device: int = 1
    oversubscription: int = 4
    isp_capacity: int = 8192
    strategy: str = "equal-index"

    def __post_init__(self):
        for name in ("devices", "workers_per_device", "oversubscription", "isp_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")


@dataclass
class TensorShard:
    """Contiguous run of plan elements owning one output-index range."""

    mode: int
    shard_id: int
    index_range: tuple[int, int]
    indices: np.ndarray
    values: np.ndarray
    isp_boundaries: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def isp_count(self) -> int:
        return max(len(self.isp_boundaries) - 1, 0)

    def isp_slices(self):
        b = self.isp_boundaries
        for q in range(self.isp_count):
            yield int(b[q]), int(b[q + 1])

    @property
    def byte_size(self) -> int:
        return self.indices.nbytes + self.values.nbytes


@dataclass
class ModePartitionPlan:
    mode: int
    shape: tuple[int, ...]
    shards: list[TensorShard]
    strategy: str
    isp_capacity: int
    build_time: float = 0.0
    name: str = ""
    # plan-level storage; shard arrays are read-only views into these
    _indices: np.ndarray = field(default=None, repr=False)
    _values: np.ndarray = field(default=None, repr=False)

    @property
    def shard_count(self) -> int:
        return len(self.shards)

    @property
    def nnz(self) -> int:
        return sum(s.nnz for s in self.shards)

    @property
    def isp_counts(self) -> list[int]:
        return [s.isp_count for s in self.shards]

    @property
    def total_isps(self) -> int:
        return sum(self.isp_counts)

    @property
    def value_dtype(self):
        return self._values.dtype

    @property
    def byte_size(self) -> int:
        return self._indices.nbytes + self._values.nbytes


def _isp_boundaries(count: int, capacity: int) -> np.ndarray:
    if count == 0:
        return np.zeros(1, dtype=np.int64)
    cuts = np.arange(0, count, capacity, dtype=np.int64)
    return np.append(cuts, count)


def _equal_index_bounds(num_indices: int, k: int) -> np.ndarray:
    return np.array([(j * num_indices) // k for j in range(k + 1)], dtype=np.int64)


def _min_max_shard_load(prefix: np.ndarray, k: int, limit: int) -> bool:
    """Can the index axis be cut into k contiguous ranges of load <= limit?"""
    total = int(prefix[-1])
    if total == 0:
        return True
    pos = 0
    used = 0
    n = len(prefix) - 1
    while pos < n and used < k:
        # furthest cut with this shard's load <= limit
        nxt = int(np.searchsorted(prefix, prefix[pos] + limit, side="right")) - 1
        if nxt == pos:
            return False  # single index exceeds limit
        pos = nxt
        used += 1
    return pos >= n


def _nnz_balanced_bounds(counts: np.ndarray, k: int) -> np.ndarray:
    """Contiguous index cuts minimizing the max shard nonzero load.

    Binary-searches the optimal max load, then places each cut at the
    feasible prefix closest to the ideal cumulative target so shard
    loads stay as even as the optimum allows.
    """
    n = len(counts)
    prefix = np.concatenate([[0], np.cumsum(counts, dtype=np.int64)])
    total = int(prefix[-1])
    lo = int(counts.max()) if n else 0
    hi = total
    while lo < hi:
        mid = (lo + hi) // 2
        if _min_max_shard_load(prefix, k, mid):
            hi = mid
        else:
            lo = mid + 1
    best = lo

    bounds = np.empty(k + 1, dtype=np.int64)
    bounds[0] = 0
    bounds[k] = n
    for j in range(1, k):
        target = j * total / k
        lo_b = bounds[j - 1] + 1
        hi_b = n - (k - j)
        # shard j-1 load <= best, and the tail must stay coverable
        feas_lo = int(np.searchsorted(prefix, total - (k - j) * best, side="left"))
        feas_hi = int(np.searchsorted(prefix, prefix[bounds[j - 1]] + best, side="right")) - 1
        lo_b = max(lo_b, feas_lo)
        hi_b = min(hi_b, feas_hi)
        if lo_b > hi_b:
            lo_b = hi_b = max(bounds[j - 1] + 1, min(hi_b, n - (k - j)))
        window = prefix[lo_b : hi_b + 1]
        pick = lo_b + int(np.argmin(np.abs(window - target)))
        bounds[j] = pick
    return bounds


def build_mode_plan(
    tensor: SparseTensorCOO, mode: int, cfg: PartitionConfig
) -> ModePartitionPlan:
    """Build the reordered, sharded copy of the tensor for one output mode.

    Elements are stably sorted by their mode index (ties keep input
    order), the index axis is cut into devices*oversubscription ranges
    per the strategy, and each shard is cut into ISPs of at most
    isp_capacity elements (all but the last exactly at capacity).
    """
    if not 0 <= mode < tensor.num_modes:
        raise ValueError(f"mode {mode} out of range")
    t0 = time.perf_counter()
    num_indices = tensor.shape[mode]
    k = cfg.devices * cfg.oversubscription
    if k > num_indices:
        warnings.warn(
            f"mode {mode}: requested {k} shards exceeds {num_indices} indices; clamping",
            RuntimeWarning,
            stacklevel=2,
        )
        k = num_indices

    mode_col = tensor.indices[:, mode].astype(np.int64)
    order = np.argsort(mode_col, kind="stable")
    sorted_idx = np.ascontiguousarray(tensor.indices[order])
    sorted_vals = np.ascontiguousarray(tensor.values[order])
    sorted_idx.setflags(write=False)
    sorted_vals.setflags(write=False)
    sorted_col = mode_col[order]

    if cfg.strategy == "equal-index":
        bounds = _equal_index_bounds(num_indices, k)
    else:
        counts = np.bincount(mode_col, minlength=num_indices)
        bounds = _nnz_balanced_bounds(counts, k)

    offsets = np.searchsorted(sorted_col, bounds, side="left")
    shards = []
    for j in range(k):
        a, b = int(offsets[j]), int(offsets[j + 1])
        shards.append(
            TensorShard(
                mode=mode,
                shard_id=j,
                index_range=(int(bounds[j]), int(bounds[j + 1])),
                indices=sorted_idx[a:b],
                values=sorted_vals[a:b],
                isp_boundaries=_isp_boundaries(b - a, cfg.isp_capacity),
            )
        )
    return ModePartitionPlan(
        mode=mode,
        shape=tensor.shape,
        shards=shards,
        strategy=cfg.strategy,
        isp_capacity=cfg.isp_capacity,
        build_time=time.perf_counter() - t0,
        name=tensor.name,
        _indices=sorted_idx,
        _values=sorted_vals,
    )


def build_all_plans(tensor: SparseTensorCOO, cfg: PartitionConfig) -> list[ModePartitionPlan]:
    """One independent plan per mode; per-mode build time is recorded."""
    return [build_mode_plan(tensor, d, cfg) for d in range(tensor.num_modes)]


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_plan(plan: ModePartitionPlan, path):
    """Write a plan to the versioned binary cache format."""
    body = bytearray()
    body += struct.pack("<I", PLAN_VERSION)
    body += struct.pack("<B", _VALUE_TAG[np.dtype(plan.value_dtype)])
    body += struct.pack("<B", _STRATEGY_TAG[plan.strategy])
    body += struct.pack("<I", plan.mode)
    body += struct.pack("<I", len(plan.shape))
    body += struct.pack(f"<{len(plan.shape)}Q", *plan.shape)
    body += struct.pack("<Q", plan.nnz)
    body += struct.pack("<Q", plan.isp_capacity)
    body += struct.pack("<d", plan.build_time)
    body += struct.pack("<I", plan.shard_count)
    body += _pack_str(plan.name)
    for s in plan.shards:
        body += struct.pack("<QQQ", s.index_range[0], s.index_range[1], s.nnz)
    body += plan._indices.tobytes()
    body += plan._values.tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(PLAN_MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_plan(path, value_dtype=None) -> ModePartitionPlan:
    """Read a plan cache file, validating version and checksum.

    If `value_dtype` is given, a file written with a different value
    type is rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(PLAN_MAGIC) + 4 or blob[: len(PLAN_MAGIC)] != PLAN_MAGIC:
        raise PlanVersionError(f"{path}: not a plan cache file")
    body, (crc_stored,) = blob[len(PLAN_MAGIC) : -4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc_stored:
        raise PlanIntegrityError(f"{path}: checksum mismatch (truncated or corrupted)")

    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, body, off)
        off += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != PLAN_VERSION:
        raise PlanVersionError(f"{path}: plan version {version}, expected {PLAN_VERSION}")
    (vtag,) = take("<B")
    if vtag not in _TAG_VALUE:
        raise PlanVersionError(f"{path}: unknown value-type tag {vtag}")
    dtype = _TAG_VALUE[vtag]
    if value_dtype is not None and np.dtype(value_dtype) != dtype:
        raise PlanVersionError(
            f"{path}: plan stores {dtype} values, expected {np.dtype(value_dtype)}"
        )
    (stag,) = take("<B")
    strategy = STRATEGIES[stag]
    (mode,) = take("<I")
    (nmodes,) = take("<I")
    shape = take(f"<{nmodes}Q")
    (nnz,) = take("<Q")
    (capacity,) = take("<Q")
    (build_time,) = take("<d")
    (shard_count,) = take("<I")
    (name_len,) = take("<I")
    name = body[off : off + name_len].decode("utf-8")
    off += name_len
    ranges = []
    counts = []
    for _ in range(shard_count):
        lo, hi, cnt = take("<QQQ")
        ranges.append((int(lo), int(hi)))
        counts.append(int(cnt))

    idx_bytes = nnz * nmodes * 8
    indices = np.frombuffer(body, dtype=INDEX_DTYPE, count=nnz * nmodes, offset=off).reshape(
        int(nnz), nmodes
    )
    off += idx_bytes
    values = np.frombuffer(body, dtype=dtype, count=int(nnz), offset=off)

    shards = []
    a = 0
    for j, ((lo, hi), cnt) in enumerate(zip(ranges, counts)):
        b = a + cnt
        shards.append(
            TensorShard(
                mode=int(mode),
                shard_id=j,
                index_range=(lo, hi),
                indices=indices[a:b],
                values=values[a:b],
                isp_boundaries=_isp_boundaries(cnt, int(capacity)),
            )
        )
        a = b
    return ModePartitionPlan(
        mode=int(mode),
        shape=tuple(int(s) for s in shape),
        shards=shards,
        strategy=strategy,
        isp_capacity=int(capacity),
        build_time=float(build_time),
        name=name,
        _indices=indices,
        _values=values,
    )
