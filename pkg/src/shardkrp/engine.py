"""Multi-device MTTKRP execution.

Devices are simulated as thread-backed worker groups: each device runs
one controller thread plus a pool of `workers_per_device` worker
threads. Devices claim whole shards (dynamically from a shared queue,
or statically round-robin); workers claim a shard's inter-shard
partitions; a worker consumes its partition in quanta of
`column_width` elements.

Accumulation disciplines:

* deterministic-reduce (default): each partition accumulates into a
  private buffer in element order; buffers merge into the device output
  in partition order. The reduction tree depends only on the plan, so
  results are bit-identical across runs, worker counts, device counts,
  and scheduling.
* atomic: workers add straight into the shared device output under the
  device's accumulation lock, so the merge order follows completion
  order and results are reproducible only to rounding.

Per-device compute time is wall time around shard execution only;
staging and all-gather are timed separately.
"""

from __future__ import annotations

import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .collective import FactorPartitionSet, TransferLedger, record_staging, ring_all_gather
from .metrics import ModeMetrics, RunMetrics
from .partition import ModePartitionPlan, TensorShard
from .tensor import FactorMatrix, NonzeroElement

ACCUMULATION_MODES = ("deterministic-reduce", "atomic")
SCHEDULING_MODES = ("dynamic", "static")


@dataclass(frozen=True)
class PlatformConfig:
    devices: int = 1
    workers_per_device: int = 1
    column_width: int = 32
    rank: int = 32
    accumulation: str = "deterministic-reduce"
    scheduling: str = "dynamic"

    def __post_init__(self):
        if self.devices < 1 or self.workers_per_device < 1:
            raise ValueError("devices and workers_per_device must be >= 1")
        if self.column_width < 1 or self.rank < 1:
            raise ValueError("column_width and rank must be >= 1")
        if self.accumulation not in ACCUMULATION_MODES:
            raise ValueError(f"accumulation must be one of {ACCUMULATION_MODES}")
        if self.scheduling not in SCHEDULING_MODES:
            raise ValueError(f"scheduling must be one of {SCHEDULING_MODES}")


@dataclass
class DeviceState:
    device_id: int
    factors: list[np.ndarray]
    output: np.ndarray | None = None
    compute_seconds: float = 0.0
    staging_seconds: float = 0.0
    shards_processed: int = 0
    nnz_processed: int = 0
    owned_ranges: list[tuple[int, int]] = field(default_factory=list)
    write_rows: set[int] | None = None

    def reset_for_mode(self, rows: int, rank: int, dtype=np.float64, collect_write_log=False):
        self.output = np.zeros((rows, rank), dtype=dtype)
        self.owned_ranges = []
        self.write_rows = set() if collect_write_log else None


def make_devices(factors: list[FactorMatrix], cfg: PlatformConfig) -> list[DeviceState]:
    """One DeviceState per device, each with its own factor copies."""
    return [
        DeviceState(j, [np.ascontiguousarray(f.data.copy()) for f in factors])
        for j in range(cfg.devices)
    ]


def elementwise_compute(x: NonzeroElement, factors, mode: int):
    """Single-element update: (output row, length-R contribution)."""
    mats = [f.data if isinstance(f, FactorMatrix) else np.asarray(f) for f in factors]
    rank = mats[0].shape[1]
    contribution = x.value * np.ones(rank)
    for w in range(len(mats)):
        if w == mode:
            continue
        contribution = contribution * mats[w][x.indices[w]]
    return x.indices[mode], contribution


def _stage(shard: TensorShard):
    """Copy a shard into device-local arrays (the modeled transfer)."""
    return shard.indices.view(np.int64).copy(), shard.values.copy()


def _run_isp_reduce(idx, vals, a, b, mode, packed, rank, column_width, collect):
    lo = int(idx[a, mode])
    hi = int(idx[b - 1, mode])
    buf = np.zeros((hi - lo + 1, rank), dtype=np.float64)
    for q0 in range(a, b, column_width):
        q1 = min(q0 + column_width, b)
        kernels.ec_accumulate(idx[q0:q1], vals[q0:q1], mode, packed, buf, lo)
    rows = np.unique(idx[a:b, mode]) if collect else None
    return lo, hi, buf, rows


def _run_isp_atomic(idx, vals, a, b, mode, packed, out, lock, column_width, collect):
    for q0 in range(a, b, column_width):
        q1 = min(q0 + column_width, b)
        contrib = kernels.ec_contributions(idx[q0:q1], vals[q0:q1], mode, packed)
        with lock:
            kernels.scatter_add(out, idx[q0:q1, mode], contrib, 0)
    return np.unique(idx[a:b, mode]) if collect else None


def execute_shard(
    shard: TensorShard,
    device: DeviceState,
    mode: int,
    cfg: PlatformConfig,
    *,
    staged=None,
    packed_factors=None,
    pool: ThreadPoolExecutor | None = None,
    atomic_lock: threading.Lock | None = None,
    collect_write_log: bool = False,
):
    """Run every inter-shard partition of a shard on one device.

    Partitions go to the device's workers dynamically; contributions
    land in `device.output` per the configured accumulation discipline.
    """
    if shard.mode != mode:
        raise ValueError(f"shard belongs to mode {shard.mode}, not {mode}")
    if device.output is None or device.output.shape[1] != device.factors[0].shape[1]:
        raise ValueError("device output accumulator not initialized for this mode")
    if shard.nnz == 0:
        return
    idx, vals = staged if staged is not None else _stage(shard)
    packed = (
        packed_factors
        if packed_factors is not None
        else kernels.pack_factors(device.factors)
    )
    rank = device.output.shape[1]
    own_pool = pool is None and cfg.workers_per_device > 1
    if own_pool:
        pool = ThreadPoolExecutor(max_workers=cfg.workers_per_device)
    try:
        if cfg.accumulation == "deterministic-reduce":
            tasks = [
                (a, b)
                for a, b in shard.isp_slices()
            ]
            if pool is not None:
                futures = [
                    pool.submit(
                        _run_isp_reduce, idx, vals, a, b, mode, packed, rank,
                        cfg.column_width, collect_write_log,
                    )
                    for a, b in tasks
                ]
                results = (f.result() for f in futures)
            else:
                results = (
                    _run_isp_reduce(
                        idx, vals, a, b, mode, packed, rank, cfg.column_width, collect_write_log
                    )
                    for a, b in tasks
                )
            # merge in partition order: the fixed reduction tree
            for lo, hi, buf, rows in results:
                device.output[lo : hi + 1] += buf
                if rows is not None:
                    device.write_rows.update(int(r) for r in rows)
        else:
            lock = atomic_lock if atomic_lock is not None else threading.Lock()
            if pool is not None:
                futures = [
                    pool.submit(
                        _run_isp_atomic, idx, vals, a, b, mode, packed,
                        device.output, lock, cfg.column_width, collect_write_log,
                    )
                    for a, b in shard.isp_slices()
                ]
                results = (f.result() for f in futures)
            else:
                results = (
                    _run_isp_atomic(
                        idx, vals, a, b, mode, packed, device.output, lock,
                        cfg.column_width, collect_write_log,
                    )
                    for a, b in shard.isp_slices()
                )
            for rows in results:
                if rows is not None:
                    device.write_rows.update(int(r) for r in rows)
    finally:
        if own_pool:
            pool.shutdown(wait=True)


def _normalize_ranges(ranges: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for lo, hi in sorted(ranges):
        if merged and merged[-1][1] == lo:
            merged[-1] = (merged[-1][0], hi)
        else:
            merged.append((lo, hi))
    return merged


def mttkrp_mode(
    plan: ModePartitionPlan,
    devices: list[DeviceState],
    cfg: PlatformConfig,
    ledger: TransferLedger | None = None,
    *,
    update_factors: bool = True,
    collect_write_log: bool = False,
):
    """One output mode end to end: compute, barrier, all-gather, barrier.

    Returns (gathered output matrix, ModeMetrics). With
    `update_factors`, the gathered output becomes every device's factor
    matrix for this mode, as the mode-by-mode algorithm requires.
    """
    m = len(devices)
    if m != cfg.devices:
        raise ValueError(f"{m} device states but config says {cfg.devices}")
    mode = plan.mode
    rows = plan.shape[mode]
    rank = devices[0].factors[0].shape[1]
    for w, size in enumerate(plan.shape):
        if devices[0].factors[w].shape[0] != size:
            raise ValueError(
                f"factor for mode {w} has {devices[0].factors[w].shape[0]} rows, plan needs {size}"
            )
    if m > plan.shard_count:
        warnings.warn(
            f"mode {mode}: {m} devices but only {plan.shard_count} shards; surplus devices idle",
            RuntimeWarning,
            stacklevel=2,
        )

    t_mode = time.perf_counter()
    ledger = ledger if ledger is not None else TransferLedger()
    for dev in devices:
        dev.reset_for_mode(rows, rank, collect_write_log=collect_write_log)
        dev.compute_seconds = 0.0
        dev.staging_seconds = 0.0
        dev.shards_processed = 0
        dev.nnz_processed = 0

    claim_lock = threading.Lock()
    ledger_lock = threading.Lock()
    next_shard = [0]

    def claim_dynamic():
        with claim_lock:
            j = next_shard[0]
            if j >= plan.shard_count:
                return None
            next_shard[0] += 1
            return plan.shards[j]

    start_barrier = threading.Barrier(m)
    errors: list[BaseException] = []

    def device_main(dev: DeviceState):
        try:
            packed = kernels.pack_factors(dev.factors)
            pool = (
                ThreadPoolExecutor(max_workers=cfg.workers_per_device)
                if cfg.workers_per_device > 1
                else None
            )
            atomic_lock = threading.Lock()
            if cfg.scheduling == "static":
                assigned = iter(plan.shards[dev.device_id :: m])
                claim = lambda: next(assigned, None)
            else:
                claim = claim_dynamic
            start_barrier.wait()
            try:
                while True:
                    shard = claim()
                    if shard is None:
                        break
                    t0 = time.perf_counter()
                    staged = _stage(shard)
                    with ledger_lock:
                        record_staging(ledger, dev.device_id, shard)
                    dev.staging_seconds += time.perf_counter() - t0
                    t0 = time.perf_counter()
                    execute_shard(
                        shard,
                        dev,
                        mode,
                        cfg,
                        staged=staged,
                        packed_factors=packed,
                        pool=pool,
                        atomic_lock=atomic_lock,
                        collect_write_log=collect_write_log,
                    )
                    dev.compute_seconds += time.perf_counter() - t0
                    dev.owned_ranges.append(shard.index_range)
                    dev.shards_processed += 1
                    dev.nnz_processed += shard.nnz
            finally:
                if pool is not None:
                    pool.shutdown(wait=True)
        except BaseException as exc:  # noqa: BLE001 - propagated to controller
            errors.append(exc)
            try:
                start_barrier.abort()
            except Exception:
                pass

    threads = [threading.Thread(target=device_main, args=(dev,), daemon=True) for dev in devices]
    staging_before = ledger.total_bytes("staging")
    gather_before = ledger.total_bytes("allgather")
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # inter-device barrier 1: all shards drained
    if errors:
        raise RuntimeError(f"device worker failed during mode {mode}") from errors[0]

    ownership = [_normalize_ranges(dev.owned_ranges) for dev in devices]
    parts = FactorPartitionSet(mode, ownership, [dev.output for dev in devices])
    t0 = time.perf_counter()
    ring_all_gather(parts, ledger)
    allgather_seconds = time.perf_counter() - t0
    # inter-device barrier 2: gathered matrix visible everywhere
    if update_factors:
        for dev in devices:
            dev.factors[mode] = dev.output

    metrics = ModeMetrics(
        mode=mode,
        device_compute_seconds=[dev.compute_seconds for dev in devices],
        device_nnz=[dev.nnz_processed for dev in devices],
        device_shards=[dev.shards_processed for dev in devices],
        staging_bytes=ledger.total_bytes("staging") - staging_before,
        staging_seconds=sum(dev.staging_seconds for dev in devices),
        allgather_bytes=ledger.total_bytes("allgather") - gather_before,
        allgather_seconds=allgather_seconds,
        barrier_count=2,
        wall_seconds=time.perf_counter() - t_mode,
    )
    return devices[0].output.copy(), metrics


def mttkrp_all_modes(
    plans: list[ModePartitionPlan],
    devices: list[DeviceState],
    cfg: PlatformConfig,
    ledger: TransferLedger | None = None,
    *,
    collect_write_log: bool = False,
):
    """Mode-by-mode MTTKRP over all modes in ascending order.

    Each mode's gathered output replaces the mode's factor matrix on
    every device before the next mode runs. Returns the per-mode output
    matrices and the run metrics.
    """
    plans = sorted(plans, key=lambda p: p.mode)
    metrics = RunMetrics(devices=cfg.devices)
    metrics.preprocessing_seconds = [p.build_time for p in plans]
    outputs: list[np.ndarray] = []
    t0 = time.perf_counter()
    for plan in plans:
        out, mm = mttkrp_mode(
            plan,
            devices,
            cfg,
            ledger,
            update_factors=True,
            collect_write_log=collect_write_log,
        )
        outputs.append(out)
        metrics.modes.append(mm)
    metrics.wall_seconds = time.perf_counter() - t0
    return outputs, metrics


def measure_isolated_compute(
    plans: list[ModePartitionPlan],
    factors: list[FactorMatrix],
    cfg: PlatformConfig,
) -> list[float]:
    """Per-device compute seconds with each device run by itself.

    Shards are statically assigned round-robin by shard id and every
    device's share is executed sequentially in isolation, so the times
    reflect work content rather than host core contention.
    """
    totals = [0.0] * cfg.devices
    seq_cfg = PlatformConfig(
        devices=cfg.devices,
        workers_per_device=1,
        column_width=cfg.column_width,
        rank=cfg.rank,
        accumulation=cfg.accumulation,
        scheduling="static",
    )
    for plan in sorted(plans, key=lambda p: p.mode):
        rows = plan.shape[plan.mode]
        rank = factors[0].rank
        for j in range(cfg.devices):
            dev = DeviceState(j, [np.ascontiguousarray(f.data) for f in factors])
            dev.reset_for_mode(rows, rank)
            packed = kernels.pack_factors(dev.factors)
            for shard in plan.shards[j :: cfg.devices]:
                staged = _stage(shard)
                t0 = time.perf_counter()
                execute_shard(
                    shard, dev, plan.mode, seq_cfg, staged=staged, packed_factors=packed
                )
                totals[j] += time.perf_counter() - t0
    return totals
