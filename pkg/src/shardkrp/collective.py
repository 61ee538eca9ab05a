"""Simulated device-to-device collectives with byte accounting.

Transfers are buffer copies between per-device arrays; what is checked
is the schedule and the volume, not wire behavior. The all-gather walks
a ring: M-1 synchronous steps, each device forwarding the block it
received in the previous step to its right neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HOST = -1


@dataclass(frozen=True)
class TransferRecord:
    step: int
    sender: int
    receiver: int
    byte_count: int
    kind: str  # "staging" | "allgather"


@dataclass
class TransferLedger:
    records: list[TransferRecord] = field(default_factory=list)

    def record(self, step: int, sender: int, receiver: int, byte_count: int, kind: str):
        if byte_count <= 0:
            return
        self.records.append(TransferRecord(step, sender, receiver, int(byte_count), kind))

    def total_bytes(self, kind: str | None = None) -> int:
        return sum(r.byte_count for r in self.records if kind is None or r.kind == kind)

    def count(self, kind: str | None = None) -> int:
        return sum(1 for r in self.records if kind is None or r.kind == kind)

    def sends_by_device(self, kind: str = "allgather") -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            if r.kind == kind:
                out[r.sender] = out.get(r.sender, 0) + 1
        return out


@dataclass
class FactorPartitionSet:
    """Output-mode factor rows split by owning device.

    ownership[j] lists the contiguous [lo, hi) row ranges device j
    produced; buffers[j] is device j's full-size local matrix, valid on
    the owned rows only until the gather completes.
    """

    mode: int
    ownership: list[list[tuple[int, int]]]
    buffers: list[np.ndarray]

    @property
    def device_count(self) -> int:
        return len(self.buffers)

    def validate(self):
        if self.device_count == 0:
            raise ValueError("no devices")
        rows = self.buffers[0].shape[0]
        seen = np.zeros(rows, dtype=np.int8)
        for ranges in self.ownership:
            for lo, hi in ranges:
                if not 0 <= lo <= hi <= rows:
                    raise ValueError(f"ownership range ({lo}, {hi}) outside [0, {rows})")
                seen[lo:hi] += 1
        if (seen > 1).any():
            raise ValueError("ownership ranges overlap")
        if (seen == 0).any():
            missing = int(np.argmin(seen))
            raise ValueError(f"missing owned block: row {missing} has no owner")


def block_nbytes(parts: FactorPartitionSet, block: int) -> int:
    itemsize = parts.buffers[0].itemsize
    rank = parts.buffers[0].shape[1]
    return sum((hi - lo) * rank * itemsize for lo, hi in parts.ownership[block])


def _extract_block(parts: FactorPartitionSet, owner: int, src: np.ndarray):
    return [(lo, hi, src[lo:hi].copy()) for lo, hi in parts.ownership[owner]]


def ring_all_gather(parts: FactorPartitionSet, ledger: TransferLedger | None = None) -> int:
    """Complete every device's copy of the output factor matrix.

    Runs M-1 synchronous steps. At step z device `id` sends block
    (id - z) mod M to device (id + 1) mod M and receives block
    (id - z - 1) mod M from (id - 1) mod M; sends of a step all complete
    before any step-z+1 send (per-step barrier). Returns the step count.
    """
    parts.validate()
    m = parts.device_count
    if m == 1:
        return 0
    # block j = rows owned by device j; devices start holding their own block
    holding: list[dict[int, list]] = [
        {j: _extract_block(parts, j, parts.buffers[j])} for j in range(m)
    ]
    for z in range(m - 1):
        sends = []
        for dev in range(m):
            blk = (dev - z) % m
            dst = (dev + 1) % m
            sends.append((dev, dst, blk, holding[dev][blk]))
        for sender, receiver, blk, payload in sends:
            holding[receiver][blk] = payload
            nbytes = 0
            for lo, hi, data in payload:
                parts.buffers[receiver][lo:hi] = data
                nbytes += data.nbytes
            if ledger is not None:
                ledger.record(z, sender, receiver, nbytes, "allgather")
    return m - 1


def gather_broadcast_oracle(parts: FactorPartitionSet) -> np.ndarray:
    """Reference final state: assemble owned rows, broadcast to all."""
    full = np.zeros_like(parts.buffers[0])
    for dev, ranges in enumerate(parts.ownership):
        for lo, hi in ranges:
            full[lo:hi] = parts.buffers[dev][lo:hi]
    return full


def staging_nbytes(nnz: int, num_modes: int, value_itemsize: int) -> int:
    return nnz * (num_modes * 8 + value_itemsize)


def record_staging(ledger: TransferLedger, device: int, shard) -> int:
    """Account a host-to-device shard transfer; empty shards move nothing."""
    if shard.nnz == 0:
        return 0
    nbytes = staging_nbytes(shard.nnz, shard.indices.shape[1], shard.values.itemsize)
    ledger.record(len(ledger.records), HOST, device, nbytes, "staging")
    return nbytes
