"""Sharded multi-device sparse MTTKRP and CP-ALS engine."""

from .collective import (
    FactorPartitionSet,
    TransferLedger,
    gather_broadcast_oracle,
    record_staging,
    ring_all_gather,
)
from .cpd import CpModel, als_update, cp_als, fit, gram
from .engine import (
    DeviceState,
    PlatformConfig,
    elementwise_compute,
    execute_shard,
    make_devices,
    measure_isolated_compute,
    mttkrp_all_modes,
    mttkrp_mode,
)
from .metrics import ModeMetrics, RunMetrics, run_records
from .partition import (
    ModePartitionPlan,
    PartitionConfig,
    PlanError,
    PlanIntegrityError,
    PlanVersionError,
    TensorShard,
    build_all_plans,
    build_mode_plan,
    load_plan,
    save_plan,
)
from .reference import dense_mttkrp_oracle, khatri_rao
from .synth import synth_tensor
from .tensor import (
    FactorMatrix,
    LoadStats,
    NonzeroElement,
    SparseTensorCOO,
    TnsFormatError,
    parse_tns,
    random_factors,
    write_tns,
)

__version__ = "0.1.0"

__all__ = [
    "CpModel",
    "DeviceState",
    "FactorMatrix",
    "FactorPartitionSet",
    "LoadStats",
    "ModeMetrics",
    "ModePartitionPlan",
    "NonzeroElement",
    "PartitionConfig",
    "PlanError",
    "PlanIntegrityError",
    "PlanVersionError",
    "PlatformConfig",
    "RunMetrics",
    "SparseTensorCOO",
    "TensorShard",
    "TnsFormatError",
    "TransferLedger",
    "als_update",
    "build_all_plans",
    "build_mode_plan",
    "cp_als",
    "dense_mttkrp_oracle",
    "elementwise_compute",
    "execute_shard",
    "fit",
    "gather_broadcast_oracle",
    "gram",
    "khatri_rao",
    "load_plan",
    "make_devices",
    "measure_isolated_compute",
    "mttkrp_all_modes",
    "mttkrp_mode",
    "parse_tns",
    "random_factors",
    "record_staging",
    "ring_all_gather",
    "run_records",
    "save_plan",
    "synth_tensor",
    "write_tns",
]
