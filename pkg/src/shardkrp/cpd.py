"""CP decomposition via alternating least squares on top of the engine.

The least-squares update is the standard normal-equations form: the
MTTKRP output times the pseudo-inverse of the Hadamard product of the
other modes' Gram matrices, followed by column normalization into the
weight vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import PlatformConfig, make_devices, mttkrp_mode
from .metrics import RunMetrics
from .partition import PartitionConfig, build_all_plans
from .reference import dense_mttkrp_oracle
from .tensor import FactorMatrix, SparseTensorCOO, random_factors


@dataclass
class CpModel:
    factors: list[FactorMatrix]
    lambdas: np.ndarray
    fit_history: list[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return len(self.lambdas)


def gram(factor) -> np.ndarray:
    """Y^T Y for one factor matrix."""
    y = factor.data if isinstance(factor, FactorMatrix) else np.asarray(factor)
    return y.T @ y


def als_update(mttkrp_out: np.ndarray, grams: list[np.ndarray]):
    """Solve the mode's least-squares problem and normalize columns.

    Returns (factor data with unit-norm columns, lambdas). The Hadamard
    product of the Gram matrices is solved as SPD; a diagonal jitter of
    1e-12 * trace/R is added on failure, then pseudo-inverse as the
    last resort.
    """
    if not np.isfinite(mttkrp_out).all():
        raise FloatingPointError("non-finite MTTKRP output")
    rank = mttkrp_out.shape[1]
    v = np.ones((rank, rank))
    for g in grams:
        v = v * g
    if not np.isfinite(v).all():
        raise FloatingPointError("non-finite Gram product")

    try:
        solved = np.linalg.solve(v, mttkrp_out.T).T
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(v) / rank
        try:
            solved = np.linalg.solve(v + jitter * np.eye(rank), mttkrp_out.T).T
        except np.linalg.LinAlgError:
            solved = mttkrp_out @ np.linalg.pinv(v)

    lambdas = np.linalg.norm(solved, axis=0)
    safe = np.where(lambdas > 0, lambdas, 1.0)
    return solved / safe, lambdas


def _model_values_at(tensor: SparseTensorCOO, factors, lambdas, chunk=65536) -> np.ndarray:
    """Model evaluation at every stored coordinate."""
    mats = [f.data for f in factors]
    rank = mats[0].shape[1]
    out = np.empty(tensor.nnz)
    for a in range(0, tensor.nnz, chunk):
        b = min(a + chunk, tensor.nnz)
        rows = np.ones((b - a, rank))
        for w in range(tensor.num_modes):
            rows *= mats[w][tensor.indices[a:b, w].astype(np.int64)]
        out[a:b] = rows @ lambdas
    return out


def fit(tensor: SparseTensorCOO, model: CpModel) -> float:
    """1 - relative Frobenius reconstruction error.

    Uses the sparse identity ||X - Xhat||^2 = ||X||^2 - 2 <X, Xhat>
    + ||Xhat||^2, with the inner product summed over stored coordinates
    and ||Xhat||^2 from the Gram matrices and weights.
    """
    x_sq = float(np.dot(tensor.values.astype(np.float64), tensor.values.astype(np.float64)))
    if x_sq == 0.0:
        raise ValueError("tensor has zero Frobenius norm; fit undefined")
    inner = float(
        np.dot(
            tensor.values.astype(np.float64),
            _model_values_at(tensor, model.factors, model.lambdas),
        )
    )
    g = np.ones((model.rank, model.rank))
    for f in model.factors:
        g = g * gram(f)
    model_sq = float(model.lambdas @ g @ model.lambdas)
    resid_sq = max(x_sq - 2.0 * inner + model_sq, 0.0)
    return 1.0 - np.sqrt(resid_sq) / np.sqrt(x_sq)


def cp_als(
    tensor: SparseTensorCOO,
    rank: int,
    iterations: int,
    platform: PlatformConfig | None = None,
    seed: int = 0,
    partition: PartitionConfig | None = None,
    mttkrp_impl: str = "engine",
    fit_tol: float | None = None,
):
    """Alternating least squares CP decomposition.

    Factors start from seeded uniform(0,1). Each iteration sweeps the
    modes in order: MTTKRP through the engine (or the dense oracle, for
    cross-checking), the normal-equations solve, then normalization;
    the fit is recorded per iteration. Stops early when the fit
    improves by less than `fit_tol`, if given. Returns
    (CpModel, RunMetrics).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if mttkrp_impl not in ("engine", "oracle"):
        raise ValueError("mttkrp_impl must be 'engine' or 'oracle'")
    platform = platform or PlatformConfig(rank=rank)
    partition = partition or PartitionConfig(
        devices=platform.devices, workers_per_device=platform.workers_per_device
    )

    factors = random_factors(tensor.shape, rank, seed)
    metrics = RunMetrics(devices=platform.devices)
    devices = []
    plans = []
    if mttkrp_impl == "engine":
        plans = build_all_plans(tensor, partition)
        metrics.preprocessing_seconds = [p.build_time for p in plans]
        devices = make_devices(factors, platform)

    lambdas = np.ones(rank)
    history: list[float] = []
    for _ in range(iterations):
        for d in range(tensor.num_modes):
            if mttkrp_impl == "engine":
                m_out, mode_metrics = mttkrp_mode(
                    plans[d], devices, platform, update_factors=False
                )
                metrics.modes.append(mode_metrics)
            else:
                m_out = dense_mttkrp_oracle(tensor, factors, d)
            grams = [gram(factors[w]) for w in range(tensor.num_modes) if w != d]
            new_data, lambdas = als_update(m_out, grams)
            factors[d] = FactorMatrix(d, new_data)
            factors[d].check_finite()
            for dev in devices:
                dev.factors[d] = np.ascontiguousarray(new_data)
        history.append(fit(tensor, CpModel(factors, lambdas)))
        if fit_tol is not None and len(history) > 1 and history[-1] - history[-2] < fit_tol:
            break

    model = CpModel(factors, lambdas, fit_history=history)
    return model, metrics
