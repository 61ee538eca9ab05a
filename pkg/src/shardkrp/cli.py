"""Command-line front end and metrics harness.

Verbs: info | synth | partition | mttkrp | scaling | imbalance | cpd.
Structured metrics go to stdout (or --out) as line-delimited JSON;
human-oriented progress notes go to stderr. Exit codes: 0 success,
2 usage error, 3 verification failure, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .collective import TransferLedger
from .cpd import cp_als
from .engine import PlatformConfig, make_devices, measure_isolated_compute, mttkrp_all_modes
from .metrics import RunMetrics, run_records, write_records
from .partition import (
    PartitionConfig,
    PlanError,
    build_all_plans,
    load_plan,
    save_plan,
)
from .reference import dense_mttkrp_oracle
from .synth import synth_tensor
from .tensor import (
    SparseTensorCOO,
    TnsFormatError,
    parse_tns,
    random_factors,
    write_tns,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VERIFY = 3
EXIT_IO = 4

WORKERS_ENV = "SHARDKRP_WORKERS"


class VerificationFailure(Exception):
    pass


def _human_count(n: float) -> str:
    for unit, div in (("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= div:
            return f"{n / div:.1f}{unit}"
    return str(int(n))


def _parse_int_list(text: str) -> list[int]:
    return [int(t) for t in text.replace("x", ",").split(",") if t]


def _parse_dist(text: str):
    if text == "uniform":
        return "uniform", 1.2
    if text.startswith("zipf"):
        _, _, arg = text.partition(":")
        return "zipf", float(arg) if arg else 1.2
    raise argparse.ArgumentTypeError(f"unknown distribution {text!r}")


def _default_workers() -> int:
    return int(os.environ.get(WORKERS_ENV, "1"))


def _add_platform_args(p: argparse.ArgumentParser):
    p.add_argument("--devices", type=int, default=1, help="simulated device count")
    p.add_argument(
        "--workers", type=int, default=_default_workers(),
        help=f"workers per device (default from ${WORKERS_ENV} or 1)",
    )
    p.add_argument("--oversub", type=int, default=4, help="shards per device")
    p.add_argument("--isp-capacity", type=int, default=8192, help="max nonzeros per inter-shard partition")
    p.add_argument("--strategy", choices=("equal-index", "nnz-balanced"), default="equal-index")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--column-width", type=int, default=32, help="nonzeros per worker quantum")
    p.add_argument("--atomic", action="store_true", help="atomic accumulation instead of deterministic reduce")
    p.add_argument("--static", action="store_true", help="fixed round-robin shard assignment")
    p.add_argument("--seed", type=int, default=0)


def _platform_from(args) -> PlatformConfig:
    return PlatformConfig(
        devices=args.devices,
        workers_per_device=args.workers,
        column_width=args.column_width,
        rank=args.rank,
        accumulation="atomic" if args.atomic else "deterministic-reduce",
        scheduling="static" if args.static else "dynamic",
    )


def _partition_from(args) -> PartitionConfig:
    return PartitionConfig(
        devices=args.devices,
        workers_per_device=args.workers,
        oversubscription=args.oversub,
        isp_capacity=args.isp_capacity,
        strategy=args.strategy,
    )


def _load_tensor(args) -> SparseTensorCOO:
    shape = tuple(_parse_int_list(args.shape)) if getattr(args, "shape", None) else None
    dtype = np.float32 if getattr(args, "float32", False) else np.float64
    return parse_tns(
        args.tensor,
        coalesce_duplicates=getattr(args, "coalesce", False),
        shape=shape,
        value_dtype=dtype,
    )


def _load_input(args):
    """A .tns file or a plan-cache directory; returns (tensor, plans)."""
    path = Path(args.tensor)
    if path.is_dir():
        plan_files = sorted(path.glob("mode*.plan"))
        if not plan_files:
            raise TnsFormatError(f"{path}: no mode*.plan files")
        plans = [load_plan(p) for p in plan_files]
        plans.sort(key=lambda p: p.mode)
        first = plans[0]
        tensor = SparseTensorCOO(
            first.shape, first._indices.copy(), first._values.copy(), name=first.name
        )
        return tensor, plans
    return _load_tensor(args), None


def _emit(records: list[dict], args):
    if getattr(args, "out", None):
        with open(args.out, "w") as fh:
            write_records(records, fh)
        print(f"wrote {len(records)} records to {args.out}", file=sys.stderr)
    else:
        write_records(records, sys.stdout)


def _note(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_info(args) -> int:
    tensor = _load_tensor(args)
    stats = tensor.stats
    print(f"name:    {tensor.name}")
    print(f"modes:   {tensor.num_modes}")
    print("shape:   " + " x ".join(_human_count(s) for s in tensor.shape))
    print("         " + " x ".join(str(s) for s in tensor.shape))
    print(f"nnz:     {tensor.nnz} ({_human_count(tensor.nnz)})")
    print(f"density: {tensor.density:.3g}")
    used = [
        len(np.unique(tensor.indices[:, w])) if tensor.nnz else 0
        for w in range(tensor.num_modes)
    ]
    print("indices used per mode: " + ", ".join(str(u) for u in used))
    if stats is not None:
        print(f"zero-valued elements: {stats.zero_values}")
        print(f"duplicates {'coalesced' if stats.coalesced else 'seen'}: {stats.duplicates}")
    return EXIT_OK


def cmd_synth(args) -> int:
    dist, zipf_s = args.dist
    shape = tuple(_parse_int_list(args.shape))
    tensor = synth_tensor(
        shape,
        args.nnz,
        distribution=dist,
        zipf_exponent=zipf_s,
        value_dist=args.values,
        seed=args.seed,
        name=args.name or Path(args.out_tns).stem,
    )
    write_tns(tensor, args.out_tns, shape_header=True)
    _note(f"wrote {tensor.nnz} nonzeros to {args.out_tns}")
    return EXIT_OK


def _plan_paths(outdir: Path, num_modes: int) -> list[Path]:
    return [outdir / f"mode{d}.plan" for d in range(num_modes)]


def _plans_current(paths, tensor, cfg: PartitionConfig) -> bool:
    for d, path in enumerate(paths):
        if not path.exists():
            return False
        try:
            plan = load_plan(path, value_dtype=tensor.values.dtype)
        except PlanError:
            return False
        expect_k = min(cfg.devices * cfg.oversubscription, tensor.shape[d])
        if (
            plan.mode != d
            or plan.shape != tensor.shape
            or plan.nnz != tensor.nnz
            or plan.strategy != cfg.strategy
            or plan.isp_capacity != cfg.isp_capacity
            or plan.shard_count != expect_k
        ):
            return False
    return True


def cmd_partition(args) -> int:
    tensor = _load_tensor(args)
    cfg = _partition_from(args)
    outdir = Path(args.plan_dir or (str(args.tensor) + ".plans"))
    paths = _plan_paths(outdir, tensor.num_modes)
    if not args.force and _plans_current(paths, tensor, cfg):
        _note(f"plan cache {outdir} is up to date (use --force to rebuild)")
        return EXIT_OK
    outdir.mkdir(parents=True, exist_ok=True)
    plans = build_all_plans(tensor, cfg)
    records = []
    for plan, path in zip(plans, paths):
        save_plan(plan, path)
        records.append({"record": "preprocessing", "mode": plan.mode, "seconds": plan.build_time})
    records.append(
        {
            "record": "preprocessing_total",
            "seconds": sum(p.build_time for p in plans),
            "plan_bytes": sum(p.byte_size for p in plans),
        }
    )
    _emit(records, args)
    _note(f"wrote {len(plans)} plans to {outdir}")
    return EXIT_OK


def _verify_outputs(tensor, factors_before, outputs, tol) -> float:
    """Max relative error of engine outputs vs the oracle replay."""
    worst = 0.0
    factors = [f.copy() for f in factors_before]
    for d, out in enumerate(outputs):
        expect = dense_mttkrp_oracle(tensor, factors, d)
        scale = np.maximum(np.abs(expect), 1.0)
        err = float(np.max(np.abs(out - expect) / scale)) if expect.size else 0.0
        worst = max(worst, err)
        factors[d].data = out.copy()
    if worst > tol:
        raise VerificationFailure(
            f"engine/oracle mismatch: max relative error {worst:.3e} > tolerance {tol:.3e}"
        )
    return worst


def cmd_mttkrp(args) -> int:
    tensor, plans = _load_input(args)
    platform = _platform_from(args)
    if plans is None:
        cfg = _partition_from(args)
        plans = build_all_plans(tensor, cfg)
    kernels.warmup(tensor.num_modes, tensor.values.dtype)

    records: list[dict] = []
    metrics = None
    for it in range(args.warmup + args.iterations):
        factors = random_factors(tensor.shape, args.rank, args.seed)
        devices = make_devices(factors, platform)
        ledger = TransferLedger()
        outputs, metrics = mttkrp_all_modes(plans, devices, platform, ledger)
        if it < args.warmup:
            continue
        if args.verify:
            tol = args.verify_tol
            if tol is None:
                tol = 1e-6 if platform.accumulation == "atomic" else 1e-10
            worst = _verify_outputs(tensor, factors, outputs, tol)
            records.append({"record": "verify", "max_relative_error": worst, "tolerance": tol})
        records.extend(run_records(metrics, platform=platform, tensor=tensor))
    _emit(records, args)
    if metrics is not None:
        _note(
            f"compute {metrics.compute_seconds:.4f}s, wall {metrics.wall_seconds:.4f}s, "
            f"imbalance {metrics.imbalance_pct:.2f}%"
        )
    return EXIT_OK


def cmd_scaling(args) -> int:
    tensor = _load_tensor(args)
    device_counts = _parse_int_list(args.device_list)
    kernels.warmup(tensor.num_modes, tensor.values.dtype)
    records: list[dict] = []
    base = None
    for m in device_counts:
        cfg = PartitionConfig(
            devices=m,
            workers_per_device=args.workers,
            oversubscription=args.oversub,
            isp_capacity=args.isp_capacity,
            strategy=args.strategy,
        )
        platform = PlatformConfig(
            devices=m,
            workers_per_device=args.workers,
            column_width=args.column_width,
            rank=args.rank,
            accumulation="atomic" if args.atomic else "deterministic-reduce",
            scheduling="static" if args.static else "dynamic",
        )
        plans = build_all_plans(tensor, cfg)
        best = None
        for it in range(args.warmup + args.iterations):
            factors = random_factors(tensor.shape, args.rank, args.seed)
            devices = make_devices(factors, platform)
            _, metrics = mttkrp_all_modes(plans, devices, platform)
            if it >= args.warmup:
                best = metrics if best is None or metrics.compute_seconds < best.compute_seconds else best
        if base is None:
            base = best.compute_seconds
        records.append(
            {
                "record": "scaling",
                "devices": m,
                "compute_seconds": best.compute_seconds,
                "wall_seconds": best.wall_seconds,
                "speedup": base / best.compute_seconds if best.compute_seconds > 0 else 1.0,
            }
        )
        _note(f"m={m}: compute {best.compute_seconds:.4f}s speedup {records[-1]['speedup']:.2f}x")
    _emit(records, args)
    return EXIT_OK


def cmd_imbalance(args) -> int:
    tensor = _load_tensor(args)
    cfg = _partition_from(args)
    platform = _platform_from(args)
    kernels.warmup(tensor.num_modes, tensor.values.dtype)
    plans = build_all_plans(tensor, cfg)
    factors = random_factors(tensor.shape, args.rank, args.seed)
    # warm pass so JIT/cache effects do not land on device 0
    measure_isolated_compute(plans, factors, platform)
    totals = measure_isolated_compute(plans, factors, platform)
    total = sum(totals)
    imbalance = (max(totals) - min(totals)) / total * 100.0 if total > 0 else 0.0
    records = [
        {"record": "device_compute_isolated", "device": j, "seconds": t}
        for j, t in enumerate(totals)
    ]
    records.append(
        {
            "record": "imbalance",
            "imbalance_pct": imbalance,
            "max_seconds": max(totals),
            "min_seconds": min(totals),
            "total_seconds": total,
        }
    )
    _emit(records, args)
    _note(f"imbalance {imbalance:.2f}% across {cfg.devices} devices ({cfg.strategy})")
    return EXIT_OK


def cmd_cpd(args) -> int:
    tensor = _load_tensor(args)
    platform = _platform_from(args)
    cfg = _partition_from(args)
    kernels.warmup(tensor.num_modes, tensor.values.dtype)
    model, metrics = cp_als(
        tensor,
        args.rank,
        args.iterations,
        platform=platform,
        seed=args.seed,
        partition=cfg,
        fit_tol=args.fit_tol,
    )
    records = [
        {"record": "fit", "iteration": i, "fit": f} for i, f in enumerate(model.fit_history)
    ]
    records.append({"record": "lambdas", "values": [float(x) for x in model.lambdas]})
    records.extend(run_records(metrics, platform=platform, tensor=tensor))
    _emit(records, args)
    if args.export_factors:
        outdir = Path(args.export_factors)
        outdir.mkdir(parents=True, exist_ok=True)
        for f in model.factors:
            if args.export_format == "csv":
                np.savetxt(outdir / f"factor_mode{f.mode}.csv", f.data, delimiter=",")
            else:
                np.save(outdir / f"factor_mode{f.mode}.npy", f.data)
        np.savetxt(outdir / "lambdas.csv", model.lambdas, delimiter=",")
        _note(f"exported factors to {outdir}")
    _note(f"final fit {model.fit_history[-1]:.6f} after {len(model.fit_history)} iterations")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shardkrp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="summarize a .tns tensor")
    p.add_argument("tensor")
    p.add_argument("--shape", help="override inferred shape, e.g. 4800000,1800000,1800000")
    p.add_argument("--coalesce", action="store_true", help="sum duplicate coordinates")
    p.add_argument("--float32", action="store_true")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", help="generate a synthetic tensor")
    p.add_argument("out_tns")
    p.add_argument("--shape", required=True)
    p.add_argument("--nnz", type=int, required=True)
    p.add_argument("--dist", type=_parse_dist, default=("uniform", 1.2), help="uniform | zipf[:s]")
    p.add_argument("--values", choices=("uniform", "normal"), default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="build and cache per-mode plans")
    p.add_argument("tensor")
    p.add_argument("--plan-dir", help="directory for mode*.plan files (default TENSOR.plans)")
    p.add_argument("--force", action="store_true", help="rebuild even if the cache is current")
    p.add_argument("--shape")
    p.add_argument("--coalesce", action="store_true")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out")
    _add_platform_args(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("mttkrp", help="run MTTKRP across all modes")
    p.add_argument("tensor", help=".tns file or plan-cache directory")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--warmup", type=int, default=1, help="untimed runs to exclude (default 1)")
    p.add_argument("--verify", action="store_true", help="check outputs against the dense oracle")
    p.add_argument("--verify-tol", type=float, default=None)
    p.add_argument("--shape")
    p.add_argument("--coalesce", action="store_true")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out")
    _add_platform_args(p)
    p.set_defaults(func=cmd_mttkrp)

    p = sub.add_parser("scaling", help="speedup table across device counts")
    p.add_argument("tensor")
    p.add_argument("--devices", dest="device_list", default="1,2,4")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--shape")
    p.add_argument("--coalesce", action="store_true")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--oversub", type=int, default=4)
    p.add_argument("--isp-capacity", type=int, default=8192)
    p.add_argument("--strategy", choices=("equal-index", "nnz-balanced"), default="equal-index")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--column-width", type=int, default=32)
    p.add_argument("--atomic", action="store_true")
    p.add_argument("--static", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("imbalance", help="per-device compute times, measured in isolation")
    p.add_argument("tensor")
    p.add_argument("--shape")
    p.add_argument("--coalesce", action="store_true")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out")
    _add_platform_args(p)
    p.set_defaults(func=cmd_imbalance)

    p = sub.add_parser("cpd", help="CP-ALS decomposition")
    p.add_argument("tensor")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--fit-tol", type=float, default=None, help="stop when fit gain drops below this")
    p.add_argument("--export-factors", help="directory for factor matrix export")
    p.add_argument("--export-format", choices=("csv", "npy"), default="csv")
    p.add_argument("--shape")
    p.add_argument("--coalesce", action="store_true")
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out")
    _add_platform_args(p)
    p.set_defaults(func=cmd_cpd)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (TnsFormatError, PlanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
