"""Command-line front end: reproducible runs driven by JSON config files.

Exit codes: 0 success, 1 validation-threshold failure, 2 input/schema error,
3 internal error. Every command echoes its fully resolved configuration
(seed included) so a run can be reproduced from the echo alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

from stepsim.distributions import DistributionCatalog, UnknownKernelError
from stepsim.engine import (
    SimConfig,
    simulate_training_step,
    validate_against_reference,
)
from stepsim.experiments import (
    cross_dc_bandwidth_sweep,
    kernel_sensitivity_sweep,
    slow_node_placement_sweep,
    tp_group_size_sweep,
)
from stepsim.ingest import (
    SynthSpec,
    TraceSchemaError,
    aggregate,
    build_catalog,
    parse_trace,
    parse_trace_csv,
    synth_trace,
)
from stepsim.topology import Topology
from stepsim.workload import (
    DagError,
    ParallelismConfig,
    check_world,
    load_model_file,
    load_schedule_file,
)

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3

EXPERIMENTS = ("slow-node", "tp-size", "kernel-sensitivity", "cross-dc")
OUT_DIR_ENV = "STEPSIM_OUT_DIR"


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _parse_kernel_means(text: str) -> list[tuple[str, float]]:
    pairs = []
    for tok in text.split(","):
        if not tok.strip():
            continue
        name, _, value = tok.partition("=")
        if not value:
            raise ValueError(f"expected name=mean_seconds, got {tok!r}")
        pairs.append((name.strip(), float(value)))
    return pairs


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def load_run_config(config_path: str, args) -> dict:
    """Merge file values with CLI overrides (flags > file > defaults)."""
    cfg_path = Path(config_path)
    _require_file(cfg_path, "config")
    with open(cfg_path) as fh:
        doc = json.load(fh)
    base = cfg_path.parent

    def resolve(key: str, required: bool) -> str | None:
        value = doc.get(key)
        if value is None:
            if required:
                raise ValueError(f"config is missing required path {key!r}")
            return None
        return str(_require_file(base / value, key))

    sim_doc = doc.get("sim", {})
    out_doc = doc.get("output", {})
    out_dir = (
        getattr(args, "out_dir", None)
        or out_doc.get("dir")
        or os.environ.get(OUT_DIR_ENV)
        or "out"
    )
    formats = getattr(args, "format", None) or ",".join(out_doc.get("formats", ["json", "csv"]))
    figures = out_doc.get("figures", True)
    if getattr(args, "no_figures", False):
        figures = False
    resolved = {
        "config": str(cfg_path),
        "model": resolve("model", required=True),
        "topology": resolve("topology", required=False),
        "catalog": resolve("catalog", required=False),
        "parallelism": dict(doc.get("parallelism", {})),
        "sim": {
            "replicates": int(
                getattr(args, "replicates", None) or sim_doc.get("replicates", 1000)
            ),
            "seed": int(
                sim_doc.get("seed", 0) if getattr(args, "seed", None) is None else args.seed
            ),
            "use_shortcuts": not getattr(args, "no_shortcuts", False)
            and bool(sim_doc.get("use_shortcuts", True)),
        },
        "output": {"dir": str(out_dir), "formats": formats.split(","), "figures": figures},
    }
    return resolved


def _echo_resolved(resolved: dict) -> Path:
    out_dir = Path(resolved["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print(text)
    path = out_dir / "resolved_config.json"
    path.write_text(text + "\n")
    return out_dir


def _merge_parallelism(par: ParallelismConfig, overrides: dict) -> ParallelismConfig:
    fields = {
        "tp": par.tp,
        "pp": par.pp,
        "dp": par.dp,
        "cp": par.cp,
        "microbatches": par.microbatches,
        "schedule": par.schedule,
    }
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ValueError(f"unknown parallelism overrides: {sorted(unknown)}")
    fields.update(overrides)
    return ParallelismConfig(**fields)


def _load_workload(resolved: dict):
    model, par = load_model_file(resolved["model"])
    par = _merge_parallelism(par, resolved["parallelism"])
    topo = Topology.load(resolved["topology"]) if resolved["topology"] else None
    if topo is not None:
        check_world(par, topo)
    catalog = (
        DistributionCatalog.load(resolved["catalog"]) if resolved["catalog"] else None
    )
    schedule = None
    if par.schedule and par.schedule != "1f1b":
        schedule_path = Path(resolved["config"]).parent / par.schedule
        _require_file(schedule_path, "schedule")
        schedule = load_schedule_file(schedule_path, par)
    return model, par, topo, catalog, schedule


def _sim_config(resolved: dict) -> SimConfig:
    sim = resolved["sim"]
    return SimConfig(
        replicates=sim["replicates"],
        seed=sim["seed"],
        use_shortcuts=sim["use_shortcuts"],
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        kernels=tuple(_parse_kernel_means(args.kernels)),
        ranks=args.ranks,
        iterations=args.iterations,
        spatial_cv=args.spatial_cv,
        temporal_cv=args.temporal_cv,
        seed=args.seed,
    )
    records = synth_trace(spec, args.out)
    print(f"wrote {len(records)} records to {args.out} (seed={args.seed})")
    return EXIT_OK


def cmd_ingest(args) -> int:
    reader = parse_trace_csv if args.trace.endswith(".csv") else parse_trace
    result = reader(args.trace, strict=args.strict)
    for diag in result.diagnostics:
        print(f"warning: {diag}", file=sys.stderr)
    if not result.records:
        print("error: no records", file=sys.stderr)
        return EXIT_INPUT
    stats = aggregate(result.records)
    catalog = build_catalog(stats, policy=args.policy, per_rank=args.per_rank)
    catalog.save(args.out)

    print(f"{'kernel':24s} {'ranks':>5s} {'iters':>6s} {'mean_us':>10s} "
          f"{'spatial_cv%':>12s} {'temporal_cv%':>13s}")
    for kernel in sorted(stats):
        ks = stats[kernel]
        iters = min(len(v) for v in ks.per_rank_samples.values())
        mean_us = ks.pooled_samples().mean() * 1e6
        print(f"{kernel:24s} {len(ks.per_rank_samples):5d} {iters:6d} "
              f"{mean_us:10.2f} {ks.spatial_cv * 100:12.2f} {ks.temporal_cv * 100:13.2f}")
    print(f"wrote catalog with {len(catalog)} entries to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    resolved = load_run_config(args.config, args)
    if resolved["topology"] is None or resolved["catalog"] is None:
        raise ValueError("simulate needs both 'topology' and 'catalog' in the config")
    out_dir = _echo_resolved(resolved)
    model, par, topo, catalog, schedule = _load_workload(resolved)
    sim = _sim_config(resolved)
    result = simulate_training_step(model, par, catalog, topo, sim, schedule=schedule)

    from stepsim.report import write_simulation_result

    files = write_simulation_result(
        result,
        out_dir,
        formats=tuple(resolved["output"]["formats"]),
        figures=resolved["output"]["figures"],
    )
    q = result.quantiles()
    print(f"mean={result.mean:.6f}s sigma={result.sigma:.6f}s "
          f"p50={q['p50']:.6f}s p95={q['p95']:.6f}s "
          f"(R={result.replicates}, seed={result.seed})")
    for path in files:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    resolved = None
    if args.config:
        resolved = load_run_config(args.config, args)
    elif args.experiment != "tp-size":
        raise ValueError(f"experiment {args.experiment!r} requires --config")

    if resolved is not None:
        sim = _sim_config(resolved)
        out_dir = _echo_resolved(resolved)
        formats = tuple(resolved["output"]["formats"])
        figures = resolved["output"]["figures"]
    else:
        sim = SimConfig(
            replicates=args.replicates or 4000,
            seed=args.seed if args.seed is not None else 0,
        )
        out_dir = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "out")
        formats = tuple((args.format or "json,csv").split(","))
        figures = not args.no_figures
        print(json.dumps({"experiment": args.experiment,
                          "sim": {"replicates": sim.replicates, "seed": sim.seed}},
                         indent=2, sort_keys=True))

    if args.experiment == "tp-size":
        report = tp_group_size_sweep(
            sizes=tuple(_parse_ints(args.sizes)),
            rate=args.rate,
            p=args.percentile,
            sim=sim,
        )
    else:
        model, par, topo, catalog, schedule = _load_workload(resolved)
        if catalog is None:
            raise ValueError("this sweep needs a 'catalog' path in the config")
        if args.experiment == "slow-node":
            report = slow_node_placement_sweep(
                model, par, topo, catalog, p=args.percentile, sim=sim
            )
        elif args.experiment == "kernel-sensitivity":
            kernels = (
                args.kernels.split(",")
                if args.kernels
                else [k for k in model.kernel_names() if catalog.has_kernel(k)]
            )
            report = kernel_sensitivity_sweep(
                kernels, model, par, topo, catalog,
                cvs=tuple(_parse_floats(args.cvs)), p=args.percentile,
            )
        elif args.experiment == "cross-dc":
            report = cross_dc_bandwidth_sweep(
                model, par, topo, catalog,
                bandwidths_gbps=tuple(_parse_floats(args.bandwidths)), sim=sim,
            )
        else:  # unreachable behind argparse choices
            raise ValueError(f"unknown experiment {args.experiment!r}")

    from stepsim.report import write_sweep_report

    files = write_sweep_report(report, out_dir, formats=formats, figures=figures)
    for point in report.points:
        headline = point.slowdown_at.get("slowdown_p50")
        extra = f" slowdown_p50={headline:.4f}" if headline is not None else ""
        mean = point.summary.get("mean", point.summary.get("step_time"))
        print(f"{report.experiment}/{point.label}: mean={mean:.6f}s{extra}")
    for path in files:
        print(f"wrote {path}")
    return EXIT_OK


def _load_samples(path: str):
    with open(_require_file(Path(path), "samples")) as fh:
        doc = json.load(fh)
    if isinstance(doc, list):
        return doc
    if isinstance(doc, dict) and "samples" in doc:
        return doc["samples"]
    raise ValueError(f"{path}: expected a JSON array or an object with 'samples'")


def cmd_validate(args) -> int:
    metrics = validate_against_reference(_load_samples(args.result),
                                         _load_samples(args.reference))
    print(f"mean_error_pct={metrics['mean_error_pct']:.4f} "
          f"ks_distance={metrics['ks_distance']:.6f}")
    failed = False
    if args.max_mean_error_pct is not None and metrics["mean_error_pct"] > args.max_mean_error_pct:
        print(f"FAIL: mean error {metrics['mean_error_pct']:.4f}% exceeds "
              f"{args.max_mean_error_pct}%", file=sys.stderr)
        failed = True
    if args.max_ks is not None and metrics["ks_distance"] > args.max_ks:
        print(f"FAIL: KS distance {metrics['ks_distance']:.6f} exceeds {args.max_ks}",
              file=sys.stderr)
        failed = True
    return EXIT_THRESHOLD if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_output_flags(sub):
    sub.add_argument("--out-dir", default=None,
                     help=f"output directory (default: ${OUT_DIR_ENV} or ./out)")
    sub.add_argument("--format", default=None, help="comma list of json,csv")
    sub.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _add_sim_flags(sub):
    sub.add_argument("--seed", type=int, default=None, help="simulation seed")
    sub.add_argument("--replicates", type=int, default=None, help="Monte Carlo replicates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepsim",
        description="Probabilistic step-time simulator for distributed training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic operator trace")
    p.add_argument("--out", required=True)
    p.add_argument("--kernels", required=True,
                   help="comma list of name=mean_seconds, e.g. gemm=0.004,attn=0.006")
    p.add_argument("--ranks", type=int, default=8)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--spatial-cv", type=float, default=0.05)
    p.add_argument("--temporal-cv", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="fit a distribution catalog from a trace")
    p.add_argument("trace", help="JSONL trace (or .csv with the same columns)")
    p.add_argument("--out", required=True, help="catalog JSON output path")
    p.add_argument("--policy", choices=("gaussian", "empirical", "auto"), default="auto")
    p.add_argument("--per-rank", action="store_true",
                   help="one entry per (kernel, rank) instead of pooled")
    p.add_argument("--strict", action="store_true", help="abort on malformed lines")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("simulate", help="simulate one training step from a run config")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--no-shortcuts", action="store_true",
                   help="disable parallelization-aware sampling shortcuts")
    _add_sim_flags(p)
    _add_output_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a what-if sweep")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--sizes", default="8,16,72", help="tp-size: TP group sizes")
    p.add_argument("--rate", type=float, default=0.10,
                   help="tp-size: per-rank variation rate")
    p.add_argument("--percentile", type=float, default=0.95,
                   help="degraded-rank percentile target")
    p.add_argument("--bandwidths", default="5,50,400",
                   help="cross-dc: bandwidth settings in Gbps")
    p.add_argument("--cvs", default="0.05,0.1,0.2,0.3,0.4",
                   help="kernel-sensitivity: sigma/mean sweep values")
    p.add_argument("--kernels", default=None,
                   help="kernel-sensitivity: comma list (default: all measured)")
    p.add_argument("--no-shortcuts", action="store_true")
    _add_sim_flags(p)
    _add_output_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="compare a result against reference samples")
    p.add_argument("result")
    p.add_argument("reference")
    p.add_argument("--max-mean-error-pct", type=float, default=None)
    p.add_argument("--max-ks", type=float, default=None)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        TraceSchemaError,
        DagError,
        UnknownKernelError,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
