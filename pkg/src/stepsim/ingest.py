"""Operator-level trace ingestion and catalog construction.

Traces arrive as JSON Lines, one record per line (streamable for very large
files), with durations on the wire in microseconds per profiler convention and
converted to seconds internally. A CSV reader with the same column semantics
is provided for convenience.

Variability is split into two components: *temporal* (iteration-to-iteration
spread on one rank) and *spatial* (spread of per-rank medians across ranks).
The synthetic generator inverts that decomposition, which gives the test suite
a generator/estimator round trip.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from stepsim.distributions import (
    DistributionCatalog,
    Empirical,
    LatencyDistribution,
    fit_gaussian,
)

__all__ = [
    "TraceRecord",
    "TraceSchemaError",
    "ParseResult",
    "KernelStats",
    "SynthSpec",
    "parse_trace",
    "parse_trace_csv",
    "write_trace",
    "aggregate",
    "build_catalog",
    "synth_trace",
    "AUTO_TAIL_RATIO",
    "AUTO_SKEW_LIMIT",
]

# Auto policy: pick the empirical form when the tail is heavy. Thresholds are
# deliberately simple and overridable per call.
AUTO_TAIL_RATIO = 0.5  # (p99 - p50) / p50
AUTO_SKEW_LIMIT = 1.0

_REQUIRED_FIELDS = ("kernel", "rank", "iter", "dur_us")
_OPTIONAL_FIELDS = ("shape", "module")


class TraceSchemaError(ValueError):
    """Trace file violates the record schema."""


@dataclass(frozen=True)
class TraceRecord:
    kernel: str
    rank: int
    iteration: int
    duration: float  # seconds
    shape: str | None = None
    module: str | None = None

    def to_json_obj(self) -> dict:
        obj = {
            "kernel": self.kernel,
            "rank": self.rank,
            "iter": self.iteration,
            "dur_us": self.duration * 1e6,
        }
        if self.shape is not None:
            obj["shape"] = self.shape
        if self.module is not None:
            obj["module"] = self.module
        return obj


@dataclass
class ParseResult:
    records: list[TraceRecord]
    diagnostics: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _record_from_obj(obj: Mapping, lineno: int) -> TraceRecord:
    if not isinstance(obj, Mapping):
        raise TraceSchemaError(f"line {lineno}: record is not an object")
    unknown = set(obj) - set(_REQUIRED_FIELDS) - set(_OPTIONAL_FIELDS)
    if unknown:
        raise TraceSchemaError(f"line {lineno}: unknown fields {sorted(unknown)}")
    missing = [k for k in _REQUIRED_FIELDS if k not in obj]
    if missing:
        raise TraceSchemaError(f"line {lineno}: missing fields {missing}")
    dur_us = float(obj["dur_us"])
    if dur_us < 0:
        raise TraceSchemaError(f"line {lineno}: negative duration {dur_us}")
    return TraceRecord(
        kernel=str(obj["kernel"]),
        rank=int(obj["rank"]),
        iteration=int(obj["iter"]),
        duration=dur_us * 1e-6,
        shape=obj.get("shape"),
        module=obj.get("module"),
    )


def _collect(rows: Iterable[tuple[int, object]], strict: bool) -> ParseResult:
    records: list[TraceRecord] = []
    diagnostics: list[str] = []
    seen: set[tuple[str, int, int]] = set()
    for lineno, payload in rows:
        try:
            if isinstance(payload, Exception):
                raise payload
            rec = _record_from_obj(payload, lineno)
            key = (rec.kernel, rec.rank, rec.iteration)
            if key in seen:
                raise TraceSchemaError(f"line {lineno}: duplicate record for {key}")
            seen.add(key)
            records.append(rec)
        except (TraceSchemaError, ValueError) as exc:
            if strict:
                raise TraceSchemaError(str(exc)) from None
            diagnostics.append(str(exc))
    if strict and not records:
        raise TraceSchemaError("no records")
    return ParseResult(records, diagnostics)


def parse_trace(path, strict: bool = False) -> ParseResult:
    """Parse a JSONL trace.

    Strict mode aborts on the first malformed line (and on an empty file);
    lenient mode skips bad lines and reports them with line numbers in
    ``diagnostics``.
    """

    def rows():
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, TraceSchemaError(f"line {lineno}: invalid JSON ({exc.msg})")

    return _collect(rows(), strict)


def parse_trace_csv(path, strict: bool = False) -> ParseResult:
    """CSV reader with identical column semantics to the JSONL format."""

    def rows():
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):  # header is line 1
                cleaned = {k: v for k, v in row.items() if v not in (None, "")}
                yield lineno, cleaned

    return _collect(rows(), strict)


def write_trace(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_obj(), sort_keys=True))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class KernelStats:
    """Per-kernel decomposition into temporal and spatial variability."""

    kernel: str
    per_rank_samples: dict[int, np.ndarray]
    spatial_samples: np.ndarray  # per-rank p50 values, ordered by rank id
    spatial_cv: float
    temporal_cv: float

    @property
    def temporal(self) -> dict[int, LatencyDistribution]:
        return {rank: Empirical(s) for rank, s in self.per_rank_samples.items()}

    @property
    def spatial(self) -> LatencyDistribution:
        return Empirical(self.spatial_samples)

    def pooled_samples(self) -> np.ndarray:
        ranks = sorted(self.per_rank_samples)
        return np.concatenate([self.per_rank_samples[r] for r in ranks])


def _cv(samples: np.ndarray) -> float:
    mean = samples.mean()
    return float(samples.std() / mean) if mean > 0 else 0.0


def aggregate(records: Sequence[TraceRecord]) -> dict[str, KernelStats]:
    """Group records into per-kernel stats.

    The spatial statistic is the per-rank p50 (not the mean), compared across
    ranks; the temporal distribution is each rank's own iteration samples.
    """
    if not records:
        raise ValueError("no records to aggregate")
    grouped: dict[str, dict[int, list[float]]] = {}
    for rec in records:
        grouped.setdefault(rec.kernel, {}).setdefault(rec.rank, []).append(rec.duration)

    out: dict[str, KernelStats] = {}
    single_iteration_kernels = []
    for kernel in sorted(grouped):
        by_rank = {
            rank: np.sort(np.asarray(vals, dtype=float))
            for rank, vals in sorted(grouped[kernel].items())
        }
        if any(len(v) == 1 for v in by_rank.values()):
            single_iteration_kernels.append(kernel)
        medians = np.array([np.median(v) for v in by_rank.values()])
        out[kernel] = KernelStats(
            kernel=kernel,
            per_rank_samples=by_rank,
            spatial_samples=medians,
            spatial_cv=_cv(medians),
            temporal_cv=float(np.mean([_cv(v) for v in by_rank.values()])),
        )
    if single_iteration_kernels:
        warnings.warn(
            "single iteration per rank (temporal sigma is 0) for kernels: "
            + ", ".join(single_iteration_kernels[:5]),
            stacklevel=2,
        )
    return out


# ---------------------------------------------------------------------------
# Catalog construction
# ---------------------------------------------------------------------------


def _skewness(samples: np.ndarray) -> float:
    sd = samples.std()
    if sd == 0:
        return 0.0
    return float(np.mean(((samples - samples.mean()) / sd) ** 3))


def _pick(samples: np.ndarray, policy: str, tail_ratio: float, skew_limit: float):
    if policy == "gaussian":
        return fit_gaussian(samples)
    if policy == "empirical":
        return Empirical(samples)
    if policy == "auto":
        p50, p99 = np.quantile(samples, [0.5, 0.99])
        heavy_tail = p50 > 0 and (p99 - p50) / p50 > tail_ratio
        if heavy_tail or abs(_skewness(samples)) > skew_limit:
            return Empirical(samples)
        return fit_gaussian(samples)
    raise ValueError(f"unknown catalog policy {policy!r}")


def build_catalog(
    stats: Mapping[str, KernelStats],
    policy: str = "auto",
    per_rank: bool = False,
    tail_ratio: float = AUTO_TAIL_RATIO,
    skew_limit: float = AUTO_SKEW_LIMIT,
) -> DistributionCatalog:
    """Fit a distribution catalog from aggregated stats.

    Pooled mode (the default) merges all ranks of a kernel into one any-rank
    entry; per-rank mode keeps one entry per (kernel, rank). Every kernel in
    ``stats`` ends up in the catalog.
    """
    if not stats:
        raise ValueError("no kernel stats")
    entries: dict = {}
    for kernel in sorted(stats):
        ks = stats[kernel]
        if per_rank:
            for rank, samples in ks.per_rank_samples.items():
                entries[(kernel, rank)] = _pick(samples, policy, tail_ratio, skew_limit)
        else:
            entries[(kernel, None)] = _pick(ks.pooled_samples(), policy, tail_ratio, skew_limit)
    return DistributionCatalog(entries)


# ---------------------------------------------------------------------------
# Synthetic trace generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings: per-rank means drawn from the spatial law, then
    per-iteration durations drawn from the temporal law around each mean."""

    kernels: tuple[tuple[str, float], ...]  # (name, base mean seconds)
    ranks: int = 8
    iterations: int = 50
    spatial_cv: float = 0.05
    temporal_cv: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.spatial_cv < 0 or self.temporal_cv < 0:
            raise ValueError("coefficients of variation must be nonnegative")
        if self.ranks < 1 or self.iterations < 1:
            raise ValueError("ranks and iterations must be >= 1")


def synth_records(spec: SynthSpec) -> list[TraceRecord]:
    rng = np.random.default_rng([spec.seed])
    records: list[TraceRecord] = []
    for name, base in spec.kernels:
        rank_means = base * (1.0 + spec.spatial_cv * rng.standard_normal(spec.ranks))
        rank_means = np.maximum(rank_means, base * 1e-3)
        for rank in range(spec.ranks):
            durs = rank_means[rank] * (
                1.0 + spec.temporal_cv * rng.standard_normal(spec.iterations)
            )
            durs = np.maximum(durs, 0.0)
            for it in range(spec.iterations):
                records.append(TraceRecord(name, rank, it, float(durs[it])))
    return records


def synth_trace(spec: SynthSpec, path) -> list[TraceRecord]:
    """Generate a synthetic trace file; fully deterministic in the seed."""
    records = synth_records(spec)
    write_trace(records, path)
    return records
