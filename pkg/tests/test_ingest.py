import json
from collections import Counter

import numpy as np
import pytest

from stepsim.distributions import Empirical, Gaussian
from stepsim.ingest import (
    SynthSpec,
    TraceRecord,
    TraceSchemaError,
    aggregate,
    build_catalog,
    parse_trace,
    parse_trace_csv,
    synth_records,
    synth_trace,
    write_trace,
)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


def rec_line(kernel="gemm", rank=0, it=0, dur_us=1000.0, **extra):
    obj = {"kernel": kernel, "rank": rank, "iter": it, "dur_us": dur_us, **extra}
    return json.dumps(obj)


# ---------------------------------------------------------------------------
# parse_trace
# ---------------------------------------------------------------------------


def test_parse_empty_file_lenient(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [])
    result = parse_trace(path)
    assert result.records == [] and result.diagnostics == []


def test_parse_empty_file_strict_errors(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [])
    with pytest.raises(TraceSchemaError, match="no records"):
        parse_trace(path, strict=True)


def test_parse_lenient_skips_malformed_with_line_number(tmp_path):
    path = write_lines(
        tmp_path / "t.jsonl",
        [rec_line(it=0), "{not json", rec_line(it=1)],
    )
    result = parse_trace(path)
    assert len(result.records) == 2
    assert len(result.diagnostics) == 1
    assert "line 2" in result.diagnostics[0]


def test_parse_strict_aborts_on_malformed(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [rec_line(), "{oops"])
    with pytest.raises(TraceSchemaError, match="line 2"):
        parse_trace(path, strict=True)


def test_parse_unknown_field_is_schema_error(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [rec_line(bogus_field=1)])
    with pytest.raises(TraceSchemaError, match="unknown fields"):
        parse_trace(path, strict=True)


def test_parse_negative_duration_is_record_error(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [rec_line(dur_us=-5.0)])
    result = parse_trace(path)
    assert not result.records
    assert "negative duration" in result.diagnostics[0]


def test_parse_duplicate_record_detected(tmp_path):
    path = write_lines(tmp_path / "t.jsonl", [rec_line(), rec_line()])
    result = parse_trace(path)
    assert len(result.records) == 1
    assert "duplicate" in result.diagnostics[0]


def test_optional_fields_survive(tmp_path):
    path = write_lines(
        tmp_path / "t.jsonl", [rec_line(shape="(8,128)", module="mlp.0")]
    )
    rec = parse_trace(path, strict=True).records[0]
    assert rec.shape == "(8,128)"
    assert rec.module == "mlp.0"
    assert rec.duration == 1e-3  # microseconds on the wire, seconds inside


def test_round_trip_synth_parse_identity(tmp_path):
    spec = SynthSpec(
        kernels=(("gemm", 0.004), ("attn", 0.006)),
        ranks=4,
        iterations=10,
        spatial_cv=0.1,
        temporal_cv=0.05,
        seed=3,
    )
    path = tmp_path / "synth.jsonl"
    written = synth_trace(spec, path)
    parsed = parse_trace(path, strict=True).records
    key = lambda r: (r.kernel, r.rank, r.iteration, round(r.duration * 1e9))
    assert Counter(map(key, written)) == Counter(map(key, parsed))


def test_csv_reader_matches_jsonl(tmp_path):
    records = [TraceRecord("gemm", 0, i, 1e-3 * (i + 1)) for i in range(3)]
    jsonl = tmp_path / "t.jsonl"
    write_trace(records, jsonl)
    csv_path = tmp_path / "t.csv"
    csv_path.write_text(
        "kernel,rank,iter,dur_us\n"
        + "".join(f"gemm,0,{i},{1000.0 * (i + 1)}\n" for i in range(3))
    )
    a = parse_trace(jsonl, strict=True).records
    b = parse_trace_csv(csv_path, strict=True).records
    assert [(r.kernel, r.rank, r.iteration, r.duration) for r in a] == [
        (r.kernel, r.rank, r.iteration, r.duration) for r in b
    ]


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------


def test_aggregate_single_rank_constant():
    records = [TraceRecord("k", 0, i, 1.0) for i in range(3)]
    stats = aggregate(records)["k"]
    temporal = stats.temporal[0]
    assert temporal.mean() == 1.0
    assert temporal.std() == 0.0
    assert list(stats.spatial_samples) == [1.0]
    assert stats.spatial_cv == 0.0


def test_aggregate_two_rank_medians():
    records = [TraceRecord("k", 0, i, 1.0) for i in range(3)]
    records += [TraceRecord("k", 1, i, 1.2) for i in range(3)]
    stats = aggregate(records)["k"]
    assert np.allclose(stats.spatial_samples, [1.0, 1.2])
    spread = (stats.spatial_samples.max() - stats.spatial_samples.min())
    assert abs(spread / stats.spatial_samples.min() - 0.2) < 1e-12


def test_aggregate_single_iteration_warns():
    records = [TraceRecord("k", 0, 0, 1.0)]
    with pytest.warns(UserWarning, match="single iteration"):
        stats = aggregate(records)
    assert stats["k"].temporal_cv == 0.0


def test_aggregate_recovers_generator_cvs():
    spec = SynthSpec(
        kernels=(("gemm", 0.004),),
        ranks=64,
        iterations=120,
        spatial_cv=0.05,
        temporal_cv=0.05,
        seed=11,
    )
    stats = aggregate(synth_records(spec))["gemm"]
    assert abs(stats.spatial_cv - 0.05) < 0.01   # within 1 point
    assert abs(stats.temporal_cv - 0.05) < 0.01


def test_aggregate_empty_errors():
    with pytest.raises(ValueError):
        aggregate([])


# ---------------------------------------------------------------------------
# build_catalog
# ---------------------------------------------------------------------------


def stats_from(durs_by_rank, kernel="k"):
    records = [
        TraceRecord(kernel, rank, i, d)
        for rank, durs in durs_by_rank.items()
        for i, d in enumerate(durs)
    ]
    return aggregate(records)


def test_catalog_gaussian_policy():
    stats = stats_from({0: [2.0, 2.0, 2.0]})
    cat = build_catalog(stats, policy="gaussian")
    dist = cat.lookup("k", 0)
    assert isinstance(dist, Gaussian)
    assert dist.mu == 2.0 and dist.sigma == 0.0


def test_catalog_empirical_passthrough():
    stats = stats_from({0: [3.0, 1.0, 2.0]})
    cat = build_catalog(stats, policy="empirical")
    dist = cat.lookup("k", 5)  # pooled entry answers any rank
    assert isinstance(dist, Empirical)
    assert list(dist.samples) == [1.0, 2.0, 3.0]


def test_catalog_auto_picks_empirical_on_heavy_tail():
    # p99/p50 > 3 on this constructed fixture.
    body = [1.0] * 96 + [1.1, 4.0, 5.0, 6.0]
    stats = stats_from({0: body})
    cat = build_catalog(stats, policy="auto")
    assert isinstance(cat.lookup("k", 0), Empirical)


def test_catalog_auto_picks_gaussian_on_clean_data():
    rng = np.random.default_rng(0)
    stats = stats_from({0: list(1.0 + 0.01 * rng.standard_normal(500))})
    cat = build_catalog(stats, policy="auto")
    assert isinstance(cat.lookup("k", 0), Gaussian)


def test_catalog_per_rank_mode():
    stats = stats_from({0: [1.0, 1.0], 1: [2.0, 2.0]})
    cat = build_catalog(stats, policy="gaussian", per_rank=True)
    assert cat.lookup("k", 0).mean() == 1.0
    assert cat.lookup("k", 1).mean() == 2.0


def test_catalog_never_drops_a_kernel():
    records = [TraceRecord(f"k{i}", 0, j, 1.0 + i) for i in range(5) for j in range(3)]
    cat = build_catalog(aggregate(records))
    assert cat.kernels() == [f"k{i}" for i in range(5)]


# ---------------------------------------------------------------------------
# synth_trace
# ---------------------------------------------------------------------------


def test_synth_zero_cv_all_identical(tmp_path):
    spec = SynthSpec(kernels=(("k", 0.002),), ranks=3, iterations=4,
                     spatial_cv=0.0, temporal_cv=0.0, seed=1)
    records = synth_records(spec)
    assert {r.duration for r in records} == {0.002}


def test_synth_same_seed_identical_files(tmp_path):
    spec = SynthSpec(kernels=(("k", 0.002),), ranks=3, iterations=4,
                     spatial_cv=0.1, temporal_cv=0.05, seed=9)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    synth_trace(spec, p1)
    synth_trace(spec, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_synth_gemm_shaped_spatial_spread_recovered():
    # Spread shaped after a wide fleet: 14% spatial CV, recovered within 2 pts.
    spec = SynthSpec(kernels=(("gemm", 0.004),), ranks=64, iterations=200,
                     spatial_cv=0.14, temporal_cv=0.05, seed=21)
    stats = aggregate(synth_records(spec))["gemm"]
    assert abs(stats.spatial_cv - 0.14) < 0.02
    assert abs(stats.temporal_cv - 0.05) < 0.02


def test_synth_rejects_negative_cv():
    with pytest.raises(ValueError):
        SynthSpec(kernels=(("k", 1.0),), spatial_cv=-0.1)
