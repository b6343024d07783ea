import json
from pathlib import Path

import pytest

from stepsim.cli import main

REPO = Path(__file__).resolve().parent.parent
CONFIGS = REPO / "configs"
DATA = Path(__file__).resolve().parent / "data"


def run_config(tmp_path, out_dir, replicates=300, seed=17, **extra):
    doc = {
        "model": str(CONFIGS / "desk_model.json"),
        "topology": str(CONFIGS / "desk_topology.json"),
        "catalog": str(CONFIGS / "desk_catalog.json"),
        "sim": {"replicates": replicates, "seed": seed},
        "output": {"dir": str(out_dir), "formats": ["json", "csv"], "figures": False},
        **extra,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# synth / ingest
# ---------------------------------------------------------------------------


def test_synth_then_ingest(tmp_path, capsys):
    trace = tmp_path / "trace.jsonl"
    assert main([
        "synth", "--out", str(trace), "--kernels", "gemm=0.004,attn=0.006",
        "--ranks", "4", "--iterations", "12", "--seed", "3",
    ]) == 0
    catalog = tmp_path / "catalog.json"
    assert main(["ingest", str(trace), "--out", str(catalog), "--policy", "gaussian"]) == 0
    out = capsys.readouterr().out
    assert "gemm" in out and "spatial_cv%" in out
    doc = json.loads(catalog.read_text())
    assert set(doc) == {"gemm@*", "attn@*"}  # pooled entries


def test_ingest_empty_trace_strict_fails(tmp_path, capsys):
    trace = tmp_path / "empty.jsonl"
    trace.write_text("")
    code = main(["ingest", str(trace), "--out", str(tmp_path / "c.json"), "--strict"])
    assert code == 2
    assert "no records" in capsys.readouterr().err


def test_ingest_lenient_reports_line_numbers(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    trace.write_text(
        '{"kernel": "k", "rank": 0, "iter": 0, "dur_us": 10}\n'
        "BROKEN\n"
        '{"kernel": "k", "rank": 0, "iter": 1, "dur_us": 11}\n'
    )
    assert main(["ingest", str(trace), "--out", str(tmp_path / "c.json")]) == 0
    assert "line 2" in capsys.readouterr().err


def test_ingest_golden_file_stability(tmp_path):
    out = tmp_path / "catalog.json"
    assert main([
        "ingest", str(DATA / "golden_trace.jsonl"), "--out", str(out),
        "--policy", "gaussian",
    ]) == 0
    assert out.read_bytes() == (DATA / "golden_catalog.json").read_bytes()


def test_ingest_per_rank_mode(tmp_path):
    trace = tmp_path / "trace.jsonl"
    main(["synth", "--out", str(trace), "--kernels", "gemm=0.004",
          "--ranks", "2", "--iterations", "5"])
    catalog = tmp_path / "catalog.json"
    main(["ingest", str(trace), "--out", str(catalog), "--per-rank"])
    assert set(json.loads(catalog.read_text())) == {"gemm@0", "gemm@1"}


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def test_simulate_writes_artifacts_and_echoes_seed(tmp_path, capsys):
    out_dir = tmp_path / "out"
    cfg = run_config(tmp_path, out_dir)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert (out_dir / "result.json").is_file()
    assert (out_dir / "result_ecdf.csv").is_file()
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["sim"]["seed"] == 17
    assert "mean=" in capsys.readouterr().out


def test_simulate_seed_defaulted_and_echoed(tmp_path):
    out_dir = tmp_path / "out"
    doc = {
        "model": str(CONFIGS / "desk_model.json"),
        "topology": str(CONFIGS / "desk_topology.json"),
        "catalog": str(CONFIGS / "desk_catalog.json"),
        "sim": {"replicates": 50},  # no seed given
        "output": {"dir": str(out_dir), "figures": False},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(cfg)]) == 0
    resolved = json.loads((out_dir / "resolved_config.json").read_text())
    assert resolved["sim"]["seed"] == 0


def test_simulate_twice_identical_outputs(tmp_path):
    cfg = run_config(tmp_path, tmp_path / "a")
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "result.json").read_bytes()
    b = (tmp_path / "b" / "result.json").read_bytes()
    assert a == b


def test_simulate_quantiles_converge_with_more_replicates(tmp_path):
    cfg = run_config(tmp_path, tmp_path / "r1", replicates=400)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert main([
        "simulate", "--config", str(cfg), "--replicates", "800",
        "--out-dir", str(tmp_path / "r2"),
    ]) == 0
    small = json.loads((tmp_path / "r1" / "result.json").read_text())
    big = json.loads((tmp_path / "r2" / "result.json").read_text())
    sigma = max(small["sigma"], big["sigma"])
    # Median standard error ~ 1.2533 * sigma / sqrt(R); allow a 5-sigma band.
    bound = 5 * 1.2533 * sigma / (400 ** 0.5)
    assert abs(small["quantiles"]["p50"] - big["quantiles"]["p50"]) < bound


def test_simulate_missing_config_is_input_error(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_simulate_rejects_world_mismatch(tmp_path, capsys):
    cfg = run_config(tmp_path, tmp_path / "out", parallelism={"dp": 4})
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "world" in capsys.readouterr().err


def test_simulate_with_schedule_file(tmp_path):
    # pp=2/m=2 declarative schedule identical to the built-in order.
    model_doc = json.loads((CONFIGS / "desk_model.json").read_text())
    model_doc["parallelism"].update(
        {"pp": 2, "dp": 1, "microbatches": 2, "schedule": "schedule_1f1b_pp2_m2.json"}
    )
    model_path = tmp_path / "model.json"
    model_path.write_text(json.dumps(model_doc))
    (tmp_path / "schedule_1f1b_pp2_m2.json").write_bytes(
        (CONFIGS / "schedule_1f1b_pp2_m2.json").read_bytes()
    )
    topo_doc = json.loads((CONFIGS / "desk_topology.json").read_text())
    topo_doc["counts"]["racks_per_cluster"] = 1
    topo_doc["counts"]["nodes_per_rack"] = 2  # world 8 = tp4 * pp2
    topo_path = tmp_path / "topo.json"
    topo_path.write_text(json.dumps(topo_doc))
    doc = {
        "model": str(model_path),
        "topology": str(topo_path),
        "catalog": str(CONFIGS / "desk_catalog.json"),
        "sim": {"replicates": 50, "seed": 1},
        "output": {"dir": str(tmp_path / "out"), "figures": False},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(cfg)]) == 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_slow_node_cardinality(tmp_path):
    out_dir = tmp_path / "out"
    cfg = run_config(tmp_path, out_dir, replicates=200)
    assert main(["sweep", "slow-node", "--config", str(cfg)]) == 0
    report = json.loads((out_dir / "sweep_slow-node.json").read_text())
    labels = [p["label"] for p in report["points"]]
    assert labels == ["stage0", "stage1", "stage2", "stage3", "spread"]


def test_sweep_tp_size_emits_three_cdf_tables(tmp_path):
    out_dir = tmp_path / "out"
    assert main([
        "sweep", "tp-size", "--sizes", "8,16,72", "--replicates", "500",
        "--seed", "2", "--out-dir", str(out_dir), "--no-figures",
    ]) == 0
    rows = (out_dir / "sweep_tp-size_cdf.csv").read_text().splitlines()
    labels = {line.split(",")[0] for line in rows[1:]}
    assert labels == {"tp8", "tp16", "tp72"}


def test_sweep_cross_dc_emits_three_cdf_tables(tmp_path):
    out_dir = tmp_path / "out"
    doc = {
        "model": str(CONFIGS / "cross_dc_model.json"),
        "topology": str(CONFIGS / "cross_dc_topology.json"),
        "catalog": str(CONFIGS / "cross_dc_catalog.json"),
        "sim": {"replicates": 300, "seed": 3},
        "output": {"dir": str(out_dir), "figures": False},
    }
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    assert main(["sweep", "cross-dc", "--config", str(cfg),
                 "--bandwidths", "5,50,400"]) == 0
    rows = (out_dir / "sweep_cross-dc_cdf.csv").read_text().splitlines()
    labels = {line.split(",")[0] for line in rows[1:]}
    assert labels == {"bw5gbps", "bw50gbps", "bw400gbps"}


def test_sweep_kernel_sensitivity(tmp_path):
    out_dir = tmp_path / "out"
    cfg = run_config(tmp_path, out_dir, replicates=100)
    assert main([
        "sweep", "kernel-sensitivity", "--config", str(cfg),
        "--kernels", "tp_allgather,aux_gemm", "--cvs", "0.1,0.4",
    ]) == 0
    report = json.loads((out_dir / "sweep_kernel-sensitivity.json").read_text())
    assert report["notes"]["ranking"][0] == "tp_allgather"


def test_sweep_unknown_experiment_lists_valid_ids(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "warp-drive"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    for valid in ("slow-node", "tp-size", "kernel-sensitivity", "cross-dc"):
        assert valid in err


def test_sweep_figures_rendered_when_enabled(tmp_path):
    out_dir = tmp_path / "out"
    assert main([
        "sweep", "tp-size", "--sizes", "4,8", "--replicates", "300",
        "--out-dir", str(out_dir),
    ]) == 0
    assert (out_dir / "sweep_tp-size.png").stat().st_size > 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def test_validate_file_against_itself(tmp_path, capsys):
    path = tmp_path / "samples.json"
    path.write_text(json.dumps([1.0, 2.0, 3.0]))
    assert main(["validate", str(path), str(path)]) == 0
    out = capsys.readouterr().out
    assert "mean_error_pct=0.0000" in out
    assert "ks_distance=0.000000" in out


def test_validate_crafted_pair_and_thresholds(tmp_path, capsys):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps([1.0, 2.0, 3.0]))
    b.write_text(json.dumps([2.0, 3.0, 4.0]))
    assert main(["validate", str(a), str(b)]) == 0  # no thresholds: report only
    out = capsys.readouterr().out
    assert "mean_error_pct=33.3333" in out
    assert "ks_distance=0.333333" in out
    # Under thresholds -> 0; over -> 1.
    assert main(["validate", str(a), str(b),
                 "--max-mean-error-pct", "50", "--max-ks", "0.5"]) == 0
    assert main(["validate", str(a), str(b),
                 "--max-mean-error-pct", "10", "--max-ks", "0.5"]) == 1
    assert main(["validate", str(a), str(b), "--max-ks", "0.1"]) == 1


def test_validate_accepts_result_documents(tmp_path):
    res = tmp_path / "res.json"
    res.write_text(json.dumps({"samples": [1.0, 2.0], "mean": 1.5}))
    raw = tmp_path / "raw.json"
    raw.write_text(json.dumps([1.0, 2.0]))
    assert main(["validate", str(res), str(raw)]) == 0


def test_validate_empty_reference_is_input_error(tmp_path, capsys):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps([1.0]))
    b.write_text(json.dumps([]))
    assert main(["validate", str(a), str(b)]) == 2
