"""Edge-path coverage across modules: context parallelism, alternate
slowdown mode, lesser-used loaders and error branches."""

import json

import numpy as np
import pytest

from stepsim.cli import main
from stepsim.distributions import (
    DistributionCatalog,
    Empirical,
    Gaussian,
    PointMass,
    compose_parallel,
    from_percentiles,
)
from stepsim.engine import (
    PerGpuVariation,
    SimConfig,
    SimulationResult,
    apply_perturbation,
    simulate,
)
from stepsim.experiments import cross_dc_bandwidth_sweep
from stepsim.fixtures import (
    cross_dc_catalog,
    cross_dc_model,
    cross_dc_parallelism,
    cross_dc_topology,
)
from stepsim.topology import Topology, default_links
from stepsim.workload import (
    LayerSpec,
    ModelSpec,
    OperatorSpec,
    ParallelismConfig,
    expand_pipeline_schedule,
    validate_dag,
)


# ---------------------------------------------------------------------------
# context parallelism
# ---------------------------------------------------------------------------


def cp_model():
    layer = LayerSpec(
        "l0",
        (
            OperatorSpec("gemm", "compute", "fwd"),
            OperatorSpec("cp_allgather", "collective", "fwd", message_bytes=1 << 20,
                         collective="all_gather", group="cp"),
            OperatorSpec("gemm_bwd", "compute", "bwd"),
        ),
    )
    return ModelSpec("cp", (layer,))


def test_cp_barriers_span_the_cp_dimension():
    par = ParallelismConfig(tp=2, cp=2)
    dag = expand_pipeline_schedule(cp_model(), par)
    barriers = [n for n in dag.nodes.values() if n.kernel == "cp_allgather"]
    # One barrier per tp position, each spanning the cp groups.
    assert len(barriers) == 2
    groups = sorted(b.comm.ranks for b in barriers)
    assert groups == [(0, 2), (1, 3)]  # cp stride is tp with this layout
    validate_dag(dag)


def test_cp_simulation_runs_and_blocks_on_slowest_member():
    par = ParallelismConfig(cp=2)
    catalog = DistributionCatalog(
        {
            ("gemm", None): PointMass(1.0),
            ("gemm", 1): PointMass(3.0),  # slow cp peer
            ("cp_allgather", None): PointMass(0.5),
            ("gemm_bwd", None): PointMass(2.0),
        }
    )
    dag = expand_pipeline_schedule(cp_model(), par)
    res = simulate(dag, catalog, config=SimConfig(replicates=8, seed=0))
    # Barrier waits for the slow member: 3.0 + 0.5 + 2.0.
    assert np.all(res.step_times == 5.5)


# ---------------------------------------------------------------------------
# mean-ratio slowdown mode
# ---------------------------------------------------------------------------


def test_cross_dc_mean_ratio_mode():
    rep = cross_dc_bandwidth_sweep(
        cross_dc_model(), cross_dc_parallelism(), cross_dc_topology(),
        cross_dc_catalog(), bandwidths_gbps=(5.0, 400.0),
        sim=SimConfig(replicates=400, seed=1), slowdown_mode="mean",
    )
    slow, best = rep.point("bw5gbps"), rep.point("bw400gbps")
    assert slow.slowdown_at["mean_ratio"] > 1.05
    assert best.slowdown_at["mean_ratio"] == 1.0


def test_unknown_slowdown_mode_rejected():
    with pytest.raises(ValueError, match="slowdown mode"):
        cross_dc_bandwidth_sweep(
            cross_dc_model(), cross_dc_parallelism(), cross_dc_topology(),
            cross_dc_catalog(), bandwidths_gbps=(5.0, 400.0),
            sim=SimConfig(replicates=50, seed=1), slowdown_mode="geometric",
        )


# ---------------------------------------------------------------------------
# perturbations via topology
# ---------------------------------------------------------------------------


def test_per_gpu_variation_ranks_from_topology():
    topo = Topology(
        {
            "datacenters": 1,
            "clusters_per_datacenter": 1,
            "racks_per_cluster": 1,
            "nodes_per_rack": 1,
            "ranks_per_node": 4,
        },
        default_links(),
    )
    catalog = DistributionCatalog({("k", None): Gaussian(1.0, 0.1)})
    out = apply_perturbation(catalog, PerGpuVariation(rate=1.0, seed=0), topo=topo)
    for r in range(4):
        assert out.lookup("k", r).mu > 1.0
    with pytest.raises(ValueError, match="ranks"):
        apply_perturbation(catalog, PerGpuVariation(rate=1.0, seed=0))


# ---------------------------------------------------------------------------
# distribution edge branches
# ---------------------------------------------------------------------------


def test_with_mean_clamps_at_zero():
    e = Empirical([1.0, 2.0, 3.0]).with_mean(0.1)
    assert np.all(e.samples >= 0.0)


def test_from_percentiles_validation():
    with pytest.raises(ValueError, match="two percentile"):
        from_percentiles({50: 1.0})
    with pytest.raises(ValueError, match="inside"):
        from_percentiles({0: 1.0, 50: 2.0})
    with pytest.raises(ValueError, match="nondecreasing"):
        from_percentiles({10: 2.0, 90: 1.0})


def test_compose_parallel_custom_grid():
    out = compose_parallel([Gaussian(5, 0.5)] * 3, grid_points=512)
    assert out.samples.size == 512


def test_catalog_malformed_key_rejected():
    with pytest.raises(ValueError, match="malformed catalog key"):
        DistributionCatalog.from_json(json.dumps({"norank": {"type": "gaussian", "mu": 1, "sigma": 0}}))
    with pytest.raises(ValueError, match="unknown distribution type"):
        DistributionCatalog.from_json(json.dumps({"k@*": {"type": "cauchy"}}))


def test_simulation_result_json_round_trip():
    res = SimulationResult(np.array([1.0, 2.0, 3.0]), seed=5)
    back = SimulationResult.from_json_obj(res.to_json_obj())
    assert np.array_equal(back.step_times, res.step_times)
    assert back.seed == 5
    assert back.mean == res.mean


# ---------------------------------------------------------------------------
# CLI odds and ends
# ---------------------------------------------------------------------------


def test_cli_ingest_detects_csv(tmp_path):
    csv_path = tmp_path / "trace.csv"
    csv_path.write_text(
        "kernel,rank,iter,dur_us\n" + "".join(f"gemm,0,{i},{1000 + i}\n" for i in range(5))
    )
    out = tmp_path / "catalog.json"
    assert main(["ingest", str(csv_path), "--out", str(out)]) == 0
    assert "gemm@*" in json.loads(out.read_text())


def test_cli_synth_rejects_bad_kernel_spec(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "t.jsonl"), "--kernels", "gemm"])
    assert code == 2
    assert "name=mean_seconds" in capsys.readouterr().err


def test_cli_sweep_tp_size_accepts_trivial_group(tmp_path):
    out_dir = tmp_path / "out"
    assert main([
        "sweep", "tp-size", "--sizes", "1,4", "--replicates", "200",
        "--out-dir", str(out_dir), "--no-figures",
    ]) == 0
    report = json.loads((out_dir / "sweep_tp-size.json").read_text())
    assert [p["label"] for p in report["points"]] == ["tp1", "tp4"]
