"""Desk-scale fixtures: small enough for CI, rich enough to exercise every
edge type (serial compute, blocking and overlapped collectives, pipeline
transfers, per-step aggregate work).

The default fixture is a 4-layer transformer-like model at tp=4, pp=4, dp=2
with 8 microbatches; its catalog is fitted from the synthetic trace generator,
so it is fully determined by a seed.
"""

from __future__ import annotations

from stepsim.distributions import DistributionCatalog
from stepsim.ingest import SynthSpec, aggregate, build_catalog, synth_records
from stepsim.topology import Topology, default_links
from stepsim.workload import LayerSpec, ModelSpec, OperatorSpec, ParallelismConfig

__all__ = [
    "desk_model",
    "desk_parallelism",
    "desk_topology",
    "desk_catalog",
    "DESK_KERNEL_MEANS",
    "cross_dc_model",
    "cross_dc_parallelism",
    "cross_dc_topology",
    "cross_dc_catalog",
]

# Base kernel means in seconds; backward roughly doubles its forward twin.
DESK_KERNEL_MEANS = {
    "qkv_gemm": 0.004,
    "attn_gemm": 0.006,
    "mlp_gemm": 0.005,
    "aux_gemm": 0.001,
    "tp_allgather": 0.003,
    "tp_reducescatter": 0.003,
    "qkv_bwd": 0.008,
    "attn_bwd": 0.012,
    "mlp_bwd": 0.010,
    "tp_allgather_bwd": 0.003,
    "grad_allreduce": 0.008,
    "optimizer": 0.010,
    "pp_send_fwd": 0.0005,
    "pp_send_bwd": 0.0005,
}

_MB32 = 32 * 1024 * 1024
_MB256 = 256 * 1024 * 1024


def _layer(i: int) -> LayerSpec:
    return LayerSpec(
        f"block{i}",
        (
            OperatorSpec("qkv_gemm", "compute", "fwd"),
            OperatorSpec("tp_allgather", "collective", "fwd", message_bytes=_MB32,
                         collective="all_gather", group="tp"),
            OperatorSpec("attn_gemm", "compute", "fwd"),
            # Small overlapped kernel: off the critical path by construction.
            OperatorSpec("aux_gemm", "compute", "fwd", overlap=True),
            OperatorSpec("mlp_gemm", "compute", "fwd"),
            OperatorSpec("tp_reducescatter", "collective", "fwd", message_bytes=_MB32,
                         collective="reduce_scatter", group="tp"),
            OperatorSpec("mlp_bwd", "compute", "bwd"),
            OperatorSpec("tp_allgather_bwd", "collective", "bwd", message_bytes=_MB32,
                         collective="all_gather", group="tp"),
            OperatorSpec("attn_bwd", "compute", "bwd"),
            OperatorSpec("qkv_bwd", "compute", "bwd"),
        ),
    )


def desk_model() -> ModelSpec:
    return ModelSpec(
        name="desk-transformer",
        layers=tuple(_layer(i) for i in range(4)),
        step_ops=(
            OperatorSpec("grad_allreduce", "collective", "bwd", message_bytes=_MB256,
                         collective="all_reduce", group="dp", overlap=True),
            OperatorSpec("optimizer", "compute", "bwd"),
        ),
        activation_bytes=16 * 1024 * 1024,
        batch={"global_batch": 64, "microbatch": 8},
    )


def desk_parallelism() -> ParallelismConfig:
    return ParallelismConfig(tp=4, pp=4, dp=2, cp=1, microbatches=8)


def desk_topology() -> Topology:
    counts = {
        "datacenters": 1,
        "clusters_per_datacenter": 1,
        "racks_per_cluster": 2,
        "nodes_per_rack": 4,
        "ranks_per_node": 4,  # one TP group per node
    }
    return Topology(counts, default_links(), gpu_model="H100")


def desk_catalog(seed: int = 17, policy: str = "gaussian") -> DistributionCatalog:
    """Pooled catalog fitted from a synthetic fleet trace (one seed in, one
    catalog out)."""
    spec = SynthSpec(
        kernels=tuple(sorted(DESK_KERNEL_MEANS.items())),
        ranks=8,
        iterations=60,
        spatial_cv=0.03,
        temporal_cv=0.05,
        seed=seed,
    )
    return build_catalog(aggregate(synth_records(spec)), policy=policy)


# ---------------------------------------------------------------------------
# Two-datacenter fixture for the cross-DC bandwidth sweep
# ---------------------------------------------------------------------------

CROSS_DC_KERNEL_MEANS = {
    "fwd_block": 0.05,
    "bwd_block": 0.10,
    "tp_allgather": 0.004,
    "optimizer": 0.02,
}


def cross_dc_model() -> ModelSpec:
    layers = tuple(
        LayerSpec(
            f"block{i}",
            (
                OperatorSpec("fwd_block", "compute", "fwd"),
                OperatorSpec("tp_allgather", "collective", "fwd", message_bytes=_MB32,
                             collective="all_gather", group="tp"),
                OperatorSpec("bwd_block", "compute", "bwd"),
            ),
        )
        for i in range(4)
    )
    return ModelSpec(
        name="cross-dc",
        layers=layers,
        step_ops=(OperatorSpec("optimizer", "compute", "bwd"),),
        activation_bytes=64 * 1024 * 1024,
    )


def cross_dc_parallelism() -> ParallelismConfig:
    return ParallelismConfig(tp=2, pp=4, dp=1, cp=1, microbatches=4)


def cross_dc_topology(cross_dc_gbps: float = 50.0) -> Topology:
    # Pipeline parallelism is the outermost dimension, so the middle stage
    # boundary is the one crossing the datacenter link.
    counts = {
        "datacenters": 2,
        "clusters_per_datacenter": 1,
        "racks_per_cluster": 1,
        "nodes_per_rack": 2,
        "ranks_per_node": 2,
    }
    return Topology(counts, default_links(cross_dc_gbps=cross_dc_gbps), gpu_model="H100")


def cross_dc_catalog(seed: int = 29) -> DistributionCatalog:
    spec = SynthSpec(
        kernels=tuple(sorted(CROSS_DC_KERNEL_MEANS.items())),
        ranks=4,
        iterations=60,
        spatial_cv=0.02,
        temporal_cv=0.04,
        seed=seed,
    )
    # No pp_send entries on purpose: boundary transfers are synthesized from
    # the topology so the bandwidth sweep actually bites.
    return build_catalog(aggregate(synth_records(spec)), policy="gaussian")
