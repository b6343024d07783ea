"""Probabilistic step-time simulator for large-scale distributed training.

Kernel latencies are distributions, composed serially (sum), in parallel
(max via CDF product), or through Monte Carlo evaluation of the pipeline
execution DAG, yielding the full distribution of training-step time under
injected variability scenarios.
"""

from stepsim.distributions import (
    DistributionCatalog,
    Empirical,
    Gaussian,
    LatencyDistribution,
    PointMass,
    UnknownKernelError,
    compose_parallel,
    compose_serial,
    fit_gaussian,
    from_percentiles,
    ks_distance,
)
from stepsim.engine import (
    KernelSigmaScale,
    NodeAtPercentile,
    PerGpuVariation,
    RankFlip,
    SimConfig,
    SimulationResult,
    apply_perturbation,
    critical_path_deterministic,
    simulate,
    simulate_training_step,
    validate_against_reference,
)
from stepsim.ingest import (
    SynthSpec,
    TraceRecord,
    aggregate,
    build_catalog,
    parse_trace,
    synth_trace,
)
from stepsim.topology import LinkSpec, Topology, collective_distribution, transfer_delay
from stepsim.workload import (
    ExecutionDag,
    LayerSpec,
    ModelSpec,
    OperatorSpec,
    ParallelismConfig,
    build_rank_graph,
    expand_pipeline_schedule,
    validate_dag,
)

__version__ = "0.1.0"
