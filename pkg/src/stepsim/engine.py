"""Monte Carlo simulation of the execution DAG's step-time distribution.

Each replicate draws one latency per task node and evaluates the makespan:
serial edges chain, join barriers take the max of their members' finish times,
pipeline edges are ordinary precedence constraints. Sampling is a single
uniform per node pushed through the node's inverse CDF, so draw counts per
node are constant across catalogs and seed-coupled runs stay comparable.

Two parallelization-aware shortcuts keep the sampled node count small:

* pure serial runs of parametric nodes within a rank are pre-composed into
  Gaussian super-nodes (means and variances add; empirical members end a
  chain so their shapes survive), and
* data-parallel replicas are simulated once per distinct configuration and
  combined through the CDF product of the maximum.

Determinism contract: replicates are processed in fixed blocks of
``REPLICATE_BLOCK``; block ``b`` owns the generator seeded with
``(seed, 0, b)``. Results are therefore a pure function of
(dag, catalog, config) and independent of how blocks are executed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from stepsim.distributions import (
    DistributionCatalog,
    Empirical,
    Gaussian,
    LatencyDistribution,
    PointMass,
    UnknownKernelError,
    compose_parallel,
    compose_serial,
    gaussian_inverse_cdf,
    ks_distance,
)
from stepsim.topology import Topology
from stepsim.workload import (
    ExecutionDag,
    ModelSpec,
    ParallelismConfig,
    expand_pipeline_schedule,
    resolve_node,
    validate_dag,
)

__all__ = [
    "SimConfig",
    "SimulationResult",
    "SimulationTooLarge",
    "RankFlip",
    "NodeAtPercentile",
    "PerGpuVariation",
    "KernelSigmaScale",
    "simulate",
    "simulate_training_step",
    "critical_path_deterministic",
    "apply_perturbation",
    "shift_all_to_quantile",
    "pin_all_at_quantile",
    "validate_against_reference",
    "REPLICATE_BLOCK",
]

REPLICATE_BLOCK = 4096


class SimulationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    replicates: int = 1000
    seed: int = 0
    use_shortcuts: bool = True
    max_node_samples: float = 5e8

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


class SimulationResult:
    """Sampled step times plus derived statistics.

    ``mean`` and ``sigma`` are computed from the samples at construction and
    stay bit-recomputable from them.
    """

    def __init__(self, step_times: np.ndarray, seed: int = 0):
        self.step_times = np.asarray(step_times, dtype=float)
        if self.step_times.size == 0:
            raise ValueError("empty result")
        self.seed = seed
        self.mean = float(self.step_times.mean())
        self.sigma = float(self.step_times.std())
        # Debug payload, populated only when simulate(..., keep_draws=True).
        self.draws: np.ndarray | None = None
        self.node_ids: list[str] | None = None
        self.node_preds: list[list[int]] | None = None

    @property
    def replicates(self) -> int:
        return self.step_times.size

    def quantile(self, p) -> float:
        return float(np.quantile(self.step_times, p))

    def quantiles(self, ps: Sequence[float] = (0.05, 0.5, 0.95, 0.99)) -> dict[str, float]:
        return {f"p{round(p * 100):d}": self.quantile(p) for p in ps}

    def ecdf(self) -> tuple[np.ndarray, np.ndarray]:
        xs = np.sort(self.step_times)
        return xs, np.arange(1, xs.size + 1) / xs.size

    def to_json_obj(self) -> dict:
        return {
            "samples": self.step_times.tolist(),
            "mean": self.mean,
            "sigma": self.sigma,
            "quantiles": self.quantiles(),
            "replicates": self.replicates,
            "seed": self.seed,
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "SimulationResult":
        return cls(np.asarray(obj["samples"], dtype=float), seed=obj.get("seed", 0))

    def __repr__(self):
        return (
            f"SimulationResult(R={self.replicates}, mean={self.mean:.6g}, "
            f"sigma={self.sigma:.3g})"
        )


@dataclass(frozen=True)
class RankFlip:
    """Per-replicate rank selection between two catalogs.

    Every replicate redraws, per rank, a Bernoulli(prob) choice between the
    baseline catalog and ``catalog`` (typically the everything-shifted one).
    All kernels of a selected rank flip together, modeling a slow device
    rather than independent slow kernels.
    """

    prob: float
    catalog: DistributionCatalog

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")


# ---------------------------------------------------------------------------
# DAG compilation
# ---------------------------------------------------------------------------


@dataclass
class _Structure:
    nodes: list  # TaskNode, topo order
    ids: list[str]
    groups: list[list[int]]  # member node positions per sampled group
    gpreds: list[list[int]]
    granks: list[int]


def _compile_structure(
    dag: ExecutionDag, use_shortcuts: bool, mergeable: Sequence[bool] | None = None
) -> _Structure:
    order = dag.topological_order()
    index = {nid: i for i, nid in enumerate(order)}
    nodes = [dag.nodes[nid] for nid in order]
    preds = [list(dict.fromkeys(index[p] for p in dag.preds(nid))) for nid in order]
    succs: list[list[int]] = [[] for _ in order]
    for j, ps in enumerate(preds):
        for p in ps:
            succs[p].append(j)

    chain_head = list(range(len(order)))
    if use_shortcuts:
        # A node joins its predecessor's chain when the link is the only edge
        # on both sides, both nodes live on the same rank, and both carry a
        # parametric law (empirical shapes are kept, not summarized away).
        for j in range(len(order)):
            ps = preds[j]
            if len(ps) != 1:
                continue
            u = ps[0]
            if mergeable is not None and not (mergeable[u] and mergeable[j]):
                continue
            if len(succs[u]) == 1 and nodes[u].rank == nodes[j].rank:
                chain_head[j] = chain_head[u]

    members: dict[int, list[int]] = {}
    for j, head in enumerate(chain_head):
        members.setdefault(head, []).append(j)
    heads = sorted(members)
    gindex = {head: g for g, head in enumerate(heads)}
    groups = [members[h] for h in heads]
    gpreds = []
    for h in heads:
        mapped = list(dict.fromkeys(gindex[chain_head[p]] for p in preds[h]))
        gpreds.append(mapped)
    granks = [nodes[h].rank for h in heads]
    return _Structure(nodes, order, groups, gpreds, granks)


def _node_dists(
    dag: ExecutionDag, catalog: DistributionCatalog | None, topo: Topology | None
) -> list[LatencyDistribution]:
    return [
        resolve_node(dag.nodes[nid], catalog, topo) for nid in dag.topological_order()
    ]


def _is_parametric(dist: LatencyDistribution) -> bool:
    return isinstance(dist, (Gaussian, PointMass))


def _group_dists(
    structure: _Structure, node_dists: Sequence[LatencyDistribution]
) -> list[LatencyDistribution]:
    dists = []
    for grp in structure.groups:
        ds = [node_dists[i] for i in grp]
        dists.append(ds[0] if len(ds) == 1 else compose_serial(ds))
    return dists


def _make_sampler(dists: Sequence[LatencyDistribution]):
    """Vectorised uniform-to-duration transform over all sampled groups."""
    gauss_idx, gauss_mu, gauss_sigma, gauss_neg = [], [], [], []
    point_idx, point_val = [], []
    emp: list[tuple[int, LatencyDistribution]] = []
    for j, d in enumerate(dists):
        if isinstance(d, Gaussian):
            gauss_idx.append(j)
            gauss_mu.append(d.mu)
            gauss_sigma.append(d.sigma)
            gauss_neg.append(d.allow_negative)
        elif isinstance(d, PointMass):
            point_idx.append(j)
            point_val.append(d.value)
        else:
            emp.append((j, d))
    gauss_idx = np.asarray(gauss_idx, dtype=int)
    gauss_mu = np.asarray(gauss_mu)
    gauss_sigma = np.asarray(gauss_sigma)
    gauss_neg = np.asarray(gauss_neg, dtype=bool)
    point_idx = np.asarray(point_idx, dtype=int)
    point_val = np.asarray(point_val)

    def draw(u: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        if gauss_idx.size:
            cols = gaussian_inverse_cdf(u[:, gauss_idx], gauss_mu, gauss_sigma, True)
            clamp = ~gauss_neg
            if clamp.any():
                cols[:, clamp] = np.maximum(cols[:, clamp], 0.0)
            out[:, gauss_idx] = cols
        if point_idx.size:
            out[:, point_idx] = point_val
        for j, d in emp:
            out[:, j] = d.inverse_cdf(u[:, j])
        return out

    return draw


def _evaluate(durations: np.ndarray, gpreds: Sequence[Sequence[int]]) -> np.ndarray:
    """Longest-path finish times under precedence; returns per-row makespans."""
    finish = np.empty_like(durations)
    for j, ps in enumerate(gpreds):
        if not ps:
            finish[:, j] = durations[:, j]
        elif len(ps) == 1:
            np.add(finish[:, ps[0]], durations[:, j], out=finish[:, j])
        else:
            acc = np.maximum(finish[:, ps[0]], finish[:, ps[1]])
            for q in ps[2:]:
                acc = np.maximum(acc, finish[:, q])
            np.add(acc, durations[:, j], out=finish[:, j])
    return finish.max(axis=1)


# ---------------------------------------------------------------------------
# Simulation entry points
# ---------------------------------------------------------------------------


def simulate(
    dag: ExecutionDag,
    catalog: DistributionCatalog,
    topo: Topology | None = None,
    config: SimConfig | None = None,
    *,
    rank_flip: RankFlip | None = None,
    keep_draws: bool = False,
) -> SimulationResult:
    """Sample ``config.replicates`` step times from the DAG.

    Raises :class:`SimulationTooLarge` when replicates x sampled nodes exceed
    the configured budget (the error suggests enabling shortcuts for a
    reason: chain pre-composition typically shrinks the graph severalfold).
    """
    config = config or SimConfig()
    validate_dag(dag, catalog, topo)
    node_dists = _node_dists(dag, catalog, topo)
    alt_node_dists = (
        _node_dists(dag, rank_flip.catalog, topo) if rank_flip is not None else None
    )
    mergeable = [
        _is_parametric(d)
        and (alt_node_dists is None or _is_parametric(alt_node_dists[i]))
        for i, d in enumerate(node_dists)
    ]
    structure = _compile_structure(dag, config.use_shortcuts, mergeable)
    n = len(structure.groups)
    total = config.replicates * max(n, 1)
    if total > config.max_node_samples:
        raise SimulationTooLarge(
            f"simulation too large: {config.replicates} replicates x {n} nodes "
            f"= {total:.3g} samples exceeds the budget of "
            f"{config.max_node_samples:.3g}; enable shortcuts or reduce replicates"
        )
    if n == 0:
        return SimulationResult(np.zeros(config.replicates), seed=config.seed)

    sampler = _make_sampler(_group_dists(structure, node_dists))
    if rank_flip is not None:
        alt_sampler = _make_sampler(_group_dists(structure, alt_node_dists))
        unique_ranks = sorted(set(structure.granks))
        rank_col = np.asarray(
            [unique_ranks.index(r) for r in structure.granks], dtype=int
        )

    out = np.empty(config.replicates)
    draw_blocks: list[np.ndarray] = []
    for b in range(0, math.ceil(config.replicates / REPLICATE_BLOCK)):
        lo = b * REPLICATE_BLOCK
        hi = min(lo + REPLICATE_BLOCK, config.replicates)
        rng = np.random.default_rng([config.seed, 0, b])
        u = rng.random((hi - lo, n))
        durations = sampler(u)
        if rank_flip is not None:
            flips = rng.random((hi - lo, len(unique_ranks))) < rank_flip.prob
            durations = np.where(flips[:, rank_col], alt_sampler(u), durations)
        out[lo:hi] = _evaluate(durations, structure.gpreds)
        if keep_draws:
            draw_blocks.append(durations)

    result = SimulationResult(out, seed=config.seed)
    if keep_draws:
        result.draws = np.concatenate(draw_blocks, axis=0)
        result.node_ids = [structure.ids[grp[0]] for grp in structure.groups]
        result.node_preds = [list(ps) for ps in structure.gpreds]
    return result


def critical_path_deterministic(
    dag: ExecutionDag,
    catalog: DistributionCatalog,
    topo: Topology | None = None,
    use_shortcuts: bool = True,
) -> float:
    """Exact longest path with every node collapsed to its mean.

    Equals a zero-variance simulation bit for bit, because the simulation's
    inverse transform returns exactly ``mu`` when sigma is zero.
    """
    validate_dag(dag, catalog, topo)
    node_dists = _node_dists(dag, catalog, topo)
    mergeable = [_is_parametric(d) for d in node_dists]
    structure = _compile_structure(dag, use_shortcuts, mergeable)
    if not structure.groups:
        return 0.0
    means = np.asarray([[d.mean() for d in _group_dists(structure, node_dists)]])
    return float(_evaluate(means, structure.gpreds)[0])


def _per_rank_kernel_map(catalog: DistributionCatalog) -> dict[str, dict[int, LatencyDistribution]]:
    per_rank: dict[str, dict[int, LatencyDistribution]] = {}
    for (kernel, rank), dist in catalog.items():
        if rank is not None:
            per_rank.setdefault(kernel, {})[rank] = dist
    return per_rank


def _replica_signature(
    per_rank: Mapping[str, Mapping[int, LatencyDistribution]],
    par: ParallelismConfig,
    replica: int,
) -> tuple:
    """Positional fingerprint of one data-parallel replica's catalog overrides."""
    parts = []
    for kernel in sorted(per_rank):
        entries = per_rank[kernel]
        for s in range(par.pp):
            for c in range(par.cp):
                for t in range(par.tp):
                    dist = entries.get(par.rank_of(s, replica, c, t))
                    if dist is not None:
                        parts.append(
                            (kernel, s, c, t,
                             json.dumps(dist.to_json_obj(), sort_keys=True))
                        )
    return tuple(parts)


def _replica_groups(
    catalog: DistributionCatalog, par: ParallelismConfig
) -> list[tuple[int, int]]:
    """Group replicas by configuration: (representative replica, count) pairs,
    in first-occurrence order."""
    per_rank = _per_rank_kernel_map(catalog)
    groups: dict[tuple, list[int]] = {}
    for d in range(par.dp):
        groups.setdefault(_replica_signature(per_rank, par, d), []).append(d)
    return [(members[0], len(members)) for members in groups.values()]


def _catalog_for_replica(
    catalog: DistributionCatalog, par: ParallelismConfig, replica: int
) -> DistributionCatalog:
    """Remap replica ``replica``'s per-rank entries onto replica 0's ranks so
    the single-replica expansion resolves to that replica's configuration."""
    if replica == 0:
        return catalog
    rep0_ranks = {
        par.rank_of(s, 0, c, t)
        for s in range(par.pp)
        for c in range(par.cp)
        for t in range(par.tp)
    }
    entries: dict = {}
    for (kernel, rank), dist in catalog.items():
        if rank is None or rank not in rep0_ranks:
            entries[(kernel, rank)] = dist
    for (kernel, rank), dist in catalog.items():
        if rank is None:
            continue
        s, d, c, t = par.coords_of(rank)
        if d == replica:
            entries[(kernel, par.rank_of(s, 0, c, t))] = dist
    return DistributionCatalog(entries)


def simulate_training_step(
    model: ModelSpec,
    par: ParallelismConfig,
    catalog: DistributionCatalog,
    topo: Topology | None = None,
    config: SimConfig | None = None,
    *,
    schedule: list[list[tuple[int, str]]] | None = None,
    rank_flip: RankFlip | None = None,
    dp_shortcut: bool | None = None,
) -> SimulationResult:
    """Expand and simulate one training step.

    With shortcuts on, data-parallel replicas are simulated once per distinct
    replica configuration (replicas grouped by the positional fingerprint of
    their catalog overrides) and combined through the CDF product of the
    maximum. The automatic mode engages this only when it actually shares
    work (fewer groups than replicas); per-replicate rank flips additionally
    require a pooled-only catalog so replicas stay exchangeable.
    ``dp_shortcut`` pins the choice; sweeps pin it so baseline and perturbed
    runs share one sampling path and stay seed-coupled.
    """
    config = config or SimConfig()
    pooled_only = all(rank is None for (_, rank), _ in catalog.items())
    groups = [(0, par.dp)]
    if par.dp > 1 and rank_flip is None and not pooled_only:
        groups = _replica_groups(catalog, par)

    if dp_shortcut is None:
        symmetric_enough = pooled_only if rank_flip is not None else len(groups) < par.dp
        use_dp_shortcut = config.use_shortcuts and par.dp > 1 and symmetric_enough
    elif dp_shortcut:
        if rank_flip is not None and not pooled_only:
            raise ValueError(
                "dp shortcut with per-replicate rank flips requires a "
                "rank-symmetric (pooled-only) catalog"
            )
        use_dp_shortcut = par.dp > 1
    else:
        use_dp_shortcut = False

    if use_dp_shortcut:
        dag = expand_pipeline_schedule(model, par, schedule, replicate_dp=False)
        parts = []
        for representative, count in groups:
            replica = simulate(
                dag,
                _catalog_for_replica(catalog, par, representative),
                topo,
                config,
                rank_flip=rank_flip,
            )
            parts.extend([Empirical(replica.step_times)] * count)
        combined = compose_parallel(parts)
        rng = np.random.default_rng([config.seed, 1])
        samples = combined.inverse_cdf(rng.random(config.replicates))
        return SimulationResult(samples, seed=config.seed)
    dag = expand_pipeline_schedule(model, par, schedule, replicate_dp=True)
    return simulate(dag, catalog, topo, config, rank_flip=rank_flip)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeAtPercentile:
    """Pin one compute node's kernels at their own percentile ``p``.

    Every kernel entry on the node's ranks gets its mean replaced by its own
    quantile(p) with sigma preserved. Applying the perturbation twice shifts
    twice (the quantile is recomputed from the current entry): deliberately
    NOT idempotent.
    """

    node: int
    p: float
    ranks: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("percentile must lie in (0, 1)")


@dataclass(frozen=True)
class PerGpuVariation:
    """Independently select each rank with probability ``rate``; selected
    ranks get their kernel means moved to the original quantile ``p``.

    The assignment is drawn once from ``seed`` (persistent hardware skew).
    Per-replicate redraw is available through the engine's ``RankFlip``."""

    rate: float
    p: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must lie in [0, 1]")
        if not 0.0 < self.p < 1.0:
            raise ValueError("percentile must lie in (0, 1)")


@dataclass(frozen=True)
class KernelSigmaScale:
    """Set one kernel's sigma to ``cv * mean`` with the mean preserved."""

    kernel: str
    cv: float

    def __post_init__(self):
        if self.cv < 0:
            raise ValueError("cv must be nonnegative")


Perturbation = NodeAtPercentile | PerGpuVariation | KernelSigmaScale


def _shift_ranks(
    catalog: DistributionCatalog, target_ranks: Iterable[int], p: float
) -> DistributionCatalog:
    targets = set(int(r) for r in target_ranks)
    updates: dict = {}
    for (kernel, rank), dist in catalog.items():
        if rank is not None and rank in targets:
            updates[(kernel, rank)] = dist.with_mean(dist.quantile(p))
        elif rank is None:
            for r in targets:
                if (kernel, r) not in catalog:
                    updates[(kernel, r)] = dist.with_mean(dist.quantile(p))
    return catalog.with_entries(updates)


def shift_all_to_quantile(catalog: DistributionCatalog, p: float) -> DistributionCatalog:
    """Every entry's mean moved to its own quantile(p); shape preserved."""
    return DistributionCatalog(
        {key: dist.with_mean(dist.quantile(p)) for key, dist in catalog.items()}
    )


def pin_all_at_quantile(catalog: DistributionCatalog, p: float) -> DistributionCatalog:
    """Every entry collapsed to a point mass at its own quantile(p)."""
    return DistributionCatalog(
        {key: PointMass(dist.quantile(p)) for key, dist in catalog.items()}
    )


def apply_perturbation(
    catalog: DistributionCatalog,
    pert: Perturbation,
    *,
    topo: Topology | None = None,
    ranks: Sequence[int] | None = None,
) -> DistributionCatalog:
    """Build the perturbed catalog; the input catalog is never modified."""
    if isinstance(pert, NodeAtPercentile):
        if pert.ranks is not None:
            targets = pert.ranks
        elif topo is not None:
            targets = topo.ranks_of_node(pert.node)
        else:
            raise ValueError("node_at_percentile needs a topology or explicit ranks")
        return _shift_ranks(catalog, targets, pert.p)

    if isinstance(pert, PerGpuVariation):
        if ranks is None:
            if topo is None:
                raise ValueError("per_gpu_variation needs the world's ranks")
            ranks = range(topo.world_size)
        ranks = list(ranks)
        rng = np.random.default_rng([pert.seed])
        selected = [r for r, u in zip(ranks, rng.random(len(ranks))) if u < pert.rate]
        return _shift_ranks(catalog, selected, pert.p)

    if isinstance(pert, KernelSigmaScale):
        updates: dict = {}
        for (kernel, rank), dist in catalog.items():
            if kernel == pert.kernel:
                updates[(kernel, rank)] = dist.with_sigma(pert.cv * dist.mean())
        if not updates:
            raise UnknownKernelError(f"no catalog entry for kernel {pert.kernel!r}")
        return catalog.with_entries(updates)

    raise TypeError(f"unknown perturbation {pert!r}")


# ---------------------------------------------------------------------------
# Validation against reference measurements
# ---------------------------------------------------------------------------


def validate_against_reference(result, reference_samples) -> dict[str, float]:
    """Relative mean error (percent) and two-sample KS distance."""
    res = np.asarray(
        result.step_times if isinstance(result, SimulationResult) else result,
        dtype=float,
    ).ravel()
    ref = np.asarray(
        reference_samples.step_times
        if isinstance(reference_samples, SimulationResult)
        else reference_samples,
        dtype=float,
    ).ravel()
    if res.size == 0 or ref.size == 0:
        raise ValueError("empty sample set")
    mean_error_pct = abs(res.mean() - ref.mean()) / ref.mean() * 100.0
    return {"mean_error_pct": float(mean_error_pct), "ks_distance": ks_distance(res, ref)}
