"""Hardware hierarchy and network cost model.

A :class:`Topology` is a fixed-shape tree: datacenters contain clusters,
clusters contain racks, racks contain nodes, nodes contain ranks. Traffic
between two ranks is carried by the link of their deepest shared tier, each
tier owning a :class:`LinkSpec` (bandwidth plus an RTT distribution).

Communication costs come from a measured catalog entry when one exists;
otherwise they are synthesized from the standard ring cost model plus the
tier's RTT law per ring step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from stepsim.distributions import (
    DistributionCatalog,
    Empirical,
    LatencyDistribution,
    PointMass,
    compose_serial,
    from_percentiles,
)

__all__ = [
    "TIERS",
    "LinkSpec",
    "Topology",
    "transfer_delay",
    "collective_distribution",
    "default_links",
]

# Innermost to outermost; the tier name is the deepest container shared by the
# communicating ranks.
TIERS = ("node", "rack", "cluster", "datacenter")

_COLLECTIVE_ALIASES = {
    "allreduce": "all_reduce",
    "all_reduce": "all_reduce",
    "allgather": "all_gather",
    "all_gather": "all_gather",
    "reducescatter": "reduce_scatter",
    "reduce_scatter": "reduce_scatter",
    "p2p": "p2p",
    "send": "p2p",
}


def canonical_collective(kind: str) -> str:
    key = kind.strip().lower().replace("-", "_")
    if key not in _COLLECTIVE_ALIASES:
        raise ValueError(f"unknown collective kind {kind!r}")
    return _COLLECTIVE_ALIASES[key]


@dataclass(frozen=True)
class LinkSpec:
    """One tier's interconnect: bandwidth in bits/s plus an RTT distribution."""

    tier: str
    bandwidth_bps: float
    rtt: LatencyDistribution
    distance_km: float | None = None

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError(f"link {self.tier!r}: bandwidth must be positive")
        if self.rtt.quantile(1e-4) < -1e-12:
            raise ValueError(f"link {self.tier!r}: rtt quantiles must be nonnegative")


class Topology:
    """Rank placement tree with per-tier links.

    ``counts`` maps the fan-out at each level; the world size is the product.
    Immutable after construction; all queries are read-only.
    """

    def __init__(
        self,
        counts: Mapping[str, int],
        links: Mapping[str, LinkSpec],
        gpu_model: str = "generic",
    ):
        required = (
            "datacenters",
            "clusters_per_datacenter",
            "racks_per_cluster",
            "nodes_per_rack",
            "ranks_per_node",
        )
        missing = [k for k in required if k not in counts]
        if missing:
            raise ValueError(f"topology counts missing {missing}")
        self.counts = {k: int(counts[k]) for k in required}
        if any(v < 1 for v in self.counts.values()):
            raise ValueError("topology counts must all be >= 1")
        self.links = dict(links)
        for tier in self.links:
            if tier not in TIERS:
                raise ValueError(f"unknown link tier {tier!r}")
        self.gpu_model = gpu_model

    # -- shape ----------------------------------------------------------------

    @property
    def world_size(self) -> int:
        n = 1
        for v in self.counts.values():
            n *= v
        return n

    @property
    def ranks_per_node(self) -> int:
        return self.counts["ranks_per_node"]

    @property
    def num_nodes(self) -> int:
        return self.world_size // self.ranks_per_node

    def coords(self, rank: int) -> tuple[int, int, int, int]:
        """(datacenter, cluster, rack, node) indices local to each parent."""
        if not 0 <= rank < self.world_size:
            raise ValueError(f"unknown rank {rank}")
        node, _ = divmod(rank, self.counts["ranks_per_node"])
        rack, node_in_rack = divmod(node, self.counts["nodes_per_rack"])
        cluster, rack_in_cluster = divmod(rack, self.counts["racks_per_cluster"])
        dc, cluster_in_dc = divmod(cluster, self.counts["clusters_per_datacenter"])
        return dc, cluster_in_dc, rack_in_cluster, node_in_rack

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"unknown rank {rank}")
        return rank // self.counts["ranks_per_node"]

    def ranks_of_node(self, node: int) -> tuple[int, ...]:
        if not 0 <= node < self.num_nodes:
            raise ValueError(f"unknown node {node}")
        k = self.counts["ranks_per_node"]
        return tuple(range(node * k, (node + 1) * k))

    # -- tier resolution --------------------------------------------------------

    def lowest_common_tier(self, rank_a: int, rank_b: int) -> str:
        """Deepest tier containing both ranks; a pure function of the pair."""
        a, b = self.coords(rank_a), self.coords(rank_b)
        if a == b:
            return "node"
        if a[:3] == b[:3]:
            return "rack"
        if a[:2] == b[:2]:
            return "cluster"
        if a[0] == b[0]:
            return "cluster"  # same datacenter, different clusters
        return "datacenter"

    def group_tier(self, ranks: Iterable[int]) -> str:
        """Widest tier any pair within the group spans."""
        ranks = list(ranks)
        if not ranks:
            raise ValueError("empty rank group")
        first = ranks[0]
        widest = "node"
        order = {t: i for i, t in enumerate(TIERS)}
        for r in ranks[1:]:
            tier = self.lowest_common_tier(first, r)
            if order[tier] > order[widest]:
                widest = tier
        return widest

    def link(self, tier: str) -> LinkSpec:
        if tier not in self.links:
            raise ValueError(f"no link spec for tier {tier!r}")
        return self.links[tier]

    # -- serialization ------------------------------------------------------------

    def to_json_obj(self) -> dict:
        links = []
        for tier in TIERS:
            if tier not in self.links:
                continue
            spec = self.links[tier]
            entry: dict = {
                "tier": tier,
                "bandwidth_gbps": spec.bandwidth_bps / 1e9,
                "rtt": spec.rtt.to_json_obj(),
            }
            if spec.distance_km is not None:
                entry["distance_km"] = spec.distance_km
            links.append(entry)
        return {"gpu_model": self.gpu_model, "counts": self.counts, "links": links}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "Topology":
        links = {}
        for entry in obj.get("links", []):
            tier = entry["tier"]
            links[tier] = LinkSpec(
                tier=tier,
                bandwidth_bps=float(entry["bandwidth_gbps"]) * 1e9,
                rtt=_parse_rtt(entry),
                distance_km=entry.get("distance_km"),
            )
        return cls(obj["counts"], links, gpu_model=obj.get("gpu_model", "generic"))

    @classmethod
    def load(cls, path) -> "Topology":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))


def _parse_rtt(entry: Mapping) -> LatencyDistribution:
    """RTT forms accepted in topology files; *_us fields are microseconds."""
    if "rtt" in entry:
        return LatencyDistribution.from_json_obj(entry["rtt"])
    if "rtt_us" in entry:
        return PointMass(float(entry["rtt_us"]) * 1e-6)
    if "rtt_percentiles_us" in entry:
        anchors = {float(k): float(v) * 1e-6 for k, v in entry["rtt_percentiles_us"].items()}
        return from_percentiles(anchors)
    if "rtt_samples_us" in entry:
        return Empirical([float(v) * 1e-6 for v in entry["rtt_samples_us"]])
    raise ValueError(f"link {entry.get('tier')!r}: no rtt specification")


def default_links(cross_dc_gbps: float | None = None) -> dict[str, LinkSpec]:
    """Baseline link set: 8x400 Gbps aggregate cross-rack, 400 Gbps cross-cluster.

    Cross-datacenter bandwidth is a swept parameter and only present when
    requested. Intra-node bandwidth approximates a modern NVLink fabric.
    """
    links = {
        "node": LinkSpec("node", 1600e9, PointMass(2e-6)),
        "rack": LinkSpec("rack", 8 * 400e9, from_percentiles({50: 10e-6, 90: 15e-6, 99: 30e-6})),
        "cluster": LinkSpec("cluster", 400e9, from_percentiles({50: 20e-6, 90: 35e-6, 99: 80e-6})),
    }
    if cross_dc_gbps is not None:
        links["datacenter"] = LinkSpec(
            "datacenter",
            cross_dc_gbps * 1e9,
            from_percentiles({50: 5e-3, 90: 7e-3, 99: 20e-3}),
        )
    return links


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


def transfer_delay(message_bytes: float, link: LinkSpec) -> LatencyDistribution:
    """Law of one transfer: deterministic serialization plus one RTT draw."""
    if message_bytes < 0:
        raise ValueError("message size must be nonnegative")
    if link.bandwidth_bps <= 0:
        raise ValueError("zero bandwidth")
    serialization = message_bytes * 8.0 / link.bandwidth_bps
    return link.rtt.shifted(serialization)


def _pow2_bucket(message_bytes: int) -> int:
    if message_bytes <= 0:
        return 0
    return 2 ** round(math.log2(message_bytes))


def _measured_entry(
    catalog: DistributionCatalog | None, kind: str, tier: str, message_bytes: int
) -> LatencyDistribution | None:
    if catalog is None:
        return None
    for key in (f"{kind}:{tier}:{int(message_bytes)}", f"{kind}:{tier}:{_pow2_bucket(int(message_bytes))}"):
        if (key, None) in catalog:
            return catalog.lookup(key)
    return None


def collective_distribution(
    kind: str,
    message_bytes: int,
    group: Sequence[int],
    topo: Topology,
    catalog: DistributionCatalog | None = None,
) -> LatencyDistribution:
    """Latency law for a collective over ``group``.

    Measured catalog entries (``<kind>:<tier>:<bytes>``, exact size preferred
    over the nearest power-of-two bucket) take precedence and are returned
    verbatim. Otherwise the ring model supplies the bandwidth term and the
    tier's RTT law is accumulated once per ring step.
    """
    kind = canonical_collective(kind)
    ranks = sorted(set(int(r) for r in group))
    if not ranks:
        raise ValueError("empty rank group")
    if len(ranks) == 1:
        return PointMass(0.0)

    tier = topo.group_tier(ranks)
    measured = _measured_entry(catalog, kind, tier, message_bytes)
    if measured is not None:
        return measured

    link = topo.link(tier)
    n = len(ranks)
    bits = float(message_bytes) * 8.0
    if kind == "p2p":
        steps = 1
        serialization = bits / link.bandwidth_bps
    elif kind == "all_reduce":
        steps = 2 * (n - 1)
        serialization = 2.0 * (n - 1) / n * bits / link.bandwidth_bps
    else:  # all_gather / reduce_scatter
        steps = n - 1
        serialization = (n - 1) / n * bits / link.bandwidth_bps
    rtt_total = compose_serial([link.rtt] * steps)
    return rtt_total.shifted(serialization)
