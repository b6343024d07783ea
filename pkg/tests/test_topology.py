import numpy as np
import pytest

from stepsim.distributions import DistributionCatalog, Empirical, Gaussian, PointMass
from stepsim.topology import (
    LinkSpec,
    Topology,
    collective_distribution,
    default_links,
    transfer_delay,
)


def make_topo(
    datacenters=1, clusters=1, racks=1, nodes=2, ranks_per_node=8, links=None
):
    counts = {
        "datacenters": datacenters,
        "clusters_per_datacenter": clusters,
        "racks_per_cluster": racks,
        "nodes_per_rack": nodes,
        "ranks_per_node": ranks_per_node,
    }
    return Topology(counts, links if links is not None else default_links(cross_dc_gbps=50))


# ---------------------------------------------------------------------------
# tier resolution
# ---------------------------------------------------------------------------


def test_same_node_tier():
    topo = make_topo()
    assert topo.lowest_common_tier(0, 1) == "node"


def test_cross_node_same_rack_tier():
    topo = make_topo(nodes=2, ranks_per_node=8)
    assert topo.lowest_common_tier(0, 8) == "rack"


def test_cross_datacenter_tier():
    topo = make_topo(datacenters=2, nodes=1, ranks_per_node=8)
    first_of_dc0, first_of_dc1 = 0, 8
    assert topo.lowest_common_tier(first_of_dc0, first_of_dc1) == "datacenter"


def test_tier_is_a_function_of_the_pair():
    topo = make_topo(datacenters=2, clusters=2, racks=2, nodes=2, ranks_per_node=4)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.integers(0, topo.world_size, size=2)
        assert topo.lowest_common_tier(a, b) == topo.lowest_common_tier(a, b)
        assert topo.lowest_common_tier(a, b) == topo.lowest_common_tier(b, a)


def test_unknown_rank_errors():
    topo = make_topo()
    with pytest.raises(ValueError, match="unknown rank"):
        topo.lowest_common_tier(0, topo.world_size)


def test_world_size_is_product_of_counts():
    topo = make_topo(datacenters=2, clusters=3, racks=2, nodes=2, ranks_per_node=4)
    assert topo.world_size == 2 * 3 * 2 * 2 * 4
    assert topo.ranks_of_node(0) == (0, 1, 2, 3)
    assert topo.node_of(5) == 1


# ---------------------------------------------------------------------------
# transfer_delay
# ---------------------------------------------------------------------------


def test_zero_message_zero_rtt():
    link = LinkSpec("rack", 400e9, PointMass(0.0))
    d = transfer_delay(0, link)
    assert d.mean() == 0.0
    assert d.std() == 0.0


def test_one_gb_over_50_gbps():
    link = LinkSpec("datacenter", 50e9, PointMass(0.0))
    d = transfer_delay(1_000_000_000, link)
    assert d.mean() == 0.16


def test_bandwidth_must_be_positive():
    with pytest.raises(ValueError, match="bandwidth"):
        LinkSpec("rack", 0.0, PointMass(0.0))


def test_transfer_delay_monotonicity():
    rtt = Gaussian(1e-3, 1e-4)
    sweep_bw = [5e9, 50e9, 400e9]  # swept cross-datacenter settings
    means = [transfer_delay(10**9, LinkSpec("datacenter", bw, rtt)).mean() for bw in sweep_bw]
    assert means[0] > means[1] > means[2]
    sizes = [10**6, 10**8, 10**9]
    means = [transfer_delay(s, LinkSpec("datacenter", 50e9, rtt)).mean() for s in sizes]
    assert means[0] < means[1] < means[2]


def test_transfer_delay_keeps_rtt_variance():
    rtt = Gaussian(1e-3, 2e-4)
    d = transfer_delay(10**9, LinkSpec("datacenter", 50e9, rtt))
    assert abs(d.mean() - (0.16 + 1e-3)) < 1e-12
    assert d.std() == 2e-4


# ---------------------------------------------------------------------------
# collective_distribution
# ---------------------------------------------------------------------------


def test_group_of_one_is_free():
    topo = make_topo()
    for kind in ("all_reduce", "all_gather", "reduce_scatter", "p2p"):
        d = collective_distribution(kind, 10**9, [3], topo)
        assert d.mean() == 0.0


def test_measured_entry_takes_precedence():
    topo = make_topo()
    measured = Empirical([0.1, 0.2, 0.3])
    catalog = DistributionCatalog({("all_reduce:node:1000000000", None): measured})
    got = collective_distribution("all_reduce", 10**9, [0, 1, 2, 3], topo, catalog)
    assert got is measured


def test_pow2_bucket_fallback():
    topo = make_topo()
    measured = Empirical([0.4, 0.5])
    catalog = DistributionCatalog({("all_gather:node:1073741824", None): measured})
    # 10**9 is closest to the 2**30 bucket.
    got = collective_distribution("all_gather", 10**9, [0, 1], topo, catalog)
    assert got is measured


def test_ring_all_reduce_deterministic_term():
    links = {"node": LinkSpec("node", 400e9, PointMass(0.0))}
    topo = make_topo(links=links)
    d = collective_distribution("all_reduce", 10**9, [0, 1, 2, 3], topo)
    # 2 * (n-1)/n * bytes*8/bw = 2 * 3/4 * 0.02 s, hand-computed.
    assert abs(d.mean() - 0.03) < 1e-15
    assert d.std() == 0.0


def test_ring_gather_scatter_deterministic_term():
    links = {"node": LinkSpec("node", 400e9, PointMass(0.0))}
    topo = make_topo(links=links)
    for kind in ("all_gather", "reduce_scatter"):
        d = collective_distribution(kind, 10**9, [0, 1, 2, 3], topo)
        assert abs(d.mean() - 0.015) < 1e-15


def test_ring_rtt_accumulates_per_step():
    links = {"node": LinkSpec("node", 400e9, Gaussian(1e-5, 1e-6))}
    topo = make_topo()
    topo.links = links
    d = collective_distribution("all_reduce", 0, [0, 1, 2, 3], topo)
    assert abs(d.mean() - 6e-5) < 1e-12  # 2*(n-1) = 6 steps
    assert abs(d.std() - np.sqrt(6) * 1e-6) < 1e-12


def test_group_spanning_missing_link_errors():
    links = {"node": LinkSpec("node", 400e9, PointMass(0.0))}
    topo = make_topo(nodes=2, links=links)
    with pytest.raises(ValueError, match="no link spec"):
        collective_distribution("all_reduce", 10**6, [0, 8], topo)


def test_empty_group_errors():
    topo = make_topo()
    with pytest.raises(ValueError, match="empty"):
        collective_distribution("all_reduce", 10**6, [], topo)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_topology_json_round_trip(tmp_path):
    topo = make_topo(datacenters=2, nodes=2, ranks_per_node=4)
    path = tmp_path / "topo.json"
    topo.save(path)
    loaded = Topology.load(path)
    assert loaded.world_size == topo.world_size
    assert loaded.lowest_common_tier(0, 9) == topo.lowest_common_tier(0, 9)
    assert loaded.link("rack").bandwidth_bps == topo.link("rack").bandwidth_bps


def test_topology_rtt_forms(tmp_path):
    obj = {
        "gpu_model": "H100",
        "counts": {
            "datacenters": 1,
            "clusters_per_datacenter": 1,
            "racks_per_cluster": 1,
            "nodes_per_rack": 2,
            "ranks_per_node": 2,
        },
        "links": [
            {"tier": "node", "bandwidth_gbps": 1600, "rtt_us": 2},
            {
                "tier": "rack",
                "bandwidth_gbps": 3200,
                "rtt_percentiles_us": {"50": 10, "90": 15, "99": 30},
                "distance_km": 0.1,
            },
        ],
    }
    topo = Topology.from_json_obj(obj)
    assert topo.link("node").rtt.mean() == 2e-6
    rack_rtt = topo.link("rack").rtt
    assert abs(rack_rtt.quantile(0.5) - 10e-6) < 1e-8
    assert topo.link("rack").distance_km == 0.1
