import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kstepctr.topology import (
    DeviceId,
    DeviceKind,
    Link,
    LinkType,
    RouteMode,
    RoutingError,
    TopologyError,
    TopologyGraph,
    build_topology,
    cpu,
    example_topology,
    eight_gpu_document,
    gpu,
    load_topology,
    naive_route,
    plan_all_pairs,
    plan_route,
    transfer_time,
)


@pytest.fixture(scope="module")
def eight():
    return example_topology()


def brute_force_forwarders(g, src, dst):
    """All forwarders achieving the best bottleneck, by exhaustive enumeration."""
    scored = []
    for f in g.accelerators:
        if f in (src, dst):
            continue
        a, b = g.link_between(src, f), g.link_between(f, dst)
        if a and b and a.link_type is LinkType.NVLINK and b.link_type is LinkType.NVLINK:
            scored.append((min(a.bandwidth, b.bandwidth), f))
    if not scored:
        return None, []
    best = max(s for s, _ in scored)
    return best, sorted(f for s, f in scored if s == best)


# --- parsing ------------------------------------------------------------------

def test_shipped_topology_shape(eight):
    assert len(eight.accelerators) == 8
    assert sum(1 for d in eight.devices if d.kind is DeviceKind.CPU) == 4
    assert eight.nvlink(gpu(0), gpu(5)) is None
    assert eight.nvlink(gpu(0), gpu(2)).bandwidth == 2 * eight.nvlink(gpu(1), gpu(3)).bandwidth
    assert eight.nvlink(gpu(0), gpu(3)).bandwidth == eight.nvlink(gpu(1), gpu(3)).bandwidth


def test_generator_matches_shipped_file(eight):
    assert build_topology(eight_gpu_document()) == eight


def test_single_accelerator_graph():
    g = build_topology("device gpu 0\n")
    assert g.accelerators == [gpu(0)]
    plan = plan_all_pairs(g)
    assert len(plan) == 1
    r = plan.route(gpu(0), gpu(0))
    assert r.hops == (gpu(0),) and r.mode is RouteMode.LOCAL


@pytest.mark.parametrize("doc,fragment", [
    ("device gpu 0\nlink gpu0 gpu1 nvlink 1\n", "unknown device gpu1"),
    ("device gpu 0-1\nlink gpu0 gpu1 nvlink 1\nlink gpu1 gpu0 pcie 1\n", "duplicate link"),
    ("device gpu 0-1\nlink gpu0 gpu1 nvlink -3\n", "positive"),
    ("device gpu 0-1\nlink gpu0 gpu1 ethernet 1\n", "unknown link type"),
    ("device gpu 0-1\n", "not mutually reachable"),
    ("device gpu 0\nsocket 0 gpus 0\n", "unknown device cpu0"),
    ("device gpu 0\nfrobnicate\n", "unknown directive"),
    ("device gpu 0\nlink gpu0 gpu0 nvlink 1\n", "self-loop"),
])
def test_parse_errors(doc, fragment):
    with pytest.raises(TopologyError, match=fragment):
        build_topology(doc)


def test_parse_error_has_line_number():
    with pytest.raises(TopologyError) as err:
        build_topology("# header\ndevice gpu 0\n\nlink gpu0 gpu9 nvlink 1\n")
    assert err.value.lineno == 4
    assert "line 4" in str(err.value)


def test_comments_ranges_and_lists(tmp_path):
    p = tmp_path / "t.topo"
    p.write_text("device gpu 0,1  # two\ndevice cpu 0\nsocket 0 gpus 0-1\n"
                 "link gpu0 cpu0 pcie 2e9\nlink gpu1 cpu0 pcie 2e9\n")
    g = load_topology(p)
    assert g.sockets == {0: (0, 1)}
    assert g.link_between(cpu(0), gpu(1)).bandwidth == 2e9


def test_disconnected_socket_rejected():
    with pytest.raises(TopologyError, match="socket 0"):
        build_topology("device gpu 0-1\ndevice cpu 0\nsocket 0 gpus 0,1\n"
                       "link gpu0 cpu0 pcie 1\n")


def test_device_parse_roundtrip():
    assert DeviceId.parse("gpu7") == gpu(7)
    assert str(cpu(3)) == "cpu3"
    with pytest.raises(ValueError):
        DeviceId.parse("tpu1")


# --- routing ------------------------------------------------------------------

def test_direct_double_bridge(eight):
    r = plan_route(eight, gpu(0), gpu(2))
    assert r.mode is RouteMode.DIRECT
    assert r.hops == (gpu(0), gpu(2))
    assert r.links[0].bandwidth == 50e9


def test_identity_route(eight):
    r = plan_route(eight, gpu(0), gpu(0))
    assert r.hops == (gpu(0),)
    assert transfer_time(r, 10 ** 9) == 0.0


@pytest.mark.parametrize("dst,fwd", [(5, 1), (6, 2), (7, 3)])
def test_two_phase_forwarders(eight, dst, fwd):
    r = plan_route(eight, gpu(0), gpu(dst))
    assert r.mode is RouteMode.TWO_PHASE
    assert r.hops == (gpu(0), gpu(fwd), gpu(dst))
    best, candidates = brute_force_forwarders(eight, gpu(0), gpu(dst))
    assert r.bottleneck_bandwidth == best
    assert r.hops[1] == candidates[0]


def test_all_pairs_nvlink_only(eight):
    plan = plan_all_pairs(eight)
    assert len(plan) == 64
    for a, b in itertools.product(eight.accelerators, repeat=2):
        r = plan.route(a, b)
        assert r == plan_route(eight, a, b)
        assert len(r.links) <= 2
        assert all(l.link_type is LinkType.NVLINK for l in r.links)
        if r.mode is RouteMode.TWO_PHASE:
            assert len(r.hops) == 3
            best, cands = brute_force_forwarders(eight, a, b)
            assert r.bottleneck_bandwidth == best and r.hops[1] == cands[0]


def test_host_routed_fallback():
    g = build_topology("device gpu 0-2\ndevice cpu 0\nsocket 0 gpus 0-2\n"
                       "link gpu0 cpu0 pcie 1\nlink gpu1 cpu0 pcie 1\nlink gpu2 cpu0 pcie 1\n"
                       "link gpu0 gpu1 nvlink 10\n")
    r = plan_route(g, gpu(2), gpu(0))
    assert r.mode is RouteMode.HOST_ROUTED
    assert r.hops == (gpu(2), cpu(0), gpu(0))
    assert plan_route(g, gpu(0), gpu(1)).mode is RouteMode.DIRECT


def test_naive_routes(eight):
    r = naive_route(eight, gpu(0), gpu(5))
    assert r.hops == (gpu(0), cpu(0), cpu(1), gpu(5))
    assert [l.link_type for l in r.links] == [LinkType.PCIE, LinkType.QPI, LinkType.PCIE]
    assert naive_route(eight, gpu(0), gpu(1)).hops == (gpu(0), cpu(0), gpu(1))
    assert r.bottleneck_bandwidth == min(l.bandwidth for l in r.links)


def test_routing_rejects_non_accelerators(eight):
    with pytest.raises(RoutingError):
        plan_route(eight, gpu(0), cpu(0))
    with pytest.raises(RoutingError):
        naive_route(eight, gpu(0), gpu(42))


# --- cost model ---------------------------------------------------------------

def test_transfer_time_definitions(eight):
    direct = plan_route(eight, gpu(0), gpu(1))
    assert transfer_time(direct, 0) == 0.0
    assert transfer_time(direct, 1000) == 1000 / direct.links[0].bandwidth
    two = plan_route(eight, gpu(0), gpu(6))
    per_hop = 0.0
    for a, b in zip(two.hops, two.hops[1:]):
        per_hop += 1000 / eight.link_between(a, b).bandwidth
    assert transfer_time(two, 1000) == pytest.approx(per_hop, rel=1e-15)
    assert transfer_time(two, 1000, pipelined=True) == 1000 / two.bottleneck_bandwidth
    with pytest.raises(ValueError):
        transfer_time(two, -1)


@settings(max_examples=40, deadline=None)
@given(nv=st.floats(1.0, 100.0), pcie=st.floats(0.01, 1.0), qpi=st.floats(0.01, 1.0),
       nbytes=st.integers(1, 10 ** 9))
def test_planned_never_slower_when_nvlink_dominates(nv, pcie, qpi, nbytes):
    g = build_topology(eight_gpu_document(nvlink=nv, pcie=pcie, qpi=qpi))
    for a, b in itertools.permutations(g.accelerators, 2):
        assert transfer_time(plan_route(g, a, b), nbytes) <= transfer_time(naive_route(g, a, b), nbytes)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_random_graph_route_invariants(data):
    n = data.draw(st.integers(2, 6))
    gpus = [gpu(i) for i in range(n)]
    links = [Link(gpu(i), cpu(0), LinkType.PCIE, 1.0) for i in range(n)]
    pairs = data.draw(st.sets(st.sampled_from(list(itertools.combinations(range(n), 2)))))
    for i, j in sorted(pairs):
        links.append(Link(gpu(i), gpu(j), LinkType.NVLINK, data.draw(st.sampled_from([2.0, 4.0, 8.0]))))
    g = TopologyGraph.from_links(gpus + [cpu(0)], links, {0: range(n)})
    for a, b in itertools.product(g.accelerators, repeat=2):
        r = plan_route(g, a, b)
        assert r == plan_route(g, a, b)
        if r.mode is RouteMode.TWO_PHASE:
            assert len(r.hops) == 3
            assert all(l.link_type is LinkType.NVLINK for l in r.links)
            best, cands = brute_force_forwarders(g, a, b)
            assert r.hops[1] == cands[0]
        elif r.mode is RouteMode.HOST_ROUTED:
            assert brute_force_forwarders(g, a, b)[0] is None and g.nvlink(a, b) is None


def test_with_bandwidths_scales(eight):
    g = eight.with_bandwidths(nvlink_scale=2.0, pcie_scale=0.5)
    assert g.nvlink(gpu(0), gpu(1)).bandwidth == 50e9
    assert g.link_between(gpu(0), cpu(0)).bandwidth == 8e9
