"""Intra-node hardware graph, route planning and a store-and-forward cost model.

The topology description is a line-oriented text format::

    # comment until end of line
    device gpu 0-7            # kind + index, index list (0,1,2) or range (0-7)
    device cpu 0,1,2,3
    socket 0 gpus 0,1,2,3     # GPUs attached to CPU 0's PCIe root/switch
    link gpu0 gpu2 nvlink 50e9
    link gpu0 cpu0 pcie 16e9
    link cpu0 cpu1 qpi 20.8e9

Device kinds are ``gpu`` (alias ``accelerator``), ``cpu``, ``nic`` and ``ssd``.
Link types are ``nvlink``, ``pcie`` and ``qpi``; bandwidth is in bytes/second.
At most one link may join a pair of devices; a double NVLink bridge is written
as one link with twice the bandwidth.
"""

from __future__ import annotations

import enum
import math
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping


class TopologyError(ValueError):
    """Malformed topology document or invalid graph."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class RoutingError(ValueError):
    pass


class DeviceKind(str, enum.Enum):
    ACCELERATOR = "gpu"
    CPU = "cpu"
    NIC = "nic"
    SSD = "ssd"


class LinkType(str, enum.Enum):
    NVLINK = "nvlink"
    PCIE = "pcie"
    QPI = "qpi"


class RouteMode(str, enum.Enum):
    LOCAL = "local"
    DIRECT = "direct"
    TWO_PHASE = "two_phase"
    HOST_ROUTED = "host_routed"


_KIND_ALIASES = {"gpu": DeviceKind.ACCELERATOR, "accelerator": DeviceKind.ACCELERATOR,
                 "cpu": DeviceKind.CPU, "nic": DeviceKind.NIC, "ssd": DeviceKind.SSD}
_DEVICE_RE = re.compile(r"^(gpu|accelerator|cpu|nic|ssd)(\d+)$")


@dataclass(frozen=True, order=True)
class DeviceId:
    kind: DeviceKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"device index must be non-negative, got {self.index}")

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"

    @property
    def is_accelerator(self) -> bool:
        return self.kind is DeviceKind.ACCELERATOR

    @classmethod
    def parse(cls, token: str) -> "DeviceId":
        m = _DEVICE_RE.match(token.strip().lower())
        if m is None:
            raise ValueError(f"bad device reference {token!r}")
        return cls(_KIND_ALIASES[m.group(1)], int(m.group(2)))


def gpu(index: int) -> DeviceId:
    return DeviceId(DeviceKind.ACCELERATOR, index)


def cpu(index: int) -> DeviceId:
    return DeviceId(DeviceKind.CPU, index)


@dataclass(frozen=True)
class Link:
    a: DeviceId
    b: DeviceId
    link_type: LinkType
    bandwidth: float

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"self-loop on {self.a}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth}")
        # canonical endpoint order so equal links compare equal
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    @property
    def endpoints(self) -> frozenset:
        return frozenset((self.a, self.b))

    def other(self, dev: DeviceId) -> DeviceId:
        return self.b if dev == self.a else self.a


@dataclass(frozen=True)
class Route:
    hops: tuple[DeviceId, ...]
    mode: RouteMode
    links: tuple[Link, ...] = ()

    @property
    def bottleneck_bandwidth(self) -> float:
        if not self.links:
            return math.inf
        return min(link.bandwidth for link in self.links)

    @property
    def src(self) -> DeviceId:
        return self.hops[0]

    @property
    def dst(self) -> DeviceId:
        return self.hops[-1]


@dataclass(frozen=True)
class CommPlan:
    routes: Mapping[tuple[DeviceId, DeviceId], Route]

    def route(self, src: DeviceId, dst: DeviceId) -> Route:
        return self.routes[(src, dst)]

    def __len__(self) -> int:
        return len(self.routes)


@dataclass(frozen=True)
class TopologyGraph:
    """Immutable device graph. Build with :func:`build_topology` or :meth:`from_links`."""

    devices: frozenset
    links: frozenset
    sockets: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    _adj: Mapping[DeviceId, tuple[Link, ...]] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_links(cls, devices: Iterable[DeviceId], links: Iterable[Link],
                   sockets: Mapping[int, Iterable[int]] | None = None) -> "TopologyGraph":
        devices = frozenset(devices)
        links = frozenset(links)
        adj: dict[DeviceId, list[Link]] = {d: [] for d in devices}
        seen = set()
        for link in links:
            for end in (link.a, link.b):
                if end not in devices:
                    raise TopologyError(f"link references unknown device {end}")
            if link.endpoints in seen:
                raise TopologyError(f"duplicate link between {link.a} and {link.b}")
            seen.add(link.endpoints)
            adj[link.a].append(link)
            adj[link.b].append(link)
        frozen_adj = {d: tuple(sorted(ls, key=lambda l: l.other(d))) for d, ls in adj.items()}
        socket_map = {int(c): tuple(sorted(g)) for c, g in (sockets or {}).items()}
        graph = cls(devices, links, socket_map, frozen_adj)
        graph._validate()
        return graph

    def _validate(self) -> None:
        owner: dict[int, int] = {}
        for c, gpus in self.sockets.items():
            members = [cpu(c)] + [gpu(i) for i in gpus]
            for dev in members:
                if dev not in self.devices:
                    raise TopologyError(f"socket {c} references unknown device {dev}")
            for i in gpus:
                if i in owner:
                    raise TopologyError(f"gpu{i} assigned to sockets {owner[i]} and {c}")
                owner[i] = c
            if not _connected(members, self._adj, allowed=set(members)):
                raise TopologyError(f"socket {c} is not connected")
        accs = self.accelerators
        if len(accs) > 1 and not _connected(accs, self._adj, allowed=None):
            raise TopologyError("accelerators are not mutually reachable")

    @property
    def accelerators(self) -> list[DeviceId]:
        return sorted(d for d in self.devices if d.is_accelerator)

    def neighbors(self, dev: DeviceId) -> tuple[Link, ...]:
        return self._adj[dev]

    def link_between(self, a: DeviceId, b: DeviceId) -> Link | None:
        for link in self._adj.get(a, ()):
            if link.other(a) == b:
                return link
        return None

    def nvlink(self, a: DeviceId, b: DeviceId) -> Link | None:
        link = self.link_between(a, b)
        if link is not None and link.link_type is LinkType.NVLINK:
            return link
        return None

    def with_bandwidths(self, nvlink_scale: float = 1.0, pcie_scale: float = 1.0,
                        qpi_scale: float = 1.0) -> "TopologyGraph":
        """Copy of the graph with every link's bandwidth multiplied per link type."""
        scale = {LinkType.NVLINK: nvlink_scale, LinkType.PCIE: pcie_scale, LinkType.QPI: qpi_scale}
        links = [Link(l.a, l.b, l.link_type, l.bandwidth * scale[l.link_type]) for l in self.links]
        return TopologyGraph.from_links(self.devices, links, self.sockets)


def _connected(nodes, adj, allowed) -> bool:
    nodes = list(nodes)
    if len(nodes) <= 1:
        return True
    start = nodes[0]
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for link in adj[cur]:
            nxt = link.other(cur)
            if nxt in seen or (allowed is not None and nxt not in allowed):
                continue
            seen.add(nxt)
            queue.append(nxt)
    return all(n in seen for n in nodes)


def _parse_indices(text: str, lineno: int) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(p) for p in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise TopologyError(f"bad index list {text!r}", lineno) from None
    if any(i < 0 for i in out):
        raise TopologyError(f"negative index in {text!r}", lineno)
    return out


def build_topology(document: str) -> TopologyGraph:
    """Parse a topology description document into a validated graph."""
    devices: set[DeviceId] = set()
    links: list[Link] = []
    pairs: set[frozenset] = set()
    sockets: dict[int, list[int]] = {}

    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        keyword = tok[0].lower()
        if keyword == "device":
            if len(tok) != 3 or tok[1].lower() not in _KIND_ALIASES:
                raise TopologyError(f"expected 'device <kind> <index>', got {line!r}", lineno)
            kind = _KIND_ALIASES[tok[1].lower()]
            for idx in _parse_indices(tok[2], lineno):
                dev = DeviceId(kind, idx)
                if dev in devices:
                    raise TopologyError(f"duplicate device {dev}", lineno)
                devices.add(dev)
        elif keyword == "socket":
            if len(tok) != 4 or tok[2].lower() != "gpus":
                raise TopologyError(f"expected 'socket <cpu-index> gpus <list>', got {line!r}", lineno)
            try:
                c = int(tok[1])
            except ValueError:
                raise TopologyError(f"bad cpu index {tok[1]!r}", lineno) from None
            if c in sockets:
                raise TopologyError(f"duplicate socket {c}", lineno)
            if cpu(c) not in devices:
                raise TopologyError(f"socket references unknown device cpu{c}", lineno)
            members = _parse_indices(tok[3], lineno)
            for i in members:
                if gpu(i) not in devices:
                    raise TopologyError(f"socket references unknown device gpu{i}", lineno)
            sockets[c] = members
        elif keyword == "link":
            if len(tok) != 5:
                raise TopologyError(f"expected 'link <devA> <devB> <type> <bandwidth>', got {line!r}", lineno)
            try:
                a, b = DeviceId.parse(tok[1]), DeviceId.parse(tok[2])
            except ValueError as exc:
                raise TopologyError(str(exc), lineno) from None
            for end in (a, b):
                if end not in devices:
                    raise TopologyError(f"link references unknown device {end}", lineno)
            try:
                link_type = LinkType(tok[3].lower())
            except ValueError:
                raise TopologyError(f"unknown link type {tok[3]!r}", lineno) from None
            try:
                bw = float(tok[4])
            except ValueError:
                raise TopologyError(f"bad bandwidth {tok[4]!r}", lineno) from None
            if not (bw > 0 and math.isfinite(bw)):
                raise TopologyError(f"bandwidth must be positive, got {tok[4]}", lineno)
            if a == b:
                raise TopologyError(f"self-loop on {a}", lineno)
            if frozenset((a, b)) in pairs:
                raise TopologyError(f"duplicate link between {a} and {b}", lineno)
            pairs.add(frozenset((a, b)))
            links.append(Link(a, b, link_type, bw))
        else:
            raise TopologyError(f"unknown directive {tok[0]!r}", lineno)

    return TopologyGraph.from_links(devices, links, sockets)


def load_topology(path: str | Path) -> TopologyGraph:
    return build_topology(Path(path).read_text())


def example_topology_text() -> str:
    return resources.files("kstepctr").joinpath("data/eight_gpu.topo").read_text()


def example_topology() -> TopologyGraph:
    """The shipped 8-GPU / 4-CPU node."""
    return build_topology(example_topology_text())


def _require_accelerators(g: TopologyGraph, *devs: DeviceId) -> None:
    for d in devs:
        if d not in g.devices:
            raise RoutingError(f"{d} is not in the topology")
        if not d.is_accelerator:
            raise RoutingError(f"{d} is not an accelerator")


def naive_route(g: TopologyGraph, src: DeviceId, dst: DeviceId) -> Route:
    """Host-staged path: PCIe up to the CPU, QPI between sockets, PCIe down.

    NVLink is never used. The path is the fewest-hop one whose intermediate
    devices are all CPUs; among equal-length paths the one reached first when
    neighbours are visited in ascending device order wins.
    """
    _require_accelerators(g, src, dst)
    if src == dst:
        return Route((src,), RouteMode.LOCAL)
    parent: dict[DeviceId, Link] = {}
    seen = {src}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        for link in g.neighbors(cur):
            if link.link_type is LinkType.NVLINK:
                continue
            nxt = link.other(cur)
            if nxt in seen:
                continue
            if nxt != dst and nxt.kind is not DeviceKind.CPU:
                continue
            seen.add(nxt)
            parent[nxt] = link
            if nxt == dst:
                queue.clear()
                break
            queue.append(nxt)
    if dst not in parent:
        raise RoutingError(f"no host-routed path from {src} to {dst}")
    hops = [dst]
    links = []
    while hops[-1] != src:
        link = parent[hops[-1]]
        links.append(link)
        hops.append(link.other(hops[-1]))
    return Route(tuple(reversed(hops)), RouteMode.HOST_ROUTED, tuple(reversed(links)))


def plan_route(g: TopologyGraph, src: DeviceId, dst: DeviceId) -> Route:
    """Direct NVLink if present, else one NVLink forwarder, else host-routed.

    The forwarder maximises min(bw(src, f), bw(f, dst)); ties go to the lowest
    forwarder index.
    """
    _require_accelerators(g, src, dst)
    if src == dst:
        return Route((src,), RouteMode.LOCAL)
    direct = g.nvlink(src, dst)
    if direct is not None:
        return Route((src, dst), RouteMode.DIRECT, (direct,))
    best = None
    for f in g.accelerators:
        if f in (src, dst):
            continue
        first, second = g.nvlink(src, f), g.nvlink(f, dst)
        if first is None or second is None:
            continue
        bottleneck = min(first.bandwidth, second.bandwidth)
        if best is None or bottleneck > best[0]:
            best = (bottleneck, f, first, second)
    if best is not None:
        _, f, first, second = best
        return Route((src, f, dst), RouteMode.TWO_PHASE, (first, second))
    return naive_route(g, src, dst)


def plan_all_pairs(g: TopologyGraph) -> CommPlan:
    accs = g.accelerators
    return CommPlan({(a, b): plan_route(g, a, b) for a in accs for b in accs})


def transfer_time(route: Route, nbytes: int, pipelined: bool = False) -> float:
    """Modeled seconds to move ``nbytes`` along ``route``.

    Store-and-forward by default: each hop receives the full payload before
    sending it on. ``pipelined=True`` charges only the bottleneck link.
    """
    if nbytes < 0:
        raise ValueError("nbytes must be non-negative")
    if nbytes == 0 or not route.links:
        return 0.0
    if pipelined:
        return nbytes / route.bottleneck_bandwidth
    return sum(nbytes / link.bandwidth for link in route.links)


def eight_gpu_document(nvlink: float = 25e9, pcie: float = 16e9, qpi: float = 20.8e9,
                     double_bridges: Iterable[tuple[int, int]] = ((0, 2), (4, 6))) -> str:
    """Generate the 8-GPU node description with the given per-type bandwidths.

    ``nvlink`` is the single-bridge bandwidth; pairs in ``double_bridges`` get
    twice that.
    """
    doubles = {frozenset(p) for p in double_bridges}
    lines = [
        "device gpu 0-7",
        "device cpu 0-3",
        "device nic 0-2",
        "device ssd 0-1",
        "socket 0 gpus 0,1,2,3",
        "socket 1 gpus 4,5,6,7",
    ]
    nv_pairs = []
    for quad in ((0, 1, 2, 3), (4, 5, 6, 7)):
        nv_pairs += [(a, b) for i, a in enumerate(quad) for b in quad[i + 1:]]
    nv_pairs += [(i, i + 4) for i in range(4)]
    for a, b in nv_pairs:
        bw = 2 * nvlink if frozenset((a, b)) in doubles else nvlink
        lines.append(f"link gpu{a} gpu{b} nvlink {bw:g}")
    for i in range(8):
        lines.append(f"link gpu{i} cpu{i // 4} pcie {pcie:g}")
    for a in range(4):
        for b in range(a + 1, 4):
            lines.append(f"link cpu{a} cpu{b} qpi {qpi:g}")
    lines += [
        f"link nic0 cpu0 pcie {pcie:g}",
        f"link nic1 cpu0 pcie {pcie:g}",
        f"link nic2 cpu1 pcie {pcie:g}",
        f"link ssd0 cpu2 pcie {pcie:g}",
        f"link ssd1 cpu3 pcie {pcie:g}",
    ]
    return "\n".join(lines) + "\n"
