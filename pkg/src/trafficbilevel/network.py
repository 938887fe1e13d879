"""Road networks, OD demand and the path-flow space built over them.

Only links from the TNTP network file are modelled; the cost of link ``a`` is
``A_a + B_a (x_a / (K_a + y_a))**4``.  Link indices are 0-based in code and
1-based in every file format.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .simplex import BlockLayout

log = logging.getLogger(__name__)

DEFAULT_BPR_RATIO = 0.15


@dataclass(frozen=True)
class RoadNetwork:
    n_nodes: int
    tail: np.ndarray
    head: np.ndarray
    free_flow_time: np.ndarray
    bpr_coeff: np.ndarray
    capacity: np.ndarray
    invest_coeff: np.ndarray
    expansion_ub: np.ndarray

    def __post_init__(self) -> None:
        arrays = [np.asarray(getattr(self, name), dtype=float) for name in _LINK_FLOAT_FIELDS]
        for name, arr in zip(_LINK_FLOAT_FIELDS, arrays):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("tail", "head"):
            arr = np.asarray(getattr(self, name), dtype=int)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = self.n_links
        if any(arr.shape != (m,) for arr in arrays) or self.head.shape != (m,):
            raise ValidationError("all per-link arrays must have the same length")
        if np.any(self.tail < 1) or np.any(self.tail > self.n_nodes) or np.any(self.head < 1) or np.any(
            self.head > self.n_nodes
        ):
            raise ValidationError("link endpoint outside the node range")
        if np.any(self.tail == self.head):
            bad = int(np.flatnonzero(self.tail == self.head)[0]) + 1
            raise ValidationError(f"link {bad} is a self-loop")
        if np.any(self.capacity <= 0):
            bad = int(np.flatnonzero(self.capacity <= 0)[0]) + 1
            raise ValidationError(f"link {bad} has nonpositive capacity")
        if np.any(self.free_flow_time < 0) or np.any(self.bpr_coeff < 0):
            raise ValidationError("free-flow times and BPR coefficients must be nonnegative")
        if np.any(self.expansion_ub < 0):
            raise ValidationError("expansion bounds must be nonnegative")

    @property
    def n_links(self) -> int:
        return int(self.tail.shape[0])

    def expandable_links(self) -> np.ndarray:
        """0-based indices of links with a positive expansion bound."""
        return np.flatnonzero(self.expansion_ub > 0)


_LINK_FLOAT_FIELDS = (
    "free_flow_time",
    "bpr_coeff",
    "capacity",
    "invest_coeff",
    "expansion_ub",
)


@dataclass(frozen=True)
class DemandTable:
    origins: tuple[int, ...]
    destinations: tuple[int, ...]
    demand: np.ndarray

    def __post_init__(self) -> None:
        demand = np.asarray(self.demand, dtype=float)
        demand.setflags(write=False)
        object.__setattr__(self, "demand", demand)
        if not (len(self.origins) == len(self.destinations) == demand.shape[0]):
            raise ValidationError("origins, destinations and demand must align")
        if np.any(demand <= 0):
            raise ValidationError("demands must be strictly positive")
        pairs = list(zip(self.origins, self.destinations))
        if any(o == d for o, d in pairs):
            raise ValidationError("origin equals destination")
        if len(set(pairs)) != len(pairs):
            raise ValidationError("duplicate OD pair")

    def __len__(self) -> int:
        return len(self.origins)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.origins, self.destinations))


@dataclass(frozen=True)
class PathFlowSpace:
    """Candidate paths per OD pair and the demand-weighted incidence matrix.

    ``incidence[r, a]`` equals the demand of the OD pair owning path row ``r``
    when that path uses link ``a``, else zero; link flows are
    ``incidence.T @ h``.
    """

    od_pairs: tuple[tuple[int, int], ...]
    demand: np.ndarray
    paths: tuple[tuple[tuple[int, ...], ...], ...]
    n_links: int
    layout: BlockLayout = field(init=False)
    incidence: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if any(len(p) == 0 for p in self.paths):
            raise ValidationError("every OD pair needs at least one path")
        layout = BlockLayout(tuple(len(p) for p in self.paths))
        inc = np.zeros((layout.dim, self.n_links))
        row = 0
        for xi, block in zip(self.demand, self.paths):
            for path in block:
                inc[row, list(path)] = xi
                row += 1
        inc.setflags(write=False)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "incidence", inc)

    @property
    def n_populations(self) -> int:
        return self.layout.n_blocks

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return self.layout.sizes


# --------------------------------------------------------------------------- parsing


def _metadata_and_body(text: str, source: str) -> tuple[dict[str, str], list[tuple[int, str]]]:
    meta: dict[str, str] = {}
    body: list[tuple[int, str]] = []
    in_meta = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        if in_meta:
            if line.startswith("<"):
                end = line.find(">")
                if end < 0:
                    raise ParseError("unterminated metadata tag", lineno, source)
                key = line[1:end].strip().upper()
                if key == "END OF METADATA":
                    in_meta = False
                else:
                    meta[key] = line[end + 1 :].strip()
                continue
            raise ParseError("expected <END OF METADATA> before records", lineno, source)
        body.append((lineno, line))
    if in_meta:
        raise ParseError("missing <END OF METADATA>", None, source)
    return meta, body


def _meta_int(meta: dict[str, str], key: str, source: str) -> int:
    try:
        return int(float(meta[key]))
    except KeyError:
        raise ParseError(f"missing <{key}> header", None, source) from None
    except ValueError:
        raise ParseError(f"<{key}> is not a number", None, source) from None


def _parse_links(text: str):
    source = "network"
    meta, body = _metadata_and_body(text, source)
    n_nodes = _meta_int(meta, "NUMBER OF NODES", source)
    n_links = _meta_int(meta, "NUMBER OF LINKS", source)
    records = []
    for lineno, line in body:
        fields = line.rstrip(";").split()
        if not line.endswith(";"):
            raise ParseError("link record must end with ';'", lineno, source)
        if len(fields) < 7:
            raise ParseError(f"expected at least 7 fields, got {len(fields)}", lineno, source)
        try:
            tail, head = int(fields[0]), int(fields[1])
            capacity, _length, fftt, b, power = (float(v) for v in fields[2:7])
        except ValueError as exc:
            raise ParseError(f"bad numeric field ({exc})", lineno, source) from None
        if capacity <= 0:
            raise ValidationError(f"network line {lineno}: nonpositive capacity {capacity}")
        if power != 4.0:
            log.warning("network line %d: power %g ignored, cost model is quartic", lineno, power)
        records.append((tail, head, capacity, fftt, b))
    if len(records) != n_links:
        raise ParseError(f"<NUMBER OF LINKS> says {n_links} but {len(records)} records found", None, source)
    return n_nodes, records


def _parse_trips(text: str, n_nodes: int) -> DemandTable:
    source = "trips"
    _meta, body = _metadata_and_body(text, source)
    origin: int | None = None
    entries: dict[tuple[int, int], float] = {}
    for lineno, line in body:
        if line.lower().startswith("origin"):
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'Origin <id>'", lineno, source)
            try:
                origin = int(parts[1])
            except ValueError:
                raise ParseError(f"bad origin id {parts[1]!r}", lineno, source) from None
            if not 1 <= origin <= n_nodes:
                raise ValidationError(f"trips line {lineno}: origin {origin} is not a node")
            continue
        if origin is None:
            raise ParseError("demand entry before any 'Origin' line", lineno, source)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            dest_s, sep, flow_s = chunk.partition(":")
            if not sep:
                raise ParseError(f"expected 'dest : flow', got {chunk!r}", lineno, source)
            try:
                dest, flow = int(dest_s), float(flow_s)
            except ValueError:
                raise ParseError(f"bad demand entry {chunk!r}", lineno, source) from None
            if not 1 <= dest <= n_nodes:
                raise ValidationError(f"trips line {lineno}: destination {dest} is not a node")
            if flow < 0:
                raise ValidationError(f"trips line {lineno}: negative demand")
            if (origin, dest) in entries:
                raise ValidationError(f"trips line {lineno}: duplicate OD pair ({origin}, {dest})")
            entries[(origin, dest)] = flow
    kept = [(od, q) for od, q in entries.items() if q > 0 and od[0] != od[1]]
    return DemandTable(
        origins=tuple(od[0] for od, _ in kept),
        destinations=tuple(od[1] for od, _ in kept),
        demand=np.array([q for _, q in kept], dtype=float),
    )


def _parse_expansion(text: str, n_links: int):
    d = np.zeros(n_links)
    u = np.zeros(n_links)
    b: dict[int, float] = {}
    reader = csv.reader(io.StringIO(text))
    header = None
    for lineno, row in enumerate(reader, start=1):
        if not row or not "".join(row).strip():
            continue
        row = [c.strip() for c in row]
        if header is None:
            header = [c.lower() for c in row]
            if header[:3] != ["link", "d", "u"] or header[3:] not in ([], ["b"]):
                raise ParseError("header must be 'link,d,u' or 'link,d,u,B'", lineno, "expansion")
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(row)}", lineno, "expansion")
        try:
            link = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseError("bad numeric field", lineno, "expansion") from None
        if not 1 <= link <= n_links:
            raise ValidationError(f"expansion line {lineno}: unknown link {link}")
        d[link - 1], u[link - 1] = vals[0], vals[1]
        if len(vals) == 3:
            b[link - 1] = vals[2]
    if header is None:
        raise ParseError("empty expansion file", None, "expansion")
    return d, u, b


def parse_tntp(network_text: str, trips_text: str, expansion_text: str) -> tuple[RoadNetwork, DemandTable]:
    """Build a network and demand table from TNTP link/trips text plus an expansion CSV.

    ``B_a`` comes from the CSV's optional fourth column; links it does not
    cover get ``b * A_a`` with ``b`` the TNTP ``B`` field.
    """
    n_nodes, records = _parse_links(network_text)
    tail, head, capacity, fftt, b_ratio = (np.array(col) for col in zip(*records))
    d, u, b_override = _parse_expansion(expansion_text, len(records))
    bpr = b_ratio * fftt
    for a, value in b_override.items():
        bpr[a] = value
    net = RoadNetwork(
        n_nodes=n_nodes,
        tail=tail,
        head=head,
        free_flow_time=fftt,
        bpr_coeff=bpr,
        capacity=capacity,
        invest_coeff=d,
        expansion_ub=u,
    )
    return net, _parse_trips(trips_text, n_nodes)


def load_tntp(network_path, trips_path, expansion_path) -> tuple[RoadNetwork, DemandTable]:
    texts = [Path(p).read_text() for p in (network_path, trips_path, expansion_path)]
    return parse_tntp(*texts)


def rescale_flow_unit(net: RoadNetwork, demand: DemandTable, unit: float) -> tuple[RoadNetwork, DemandTable]:
    """Express capacities and demands in multiples of ``unit`` vehicles.

    Travel times are unchanged because the cost depends on ``x / K`` only;
    expansion bounds and ``B_a`` are kept as given.
    """
    if not unit > 0:
        raise ValueError("flow unit must be positive")
    scaled = replace(net, capacity=net.capacity / unit)
    return scaled, DemandTable(demand.origins, demand.destinations, demand.demand / unit)


SIOUX_FALLS_FILES = ("SiouxFalls_net.tntp", "SiouxFalls_trips.tntp", "SiouxFalls_expansion.csv")


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("trafficbilevel") / "data" / name))


def load_sioux_falls(flow_unit: float = 1.0) -> tuple[RoadNetwork, DemandTable]:
    net, demand = load_tntp(*(bundled_path(n) for n in SIOUX_FALLS_FILES))
    if flow_unit != 1.0:
        net, demand = rescale_flow_unit(net, demand, flow_unit)
    return net, demand


# ----------------------------------------------------------------------- path sets


def _shortest_path(adj, weights, source, target, banned_links, banned_nodes):
    """Dijkstra over link ids; equal costs are resolved by the lexicographic link sequence."""
    heap = [(0.0, (), source)]
    settled = set()
    while heap:
        cost, seq, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == target:
            return seq
        for link, nxt in adj.get(node, ()):
            if nxt in settled or nxt in banned_nodes or link in banned_links:
                continue
            heapq.heappush(heap, (cost + weights[link], seq + (link,), nxt))
    return None


def _path_cost(path, weights) -> float:
    return math.fsum(weights[a] for a in path)


def yen_paths(net: RoadNetwork, origin: int, destination: int, k: int, weights=None) -> list[tuple[int, ...]]:
    """Up to ``k`` loopless paths from ``origin`` to ``destination`` in (cost, link sequence) order."""
    weights = net.free_flow_time if weights is None else np.asarray(weights, dtype=float)
    adj: dict[int, list[tuple[int, int]]] = {}
    for a in range(net.n_links):
        adj.setdefault(int(net.tail[a]), []).append((a, int(net.head[a])))
    first = _shortest_path(adj, weights, origin, destination, frozenset(), frozenset())
    if first is None:
        return []
    found = [first]
    candidates: list[tuple[float, tuple[int, ...]]] = []
    seen = {first}
    while len(found) < k:
        prev = found[-1]
        nodes = [origin] + [int(net.head[a]) for a in prev]
        for i in range(len(prev)):
            root = prev[:i]
            banned_links = {p[i] for p in found if len(p) > i and p[:i] == root}
            spur = _shortest_path(adj, weights, nodes[i], destination, banned_links, set(nodes[:i]))
            if spur is None:
                continue
            path = root + spur
            if path not in seen:
                seen.add(path)
                heapq.heappush(candidates, (_path_cost(path, weights), path))
        if not candidates:
            break
        found.append(heapq.heappop(candidates)[1])
    return found


def k_shortest_paths(net: RoadNetwork, demand: DemandTable, k: int) -> PathFlowSpace:
    if k < 1:
        raise ValueError("k must be at least 1")
    paths = []
    for o, d in demand.pairs():
        block = yen_paths(net, o, d, k)
        if not block:
            raise ValidationError(f"OD pair ({o}, {d}) is not connected")
        paths.append(tuple(block))
    return PathFlowSpace(
        od_pairs=tuple(demand.pairs()),
        demand=np.asarray(demand.demand),
        paths=tuple(paths),
        n_links=net.n_links,
    )


def link_flows(space: PathFlowSpace, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape != (space.layout.dim,):
        raise ValueError(f"h has shape {h.shape}, expected ({space.layout.dim},)")
    return space.incidence.T @ h
