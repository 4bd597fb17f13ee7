"""River/reservoir flow network: typed nodes, three edge classes, closures, adjacency."""
from __future__ import annotations

import csv
import enum
import heapq
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

_log = logging.getLogger(__name__)


class NodeKind(str, enum.Enum):
    SEGMENT = "segment"
    RESERVOIR = "reservoir"


class EdgeClass(str, enum.Enum):
    SEG_TO_SEG = "seg_to_seg"
    SEG_TO_RES = "seg_to_res"
    RES_TO_SEG = "res_to_seg"


_CLASS_KINDS = {
    EdgeClass.SEG_TO_SEG: (NodeKind.SEGMENT, NodeKind.SEGMENT),
    EdgeClass.SEG_TO_RES: (NodeKind.SEGMENT, NodeKind.RESERVOIR),
    EdgeClass.RES_TO_SEG: (NodeKind.RESERVOIR, NodeKind.SEGMENT),
}


class NodeId(NamedTuple):
    kind: NodeKind
    index: int

    def __str__(self):
        return f"{'s' if self.kind is NodeKind.SEGMENT else 'res'}{self.index}"


def seg(i: int) -> NodeId:
    return NodeId(NodeKind.SEGMENT, int(i))


def res(k: int) -> NodeId:
    return NodeId(NodeKind.RESERVOIR, int(k))


class Edge(NamedTuple):
    source: NodeId
    target: NodeId
    edge_class: EdgeClass
    stream_distance: float


class TopologyError(ValueError):
    pass


class CycleDetected(TopologyError):
    pass


class BadEdgeClass(TopologyError):
    pass


class UnknownNode(TopologyError):
    pass


class DegenerateDistances(UserWarning):
    """All connected pairs share one stream distance; weights default to 0.5."""


@dataclass(frozen=True)
class NetworkTopology:
    n_segments: int
    n_reservoirs: int
    edges: tuple[Edge, ...]
    order: tuple[NodeId, ...]                        # topological, upstream first
    upstream_segments: tuple[frozenset[int], ...]    # N(i)
    upstream_reservoirs: tuple[frozenset[int], ...]  # M(i)
    reservoir_inflow: tuple[frozenset[int], ...]     # S(k)
    reservoir_downstream: tuple[frozenset[int], ...]  # S_dn(k)
    distances: dict = field(repr=False, compare=False)  # (src, dst) -> path length, m

    @property
    def n_nodes(self) -> int:
        return self.n_segments + self.n_reservoirs

    def node_index(self, node: NodeId) -> int:
        """Row/column of ``node`` in the adjacency matrix (segments first)."""
        return node.index if node.kind is NodeKind.SEGMENT else self.n_segments + node.index

    def downstream_union(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.reservoir_downstream:
            out |= s
        return frozenset(out)

    def below_dam(self) -> frozenset[int]:
        """Segments fed directly by a reservoir outflow edge."""
        return frozenset(e.target.index for e in self.edges
                         if e.edge_class is EdgeClass.RES_TO_SEG)

    def connected_pairs(self) -> list[tuple[NodeId, NodeId, EdgeClass]]:
        """Every (source, target) pair the model couples, by edge class."""
        pairs = []
        for i in range(self.n_segments):
            for j in sorted(self.upstream_segments[i]):
                pairs.append((seg(j), seg(i), EdgeClass.SEG_TO_SEG))
        for k in range(self.n_reservoirs):
            for i in sorted(self.reservoir_inflow[k]):
                pairs.append((seg(i), res(k), EdgeClass.SEG_TO_RES))
            for i in sorted(self.reservoir_downstream[k]):
                pairs.append((res(k), seg(i), EdgeClass.RES_TO_SEG))
        return pairs

    def relabeled(self, seg_perm: Iterable[int]) -> "NetworkTopology":
        """Same network with segment ``i`` renamed to ``seg_perm[i]``."""
        perm = list(seg_perm)

        def m(n: NodeId) -> NodeId:
            return seg(perm[n.index]) if n.kind is NodeKind.SEGMENT else n

        nodes = [seg(i) for i in range(self.n_segments)] + [res(k) for k in range(self.n_reservoirs)]
        return build_topology(nodes, [Edge(m(e.source), m(e.target), e.edge_class, e.stream_distance)
                                      for e in self.edges])


def build_topology(nodes: Iterable[NodeId], direct_edges: Iterable) -> NetworkTopology:
    nodes = [NodeId(NodeKind(n[0]), int(n[1])) for n in nodes]
    node_set = set(nodes)
    if len(node_set) != len(nodes):
        raise TopologyError("duplicate node ids")
    n_seg = sum(1 for n in nodes if n.kind is NodeKind.SEGMENT)
    n_res = len(nodes) - n_seg
    for kind, count in ((NodeKind.SEGMENT, n_seg), (NodeKind.RESERVOIR, n_res)):
        idx = sorted(n.index for n in nodes if n.kind is kind)
        if idx != list(range(count)):
            raise TopologyError(f"{kind.value} indices must be 0..{count - 1}, got {idx}")

    edges: list[Edge] = []
    for e in direct_edges:
        src, dst, cls, dist = e
        src = NodeId(NodeKind(src[0]), int(src[1]))
        dst = NodeId(NodeKind(dst[0]), int(dst[1]))
        cls = EdgeClass(cls)
        for n in (src, dst):
            if n not in node_set:
                raise UnknownNode(f"edge endpoint {n} is not a declared node")
        if (src.kind, dst.kind) != _CLASS_KINDS[cls]:
            raise BadEdgeClass(f"{cls.value} edge cannot join {src} -> {dst}")
        dist = float(dist)
        if not (dist > 0 and np.isfinite(dist)):
            raise TopologyError(f"stream distance must be positive, got {dist} on {src}->{dst}")
        edges.append(Edge(src, dst, cls, dist))

    children: dict[NodeId, list[tuple[NodeId, float]]] = {n: [] for n in nodes}
    indeg = {n: 0 for n in nodes}
    for e in edges:
        children[e.source].append((e.target, e.stream_distance))
        indeg[e.target] += 1

    # Kahn's algorithm; leftovers mean a cycle
    order: list[NodeId] = []
    ready = sorted(n for n in nodes if indeg[n] == 0)
    while ready:
        n = ready.pop(0)
        order.append(n)
        for c, _ in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(nodes):
        stuck = sorted(str(n) for n in nodes if indeg[n] > 0)
        raise CycleDetected(f"flow graph has a cycle through {', '.join(stuck)}")

    # shortest downstream path length from every node (Dijkstra per source)
    distances: dict[tuple[NodeId, NodeId], float] = {}
    for s in nodes:
        best = {s: 0.0}
        heap = [(0.0, s)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > best.get(u, np.inf):
                continue
            for v, w in children[u]:
                nd = d + w
                if nd < best.get(v, np.inf):
                    best[v] = nd
                    heapq.heappush(heap, (nd, v))
        for v, d in best.items():
            if v != s:
                distances[(s, v)] = d

    up_seg = [set() for _ in range(n_seg)]
    up_res = [set() for _ in range(n_seg)]
    res_in = [set() for _ in range(n_res)]
    res_dn = [set() for _ in range(n_res)]
    for (s, v) in distances:
        if v.kind is NodeKind.SEGMENT:
            (up_seg if s.kind is NodeKind.SEGMENT else up_res)[v.index].add(s.index)
        if s.kind is NodeKind.RESERVOIR and v.kind is NodeKind.SEGMENT:
            res_dn[s.index].add(v.index)
        if s.kind is NodeKind.SEGMENT and v.kind is NodeKind.RESERVOIR:
            res_in[v.index].add(s.index)

    return NetworkTopology(
        n_segments=n_seg, n_reservoirs=n_res, edges=tuple(edges), order=tuple(order),
        upstream_segments=tuple(frozenset(s) for s in up_seg),
        upstream_reservoirs=tuple(frozenset(s) for s in up_res),
        reservoir_inflow=tuple(frozenset(s) for s in res_in),
        reservoir_downstream=tuple(frozenset(s) for s in res_dn),
        distances=distances,
    )


def logistic_weights(raw: np.ndarray) -> np.ndarray:
    """z-score ``raw`` (population std) then map through 1/(1+exp(z))."""
    raw = np.asarray(raw, dtype=np.float64)
    sd = raw.std()
    if raw.size == 0:
        return raw.copy()
    if sd == 0:
        warnings.warn("stream distances have zero variance; using weight 0.5",
                      DegenerateDistances, stacklevel=3)
        z = np.zeros_like(raw)
    else:
        z = (raw - raw.mean()) / sd
    return 1.0 / (1.0 + np.exp(z))


def compute_adjacency(topology: NetworkTopology, per_class: bool = False) -> np.ndarray:
    """Dense (N+M)x(N+M) adjacency; ``A[src, dst]`` is nonzero for coupled pairs.

    Distances are standardized jointly over every coupled pair unless
    ``per_class`` is set, in which case each edge class gets its own z-score.
    """
    pairs = topology.connected_pairs()
    if not pairs:
        raise TopologyError("adjacency needs at least one connected pair")
    raw = np.array([topology.distances[(s, d)] for s, d, _ in pairs])
    weights = np.empty_like(raw)
    if per_class:
        classes = np.array([c.value for _, _, c in pairs])
        for c in np.unique(classes):
            sel = classes == c
            weights[sel] = logistic_weights(raw[sel])
    else:
        weights[:] = logistic_weights(raw)
    A = np.zeros((topology.n_nodes, topology.n_nodes))
    for (s, d, _), w in zip(pairs, weights):
        A[topology.node_index(s), topology.node_index(d)] = w
    return A


@dataclass(frozen=True)
class AdjacencyBlocks:
    """The three sub-blocks of ``A`` the model consumes, oriented for row-batched math."""
    seg_seg: np.ndarray  # (N, N): [j, i] = A_ji for j in N(i)
    seg_res: np.ndarray  # (N, M): [i, k] = A_ik for i in S(k)
    res_seg: np.ndarray  # (M, N): [k, i] = A_ki for i in S_dn(k)

    @classmethod
    def from_matrix(cls, A: np.ndarray, n_segments: int) -> "AdjacencyBlocks":
        n = n_segments
        return cls(seg_seg=A[:n, :n].copy(), seg_res=A[:n, n:].copy(), res_seg=A[n:, :n].copy())


# ------------------------------------------------------------------------ csv

EDGE_COLUMNS = ["source_kind", "source_id", "target_kind", "target_id", "edge_class",
                "stream_distance_m"]


def write_edges_csv(topology: NetworkTopology, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EDGE_COLUMNS)
        for e in topology.edges:
            w.writerow([e.source.kind.value, e.source.index, e.target.kind.value, e.target.index,
                        e.edge_class.value, repr(float(e.stream_distance))])


def read_edges_csv(path: Path, n_segments: int | None = None,
                   n_reservoirs: int | None = None) -> NetworkTopology:
    """Parse ``edges.csv``; node counts default to the ids seen in the file."""
    from .data import SchemaError  # local import: data depends on this module

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EDGE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{Path(path).name}: missing columns {missing}")
        raw = [(row["source_kind"], int(row["source_id"]), row["target_kind"], int(row["target_id"]),
                row["edge_class"], float(row["stream_distance_m"])) for row in reader]
    seen = {NodeKind.SEGMENT: set(), NodeKind.RESERVOIR: set()}
    for sk, si, tk, ti, _, _ in raw:
        seen[NodeKind(sk)].add(si)
        seen[NodeKind(tk)].add(ti)
    n_seg = n_segments if n_segments is not None else (max(seen[NodeKind.SEGMENT]) + 1
                                                       if seen[NodeKind.SEGMENT] else 0)
    n_res = n_reservoirs if n_reservoirs is not None else (max(seen[NodeKind.RESERVOIR]) + 1
                                                           if seen[NodeKind.RESERVOIR] else 0)
    nodes = [seg(i) for i in range(n_seg)] + [res(k) for k in range(n_res)]
    edges = [((sk, si), (tk, ti), cls, d) for sk, si, tk, ti, cls, d in raw]
    return build_topology(nodes, edges)
