"""Examination-flow DAGs for multi-block mobile result pages.

Nodes are items addressed as ``(block, position)`` with 1-based indices.
Edges always point forward in row-major order, so the row-major listing of
the nodes is a valid topological order.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple


class Orientation(str, enum.Enum):
    VERTICAL = "v"
    HORIZONTAL = "h"


class MergeStatus(str, enum.Enum):
    TANDEM = "tandem"
    MERGE = "merge"


class EdgeType(enum.IntEnum):
    INTRA_BLOCK = 0
    V_TO_H = 1
    H_TO_V = 2
    BLOCK_SKIP = 3
    H_TO_H = 4
    # adjacent vertical blocks; only produced for non-F-shape layouts
    V_TO_V = 5

    @property
    def label(self) -> str:
        return _EDGE_LABELS[self]


_EDGE_LABELS = {
    EdgeType.INTRA_BLOCK: "intra",
    EdgeType.V_TO_H: "v->h",
    EdgeType.H_TO_V: "h->v",
    EdgeType.BLOCK_SKIP: "skip",
    EdgeType.H_TO_H: "h->h",
    EdgeType.V_TO_V: "v->v",
}


class NodeId(NamedTuple):
    block: int
    position: int

    def __str__(self) -> str:
        return f"({self.block},{self.position})"


class NodeClass(NamedTuple):
    orientation: Orientation
    merge_status: MergeStatus

    @property
    def key(self) -> str:
        return f"{self.orientation.value}_{self.merge_status.value}"


class Edge(NamedTuple):
    source: NodeId
    target: NodeId
    type: EdgeType


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    orientation: Orientation
    item_count: int

    def __post_init__(self):
        if not isinstance(self.orientation, Orientation):
            object.__setattr__(self, "orientation", Orientation(self.orientation))
        if int(self.item_count) < 1:
            raise LayoutError(f"block needs at least one item, got {self.item_count}")

    def __str__(self) -> str:
        return f"{self.orientation.value}{self.item_count}"


@dataclass(frozen=True)
class PageLayout:
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise LayoutError("layout must contain at least one block")

    @classmethod
    def parse(cls, spec: str) -> "PageLayout":
        """Parse a layout string such as ``"v6,h8,v6"``."""
        blocks = []
        for token in spec.split(","):
            token = token.strip().lower()
            if len(token) < 2 or token[0] not in "vh" or not token[1:].isdigit():
                raise LayoutError(f"bad layout token {token!r} in {spec!r}")
            blocks.append(BlockSpec(Orientation(token[0]), int(token[1:])))
        return cls(tuple(blocks))

    @classmethod
    def of(cls, *blocks: tuple[str, int]) -> "PageLayout":
        return cls(tuple(BlockSpec(Orientation(o), m) for o, m in blocks))

    def __str__(self) -> str:
        return ",".join(str(b) for b in self.blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_items(self) -> int:
        return sum(b.item_count for b in self.blocks)

    @property
    def is_f_shape(self) -> bool:
        return all(
            b.orientation == (Orientation.VERTICAL if t % 2 == 0 else Orientation.HORIZONTAL)
            for t, b in enumerate(self.blocks)
        )

    def block(self, t: int) -> BlockSpec:
        return self.blocks[t - 1]

    def nodes(self) -> list[NodeId]:
        return [
            NodeId(t, j)
            for t, b in enumerate(self.blocks, start=1)
            for j in range(1, b.item_count + 1)
        ]

    def contains(self, node: NodeId) -> bool:
        t, j = node
        return 1 <= t <= len(self.blocks) and 1 <= j <= self.blocks[t - 1].item_count


def _entry(layout: PageLayout, t: int) -> list[NodeId]:
    b = layout.block(t)
    if b.orientation == Orientation.VERTICAL:
        return [NodeId(t, 1)]
    return [NodeId(t, j) for j in range(1, b.item_count + 1)]


def _exit(layout: PageLayout, t: int) -> list[NodeId]:
    b = layout.block(t)
    if b.orientation == Orientation.VERTICAL:
        return [NodeId(t, b.item_count)]
    return [NodeId(t, j) for j in range(1, b.item_count + 1)]


_CROSS_TYPE = {
    (Orientation.VERTICAL, Orientation.HORIZONTAL): EdgeType.V_TO_H,
    (Orientation.HORIZONTAL, Orientation.VERTICAL): EdgeType.H_TO_V,
    (Orientation.HORIZONTAL, Orientation.HORIZONTAL): EdgeType.H_TO_H,
    (Orientation.VERTICAL, Orientation.VERTICAL): EdgeType.V_TO_V,
}


@dataclass(frozen=True)
class PageDag:
    layout: PageLayout
    edges: tuple[Edge, ...]
    node_class: dict[NodeId, NodeClass] = field(compare=False)
    topo_order: tuple[NodeId, ...]

    @cached_property
    def nodes(self) -> tuple[NodeId, ...]:
        return tuple(self.layout.nodes())

    @cached_property
    def index(self) -> dict[NodeId, int]:
        """Row-major position of each node."""
        return {n: k for k, n in enumerate(self.nodes)}

    @cached_property
    def _preds(self) -> dict[NodeId, tuple[NodeId, ...]]:
        out: dict[NodeId, list[NodeId]] = {n: [] for n in self.nodes}
        for e in self.edges:
            out[e.target].append(e.source)
        return {n: tuple(sorted(v)) for n, v in out.items()}

    @cached_property
    def _succs(self) -> dict[NodeId, tuple[NodeId, ...]]:
        out: dict[NodeId, list[NodeId]] = {n: [] for n in self.nodes}
        for e in self.edges:
            out[e.source].append(e.target)
        return {n: tuple(sorted(v)) for n, v in out.items()}

    def predecessors(self, node: NodeId) -> tuple[NodeId, ...]:
        return self._preds[node]

    def successors(self, node: NodeId) -> tuple[NodeId, ...]:
        return self._succs[node]

    def neighbors(self, node: NodeId) -> tuple[NodeId, ...]:
        """Comparison candidates: first-order neighbours in the undirected graph."""
        return tuple(sorted(set(self._preds[node]) | set(self._succs[node])))

    def indegree(self, node: NodeId) -> int:
        return len(self._preds[node])

    def to_dict(self) -> dict:
        return {
            "layout": str(self.layout),
            "nodes": [
                {
                    "block": n.block,
                    "position": n.position,
                    "orientation": self.node_class[n].orientation.value,
                    "class": self.node_class[n].merge_status.value,
                    "indegree": self.indegree(n),
                    "outdegree": len(self.successors(n)),
                }
                for n in self.topo_order
            ],
            "edges": [
                {"source": list(e.source), "target": list(e.target), "type": e.type.label}
                for e in self.edges
            ],
        }


def _enumerate_edges(layout: PageLayout, skip_edges_enabled: bool) -> list[Edge]:
    edges = []
    n = layout.n_blocks
    for t, b in enumerate(layout.blocks, start=1):
        for j in range(2, b.item_count + 1):
            edges.append(Edge(NodeId(t, j - 1), NodeId(t, j), EdgeType.INTRA_BLOCK))
        if t < n:
            kind = _CROSS_TYPE[(b.orientation, layout.block(t + 1).orientation)]
            for src in _exit(layout, t):
                for dst in _entry(layout, t + 1):
                    edges.append(Edge(src, dst, kind))
        if (
            skip_edges_enabled
            and t + 2 <= n
            and b.orientation == Orientation.VERTICAL
            and layout.block(t + 1).orientation == Orientation.HORIZONTAL
            and layout.block(t + 2).orientation == Orientation.VERTICAL
        ):
            for src in _exit(layout, t):
                for dst in _entry(layout, t + 2):
                    edges.append(Edge(src, dst, EdgeType.BLOCK_SKIP))
    return edges


def topo_order(dag: PageDag) -> list[NodeId]:
    """Row-major order; raises AssertionError if any edge points backwards."""
    order = dag.layout.nodes()
    rank = {n: k for k, n in enumerate(order)}
    for e in dag.edges:
        if rank[e.source] >= rank[e.target]:
            raise AssertionError(f"edge {e.source}->{e.target} violates row-major order")
    return order


def classify_nodes(dag: PageDag) -> dict[NodeId, NodeClass]:
    indeg = {n: 0 for n in dag.layout.nodes()}
    for e in dag.edges:
        indeg[e.target] += 1
    return {
        n: NodeClass(
            dag.layout.block(n.block).orientation,
            MergeStatus.MERGE if d > 1 else MergeStatus.TANDEM,
        )
        for n, d in indeg.items()
    }


def build_dag(layout: PageLayout | str, skip_edges_enabled: bool = True) -> PageDag:
    if isinstance(layout, str):
        layout = PageLayout.parse(layout)
    edges = sorted(set(_enumerate_edges(layout, skip_edges_enabled)), key=lambda e: (e.type, e.source, e.target))
    dag = PageDag(layout, tuple(edges), {}, ())
    order = topo_order(dag)
    classes = classify_nodes(dag)
    return PageDag(layout, tuple(edges), classes, tuple(order))


_DAG_CACHE: dict[tuple[str, bool], PageDag] = {}


def cached_dag(layout: PageLayout | str, skip_edges_enabled: bool = True) -> PageDag:
    key = (str(layout), skip_edges_enabled)
    dag = _DAG_CACHE.get(key)
    if dag is None:
        dag = _DAG_CACHE[key] = build_dag(layout, skip_edges_enabled)
    return dag


def degree_table(dag: PageDag) -> str:
    lines = [f"{'node':<10}{'orient':<8}{'class':<8}{'in':>4}{'out':>5}"]
    for n in dag.topo_order:
        c = dag.node_class[n]
        lines.append(
            f"{str(n):<10}{c.orientation.value:<8}{c.merge_status.value:<8}"
            f"{dag.indegree(n):>4}{len(dag.successors(n)):>5}"
        )
    return "\n".join(lines)
