"""Level-organized block connectivity: candidate edges, peer sets, pruning, DOT export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from peernet import tensor as tn
from peernet.attention import AttentionBinding, select_peer
from peernet.blocks import BlockSpec
from peernet.tensor import Tensor

DEFAULT_PRUNE_THRESHOLD = 0.2


class GraphError(ValueError):
    pass


@dataclass
class ConnectionEdge:
    src: int
    dst: int
    weight: Tensor = field(default_factory=lambda: tn.parameter(0.0))
    attention: AttentionBinding = field(default_factory=AttentionBinding)

    @property
    def strength(self) -> float:
        """Effective gate ``sigmoid(w)``."""
        w = self.weight.item()
        return 1.0 / (1.0 + math.exp(-w)) if w >= 0 else math.exp(w) / (1.0 + math.exp(w))

    def clone(self) -> "ConnectionEdge":
        return ConnectionEdge(self.src, self.dst, self.weight.clone(), self.attention.clone())


class ConnectivityGraph:
    def __init__(self, blocks: Iterable[BlockSpec], edges: Iterable[ConnectionEdge] = ()):
        self.blocks: dict[int, BlockSpec] = {}
        for b in blocks:
            if b.index in self.blocks:
                raise GraphError(f"duplicate block index {b.index}")
            self.blocks[b.index] = b
        self.edges: list[ConnectionEdge] = []
        seen = set()
        for e in edges:
            if e.src not in self.blocks or e.dst not in self.blocks:
                raise GraphError(f"edge {e.src}->{e.dst} references an unknown block")
            if self.level(e.src) >= self.level(e.dst):
                raise GraphError(
                    f"edge {e.src}->{e.dst} violates the level rule "
                    f"({self.level(e.src)} >= {self.level(e.dst)})"
                )
            if (e.src, e.dst) in seen:
                raise GraphError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))
            self.edges.append(e)
        self.edges.sort(key=lambda e: (e.dst, e.src))

    def level(self, index: int) -> int:
        return self.blocks[index].level

    def incoming(self, index: int) -> list[ConnectionEdge]:
        return [e for e in self.edges if e.dst == index]

    def outgoing(self, index: int) -> list[ConnectionEdge]:
        return [e for e in self.edges if e.src == index]

    def edge_pairs(self) -> list[tuple[int, int]]:
        return [(e.src, e.dst) for e in self.edges]

    def edge(self, src: int, dst: int) -> ConnectionEdge:
        for e in self.edges:
            if e.src == src and e.dst == dst:
                return e
        raise KeyError((src, dst))

    def peer_set(self, dst: int) -> tuple[int, ...]:
        return peer_set((None, dst), self.blocks.values())

    def copy(self) -> "ConnectivityGraph":
        return ConnectivityGraph(self.blocks.values(), [e.clone() for e in self.edges])

    def __len__(self) -> int:
        return len(self.blocks)


def valid_edges(blocks: Iterable[BlockSpec]) -> list[tuple[int, int]]:
    """Every pair (j, i) with L(j) < L(i), ordered by destination then source."""
    blocks = sorted(blocks, key=lambda b: b.index)
    return [(j.index, i.index) for i in blocks for j in blocks if j.level < i.level]


def peer_set(edge: tuple[int | None, int], blocks: Iterable[BlockSpec]) -> tuple[int, ...]:
    """Blocks at a lower level than the edge's destination, sorted by index."""
    blocks = list(blocks)
    dst = edge[1]
    level = next(b.level for b in blocks if b.index == dst)
    return tuple(sorted(b.index for b in blocks if b.level < level))


def topo_order(graph: ConnectivityGraph) -> list[int]:
    order = sorted(graph.blocks, key=lambda i: (graph.level(i), i))
    position = {idx: n for n, idx in enumerate(order)}
    for e in graph.edges:
        if position[e.src] >= position[e.dst]:
            raise GraphError(f"edge {e.src}->{e.dst} does not go forward in level order")
    return order


def prune_connections(
    graph: ConnectivityGraph, threshold: float = DEFAULT_PRUNE_THRESHOLD
) -> ConnectivityGraph:
    """Drop edges whose gate ``sigmoid(w)`` is below ``threshold``.

    A non-input block that would lose every incoming edge keeps its single
    strongest one (lowest source index on ties).
    """
    kept: list[ConnectionEdge] = []
    for dst in sorted(graph.blocks):
        incoming = graph.incoming(dst)
        if not incoming:
            continue
        survivors = [e for e in incoming if e.strength >= threshold]
        if not survivors and not graph.blocks[dst].is_input:
            best = max(incoming, key=lambda e: (e.strength, -e.src))
            survivors = [best]
        kept.extend(survivors)
    return ConnectivityGraph(graph.blocks.values(), [e.clone() for e in kept])


def prune_attention(graph: ConnectivityGraph) -> ConnectivityGraph:
    """Replace every oneshot binding by a peer binding on its argmax peer."""
    edges = []
    for e in graph.edges:
        attention = select_peer(e.attention) if e.attention.mode == "oneshot" else e.attention.clone()
        edges.append(ConnectionEdge(e.src, e.dst, e.weight.clone(), attention))
    return ConnectivityGraph(graph.blocks.values(), edges)


def dense_edges(blocks: Iterable[BlockSpec]) -> list[ConnectionEdge]:
    return [ConnectionEdge(j, i) for j, i in valid_edges(blocks)]


def _node_label(b: BlockSpec) -> str:
    if b.is_input:
        return f"{b.index}: {b.kind.removeprefix('input-')} C={b.channels}"
    return f"{b.index}: L{b.level} C={b.channels} d={b.temporal_dilation} s={b.spatial_stride}"


def to_dot(graph: ConnectivityGraph) -> str:
    lines = ["digraph {"]
    if graph.blocks:
        lines.append("  rankdir=LR;")
    for idx in sorted(graph.blocks):
        b = graph.blocks[idx]
        shape = "box" if b.is_input else "ellipse"
        lines.append(f'  n{idx} [label="{_node_label(b)}", shape={shape}];')
    for e in graph.edges:
        style = ', color=blue, penwidth=2' if graph.blocks[e.src].kind == "input-object" else ""
        lines.append(f'  n{e.src} -> n{e.dst} [label="{e.strength:.3f}"{style}];')
    for e in graph.edges:
        att = e.attention
        if att.mode == "self":
            lines.append(f'  n{e.src} -> n{e.dst} [style=dashed, label="self {e.src}->{e.dst}"];')
        elif att.mode == "peer":
            lines.append(f'  n{att.peer} -> n{e.dst} [style=dashed, label="peer {e.src}->{e.dst}"];')
        elif att.mode == "oneshot":
            probs = np.exp(att.h.data - att.h.data.max())
            probs /= probs.sum()
            k = int(np.argmax(probs))
            lines.append(
                f'  n{att.peers[k]} -> n{e.dst} '
                f'[style=dashed, label="oneshot {e.src}->{e.dst} p={probs[k]:.3f}"];'
            )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(graph: ConnectivityGraph, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.write_text(to_dot(graph), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write DOT file {path}: {exc}") from exc
    return path


def count_dot(text: str) -> tuple[int, int, int]:
    """(nodes, solid edges, dashed edges) in DOT text written by :func:`to_dot`."""
    nodes = solid = dashed = 0
    for line in text.splitlines():
        line = line.strip()
        if "->" in line:
            if "style=dashed" in line:
                dashed += 1
            else:
                solid += 1
        elif line.startswith("n") and "[label=" in line:
            nodes += 1
    return nodes, solid, dashed


def attention_peers(graph: ConnectivityGraph) -> dict[tuple[int, int], Sequence[int]]:
    return {(e.src, e.dst): e.attention.source_blocks(e.src) for e in graph.edges}
