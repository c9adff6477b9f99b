import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peernet import tensor as tn
from peernet.attention import AttentionBinding, make_binding
from peernet.blocks import BlockSpec
from peernet.graph import (
    ConnectionEdge,
    ConnectivityGraph,
    GraphError,
    count_dot,
    dense_edges,
    export_dot,
    peer_set,
    prune_attention,
    prune_connections,
    to_dot,
    topo_order,
    valid_edges,
)


def specs(levels):
    out = []
    for i, lvl in enumerate(levels):
        kind = "input-rgb" if lvl == 0 else "conv"
        out.append(BlockSpec(i, lvl, 4, kind=kind))
    return out


def graph_with_weights(levels, weights):
    blocks = specs(levels)
    edges = [ConnectionEdge(j, i, tn.parameter(w)) for (j, i), w in zip(valid_edges(blocks), weights)]
    return ConnectivityGraph(blocks, edges)


def test_valid_edges_of_three_levels():
    assert valid_edges(specs([0, 1, 2])) == [(0, 1), (0, 2), (1, 2)]


def test_same_level_blocks_are_not_connected():
    assert valid_edges(specs([0, 1, 1])) == [(0, 1), (0, 2)]


def test_level_rule_is_enforced():
    with pytest.raises(GraphError, match="level rule"):
        ConnectivityGraph(specs([0, 1, 1]), [ConnectionEdge(1, 2)])


def test_unknown_block_and_duplicate_edge():
    with pytest.raises(GraphError):
        ConnectivityGraph(specs([0, 1]), [ConnectionEdge(0, 7)])
    with pytest.raises(GraphError, match="duplicate"):
        ConnectivityGraph(specs([0, 1]), [ConnectionEdge(0, 1), ConnectionEdge(0, 1)])


def test_peer_set_is_everything_below_the_destination():
    blocks = specs([0, 0, 1, 1, 2, 3])
    assert peer_set((2, 4), blocks) == (0, 1, 2, 3)
    assert peer_set((0, 4), blocks) == (0, 1, 2, 3)
    assert peer_set((4, 5), blocks) == (0, 1, 2, 3, 4)


def test_topo_order_respects_levels():
    g = ConnectivityGraph(specs([2, 0, 1]), [ConnectionEdge(1, 2), ConnectionEdge(2, 0)])
    assert topo_order(g) == [1, 2, 0]


def test_prune_connections_threshold():
    # sigmoid(-2) ~ 0.119 < 0.2 <= sigmoid(0) = 0.5
    g = graph_with_weights([0, 1, 2], [0.0, -2.0, 0.0])
    pruned = prune_connections(g, 0.2)
    assert pruned.edge_pairs() == [(0, 1), (1, 2)]


def test_prune_keeps_strongest_edge_of_a_starved_block():
    g = graph_with_weights([0, 1, 2], [0.0, -4.0, -3.0])
    assert prune_connections(g, 0.2).edge_pairs() == [(0, 1), (1, 2)]


def test_prune_does_not_alias_parameters():
    g = graph_with_weights([0, 1], [1.0])
    pruned = prune_connections(g)
    pruned.edges[0].weight.data[...] = 5.0
    assert g.edges[0].weight.item() == 1.0


def test_prune_attention_collapses_oneshot_bindings():
    rng = np.random.default_rng(0)
    blocks = specs([0, 0, 1])
    binding = make_binding("oneshot", 0, 4, {0: 4, 1: 4}, rng)
    binding.h.data[:] = [0.1, 0.7]
    g = ConnectivityGraph(blocks, [ConnectionEdge(0, 2, attention=binding)])
    out = prune_attention(g)
    assert out.edges[0].attention.mode == "peer"
    assert out.edges[0].attention.peer == 1
    assert g.edges[0].attention.mode == "oneshot"


def test_dense_edges_cover_valid_edges():
    blocks = specs([0, 1, 1, 2])
    assert [(e.src, e.dst) for e in dense_edges(blocks)] == valid_edges(blocks)


def test_dot_export(tmp_path):
    g = graph_with_weights([0, 1, 2], [0.0, 1.0, 2.0])
    g.edges[2].attention = AttentionBinding("peer", peer=0, head=None)
    path = export_dot(g, tmp_path / "g.dot")
    text = path.read_text()
    assert text.startswith("digraph {")
    assert count_dot(text) == (3, 3, 1)
    assert 'label="0.731"' in text


def test_dot_for_empty_graph():
    assert to_dot(ConnectivityGraph([])) == "digraph {\n}\n"


def test_dot_export_to_missing_directory_fails(tmp_path):
    with pytest.raises(OSError):
        export_dot(ConnectivityGraph(specs([0])), tmp_path / "missing" / "g.dot")


levels_strategy = st.lists(st.integers(0, 4), min_size=2, max_size=9)


@settings(max_examples=200, deadline=None)
@given(levels_strategy, st.data())
def test_graph_invariants_on_random_levels(levels, data):
    blocks = specs(levels)
    edges = valid_edges(blocks)
    lvl = {b.index: b.level for b in blocks}
    assert all(lvl[j] < lvl[i] for j, i in edges)
    for j, i in edges:
        assert peer_set((j, i), blocks) == peer_set((None, i), blocks)
    weights = data.draw(st.lists(st.floats(-5, 5), min_size=len(edges), max_size=len(edges)))
    g = ConnectivityGraph(blocks, [ConnectionEdge(j, i, tn.parameter(w)) for (j, i), w in zip(edges, weights)])
    once = prune_connections(g)
    twice = prune_connections(once)
    assert once.edge_pairs() == twice.edge_pairs()
    for b in blocks:
        if not b.is_input and g.incoming(b.index):
            assert once.incoming(b.index)
