import numpy as np
import pytest

from graphmdn.errors import ParseError
from graphmdn.graph import SkeletonGraph, human_skeleton, neighbor_mask, parse_graph, path_graph


def test_human_skeleton_has_16_nodes(skeleton):
    assert skeleton.node_count == 16


def test_adjacency_symmetric_unit_diagonal(skeleton):
    a = skeleton.adjacency
    np.testing.assert_array_equal(a, a.T)
    np.testing.assert_array_equal(np.diag(a), np.ones(16))


def test_every_node_reachable_from_root(skeleton):
    parents = skeleton.parents(0)
    for j in range(16):
        seen, cur = 0, j
        while cur != 0:
            cur = parents[cur]
            seen += 1
            assert seen <= 16
    assert len(skeleton.edges) == 15  # a tree


def test_two_node_mask_all_ones():
    np.testing.assert_array_equal(neighbor_mask(path_graph(2)), np.ones((2, 2)))


def test_path_mask_has_no_long_edge():
    m = neighbor_mask(path_graph(3))
    assert m[0, 2] == 0 and m[2, 0] == 0
    assert m[0, 1] == 1 and m[1, 2] == 1


def test_row_sums_are_degree_plus_one(skeleton):
    deg = np.zeros(16, dtype=int)
    for i, j in skeleton.edges:
        deg[i] += 1
        deg[j] += 1
    np.testing.assert_array_equal(neighbor_mask(skeleton).sum(axis=1), deg + 1)


def test_hash_is_stable_and_structure_sensitive(skeleton):
    assert human_skeleton().hash == skeleton.hash
    assert path_graph(16).hash != skeleton.hash


def test_canonical_text_round_trip(skeleton):
    again = parse_graph(skeleton.canonical_text())
    assert again.hash == skeleton.hash


@pytest.mark.parametrize(
    "text",
    ["", "nodes 2\nedge 0 5\n", "nodes 3\nedge 0 1\n", "nodes 2\nedge 0 0\n"],
)
def test_bad_graph_text_rejected(text):
    with pytest.raises((ParseError, ValueError)):
        parse_graph(text)
