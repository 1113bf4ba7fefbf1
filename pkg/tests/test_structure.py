import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cltm.kernel_distance import DistanceMatrix
from cltm.latent_tree import LatentTree
from cltm.structure import (ExtendedDistances, chow_liu_tree, clrg, load_tree, recursive_grouping,
                            save_tree, sibling_statistic, tree_similarity)
from cltm.synthetic import random_latent_tree
from helpers import path_distance_matrix


def dm(d, names=None):
    d = np.asarray(d, dtype=float)
    return DistanceMatrix(d, names or [f"y{i}" for i in range(len(d))], 20.0)


def observed_metric(tree, lengths=None):
    return dm(path_distance_matrix(tree, lengths, list(range(tree.observed_count))), list(tree.observed))


def quartet():
    # a, b under h1; c, d under h2; every edge length 1
    return LatentTree.from_edges(["a", "b", "c", "d"], 2, [(0, 4), (1, 4), (2, 5), (3, 5), (4, 5)])


def test_chow_liu_examples():
    assert chow_liu_tree(dm([[0, 3], [3, 0]])).edges == ((0, 1),)
    t = chow_liu_tree(dm([[0, 1, 2], [1, 0, 1.5], [2, 1.5, 0]]))
    assert t.edges == ((0, 1), (1, 2)) and t.latent_count == 0


def test_chow_liu_ties_broken_by_index():
    t = chow_liu_tree(dm(np.ones((4, 4)) - np.eye(4)))
    assert t.edges == ((0, 1), (0, 2), (0, 3))


def test_chow_liu_rejects_non_finite():
    with pytest.raises(ValueError):
        chow_liu_tree(dm([[0, np.inf], [np.inf, 0]]))


def test_sibling_statistic_examples():
    d = path_distance_matrix(quartet())
    # a, b siblings: constant over witnesses c, d
    assert sibling_statistic(d, 0, 1, 2) == sibling_statistic(d, 0, 1, 3) == 0.0
    # h1 lies on the path from a to c
    assert sibling_statistic(d, 4, 0, 2) == -d[4, 0]
    with pytest.raises(ValueError):
        sibling_statistic(d, 0, 0, 1)


def test_grouping_three_leaves_star():
    ext = ExtendedDistances(np.full((3, 3), 2.0) - 2 * np.eye(3))
    edges, new = recursive_grouping(ext, [0, 1, 2], 1e-9)
    assert new == [3]
    assert sorted(edges) == [(3, 0), (3, 1), (3, 2)]
    np.testing.assert_allclose(ext[3, :3], [1.0, 1.0, 1.0], atol=1e-12)


def test_grouping_two_nodes_joined_directly():
    ext = ExtendedDistances([[0, 1], [1, 0]])
    edges, new = recursive_grouping(ext, [0, 1], 1e-9)
    assert edges == [(0, 1)] and new == []


def test_grouping_quartet():
    ext = ExtendedDistances(path_distance_matrix(quartet(), nodes=[0, 1, 2, 3]))
    edges, new = recursive_grouping(ext, [0, 1, 2, 3], 1e-9)
    assert len(new) == 2
    h, g = new
    assert ext[0, h] == pytest.approx(1.0, abs=1e-12)
    assert ext[h, g] == pytest.approx(1.0, abs=1e-12)


def test_grouping_finds_observed_parent():
    # y1 is the hub of y0, y2, y3
    tree = LatentTree.from_edges(4, 0, [(0, 1), (1, 2), (1, 3)])
    ext = ExtendedDistances(path_distance_matrix(tree, [1.0, 2.0, 0.5]))
    edges, new = recursive_grouping(ext, [0, 1, 2, 3], 1e-9)
    assert new == []
    assert sorted(tuple(sorted(e)) for e in edges) == [(0, 1), (1, 2), (1, 3)]


def test_clrg_star_tree():
    star = LatentTree.from_edges(5, 1, [(5, i) for i in range(5)])
    est = clrg(observed_metric(star), epsilon=1e-6)
    assert est.latent_count == 1 and est.degree(5) == 5
    assert tree_similarity(est, star) == 1.0


def test_clrg_observed_path_has_no_latents():
    path = LatentTree.from_edges(4, 0, [(0, 1), (1, 2), (2, 3)])
    est = clrg(observed_metric(path), epsilon=1e-6)
    assert est.latent_count == 0 and est.edges == path.edges


def test_clrg_two_labels():
    est = clrg(dm([[0, 0.7], [0.7, 0]]))
    assert est.edges == ((0, 1),) and est.latent_count == 0


@pytest.mark.parametrize("seed", range(8))
def test_clrg_exact_recovery_random_lengths(seed):
    rng = np.random.default_rng(100 + seed)
    n_obs = int(rng.integers(4, 13))
    n_lat = int(rng.integers(1, n_obs // 2))
    truth = random_latent_tree(n_obs, n_lat, rng)
    lengths = rng.uniform(0.3, 2.0, len(truth.edges))
    est = clrg(observed_metric(truth, lengths), epsilon=1e-6)
    assert tree_similarity(est, truth) == 1.0
    assert est.latent_count == truth.latent_count


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10**6))
def test_clrg_output_is_valid_latent_tree(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.05, 5.0, (n, n))
    d = np.triu(a, 1) + np.triu(a, 1).T
    matrix = dm(d)
    est = clrg(matrix)
    est.validate()
    assert est.observed_count == n
    assert clrg(matrix) == est


def test_similarity_examples():
    q = quartet()
    assert tree_similarity(q, q) == 1.0
    swapped = LatentTree.from_edges(["a", "b", "c", "d"], 2, [(0, 5), (1, 5), (2, 4), (3, 4), (4, 5)])
    assert tree_similarity(q, swapped) == 1.0
    star = LatentTree.from_edges(4, 1, [(4, i) for i in range(4)])
    path = LatentTree.from_edges(4, 0, [(0, 1), (1, 2), (2, 3)])
    # star splits {0},{1},{2},{3}; path splits {0},{0,1},{3}; shared {0},{3}
    assert tree_similarity(star, path) == pytest.approx(0.5 * (2 / 4 + 2 / 3), abs=1e-15)
    with pytest.raises(ValueError):
        tree_similarity(q, star)


def test_tree_json_and_dot(tmp_path):
    q = quartet()
    save_tree(q, tmp_path / "t.json", tmp_path / "t.dot")
    assert load_tree(tmp_path / "t.json") == q
    assert (tmp_path / "t.dot").read_text() == q.to_dot()
