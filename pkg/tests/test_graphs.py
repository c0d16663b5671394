import numpy as np
import pytest

from slicerec import autodiff as ad
from slicerec import dataset, graphs
from slicerec.errors import ContractError
from slicerec.rng import stream


def log_from_triplets(triplets, num_users, num_items, T):
    triplets = sorted(triplets, key=lambda r: r[2])
    log = dataset.InteractionLog(
        users=np.array([r[0] for r in triplets], dtype=np.int64),
        items=np.array([r[1] for r in triplets], dtype=np.int64),
        times=np.array([r[2] for r in triplets], dtype=np.int64),
        num_users=num_users, num_items=num_items, min_interactions=1,
    )
    return dataset.assign_slices(log, T)


def dense_norm_adjacency(num_users, num_items, edges):
    """Oracle: dense D^-0.5 A D^-0.5 over local (user, item) edge pairs."""
    n = num_users + num_items
    A = np.zeros((n, n))
    for lu, li in edges:
        A[lu, num_users + li] = 1.0
        A[num_users + li, lu] = 1.0
    deg = A.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
    return inv[:, None] * A * inv[None, :]


def test_single_edge_graph_unit_weight():
    log = log_from_triplets([(0, 0, 0), (0, 1, 50), (1, 0, 99)], 2, 2, 3)
    gs = graphs.build_slice_graphs(log)
    g0 = gs[0]
    assert g0.num_nodes == 2
    assert g0.norm_adjacency[0, 1] == 1.0
    assert g0.norm_adjacency[1, 0] == 1.0


def test_two_items_one_user_weights():
    log = log_from_triplets([(0, 0, 0), (0, 1, 1), (0, 0, 120), (1, 1, 200)], 2, 2, 3)
    g0 = graphs.build_slice_graphs(log)[0]
    # u0 has degree 2, each item degree 1 -> both entries 1/sqrt(2)
    expected = dense_norm_adjacency(1, 2, g0.edges)
    assert np.allclose(g0.norm_adjacency.toarray(), expected, atol=1e-15)
    assert abs(g0.norm_adjacency[0, 1] - 1 / np.sqrt(2)) < 1e-12


def test_duplicate_interactions_collapse_to_binary_edge():
    log = log_from_triplets([(0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 1, 200)], 2, 2, 3)
    g0 = graphs.build_slice_graphs(log)[0]
    assert g0.edges.shape == (1, 2)
    assert g0.norm_adjacency[0, 1] == 1.0  # binary adjacency, not count-weighted


def test_empty_slice_gives_empty_graph():
    log = log_from_triplets([(0, 0, 0), (1, 1, 299)], 2, 2, 3)
    gs = graphs.build_slice_graphs(log)
    assert len(gs) == 3
    assert gs[1].num_nodes == 0
    assert gs[1].norm_adjacency is None


def test_every_active_node_has_degree():
    log = log_from_triplets([(0, 0, 0), (0, 1, 1), (1, 1, 2), (2, 2, 250)], 3, 3, 3)
    for g in graphs.build_slice_graphs(log):
        if g.num_nodes:
            deg = np.asarray((g.norm_adjacency != 0).sum(axis=1)).ravel()
            assert deg.min() >= 1
            assert np.all(g.norm_adjacency.diagonal() == 0.0)
            assert np.all(g.norm_adjacency.data > 0)


def random_graph(rng, max_side=32):
    m = int(rng.integers(1, max_side + 1))
    n = int(rng.integers(1, max_side + 1))
    n_edges = int(rng.integers(1, m * n + 1))
    lu = rng.integers(0, m, size=n_edges).astype(np.int64)
    li = rng.integers(0, n, size=n_edges).astype(np.int64)
    # inactive ids are simply absent; the builder compacts to the active sets
    return graphs._graph_from_pairs(0, lu, li)


def test_spmm_matches_dense_oracle_on_random_graphs():
    rng = stream(21, "graphs")
    for _ in range(60):
        g = random_graph(rng)
        dense = dense_norm_adjacency(g.num_users, g.active_items.size, g.edges)
        x = rng.normal(size=(g.num_nodes, 5))
        out = graphs.spmm(g, ad.tensor(x))
        assert np.max(np.abs(out.values - dense @ x)) < 1e-12


def test_spmm_single_edge_swaps_rows():
    log = log_from_triplets([(0, 0, 0), (1, 1, 250)], 2, 2, 3)
    g = graphs.build_slice_graphs(log)[0]
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = graphs.spmm(g, ad.tensor(x))
    assert np.array_equal(out.values, x[::-1])


def test_spmm_zero_features_zero_output():
    log = log_from_triplets([(0, 0, 0), (0, 1, 1), (1, 1, 260)], 2, 2, 3)
    g = graphs.build_slice_graphs(log)[0]
    out = graphs.spmm(g, ad.zeros(g.num_nodes, 3))
    assert np.all(out.values == 0.0)


def test_spmm_shape_mismatch():
    log = log_from_triplets([(0, 0, 0), (1, 1, 270)], 2, 2, 3)
    g = graphs.build_slice_graphs(log)[0]
    with pytest.raises(ContractError):
        graphs.spmm(g, ad.zeros(g.num_nodes + 1, 3))


def test_adjacency_symmetry_and_spectral_bound():
    rng = stream(22, "graphs")
    for _ in range(30):
        g = random_graph(rng, max_side=12)
        dense = g.norm_adjacency.toarray()
        assert np.array_equal(dense, dense.T)
        eigs = np.linalg.eigvalsh(dense)
        assert np.max(np.abs(eigs)) <= 1.0 + 1e-9


def test_merge_graphs_unions_distinct_pairs():
    log = log_from_triplets([(0, 0, 0), (0, 1, 120), (0, 0, 130), (1, 1, 260)], 2, 2, 3)
    merged = graphs.merge_graphs(graphs.build_slice_graphs(log)[:2])
    assert merged.edges.shape[0] == 2  # (0,0) deduped across slices, (0,1) once
    assert merged.active_users.tolist() == [0]


def test_dump_edges_format(tmp_path):
    log = log_from_triplets([(0, 0, 0), (0, 1, 1), (1, 1, 260)], 2, 2, 3)
    gs = graphs.build_slice_graphs(log)
    path = tmp_path / "edges.tsv"
    graphs.dump_edges(gs, path)
    lines = path.read_text().strip().split("\n")
    fields = lines[0].split("\t")
    assert fields[0] == "0" and len(fields) == 4
    assert float(lines[0].split("\t")[3]) == pytest.approx(1 / np.sqrt(2))
