"""Per-slice bipartite user-item graphs and their normalized adjacency.

Each time slice gets one undirected bipartite graph over the users/items
active in it. Duplicate interactions collapse to a single binary edge; the
stored matrix is D^-0.5 A D^-0.5 with zero diagonal, in CSR with sorted
column indices so iteration order (and therefore training) is reproducible.
Users occupy local rows [0, M_s), items [M_s, M_s + N_s).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .dataset import InteractionLog
from .errors import ContractError


@dataclass
class SliceGraph:
    slice_index: int
    active_users: np.ndarray   # sorted global user indices, size M_s
    active_items: np.ndarray   # sorted global item indices, size N_s
    edges: np.ndarray          # unique (local_user, local_item) pairs, shape (E, 2)
    norm_adjacency: sp.csr_matrix | None  # shape (M_s+N_s, M_s+N_s)

    @property
    def num_nodes(self) -> int:
        return self.active_users.size + self.active_items.size

    @property
    def num_users(self) -> int:
        return self.active_users.size

    def user_local(self, global_users) -> np.ndarray:
        return np.searchsorted(self.active_users, global_users)

    def item_local(self, global_items) -> np.ndarray:
        """Local row of an item (offset past the user block)."""
        return self.active_users.size + np.searchsorted(self.active_items, global_items)


def _graph_from_pairs(slice_index: int, users: np.ndarray, items: np.ndarray) -> SliceGraph:
    if users.size == 0:
        return SliceGraph(slice_index, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                          np.empty((0, 2), dtype=np.int64), None)
    pairs = np.unique(np.stack([users, items], axis=1), axis=0)
    active_users = np.unique(pairs[:, 0])
    active_items = np.unique(pairs[:, 1])
    lu = np.searchsorted(active_users, pairs[:, 0])
    li = np.searchsorted(active_items, pairs[:, 1])
    m = active_users.size
    n_nodes = m + active_items.size

    deg = np.zeros(n_nodes, dtype=np.int64)
    np.add.at(deg, lu, 1)
    np.add.at(deg, m + li, 1)
    inv_sqrt = 1.0 / np.sqrt(deg.astype(np.float64))
    vals = inv_sqrt[lu] * inv_sqrt[m + li]

    rows = np.concatenate([lu, m + li])
    cols = np.concatenate([m + li, lu])
    data = np.concatenate([vals, vals])
    adj = sp.csr_matrix((data, (rows, cols)), shape=(n_nodes, n_nodes))
    adj.sort_indices()
    edges = np.stack([lu, li], axis=1)
    return SliceGraph(slice_index, active_users, active_items, edges, adj)


def build_slice_graphs(log: InteractionLog) -> list[SliceGraph]:
    """One graph per slice; empty slices yield empty graphs so indexing holds."""
    if not log.sliced:
        raise ContractError("assign slices before building graphs")
    graphs = []
    for s in range(log.slice_count):
        mask = log.slices == s
        graphs.append(_graph_from_pairs(s, log.users[mask], log.items[mask]))
    return graphs


def merge_graphs(graphs: list[SliceGraph]) -> SliceGraph:
    """Single graph over the distinct user-item pairs of several slices."""
    users, items = [], []
    last_index = 0
    for g in graphs:
        if g.edges.size:
            users.append(g.active_users[g.edges[:, 0]])
            items.append(g.active_items[g.edges[:, 1]])
        last_index = g.slice_index
    if not users:
        return _graph_from_pairs(last_index, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    return _graph_from_pairs(last_index, np.concatenate(users), np.concatenate(items))


def spmm(graph: SliceGraph, x: ad.Tensor) -> ad.Tensor:
    """One propagation hop: multiply node features by the normalized adjacency."""
    if graph.norm_adjacency is None:
        raise ContractError("spmm on an empty slice graph")
    if x.shape[0] != graph.num_nodes:
        raise ContractError(f"feature rows {x.shape[0]} != node count {graph.num_nodes}")
    return ad.spmm(graph.norm_adjacency, x)


def dump_edges(graphs: list[SliceGraph], path) -> None:
    """Debug dump: one `slice<TAB>user<TAB>item<TAB>weight` line per edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            if g.norm_adjacency is None:
                continue
            m = g.num_users
            for lu, li in g.edges:
                w = g.norm_adjacency[lu, m + li]
                fh.write(f"{g.slice_index}\t{g.active_users[lu]}\t{g.active_items[li]}\t{w:.12g}\n")
