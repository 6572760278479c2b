"""Graph container, adjacency normalization, subgraphs and link-prediction splits.

Edges are stored as an ``(E, 2)`` integer array of undirected pairs with
``i < j``, sorted lexicographically.  All sampling takes an explicit
``numpy.random.Generator`` so that results are reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import InputError

TASKS = ("transductive", "inductive", "fewshot")


def quota(fraction: float, total: int, *, ceil: bool = False) -> int:
    """``floor`` (or ``ceil``) of ``fraction * total``, robust to float noise
    such as ``0.7 * 10 == 7.000000000000001``."""
    x = round(fraction * total, 9)
    return int(math.ceil(x) if ceil else math.floor(x))


def canonical_edges(edges, n: Optional[int] = None) -> np.ndarray:
    """Return ``edges`` as a sorted ``(E, 2)`` int64 array with ``i < j``.

    Raises ``InputError`` on self-loops, duplicates (in either orientation)
    or indices outside ``[0, n)``.
    """
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InputError(f"edge list must have shape (E, 2), got {arr.shape}")
    if np.any(arr < 0) or (n is not None and np.any(arr >= n)):
        raise InputError(f"edge index out of range for n={n}")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise InputError("self-loops are not allowed in the edge list")
    arr = np.sort(arr, axis=1)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    arr = arr[order]
    if len(arr) > 1 and np.any(np.all(arr[1:] == arr[:-1], axis=1)):
        raise InputError("duplicate edges in the edge list")
    return arr


def edge_keys(edges: np.ndarray, n: int) -> np.ndarray:
    """Encode canonical pairs as scalars ``i * n + j`` for set operations."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return edges[:, 0] * n + edges[:, 1]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with a dense node-feature matrix."""

    num_nodes: int
    features: np.ndarray
    edges: np.ndarray
    node_ids: Optional[tuple] = None

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 0:
            raise InputError("num_nodes must be non-negative")
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim == 1:
            feats = feats.reshape(n, -1)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise InputError(f"feature matrix has {feats.shape[0] if feats.ndim else 0} rows, expected {n}")
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "edges", _readonly(canonical_edges(self.edges, n)))
        if self.node_ids is not None:
            ids = tuple(self.node_ids)
            if len(ids) != n:
                raise InputError("node_ids length differs from num_nodes")
            object.__setattr__(self, "node_ids", ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def adjacency(self, self_loops: bool = False) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency as CSR, optionally with the identity added."""
        return adjacency_matrix(self.edges, self.num_nodes, self_loops=self_loops)

    def edge_key_set(self) -> np.ndarray:
        return edge_keys(self.edges, self.num_nodes)


def adjacency_matrix(edges, n: int, self_loops: bool = False) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    if self_loops:
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
    data = np.ones(len(rows), dtype=np.float64)
    a = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    a.sort_indices()
    return a


def normalize_adjacency(edges, n: int) -> sp.csr_matrix:
    """Symmetric GCN propagation matrix ``D^-1/2 (A + I) D^-1/2``.

    ``D`` is the degree matrix of ``A + I``, so isolated nodes get a unit
    diagonal entry.
    """
    edges = canonical_edges(edges, n)
    a_tilde = adjacency_matrix(edges, n, self_loops=True)
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    out = (d_inv_sqrt @ a_tilde @ d_inv_sqrt).tocsr()
    out.sort_indices()
    return out


@dataclass(frozen=True, eq=False)
class SubgraphRef:
    """Node-induced subgraph of ``parent`` in local (re-indexed) coordinates."""

    parent: Graph
    node_ids: np.ndarray
    induced_edges: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def features(self) -> np.ndarray:
        return self.parent.features[self.node_ids]

    def to_graph(self) -> Graph:
        ids = None
        if self.parent.node_ids is not None:
            ids = tuple(self.parent.node_ids[i] for i in self.node_ids)
        return Graph(self.num_nodes, self.features, self.induced_edges, ids)


def _induced(edges: np.ndarray, n: int, node_ids: np.ndarray):
    """Edges with both endpoints in ``node_ids``, re-indexed to local positions."""
    local = np.full(n, -1, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    mapped = local[edges]
    keep = np.all(mapped >= 0, axis=1)
    return canonical_edges(mapped[keep])


def induce_subgraph(g: Graph, node_ids) -> SubgraphRef:
    """Subgraph on ``node_ids``; local index ``k`` refers to ``node_ids[k]``."""
    idx = np.asarray(node_ids, dtype=np.int64).ravel()
    if np.any(idx < 0) or np.any(idx >= g.num_nodes):
        raise InputError("subgraph node index out of range")
    if len(np.unique(idx)) != len(idx):
        raise InputError("duplicate node index in subgraph selection")
    return SubgraphRef(g, _readonly(idx.copy()), _readonly(_induced(g.edges, g.num_nodes, idx)))


def sample_context_edges(train_edges, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly pick ``ceil(fraction * E)`` distinct edges (returned sorted)."""
    edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise InputError("cannot sample context edges from an empty edge list")
    if not 0 < fraction <= 1:
        raise InputError(f"context fraction must lie in (0, 1], got {fraction}")
    k = quota(fraction, len(edges), ceil=True)
    pick = np.sort(rng.choice(len(edges), size=k, replace=False))
    return edges[pick]


def sample_context_nodes(g: Graph, fraction: float, rng: np.random.Generator) -> SubgraphRef:
    """Induced subgraph on ``ceil(fraction * n)`` uniformly chosen nodes."""
    if g.num_nodes == 0:
        raise InputError("cannot sample context nodes from an empty graph")
    if not 0 < fraction <= 1:
        raise InputError(f"context fraction must lie in (0, 1], got {fraction}")
    k = quota(fraction, g.num_nodes, ceil=True)
    nodes = np.sort(rng.choice(g.num_nodes, size=k, replace=False))
    return induce_subgraph(g, nodes)


def _count_available(g: Graph, member: Optional[np.ndarray], excluded_keys: np.ndarray) -> int:
    n = g.num_nodes
    total = n * (n - 1) // 2
    if member is None:
        touched = g.num_edges
    else:
        outside = n - int(member.sum())
        total -= outside * (outside - 1) // 2
        touched = int(np.sum(member[g.edges[:, 0]] | member[g.edges[:, 1]])) if g.num_edges else 0
    return total - touched - len(excluded_keys)


def sample_negative_edges(
    g: Graph,
    count: int,
    rng: np.random.Generator,
    constraint=None,
    exclude=None,
) -> np.ndarray:
    """Uniformly sample ``count`` distinct node pairs that are not edges of ``g``.

    If ``constraint`` (a node index collection) is given, each pair has at
    least one endpoint in it.  Pairs listed in ``exclude`` are also avoided
    (used to keep validation and test negatives apart).
    """
    n = g.num_nodes
    count = int(count)
    if count < 0:
        raise InputError("negative sample count")
    member = None
    if constraint is not None:
        member = np.zeros(n, dtype=bool)
        cidx = np.asarray(constraint, dtype=np.int64).ravel()
        if np.any(cidx < 0) or np.any(cidx >= n):
            raise InputError("constraint node index out of range")
        member[cidx] = True
    forbidden = g.edge_key_set()
    excluded = np.zeros(0, dtype=np.int64)
    if exclude is not None and len(exclude):
        excluded = np.setdiff1d(edge_keys(canonical_edges(exclude, n), n), forbidden)
        forbidden = np.union1d(forbidden, excluded)
    if member is not None and len(excluded):
        ex = np.stack([excluded // n, excluded % n], axis=1)
        excluded = excluded[member[ex[:, 0]] | member[ex[:, 1]]]
    available = _count_available(g, member, excluded)
    if count > available:
        raise InputError(f"requested {count} negative pairs but only {available} are available")
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)

    pairs_total = n * (n - 1) // 2
    if pairs_total <= 2_000_000 or 2 * count > available:
        iu, ju = np.triu_indices(n, k=1)
        ok = ~np.isin(iu.astype(np.int64) * n + ju, forbidden)
        if member is not None:
            ok &= member[iu] | member[ju]
        cand = np.flatnonzero(ok)
        pick = np.sort(rng.choice(len(cand), size=count, replace=False))
        return np.stack([iu[cand[pick]], ju[cand[pick]]], axis=1).astype(np.int64)

    forbidden_set = set(forbidden.tolist())
    chosen: list[int] = []
    chosen_set: set[int] = set()
    cnodes = np.flatnonzero(member) if member is not None else None
    while len(chosen) < count:
        batch = max(2 * (count - len(chosen)), 64)
        if cnodes is None:
            a = rng.integers(0, n, size=batch)
        else:
            # one endpoint from the constraint set, then reweight pairs with two
            # members (drawn twice as often) by accepting them half the time
            a = cnodes[rng.integers(0, len(cnodes), size=batch)]
        b = rng.integers(0, n, size=batch)
        coin = rng.random(batch)
        for x, y, c in zip(a.tolist(), b.tolist(), coin.tolist()):
            if x == y:
                continue
            if cnodes is not None and member[y] and c < 0.5:
                continue
            i, j = (x, y) if x < y else (y, x)
            key = i * n + j
            if key in forbidden_set or key in chosen_set:
                continue
            chosen_set.add(key)
            chosen.append(key)
            if len(chosen) == count:
                break
    keys = np.sort(np.asarray(chosen, dtype=np.int64))
    return np.stack([keys // n, keys % n], axis=1)


@dataclass(frozen=True, eq=False)
class SplitBundle:
    """Training graph plus positive/negative evaluation pairs for one task.

    ``train_nodes[k]`` is the full-graph index of local training node ``k``.
    All evaluation pairs are in full-graph indices.
    """

    task: str
    full_graph: Graph
    train_graph: Graph
    train_nodes: np.ndarray
    val_pos: np.ndarray
    val_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray
    train_features_full: Optional[np.ndarray] = None
    heldout_test_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    heldout_val_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def train_edges_full(self) -> np.ndarray:
        """Training edges mapped back to full-graph indices."""
        if len(self.train_graph.edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return canonical_edges(self.train_nodes[self.train_graph.edges])

    def stats(self) -> dict:
        return {
            "task": self.task,
            "nodes": self.full_graph.num_nodes,
            "edges": self.full_graph.num_edges,
            "train_nodes": int(len(self.train_nodes)),
            "train_edges": self.train_graph.num_edges,
            "val_pos": int(len(self.val_pos)),
            "val_neg": int(len(self.val_neg)),
            "test_pos": int(len(self.test_pos)),
            "test_neg": int(len(self.test_neg)),
        }


def _check_fractions(*fracs, allow_zero=False):
    for f in fracs:
        if f < 0 or (f == 0 and not allow_zero):
            raise InputError(f"split fractions must be positive, got {f}")
    if sum(fracs) >= 1:
        raise InputError("split fractions must sum to less than 1")


def _edges_touching(edges: np.ndarray, member: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(len(edges), dtype=bool)
    return member[edges[:, 0]] | member[edges[:, 1]]


def make_transductive_split(
    g: Graph, test_frac: float = 0.10, val_frac: float = 0.05, rng: Optional[np.random.Generator] = None
) -> SplitBundle:
    """Hide ``floor(test_frac*E)`` test and ``floor(val_frac*E)`` validation edges.

    Every node (and its features) stays in the training graph; nodes left
    without edges are kept as isolated nodes.
    """
    rng = rng if rng is not None else np.random.default_rng()
    _check_fractions(test_frac, val_frac)
    e = g.num_edges
    n_test, n_val = quota(test_frac, e), quota(val_frac, e)
    if n_test == 0 or n_val == 0:
        raise InputError(f"graph with {e} edges is too small for the requested split quotas")
    perm = rng.permutation(e)
    test_pos = canonical_edges(g.edges[perm[:n_test]])
    val_pos = canonical_edges(g.edges[perm[n_test : n_test + n_val]])
    train = canonical_edges(g.edges[perm[n_test + n_val :]])
    test_neg = sample_negative_edges(g, n_test, rng)
    val_neg = sample_negative_edges(g, n_val, rng, exclude=test_neg)
    return SplitBundle(
        task="transductive",
        full_graph=g,
        train_graph=Graph(g.num_nodes, g.features, train, g.node_ids),
        train_nodes=_readonly(np.arange(g.num_nodes, dtype=np.int64)),
        val_pos=val_pos,
        val_neg=val_neg,
        test_pos=test_pos,
        test_neg=test_neg,
        train_features_full=g.features,
    )


def make_inductive_split(
    g: Graph,
    test_node_frac: float = 0.05,
    val_node_frac: float = 0.025,
    rng: Optional[np.random.Generator] = None,
) -> SplitBundle:
    """Hold out whole nodes: the test set is every link touching a test node.

    Links between a test node and a validation node count as test links.
    Negatives are non-edges with at least one endpoint in the held-out set.
    """
    rng = rng if rng is not None else np.random.default_rng()
    _check_fractions(test_node_frac, val_node_frac, allow_zero=True)
    n = g.num_nodes
    n_test, n_val = quota(test_node_frac, n), quota(val_node_frac, n)
    if (test_node_frac > 0 and n_test == 0) or (val_node_frac > 0 and n_val == 0):
        raise InputError(f"graph with {n} nodes is too small for the requested node quotas")
    perm = rng.permutation(n)
    test_nodes = np.sort(perm[:n_test])
    val_nodes = np.sort(perm[n_test : n_test + n_val])
    train_nodes = np.sort(perm[n_test + n_val :])

    in_test = np.zeros(n, dtype=bool)
    in_test[test_nodes] = True
    in_val = np.zeros(n, dtype=bool)
    in_val[val_nodes] = True
    touch_test = _edges_touching(g.edges, in_test)
    touch_val = _edges_touching(g.edges, in_val) & ~touch_test
    test_pos = g.edges[touch_test]
    val_pos = g.edges[touch_val]

    test_neg = sample_negative_edges(g, len(test_pos), rng, constraint=test_nodes)
    val_neg = sample_negative_edges(g, len(val_pos), rng, constraint=val_nodes, exclude=test_neg)
    sub = induce_subgraph(g, train_nodes).to_graph()
    return SplitBundle(
        task="inductive",
        full_graph=g,
        train_graph=sub,
        train_nodes=_readonly(train_nodes.astype(np.int64)),
        val_pos=_readonly(val_pos.copy()),
        val_neg=val_neg,
        test_pos=_readonly(test_pos.copy()),
        test_neg=test_neg,
        heldout_test_nodes=_readonly(test_nodes.astype(np.int64)),
        heldout_val_nodes=_readonly(val_nodes.astype(np.int64)),
    )


def make_fewshot_split(
    g: Graph,
    train_node_frac: float,
    rng: Optional[np.random.Generator] = None,
    val_node_frac: float = 0.0,
) -> SplitBundle:
    """Train on the subgraph induced by ``floor(train_node_frac*n)`` nodes and
    test on every remaining link.

    With ``val_node_frac > 0`` a share of the unseen nodes is set aside and
    links touching them form the validation set instead of the test set.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if not 0 < train_node_frac <= 1:
        raise InputError(f"train_node_frac must lie in (0, 1], got {train_node_frac}")
    if val_node_frac < 0 or train_node_frac + val_node_frac > 1:
        raise InputError("validation node fraction leaves no room for the training nodes")
    n = g.num_nodes
    n_train = quota(train_node_frac, n)
    n_val = quota(val_node_frac, n)
    if n_train == 0 or (val_node_frac > 0 and n_val == 0):
        raise InputError(f"graph with {n} nodes is too small for the requested node quotas")
    perm = rng.permutation(n)
    train_nodes = np.sort(perm[:n_train])
    val_nodes = np.sort(perm[n_train : n_train + n_val])
    unseen = np.sort(perm[n_train:])
    test_nodes = np.sort(perm[n_train + n_val :])

    in_train = np.zeros(n, dtype=bool)
    in_train[train_nodes] = True
    in_val = np.zeros(n, dtype=bool)
    in_val[val_nodes] = True
    train_mask = (in_train[g.edges[:, 0]] & in_train[g.edges[:, 1]]) if g.num_edges else np.zeros(0, bool)
    val_mask = _edges_touching(g.edges, in_val) & ~train_mask
    test_pos = g.edges[~train_mask & ~val_mask]
    val_pos = g.edges[val_mask]
    test_constraint = unseen if n_val == 0 else test_nodes
    if len(test_pos) and len(test_constraint) == 0:
        test_constraint = unseen
    test_neg = sample_negative_edges(g, len(test_pos), rng, constraint=test_constraint)
    val_neg = sample_negative_edges(g, len(val_pos), rng, constraint=val_nodes, exclude=test_neg)
    sub = induce_subgraph(g, train_nodes).to_graph()
    return SplitBundle(
        task="fewshot",
        full_graph=g,
        train_graph=sub,
        train_nodes=_readonly(train_nodes.astype(np.int64)),
        val_pos=_readonly(val_pos.copy()),
        val_neg=val_neg,
        test_pos=_readonly(test_pos.copy()),
        test_neg=test_neg,
        heldout_test_nodes=_readonly(test_nodes.astype(np.int64)),
        heldout_val_nodes=_readonly(val_nodes.astype(np.int64)),
    )


def make_split(g: Graph, task: str, rng: np.random.Generator, **fractions) -> SplitBundle:
    if task == "transductive":
        return make_transductive_split(g, rng=rng, **fractions)
    if task == "inductive":
        return make_inductive_split(g, rng=rng, **fractions)
    if task == "fewshot":
        return make_fewshot_split(g, rng=rng, **fractions)
    raise InputError(f"unknown task {task!r}; expected one of {TASKS}")
