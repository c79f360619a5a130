"""Graph compression of one modality's hidden states into a single vector.

sparsify -> coarsen -> attend.  The discrete choices (which edges exist,
which pairs merge) are made on values; everything downstream of them is
differentiable through the edge gates and attention weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .layers import Linear, Module


@dataclass
class SparseGraph:
    num_nodes: int
    edges: list[tuple[int, int]]  # i < j, sorted

    def __post_init__(self):
        for i, j in self.edges:
            if i == j or not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise ValueError(f"invalid edge ({i}, {j}) for {self.num_nodes} nodes")


def sparsify(nodes, k: int = 4) -> SparseGraph:
    """Symmetric kNN graph under Euclidean distance.

    Each node links to its ``min(k, I-1)`` nearest other nodes; equal
    distances go to the lower index.
    """
    x = np.asarray(getattr(nodes, "data", nodes), dtype=np.float64)
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one node")
    if k < 1:
        raise ValueError("k must be positive")
    if not np.all(np.isfinite(x)):
        raise dc.NumericError("non-finite hidden states reached sparsify")
    k = min(k, n - 1)
    if k == 0:
        return SparseGraph(n, [])
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    idx = np.arange(n)
    edges = set()
    for i in range(n):
        others = idx[idx != i]
        order = others[np.lexsort((others, dist[i, others]))[:k]]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    return SparseGraph(n, sorted(edges))


class EdgePoolParams(Module):
    """Edge scoring ``r_ij = w . [h_i || h_j] + b``."""

    def __init__(self, d: int, rng: np.random.Generator | None = None):
        bound = 1.0 / np.sqrt(2 * d)
        w = rng.uniform(-bound, bound, 2 * d) if rng is not None else np.zeros(2 * d)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(1))


@dataclass
class Contraction:
    """Bookkeeping of one coarsening pass."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (i, j, gate)
    clusters: list[list[int]] = field(default_factory=list)  # output node -> input nodes


def edge_gates(nodes: Tensor, edges, pool: EdgePoolParams) -> Tensor:
    """``0.5 + sigmoid(r_ij)`` for every edge, shape (E,)."""
    e = np.asarray(edges, dtype=int).reshape(-1, 2)
    cat = dc.concat([nodes[e[:, 0]], nodes[e[:, 1]]], axis=1)
    r = dc.reshape(cat @ dc.reshape(pool.w, (-1, 1)) + pool.b, (-1,))
    return dc.sigmoid(r) + 0.5


def greedy_matching(gates: np.ndarray, edges) -> list[int]:
    """Edge positions contracted, in contraction order: descending gate,
    ties by (i, j), an edge taken iff both endpoints are still free."""
    e = np.asarray(edges, dtype=int).reshape(-1, 2)
    order = np.lexsort((e[:, 1], e[:, 0], -np.asarray(gates)))
    used: set[int] = set()
    chosen = []
    for pos in order:
        i, j = e[pos]
        if i in used or j in used:
            continue
        used.update((int(i), int(j)))
        chosen.append(int(pos))
    return chosen


def coarsen(nodes: Tensor, graph: SparseGraph, pool: EdgePoolParams) -> tuple[Tensor, Contraction]:
    """Merge greedily matched node pairs into ``s_ij * (h_i + h_j)``.

    Output rows: merged nodes in contraction order, then unmatched nodes in
    their original order.
    """
    n = graph.num_nodes
    if not graph.edges:
        return nodes, Contraction([], [[i] for i in range(n)])
    e = np.asarray(graph.edges, dtype=int)
    gates = edge_gates(nodes, e, pool)
    chosen = greedy_matching(gates.data, e)
    merged_i, merged_j = e[chosen, 0], e[chosen, 1]
    s = gates[np.asarray(chosen)]
    merged = dc.mul(nodes[merged_i] + nodes[merged_j], dc.reshape(s, (-1, 1)))
    matched = set(merged_i.tolist()) | set(merged_j.tolist())
    survivors = [i for i in range(n) if i not in matched]
    info = Contraction(
        [(int(a), int(b), float(g)) for a, b, g in zip(merged_i, merged_j, s.data)],
        [[int(a), int(b)] for a, b in zip(merged_i, merged_j)] + [[i] for i in survivors],
    )
    if survivors:
        merged = dc.concat([merged, nodes[np.asarray(survivors)]], axis=0)
    return merged, info


def coarse_graph(graph: SparseGraph, info: Contraction) -> SparseGraph:
    """Edges between output nodes whose member sets were adjacent."""
    owner = {}
    for new, members in enumerate(info.clusters):
        for m in members:
            owner[m] = new
    edges = set()
    for i, j in graph.edges:
        a, b = owner[i], owner[j]
        if a != b:
            edges.add((min(a, b), max(a, b)))
    return SparseGraph(len(info.clusters), sorted(edges))


class GraphAttention(Module):
    """Dynamic (score-after-nonlinearity) attention with a learnable virtual node.

    Scores ``e_ij = a . LeakyReLU(W h_i + W h_j)``, i.e. the shared-weight
    form of ``W [h_i || h_j]``; messages are ``W h_j``.
    """

    def __init__(self, d: int, heads: int = 1, rng: np.random.Generator | None = None, slope: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.heads, self.slope = d, heads, slope
        lim = np.sqrt(6.0 / (2 * d))
        self.W = [Parameter(rng.uniform(-lim, lim, (d, d))) for _ in range(heads)]
        self.a = [Parameter(rng.uniform(-lim, lim, d)) for _ in range(heads)]
        self.virtual_node = Parameter(rng.uniform(-0.1, 0.1, d))
        self.merge = Linear(heads * d, d, rng) if heads > 1 else None

    def with_virtual(self, nodes: Tensor) -> Tensor:
        return dc.concat([nodes, dc.reshape(self.virtual_node, (1, self.d))], axis=0)

    def weights(self, nodes: Tensor, head: int = 0) -> Tensor:
        """Full ``(T+1) x (T+1)`` attention matrix over the loopless
        complete graph (virtual node last); the diagonal is zero."""
        allnodes = self.with_virtual(nodes)
        n = allnodes.shape[0]
        wh = allnodes @ self.W[head]
        pre = dc.add(dc.reshape(wh, (n, 1, self.d)), dc.reshape(wh, (1, n, self.d)))
        e = dc.reshape(dc.reshape(dc.leaky_relu(pre, self.slope), (n * n, self.d))
                       @ dc.reshape(self.a[head], (-1, 1)), (n, n))
        mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0) if n > 1 else np.zeros((1, 1))
        return dc.softmax(e + mask, axis=1)

    def __call__(self, nodes: Tensor) -> Tensor:
        """Updated virtual node.  Only its row of the attention matrix is
        formed; the other rows never reach the output."""
        T = nodes.shape[0]
        if T < 1:
            raise ValueError("attention needs at least one node")
        outs = []
        for h in range(self.heads):
            wh = nodes @ self.W[h]  # (T, d)
            wv = dc.reshape(self.virtual_node, (1, self.d)) @ self.W[h]
            e = dc.reshape(dc.leaky_relu(wh + wv, self.slope) @ dc.reshape(self.a[h], (-1, 1)), (1, T))
            alpha = dc.softmax(e, axis=1)
            outs.append(dc.reshape(alpha @ wh, (self.d,)))
        if self.merge is None:
            return outs[0]
        return self.merge(dc.reshape(dc.concat(outs, axis=0), (1, -1)))[0]


def attend(nodes: Tensor, att: GraphAttention) -> Tensor:
    return att(nodes)


class MidLevel(Module):
    """Per-modality sparsify/coarsen/attend parameters."""

    def __init__(self, d: int, k: int = 4, rounds: int = 1, heads: int = 1,
                 rng: np.random.Generator | None = None):
        self.k, self.rounds = k, rounds
        self.pools = [EdgePoolParams(d, rng) for _ in range(rounds)]
        self.attention = GraphAttention(d, heads, rng)

    def __call__(self, nodes: Tensor) -> tuple[Tensor, dict]:
        graph = sparsify(nodes, self.k)
        trace = {"num_nodes": graph.num_nodes, "edges": [list(e) for e in graph.edges], "contracted": []}
        for pool in self.pools:
            nodes, info = coarsen(nodes, graph, pool)
            trace["contracted"] += [[i, j, s] for i, j, s in info.pairs]
            graph = coarse_graph(graph, info)
        trace["num_coarse"] = nodes.shape[0]
        return self.attention(nodes), trace


def compress(nodes: Tensor, params: MidLevel) -> Tensor:
    return params(nodes)[0]
