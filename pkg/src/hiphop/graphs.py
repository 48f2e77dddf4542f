"""Session transition graphs and Jaccard session-similarity graphs."""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass
class SessionGraph:
    """Directed transition graph of one session.

    `nodes` lists the session's unique items in first-occurrence order and
    `alias` maps each position to its node index. `adj_in[i, j]` is the
    weight of edge j -> i normalized by node i's total incoming weight;
    `adj_out` is the same construction on reversed edges.
    """

    nodes: np.ndarray
    alias: np.ndarray
    adj_in: np.ndarray
    adj_out: np.ndarray


@dataclass
class SimilarityGraph:
    """Sparse symmetric session-by-session similarity weights.

    `normalized` is the row-normalized matrix (each nonzero row divided by
    its sum); rows with no neighbors stay all-zero. `scope` is "global"
    (full item sets) or "local" (sets of the last-k items).
    """

    m: int
    weights: sp.csr_matrix
    normalized: sp.csr_matrix
    scope: str
    k: int | None = None


def build_session_graph(session):
    """Build the transition graph of a session; repeated transitions
    accumulate weight before normalization."""
    nodes = []
    index = {}
    for it in session.items:
        if it not in index:
            index[it] = len(nodes)
            nodes.append(it)
    alias = np.array([index[it] for it in session.items], dtype=np.int64)
    n = len(nodes)
    raw = np.zeros((n, n), dtype=np.float64)
    for a, b in zip(alias[:-1], alias[1:]):
        raw[a, b] += 1.0
    # adj_in rows collect incoming edges: adj_in[i, j] = w(j -> i) / indegree(i)
    adj_in = raw.T.copy()
    in_sums = adj_in.sum(axis=1, keepdims=True)
    np.divide(adj_in, in_sums, out=adj_in, where=in_sums > 0)
    adj_out = raw.copy()
    out_sums = adj_out.sum(axis=1, keepdims=True)
    np.divide(adj_out, out_sums, out=adj_out, where=out_sums > 0)
    return SessionGraph(nodes=np.array(nodes), alias=alias, adj_in=adj_in, adj_out=adj_out)


def jaccard(a, b):
    """|A ∩ B| / |A ∪ B| of two item sets; 0 when both are empty."""
    a, b = set(a), set(b)
    if not a and not b:
        return 0.0
    inter = len(a & b)
    union = len(a) + len(b) - inter
    return inter / union


def _item_sets(sessions, scope, k):
    if scope == "local":
        return [frozenset(s.items[-min(k, len(s.items)):]) for s in sessions]
    return [frozenset(s.items) for s in sessions]


def build_similarity_graph(sessions, scope="global", k=None):
    """Pairwise Jaccard weights between sessions, sparse and symmetric.

    Local scope compares only the sets of each session's last min(k, l)
    items. Self-edges are excluded; zero-weight pairs are not stored.
    Overlapping pairs are found through an item -> sessions inverted index,
    so fully disjoint pairs are never touched.
    """
    if not sessions:
        raise ValueError("no sessions given")
    if scope not in ("global", "local"):
        raise ValueError(f"unknown scope {scope!r}")
    if scope == "local" and (k is None or k < 1):
        raise ValueError("local scope requires k >= 1")
    sets = _item_sets(sessions, scope, k)
    m = len(sessions)

    by_item = {}
    for i, s in enumerate(sets):
        for it in s:
            by_item.setdefault(it, []).append(i)
    pairs = set()
    for holders in by_item.values():
        for ai in range(len(holders)):
            for bi in range(ai + 1, len(holders)):
                pairs.add((holders[ai], holders[bi]))

    rows, cols, vals = [], [], []
    for i, j in pairs:
        w = jaccard(sets[i], sets[j])
        if w > 0.0:
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    weights = sp.csr_matrix((vals, (rows, cols)), shape=(m, m), dtype=np.float64)
    return SimilarityGraph(m=m, weights=weights, normalized=_row_normalize(weights), scope=scope, k=k)


def _row_normalize(weights):
    sums = np.asarray(weights.sum(axis=1)).ravel()
    inv = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return sp.diags(inv).dot(weights).tocsr()


def truncate_topk_neighbors(graph, cap):
    """Keep each row's `cap` largest weights (ties to the lower session
    index) and re-normalize. The result may be asymmetric."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    w = graph.weights.tocsr()
    rows, cols, vals = [], [], []
    for i in range(graph.m):
        start, end = w.indptr[i], w.indptr[i + 1]
        idx = w.indices[start:end]
        dat = w.data[start:end]
        if len(idx) > cap:
            # stable sort on descending weight keeps lower indices first on ties
            order = np.argsort(-dat, kind="stable")[:cap]
            idx, dat = idx[order], dat[order]
        rows += [i] * len(idx)
        cols += idx.tolist()
        vals += dat.tolist()
    truncated = sp.csr_matrix((vals, (rows, cols)), shape=(graph.m, graph.m), dtype=np.float64)
    return SimilarityGraph(
        m=graph.m,
        weights=truncated,
        normalized=_row_normalize(truncated),
        scope=graph.scope,
        k=graph.k,
    )


def write_edgelist(graph, path):
    """Export a similarity graph as `i j weight` lines for inspection."""
    coo = graph.weights.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as f:
        for i in order:
            f.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.10g}\n")
