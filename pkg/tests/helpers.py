"""Shared test utilities: finite-difference gradient checks and small
independent graph oracles. Everything here is deliberately naive -- the
point is independence from the library code under test."""
from __future__ import annotations

import numpy as np

from tapeformer import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, entries=None) -> dict:
    """Central finite differences of scalar f at selected flat entries.

    Returns {flat_index: derivative}. ``entries=None`` checks all.
    """
    flat = x.reshape(-1)
    idxs = range(flat.size) if entries is None else entries
    out = {}
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(make_loss, params, h: float = 1e-5, rel_tol: float = 1e-4,
                    max_entries: int | None = None, seed: int = 0) -> float:
    """Compare analytic gradients with central differences.

    ``make_loss`` builds the graph from scratch and returns the scalar
    loss Tensor. Each tensor in ``params`` gets its analytic gradient
    checked entry-by-entry (all entries, or a seeded sample of
    ``max_entries``). Returns the worst relative error seen. The error
    measure is |analytic - numeric| / max(1, |analytic|).
    """
    rng = np.random.default_rng(seed)
    ad.tape_clear()
    for p in params:
        p.zero_grad()
    loss = make_loss()
    ad.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        n = p.data.size
        if max_entries is not None and n > max_entries:
            entries = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        else:
            entries = None

        def f(p=p):
            ad.tape_clear()
            with ad.no_grad():
                return float(make_loss().data)

        num = numeric_grad(f, p.data, h=h, entries=entries)
        ana = p.grad.reshape(-1)
        for i, dv in num.items():
            err = abs(ana[i] - dv) / max(1.0, abs(ana[i]))
            worst = max(worst, err)
            assert err < rel_tol, f"grad mismatch at entry {i}: analytic={ana[i]}, numeric={dv}"
    ad.tape_clear()
    return worst


# ---------------------------------------------------------------------------
# independent graph oracles
# ---------------------------------------------------------------------------


def random_edge_list(rng: np.random.Generator, n: int, density: float):
    """Directed edge list (possibly with duplicates/self-loops)."""
    m = int(density * n * (n - 1))
    edges = []
    for _ in range(m):
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        edges.append((u, v))
    return edges


def undirected_adj_sets(edges, n):
    adj = [set() for _ in range(n)]
    for u, v in edges:
        if u != v:
            adj[u].add(v)
            adj[v].add(u)
    return adj


def floyd_warshall(edges, n) -> np.ndarray:
    """All-pairs shortest hop counts on the undirected simple view."""
    INF = np.inf
    d = np.full((n, n), INF)
    np.fill_diagonal(d, 0.0)
    for u, v in edges:
        if u != v:
            d[u, v] = 1.0
            d[v, u] = 1.0
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def bfs_distances(adj_sets, source) -> dict[int, int]:
    """Plain dict/queue BFS (hop counts from source)."""
    from collections import deque

    dist = {source: 0}
    q = deque([source])
    while q:
        u = q.popleft()
        for w in sorted(adj_sets[u]):
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return dist


def brute_force_clustering(adj_sets, v) -> float:
    nbrs = sorted(adj_sets[v])
    k = len(nbrs)
    if k < 2:
        return 0.0
    links = 0
    for i in range(k):
        for j in range(i + 1, k):
            if nbrs[j] in adj_sets[nbrs[i]]:
                links += 1
    return 2.0 * links / (k * (k - 1))
