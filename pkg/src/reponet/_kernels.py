"""Compiled inner loops. Inputs are plain numpy arrays; no Python objects."""
import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def glauber_steps(adj, util_w, util_b, same, gamma, sd_out, sd_in, pick_i, pick_j, unif):
    """Run one batch of sequential link revisions in place.

    ``sd_out[i]``/``sd_in[i]`` count same-type dependencies/dependents of i
    and are kept in sync with ``adj``.
    """
    for t in range(pick_i.size):
        i = pick_i[t]
        j = pick_j[t]
        if same[i, j]:
            back = adj[j, i]
            eta = util_w[i, j] + gamma * (sd_out[j] - back + sd_in[i] - back)
        else:
            eta = util_b[i, j]
        new = 1 if unif[t] * (1.0 + math.exp(-eta)) < 1.0 else 0
        if new != adj[i, j]:
            adj[i, j] = new
            if same[i, j]:
                d = 1 if new else -1
                sd_out[i] += d
                sd_in[j] += d


@njit(cache=True, nogil=True)
def glauber_record(adj, util_w, util_b, same, gamma, sd_out, sd_in, pick_i, pick_j, unif,
                   thin, pair_bit, out):
    """Like ``glauber_steps`` but stores the bit-encoded state every ``thin`` steps.

    ``pair_bit[i, j]`` is the bit position of ordered pair (i, j). Returns
    the number of states written to ``out``.
    """
    n = adj.shape[0]
    code = 0
    for a in range(n):
        for b in range(n):
            if adj[a, b]:
                code |= 1 << pair_bit[a, b]
    k = 0
    for t in range(pick_i.size):
        i = pick_i[t]
        j = pick_j[t]
        if same[i, j]:
            back = adj[j, i]
            eta = util_w[i, j] + gamma * (sd_out[j] - back + sd_in[i] - back)
        else:
            eta = util_b[i, j]
        new = 1 if unif[t] * (1.0 + math.exp(-eta)) < 1.0 else 0
        if new != adj[i, j]:
            adj[i, j] = new
            code ^= 1 << pair_bit[i, j]
            if same[i, j]:
                d = 1 if new else -1
                sd_out[i] += d
                sd_in[j] += d
        if (t + 1) % thin == 0:
            out[k] = code
            k += 1
    return k


@njit(cache=True, nogil=True)
def reach_counts(indptr, indices, seeds, k, protected, protected_seed_value, out):
    """Depth-``k`` BFS size from each seed along ``indices`` (seed included).

    Protected nodes are never entered; a protected seed scores
    ``protected_seed_value``.
    """
    n = indptr.size - 1
    stamp = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for s_idx in range(seeds.size):
        s = seeds[s_idx]
        if protected[s]:
            out[s_idx] = protected_seed_value
            continue
        stamp[s] = s_idx
        queue[0] = s
        head = 0
        tail = 1
        level_end = 1
        depth = 0
        while head < tail and depth < k:
            while head < level_end:
                u = queue[head]
                head += 1
                for p in range(indptr[u], indptr[u + 1]):
                    v = indices[p]
                    if stamp[v] != s_idx and not protected[v]:
                        stamp[v] = s_idx
                        queue[tail] = v
                        tail += 1
            level_end = tail
            depth += 1
        out[s_idx] = tail


@njit(cache=True, nogil=True)
def reach_counts_multi(indptr, indices, seeds, ks, protected, protected_seed_value, out):
    """Depth-limited BFS sizes for several depths at once.

    ``ks`` must be ascending; ``out`` has shape (len(seeds), len(ks)).
    """
    n = indptr.size - 1
    kmax = ks[ks.size - 1]
    stamp = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for s_idx in range(seeds.size):
        s = seeds[s_idx]
        if protected[s]:
            for c in range(ks.size):
                out[s_idx, c] = protected_seed_value
            continue
        stamp[s] = s_idx
        queue[0] = s
        head = 0
        tail = 1
        level_end = 1
        depth = 0
        c = 0
        while depth < kmax:
            while head < level_end:
                u = queue[head]
                head += 1
                for p in range(indptr[u], indptr[u + 1]):
                    v = indices[p]
                    if stamp[v] != s_idx and not protected[v]:
                        stamp[v] = s_idx
                        queue[tail] = v
                        tail += 1
            level_end = tail
            depth += 1
            while c < ks.size and ks[c] == depth:
                out[s_idx, c] = tail
                c += 1


@njit(cache=True, nogil=True)
def brandes_partial(indptr, indices, sources, out):
    """Accumulate unnormalized directed betweenness from the given sources."""
    n = indptr.size - 1
    sigma = np.zeros(n, dtype=np.float64)
    dist = np.full(n, -1, dtype=np.int64)
    delta = np.zeros(n, dtype=np.float64)
    order = np.empty(n, dtype=np.int64)
    for s_idx in range(sources.size):
        s = sources[s_idx]
        for v in range(n):
            sigma[v] = 0.0
            dist[v] = -1
            delta[v] = 0.0
        sigma[s] = 1.0
        dist[s] = 0
        order[0] = s
        head = 0
        tail = 1
        while head < tail:
            v = order[head]
            head += 1
            for p in range(indptr[v], indptr[v + 1]):
                w = indices[p]
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    order[tail] = w
                    tail += 1
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
        for idx in range(tail - 1, -1, -1):
            w = order[idx]
            for p in range(indptr[w], indptr[w + 1]):
                x = indices[p]
                if dist[x] == dist[w] + 1:
                    delta[w] += sigma[w] / sigma[x] * (1.0 + delta[x])
            if w != s:
                out[w] += delta[w]
