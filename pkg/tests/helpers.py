"""Shared builders and brute-force reference implementations for the test suite.

The reference implementations here are deliberately naive (explicit loops,
Python sorts and set operations) so they share no code path with the
vectorised library routines they check.
"""

from __future__ import annotations

import math

import numpy as np

from dyntraj.embedding import EmbeddingMatrix, EmbeddingSeries
from dyntraj.graph import NodeRegistry


def make_series(snapshots, labels=None) -> EmbeddingSeries:
    """Series from a list of ``{label: vector}`` dicts, one per snapshot."""
    if labels is None:
        seen = {}
        for snap in snapshots:
            for lab in snap:
                seen.setdefault(lab)
        labels = tuple(seen)
    registry = NodeRegistry(tuple(labels))
    mats = []
    for t, snap in enumerate(snapshots):
        ids = sorted(registry.index[lab] for lab in snap)
        rows = np.array([np.asarray(snap[registry.labels[i]], dtype=np.float64) for i in ids])
        mats.append(EmbeddingMatrix(t, str(t), np.array(ids, dtype=np.int64), rows))
    return EmbeddingSeries(tuple(mats), registry)


def random_series(rng, n_max=50, t_max=6, d=None, churn=0.2, min_common=None) -> EmbeddingSeries:
    """Random series with node churn; consecutive snapshots share enough nodes for depth-``min_common`` metrics."""
    n = int(rng.integers(8, n_max + 1))
    T = int(rng.integers(2, t_max + 1))
    d = int(rng.integers(2, 9)) if d is None else d
    labels = [f"v{i}" for i in range(n)]
    snaps = []
    for _ in range(T):
        present = rng.random(n) > churn
        if min_common is not None:
            present[: min_common + 1] = True
        snaps.append({labels[i]: rng.normal(size=d) for i in np.flatnonzero(present)})
    return make_series(snaps, labels)


# -- analytics oracles -------------------------------------------------------------


def cos(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b)) / (na * nb)))


def naive_ranking(vectors: dict, i, space="raw_embedding") -> list:
    """All other keys of ``vectors`` ordered nearest first, ties by key."""
    vi = vectors[i]
    others = [j for j in vectors if j != i]
    if space == "raw_embedding":
        key = {j: -cos(vi, vectors[j]) for j in others}
    else:
        key = {j: math.dist(vi, vectors[j]) for j in others}
    return sorted(others, key=lambda j: (key[j], j))


def naive_vectors(series: EmbeddingSeries, t: int, keep=None) -> dict:
    m = series.matrices[t]
    out = {int(n): [float(x) for x in m.rows[r]] for r, n in enumerate(m.ids)}
    if keep is not None:
        out = {n: v for n, v in out.items() if n in keep}
    return out


def naive_rbo(a, b, p, m) -> float:
    return (1 - p) * sum(p ** (d - 1) * len(set(a[:d]) & set(b[:d])) / d for d in range(1, m + 1))


def naive_metrics(series: EmbeddingSeries, n: int, m: int, p: float) -> dict:
    """Every per-node metric plus the scalars, recomputed from scratch."""
    per = {}
    narc_terms, rbo_raw_t, rbo_norm_t, l1_t, l2_t = [], [], [], [], []
    for t in range(1, series.T):
        prev_all, cur_all = naive_vectors(series, t - 1), naive_vectors(series, t)
        common = set(prev_all) & set(cur_all)
        prev = {k: prev_all[k] for k in sorted(common)}
        cur = {k: cur_all[k] for k in sorted(common)}
        N = len(common)
        arcs, raws, norms, l1s, l2s = [], [], [], [], []
        for i in sorted(common):
            ra, rb = naive_ranking(prev, i), naive_ranking(cur, i)
            jac = len(set(ra[:n]) & set(rb[:n])) / len(set(ra[:n]) | set(rb[:n]))
            raw = naive_rbo(ra, rb, p, m)
            norm = raw / (1 - p**m)
            rank_a = {j: r + 1 for r, j in enumerate(ra)}
            rank_b = {j: r + 1 for r, j in enumerate(rb)}
            rank_a[i] = rank_b[i] = 0
            a = sum(abs(rank_b[j] - rank_a[j]) for j in common) / N
            diff = [x - y for x, y in zip(cur[i], prev[i])]
            l1 = sum(abs(x) for x in diff)
            l2 = math.sqrt(sum(x * x for x in diff))
            per[(i, t)] = {"jaccard_n": jac, "rbo_raw": raw, "rbo_norm": norm, "arc": a, "l1": l1, "l2": l2}
            arcs.append(a)
            raws.append(raw)
            norms.append(norm)
            l1s.append(l1)
            l2s.append(l2)
        narc_terms.append(sum(arcs) / (N - 1))
        rbo_raw_t.append(sum(raws) / N)
        rbo_norm_t.append(sum(norms) / N)
        l1_t.append(sum(l1s) / N)
        l2_t.append(sum(l2s) / N)
    k = len(narc_terms)
    return {
        "per": per,
        "narc": sum(narc_terms) / k,
        "macro_rbo_raw": sum(rbo_raw_t) / k,
        "macro_rbo_norm": sum(rbo_norm_t) / k,
        "L1": sum(l1_t) / k,
        "L2": sum(l2_t) / k,
    }


def naive_topk(sims, k, exclude=None) -> list:
    """Exhaustive sort of candidate indices by (-similarity, index)."""
    cand = [j for j in range(len(sims)) if j != exclude]
    return sorted(cand, key=lambda j: (-sims[j], j))[:k]


# -- linear algebra oracle ----------------------------------------------------------


def jacobi_eigenvalues(A, tol=1e-14, max_sweeps=100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, float(np.abs(np.diag(A)).max())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]
